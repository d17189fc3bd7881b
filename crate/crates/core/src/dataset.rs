//! On-disk corpus layout:
//!
//! ```text
//! <root>/manifest.toml
//! <root>/<subject>/<video>/frames/NNNN.pgm
//! <root>/<subject>/<video>/masks/NNNN.pbm      (optional)
//! <root>/<subject>/<video>/keypoints.txt       (optional)
//! <root>/<subject>/<video>/background.pgm      (optional)
//! ```
//!
//! Roots without a manifest are scanned: every subdirectory is a subject,
//! every subdirectory of a subject is a `normal` video.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input_err, GaitError, Result};
use crate::optflow::{load_frames_dir, Frame};
use crate::posepatch::{format_keypoints, read_keypoints, PoseKeypoints};
use crate::streams::{derive_seed, substream};
use crate::synthwalk::{generate, sample_identities, Condition, IdentityRanges, Mask, Scene, SyntheticVideo, WalkerIdentity};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub name: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<WalkerIdentity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub subject: String,
    pub video: String,
    pub condition: Condition,
}

/// Which subjects train the network and which are used for evaluation, and
/// how many normal walks of each evaluation subject form the gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train_subjects: Vec<String>,
    pub eval_subjects: Vec<String>,
    pub gallery_videos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub subjects: Vec<SubjectEntry>,
    pub videos: Vec<VideoEntry>,
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn label_of(&self, subject: &str) -> Result<usize> {
        self.subjects
            .iter()
            .find(|s| s.name == subject)
            .map(|s| s.label)
            .ok_or_else(|| input_err!("subject {subject} not in manifest"))
    }

    pub fn videos_of<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a VideoEntry> + 'a {
        self.videos.iter().filter(move |v| v.subject == subject)
    }

    /// Loads `<root>/manifest.toml`, or scans the directory tree.
    pub fn load(root: &Path) -> Result<Manifest> {
        if !root.is_dir() {
            return Err(input_err!("corpus root {} does not exist", root.display()));
        }
        let path = root.join(MANIFEST_FILE);
        if path.is_file() {
            let text = fs::read_to_string(&path).map_err(|e| GaitError::io(&path, e))?;
            let m: Manifest = toml::from_str(&text).map_err(|e| GaitError::format(&path, e.to_string()))?;
            if m.format != MANIFEST_FORMAT {
                return Err(GaitError::format(&path, format!("unsupported manifest format {}", m.format)));
            }
            m.validate()?;
            return Ok(m);
        }
        let mut subjects = Vec::new();
        let mut videos = Vec::new();
        for (label, name) in sorted_subdirs(root)?.into_iter().enumerate() {
            for video in sorted_subdirs(&root.join(&name))? {
                videos.push(VideoEntry {
                    subject: name.clone(),
                    video,
                    condition: Condition::Normal,
                });
            }
            subjects.push(SubjectEntry {
                name,
                label,
                identity: None,
            });
        }
        let m = Manifest {
            format: MANIFEST_FORMAT,
            seed: None,
            split: None,
            subjects,
            videos,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(input_err!("corpus has no subjects"));
        }
        for v in &self.videos {
            self.label_of(&v.subject)?;
        }
        if let Some(s) = &self.split {
            for name in s.train_subjects.iter().chain(&s.eval_subjects) {
                self.label_of(name)?;
            }
            if s.train_subjects.iter().any(|t| s.eval_subjects.contains(t)) {
                return Err(input_err!("train and eval subject sets overlap"));
            }
        }
        Ok(())
    }
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| GaitError::io(dir, e))? {
        let e = e.map_err(|e| GaitError::io(dir, e))?;
        if e.path().is_dir() {
            if let Some(n) = e.file_name().to_str() {
                out.push(n.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn video_dir(root: &Path, v: &VideoEntry) -> PathBuf {
    root.join(&v.subject).join(&v.video)
}

/// Synthetic corpus settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub subjects: usize,
    pub normal_videos: usize,
    pub perturbed_a_videos: usize,
    pub perturbed_b_videos: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Fraction of subjects (leading labels) used for training.
    pub train_fraction: f64,
    pub gallery_videos: usize,
    pub ranges: IdentityRanges,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            subjects: 20,
            normal_videos: 6,
            perturbed_a_videos: 2,
            perturbed_b_videos: 2,
            frames: 64,
            width: 64,
            height: 96,
            train_fraction: 0.5,
            gallery_videos: 4,
            ranges: IdentityRanges::default(),
        }
    }
}

impl CorpusConfig {
    pub fn conditions(&self) -> Vec<Condition> {
        let mut c = vec![Condition::Normal; self.normal_videos];
        c.extend(vec![Condition::PerturbedA; self.perturbed_a_videos]);
        c.extend(vec![Condition::PerturbedB; self.perturbed_b_videos]);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(input_err!("corpus needs at least one subject"));
        }
        if self.conditions().is_empty() {
            return Err(input_err!("corpus needs at least one video per subject"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(input_err!("train_fraction must lie in [0,1]"));
        }
        if self.gallery_videos > self.normal_videos {
            return Err(input_err!(
                "gallery uses {} normal walks but only {} exist",
                self.gallery_videos,
                self.normal_videos
            ));
        }
        self.ranges.validate()
    }
}

pub fn subject_name(label: usize) -> String {
    format!("s{label:03}")
}

pub fn video_name(index: usize) -> String {
    format!("v{index:02}")
}

/// Identities, scene and per-video generation for a corpus seed.
pub fn synth_corpus_videos(cfg: &CorpusConfig, seed: u64) -> Result<(Manifest, Scene, Vec<WalkerIdentity>)> {
    cfg.validate()?;
    let ids = sample_identities(cfg.subjects, &cfg.ranges, &mut substream(seed, "identities", &[]))?;
    let scene = Scene::textured(cfg.width, cfg.height, derive_seed(seed, "background", &[]))?;
    let conditions = cfg.conditions();
    let subjects: Vec<SubjectEntry> = ids
        .iter()
        .enumerate()
        .map(|(label, id)| SubjectEntry {
            name: subject_name(label),
            label,
            identity: Some(id.clone()),
        })
        .collect();
    let videos: Vec<VideoEntry> = (0..cfg.subjects)
        .flat_map(|s| {
            conditions.iter().enumerate().map(move |(i, &c)| VideoEntry {
                subject: subject_name(s),
                video: video_name(i),
                condition: c,
            })
        })
        .collect();
    let n_train = ((cfg.subjects as f64) * cfg.train_fraction).round() as usize;
    let split = Split {
        train_subjects: (0..n_train).map(subject_name).collect(),
        eval_subjects: (n_train..cfg.subjects).map(subject_name).collect(),
        gallery_videos: cfg.gallery_videos,
    };
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        seed: Some(seed),
        split: Some(split),
        subjects,
        videos,
    };
    Ok((manifest, scene, ids))
}

/// Renders one corpus video; the random stream depends only on
/// (seed, subject, video index).
pub fn render_corpus_video(cfg: &CorpusConfig, seed: u64, scene: &Scene, ids: &[WalkerIdentity], label: usize, index: usize) -> Result<SyntheticVideo> {
    let cond = cfg.conditions()[index];
    let mut rng = substream(seed, "corpus", &[label as u64, index as u64]);
    generate(label, &ids[label], cond, cfg.frames, scene, &mut rng)
}

/// Generates and writes a synthetic corpus. A non-empty `root` is only
/// replaced when `overwrite` is set and it already holds a manifest.
pub fn write_corpus(cfg: &CorpusConfig, seed: u64, root: &Path, overwrite: bool) -> Result<Manifest> {
    let (manifest, scene, ids) = synth_corpus_videos(cfg, seed)?;
    prepare_output_root(root, overwrite)?;
    let per_subject = cfg.conditions().len();
    (0..cfg.subjects * per_subject).into_par_iter().try_for_each(|k| {
        let (label, index) = (k / per_subject, k % per_subject);
        let video = render_corpus_video(cfg, seed, &scene, &ids, label, index)?;
        let dir = root.join(subject_name(label)).join(video_name(index));
        write_video(&dir, &video.frames, Some(&video.masks), Some(&video.keypoints), Some(&scene.background))
    })?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml()).map_err(|e| GaitError::io(&path, e))?;
    Ok(manifest)
}

fn prepare_output_root(root: &Path, overwrite: bool) -> Result<()> {
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(|e| GaitError::io(root, e))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(input_err!("{} is not empty; pass overwrite to replace it", root.display()));
            }
            if !root.join(MANIFEST_FILE).is_file() {
                return Err(input_err!("refusing to overwrite {}: it holds no corpus manifest", root.display()));
            }
            fs::remove_dir_all(root).map_err(|e| GaitError::io(root, e))?;
        }
    }
    fs::create_dir_all(root).map_err(|e| GaitError::io(root, e))
}

fn encode_pnm(path: &Path, w: usize, h: usize, bytes: &[u8], subtype: PnmSubtype) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| GaitError::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| GaitError::format(path, e.to_string()))
}

pub fn save_pgm(frame: &Frame, path: &Path) -> Result<()> {
    encode_pnm(path, frame.width(), frame.height(), &frame.to_gray8(), PnmSubtype::Graymap(SampleEncoding::Binary))
}

/// Foreground is stored as set (black) bits.
pub fn save_pbm(mask: &Mask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.bits.iter().map(|&b| b as u8).collect();
    encode_pnm(path, mask.width, mask.height, &bytes, PnmSubtype::Bitmap(SampleEncoding::Binary))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| GaitError::format(path, e.to_string()))?.to_luma8();
    Ok(Mask {
        width: img.width() as usize,
        height: img.height() as usize,
        bits: img.as_raw().iter().map(|&v| v > 127).collect(),
    })
}

pub fn write_video(
    dir: &Path,
    frames: &[Frame],
    masks: Option<&[Mask]>,
    keypoints: Option<&[PoseKeypoints]>,
    background: Option<&Frame>,
) -> Result<()> {
    let fdir = dir.join("frames");
    fs::create_dir_all(&fdir).map_err(|e| GaitError::io(&fdir, e))?;
    for (i, f) in frames.iter().enumerate() {
        save_pgm(f, &fdir.join(format!("{i:04}.pgm")))?;
    }
    if let Some(masks) = masks {
        let mdir = dir.join("masks");
        fs::create_dir_all(&mdir).map_err(|e| GaitError::io(&mdir, e))?;
        for (i, m) in masks.iter().enumerate() {
            save_pbm(m, &mdir.join(format!("{i:04}.pbm")))?;
        }
    }
    if let Some(kps) = keypoints {
        let p = dir.join("keypoints.txt");
        fs::write(&p, format_keypoints(kps)).map_err(|e| GaitError::io(&p, e))?;
    }
    if let Some(bg) = background {
        save_pgm(bg, &dir.join("background.pgm"))?;
    }
    Ok(())
}

/// Everything stored for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoData {
    pub frames: Vec<Frame>,
    pub masks: Option<Vec<Mask>>,
    pub keypoints: Option<Vec<PoseKeypoints>>,
    pub background: Option<Frame>,
}

pub fn load_video(dir: &Path) -> Result<VideoData> {
    let frames = load_frames_dir(&dir.join("frames"))?;
    if frames.is_empty() {
        return Err(input_err!("{} holds no frames", dir.display()));
    }
    let mdir = dir.join("masks");
    let masks = if mdir.is_dir() {
        let mut files: Vec<(u64, PathBuf)> = Vec::new();
        for e in fs::read_dir(&mdir).map_err(|e| GaitError::io(&mdir, e))? {
            let p = e.map_err(|e| GaitError::io(&mdir, e))?.path();
            if let Some(i) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                files.push((i, p));
            }
        }
        files.sort();
        Some(files.iter().map(|(_, p)| load_mask(p)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let kp = dir.join("keypoints.txt");
    let keypoints = if kp.is_file() { Some(read_keypoints(&kp)?) } else { None };
    let bg = dir.join("background.pgm");
    let background = if bg.is_file() { Some(crate::optflow::load_frame(&bg)?) } else { None };
    Ok(VideoData {
        frames,
        masks,
        keypoints,
        background,
    })
}
