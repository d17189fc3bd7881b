//! Configuration and the six commands: synth, flow, train, extract,
//! evaluate and transfer.
//!
//! Every command is a function of its configuration, its inputs and the
//! top-level seed. Output directories are guarded by a lock file.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_video, video_dir, write_corpus, CorpusConfig, Manifest, VideoEntry};
use crate::descriptors::{
    export_csv, extract_features, fuse, load_store, save_store, Fusion, GaitDescriptor, PcaModel,
};
use crate::error::{input_err, GaitError, Result};
use crate::nets::{train, Checkpoint, NetworkSpec, TrainConfig, TrainOutcome, TrainSet};
use crate::optflow::{encode_flow, farneback_flow, FlowConfig, FlowMap, Frame};
use crate::posepatch::{
    build_part_boxes, canonical_parts, patches_for_pair, BoxMode, Part, PatchSpec,
};
use crate::recognizer::{
    evaluate_identification, evaluate_verification, write_cmc_csv, write_roc_csv, Aggregation, EvalReport, Gallery,
    Metric, Sample,
};
use crate::streams::derive_seed;
use crate::synthwalk::{bbox_from_mask, subtract_background, Condition, Mask, DEFAULT_BG_THRESHOLD};

pub const ENV_PREFIX: &str = "GAITFLOW_";
pub const LOCK_FILE: &str = ".gaitflow.lock";
pub const STORE_FILE: &str = "descriptors.bin";
pub const STORE_CSV: &str = "descriptors.csv";
pub const REPORT_FILE: &str = "report.toml";
pub const CMC_FILE: &str = "cmc.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const TRAIN_LOG: &str = "train.log";
const FLOW_MAGIC: &[u8; 8] = b"GFFLOW01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    /// Grayscale frames with keypoint sidecars; all selected parts.
    #[default]
    Keypoints,
    /// Binary silhouettes only; full-body patches from the mask box.
    Silhouette,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Subjects the classifier is trained on; empty means the corpus split.
    pub train_subjects: Vec<String>,
    /// Subjects enrolled and probed; empty means the corpus split.
    pub eval_subjects: Vec<String>,
    /// Leading normal-condition videos per subject used as gallery.
    pub gallery_videos: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_subjects: Vec::new(),
            eval_subjects: Vec::new(),
            gallery_videos: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus_root: PathBuf,
    /// Flow cache directory; flows are recomputed in memory when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow_cache: Option<PathBuf>,
    pub mode: InputMode,
    pub parts: Vec<Part>,
    /// Foot box side as a fraction of the full-body box height.
    pub foot_fraction: f64,
    pub flow_clip: f32,
    pub fusion: Fusion,
    pub metric: Metric,
    pub aggregation: Aggregation,
    /// 0 disables PCA.
    pub pca_dim: usize,
    /// Use only the first `truncation` frames of every evaluated video.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation: Option<usize>,
    pub extract_batch: usize,
    pub split: SplitConfig,
    pub flow: FlowConfig,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            corpus_root: PathBuf::from("corpus"),
            flow_cache: None,
            mode: InputMode::Keypoints,
            parts: Part::ALL.to_vec(),
            foot_fraction: 0.25,
            flow_clip: 16.0,
            fusion: Fusion::Concat,
            metric: Metric::L1,
            aggregation: Aggregation::PerPair,
            pca_dim: 0,
            truncation: None,
            extract_batch: 128,
            split: SplitConfig::default(),
            flow: FlowConfig::default(),
            network: NetworkSpec::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

fn set_key(table: &mut toml::Table, key: &str, path: &[String], raw: &str) -> Result<()> {
    if path.is_empty() || path.iter().any(String::is_empty) {
        return Err(GaitError::Config(format!("malformed override key {key}")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = table;
    for seg in &path[..path.len() - 1] {
        let entry = node
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| GaitError::Config(format!("{key}: {seg} is not a table")))?;
    }
    node.insert(path[path.len() - 1].clone(), value);
    Ok(())
}

/// Overrides: `GAITFLOW_A__B=value` variables first, then `a.b=value`
/// assignments. Values are read as TOML literals when possible and as
/// strings otherwise.
fn apply_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
    sets: &[String],
) -> Result<()> {
    for (key, raw) in vars {
        if let Some(rest) = key.strip_prefix(ENV_PREFIX) {
            let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
            set_key(table, &key, &path, &raw)?;
        }
    }
    for assignment in sets {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| GaitError::Config(format!("override {assignment} lacks '='")))?;
        let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        set_key(table, key, &path, raw.trim())?;
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml_with_overrides(
        text: &str,
        vars: impl IntoIterator<Item = (String, String)>,
        sets: &[String],
    ) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| GaitError::Config(e.to_string()))?;
        apply_overrides(&mut table, vars, sets)?;
        let cfg: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| GaitError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, std::iter::empty(), &[])
    }

    /// Reads a config file (or defaults when `path` is `None`), then applies
    /// process environment overrides and `sets`.
    pub fn load_with(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| GaitError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, std::env::vars(), sets)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        Self::load_with(path, &[])
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GaitError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GaitError::Config(m));
        if self.parts.is_empty() {
            return bad("no body parts selected".into());
        }
        if !(self.flow_clip > 0.0) {
            return bad(format!("flow clip {} must be positive", self.flow_clip));
        }
        if !(self.foot_fraction > 0.0) {
            return bad(format!("foot fraction {} must be positive", self.foot_fraction));
        }
        if self.extract_batch == 0 {
            return bad("extract batch must be positive".into());
        }
        if let Some(l) = self.truncation {
            if l < 2 {
                return bad(format!("truncation {l} leaves no frame pairs"));
            }
        }
        let train: BTreeSet<_> = self.split.train_subjects.iter().collect();
        if self.split.eval_subjects.iter().any(|s| train.contains(s)) {
            return bad("train and eval subject sets overlap".into());
        }
        self.flow.validate()?;
        self.train.validate()?;
        self.network.validate().or_else(|e| match e {
            // The class count is filled in from the training split.
            GaitError::Config(m) if m.contains("classes") => Ok(()),
            e => Err(e),
        })
    }

    /// Parts used for patches; silhouette input forces the full body.
    pub fn effective_parts(&self) -> Vec<Part> {
        match self.mode {
            InputMode::Silhouette => vec![Part::FullBody],
            InputMode::Keypoints => canonical_parts(&self.parts),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train", &[]),
            ..self.train.clone()
        }
    }
}

/// Exclusive ownership of an output directory for the lifetime of a command.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| GaitError::io(dir, e))?;
        Self::at(dir, dir.join(LOCK_FILE))
    }

    /// Lock next to `dir` rather than inside it, for outputs that must stay
    /// exactly as written.
    pub fn beside(dir: &Path) -> Result<Self> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        fs::create_dir_all(parent).map_err(|e| GaitError::io(parent, e))?;
        Self::at(dir, parent.join(format!(".{name}{LOCK_FILE}")))
    }

    fn at(dir: &Path, path: PathBuf) -> Result<Self> {
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(input_err!(
                "{} is locked by another command (remove {} if stale)",
                dir.display(),
                path.display()
            )),
            Err(e) => Err(GaitError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn cmd_synth(cfg: &PipelineConfig, overwrite: bool) -> Result<Manifest> {
    cfg.corpus.validate()?;
    let _lock = DirLock::beside(&cfg.corpus_root)?;
    let m = write_corpus(&cfg.corpus, derive_seed(cfg.seed, "corpus", &[]), &cfg.corpus_root, overwrite)?;
    log::info!("wrote {} videos of {} subjects to {}", m.videos.len(), m.subjects.len(), cfg.corpus_root.display());
    Ok(m)
}

/// Frames the flow is computed on, plus silhouettes in silhouette mode.
fn input_frames(cfg: &PipelineConfig, dir: &Path) -> Result<(Vec<Frame>, Option<Vec<crate::posepatch::PoseKeypoints>>, Option<Vec<Mask>>)> {
    let data = load_video(dir)?;
    match cfg.mode {
        InputMode::Keypoints => {
            let kps = data
                .keypoints
                .ok_or_else(|| input_err!("{} has no keypoints.txt", dir.display()))?;
            Ok((data.frames, Some(kps), None))
        }
        InputMode::Silhouette => {
            let masks = match (data.masks, &data.background) {
                (Some(m), _) => m,
                (None, Some(bg)) => subtract_background(&data.frames, bg, DEFAULT_BG_THRESHOLD)?,
                (None, None) => return Err(input_err!("{} has neither masks nor a background frame", dir.display())),
            };
            let frames = masks.iter().map(Mask::to_frame).collect::<Result<Vec<_>>>()?;
            Ok((frames, None, Some(masks)))
        }
    }
}

fn flow_key(cfg: &PipelineConfig, frames: &[Frame]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(toml::to_string(&cfg.flow).map_err(|e| GaitError::Config(e.to_string()))?);
    h.update(cfg.flow_clip.to_le_bytes());
    for f in frames {
        h.update((f.width() as u32).to_le_bytes());
        h.update((f.height() as u32).to_le_bytes());
        h.update(f.to_gray8());
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

fn write_flow_cache(path: &Path, flows: &[FlowMap], clip: f32) -> Result<()> {
    let (w, h) = flows.first().map_or((0, 0), |f| (f.width, f.height));
    let mut out = Vec::with_capacity(24 + flows.len() * 3 * w * h);
    out.extend_from_slice(FLOW_MAGIC);
    for v in [w as u32, h as u32, flows.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&clip.to_le_bytes());
    for f in flows {
        out.extend_from_slice(f.encoded.as_ref().ok_or_else(|| input_err!("flow not encoded"))?);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| GaitError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out).map_err(|e| GaitError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| GaitError::io(path, e))
}

fn read_flow_cache(path: &Path) -> Result<Vec<FlowMap>> {
    let bytes = fs::read(path).map_err(|e| GaitError::io(path, e))?;
    let bad = |r: &str| GaitError::format(path, r);
    if bytes.len() < 24 || &bytes[..8] != FLOW_MAGIC {
        return Err(bad("not a flow cache file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, n) = (word(0), word(1), word(2));
    let plane = 3 * w * h;
    if bytes.len() != 24 + n * plane {
        return Err(bad("truncated flow cache"));
    }
    Ok(bytes[24..]
        .chunks(plane.max(1))
        .take(n)
        .map(|c| FlowMap {
            width: w,
            height: h,
            u: Vec::new(),
            v: Vec::new(),
            encoded: Some(c.to_vec()),
        })
        .collect())
}

/// Encoded flow for every consecutive pair, through the cache when one is
/// configured. Only the encoded channels are retained.
fn encoded_flows(cfg: &PipelineConfig, entry: &VideoEntry, frames: &[Frame]) -> Result<Vec<FlowMap>> {
    let cache = match &cfg.flow_cache {
        Some(dir) => {
            let key = flow_key(cfg, frames)?;
            let path = dir.join(&entry.subject).join(format!("{}-{key}.flow", entry.video));
            if path.is_file() {
                return read_flow_cache(&path);
            }
            Some(path)
        }
        None => None,
    };
    let flows = (0..frames.len().saturating_sub(1))
        .into_par_iter()
        .map(|i| {
            let f = encode_flow(farneback_flow(&frames[i], &frames[i + 1], &cfg.flow)?, cfg.flow_clip)?;
            Ok(FlowMap {
                u: Vec::new(),
                v: Vec::new(),
                ..f
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = cache {
        write_flow_cache(&path, &flows, cfg.flow_clip)?;
    }
    Ok(flows)
}

/// Flow maps and raw part boxes of one video. Boxes of pair `t` come from
/// frame `t`.
pub struct PreparedVideo {
    pub entry: VideoEntry,
    pub label: usize,
    pub flows: Vec<FlowMap>,
    pub boxes: Vec<Vec<PatchSpec>>,
}

impl PreparedVideo {
    pub fn pairs(&self) -> usize {
        self.flows.len()
    }
}

/// Loads a video, truncating to `truncation` frames when set. Returns
/// `None` when the video is shorter than the truncation length.
pub fn prepare_video(cfg: &PipelineConfig, manifest: &Manifest, entry: &VideoEntry, truncation: Option<usize>) -> Result<Option<PreparedVideo>> {
    let dir = video_dir(&cfg.corpus_root, entry);
    let (frames, kps, masks) = input_frames(cfg, &dir)?;
    if let Some(l) = truncation {
        if frames.len() < l {
            log::warn!("{}/{} has {} frames, fewer than {l}; skipped", entry.subject, entry.video, frames.len());
            return Ok(None);
        }
    }
    if frames.len() < 2 {
        return Err(input_err!("{} needs at least 2 frames", dir.display()));
    }
    let mut flows = encoded_flows(cfg, entry, &frames)?;
    let pairs = truncation.map_or(flows.len(), |l| l - 1);
    flows.truncate(pairs);
    let (fw, fh) = (frames[0].width(), frames[0].height());
    let boxes = (0..pairs)
        .map(|t| match (&kps, &masks) {
            (Some(k), _) => {
                let kp = k
                    .iter()
                    .find(|p| p.frame == t)
                    .ok_or_else(|| input_err!("{} lacks keypoints for frame {t}", dir.display()))?;
                build_part_boxes(kp, fw, fh, cfg.foot_fraction)
            }
            (None, Some(m)) => Ok(vec![bbox_from_mask(&m[t])?]),
            (None, None) => unreachable!("input_frames yields keypoints or masks"),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(PreparedVideo {
        entry: entry.clone(),
        label: manifest.label_of(&entry.subject)?,
        flows,
        boxes,
    }))
}

pub struct ResolvedSplit {
    pub train_subjects: Vec<String>,
    pub eval_subjects: Vec<String>,
}

pub fn resolve_split(cfg: &PipelineConfig, manifest: &Manifest) -> Result<ResolvedSplit> {
    let from_manifest = manifest.split.as_ref();
    let pick = |own: &Vec<String>, other: Option<&Vec<String>>| -> Vec<String> {
        if own.is_empty() { other.cloned().unwrap_or_default() } else { own.clone() }
    };
    let train_subjects = pick(&cfg.split.train_subjects, from_manifest.map(|s| &s.train_subjects));
    let eval_subjects = pick(&cfg.split.eval_subjects, from_manifest.map(|s| &s.eval_subjects));
    for s in train_subjects.iter().chain(&eval_subjects) {
        manifest.label_of(s)?;
    }
    if train_subjects.iter().any(|s| eval_subjects.contains(s)) {
        return Err(GaitError::Config("train and eval subject sets overlap".into()));
    }
    Ok(ResolvedSplit {
        train_subjects,
        eval_subjects,
    })
}

/// Videos of `subjects`, in manifest order.
fn videos_for<'a>(manifest: &'a Manifest, subjects: &[String]) -> Vec<&'a VideoEntry> {
    manifest.videos.iter().filter(|v| subjects.contains(&v.subject)).collect()
}

pub fn prepare_all(cfg: &PipelineConfig, manifest: &Manifest, videos: &[&VideoEntry], truncation: Option<usize>) -> Result<Vec<Option<PreparedVideo>>> {
    videos.par_iter().map(|v| prepare_video(cfg, manifest, v, truncation)).collect()
}

/// Precomputes and caches flow for every video of the corpus.
pub fn cmd_flow(cfg: &PipelineConfig) -> Result<usize> {
    let cache = cfg
        .flow_cache
        .as_ref()
        .ok_or_else(|| GaitError::Config("flow_cache must be set to precompute flow".into()))?;
    let _lock = DirLock::acquire(cache)?;
    let manifest = Manifest::load(&cfg.corpus_root)?;
    let all: Vec<&VideoEntry> = manifest.videos.iter().collect();
    let n = prepare_all(cfg, &manifest, &all, None)?.len();
    log::info!("flow ready for {n} videos in {}", cache.display());
    Ok(n)
}

/// Trains on every patch of the training subjects and writes a checkpoint
/// (`params.bin`, `checkpoint.toml`) and `train.log` into `out`.
pub fn cmd_train(cfg: &PipelineConfig, out: &Path) -> Result<TrainOutcome> {
    let _lock = DirLock::acquire(out)?;
    let manifest = Manifest::load(&cfg.corpus_root)?;
    let split = resolve_split(cfg, &manifest)?;
    if split.train_subjects.len() < 2 {
        return Err(input_err!("training split has {} subjects, need at least 2", split.train_subjects.len()));
    }
    let videos = videos_for(&manifest, &split.train_subjects);
    let prepared: Vec<PreparedVideo> = prepare_all(cfg, &manifest, &videos, None)?.into_iter().flatten().collect();
    let parts = cfg.effective_parts();

    let mut items: Vec<(usize, usize, Part)> = Vec::new();
    let mut by_class = vec![Vec::new(); split.train_subjects.len()];
    for (vi, v) in prepared.iter().enumerate() {
        let class = split.train_subjects.iter().position(|s| *s == v.entry.subject).expect("train video");
        for p in 0..v.pairs() {
            for &part in &parts {
                by_class[class].push(items.len());
                items.push((vi, p, part));
            }
        }
    }
    let render = |item: usize, rng: Option<&mut rand_chacha::ChaCha8Rng>| -> Result<Vec<f32>> {
        let (vi, p, part) = items[item];
        let v = &prepared[vi];
        let raw = v.boxes[p].iter().find(|b| b.part == part).expect("box per part").clone();
        let patch = match rng {
            Some(r) => patches_for_pair(&v.flows[p], &[raw], &[part], p, BoxMode::Augment(r))?,
            None => patches_for_pair::<rand_chacha::ChaCha8Rng>(&v.flows[p], &[raw], &[part], p, BoxMode::Center)?,
        };
        Ok(patch.into_iter().next().expect("one part").data)
    };
    let spec = NetworkSpec {
        classes: split.train_subjects.len(),
        ..cfg.network.clone()
    };
    log::info!("training {} on {} patches of {} subjects", spec.architecture, items.len(), spec.classes);
    let outcome = train(&spec, &TrainSet { by_class, render: &render }, &cfg.train_config())?;
    Checkpoint::new(&outcome.spec, outcome.params.clone(), cfg.seed)?.save(out)?;
    let log_path = out.join(TRAIN_LOG);
    fs::write(&log_path, outcome.log_text()).map_err(|e| GaitError::io(&log_path, e))?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractSummary {
    pub descriptors: Vec<GaitDescriptor>,
    pub videos: usize,
    pub skipped: usize,
    /// Frame features per extracted video, in store order.
    pub features_per_video: Vec<usize>,
}

/// Descriptors (both fusions) for every video of the evaluation subjects,
/// written to `store` with a CSV twin.
pub fn cmd_extract(cfg: &PipelineConfig, checkpoint: &Path, store: &Path) -> Result<ExtractSummary> {
    let out_dir = store.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let _lock = DirLock::acquire(out_dir)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.manifest.architecture != cfg.network.architecture {
        return Err(GaitError::Config(format!(
            "checkpoint holds a {} network, config selects {}",
            ck.manifest.architecture, cfg.network.architecture
        )));
    }
    let manifest = Manifest::load(&cfg.corpus_root)?;
    let split = resolve_split(cfg, &manifest)?;
    let videos = videos_for(&manifest, &split.eval_subjects);
    if videos.is_empty() {
        return Err(input_err!("no videos for the evaluation subjects"));
    }
    let parts = cfg.effective_parts();
    let per_video: Vec<Option<(Vec<GaitDescriptor>, usize)>> = videos
        .par_iter()
        .map(|entry| {
            let Some(v) = prepare_video(cfg, &manifest, entry, cfg.truncation)? else {
                return Ok(None);
            };
            let mut patches = Vec::with_capacity(v.pairs() * parts.len());
            for p in 0..v.pairs() {
                patches.extend(patches_for_pair::<rand_chacha::ChaCha8Rng>(&v.flows[p], &v.boxes[p], &parts, p, BoxMode::Center)?);
            }
            let feats = extract_features(&ck.network, &ck.params, &patches, cfg.extract_batch)?;
            let descs = [Fusion::Avg, Fusion::Concat]
                .into_iter()
                .map(|fusion| {
                    Ok(GaitDescriptor {
                        label: v.label,
                        subject: entry.subject.clone(),
                        video: entry.video.clone(),
                        condition: entry.condition.name().to_string(),
                        fusion,
                        pca_dim: None,
                        vector: fuse(&feats, &parts, fusion)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some((descs, feats.len())))
        })
        .collect::<Result<_>>()?;
    let skipped = per_video.iter().filter(|v| v.is_none()).count();
    let mut descriptors = Vec::new();
    let mut features_per_video = Vec::new();
    for (d, n) in per_video.into_iter().flatten() {
        descriptors.extend(d);
        features_per_video.push(n);
    }
    save_store(store, &descriptors)?;
    export_csv(&store.with_extension("csv"), &descriptors)?;
    log::info!("extracted {} videos ({skipped} skipped) into {}", features_per_video.len(), store.display());
    Ok(ExtractSummary {
        videos: features_per_video.len(),
        skipped,
        descriptors,
        features_per_video,
    })
}

/// Gallery = leading normal walks of every evaluation subject, probes = the
/// rest. PCA (when enabled) is fit on the gallery only.
pub fn evaluate_descriptors(cfg: &PipelineConfig, manifest: &Manifest, descriptors: &[GaitDescriptor]) -> Result<(EvalReport, Vec<crate::recognizer::RocPoint>)> {
    let split = resolve_split(cfg, manifest)?;
    let mut gallery_videos: BTreeSet<(&str, &str)> = BTreeSet::new();
    for s in &split.eval_subjects {
        let normal = manifest.videos_of(s).filter(|v| v.condition == Condition::Normal);
        for v in normal.take(cfg.split.gallery_videos) {
            gallery_videos.insert((&v.subject, &v.video));
        }
    }
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    let mut seen = BTreeSet::new();
    for d in descriptors
        .iter()
        .filter(|d| d.fusion == cfg.fusion && split.eval_subjects.contains(&d.subject))
    {
        seen.insert((d.subject.as_str(), d.video.as_str()));
        if gallery_videos.contains(&(d.subject.as_str(), d.video.as_str())) {
            gallery.push(d.clone());
        } else {
            probes.push(d.clone());
        }
    }
    let expected = videos_for(manifest, &split.eval_subjects).len();
    let skipped = expected.saturating_sub(seen.len());
    let enrolled: BTreeSet<&str> = gallery.iter().map(|d| d.subject.as_str()).collect();
    if let Some(p) = probes.iter().find(|p| !enrolled.contains(p.subject.as_str())) {
        return Err(input_err!("subject {} has probes but no gallery descriptor", p.subject));
    }
    if gallery.is_empty() || probes.is_empty() {
        return Err(input_err!("evaluation needs gallery and probe descriptors ({} and {})", gallery.len(), probes.len()));
    }
    if cfg.pca_dim > 0 {
        let data: Vec<Vec<f64>> = gallery.iter().map(|d| d.vector.clone()).collect();
        let pca = PcaModel::fit(&data, cfg.pca_dim)?;
        gallery = gallery.iter().map(|d| pca.project(d)).collect::<Result<_>>()?;
        probes = probes.iter().map(|d| pca.project(d)).collect::<Result<_>>()?;
    }
    let to_samples = |ds: &[GaitDescriptor]| ds.iter().map(|d| Sample::new(d.label, d.vector.clone())).collect::<Vec<_>>();
    let (gs, ps) = (to_samples(&gallery), to_samples(&probes));
    let g = Gallery::new(gs.clone(), cfg.metric)?;
    let id = evaluate_identification(&g, &ps)?;
    let ver = evaluate_verification(&gs, &ps, cfg.metric, cfg.aggregation)?;
    let mut report = EvalReport::new(cfg.metric, &g, ps.len(), &id, &ver);
    report.skipped_videos = skipped;
    Ok((report, ver.roc))
}

/// Writes `report.toml`, `cmc.csv` and `roc.csv` into `out`.
pub fn cmd_evaluate(cfg: &PipelineConfig, store: &Path, out: &Path) -> Result<EvalReport> {
    let _lock = DirLock::acquire(out)?;
    let manifest = Manifest::load(&cfg.corpus_root)?;
    let descriptors = load_store(store)?;
    let (report, roc) = evaluate_descriptors(cfg, &manifest, &descriptors)?;
    let path = out.join(REPORT_FILE);
    fs::write(&path, report.to_toml()?).map_err(|e| GaitError::io(&path, e))?;
    write_cmc_csv(&out.join(CMC_FILE), &report.cmc)?;
    write_roc_csv(&out.join(ROC_FILE), &roc)?;
    log::info!("rank1 {:.4} rank5 {:.4} eer {:.4}", report.rank1, report.rank5, report.eer);
    Ok(report)
}

/// Trains on corpus A, then extracts and evaluates on corpus B without any
/// weight update. Layout under `out`: `checkpoint/`, `descriptors/`, `report/`.
pub fn cmd_transfer(train_cfg: &PipelineConfig, eval_cfg: &PipelineConfig, out: &Path) -> Result<EvalReport> {
    if !eval_cfg.corpus_root.is_dir() {
        return Err(input_err!("evaluation corpus {} does not exist", eval_cfg.corpus_root.display()));
    }
    if train_cfg.network.architecture != eval_cfg.network.architecture {
        return Err(GaitError::Config("train and eval configs select different architectures".into()));
    }
    let ck = out.join("checkpoint");
    cmd_train(train_cfg, &ck)?;
    let store = out.join("descriptors").join(STORE_FILE);
    cmd_extract(eval_cfg, &ck, &store)?;
    cmd_evaluate(eval_cfg, &store, &out.join("report"))
}
