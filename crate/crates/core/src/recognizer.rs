//! Nearest-neighbour identification and pairwise verification.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, input_err, GaitError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    L1,
    L2,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
        })
    }
}

impl FromStr for Metric {
    type Err = GaitError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            _ => Err(input_err!("unknown metric {s:?} (l1 or l2)")),
        }
    }
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

/// A labelled vector on either side of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub vector: Vec<f64>,
}

impl Sample {
    pub fn new(label: usize, vector: Vec<f64>) -> Self {
        Sample { label, vector }
    }
}

fn common_dim(samples: &[Sample], side: &str) -> Result<usize> {
    let dim = samples.first().map_or(0, |s| s.vector.len());
    if let Some(s) = samples.iter().find(|s| s.vector.len() != dim) {
        return Err(dim_err!("{side} vectors have lengths {dim} and {}", s.vector.len()));
    }
    Ok(dim)
}

#[derive(Debug, Clone)]
pub struct Gallery {
    entries: Vec<Sample>,
    metric: Metric,
    dim: usize,
    subjects: Vec<usize>,
}

impl Gallery {
    pub fn new(entries: Vec<Sample>, metric: Metric) -> Result<Self> {
        if entries.is_empty() {
            return Err(input_err!("empty gallery"));
        }
        let dim = common_dim(&entries, "gallery")?;
        let mut subjects: Vec<usize> = entries.iter().map(|e| e.label).collect();
        subjects.sort_unstable();
        subjects.dedup();
        Ok(Gallery {
            entries,
            metric,
            dim,
            subjects,
        })
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn subjects(&self) -> &[usize] {
        &self.subjects
    }

    pub fn entries(&self) -> &[Sample] {
        &self.entries
    }

    /// Subjects ordered by their closest gallery entry, ascending; equal
    /// distances fall back to the smaller label.
    pub fn classify(&self, probe: &[f64]) -> Result<Vec<(usize, f64)>> {
        if probe.len() != self.dim {
            return Err(input_err!("probe has length {}, gallery vectors {}", probe.len(), self.dim));
        }
        let mut best: BTreeMap<usize, f64> = BTreeMap::new();
        for e in &self.entries {
            let d = self.metric.distance(probe, &e.vector);
            best.entry(e.label).and_modify(|b| *b = b.min(d)).or_insert(d);
        }
        let mut ranked: Vec<(usize, f64)> = best.into_iter().collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(ranked)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub rank1: f64,
    pub rank5: f64,
    /// `cmc[r - 1]` is the Rank-r accuracy, for r up to the subject count.
    pub cmc: Vec<f64>,
    /// Rank (1-based) of the true subject for every probe, in input order.
    pub ranks: Vec<usize>,
}

pub fn evaluate_identification(gallery: &Gallery, probes: &[Sample]) -> Result<Identification> {
    if probes.is_empty() {
        return Err(input_err!("no probes"));
    }
    let k = gallery.subjects().len();
    let mut hits = vec![0usize; k];
    let mut ranks = Vec::with_capacity(probes.len());
    for p in probes {
        if gallery.subjects().binary_search(&p.label).is_err() {
            return Err(input_err!("probe label {} is not enrolled in the gallery", p.label));
        }
        let ranked = gallery.classify(&p.vector)?;
        let r = ranked.iter().position(|&(l, _)| l == p.label).expect("enrolled label is ranked");
        hits[r] += 1;
        ranks.push(r + 1);
    }
    let n = probes.len() as f64;
    let mut cmc = Vec::with_capacity(k);
    let mut acc = 0usize;
    for h in hits {
        acc += h;
        cmc.push(acc as f64 / n);
    }
    Ok(Identification {
        rank1: cmc[0],
        rank5: cmc[k.min(5) - 1],
        cmc,
        ranks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Every (gallery entry, probe) pair is one trial.
    #[default]
    PerPair,
    /// One trial per (gallery subject, probe), scored by the closest entry.
    MinOverSubject,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// Ascending thresholds. A pair is accepted when its distance is at most
    /// the threshold; the first point has threshold `-inf`.
    pub roc: Vec<RocPoint>,
    pub eer: f64,
    pub genuine: usize,
    pub impostor: usize,
}

/// Genuine and impostor distances.
pub fn verification_scores(
    gallery: &[Sample],
    probes: &[Sample],
    metric: Metric,
    aggregation: Aggregation,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(input_err!("verification needs non-empty gallery and probe sides"));
    }
    let gd = common_dim(gallery, "gallery")?;
    let pd = common_dim(probes, "probe")?;
    if gd != pd {
        return Err(input_err!("gallery vectors have length {gd}, probes {pd}"));
    }
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for p in probes {
        match aggregation {
            Aggregation::PerPair => {
                for g in gallery {
                    let d = metric.distance(&g.vector, &p.vector);
                    if g.label == p.label { &mut genuine } else { &mut impostor }.push(d);
                }
            }
            Aggregation::MinOverSubject => {
                let mut best: BTreeMap<usize, f64> = BTreeMap::new();
                for g in gallery {
                    let d = metric.distance(&g.vector, &p.vector);
                    best.entry(g.label).and_modify(|b| *b = b.min(d)).or_insert(d);
                }
                for (l, d) in best {
                    if l == p.label { &mut genuine } else { &mut impostor }.push(d);
                }
            }
        }
    }
    if genuine.is_empty() || impostor.is_empty() {
        return Err(input_err!(
            "verification needs genuine and impostor pairs, got {} and {}",
            genuine.len(),
            impostor.len()
        ));
    }
    Ok((genuine, impostor))
}

/// Threshold sweep over every distinct score plus a leading reject-all point.
pub fn roc_curve(genuine: &[f64], impostor: &[f64]) -> Result<Vec<RocPoint>> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(input_err!("ROC needs genuine and impostor scores"));
    }
    if genuine.iter().chain(impostor).any(|d| !d.is_finite()) {
        return Err(GaitError::Numeric("non-finite verification score".into()));
    }
    let mut g = genuine.to_vec();
    let mut i = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    i.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = g.iter().chain(&i).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (ng, ni) = (g.len() as f64, i.len() as f64);
    let mut roc = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        far: 0.0,
        frr: 1.0,
    }];
    let (mut ga, mut ia) = (0usize, 0usize);
    for t in thresholds {
        while ga < g.len() && g[ga] <= t {
            ga += 1;
        }
        while ia < i.len() && i[ia] <= t {
            ia += 1;
        }
        roc.push(RocPoint {
            threshold: t,
            far: ia as f64 / ni,
            frr: (g.len() - ga) as f64 / ng,
        });
    }
    Ok(roc)
}

/// Crossing of FAR and FRR, linearly interpolated between the two ROC
/// points that bracket it.
pub fn equal_error_rate(roc: &[RocPoint]) -> Result<f64> {
    let first = roc.first().ok_or_else(|| input_err!("empty ROC"))?;
    let gap = |p: &RocPoint| p.far - p.frr;
    if gap(first) >= 0.0 {
        return Ok(first.far);
    }
    for w in roc.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if gap(b) >= 0.0 {
            let t = -gap(a) / (gap(b) - gap(a));
            return Ok(a.far + t * (b.far - a.far));
        }
    }
    Err(GaitError::Numeric("FAR never reaches FRR".into()))
}

pub fn evaluate_verification(
    gallery: &[Sample],
    probes: &[Sample],
    metric: Metric,
    aggregation: Aggregation,
) -> Result<Verification> {
    let (genuine, impostor) = verification_scores(gallery, probes, metric, aggregation)?;
    let roc = roc_curve(&genuine, &impostor)?;
    let eer = equal_error_rate(&roc)?;
    Ok(Verification {
        roc,
        eer,
        genuine: genuine.len(),
        impostor: impostor.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub gallery_entries: usize,
    pub probes: usize,
    pub skipped_videos: usize,
    pub rank1: f64,
    pub rank5: f64,
    pub eer: f64,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub cmc: Vec<f64>,
}

impl EvalReport {
    pub fn new(metric: Metric, gallery: &Gallery, probes: usize, id: &Identification, ver: &Verification) -> Self {
        EvalReport {
            metric,
            gallery_entries: gallery.entries().len(),
            probes,
            skipped_videos: 0,
            rank1: id.rank1,
            rank5: id.rank5,
            eer: ver.eer,
            genuine_pairs: ver.genuine,
            impostor_pairs: ver.impostor,
            cmc: id.cmc.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GaitError::Config(e.to_string()))
    }
}

fn write_lines(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let io = |e| GaitError::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{header}").map_err(io)?;
    for r in rows {
        writeln!(f, "{r}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn write_cmc_csv(path: &Path, cmc: &[f64]) -> Result<()> {
    write_lines(path, "rank,fraction", cmc.iter().enumerate().map(|(r, v)| format!("{},{v}", r + 1)))
}

pub fn write_roc_csv(path: &Path, roc: &[RocPoint]) -> Result<()> {
    write_lines(
        path,
        "threshold,far,frr",
        roc.iter().map(|p| format!("{},{},{}", p.threshold, p.far, p.frr)),
    )
}
