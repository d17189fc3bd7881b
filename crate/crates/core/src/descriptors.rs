//! Per-patch features, per-video fusion, PCA and the descriptor store.
//!
//! Store layout (little-endian):
//!
//! ```text
//! magic   8 bytes "GFDESCR1"
//! count   u32
//! repeated count times:
//!   label u32
//!   subject, video, condition: u32 length + utf-8 bytes each
//!   fusion u8 (0 avg, 1 concat)
//!   pca_dim u32 (0 = not projected)
//!   dim u32, then dim x f64
//! ```

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, input_err, GaitError, Result};
use crate::nets::INPUT_CHANNELS;
use crate::posepatch::{Part, Patch, PATCH_SIDE};
use crate::tensornet::params::ByteReader;
use crate::tensornet::{Network, ParamStore, Tensor};

pub const STORE_MAGIC: &[u8; 8] = b"GFDESCR1";
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeature {
    pub part: Part,
    pub pair_index: usize,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Avg,
    Concat,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Avg => "avg",
            Fusion::Concat => "concat",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fusion {
    type Err = GaitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Fusion::Avg),
            "concat" => Ok(Fusion::Concat),
            _ => Err(input_err!("unknown fusion {s:?} (avg or concat)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaitDescriptor {
    pub label: usize,
    pub subject: String,
    pub video: String,
    pub condition: String,
    pub fusion: Fusion,
    pub pca_dim: Option<usize>,
    pub vector: Vec<f64>,
}

/// Eval-mode last-hidden-layer features, one per patch, in input order.
pub fn extract_features(net: &Network, params: &ParamStore<f32>, patches: &[Patch], batch: usize) -> Result<Vec<FrameFeature>> {
    let item = INPUT_CHANNELS * PATCH_SIDE * PATCH_SIDE;
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * item);
        for p in chunk {
            if p.data.len() != item {
                return Err(dim_err!("patch has {} values, network takes {item}", p.data.len()));
            }
            data.extend_from_slice(&p.data);
        }
        let x = Tensor::from_vec(&[chunk.len(), INPUT_CHANNELS, PATCH_SIDE, PATCH_SIDE], data)?;
        let f = net.features(params, x)?;
        let width = f.shape()[1];
        for (p, row) in chunk.iter().zip(f.data().chunks(width)) {
            if !row.iter().all(|v| v.is_finite()) {
                return Err(GaitError::Numeric(format!("non-finite feature for pair {} {}", p.pair_index, p.part)));
            }
            out.push(FrameFeature {
                part: p.part,
                pair_index: p.pair_index,
                vector: row.to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > NORM_FLOOR) {
        return Err(GaitError::Numeric(format!("degenerate descriptor with norm {norm:e}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

/// Features sorted by (pair, part, bit pattern) so that sums do not depend
/// on input order.
fn canonical<'a>(features: impl Iterator<Item = &'a FrameFeature>) -> Vec<&'a FrameFeature> {
    let mut v: Vec<_> = features.collect();
    v.sort_by(|a, b| {
        (a.pair_index, a.part)
            .cmp(&(b.pair_index, b.part))
            .then_with(|| a.vector.iter().map(|x| x.to_bits()).cmp(b.vector.iter().map(|x| x.to_bits())))
    });
    v
}

fn mean_of<'a>(features: impl Iterator<Item = &'a FrameFeature>) -> Result<Vec<f64>> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for f in canonical(features) {
        let v = &f.vector;
        if sum.is_empty() {
            sum = vec![0.0; v.len()];
        } else if v.len() != sum.len() {
            return Err(dim_err!("feature widths {} and {} differ", sum.len(), v.len()));
        }
        sum.iter_mut().zip(v).for_each(|(s, &x)| *s += x as f64);
        n += 1;
    }
    if n == 0 {
        return Err(input_err!("no features to fuse"));
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    Ok(sum)
}

/// Mean over every feature of the video, L2-normalized.
pub fn fuse_avg(features: &[FrameFeature]) -> Result<Vec<f64>> {
    let mut m = mean_of(features.iter())?;
    l2_normalize(&mut m)?;
    Ok(m)
}

/// Per-part temporal means concatenated in canonical part order, then
/// L2-normalized. `parts` may be given in any order.
pub fn fuse_concat(features: &[FrameFeature], parts: &[Part]) -> Result<Vec<f64>> {
    let mut ordered = parts.to_vec();
    ordered.sort();
    ordered.dedup();
    if ordered.is_empty() {
        return Err(input_err!("no parts selected"));
    }
    let mut out = Vec::new();
    for part in ordered {
        let m = mean_of(features.iter().filter(|f| f.part == part))
            .map_err(|e| match e {
                GaitError::Input(_) => input_err!("no features for part {part}"),
                e => e,
            })?;
        out.extend(m);
    }
    l2_normalize(&mut out)?;
    Ok(out)
}

pub fn fuse(features: &[FrameFeature], parts: &[Part], fusion: Fusion) -> Result<Vec<f64>> {
    match fusion {
        Fusion::Avg => fuse_avg(features),
        Fusion::Concat => fuse_concat(features, parts),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// d x k, orthonormal columns.
    pub components: DMatrix<f64>,
    /// Every eigenvalue of the sample covariance available from the fit,
    /// descending. Eigenvalues beyond `min(d, n)` are zero and omitted.
    pub eigenvalues: Vec<f64>,
}

fn descending(eig: SymmetricEigen<f64, nalgebra::Dyn>) -> (Vec<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

impl PcaModel {
    /// Top-`k` principal axes of the rows of `data` (sample covariance with
    /// `n - 1`). When `d > n` the eigenproblem is solved on the Gram matrix.
    pub fn fit(data: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = data.len();
        let d = data.first().map_or(0, Vec::len);
        if n < 2 || d == 0 {
            return Err(input_err!("PCA needs at least 2 non-empty samples, got {n}"));
        }
        if let Some(bad) = data.iter().find(|v| v.len() != d) {
            return Err(dim_err!("PCA sample of length {} among length-{d} samples", bad.len()));
        }
        if k == 0 || k > d.min(n - 1) {
            return Err(input_err!("PCA dimension {k} must be in 1..={}", d.min(n - 1)));
        }
        let x = DMatrix::from_fn(n, d, |r, c| data[r][c]);
        let mean = DVector::from_fn(d, |c, _| x.column(c).mean());
        let mut xc = x;
        for mut row in xc.row_iter_mut() {
            row -= mean.transpose();
        }
        let scale = 1.0 / (n - 1) as f64;
        let (eigenvalues, components) = if d <= n {
            let cov = xc.transpose() * &xc * scale;
            let (vals, vecs) = descending(SymmetricEigen::new(cov));
            (vals, vecs.columns(0, k).into_owned())
        } else {
            let gram = &xc * xc.transpose() * scale;
            let (vals, vecs) = descending(SymmetricEigen::new(gram));
            let mut comps = DMatrix::zeros(d, k);
            for j in 0..k {
                if vals[j] <= 0.0 {
                    return Err(GaitError::Numeric(format!("PCA component {j} has zero variance")));
                }
                let mut col = xc.transpose() * vecs.column(j);
                col /= col.norm();
                comps.set_column(j, &col);
            }
            (vals, comps)
        };
        Ok(PcaModel {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// `(v - mean)^T C`, without normalization.
    pub fn project_raw(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim() {
            return Err(dim_err!("PCA input has length {}, model expects {}", v.len(), self.input_dim()));
        }
        let centred = DVector::from_column_slice(v) - &self.mean;
        Ok((self.components.transpose() * centred).iter().copied().collect())
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let back = &self.components * DVector::from_column_slice(z) + &self.mean;
        back.iter().copied().collect()
    }

    /// Projected and re-normalized copy of `d`.
    pub fn project(&self, d: &GaitDescriptor) -> Result<GaitDescriptor> {
        let mut v = self.project_raw(&d.vector)?;
        l2_normalize(&mut v)?;
        Ok(GaitDescriptor {
            pca_dim: Some(self.dim()),
            vector: v,
            ..d.clone()
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut ByteReader) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| input_err!("string field is not utf-8"))
}

pub fn store_to_bytes(descriptors: &[GaitDescriptor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&(descriptors.len() as u32).to_le_bytes());
    for d in descriptors {
        out.extend_from_slice(&(d.label as u32).to_le_bytes());
        put_str(&mut out, &d.subject);
        put_str(&mut out, &d.video);
        put_str(&mut out, &d.condition);
        out.push(match d.fusion {
            Fusion::Avg => 0,
            Fusion::Concat => 1,
        });
        out.extend_from_slice(&(d.pca_dim.unwrap_or(0) as u32).to_le_bytes());
        out.extend_from_slice(&(d.vector.len() as u32).to_le_bytes());
        for v in &d.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn store_from_bytes(bytes: &[u8]) -> Result<Vec<GaitDescriptor>> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(8)? != STORE_MAGIC {
        return Err(input_err!("not a descriptor store (bad magic)"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let label = r.u32()? as usize;
        let subject = get_str(&mut r)?;
        let video = get_str(&mut r)?;
        let condition = get_str(&mut r)?;
        let fusion = match r.u8()? {
            0 => Fusion::Avg,
            1 => Fusion::Concat,
            t => return Err(input_err!("unknown fusion tag {t}")),
        };
        let pca = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let vector = (0..dim).map(|_| r.f64()).collect::<Result<_>>()?;
        out.push(GaitDescriptor {
            label,
            subject,
            video,
            condition,
            fusion,
            pca_dim: (pca > 0).then_some(pca),
            vector,
        });
    }
    if !r.is_done() {
        return Err(input_err!("trailing bytes after {count} descriptors"));
    }
    Ok(out)
}

pub fn save_store(path: &Path, descriptors: &[GaitDescriptor]) -> Result<()> {
    std::fs::write(path, store_to_bytes(descriptors)).map_err(|e| GaitError::io(path, e))
}

pub fn load_store(path: &Path) -> Result<Vec<GaitDescriptor>> {
    let bytes = std::fs::read(path).map_err(|e| GaitError::io(path, e))?;
    store_from_bytes(&bytes).map_err(|e| GaitError::format(path, e.to_string()))
}

/// One row per descriptor: metadata columns then `v0..`.
pub fn export_csv(path: &Path, descriptors: &[GaitDescriptor]) -> Result<()> {
    let io = |e| GaitError::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let width = descriptors.iter().map(|d| d.vector.len()).max().unwrap_or(0);
    write!(f, "subject,label,video,condition,fusion,pca_dim").map_err(io)?;
    for i in 0..width {
        write!(f, ",v{i}").map_err(io)?;
    }
    writeln!(f).map_err(io)?;
    for d in descriptors {
        write!(
            f,
            "{},{},{},{},{},{}",
            d.subject,
            d.label,
            d.video,
            d.condition,
            d.fusion,
            d.pca_dim.unwrap_or(0)
        )
        .map_err(io)?;
        for v in &d.vector {
            write!(f, ",{v:e}").map_err(io)?;
        }
        writeln!(f).map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feature(part: Part, pair: usize, v: &[f32]) -> FrameFeature {
        FrameFeature {
            part,
            pair_index: pair,
            vector: v.to_vec(),
        }
    }

    fn random_features(n: usize, width: usize, seed: u64) -> Vec<FrameFeature> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v: Vec<f32> = (0..width).map(|_| rng.random::<f32>() - 0.3).collect();
                feature(Part::ALL[i % 5], i / 5, &v)
            })
            .collect()
    }

    #[test]
    fn avg_matches_direct_mean() {
        let feats = random_features(10, 5, 1);
        let got = fuse_avg(&feats).unwrap();
        let mut want = vec![0.0f64; 5];
        for f in &feats {
            for (w, &x) in want.iter_mut().zip(&f.vector) {
                *w += x as f64 / 10.0;
            }
        }
        let norm = want.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn single_feature_and_antipodes() {
        let got = fuse_avg(&[feature(Part::FullBody, 0, &[3.0, 4.0])]).unwrap();
        assert_eq!(got, vec![0.6, 0.8]);
        let err = fuse_avg(&[feature(Part::FullBody, 0, &[1.0, -2.0]), feature(Part::FullBody, 1, &[-1.0, 2.0])]);
        assert!(matches!(err, Err(GaitError::Numeric(_))));
        assert!(fuse_avg(&[]).is_err());
    }

    #[test]
    fn concat_layout_and_missing_part() {
        let feats = random_features(25, 256, 2);
        assert_eq!(fuse_concat(&feats, &Part::ALL).unwrap().len(), 1280);
        let full: Vec<_> = feats.iter().filter(|f| f.part == Part::FullBody).cloned().collect();
        assert_eq!(fuse_concat(&full, &[Part::FullBody]).unwrap(), fuse_avg(&full).unwrap());
        let err = fuse_concat(&full, &[Part::LeftFoot, Part::FullBody]).unwrap_err();
        assert!(err.to_string().contains("left_foot"), "{err}");
    }

    proptest! {
        #[test]
        fn concat_ignores_frame_order(seed in any::<u64>(), shuffle_seed in any::<u64>()) {
            let feats = random_features(20, 6, seed);
            let mut shuffled = feats.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(fuse_concat(&feats, &Part::ALL).unwrap(), fuse_concat(&shuffled, &Part::ALL).unwrap());
            prop_assert_eq!(fuse_avg(&feats).unwrap(), fuse_avg(&shuffled).unwrap());
        }
    }

    fn random_data(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|j| rng.random::<f64>() * (1.0 + j as f64)).collect()).collect()
    }

    fn total_error(model: &PcaModel, data: &[Vec<f64>]) -> f64 {
        data.iter()
            .map(|x| {
                let r = model.reconstruct(&model.project_raw(x).unwrap());
                x.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn pca_planar_data_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                vec![a + b, a - 2.0 * b, 3.0 * a, 0.5 * b + 1.0]
            })
            .collect();
        let m = PcaModel::fit(&data, 2).unwrap();
        assert!(total_error(&m, &data) < 1e-8);
    }

    #[test]
    fn pca_error_equals_discarded_spectrum() {
        for (n, d) in [(40, 8), (6, 20)] {
            let data = random_data(n, d, n as u64);
            let k = 3;
            let m = PcaModel::fit(&data, k).unwrap();
            let discarded: f64 = m.eigenvalues[k..].iter().sum();
            assert!((total_error(&m, &data) / (n - 1) as f64 - discarded).abs() < 1e-8);
            let ctc = m.components.transpose() * &m.components;
            assert!((ctc - DMatrix::identity(k, k)).abs().max() < 1e-6);
            assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn pca_full_rank_is_isometry() {
        let data = random_data(30, 6, 4);
        let m = PcaModel::fit(&data, 6).unwrap();
        let p: Vec<Vec<f64>> = data.iter().map(|x| m.project_raw(x).unwrap()).collect();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        for i in 0..data.len() {
            for j in 0..i {
                assert!((dist(&data[i], &data[j]) - dist(&p[i], &p[j])).abs() < 1e-6);
            }
        }
        assert!(PcaModel::fit(&data, 7).is_err());
        assert!(PcaModel::fit(&random_data(3, 10, 1), 3).is_err());
    }

    #[test]
    fn store_round_trip_and_csv() {
        let ds = vec![
            GaitDescriptor {
                label: 3,
                subject: "s003".into(),
                video: "v01".into(),
                condition: "normal".into(),
                fusion: Fusion::Concat,
                pca_dim: None,
                vector: vec![0.6, -0.8],
            },
            GaitDescriptor {
                label: 0,
                subject: "s000".into(),
                video: "v09".into(),
                condition: "perturbed-b".into(),
                fusion: Fusion::Avg,
                pca_dim: Some(1),
                vector: vec![1.0],
            },
        ];
        let bytes = store_to_bytes(&ds);
        assert_eq!(store_from_bytes(&bytes).unwrap(), ds);
        assert!(store_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        export_csv(&path, &ds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "subject,label,video,condition,fusion,pca_dim,v0,v1");
        assert_eq!(text.lines().count(), 3);
    }
}
