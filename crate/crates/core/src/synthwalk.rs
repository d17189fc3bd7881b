//! Synthetic walking figures: articulated stick-and-blob bodies over a
//! static textured background, with ground-truth keypoints and silhouettes.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::optflow::Frame;
use crate::posepatch::{BoxF, Joint, Part, PatchSpec, PoseKeypoints};

/// Vertical gap between the ground line and the bottom frame edge.
const GROUND_MARGIN: f64 = 4.0;
pub const MIN_FRAMES: usize = 32;
/// Figure pixels are at most 0.39 and background pixels at least 0.62.
pub const DEFAULT_BG_THRESHOLD: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Normal,
    /// Stride frequency scaled by a factor in [0.9, 1.1].
    PerturbedA,
    /// Limb amplitudes scaled by a factor in [0.9, 1.1].
    PerturbedB,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::PerturbedA => "perturbed-a",
            Condition::PerturbedB => "perturbed-b",
        }
    }
}

/// Gait and body parameters of one synthetic subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkerIdentity {
    /// Gait cycles per frame.
    pub stride_freq: f64,
    /// Horizontal foot excursion from the hip, pixels.
    pub leg_amplitude: f64,
    /// Peak arm swing angle, radians.
    pub arm_amplitude: f64,
    /// Arm phase relative to the opposite leg, radians.
    pub arm_phase: f64,
    /// Vertical hip bob, pixels.
    pub torso_sway: f64,
    /// Peak foot lift, pixels.
    pub foot_lift: f64,
    /// Horizontal neck offset relative to the hips, pixels.
    pub lean: f64,
    pub height: f64,
    /// Pixels per frame, rightward.
    pub speed: f64,
}

/// Ranges sampled for each identity field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentityRanges {
    pub stride_freq: (f64, f64),
    pub leg_amplitude: (f64, f64),
    pub arm_amplitude: (f64, f64),
    pub arm_phase: (f64, f64),
    pub torso_sway: (f64, f64),
    pub foot_lift: (f64, f64),
    pub lean: (f64, f64),
    pub height: (f64, f64),
    pub speed: (f64, f64),
}

impl Default for IdentityRanges {
    fn default() -> Self {
        IdentityRanges {
            stride_freq: (0.026, 0.056),
            leg_amplitude: (4.0, 12.0),
            arm_amplitude: (0.15, 0.55),
            arm_phase: (-0.9, 0.9),
            torso_sway: (0.3, 3.0),
            foot_lift: (1.5, 6.0),
            lean: (-3.0, 3.0),
            height: (54.0, 82.0),
            speed: (0.05, 0.3),
        }
    }
}

impl IdentityRanges {
    fn as_array(&self) -> [(f64, f64); 9] {
        [
            self.stride_freq,
            self.leg_amplitude,
            self.arm_amplitude,
            self.arm_phase,
            self.torso_sway,
            self.foot_lift,
            self.lean,
            self.height,
            self.speed,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in self.as_array() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(input_err!("identity range ({lo}, {hi}) is not an ordered finite interval"));
            }
        }
        let (flo, fhi) = self.stride_freq;
        if flo <= 0.01 || fhi >= 0.2 {
            return Err(input_err!("stride frequency range must lie inside (0.01, 0.2)"));
        }
        Ok(())
    }
}

/// Latin-hypercube sample of `n` identities: every field's range is cut into
/// `n` strata and each stratum is used exactly once.
pub fn sample_identities<R: Rng + ?Sized>(n: usize, ranges: &IdentityRanges, rng: &mut R) -> Result<Vec<WalkerIdentity>> {
    ranges.validate()?;
    if n == 0 {
        return Err(input_err!("need at least one identity"));
    }
    let dims = ranges.as_array();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
    for (lo, hi) in dims {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        cols.push(
            strata
                .into_iter()
                .map(|s| lo + (hi - lo) * (s as f64 + rng.random::<f64>()) / n as f64)
                .collect(),
        );
    }
    Ok((0..n)
        .map(|i| WalkerIdentity {
            stride_freq: cols[0][i],
            leg_amplitude: cols[1][i],
            arm_amplitude: cols[2][i],
            arm_phase: cols[3][i],
            torso_sway: cols[4][i],
            foot_lift: cols[5][i],
            lean: cols[6][i],
            height: cols[7][i],
            speed: cols[8][i],
        })
        .collect())
}

/// Binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count();
        let union = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// As a 0/1 intensity frame.
    pub fn to_frame(&self) -> Result<Frame> {
        Frame::new(self.width, self.height, self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }
}

/// Tight full-body box around the foreground pixels.
pub fn bbox_from_mask(mask: &Mask) -> Result<PatchSpec> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(input_err!("mask has no foreground pixels"));
    }
    Ok(PatchSpec {
        part: Part::FullBody,
        bbox: BoxF::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64),
    })
}

/// Thresholds `|frame - background| > threshold` and keeps the largest
/// 4-connected component of each frame.
pub fn subtract_background(frames: &[Frame], background: &Frame, threshold: f32) -> Result<Vec<Mask>> {
    frames
        .iter()
        .map(|f| {
            if f.width() != background.width() || f.height() != background.height() {
                return Err(input_err!(
                    "frame {}x{} and background {}x{} differ in size",
                    f.width(),
                    f.height(),
                    background.width(),
                    background.height()
                ));
            }
            let (w, h) = (f.width(), f.height());
            let mut raw = Mask::empty(w, h);
            for (i, (a, b)) in f.pixels().iter().zip(background.pixels()).enumerate() {
                raw.bits[i] = (a - b).abs() > threshold;
            }
            Ok(largest_component(&raw))
        })
        .collect()
}

fn largest_component(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![0u32; w * h];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.bits[j] && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    Mask {
        width: w,
        height: h,
        bits: label.iter().map(|&l| l != 0 && l == best.0).collect(),
    }
}

/// Frame geometry plus the static background every video is rendered over.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub background: Frame,
}

impl Scene {
    /// Textured background from a sum of random plane waves.
    pub fn textured(width: usize, height: usize, seed: u64) -> Result<Scene> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64)> = (0..12)
            .map(|_| {
                let period = rng.random_range(4.0..14.0);
                let theta = rng.random_range(0.0..PI);
                (TAU / period * theta.cos(), TAU / period * theta.sin(), rng.random_range(0.0..TAU))
            })
            .collect();
        let mut px = vec![0f32; width * height];
        for y in 0..height {
            for x in 0..width {
                let s: f64 = waves.iter().map(|&(kx, ky, ph)| (kx * x as f64 + ky * y as f64 + ph).sin()).sum();
                px[y * width + x] = (0.72 + 0.035 * s).clamp(0.62, 0.85) as f32;
            }
        }
        let bytes: Vec<u8> = px.iter().map(|&v| (v * 255.0).round() as u8).collect();
        Ok(Scene {
            background: Frame::from_gray8(width, height, &bytes)?,
        })
    }

    pub fn flat(width: usize, height: usize, value: f32) -> Result<Scene> {
        Ok(Scene {
            background: Frame::filled(width, height, value)?,
        })
    }

    pub fn width(&self) -> usize {
        self.background.width()
    }

    pub fn height(&self) -> usize {
        self.background.height()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub label: usize,
    pub condition: Condition,
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
    pub keypoints: Vec<PoseKeypoints>,
}

/// Per-video random state: where and at which gait phase the walk starts,
/// and the condition factor.
#[derive(Debug, Clone, Copy, PartialEq)]
struct VideoDraw {
    start_x: f64,
    phase: f64,
    factor: f64,
}

/// Range of hip x positions keeping the whole figure inside the frame.
fn hip_band(id: &WalkerIdentity, width: f64) -> (f64, f64) {
    let h = id.height;
    let reach = (id.leg_amplitude + 0.03 * h)
        .max(id.lean.abs() + 0.36 * h * id.arm_amplitude.abs().min(PI / 2.0).sin() + 0.025 * h)
        .max(1.3 * id.lean.abs() + 0.075 * h)
        + 2.0;
    let margin = reach.min(width / 2.0 - 0.5);
    (margin, width - margin)
}

/// Joint positions of `id` at frame `t`. Hip x wraps inside the horizontal
/// band where the whole figure fits.
fn pose_at(id: &WalkerIdentity, draw: &VideoDraw, t: usize, width: f64, height: f64) -> PoseKeypoints {
    let h = id.height;
    let ground = height - GROUND_MARGIN;
    let phi = TAU * id.stride_freq * t as f64 + draw.phase;
    let (lo, hi) = hip_band(id, width);
    let hip_x = lo + (draw.start_x - lo + id.speed * t as f64).rem_euclid((hi - lo).max(1e-9));
    let leg = 0.47 * h;
    let seg = leg / 2.0;
    let hip_y = ground - 0.96 * leg - id.torso_sway * 0.5 * (1.0 + (2.0 * phi).cos());

    let foot = |p: f64| -> (f64, f64) {
        (hip_x + id.leg_amplitude * p.sin(), ground - id.foot_lift * 0.5 * (1.0 + p.cos()))
    };
    let knee = |f: (f64, f64)| -> (f64, f64) {
        let (dx, dy) = (f.0 - hip_x, f.1 - hip_y);
        let d = (dx * dx + dy * dy).sqrt().max(1e-9);
        let reach = d.min(2.0 * seg * 0.999);
        let (ux, uy) = (dx / d, dy / d);
        let (mx, my) = (hip_x + ux * reach / 2.0, hip_y + uy * reach / 2.0);
        let off = (seg * seg - (reach / 2.0).powi(2)).max(0.0).sqrt();
        // Knees bend forward (+x).
        let (px, py) = if -uy >= 0.0 { (-uy, ux) } else { (uy, -ux) };
        (mx + px * off, my + py * off)
    };
    let lf = foot(phi);
    let rf = foot(phi + PI);
    let neck = (hip_x + id.lean, hip_y - 0.30 * h);
    let shoulder = (neck.0, neck.1 + 0.02 * h);
    let arm = 0.36 * h;
    let hand = |theta: f64| (shoulder.0 + arm * theta.sin(), shoulder.1 + arm * theta.cos());
    let lh = hand(id.arm_amplitude * (phi + PI + id.arm_phase).sin());
    let rh = hand(id.arm_amplitude * (phi + id.arm_phase).sin());
    let head = (neck.0 + 0.3 * id.lean, neck.1 - 0.09 * h);

    PoseKeypoints::new(t)
        .with(Joint::Head, head.0, head.1)
        .with(Joint::LeftShoulder, shoulder.0 - 0.5, shoulder.1)
        .with(Joint::RightShoulder, shoulder.0 + 0.5, shoulder.1)
        .with(Joint::LeftHand, lh.0, lh.1)
        .with(Joint::RightHand, rh.0, rh.1)
        .with(Joint::LeftHip, hip_x - 0.5, hip_y)
        .with(Joint::RightHip, hip_x + 0.5, hip_y)
        .with(Joint::LeftKnee, knee(lf).0, knee(lf).1)
        .with(Joint::RightKnee, knee(rf).0, knee(rf).1)
        .with(Joint::LeftFoot, lf.0, lf.1)
        .with(Joint::RightFoot, rf.0, rf.1)
}

/// A thick textured segment; a point when `a == b`.
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    shade: f64,
}

const STRIPE_PERIOD: f64 = 5.0;
const STRIPE_AMP: f64 = 0.06;

impl Capsule {
    /// Coverage in [0,1] and the texture value at pixel centre `p`.
    fn sample(&self, p: (f64, f64)) -> (f64, f64) {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (self.a.0 + t * dx, self.a.1 + t * dy);
        let dist = ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt();
        let cov = (self.radius + 0.5 - dist).clamp(0.0, 1.0);
        // Stripes across the limb, anchored to its start joint, plus a
        // perpendicular ramp so motion along the stripes is observable.
        let s = t * len2.sqrt();
        let across = if len2 > 0.0 {
            ((p.0 - self.a.0) * -dy + (p.1 - self.a.1) * dx) / len2.sqrt()
        } else {
            p.0 - self.a.0
        };
        let tex = self.shade + STRIPE_AMP * (TAU * s / STRIPE_PERIOD).sin() + 0.01 * across.clamp(-3.0, 3.0);
        (cov, tex)
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let r = self.radius + 1.0;
        (
            self.a.0.min(self.b.0) - r,
            self.a.1.min(self.b.1) - r,
            self.a.0.max(self.b.0) + r,
            self.a.1.max(self.b.1) + r,
        )
    }
}

/// Body parts in back-to-front drawing order. Consumes only keypoints.
fn body_capsules(kp: &PoseKeypoints, h: f64) -> Result<Vec<Capsule>> {
    let j = |joint| kp.get(joint);
    let mid = |a: (f64, f64), b: (f64, f64)| ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
    let hip = mid(j(Joint::LeftHip)?, j(Joint::RightHip)?);
    let shoulder = mid(j(Joint::LeftShoulder)?, j(Joint::RightShoulder)?);
    let cap = |a, b, radius, shade| Capsule { a, b, radius, shade };
    Ok(vec![
        cap(shoulder, j(Joint::RightHand)?, 0.025 * h, 0.12),
        cap(hip, j(Joint::RightKnee)?, 0.035 * h, 0.14),
        cap(j(Joint::RightKnee)?, j(Joint::RightFoot)?, 0.03 * h, 0.12),
        cap(hip, shoulder, 0.06 * h, 0.26),
        cap(j(Joint::Head)?, j(Joint::Head)?, 0.075 * h, 0.30),
        cap(hip, j(Joint::LeftKnee)?, 0.035 * h, 0.22),
        cap(j(Joint::LeftKnee)?, j(Joint::LeftFoot)?, 0.03 * h, 0.20),
        cap(shoulder, j(Joint::LeftHand)?, 0.025 * h, 0.24),
    ])
}

/// Renders one frame and its ground-truth silhouette (coverage ≥ 0.5).
pub fn render(kp: &PoseKeypoints, body_height: f64, scene: &Scene) -> Result<(Frame, Mask)> {
    let (w, h) = (scene.width(), scene.height());
    let mut px: Vec<f64> = scene.background.pixels().iter().map(|&v| v as f64).collect();
    let mut cover = vec![0f64; w * h];
    for c in body_capsules(kp, body_height)? {
        let (bx0, by0, bx1, by1) = c.bounds();
        let xr = (bx0.floor().max(0.0) as usize)..(bx1.ceil().min(w as f64).max(0.0) as usize);
        let yr = (by0.floor().max(0.0) as usize)..(by1.ceil().min(h as f64).max(0.0) as usize);
        for y in yr {
            for x in xr.clone() {
                let (cov, tex) = c.sample((x as f64 + 0.5, y as f64 + 0.5));
                if cov > 0.0 {
                    let i = y * w + x;
                    px[i] = px[i] * (1.0 - cov) + tex * cov;
                    cover[i] = cover[i].max(cov);
                }
            }
        }
    }
    let bytes: Vec<u8> = px.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let frame = Frame::from_gray8(w, h, &bytes)?;
    let mask = Mask {
        width: w,
        height: h,
        bits: cover.iter().map(|&c| c >= 0.5).collect(),
    };
    Ok((frame, mask))
}

/// Identity parameters after applying the condition factor.
pub fn apply_condition(id: &WalkerIdentity, condition: Condition, factor: f64) -> WalkerIdentity {
    let mut p = id.clone();
    match condition {
        Condition::Normal => {}
        Condition::PerturbedA => p.stride_freq *= factor,
        Condition::PerturbedB => {
            p.leg_amplitude *= factor;
            p.arm_amplitude *= factor;
            p.foot_lift *= factor;
        }
    }
    p
}

/// Renders `n_frames` of `id` walking through `scene`.
pub fn generate<R: Rng + ?Sized>(
    label: usize,
    id: &WalkerIdentity,
    condition: Condition,
    n_frames: usize,
    scene: &Scene,
    rng: &mut R,
) -> Result<SyntheticVideo> {
    if n_frames < MIN_FRAMES {
        return Err(input_err!("need at least {MIN_FRAMES} frames, got {n_frames}"));
    }
    if !(id.stride_freq > 0.01 && id.stride_freq < 0.2) {
        return Err(input_err!("stride frequency {} outside (0.01, 0.2)", id.stride_freq));
    }
    let (w, h) = (scene.width() as f64, scene.height() as f64);
    if id.height <= 0.0 || id.height > h - GROUND_MARGIN - 2.0 {
        return Err(input_err!("body height {} does not fit a frame of height {h}", id.height));
    }
    let factor = rng.random_range(0.9..=1.1);
    let p = apply_condition(id, condition, factor);
    let (lo, hi) = hip_band(&p, w);
    let slack = (hi - lo - p.speed * (n_frames - 1) as f64).max(0.0);
    let draw = VideoDraw {
        start_x: lo + rng.random::<f64>() * slack,
        phase: rng.random_range(0.0..TAU),
        factor,
    };
    let mut frames = Vec::with_capacity(n_frames);
    let mut masks = Vec::with_capacity(n_frames);
    let mut keypoints = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let kp = pose_at(&p, &draw, t, w, h);
        let (f, m) = render(&kp, p.height, scene)?;
        frames.push(f);
        masks.push(m);
        keypoints.push(kp);
    }
    Ok(SyntheticVideo {
        label,
        condition,
        frames,
        masks,
        keypoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optflow::{farneback_flow, FlowConfig};
    use proptest::prelude::*;

    fn walker() -> WalkerIdentity {
        WalkerIdentity {
            stride_freq: 0.04,
            leg_amplitude: 8.0,
            arm_amplitude: 0.5,
            arm_phase: 0.2,
            torso_sway: 1.5,
            foot_lift: 4.0,
            lean: 1.0,
            height: 70.0,
            speed: 0.3,
        }
    }

    fn scene() -> Scene {
        Scene::textured(64, 96, 1).unwrap()
    }

    #[test]
    fn same_seed_gives_identical_video() {
        let s = scene();
        let a = generate(0, &walker(), Condition::Normal, 32, &s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = generate(0, &walker(), Condition::Normal, 32, &s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let c = generate(0, &walker(), Condition::Normal, 32, &s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn static_figure_has_no_flow() {
        let id = WalkerIdentity {
            leg_amplitude: 0.0,
            arm_amplitude: 0.0,
            torso_sway: 0.0,
            foot_lift: 0.0,
            speed: 0.0,
            ..walker()
        };
        let v = generate(0, &id, Condition::Normal, 32, &scene(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let f = farneback_flow(&v.frames[3], &v.frames[4], &FlowConfig::default()).unwrap();
        assert!(f.u.iter().chain(&f.v).all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn foot_spectrum_tracks_stride_frequency() {
        let n = 256;
        let dominant = |freq: f64| -> usize {
            let id = WalkerIdentity {
                stride_freq: freq,
                ..walker()
            };
            let draw = VideoDraw {
                start_x: 30.0,
                phase: 0.3,
                factor: 1.0,
            };
            let ys: Vec<f64> = (0..n).map(|t| pose_at(&id, &draw, t, 64.0, 96.0).get(Joint::LeftFoot).unwrap().1).collect();
            let mean = ys.iter().sum::<f64>() / n as f64;
            (1..n / 2)
                .max_by(|&a, &b| {
                    let power = |k: usize| {
                        let (mut re, mut im) = (0.0, 0.0);
                        for (t, y) in ys.iter().enumerate() {
                            let ang = TAU * (k * t) as f64 / n as f64;
                            re += (y - mean) * ang.cos();
                            im -= (y - mean) * ang.sin();
                        }
                        re * re + im * im
                    };
                    power(a).total_cmp(&power(b))
                })
                .unwrap()
        };
        let k1 = dominant(0.03125);
        let k2 = dominant(0.0625);
        assert_eq!(k1, 8);
        assert_eq!(k2, 2 * k1);
    }

    #[test]
    fn keypoints_drive_rendering() {
        let s = scene();
        let v = generate(0, &walker(), Condition::Normal, 32, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (kp, (f, m)) in v.keypoints.iter().zip(v.frames.iter().zip(&v.masks)) {
            let (rf, rm) = render(kp, walker().height, &s).unwrap();
            assert_eq!(&rf, f);
            assert_eq!(&rm, m);
            // Every joint lies on the silhouette.
            for &(x, y) in kp.joints.values() {
                assert!(m.get(x.floor() as usize, y.floor() as usize), "joint at ({x},{y}) off silhouette");
            }
        }
    }

    #[test]
    fn figure_stays_inside_frame() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ids = sample_identities(20, &IdentityRanges::default(), &mut rng).unwrap();
        for (i, id) in ids.iter().enumerate() {
            let v = generate(i, id, Condition::PerturbedB, 64, &s, &mut rng).unwrap();
            for kp in &v.keypoints {
                for &(x, y) in kp.joints.values() {
                    assert!(x >= 0.0 && x < 64.0 && y >= 0.0 && y < 96.0, "identity {i}: joint at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn short_videos_rejected() {
        assert!(generate(0, &walker(), Condition::Normal, 31, &scene(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn latin_hypercube_uses_every_stratum() {
        let r = IdentityRanges::default();
        let ids = sample_identities(20, &r, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut strata: Vec<usize> = ids
            .iter()
            .map(|id| ((id.height - r.height.0) / (r.height.1 - r.height.0) * 20.0).floor() as usize)
            .collect();
        strata.sort();
        assert_eq!(strata, (0..20).collect::<Vec<_>>());
        for i in 0..ids.len() {
            for k in i + 1..ids.len() {
                let (a, b) = (&ids[i], &ids[k]);
                let diffs = [a.stride_freq != b.stride_freq, a.height != b.height, a.speed != b.speed];
                assert!(diffs.iter().filter(|&&d| d).count() >= 2);
            }
        }
    }

    #[test]
    fn bbox_examples() {
        let mut m = Mask::empty(20, 20);
        m.set(7, 9, true);
        assert_eq!(bbox_from_mask(&m).unwrap().bbox, BoxF::new(7.0, 9.0, 1.0, 1.0));
        let full = Mask {
            width: 20,
            height: 30,
            bits: vec![true; 600],
        };
        assert_eq!(bbox_from_mask(&full).unwrap().bbox, BoxF::new(0.0, 0.0, 20.0, 30.0));
        assert!(bbox_from_mask(&Mask::empty(20, 20)).is_err());
    }

    #[test]
    fn background_subtraction_recovers_silhouette() {
        let s = Scene::flat(64, 96, 0.7).unwrap();
        let v = generate(0, &walker(), Condition::Normal, 32, &s, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let masks = subtract_background(&v.frames, &s.background, DEFAULT_BG_THRESHOLD).unwrap();
        for (est, gt) in masks.iter().zip(&v.masks) {
            assert!(est.iou(gt) >= 0.9, "iou {}", est.iou(gt));
        }
        let textured = scene();
        let v = generate(0, &walker(), Condition::Normal, 32, &textured, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let masks = subtract_background(&v.frames, &textured.background, DEFAULT_BG_THRESHOLD).unwrap();
        let worst = masks.iter().zip(&v.masks).map(|(e, g)| e.iou(g)).fold(1.0, f64::min);
        assert!(worst >= 0.9, "textured iou {worst}");
    }

    #[test]
    fn background_subtraction_edge_cases() {
        let bg = Frame::filled(16, 16, 0.5).unwrap();
        let m = subtract_background(std::slice::from_ref(&bg), &bg, 0.0).unwrap();
        assert_eq!(m[0].count(), 0);
        let mut f = bg.clone();
        f.pixels_mut()[0] = 0.5 + 1e-3;
        f.pixels_mut()[1] = 0.5 - 1e-3;
        let m = subtract_background(&[f], &bg, 0.0).unwrap();
        assert_eq!(m[0].count(), 2);
    }

    proptest! {
        #[test]
        fn bbox_matches_scan(points in prop::collection::vec((0usize..40, 0usize..30), 1..30)) {
            let mut m = Mask::empty(40, 30);
            for &(x, y) in &points {
                m.set(x, y, true);
            }
            let b = bbox_from_mask(&m).unwrap().bbox;
            let x0 = points.iter().map(|p| p.0).min().unwrap() as f64;
            let x1 = points.iter().map(|p| p.0).max().unwrap() as f64;
            let y0 = points.iter().map(|p| p.1).min().unwrap() as f64;
            let y1 = points.iter().map(|p| p.1).max().unwrap() as f64;
            prop_assert_eq!(b, BoxF::new(x0, y0, x1 - x0 + 1.0, y1 - y0 + 1.0));
        }
    }
}
