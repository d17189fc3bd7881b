//! Body-part boxes from joint keypoints, box augmentation, and 48×48 patch
//! cropping from encoded flow maps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, GaitError, Result};
use crate::optflow::FlowMap;

pub const PATCH_SIDE: usize = 48;
pub const PATCH_CHANNELS: usize = 3;
pub const PATCH_LEN: usize = PATCH_CHANNELS * PATCH_SIDE * PATCH_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Joint {
    Head,
    LeftShoulder,
    RightShoulder,
    LeftHand,
    RightHand,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftFoot,
    RightFoot,
}

impl Joint {
    pub const ALL: [Joint; 11] = [
        Joint::Head,
        Joint::LeftShoulder,
        Joint::RightShoulder,
        Joint::LeftHand,
        Joint::RightHand,
        Joint::LeftHip,
        Joint::RightHip,
        Joint::LeftKnee,
        Joint::RightKnee,
        Joint::LeftFoot,
        Joint::RightFoot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Joint::Head => "head",
            Joint::LeftShoulder => "left_shoulder",
            Joint::RightShoulder => "right_shoulder",
            Joint::LeftHand => "left_hand",
            Joint::RightHand => "right_hand",
            Joint::LeftHip => "left_hip",
            Joint::RightHip => "right_hip",
            Joint::LeftKnee => "left_knee",
            Joint::RightKnee => "right_knee",
            Joint::LeftFoot => "left_foot",
            Joint::RightFoot => "right_foot",
        }
    }
}

impl FromStr for Joint {
    type Err = GaitError;
    fn from_str(s: &str) -> Result<Self> {
        Joint::ALL
            .into_iter()
            .find(|j| j.name() == s)
            .ok_or_else(|| input_err!("unknown joint {s:?}"))
    }
}

const UPPER_BODY: [Joint; 7] = [
    Joint::Head,
    Joint::LeftShoulder,
    Joint::RightShoulder,
    Joint::LeftHand,
    Joint::RightHand,
    Joint::LeftHip,
    Joint::RightHip,
];
const LOWER_BODY: [Joint; 6] = [
    Joint::LeftHip,
    Joint::RightHip,
    Joint::LeftKnee,
    Joint::RightKnee,
    Joint::LeftFoot,
    Joint::RightFoot,
];

/// Joint positions (pixels) for one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseKeypoints {
    pub frame: usize,
    pub joints: BTreeMap<Joint, (f64, f64)>,
}

impl PoseKeypoints {
    pub fn new(frame: usize) -> Self {
        PoseKeypoints {
            frame,
            joints: BTreeMap::new(),
        }
    }

    pub fn with(mut self, joint: Joint, x: f64, y: f64) -> Self {
        self.joints.insert(joint, (x, y));
        self
    }

    pub fn get(&self, joint: Joint) -> Result<(f64, f64)> {
        self.joints
            .get(&joint)
            .copied()
            .ok_or_else(|| input_err!("frame {}: joint {} missing", self.frame, joint.name()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    RightFoot,
    LeftFoot,
    UpperBody,
    LowerBody,
    FullBody,
}

impl Part {
    /// Canonical order; concatenated descriptors follow it.
    pub const ALL: [Part; 5] = [
        Part::RightFoot,
        Part::LeftFoot,
        Part::UpperBody,
        Part::LowerBody,
        Part::FullBody,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Part::RightFoot => "right_foot",
            Part::LeftFoot => "left_foot",
            Part::UpperBody => "upper_body",
            Part::LowerBody => "lower_body",
            Part::FullBody => "full_body",
        }
    }

    pub fn index(self) -> usize {
        Part::ALL.iter().position(|&p| p == self).unwrap()
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Part {
    type Err = GaitError;
    fn from_str(s: &str) -> Result<Self> {
        Part::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| input_err!("unknown body part {s:?}"))
    }
}

/// Sorts into canonical order and removes duplicates.
pub fn canonical_parts(parts: &[Part]) -> Vec<Part> {
    let mut v = parts.to_vec();
    v.sort();
    v.dedup();
    v
}

/// Axis-aligned box `(x0, y0, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxF {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxF {
    pub fn new(x0: f64, y0: f64, w: f64, h: f64) -> Self {
        BoxF { x0, y0, w, h }
    }

    pub fn x1(&self) -> f64 {
        self.x0 + self.w
    }

    pub fn y1(&self) -> f64 {
        self.y0 + self.h
    }

    pub fn from_points(points: impl IntoIterator<Item = (f64, f64)>) -> Option<BoxF> {
        let mut it = points.into_iter();
        let (x, y) = it.next()?;
        let (mut lx, mut ly, mut hx, mut hy) = (x, y, x, y);
        for (x, y) in it {
            lx = lx.min(x);
            ly = ly.min(y);
            hx = hx.max(x);
            hy = hy.max(y);
        }
        Some(BoxF::new(lx, ly, hx - lx, hy - ly))
    }

    /// Grows outward by the given non-negative margins.
    pub fn extend(&self, left: f64, top: f64, right: f64, bottom: f64) -> BoxF {
        BoxF::new(self.x0 - left, self.y0 - top, self.w + left + right, self.h + top + bottom)
    }

    pub fn contains(&self, other: &BoxF) -> bool {
        const EPS: f64 = 1e-9;
        other.x0 >= self.x0 - EPS && other.y0 >= self.y0 - EPS && other.x1() <= self.x1() + EPS && other.y1() <= self.y1() + EPS
    }

    pub fn intersects_frame(&self, fw: usize, fh: usize) -> bool {
        self.x0 < fw as f64 && self.y0 < fh as f64 && self.x1() > 0.0 && self.y1() > 0.0
    }

    /// Intersection with the frame, kept at least one pixel wide and tall.
    pub fn clamp_to(&self, fw: usize, fh: usize) -> BoxF {
        fn axis(a0: f64, len: f64, n: f64) -> (f64, f64) {
            let lo = a0.clamp(0.0, n - 1.0);
            let hi = (a0 + len).min(n).max(lo + 1.0);
            (lo, hi - lo)
        }
        let (x0, w) = axis(self.x0, self.w, fw as f64);
        let (y0, h) = axis(self.y0, self.h, fh as f64);
        BoxF::new(x0, y0, w, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub part: Part,
    pub bbox: BoxF,
}

/// Five part boxes in canonical order, clamped to the frame. Foot boxes are
/// squares of side `foot_fraction` × full-body height centred on each foot.
pub fn build_part_boxes(kp: &PoseKeypoints, frame_w: usize, frame_h: usize, foot_fraction: f64) -> Result<Vec<PatchSpec>> {
    let pts = |joints: &[Joint]| -> Result<Vec<(f64, f64)>> { joints.iter().map(|&j| kp.get(j)).collect() };
    let full = BoxF::from_points(pts(&Joint::ALL)?).expect("non-empty");
    let upper = BoxF::from_points(pts(&UPPER_BODY)?).expect("non-empty");
    let lower = BoxF::from_points(pts(&LOWER_BODY)?).expect("non-empty");
    let side = (foot_fraction * full.h).max(1.0);
    let foot = |j: Joint| -> Result<BoxF> {
        let (x, y) = kp.get(j)?;
        Ok(BoxF::new(x - side / 2.0, y - side / 2.0, side, side))
    };
    let boxes = [
        (Part::RightFoot, foot(Joint::RightFoot)?),
        (Part::LeftFoot, foot(Joint::LeftFoot)?),
        (Part::UpperBody, upper),
        (Part::LowerBody, lower),
        (Part::FullBody, full),
    ];
    Ok(boxes
        .into_iter()
        .map(|(part, b)| PatchSpec {
            part,
            bbox: b.clamp_to(frame_w, frame_h),
        })
        .collect())
}

/// Random outward extension: left/right from U[0, w/3], top/bottom from
/// U[0, h/3], each drawn independently.
pub fn sample_augmented_box<R: Rng + ?Sized>(spec: &PatchSpec, frame_w: usize, frame_h: usize, rng: &mut R) -> PatchSpec {
    let b = spec.bbox;
    let mut draw = |limit: f64| rng.random::<f64>() * limit;
    let (l, r) = (draw(b.w / 3.0), draw(b.w / 3.0));
    let (t, bo) = (draw(b.h / 3.0), draw(b.h / 3.0));
    PatchSpec {
        part: spec.part,
        bbox: b.extend(l, t, r, bo).clamp_to(frame_w, frame_h),
    }
}

/// Deterministic extension by the mean of the augmentation distribution.
pub fn center_test_box(spec: &PatchSpec, frame_w: usize, frame_h: usize) -> PatchSpec {
    let b = spec.bbox;
    PatchSpec {
        part: spec.part,
        bbox: b
            .extend(b.w / 6.0, b.h / 6.0, b.w / 6.0, b.h / 6.0)
            .clamp_to(frame_w, frame_h),
    }
}

/// A 3×48×48 network input in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub part: Part,
    pub pair_index: usize,
    pub data: Vec<f32>,
}

/// Bilinear resampling of the box region of the encoded flow to 48×48.
/// Output pixel `j` samples source coordinate `x0 + (j + 0.5)·w/48 − 0.5`.
pub fn crop_resize(flow: &FlowMap, spec: &PatchSpec, pair_index: usize) -> Result<Patch> {
    let enc = flow
        .encoded
        .as_ref()
        .ok_or_else(|| input_err!("flow map has no encoded channels"))?;
    let (fw, fh) = (flow.width, flow.height);
    if !spec.bbox.intersects_frame(fw, fh) || spec.bbox.w <= 0.0 || spec.bbox.h <= 0.0 {
        return Err(input_err!("{} box {:?} does not intersect the {fw}x{fh} frame", spec.part, spec.bbox));
    }
    let b = spec.bbox.clamp_to(fw, fh);
    let taps = |start: f64, len: f64, n: usize| -> Vec<(usize, usize, f32)> {
        (0..PATCH_SIDE)
            .map(|j| {
                let s = (start + (j as f64 + 0.5) * len / PATCH_SIDE as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = (s.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(b.x0, b.w, fw);
    let ys = taps(b.y0, b.h, fh);
    let plane = fw * fh;
    let mut data = vec![0f32; PATCH_LEN];
    for c in 0..PATCH_CHANNELS {
        let src = &enc[c * plane..(c + 1) * plane];
        let dst = &mut data[c * PATCH_SIDE * PATCH_SIDE..(c + 1) * PATCH_SIDE * PATCH_SIDE];
        for (py, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (px, &(x0, x1, tx)) in xs.iter().enumerate() {
                let p = |x: usize, y: usize| src[y * fw + x] as f32;
                let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                let bot = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                dst[py * PATCH_SIDE + px] = (top * (1.0 - ty) + bot * ty) / 255.0;
            }
        }
    }
    Ok(Patch {
        part: spec.part,
        pair_index,
        data,
    })
}

/// How evaluation/training boxes are derived from the raw part boxes.
pub enum BoxMode<'a, R: Rng + ?Sized> {
    Augment(&'a mut R),
    Center,
}

/// Patches for the selected parts of one frame pair, in canonical order.
pub fn patches_for_pair<R: Rng + ?Sized>(
    flow: &FlowMap,
    raw_boxes: &[PatchSpec],
    parts: &[Part],
    pair_index: usize,
    mode: BoxMode<'_, R>,
) -> Result<Vec<Patch>> {
    let mut mode = mode;
    let mut out = Vec::with_capacity(parts.len());
    for part in canonical_parts(parts) {
        let spec = raw_boxes
            .iter()
            .find(|s| s.part == part)
            .ok_or_else(|| input_err!("no box for part {part}"))?;
        let spec = match &mut mode {
            BoxMode::Augment(rng) => sample_augmented_box(spec, flow.width, flow.height, *rng),
            BoxMode::Center => center_test_box(spec, flow.width, flow.height),
        };
        out.push(crop_resize(flow, &spec, pair_index)?);
    }
    Ok(out)
}

/// Parses a sidecar of `frame joint x y` records, one per line. Blank lines
/// and lines starting with `#` are ignored.
pub fn parse_keypoints(text: &str) -> Result<Vec<PoseKeypoints>> {
    let mut frames: BTreeMap<usize, PoseKeypoints> = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(input_err!("keypoints line {}: expected 4 fields, got {}", ln + 1, f.len()));
        }
        let frame: usize = f[0].parse().map_err(|_| input_err!("keypoints line {}: bad frame index", ln + 1))?;
        let joint: Joint = f[1].parse()?;
        let x: f64 = f[2].parse().map_err(|_| input_err!("keypoints line {}: bad x", ln + 1))?;
        let y: f64 = f[3].parse().map_err(|_| input_err!("keypoints line {}: bad y", ln + 1))?;
        if !(x.is_finite() && y.is_finite()) {
            return Err(input_err!("keypoints line {}: non-finite coordinate", ln + 1));
        }
        frames.entry(frame).or_insert_with(|| PoseKeypoints::new(frame)).joints.insert(joint, (x, y));
    }
    Ok(frames.into_values().collect())
}

pub fn format_keypoints(kps: &[PoseKeypoints]) -> String {
    let mut s = String::new();
    for kp in kps {
        for (j, (x, y)) in &kp.joints {
            s.push_str(&format!("{} {} {x:.4} {y:.4}\n", kp.frame, j.name()));
        }
    }
    s
}

pub fn read_keypoints(path: &Path) -> Result<Vec<PoseKeypoints>> {
    let text = std::fs::read_to_string(path).map_err(|e| GaitError::io(path, e))?;
    parse_keypoints(&text).map_err(|e| GaitError::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn figure() -> PoseKeypoints {
        PoseKeypoints::new(0)
            .with(Joint::Head, 32.0, 10.0)
            .with(Joint::LeftShoulder, 28.0, 20.0)
            .with(Joint::RightShoulder, 36.0, 20.0)
            .with(Joint::LeftHand, 22.0, 40.0)
            .with(Joint::RightHand, 42.0, 42.0)
            .with(Joint::LeftHip, 30.0, 48.0)
            .with(Joint::RightHip, 34.0, 48.0)
            .with(Joint::LeftKnee, 28.0, 66.0)
            .with(Joint::RightKnee, 38.0, 66.0)
            .with(Joint::LeftFoot, 26.0, 86.0)
            .with(Joint::RightFoot, 40.0, 84.0)
    }

    fn spec(x0: f64, y0: f64, w: f64, h: f64) -> PatchSpec {
        PatchSpec {
            part: Part::FullBody,
            bbox: BoxF::new(x0, y0, w, h),
        }
    }

    fn encoded_flow(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> u8) -> FlowMap {
        let mut fm = FlowMap::zeros(w, h);
        let mut enc = vec![0u8; 3 * w * h];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    enc[c * w * h + y * w + x] = f(c, x, y);
                }
            }
        }
        fm.encoded = Some(enc);
        fm
    }

    #[test]
    fn part_boxes_follow_joint_groups() {
        let boxes = build_part_boxes(&figure(), 64, 96, 0.25).unwrap();
        let parts: Vec<Part> = boxes.iter().map(|b| b.part).collect();
        assert_eq!(parts, Part::ALL);
        assert_eq!(boxes[4].bbox, BoxF::new(22.0, 10.0, 20.0, 76.0));
        assert_eq!(boxes[2].bbox, BoxF::new(22.0, 10.0, 20.0, 38.0));
        // Hands are excluded from the lower body.
        assert_eq!(boxes[3].bbox, BoxF::new(26.0, 48.0, 14.0, 38.0));
        let side = 0.25 * 76.0;
        assert_eq!(boxes[1].bbox, BoxF::new(26.0 - side / 2.0, 86.0 - side / 2.0, side, side));
    }

    #[test]
    fn foot_box_centering() {
        let mut kp = figure().with(Joint::LeftFoot, 30.0, 90.0);
        // Full-body height 96 gives a 24 px foot square.
        kp = kp.with(Joint::Head, 32.0, -6.0);
        let boxes = build_part_boxes(&kp, 200, 200, 0.25).unwrap();
        assert_eq!(boxes[1].bbox, BoxF::new(18.0, 78.0, 24.0, 24.0));
    }

    #[test]
    fn foot_at_corner_is_clamped() {
        let kp = figure().with(Joint::RightFoot, 0.0, 95.5);
        let b = build_part_boxes(&kp, 64, 96, 0.25).unwrap()[0].bbox;
        assert!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1() <= 64.0 && b.y1() <= 96.0);
        assert!(b.w >= 1.0 && b.h >= 1.0);
    }

    #[test]
    fn missing_joint_is_named() {
        let mut kp = figure();
        kp.joints.remove(&Joint::LeftKnee);
        let err = build_part_boxes(&kp, 64, 96, 0.25).unwrap_err().to_string();
        assert!(err.contains("left_knee"), "{err}");
    }

    #[test]
    fn extension_arithmetic() {
        let b = BoxF::new(10.0, 10.0, 30.0, 60.0);
        assert_eq!(b.extend(10.0, 20.0, 10.0, 20.0), BoxF::new(0.0, -10.0, 50.0, 100.0));
        assert_eq!(b.extend(0.0, 0.0, 0.0, 0.0), b);
        let c = center_test_box(&spec(10.0, 10.0, 30.0, 60.0), 1000, 1000).bbox;
        assert_eq!(c, BoxF::new(5.0, 0.0, 40.0, 80.0));
    }

    #[test]
    fn centre_box_is_deterministic_and_valid_for_tiny_boxes() {
        let s = spec(3.0, 4.0, 1.0, 1.0);
        assert_eq!(center_test_box(&s, 64, 96), center_test_box(&s, 64, 96));
        let b = center_test_box(&spec(63.5, 95.5, 1.0, 1.0), 64, 96).bbox;
        assert!(b.w * b.h >= 1.0);
    }

    #[test]
    fn augmentation_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = BoxF::new(100.0, 100.0, 30.0, 60.0);
        let n = 100_000;
        let (mut l, mut t) = (0.0, 0.0);
        for _ in 0..n {
            let a = sample_augmented_box(&PatchSpec { part: Part::FullBody, bbox: b }, 1000, 1000, &mut rng).bbox;
            l += b.x0 - a.x0;
            t += b.y0 - a.y0;
        }
        let (ml, mt) = (l / n as f64, t / n as f64);
        assert!((ml / 5.0 - 1.0).abs() < 0.02, "left mean {ml}");
        assert!((mt / 10.0 - 1.0).abs() < 0.02, "top mean {mt}");
    }

    #[test]
    fn crop_of_48_box_is_exact() {
        let fm = encoded_flow(64, 96, |c, x, y| ((x * 3 + y * 7 + c * 11) % 256) as u8);
        let p = crop_resize(&fm, &spec(5.0, 20.0, 48.0, 48.0), 0).unwrap();
        for c in 0..3 {
            for y in 0..48 {
                for x in 0..48 {
                    let want = (((x + 5) * 3 + (y + 20) * 7 + c * 11) % 256) as f32 / 255.0;
                    assert_eq!(p.data[c * 2304 + y * 48 + x], want);
                }
            }
        }
    }

    #[test]
    fn constant_region_gives_constant_patch() {
        let fm = encoded_flow(64, 96, |_, _, _| 77);
        let p = crop_resize(&fm, &spec(3.3, 7.1, 21.7, 55.2), 2).unwrap();
        assert!(p.data.iter().all(|&v| (v - 77.0 / 255.0).abs() < 1e-6));
        assert_eq!(p.pair_index, 2);
    }

    #[test]
    fn checkerboard_downsize_matches_direct_formula() {
        let fm = encoded_flow(128, 128, |c, x, y| if ((x / 3) + (y / 3) + c) % 2 == 0 { 255 } else { 0 });
        let (x0, y0) = (10.0, 20.0);
        let p = crop_resize(&fm, &spec(x0, y0, 96.0, 96.0), 0).unwrap();
        let enc = fm.encoded.as_ref().unwrap();
        for c in 0..3 {
            for j in 0..48 {
                for i in 0..48 {
                    // Each output pixel sits midway between two source pixels per axis.
                    let sx = x0 as usize + 2 * i;
                    let sy = y0 as usize + 2 * j;
                    let at = |x: usize, y: usize| enc[c * 128 * 128 + y * 128 + x] as f64;
                    let want = (at(sx, sy) + at(sx + 1, sy) + at(sx, sy + 1) + at(sx + 1, sy + 1)) / 4.0 / 255.0;
                    let got = p.data[c * 2304 + j * 48 + i] as f64;
                    assert!((got - want).abs() <= 1.0 / 255.0, "({c},{i},{j}) {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn crop_outside_frame_errors() {
        let fm = encoded_flow(64, 96, |_, _, _| 0);
        assert!(crop_resize(&fm, &spec(70.0, 10.0, 10.0, 10.0), 0).is_err());
        assert!(crop_resize(&FlowMap::zeros(64, 96), &spec(0.0, 0.0, 10.0, 10.0), 0).is_err());
    }

    #[test]
    fn pair_yields_one_patch_per_part() {
        let fm = encoded_flow(64, 96, |_, x, _| x as u8);
        let boxes = build_part_boxes(&figure(), 64, 96, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = patches_for_pair(&fm, &boxes, &Part::ALL, 0, BoxMode::Augment(&mut rng)).unwrap();
        assert_eq!(ps.len(), 5);
        let ps = patches_for_pair::<ChaCha8Rng>(&fm, &boxes, &[Part::FullBody, Part::LeftFoot], 0, BoxMode::Center).unwrap();
        assert_eq!(ps.iter().map(|p| p.part).collect::<Vec<_>>(), vec![Part::LeftFoot, Part::FullBody]);
    }

    #[test]
    fn keypoint_sidecar_round_trip() {
        let kps = vec![figure(), PoseKeypoints { frame: 1, ..figure() }];
        let text = format_keypoints(&kps);
        assert_eq!(parse_keypoints(&text).unwrap(), kps);
        assert!(parse_keypoints("0 elbow 1 2").is_err());
        assert!(parse_keypoints("0 head 1").is_err());
    }

    proptest! {
        #[test]
        fn augmented_contains_original(
            x0 in 0.0f64..60.0, y0 in 0.0f64..90.0, w in 1.0f64..40.0, h in 1.0f64..60.0, seed in any::<u64>()
        ) {
            let s = PatchSpec { part: Part::UpperBody, bbox: BoxF::new(x0, y0, w, h).clamp_to(64, 96) };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = sample_augmented_box(&s, 64, 96, &mut rng);
            prop_assert!(a.bbox.contains(&s.bbox));
            prop_assert!(center_test_box(&s, 64, 96).bbox.contains(&s.bbox));
        }

        #[test]
        fn augmentation_stream_is_seeded(seed in any::<u64>()) {
            let s = spec(10.0, 10.0, 20.0, 40.0);
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..5 {
                prop_assert_eq!(sample_augmented_box(&s, 64, 96, &mut a), sample_augmented_box(&s, 64, 96, &mut b));
            }
        }
    }
}
