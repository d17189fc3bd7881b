//! Dense optical flow by Farnebäck polynomial expansion, and the 3-channel
//! byte encoding used as network input.
//!
//! Each frame is locally approximated by a quadratic polynomial
//! `f(x) ~ x^T A x + b^T x + c`, fitted by Gaussian-weighted least squares.
//! A displacement `d` between two frames satisfies `A d = -(b2 - b1)/2`; the
//! normal equations of that constraint are box-filtered over a window and
//! solved per pixel, refined over a coarse-to-fine pyramid.

use std::path::{Path, PathBuf};

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, GaitError, Result};

/// Smallest pyramid level side the solver will use.
const MIN_LEVEL_SIZE: f64 = 32.0;
/// Width of the attenuated border in the constraint matrices.
const BORDER: usize = 5;
const BORDER_WEIGHTS: [f32; BORDER] = [0.14, 0.14, 0.4472, 0.4472, 0.4472];

pub const MIN_FRAME_SIDE: usize = 16;

/// Grayscale frame with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < MIN_FRAME_SIDE || height < MIN_FRAME_SIDE {
            return Err(input_err!(
                "frame {width}x{height} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
            ));
        }
        if pixels.len() != width * height {
            return Err(input_err!(
                "frame {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            ));
        }
        Ok(Frame { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Frame::new(width, height, vec![value; width * height])
    }

    pub fn from_gray8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Frame::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Quantized to 8 bits, rounding to nearest.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Pyramid and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of pyramid levels above the original resolution.
    pub levels: usize,
    pub pyr_scale: f64,
    /// Side of the box window averaging the displacement constraints.
    pub window: usize,
    pub iterations: usize,
    /// Half-size of the polynomial fitting neighbourhood.
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            levels: 3,
            pyr_scale: 0.5,
            window: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyr_scale > 0.0 && self.pyr_scale < 1.0) {
            return Err(GaitError::Config(format!("pyr_scale {} must lie in (0,1)", self.pyr_scale)));
        }
        if self.window < 1 || self.iterations < 1 || self.poly_n < 1 {
            return Err(GaitError::Config("window, iterations and poly_n must be >= 1".into()));
        }
        if self.poly_sigma <= 0.0 {
            return Err(GaitError::Config("poly_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel displacement (pixels/frame) from one frame to the next.
///
/// `encoded`, when present, is planar `[3][height][width]`: horizontal
/// component, vertical component, magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub encoded: Option<Vec<u8>>,
}

impl FlowMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowMap {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
            encoded: None,
        }
    }

    /// Mean of `(u, v)` over pixels at least `margin` away from every edge.
    pub fn interior_mean(&self, margin: usize) -> (f64, f64) {
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                su += self.u[y * self.width + x] as f64;
                sv += self.v[y * self.width + x] as f64;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        (su / n, sv / n)
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|v| v.is_finite())
    }
}

/// Byte encoding of one displacement with saturation at `clip` px/frame.
pub fn encode_vector(u: f32, v: f32, clip: f32) -> [u8; 3] {
    let lin = |c: f32| -> u8 {
        let c = c.clamp(-clip, clip) as f64;
        let clip = clip as f64;
        (255.0 * (c + clip) / (2.0 * clip)).round() as u8
    };
    let mag_max = clip as f64 * std::f64::consts::SQRT_2;
    let mag = ((u as f64).powi(2) + (v as f64).powi(2)).sqrt().min(mag_max);
    [lin(u), lin(v), (255.0 * mag / mag_max).round() as u8]
}

/// Fills `flow.encoded` with the byte image of the displacement field.
pub fn encode_flow(mut flow: FlowMap, clip: f32) -> Result<FlowMap> {
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(input_err!("flow clip must be positive, got {clip}"));
    }
    let n = flow.width * flow.height;
    let mut enc = vec![0u8; 3 * n];
    for i in 0..n {
        let [a, b, c] = encode_vector(flow.u[i], flow.v[i], clip);
        enc[i] = a;
        enc[n + i] = b;
        enc[2 * n + i] = c;
    }
    flow.encoded = Some(enc);
    Ok(flow)
}

/// Single-channel f32 image used internally by the solver.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }
}

fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

fn gaussian_kernel(ksize: usize, sigma: f64) -> Vec<f32> {
    let sigma = if sigma > 0.0 {
        sigma
    } else {
        0.3 * ((ksize as f64 - 1.0) * 0.5 - 1.0) + 0.8
    };
    let half = (ksize / 2) as isize;
    let raw: Vec<f64> = (-half..=half)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / s) as f32).collect()
}

fn gaussian_blur(src: &Plane, ksize: usize, sigma: f64) -> Plane {
    let k = gaussian_kernel(ksize, sigma);
    let half = (ksize / 2) as isize;
    let (w, h) = (src.w, src.h);
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (i, &kv) in k.iter().enumerate() {
                let xx = reflect101(x as isize + i as isize - half, w);
                acc += kv * src.data[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for (i, &kv) in k.iter().enumerate() {
            let yy = reflect101(y as isize + i as isize - half, h);
            let row = &tmp[yy * w..(yy + 1) * w];
            for x in 0..w {
                out[y * w + x] += kv * row[x];
            }
        }
    }
    Plane { w, h, data: out }
}

/// Bilinear resize with pixel-centre alignment over `channels` interleaved values.
fn resize_linear(src: &[f32], sw: usize, sh: usize, channels: usize, dw: usize, dh: usize) -> Vec<f32> {
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    let axis = |d: usize, sn: usize, dn: usize| -> (usize, usize, f32) {
        let f = ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).max(0.0);
        let i0 = (f.floor() as usize).min(sn - 1);
        let i1 = (i0 + 1).min(sn - 1);
        let t = if i0 == sn - 1 { 0.0 } else { (f - i0 as f64) as f32 };
        (i0, i1, t)
    };
    let mut out = vec![0f32; dw * dh * channels];
    for y in 0..dh {
        let (y0, y1, ty) = axis(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, tx) = axis(x, sw, dw);
            for c in 0..channels {
                let p = |xx: usize, yy: usize| src[(yy * sw + xx) * channels + c];
                let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                let bot = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                out[(y * dw + x) * channels + c] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Gaussian applicability and the inverse normal-matrix entries needed to
/// turn separable correlations into polynomial coefficients.
struct PolyBasis {
    n: usize,
    g: Vec<f32>,
    xg: Vec<f32>,
    xxg: Vec<f32>,
    ig11: f64,
    ig03: f64,
    ig33: f64,
    ig55: f64,
}

impl PolyBasis {
    fn new(n: usize, sigma: f64) -> Self {
        let ni = n as isize;
        let mut g: Vec<f64> = (-ni..=ni).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        let gf: Vec<f32> = g.iter().map(|&v| v as f32).collect();
        let xg: Vec<f32> = (-ni..=ni).zip(&g).map(|(x, &v)| (x as f64 * v) as f32).collect();
        let xxg: Vec<f32> = (-ni..=ni).zip(&g).map(|(x, &v)| ((x * x) as f64 * v) as f32).collect();

        // Normal matrix over the basis {1, x, y, x^2, y^2, xy}.
        let mut gm = Matrix6::<f64>::zeros();
        for y in -ni..=ni {
            for x in -ni..=ni {
                let w = gf[(y + ni) as usize] as f64 * gf[(x + ni) as usize] as f64;
                let (xf, yf) = (x as f64, y as f64);
                gm[(0, 0)] += w;
                gm[(1, 1)] += w * xf * xf;
                gm[(3, 3)] += w * xf.powi(4);
                gm[(5, 5)] += w * xf * xf * yf * yf;
            }
        }
        let g11 = gm[(1, 1)];
        gm[(2, 2)] = g11;
        gm[(0, 3)] = g11;
        gm[(0, 4)] = g11;
        gm[(3, 0)] = g11;
        gm[(4, 0)] = g11;
        gm[(4, 4)] = gm[(3, 3)];
        gm[(3, 4)] = gm[(5, 5)];
        gm[(4, 3)] = gm[(5, 5)];
        let inv = gm.cholesky().expect("polynomial normal matrix is SPD").inverse();
        PolyBasis {
            n,
            g: gf,
            xg,
            xxg,
            ig11: inv[(1, 1)],
            ig03: inv[(0, 3)],
            ig33: inv[(3, 3)],
            ig55: inv[(5, 5)],
        }
    }
}

/// Polynomial expansion. Output holds 5 coefficients per pixel:
/// `[b_y, b_x, a_yy, a_xx, a_xy]`.
fn poly_expand(src: &Plane, basis: &PolyBasis) -> Vec<f32> {
    let (w, h, n) = (src.w, src.h, basis.n);
    let (g, xg, xxg) = (&basis.g, &basis.xg, &basis.xxg);
    let c = n; // centre index of the kernels
    let mut dst = vec![0f32; w * h * 5];
    // Row buffer with n replicated pixels on each side, 3 values per pixel.
    let mut row = vec![0f32; (w + 2 * n) * 3];
    for y in 0..h {
        let r = &mut row[n * 3..(n + w) * 3];
        for x in 0..w {
            r[x * 3] = src.at(x, y) * g[c];
            r[x * 3 + 1] = 0.0;
            r[x * 3 + 2] = 0.0;
        }
        for k in 1..=n {
            let y0 = y.saturating_sub(k);
            let y1 = (y + k).min(h - 1);
            let (g0, g1, g2) = (g[c + k], xg[c + k], xxg[c + k]);
            for x in 0..w {
                let (a, b) = (src.at(x, y0), src.at(x, y1));
                let p = a + b;
                r[x * 3] += g0 * p;
                r[x * 3 + 1] += g1 * (b - a);
                r[x * 3 + 2] += g2 * p;
            }
        }
        for k in 0..n {
            for j in 0..3 {
                row[k * 3 + j] = row[n * 3 + j];
                row[(n + w + k) * 3 + j] = row[(n + w - 1) * 3 + j];
            }
        }
        for x in 0..w {
            let at = |dx: isize, j: usize| row[((x + n) as isize + dx) as usize * 3 + j] as f64;
            let g0 = g[c] as f64;
            let mut b1 = at(0, 0) * g0;
            let mut b2 = 0.0;
            let mut b3 = at(0, 1) * g0;
            let mut b4 = 0.0;
            let mut b5 = at(0, 2) * g0;
            let mut b6 = 0.0;
            for k in 1..=n as isize {
                let ku = (c as isize + k) as usize;
                let (gk, xgk, xxgk) = (g[ku] as f64, xg[ku] as f64, xxg[ku] as f64);
                let tg = at(k, 0) + at(-k, 0);
                b1 += tg * gk;
                b4 += tg * xxgk;
                b2 += (at(k, 0) - at(-k, 0)) * xgk;
                b3 += (at(k, 1) + at(-k, 1)) * gk;
                b6 += (at(k, 1) - at(-k, 1)) * xgk;
                b5 += (at(k, 2) + at(-k, 2)) * gk;
            }
            let d = &mut dst[(y * w + x) * 5..(y * w + x) * 5 + 5];
            d[0] = (b3 * basis.ig11) as f32;
            d[1] = (b2 * basis.ig11) as f32;
            d[2] = (b1 * basis.ig03 + b5 * basis.ig33) as f32;
            d[3] = (b1 * basis.ig03 + b4 * basis.ig33) as f32;
            d[4] = (b6 * basis.ig55) as f32;
        }
    }
    dst
}

/// Builds per-pixel normal equations `G d = h` of the displacement
/// constraint, given the current flow estimate (interleaved `[dx, dy]`).
fn update_matrices(r0: &[f32], r1: &[f32], flow: &[f32], w: usize, h: usize, m: &mut [f32]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (flow[i * 2], flow[i * 2 + 1]);
            let fx = x as f32 + dx;
            let fy = y as f32 + dy;
            let x1 = fx.floor();
            let y1 = fy.floor();
            let r0p = &r0[i * 5..i * 5 + 5];
            let (mut r2, mut r3, r4, r5, r6);
            if fx >= 0.0 && fy >= 0.0 && fx <= (w - 1) as f32 && fy <= (h - 1) as f32 {
                let (xi, yi) = ((x1 as usize).min(w - 2), (y1 as usize).min(h - 2));
                let (tx, ty) = (fx - xi as f32, fy - yi as f32);
                let a00 = (1.0 - tx) * (1.0 - ty);
                let a01 = tx * (1.0 - ty);
                let a10 = (1.0 - tx) * ty;
                let a11 = tx * ty;
                let base = (yi * w + xi) * 5;
                let s = |j: usize| {
                    a00 * r1[base + j] + a01 * r1[base + 5 + j] + a10 * r1[base + w * 5 + j] + a11 * r1[base + w * 5 + 5 + j]
                };
                r2 = s(0);
                r3 = s(1);
                r4 = (r0p[2] + s(2)) * 0.5;
                r5 = (r0p[3] + s(3)) * 0.5;
                r6 = (r0p[4] + s(4)) * 0.25;
            } else {
                r2 = 0.0;
                r3 = 0.0;
                r4 = r0p[2];
                r5 = r0p[3];
                r6 = r0p[4] * 0.5;
            }
            r2 = (r0p[0] - r2) * 0.5;
            r3 = (r0p[1] - r3) * 0.5;
            r2 += r4 * dy + r6 * dx;
            r3 += r6 * dy + r5 * dx;

            let (mut r2, mut r3, mut r4, mut r5, mut r6) = (r2, r3, r4, r5, r6);
            if x < BORDER || x >= w - BORDER || y < BORDER || y >= h - BORDER {
                let mut scale = 1.0f32;
                if x < BORDER {
                    scale *= BORDER_WEIGHTS[x];
                }
                if x >= w - BORDER {
                    scale *= BORDER_WEIGHTS[w - x - 1];
                }
                if y < BORDER {
                    scale *= BORDER_WEIGHTS[y];
                }
                if y >= h - BORDER {
                    scale *= BORDER_WEIGHTS[h - y - 1];
                }
                r2 *= scale;
                r3 *= scale;
                r4 *= scale;
                r5 *= scale;
                r6 *= scale;
            }
            let o = &mut m[i * 5..i * 5 + 5];
            o[0] = r4 * r4 + r6 * r6;
            o[1] = (r4 + r5) * r6;
            o[2] = r5 * r5 + r6 * r6;
            o[3] = r4 * r2 + r6 * r3;
            o[4] = r6 * r2 + r5 * r3;
        }
    }
}

/// Box filter of side `win` with replicated borders over 5 interleaved channels.
fn box_filter5(m: &[f32], w: usize, h: usize, win: usize) -> Vec<f64> {
    let half = (win / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut vs = vec![0f64; w * h * 5];
    for x in 0..w {
        let mut acc = [0f64; 5];
        for k in -half..=half {
            let yy = clamp(k, h);
            for j in 0..5 {
                acc[j] += m[(yy * w + x) * 5 + j] as f64;
            }
        }
        for y in 0..h {
            vs[(y * w + x) * 5..(y * w + x) * 5 + 5].copy_from_slice(&acc);
            let out_y = clamp(y as isize - half, h);
            let in_y = clamp(y as isize + half + 1, h);
            for j in 0..5 {
                acc[j] += m[(in_y * w + x) * 5 + j] as f64 - m[(out_y * w + x) * 5 + j] as f64;
            }
        }
    }
    let mut out = vec![0f64; w * h * 5];
    for y in 0..h {
        let mut acc = [0f64; 5];
        for k in -half..=half {
            let xx = clamp(k, w);
            for j in 0..5 {
                acc[j] += vs[(y * w + xx) * 5 + j];
            }
        }
        for x in 0..w {
            out[(y * w + x) * 5..(y * w + x) * 5 + 5].copy_from_slice(&acc);
            let out_x = clamp(x as isize - half, w);
            let in_x = clamp(x as isize + half + 1, w);
            for j in 0..5 {
                acc[j] += vs[(y * w + in_x) * 5 + j] - vs[(y * w + out_x) * 5 + j];
            }
        }
    }
    out
}

fn solve_flow(sums: &[f64], flow: &mut [f32], win: usize) {
    let scale = 1.0 / (win * win) as f64;
    for (i, s) in sums.chunks_exact(5).enumerate() {
        let (g11, g12, g22, h1, h2) = (s[0] * scale, s[1] * scale, s[2] * scale, s[3] * scale, s[4] * scale);
        let idet = 1.0 / (g11 * g22 - g12 * g12 + 1e-3);
        flow[i * 2] = ((g11 * h2 - g12 * h1) * idet) as f32;
        flow[i * 2 + 1] = ((g22 * h1 - g12 * h2) * idet) as f32;
    }
}

/// Dense Farnebäck flow from `prev` to `next`: content at `p` in `prev`
/// appears at `p + (u, v)` in `next`.
pub fn farneback_flow(prev: &Frame, next: &Frame, cfg: &FlowConfig) -> Result<FlowMap> {
    if prev.width != next.width || prev.height != next.height {
        return Err(input_err!(
            "frame sizes differ: {}x{} vs {}x{}",
            prev.width,
            prev.height,
            next.width,
            next.height
        ));
    }
    cfg.validate()?;
    let (fw, fh) = (prev.width, prev.height);
    let mut levels = 0;
    let mut s = 1.0;
    while levels < cfg.levels {
        s *= cfg.pyr_scale;
        if (fw as f64) * s < MIN_LEVEL_SIZE || (fh as f64) * s < MIN_LEVEL_SIZE {
            break;
        }
        levels += 1;
    }
    let basis = PolyBasis::new(cfg.poly_n, cfg.poly_sigma);
    // The solver's regularizer assumes 8-bit intensity scale.
    let to_plane = |f: &Frame| Plane {
        w: fw,
        h: fh,
        data: f.pixels.iter().map(|&p| p * 255.0).collect(),
    };
    let frames = [to_plane(prev), to_plane(next)];
    let mut prev_flow: Option<(Vec<f32>, usize, usize)> = None;
    for k in (0..=levels).rev() {
        let scale = cfg.pyr_scale.powi(k as i32);
        let sigma = (1.0 / scale - 1.0) * 0.5;
        let smooth = (((sigma * 5.0).round() as usize) | 1).max(3);
        let w = ((fw as f64) * scale).round() as usize;
        let h = ((fh as f64) * scale).round() as usize;

        let mut flow = match &prev_flow {
            None => vec![0f32; w * h * 2],
            Some((pf, pw, ph)) => {
                let mut f = resize_linear(pf, *pw, *ph, 2, w, h);
                let up = (1.0 / cfg.pyr_scale) as f32;
                f.iter_mut().for_each(|v| *v *= up);
                f
            }
        };
        let r: Vec<Vec<f32>> = frames
            .iter()
            .map(|img| {
                let blurred = gaussian_blur(img, smooth, sigma);
                let resized = Plane {
                    w,
                    h,
                    data: resize_linear(&blurred.data, fw, fh, 1, w, h),
                };
                poly_expand(&resized, &basis)
            })
            .collect();
        let mut m = vec![0f32; w * h * 5];
        update_matrices(&r[0], &r[1], &flow, w, h, &mut m);
        for it in 0..cfg.iterations {
            let sums = box_filter5(&m, w, h, cfg.window);
            solve_flow(&sums, &mut flow, cfg.window);
            if it + 1 < cfg.iterations {
                update_matrices(&r[0], &r[1], &flow, w, h, &mut m);
            }
        }
        prev_flow = Some((flow, w, h));
    }
    let (flow, _, _) = prev_flow.expect("at least one level");
    let mut out = FlowMap::zeros(fw, fh);
    for i in 0..fw * fh {
        out.u[i] = flow[i * 2];
        out.v[i] = flow[i * 2 + 1];
    }
    if !out.is_finite() {
        return Err(GaitError::Numeric("optical flow produced non-finite values".into()));
    }
    Ok(out)
}

/// Flow for every consecutive pair of `frames`.
pub fn video_flow(frames: &[Frame], cfg: &FlowConfig) -> Result<Vec<FlowMap>> {
    use rayon::prelude::*;
    (0..frames.len().saturating_sub(1))
        .into_par_iter()
        .map(|i| farneback_flow(&frames[i], &frames[i + 1], cfg))
        .collect()
}

/// Loads every image in `dir`, sorted by the numeric value of its file stem,
/// converting colour input to luma.
pub fn load_frames_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut entries: Vec<(u64, PathBuf)> = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| GaitError::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| GaitError::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let Some(idx) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        entries.push((idx, path));
    }
    entries.sort();
    entries.iter().map(|(_, p)| load_frame(p)).collect()
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| GaitError::format(path, e.to_string()))?;
    let gray = img.to_luma8();
    Frame::from_gray8(gray.width() as usize, gray.height() as usize, gray.as_raw())
}

/// Writes an 8-bit grayscale frame as binary PGM.
pub fn save_frame_pgm(frame: &Frame, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    bytes.extend_from_slice(&frame.to_gray8());
    std::fs::write(path, bytes).map_err(|e| GaitError::io(path, e))
}

/// Writes the encoded channels as an RGB image (format from the extension).
pub fn export_encoded(flow: &FlowMap, path: &Path) -> Result<()> {
    let enc = flow
        .encoded
        .as_ref()
        .ok_or_else(|| input_err!("flow map has no encoded channels"))?;
    let n = flow.width * flow.height;
    let mut rgb = Vec::with_capacity(3 * n);
    for i in 0..n {
        rgb.extend_from_slice(&[enc[i], enc[n + i], enc[2 * n + i]]);
    }
    let img = image::RgbImage::from_raw(flow.width as u32, flow.height as u32, rgb)
        .ok_or_else(|| input_err!("encoded buffer size mismatch"))?;
    img.save(path).map_err(|e| GaitError::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Periodic texture built from sinusoids, so integer wrap-around shifts
    /// are exact.
    pub(crate) fn smooth_texture(w: usize, h: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64, f64)> = (0..10)
            .map(|_| {
                (
                    rng.random_range(-6..=6) as f64,
                    rng.random_range(-6..=6) as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        let mut out = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for &(kx, ky, ph, a) in &waves {
                    let arg = std::f64::consts::TAU * (kx * x as f64 / w as f64 + ky * y as f64 / h as f64) + ph;
                    v += a * arg.sin();
                }
                out[y * w + x] = (0.5 + 0.08 * v).clamp(0.0, 1.0) as f32;
            }
        }
        out
    }

    pub(crate) fn shifted(src: &[f32], w: usize, h: usize, dx: isize, dy: isize) -> Vec<f32> {
        let mut out = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                out[y * w + x] = src[sy * w + sx];
            }
        }
        out
    }

    fn shift_pair(dx: isize, dy: isize) -> (Frame, Frame) {
        let (w, h) = (96, 96);
        let tex = smooth_texture(w, h, 11);
        let next = shifted(&tex, w, h, dx, dy);
        (Frame::new(w, h, tex).unwrap(), Frame::new(w, h, next).unwrap())
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let (a, _) = shift_pair(0, 0);
        let f = farneback_flow(&a, &a, &FlowConfig::default()).unwrap();
        assert!(f.u.iter().chain(&f.v).all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn constant_frames_are_not_an_error() {
        let a = Frame::filled(32, 32, 0.3).unwrap();
        let f = farneback_flow(&a, &a, &FlowConfig::default()).unwrap();
        assert!(f.u.iter().chain(&f.v).all(|&v| v == 0.0));
    }

    #[test]
    fn recovers_shift_2_1() {
        let (a, b) = shift_pair(2, 1);
        let f = farneback_flow(&a, &b, &FlowConfig::default()).unwrap();
        let (mu, mv) = f.interior_mean(8);
        assert!((mu - 2.0).abs() < 0.1, "mean u = {mu}");
        assert!((mv - 1.0).abs() < 0.1, "mean v = {mv}");
    }

    #[test]
    fn recovers_negative_shift() {
        let (a, b) = shift_pair(-3, 0);
        let f = farneback_flow(&a, &b, &FlowConfig::default()).unwrap();
        let (mu, mv) = f.interior_mean(8);
        assert!((mu + 3.0).abs() < 0.1, "mean u = {mu}");
        assert!(mv.abs() < 0.1, "mean v = {mv}");
    }

    #[test]
    fn recovers_translations_up_to_four_px() {
        let (w, h) = (96, 96);
        let tex = smooth_texture(w, h, 3);
        let a = Frame::new(w, h, tex.clone()).unwrap();
        for dy in -4..=4 {
            for dx in -4..=4 {
                let b = Frame::new(w, h, shifted(&tex, w, h, dx, dy)).unwrap();
                let f = farneback_flow(&a, &b, &FlowConfig::default()).unwrap();
                let (mut err, mut n) = (0.0, 0);
                for y in 8..h - 8 {
                    for x in 8..w - 8 {
                        let i = y * w + x;
                        err += (f.u[i] as f64 - dx as f64).abs() + (f.v[i] as f64 - dy as f64).abs();
                        n += 2;
                    }
                }
                let mae = err / n as f64;
                assert!(mae < 0.25, "shift ({dx},{dy}): mean abs error {mae}");
            }
        }
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let a = Frame::filled(32, 32, 0.0).unwrap();
        let b = Frame::filled(32, 33, 0.0).unwrap();
        assert!(matches!(farneback_flow(&a, &b, &FlowConfig::default()), Err(GaitError::Input(_))));
    }

    #[test]
    fn small_frames_rejected() {
        assert!(Frame::filled(15, 40, 0.0).is_err());
    }

    #[test]
    fn binary_silhouettes_give_finite_flow() {
        let (w, h) = (48, 64);
        let mask = |off: usize| {
            let mut p = vec![0f32; w * h];
            for y in 10..50 {
                for x in 10 + off..22 + off {
                    p[y * w + x] = 1.0;
                }
            }
            Frame::new(w, h, p).unwrap()
        };
        let f = farneback_flow(&mask(0), &mask(2), &FlowConfig::default()).unwrap();
        assert!(f.is_finite());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_vector(0.0, 0.0, 16.0), [128, 128, 0]);
        let e = encode_vector(16.0, 0.0, 16.0);
        assert_eq!(e[0], 255);
        assert_eq!(e[2], 180);
        assert_eq!(encode_vector(-21.0, 0.0, 16.0)[0], 0);
        assert!(encode_flow(FlowMap::zeros(16, 16), 0.0).is_err());
    }

    #[test]
    fn encoded_layout_is_planar() {
        let mut f = FlowMap::zeros(16, 16);
        f.u[5] = 16.0;
        let f = encode_flow(f, 16.0).unwrap();
        let enc = f.encoded.unwrap();
        assert_eq!(enc[5], 255);
        assert_eq!(enc[256 + 5], 128);
        assert_eq!(enc[512 + 5], 180);
    }

    #[test]
    fn resize_identity_and_constant() {
        let src: Vec<f32> = (0..20).map(|i| i as f32).collect();
        assert_eq!(resize_linear(&src, 5, 4, 1, 5, 4), src);
        let c = vec![0.7f32; 16 * 16];
        assert!(resize_linear(&c, 16, 16, 1, 8, 8).iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_is_monotone(u in -30f32..30.0, v in -30f32..30.0, du in 0f32..5.0) {
            let a = encode_vector(u, v, 16.0);
            let b = encode_vector(u + du, v, 16.0);
            prop_assert!(b[0] >= a[0]);
            let c = encode_vector(v, u, 16.0);
            let d = encode_vector(v, u + du, 16.0);
            prop_assert!(d[1] >= c[1]);
        }

        #[test]
        fn encode_negation_mirrors(u in -30f32..30.0, v in -30f32..30.0) {
            let a = encode_vector(u, v, 16.0);
            let b = encode_vector(-u, -v, 16.0);
            prop_assert!(((a[0] as f64 + b[0] as f64) - 255.0).abs() <= 1.0);
            prop_assert!(((a[1] as f64 + b[1] as f64) - 255.0).abs() <= 1.0);
            prop_assert_eq!(a[2], b[2]);
        }

        #[test]
        fn magnitude_channel_monotone(r in 0f32..30.0, dr in 0f32..5.0, theta in 0f32..6.28) {
            let a = encode_vector(r * theta.cos(), r * theta.sin(), 16.0);
            let b = encode_vector((r + dr) * theta.cos(), (r + dr) * theta.sin(), 16.0);
            prop_assert!(b[2] as i32 + 1 >= a[2] as i32);
        }
    }
}
