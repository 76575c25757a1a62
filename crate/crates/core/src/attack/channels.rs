//! Differentiable simulators of the two physical injection channels.
//!
//! AAI: a trailing motion blur. The output at a pixel is the mean of the
//! input sampled at `SAMPLES` evenly spaced points along the segment of
//! length `blur_len` pointing at `angle`, with bilinear interpolation and
//! edge-clamped borders. At `blur_len = 0` every sample sits on the pixel
//! itself, so the kernel is exactly the identity.
//!
//! EAI: additive offsets that are constant along each pixel row, one per
//! row and color channel, followed by clipping to `[0, 1]`.

use std::collections::BTreeMap;

use rmot_autograd::{CustomOp, Tensor, Var};

use crate::error::{CoreError, Result};

/// Points sampled along the blur segment; a power of two keeps the
/// identity kernel exact.
pub const SAMPLES: usize = 16;

/// Default maximum blur length in pixels.
pub const BLUR_MAX: f64 = 9.0;

/// Default EAI offset bound.
pub const EAI_AMPLITUDE: f64 = 16.0 / 255.0;

/// Sparse kernel: `(dy, dx) → weight`.
type Taps = BTreeMap<(i64, i64), f64>;

/// Bilinear base index and fraction of `p`. When `p` is an integer and
/// moves downward (`dp < 0`) the left cell is used so derivatives are
/// one-sided in the direction of motion.
fn cell(p: f64, dp: f64) -> (i64, f64) {
    let b = p.floor();
    let f = p - b;
    if f == 0.0 && dp < 0.0 {
        (b as i64 - 1, 1.0)
    } else {
        (b as i64, f)
    }
}

fn sample_offsets(blur_len: f64, angle: f64) -> impl Iterator<Item = (f64, f64, f64)> {
    let (s, c) = angle.sin_cos();
    (0..SAMPLES).map(move |m| {
        let frac = (m as f64 + 0.5) / SAMPLES as f64;
        (frac, blur_len * frac * c, blur_len * frac * s)
    })
}

/// Kernel weights at `(blur_len, angle)`.
fn kernel(blur_len: f64, angle: f64) -> Taps {
    let mut taps = Taps::new();
    let w = 1.0 / SAMPLES as f64;
    for (_, px, py) in sample_offsets(blur_len, angle) {
        let (x0, fx) = cell(px, 0.0);
        let (y0, fy) = cell(py, 0.0);
        for (dy, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
            for (dx, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
                let v = w * wx * wy;
                if v != 0.0 {
                    *taps.entry((dy, dx)).or_insert(0.0) += v;
                }
            }
        }
    }
    taps
}

/// Derivatives of the kernel weights with respect to blur length and angle.
fn kernel_derivatives(blur_len: f64, angle: f64) -> (Taps, Taps) {
    let (s, c) = angle.sin_cos();
    let w = 1.0 / SAMPLES as f64;
    let mut d_len = Taps::new();
    let mut d_angle = Taps::new();
    for (frac, px, py) in sample_offsets(blur_len, angle) {
        let u = blur_len * frac;
        let moves = [(frac * c, frac * s, &mut d_len), (-u * s, u * c, &mut d_angle)];
        for (dpx, dpy, out) in moves {
            let (x0, fx) = cell(px, dpx);
            let (y0, fy) = cell(py, dpy);
            for (dy, wy, dwy) in [(y0, 1.0 - fy, -dpy), (y0 + 1, fy, dpy)] {
                for (dx, wx, dwx) in [(x0, 1.0 - fx, -dpx), (x0 + 1, fx, dpx)] {
                    let v = w * (dwx * wy + wx * dwy);
                    if v != 0.0 {
                        *out.entry((dy, dx)).or_insert(0.0) += v;
                    }
                }
            }
        }
    }
    (d_len, d_angle)
}

fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

fn dims(frame: &Tensor) -> Result<(usize, usize)> {
    match frame.shape() {
        &[h, w, 3] => Ok((h, w)),
        s => Err(CoreError::Invalid(format!("expected an H×W×3 frame, got shape {s:?}"))),
    }
}

fn convolve(frame: &Tensor, taps: &Taps) -> Tensor {
    let (h, w) = dims(frame).expect("checked by caller");
    let src = frame.data();
    let mut out = vec![0.0; src.len()];
    for (&(dy, dx), &k) in taps {
        for y in 0..h {
            let sy = clamp_index(y as i64 + dy, h);
            for x in 0..w {
                let sx = clamp_index(x as i64 + dx, w);
                let (o, i) = ((y * w + x) * 3, (sy * w + sx) * 3);
                for ch in 0..3 {
                    out[o + ch] += k * src[i + ch];
                }
            }
        }
    }
    Tensor::new(frame.shape().to_vec(), out).expect("same shape")
}

/// `Σ g(y,x)·frame(y+dy, x+dx)` with edge clamping.
fn shifted_dot(frame: &Tensor, g: &Tensor, dy: i64, dx: i64) -> f64 {
    let (h, w) = dims(frame).expect("checked by caller");
    let (src, gd) = (frame.data(), g.data());
    let mut acc = 0.0;
    for y in 0..h {
        let sy = clamp_index(y as i64 + dy, h);
        for x in 0..w {
            let sx = clamp_index(x as i64 + dx, w);
            let (o, i) = ((y * w + x) * 3, (sy * w + sx) * 3);
            for ch in 0..3 {
                acc += gd[o + ch] * src[i + ch];
            }
        }
    }
    acc
}

/// Value-level motion blur.
pub fn motion_blur(frame: &Tensor, blur_len: f64, angle: f64) -> Result<Tensor> {
    dims(frame)?;
    Ok(convolve(frame, &kernel(blur_len, angle)))
}

struct MotionBlur {
    taps: Taps,
    blur_len: f64,
    angle: f64,
}

impl CustomOp for MotionBlur {
    fn name(&self) -> &str {
        "motion_blur"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let frame = inputs[0];
        let (h, w) = dims(frame).expect("checked in forward");
        let g = grad.data();
        let mut g_frame = vec![0.0; g.len()];
        for (&(dy, dx), &k) in &self.taps {
            for y in 0..h {
                let sy = clamp_index(y as i64 + dy, h);
                for x in 0..w {
                    let sx = clamp_index(x as i64 + dx, w);
                    let (o, i) = ((y * w + x) * 3, (sy * w + sx) * 3);
                    for ch in 0..3 {
                        g_frame[i + ch] += k * g[o + ch];
                    }
                }
            }
        }
        let (d_len, d_angle) = kernel_derivatives(self.blur_len, self.angle);
        let mut cache: BTreeMap<(i64, i64), f64> = BTreeMap::new();
        let mut contract = |taps: &Taps| {
            taps.iter()
                .map(|(&(dy, dx), &k)| k * *cache.entry((dy, dx)).or_insert_with(|| shifted_dot(frame, grad, dy, dx)))
                .sum::<f64>()
        };
        let g_len = contract(&d_len);
        let g_angle = contract(&d_angle);
        vec![
            Some(Tensor::new(frame.shape().to_vec(), g_frame).expect("same shape")),
            Some(Tensor::from_vec(vec![g_len, g_angle])),
        ]
    }
}

/// Graph-level motion blur of `frame` (`H×W×3`) with `params = [blur_len, angle]`.
///
/// Derivatives are taken one-sided, in the direction of increasing
/// parameters, where a sample lies exactly on a pixel boundary.
pub fn channel_aai<'t>(frame: Var<'t>, params: Var<'t>) -> Result<Var<'t>> {
    let p = params.value();
    if p.numel() != 2 {
        return Err(CoreError::Invalid(format!("AAI takes [blur_len, angle], got shape {:?}", p.shape())));
    }
    let (blur_len, angle) = (p.data()[0], p.data()[1]);
    let value = frame.value();
    dims(&value)?;
    let taps = kernel(blur_len, angle);
    let out = convolve(&value, &taps);
    Ok(frame.tape().custom(Box::new(MotionBlur { taps, blur_len, angle }), &[frame, params], out))
}

/// Graph-level row-banded offsets: `clip(frame + offsets, 0, 1)` with
/// `offsets` of shape `H×1×3`.
pub fn channel_eai<'t>(frame: Var<'t>, offsets: Var<'t>) -> Result<Var<'t>> {
    Ok(frame.add(offsets)?.clamp(0.0, 1.0))
}

/// Value-level EAI.
pub fn row_offsets(frame: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(frame)?;
    if offsets.shape() != [h, 1, 3] {
        return Err(CoreError::Invalid(format!(
            "EAI offsets must be {h}×1×3, got {:?}",
            offsets.shape()
        )));
    }
    let mut out = frame.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let (y, ch) = (k / (w * 3), k % 3);
        *v = (*v + offsets.data()[y * 3 + ch]).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Projects AAI parameters to `blur_len ∈ [0, blur_max]`, `angle ∈ [0, π)`.
pub fn project_aai(params: &mut [f64], blur_max: f64) {
    params[0] = params[0].clamp(0.0, blur_max);
    params[1] = params[1].rem_euclid(std::f64::consts::PI);
    if params[1] >= std::f64::consts::PI {
        params[1] = 0.0;
    }
}
