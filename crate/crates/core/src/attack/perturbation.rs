//! Attack results and their binary file format.
//!
//! Layout, little-endian: magic `RMOTPERT`, version `u32`, kind tag `u8`
//! (0 none, 1 pixel, 2 aai, 3 eai), `t_attack u32`, `delta_attack u32`,
//! tensor count `u32`, then per tensor `ndim u32`, `ndim` dims `u32`, and
//! the `f64` payload.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rmot_autograd::Tensor;
use serde::{Deserialize, Serialize};

use super::channels::{motion_blur, row_offsets};
use crate::error::{CoreError, Result};
use crate::scenegen::Frame;

const MAGIC: &[u8; 8] = b"RMOTPERT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Pixel,
    Aai,
    Eai,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::None, AttackKind::Pixel, AttackKind::Aai, AttackKind::Eai];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Pixel => "pixel",
            AttackKind::Aai => "aai",
            AttackKind::Eai => "eai",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CoreError::AttackConfig(format!("unknown attack kind {s:?}")))
    }
}

/// Per-frame parameters over the window `[t_attack, t_attack + delta_attack)`:
/// pixel deltas `H×W×3`, AAI `[blur_len, angle]`, or EAI offsets `H×1×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub kind: AttackKind,
    pub t_attack: usize,
    pub delta_attack: usize,
    pub params: Vec<Tensor>,
}

impl Perturbation {
    pub fn none() -> Self {
        Perturbation { kind: AttackKind::None, t_attack: 0, delta_attack: 0, params: Vec::new() }
    }

    /// The parameters that leave every frame unchanged.
    pub fn identity(kind: AttackKind, t_attack: usize, delta_attack: usize, height: usize, width: usize) -> Self {
        let one = match kind {
            AttackKind::None => return Perturbation::none(),
            AttackKind::Pixel => Tensor::zeros(&[height, width, 3]),
            AttackKind::Aai => Tensor::zeros(&[2]),
            AttackKind::Eai => Tensor::zeros(&[height, 1, 3]),
        };
        Perturbation { kind, t_attack, delta_attack, params: vec![one; delta_attack] }
    }

    pub fn window(&self) -> std::ops::Range<usize> {
        self.t_attack..self.t_attack + self.delta_attack
    }

    /// Applies the perturbation to one clean frame of the window.
    pub fn apply_frame(&self, k: usize, frame: &Frame) -> Result<Frame> {
        let x = frame.to_tensor();
        let p = &self.params[k];
        let out = match self.kind {
            AttackKind::None => x,
            AttackKind::Pixel => {
                let mut y = x;
                for (v, d) in y.data_mut().iter_mut().zip(p.data()) {
                    *v = (*v + d).clamp(0.0, 1.0);
                }
                y
            }
            AttackKind::Aai => motion_blur(&x, p.data()[0], p.data()[1])?.map(|v| v.clamp(0.0, 1.0)),
            AttackKind::Eai => row_offsets(&x, p)?,
        };
        Frame::from_tensor(&out)
    }

    /// The full frame sequence with the window replaced by perturbed frames.
    pub fn apply(&self, frames: &[Frame]) -> Result<Vec<Frame>> {
        if self.window().end > frames.len() {
            return Err(CoreError::AttackConfig(format!(
                "window {:?} exceeds {} frames",
                self.window(),
                frames.len()
            )));
        }
        let mut out = frames.to_vec();
        if self.kind != AttackKind::None {
            for (k, t) in self.window().enumerate() {
                out[t] = self.apply_frame(k, &frames[t])?;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.kind.tag());
        for v in [self.t_attack, self.delta_attack, self.params.len()] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for t in &self.params {
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(path, b)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let fail = |reason: &str| CoreError::Format {
            kind: "perturbation",
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8).ok_or_else(|| fail("truncated header"))? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = r.u32().ok_or_else(|| fail("truncated header"))?;
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let tag = r.take(1).ok_or_else(|| fail("truncated header"))?[0];
        let kind = *AttackKind::ALL.get(tag as usize).ok_or_else(|| fail(&format!("unknown kind tag {tag}")))?;
        let mut next = || r.u32().map(|v| v as usize).ok_or_else(|| fail("truncated header"));
        let (t_attack, delta_attack, count) = (next()?, next()?, next()?);
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = r.u32().ok_or_else(|| fail("truncated tensor header"))? as usize;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| fail("truncated tensor header"))?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| r.take(8).map(|s| f64::from_le_bytes(s.try_into().expect("8 bytes"))))
                .collect::<Option<_>>()
                .ok_or_else(|| fail("truncated payload"))?;
            params.push(Tensor::new(shape, data).map_err(|e| fail(&e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        if params.len() != delta_attack && kind != AttackKind::None {
            return Err(fail("parameter count does not match the window"));
        }
        Ok(Perturbation { kind, t_attack, delta_attack, params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
    }
}
