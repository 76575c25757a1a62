//! Binary checkpoint layout (all integers `u32` little-endian):
//!
//! ```text
//! magic "RMOTCKPT" | version | d_model n_queries n_layers ffn_dim patch
//! height width mem_len vocab_size | tensor count
//! per tensor: ndim, dims...
//! all tensor data as f64 little-endian, in tensor order
//! ```

use std::fs;
use std::path::Path;

use rmot_autograd::Tensor;

use super::{Layout, ModelConfig, RmotModel};
use crate::error::{CoreError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RMOTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &RmotModel, path: &Path) -> Result<()> {
    let c = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let header = [
        CHECKPOINT_VERSION,
        c.d_model as u32,
        c.n_queries as u32,
        c.n_layers as u32,
        c.ffn_dim as u32,
        c.patch as u32,
        c.height as u32,
        c.width as u32,
        c.mem_len as u32,
        c.vocab_size as u32,
        model.params().len() as u32,
    ];
    for v in header {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for t in model.params() {
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for t in model.params() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<RmotModel> {
    let bytes = fs::read(path)?;
    let malformed = |reason: String| CoreError::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8).map_err(malformed)? != CHECKPOINT_MAGIC {
        return Err(malformed("bad magic".into()));
    }
    let version = r.u32().map_err(malformed)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let mut h = [0usize; 9];
    for v in &mut h {
        *v = r.u32().map_err(malformed)?;
    }
    let config = ModelConfig {
        d_model: h[0],
        n_queries: h[1],
        n_layers: h[2],
        ffn_dim: h[3],
        patch: h[4],
        height: h[5],
        width: h[6],
        mem_len: h[7],
        vocab_size: h[8],
    };
    config.validate()?;
    let layout = Layout::new(&config);
    let count = r.u32().map_err(malformed)?;
    if count != layout.specs.len() {
        return Err(malformed(format!(
            "expected {} tensors, found {count}",
            layout.specs.len()
        )));
    }
    let mut shapes = Vec::with_capacity(count);
    for spec in &layout.specs {
        let ndim = r.u32().map_err(malformed)?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>();
        let shape = shape.map_err(malformed)?;
        if shape != spec.shape {
            return Err(malformed(format!(
                "tensor {} has shape {shape:?}, expected {:?}",
                spec.name, spec.shape
            )));
        }
        shapes.push(shape);
    }
    let mut params = Vec::with_capacity(count);
    for shape in shapes {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>();
        params.push(Tensor::new(shape, data.map_err(malformed)?)?);
    }
    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(RmotModel::assemble(config, layout, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = RmotModel::new(ModelConfig::micro(), 9).unwrap();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = RmotModel::new(ModelConfig::micro(), 9).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CoreError::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CoreError::Format { .. })));
    }
}
