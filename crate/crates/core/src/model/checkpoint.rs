use std::path::Path;
use std::sync::Arc;

use super::{Model, ModelConfig};
use crate::corpus::ItemCatalog;
use crate::embedstore::EmbeddingMatrix;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMFC";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'b> {
    bytes: &'b [u8],
    at: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated while reading {what}"))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} too large")))
    }
}

impl Model {
    /// Serializes the config and every learnable tensor. Frozen matrices are
    /// not included.
    ///
    /// Layout (little-endian): magic, `u32` version, `u64` config length,
    /// config JSON, `u32` tensor count, then per tensor `u32` name length,
    /// name, `u32` rank, `u64` dims, `f32` values.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(p.rows as u64).to_le_bytes());
            out.extend_from_slice(&(p.cols as u64).to_le_bytes());
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Rebuilds a model, checking every tensor's name and shape against
    /// what `catalog` and the frozen matrices require.
    pub fn from_checkpoint_bytes(
        bytes: &[u8],
        catalog: &ItemCatalog,
        e_img: Arc<EmbeddingMatrix>,
        e_tex: Arc<EmbeddingMatrix>,
    ) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.len("config length")?;
        let config: ModelConfig = serde_json::from_slice(r.take(n, "config")?)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut model = Model::shell(config, catalog, e_img, e_tex)?;
        let count = r.u32("tensor count")? as usize;
        if count != model.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {count} tensors, model needs {}",
                model.params.len()
            )));
        }
        for p in &mut model.params {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if name != p.name {
                return Err(Error::Shape(format!("expected tensor {}, found {name}", p.name)));
            }
            let rank = r.u32("tensor rank")?;
            if rank != 2 {
                return Err(Error::Shape(format!("tensor {name}: rank {rank}, expected 2")));
            }
            let (rows, cols) = (r.len("tensor dims")?, r.len("tensor dims")?);
            if (rows, cols) != (p.rows, p.cols) {
                return Err(Error::Shape(format!(
                    "tensor {name}: shape {rows}x{cols}, expected {}x{}",
                    p.rows, p.cols
                )));
            }
            let raw = r.take(rows * cols * 4, name)?;
            for (v, chunk) in p.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            if let Some(bad) = p.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Format(format!("tensor {name}: non-finite value at {bad}")));
            }
        }
        if model.params[0].data[..model.params[0].cols].iter().any(|&v| v != 0.0) {
            return Err(Error::Format("tensor e_id: pad row is not zero".into()));
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.at)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(
        path: &Path,
        catalog: &ItemCatalog,
        e_img: Arc<EmbeddingMatrix>,
        e_tex: Arc<EmbeddingMatrix>,
    ) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, catalog, e_img, e_tex)
    }
}
