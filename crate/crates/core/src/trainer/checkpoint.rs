use std::path::Path;

use super::TrainConfig;
use crate::binio::Cursor;
use crate::datagen::TransformKind;
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, Model, OperatorSet};
use crate::ndmath::DenseMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"LATOP-CK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained state. Tensors are stored as `f32`; [`Checkpoint::rounded`]
/// gives the in-memory value that a save/load round trip reproduces.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub ops: OperatorSet,
    pub epoch: usize,
    pub final_loss: LossBreakdown,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: Model, ops: OperatorSet, epoch: usize, final_loss: LossBreakdown) -> Self {
        Checkpoint {
            config,
            model,
            ops,
            epoch,
            final_loss,
        }
    }

    /// Every stored tensor, network first, then learned operators.
    pub fn tensor_names(&self) -> Vec<&'static str> {
        let mut names = self.model.param_names();
        names.extend(self.ops.learned_names());
        names
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut t = self.model.params_mut();
        t.extend(self.ops.learned_mut());
        t
    }

    /// Rounds every tensor to the stored `f32` precision.
    pub fn rounded(mut self) -> Self {
        for t in self.tensors_mut() {
            *t = t.map(|x| x as f32 as f64);
        }
        self
    }

    /// Refuses use under a different transform than the one trained for.
    pub fn require_transform(&self, kind: TransformKind) -> Result<()> {
        if self.config.transform != kind {
            return Err(Error::config(format!(
                "checkpoint was trained for {}, data is prepared for {kind}",
                self.config.transform
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        for v in [self.final_loss.ce, self.final_loss.reg, self.final_loss.op, self.final_loss.total] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let names = self.tensor_names();
        let mut this = self.clone();
        let tensors = this.tensors_mut();
        out.extend_from_slice(&(names.len() as u32).to_le_bytes());
        for (name, t) in names.iter().zip(tensors) {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            out.extend_from_slice(&(t.as_slice().len() as u32).to_le_bytes());
            for &x in t.as_slice() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(9, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", 0, "not a LATOP-CK1 checkpoint"));
        }
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("version", 9, format!("unsupported version {version}")));
        }
        let len = cur.u32("config_length")? as usize;
        let cpos = cur.pos as u64;
        let text = std::str::from_utf8(cur.take(len, "config")?)
            .map_err(|_| Error::format("config", cpos, "config text is not UTF-8"))?;
        let config = TrainConfig::from_text(text)
            .and_then(|c| c.validate().map(|_| c))
            .map_err(|e| Error::format("config", cpos, e.to_string()))?;
        let epoch = cur.u32("epoch")? as usize;
        let final_loss = LossBreakdown {
            ce: cur.f64("final_loss")?,
            reg: cur.f64("final_loss")?,
            op: cur.f64("final_loss")?,
            total: cur.f64("final_loss")?,
        };

        let model = Model::zeros(config.model_config());
        let ops = OperatorSet::build(config.operator, config.transform, config.latent, config.seed)
            .map_err(|e| Error::format("config", cpos, e.to_string()))?;
        let mut ck = Checkpoint::new(config, model, ops, epoch, final_loss);
        let names = ck.tensor_names();
        let npos = cur.pos as u64;
        let count = cur.u32("tensor_count")? as usize;
        if count != names.len() {
            return Err(Error::format(
                "tensor_count",
                npos,
                format!("expected {} tensors, found {count}", names.len()),
            ));
        }
        for (name, t) in names.into_iter().zip(ck.tensors_mut()) {
            let pos = cur.pos as u64;
            let nlen = cur.u8("tensor_name")? as usize;
            let found = cur.take(nlen, "tensor_name")?;
            if found != name.as_bytes() {
                return Err(Error::format(
                    "tensor_name",
                    pos,
                    format!("expected `{name}`, found `{}`", String::from_utf8_lossy(found)),
                ));
            }
            let spos = cur.pos as u64;
            let rows = cur.u32("tensor_rows")? as usize;
            let cols = cur.u32("tensor_cols")? as usize;
            let n = cur.u32("tensor_length")? as usize;
            if (rows, cols) != t.shape() || n != rows * cols {
                return Err(Error::format(
                    "tensor_shape",
                    spos,
                    format!("`{name}` is {rows}x{cols} ({n} values), expected {}x{}", t.rows(), t.cols()),
                ));
            }
            for x in t.as_mut_slice() {
                *x = cur.f32(name)? as f64;
            }
        }
        if !cur.at_end() {
            return Err(Error::format("data", cur.pos as u64, "trailing bytes after tensors"));
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
