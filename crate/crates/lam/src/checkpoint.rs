//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! | bytes            | content                                          |
//! |------------------|--------------------------------------------------|
//! | 8                | magic `LAMCKPT\0`                                |
//! | 4                | format version                                   |
//! | 8 + n            | JSON header: run state and the resolved config   |
//! | per parameter    | name, group, decay flag, shape, `f32` values     |
//! | per parameter    | AdamW first and second moments (if present)      |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use lam_core::nn::{Param, ParamGroup, ParamStore};
use lam_core::optim::{AdamW, OptimizerSpec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"LAMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: Option<f64>,
    pub val_acc: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// `finetune` or `pretrain`.
    pub kind: String,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    /// Root seed; per-epoch streams are derived from it and the epoch, so
    /// this is the whole RNG state.
    pub seed: u64,
    pub best_map: Option<f64>,
    pub history: Vec<HistoryRow>,
    /// Resolved run config (TOML).
    pub config: String,
    pub optimizer_step: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Encoder => 0,
        ParamGroup::Head => 1,
        ParamGroup::Decoder => 2,
    }
}

fn group_from(code: u8) -> Result<ParamGroup> {
    Ok(match code {
        0 => ParamGroup::Encoder,
        1 => ParamGroup::Head,
        2 => ParamGroup::Decoder,
        _ => return Err(Error::runtime(format!("checkpoint: unknown parameter group {code}"))),
    })
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::runtime("checkpoint: truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut header = self.header.clone();
        header.optimizer_step = self.optimizer.as_ref().map(|o| o.step);
        let json = serde_json::to_vec(&header).expect("header serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.params.len() as u32).to_le_bytes());
        for p in &self.params.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(group_code(p.group));
            out.push(u8::from(p.decay));
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut out, &p.value);
        }
        if let Some(opt) = &self.optimizer {
            for (m, v) in opt.m.iter().zip(&opt.v) {
                put_f32s(&mut out, m);
                put_f32s(&mut out, v);
            }
        }
        out
    }

    /// Parses a checkpoint; `spec` restores optimizer hyperparameters.
    pub fn from_bytes(buf: &[u8], spec: OptimizerSpec) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::runtime("checkpoint: bad magic header"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::runtime(format!("checkpoint: unsupported version {version}")));
        }
        let n = c.u64()? as usize;
        let header: Header = serde_json::from_slice(c.take(n)?)
            .map_err(|e| Error::runtime(format!("checkpoint: bad header ({e})")))?;
        let count = c.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = c.u32()? as usize;
            let name = String::from_utf8(c.take(len)?.to_vec())
                .map_err(|_| Error::runtime("checkpoint: parameter name is not UTF-8"))?;
            let group = group_from(c.u8()?)?;
            let decay = c.u8()? != 0;
            let rank = c.u32()? as usize;
            let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let value = c.f32s(shape.iter().product())?;
            params.params.push(Param {
                name,
                shape,
                value,
                decay,
                group,
            });
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let mut opt = AdamW::new(spec, &params);
                opt.step = step;
                for (i, p) in params.params.iter().enumerate() {
                    opt.m[i] = c.f32s(p.value.len())?;
                    opt.v[i] = c.f32s(p.value.len())?;
                }
                Some(opt)
            }
            None => None,
        };
        if c.pos != buf.len() {
            return Err(Error::runtime("checkpoint: trailing bytes"));
        }
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        // write-then-rename so an interrupted save leaves the old file intact
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(&self.to_bytes()).at(&tmp)?;
        f.sync_all().at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path, spec: OptimizerSpec) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path).at(path)?.read_to_end(&mut buf).at(path)?;
        Self::from_bytes(&buf, spec).map_err(|e| Error::runtime(format!("{}: {e}", path.display())))
    }
}

/// Copies parameters of the given groups by name, checking shapes.
pub fn copy_params(dst: &mut ParamStore<f32>, src: &ParamStore<f32>, groups: &[ParamGroup]) -> Result<usize> {
    let mut copied = 0;
    for p in dst.params.iter_mut().filter(|p| groups.contains(&p.group)) {
        let s = src
            .params
            .iter()
            .find(|s| s.name == p.name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter `{}`", p.name)))?;
        if s.shape != p.shape {
            return Err(Error::invalid(format!(
                "parameter `{}` has shape {:?} in checkpoint, model expects {:?}",
                p.name, s.shape, p.shape
            )));
        }
        p.value.clone_from(&s.value);
        copied += 1;
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ps = ParamStore::new();
        ps.add("w".into(), vec![2, 3], (0..6).map(|i| i as f32 * 0.5).collect(), true, ParamGroup::Encoder);
        ps.add("b".into(), vec![3], vec![-1.0, 0.25, f32::MIN_POSITIVE], false, ParamGroup::Head);
        let mut opt = AdamW::new(OptimizerSpec::default(), &ps);
        opt.step = 7;
        opt.m[0][4] = 0.125;
        opt.v[1][2] = 3.5;
        Checkpoint {
            header: Header {
                kind: "finetune".into(),
                epoch: 2,
                global_step: 7,
                seed: 42,
                best_map: Some(0.75),
                history: vec![HistoryRow {
                    epoch: 1,
                    train_loss: 0.3,
                    val_map: None,
                    val_acc: Some(0.9),
                    lr: 1e-4,
                }],
                config: "seed = 42\n".into(),
                optimizer_step: None,
            },
            params: ps,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes(), OptimizerSpec::default()).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.header.history, ck.header.history);
        assert_eq!(back.header.optimizer_step, Some(7));
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], OptimizerSpec::default()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, OptimizerSpec::default()).is_err());
        let mut newer = bytes;
        newer[8] = 99;
        let err = Checkpoint::from_bytes(&newer, OptimizerSpec::default()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn copy_checks_names_and_shapes() {
        let src = sample().params;
        let mut dst = src.clone();
        dst.params[0].value.fill(0.0);
        assert_eq!(copy_params(&mut dst, &src, &[ParamGroup::Encoder]).unwrap(), 1);
        assert_eq!(dst, src);
        dst.params[0].shape = vec![3, 2];
        assert!(copy_params(&mut dst, &src, &[ParamGroup::Encoder]).is_err());
    }
}
