//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VIMD"  u32 version  u64 meta_len  meta_len bytes of UTF-8 JSON
//! then per tensor: u32 name_len, name, u32 rank, rank × u64 dims, f32 payload
//! ```
//!
//! The JSON block holds the model configuration and, for training
//! checkpoints, the loop state. Optimizer moments are stored as ordinary
//! tensors named `opt.m.<param>` / `opt.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::network::{VimConfig, VimNet};
use crate::params::ParamSet;
use crate::sr::{SrConfig, SrGenerator};
use crate::tensor::Tensor;
use crate::train::optim::OptimizerState;

pub const MAGIC: &[u8; 4] = b"VIMD";
pub const FORMAT_VERSION: u32 = 1;

/// A decoded file: metadata plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub meta: Vec<u8>,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(meta: &[u8], tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 12 + n.len() + 8 * t.rank() + 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(16 + meta.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta);
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::CheckpointTruncated(format!(
                "needed {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?)
            .map_err(|_| Error::CheckpointMalformed(format!("{what} does not fit in memory")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CheckpointMalformed("missing VIMD magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = r.len("metadata length")?;
    let meta = r.take(meta_len, "metadata")?.to_vec();
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::CheckpointMalformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.len("tensor dims")?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::CheckpointMalformed(format!("tensor `{name}` is too large")))?;
        let raw = r.take(4 * numel, &format!("payload of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&dims, data)
            .map_err(|e| Error::CheckpointMalformed(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    Ok(RawCheckpoint { meta, tensors })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Position in the training loop, enough to resume it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    /// Next epoch to run.
    pub epoch: usize,
    pub best_val_acc: f32,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: VimConfig,
    pub sr: Option<SrConfig>,
    pub classes: Vec<String>,
    pub loop_state: Option<LoopState>,
    pub opt_step: Option<u64>,
    pub sr_opt_step: Option<u64>,
    /// Free-form training configuration snapshot.
    pub run: serde_json::Value,
}

/// Everything a checkpoint can carry.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub net: VimNet,
    pub sr: Option<SrGenerator>,
    pub optimizer: Option<OptimizerState>,
    pub sr_optimizer: Option<OptimizerState>,
}

fn moments<'a>(
    params: &'a ParamSet,
    state: &'a OptimizerState,
) -> Vec<(&'a str, &'a Tensor, &'a [f32], &'a [f32])> {
    params
        .iter()
        .zip(state.m.iter().zip(&state.v))
        .filter_map(|((name, t), (m, v))| match (m, v) {
            (Some(m), Some(v)) => Some((name, t, m.as_slice(), v.as_slice())),
            _ => None,
        })
        .collect()
}

impl Checkpoint {
    /// A model-only checkpoint.
    pub fn model(net: &VimNet, sr: Option<&SrGenerator>, classes: &[String]) -> Self {
        Self {
            meta: CheckpointMeta {
                model: net.config.clone(),
                sr: sr.map(|s| s.config.clone()),
                classes: classes.to_vec(),
                loop_state: None,
                opt_step: None,
                sr_opt_step: None,
                run: serde_json::Value::Null,
            },
            net: net.clone(),
            sr: sr.cloned(),
            optimizer: None,
            sr_optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.model = self.net.config.clone();
        meta.sr = self.sr.as_ref().map(|s| s.config.clone());
        meta.opt_step = self.optimizer.as_ref().map(|o| o.step);
        meta.sr_opt_step = self.sr_optimizer.as_ref().map(|o| o.step);
        let json = serde_json::to_vec(&meta)
            .map_err(|e| Error::CheckpointMalformed(format!("metadata: {e}")))?;

        let mut owned: Vec<(String, Tensor)> = Vec::new();
        let mut add_moments = |prefix: &str, params: &ParamSet, st: &OptimizerState| -> Result<()> {
            for (name, t, m, v) in moments(params, st) {
                owned.push((format!("{prefix}m.{name}"), Tensor::new(t.dims(), m.to_vec())?));
                owned.push((format!("{prefix}v.{name}"), Tensor::new(t.dims(), v.to_vec())?));
            }
            Ok(())
        };
        if let Some(st) = &self.optimizer {
            add_moments("opt.", &self.net.params, st)?;
        }
        if let (Some(st), Some(sr)) = (&self.sr_optimizer, &self.sr) {
            add_moments("sropt.", &sr.params, st)?;
        }

        let mut records: Vec<(&str, &Tensor)> = self.net.params.iter().collect();
        if let Some(sr) = &self.sr {
            records.extend(sr.params.iter());
        }
        records.extend(owned.iter().map(|(n, t)| (n.as_str(), t)));
        Ok(encode(&json, &records))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_slice(&raw.meta)
            .map_err(|e| Error::CheckpointMalformed(format!("metadata: {e}")))?;
        let (opt_step, sr_opt_step) = (meta.opt_step, meta.sr_opt_step);

        // parameters are overwritten below, so the init seed is irrelevant
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = VimNet::new(meta.model.clone(), &mut rng)?;
        let mut sr = match &meta.sr {
            Some(cfg) => Some(SrGenerator::new(cfg.clone(), &mut rng)?),
            None => None,
        };
        let mut optimizer = opt_step.map(|step| OptimizerState {
            step,
            ..OptimizerState::new(&net.params)
        });
        let mut sr_optimizer = match (sr_opt_step, &sr) {
            (Some(step), Some(g)) => Some(OptimizerState {
                step,
                ..OptimizerState::new(&g.params)
            }),
            _ => None,
        };

        let mut seen_net = vec![false; net.params.len()];
        let mut seen_sr = vec![false; sr.as_ref().map_or(0, |s| s.params.len())];
        for (name, t) in raw.tensors {
            if let Some(i) = net.params.position(&name) {
                net.params.assign(&name, t)?;
                seen_net[i] = true;
                continue;
            }
            if let Some(g) = sr.as_mut() {
                if let Some(i) = g.params.position(&name) {
                    g.params.assign(&name, t)?;
                    seen_sr[i] = true;
                    continue;
                }
            }
            if let Some(rest) = name.strip_prefix("opt.") {
                if let Some(st) = optimizer.as_mut() {
                    if put_moment(st, &net.params, rest, t.clone())? {
                        continue;
                    }
                }
            }
            if let Some(rest) = name.strip_prefix("sropt.") {
                if let (Some(st), Some(g)) = (sr_optimizer.as_mut(), sr.as_ref()) {
                    if put_moment(st, &g.params, rest, t.clone())? {
                        continue;
                    }
                }
            }
            return Err(Error::UnknownTensor(name));
        }
        let missing = net
            .params
            .names()
            .iter()
            .zip(&seen_net)
            .chain(sr.iter().flat_map(|g| g.params.names().iter().zip(&seen_sr)))
            .find(|(_, seen)| !**seen)
            .map(|(n, _)| n.clone());
        if let Some(name) = missing {
            return Err(Error::CheckpointMalformed(format!("tensor `{name}` is missing")));
        }
        if let Some(g) = sr.as_mut() {
            // a stored generator is frozen until a caller asks to fine-tune it
            g.set_frozen(true);
        }
        Ok(Self {
            meta,
            net,
            sr,
            optimizer,
            sr_optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored network has the `expected` shape.
    pub fn load_matching(path: &Path, expected: &VimConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if let Some(diff) = ck.net.config.mismatch(expected) {
            return Err(contract_err!(
                "checkpoint {} does not match the requested model ({diff})",
                path.display()
            ));
        }
        Ok(ck)
    }
}

/// Places `m.<param>` / `v.<param>` into `st`; false when `rest` names no
/// parameter.
fn put_moment(st: &mut OptimizerState, params: &ParamSet, rest: &str, t: Tensor) -> Result<bool> {
    let (slot, pname) = match rest.split_once('.') {
        Some(("m", p)) => (0, p),
        Some(("v", p)) => (1, p),
        _ => return Ok(false),
    };
    let Some(i) = params.position(pname) else {
        return Ok(false);
    };
    if params.tensors()[i].dims() != t.dims() {
        return Err(Error::CheckpointMalformed(format!(
            "moment for `{pname}` has dims {:?}",
            t.dims()
        )));
    }
    let data = t.into_data();
    if slot == 0 {
        st.m[i] = Some(data);
    } else {
        st.v[i] = Some(data);
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let a = Tensor::new(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, 7.0]).unwrap();
        let s = Tensor::scalar(4.25);
        let bytes = encode(b"{}", &[("a", &a), ("s", &s)]);
        let raw = decode(&bytes).unwrap();
        assert_eq!(raw.meta, b"{}");
        assert!(raw.tensors[0].1.bit_eq(&a));
        assert!(raw.tensors[1].1.bit_eq(&s));
        assert_eq!(raw.tensors[1].1.rank(), 0);
    }

    #[test]
    fn bad_headers() {
        let bytes = encode(b"{}", &[("a", &Tensor::ones(&[4]))]);
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(
            decode(&wrong),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(Error::CheckpointTruncated(_))
        ));
        assert!(matches!(decode(b"NOPE"), Err(Error::CheckpointMalformed(_))));
    }
}
