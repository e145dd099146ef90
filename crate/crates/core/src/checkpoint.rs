//! Bit-exact binary checkpoints.
//!
//! Layout: magic `FRAG`, u32 LE format version, length-prefixed (u64 LE)
//! UTF-8 config blob of `key=value` lines, u64 LE tensor count, then one
//! record per stored tensor: u64 LE name length, name bytes, u32 LE rank,
//! rank x u64 LE extents, raw IEEE-754 f32 little-endian payload. Tensors
//! appear in the model's canonical order, so identical parameters produce
//! identical files.
//!
//! The stored (seed, epoch) pair is the full generator state: every random
//! stream in training re-derives from them, which is what makes
//! load-then-continue (the fine-tune/transfer path) reproducible.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fen::FenConfig;
use crate::fusion::{FusionConfig, FusionKind};
use crate::model::{PairModel, StoredMut};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FRAG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A parsed checkpoint: configs, counters, and the named tensor payloads.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub fen_cfg: FenConfig,
    pub fusion_cfg: FusionConfig,
    pub epoch: usize,
    pub seed: u64,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn join_usizes(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn config_blob(cp_fen: &FenConfig, cp_fusion: &FusionConfig, epoch: usize, seed: u64) -> String {
    format!(
        "fen.input_side={}\nfen.input_channels={}\nfen.block_channels={}\nfen.feature_dim={}\n\
         fusion.kind={}\nfusion.feature_dim={}\nfusion.hidden_dims={}\nfusion.num_classes={}\n\
         epoch={epoch}\nseed={seed}\n",
        cp_fen.input_side,
        cp_fen.input_channels,
        join_usizes(&cp_fen.block_channels),
        cp_fen.feature_dim,
        cp_fusion.kind.as_str(),
        cp_fusion.feature_dim,
        join_usizes(&cp_fusion.hidden_dims),
        cp_fusion.num_classes,
    )
}

fn bad(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

fn parse_config_blob(text: &str) -> Result<(FenConfig, FusionConfig, usize, u64)> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("config line without `=`: {line}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        map.get(k)
            .cloned()
            .ok_or_else(|| bad(format!("config key `{k}` missing")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| bad(format!("config key `{k}` is not a number")))
    };
    let list = |k: &str| -> Result<Vec<usize>> {
        get(k)?
            .split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| bad(format!("config key `{k}` has a bad list entry")))
            })
            .collect()
    };
    let fen = FenConfig::new(
        num("fen.input_side")?,
        num("fen.input_channels")?,
        list("fen.block_channels")?,
        num("fen.feature_dim")?,
    )?;
    let kind = FusionKind::parse(&get("fusion.kind")?)
        .map_err(|e| bad(format!("bad fusion kind: {e}")))?;
    let fusion = FusionConfig::new(
        kind,
        num("fusion.feature_dim")?,
        list("fusion.hidden_dims")?,
        num("fusion.num_classes")?,
    )?;
    let epoch = num("epoch")?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| bad("config key `seed` is not a number"))?;
    Ok((fen, fusion, epoch, seed))
}

/// Serializes the model's stored tensors plus counters.
pub fn save_checkpoint(
    path: &Path,
    model: &mut PairModel,
    epoch: usize,
    seed: u64,
) -> Result<()> {
    let blob = config_blob(model.fen_config(), model.fusion_config(), epoch, seed);
    let tensors = model.stored_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob.as_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, shape, data) in &tensors {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "refusing to save non-finite value in `{name}` at index {pos}"
            )));
        }
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(bad(format!(
                "truncated while reading {what} at byte {} (need {n}, have {})",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64_le(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic (not a checkpoint file)"));
    }
    let version = r.u32_le("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blob_len = r.u64_le("config length")? as usize;
    let blob = std::str::from_utf8(r.take(blob_len, "config blob")?)
        .map_err(|_| bad("config blob is not UTF-8"))?;
    let (fen_cfg, fusion_cfg, epoch, seed) = parse_config_blob(blob)?;
    let count = r.u64_le("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u64_le("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32_le("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64_le("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(4 * numel, &format!("payload of `{name}`"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite value in `{name}` at index {pos}")));
        }
        tensors.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!(
            "{} trailing bytes after the last tensor record",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        fen_cfg,
        fusion_cfg,
        epoch,
        seed,
        tensors,
    })
}

impl Checkpoint {
    fn fill(&self, model: &mut PairModel, fen_only: bool) -> Result<()> {
        let mut by_name: std::collections::BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> = self
            .tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        let mut err = None;
        model.for_each_stored_mut(|name, stored| {
            if err.is_some() {
                return;
            }
            if fen_only && !name.starts_with("fen.") {
                return;
            }
            let Some((shape, data)) = by_name.remove(name) else {
                err = Some(bad(format!("tensor `{name}` missing from checkpoint")));
                return;
            };
            match stored {
                StoredMut::Tensor(t) => {
                    if t.shape() != &shape[..] {
                        err = Some(Error::CheckpointShape {
                            name: name.to_string(),
                            found: shape.clone(),
                            expected: t.shape().to_vec(),
                        });
                        return;
                    }
                    t.data_mut().copy_from_slice(data);
                }
                StoredMut::Raw(v) => {
                    if shape.len() != 1 || shape[0] != v.len() {
                        err = Some(Error::CheckpointShape {
                            name: name.to_string(),
                            found: shape.clone(),
                            expected: vec![v.len()],
                        });
                        return;
                    }
                    v.copy_from_slice(data);
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !fen_only {
            if let Some((name, _)) = by_name.pop_first() {
                return Err(bad(format!("unexpected tensor `{name}` in checkpoint")));
            }
        }
        Ok(())
    }

    /// Reconstructs the model exactly as saved.
    pub fn build_model(&self) -> Result<PairModel> {
        let mut model =
            PairModel::init(self.fen_cfg.clone(), self.fusion_cfg.clone(), self.seed)?;
        self.fill(&mut model, false)?;
        Ok(model)
    }

    /// Fine-tune entry: rebuilds with a possibly different fusion config.
    /// When it differs, the extractor weights are loaded and the head is
    /// freshly initialized; the boolean reports that reinitialization.
    pub fn build_model_with_fusion(
        &self,
        fusion_cfg: FusionConfig,
    ) -> Result<(PairModel, bool)> {
        if fusion_cfg == self.fusion_cfg {
            return Ok((self.build_model()?, false));
        }
        let head_seed = crate::rng::derive_seed(self.seed, 0x726569_6e6974, self.epoch as u64); // "reinit"
        let mut model = PairModel::init(self.fen_cfg.clone(), fusion_cfg, head_seed)?;
        self.fill(&mut model, true)?;
        Ok((model, true))
    }
}
