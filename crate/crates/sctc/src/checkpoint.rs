//! Model checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "SCTC" version count
//! count × (name_len name rank dims[rank] f64 values)
//! config_len config_utf8
//! metric_f64
//! ```
//!
//! The config block holds `key=value` lines: the model keys of the run
//! config, `model.feat_dim`, `vocab` (space-separated symbols) and `epoch`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sctc_core::ctc::Vocabulary;
use sctc_core::model::{Model, ModelConfig};
use sctc_core::optim::{average_params, top_n_indices};
use sctc_core::{ParamStore, Tensor};

use crate::config::{activation_name, parse_activation, parse_pairs};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Validation metric, lower is better.
    pub metric: f64,
    pub epoch: usize,
}

fn config_block(config: &ModelConfig, epoch: usize) -> String {
    let c = config;
    let mut out = String::new();
    let mut put = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
    put("model.mode", c.mode.to_string());
    put("model.layers", c.layers.to_string());
    put("model.dim", c.dim.to_string());
    put("model.heads", c.heads.to_string());
    put("model.ffn_dim", c.ffn_dim.to_string());
    put("model.k", c.k.to_string());
    put("model.lambda", c.lambda.to_string());
    put("model.activation", activation_name(c.activation).to_string());
    put("model.seed", c.seed.to_string());
    put("model.feat_dim", c.feat_dim.to_string());
    put("vocab", c.vocab.tokens().join(" "));
    put("epoch", epoch.to_string());
    out
}

fn parse_config_block(text: &str, path: &Path) -> Result<(ModelConfig, usize)> {
    let pairs = parse_pairs(text, path)?;
    let get = |key: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(path, format!("config block lacks {key}")))
    };
    fn num<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::format(path, format!("bad value {key}={v}")))
    }
    let symbols: Vec<&str> = get("vocab")?.split_whitespace().collect();
    let config = ModelConfig {
        layers: num(path, "model.layers", get("model.layers")?)?,
        dim: num(path, "model.dim", get("model.dim")?)?,
        heads: num(path, "model.heads", get("model.heads")?)?,
        ffn_dim: num(path, "model.ffn_dim", get("model.ffn_dim")?)?,
        feat_dim: num(path, "model.feat_dim", get("model.feat_dim")?)?,
        vocab: Vocabulary::new(&symbols)?,
        k: num(path, "model.k", get("model.k")?)?,
        lambda: num(path, "model.lambda", get("model.lambda")?)?,
        mode: get("model.mode")?.parse()?,
        activation: parse_activation(get("model.activation")?)?,
        seed: num(path, "model.seed", get("model.seed")?)?,
    };
    Ok((config, num(path, "epoch", get("epoch")?)?))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Usage(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, metric: f64, epoch: usize) -> Self {
        let mut params = model.params.clone();
        params.zero_grad();
        Checkpoint {
            config: model.config.clone(),
            params,
            metric,
            epoch,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Ok(Model::from_params(self.config.clone(), self.params.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
        put_u32(&mut out, self.params.len())?;
        for (_, p) in self.params.iter() {
            put_u32(&mut out, p.name.len())?;
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.shape().len())?;
            for &d in p.value.shape() {
                put_u32(&mut out, d)?;
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let block = config_block(&self.config, self.epoch);
        put_u32(&mut out, block.len())?;
        out.extend_from_slice(block.as_bytes());
        out.extend_from_slice(&self.metric.to_le_bytes());
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.saturating_mul(8) <= bytes.len())
                .ok_or_else(|| Error::format(path, format!("implausible shape {shape:?}")))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let value = Tensor::from_vec(&shape, data).map_err(|e| Error::format(path, e.to_string()))?;
            params.add(name, value).map_err(|e| Error::format(path, e.to_string()))?;
        }
        let block = r.string()?;
        let (config, epoch) = parse_config_block(&block, path)?;
        let metric = r.f64()?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config,
            params,
            metric,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

/// Elementwise mean of the `top_n` checkpoints with the lowest metric.
pub fn average_checkpoints(checkpoints: &[Checkpoint], top_n: usize) -> Result<ParamStore> {
    let metrics: Vec<f64> = checkpoints.iter().map(|c| c.metric).collect();
    let chosen = top_n_indices(&metrics, top_n)?;
    let sets: Vec<&ParamStore> = chosen.iter().map(|&i| &checkpoints[i].params).collect();
    Ok(average_params(&sets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sctc_core::encoder::Activation;
    use sctc_core::model::Mode;

    fn model(seed: u64) -> Model {
        Model::new(ModelConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            ffn_dim: 12,
            feat_dim: 3,
            vocab: Vocabulary::new(&["a", "b"]).unwrap(),
            k: 1,
            lambda: 0.25,
            mode: Mode::SelfCond,
            activation: Activation::Gelu,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let cp = Checkpoint::from_model(&model(1), 0.125, 7);
        let bytes = cp.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SCTC");
        let back = Checkpoint::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, cp);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.to_model().unwrap().params, cp.params);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = Checkpoint::from_model(&model(1), 0.5, 0).to_bytes().unwrap();
        let p = Path::new("m");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic, p).is_err());
    }

    #[test]
    fn averaging_picks_best() {
        let a = Checkpoint::from_model(&model(1), 0.3, 0);
        let b = Checkpoint::from_model(&model(2), 0.1, 1);
        let c = Checkpoint::from_model(&model(3), 0.9, 2);
        let avg = average_checkpoints(&[a.clone(), b.clone(), c], 2).unwrap();
        let expected = average_params(&[&b.params, &a.params]).unwrap();
        assert_eq!(avg, expected);
        assert!(average_checkpoints(&[], 1).is_err());
        let same = average_checkpoints(&[a.clone(), a.clone(), a.clone()], 3).unwrap();
        assert_eq!(same, a.params);
    }
}
