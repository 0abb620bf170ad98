//! `SGC1` checkpoint files.
//!
//! ```text
//! "SGC1" u32 version
//! u64 epoch  f64 val_acc  u64 seed  u64 config_digest  u64 adam_t
//! u32 len + config text (key=value lines)
//! u32 len + normalization text (empty when absent)
//! u32 len + validation clip ids, one per line
//! SGW1 parameters and batch-norm running statistics
//! SGW1 first moments
//! SGW1 second moments
//! ```
//!
//! All integers little-endian. Parameters and moments are stored as `f32`;
//! training keeps them on the `f32` grid so the round trip is exact.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::autodiff::{Fnv, ParamStore, Tensor};
use crate::error::{bail, Error, Result};
use crate::features::GlobalNormStats;
use crate::gcnn::GcnnConfig;
use crate::model::{ModelConfig, SamGcnn};
use crate::sam::SamConfig;

use super::AdamState;

const MAGIC: &[u8; 4] = b"SGC1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SamGcnn,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub val_acc: f64,
    pub seed: u64,
    /// Global normalization the model was trained with.
    pub norm: Option<GlobalNormStats>,
    /// Clips used for model selection, excluded from held-out evaluation.
    pub validation_clips: Vec<String>,
}

/// Stable text form of a model configuration.
pub fn config_text(cfg: &ModelConfig) -> String {
    let g = &cfg.gcnn;
    let s = &cfg.sam;
    let join = |k: &[usize; 3]| format!("{},{},{}", k[0], k[1], k[2]);
    [
        format!("num_classes={}", g.num_classes),
        format!("attention={}", u8::from(cfg.attention)),
        format!("input_bins={}", g.input_bins),
        format!("input_frames={}", g.input_frames),
        format!("stem_kernel={}", join(&g.stem_kernel)),
        format!("stem_pool={}", g.stem_pool),
        format!("gated_kernel={}", join(&g.gated_kernel)),
        format!("gated_pool={}", g.gated_pool),
        format!("hidden={}", g.hidden),
        format!("dropout={}", g.dropout),
        format!("sam_avg_pool={}", s.avg_pool),
        format!("sam_max_pool={}", s.max_pool),
        format!("sam_dropout={}", s.dropout),
    ]
    .join("\n")
}

pub fn config_digest(cfg: &ModelConfig) -> u64 {
    let mut h = Fnv::new();
    config_text(cfg).bytes().for_each(|b| h.byte(b));
    h.finish()
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut kv = std::collections::HashMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad config line '{line}'")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Format(format!("config lacks '{k}'")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Format(format!("bad '{k}'"))) };
    let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Format(format!("bad '{k}'"))) };
    let triple = |k: &str| -> Result<[usize; 3]> {
        let parts: Vec<usize> = get(k)?.split(',').map(|p| p.parse().map_err(|_| Error::Format(format!("bad '{k}'")))).collect::<Result<_>>()?;
        parts.try_into().map_err(|_| Error::Format(format!("'{k}' needs three values")))
    };
    let gcnn = GcnnConfig {
        num_classes: num("num_classes")?,
        input_bins: num("input_bins")?,
        input_frames: num("input_frames")?,
        stem_kernel: triple("stem_kernel")?,
        stem_pool: num("stem_pool")?,
        gated_kernel: triple("gated_kernel")?,
        gated_pool: num("gated_pool")?,
        hidden: num("hidden")?,
        dropout: float("dropout")?,
    };
    let sam = SamConfig {
        input_bins: gcnn.input_bins,
        input_frames: gcnn.input_frames,
        avg_pool: num("sam_avg_pool")?,
        max_pool: num("sam_max_pool")?,
        dropout: float("sam_dropout")?,
    };
    let attention = match get("attention")? {
        "0" => false,
        "1" => true,
        other => bail!(Format, "bad attention flag '{}'", other),
    };
    let cfg = ModelConfig { gcnn, sam, attention };
    cfg.validate().map_err(|e| Error::Format(format!("stored config is invalid: {e}")))?;
    Ok(cfg)
}

fn norm_text(norm: &Option<GlobalNormStats>) -> String {
    let Some(n) = norm else { return String::new() };
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    format!("mean={}\nstd={}", join(&n.mean), join(&n.std))
}

fn parse_norm(text: &str) -> Result<Option<GlobalNormStats>> {
    if text.is_empty() {
        return Ok(None);
    }
    let mut mean = None;
    let mut std = None;
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format("bad normalization line".into()))?;
        let vals = v
            .split(',')
            .map(|x| x.parse::<f64>().map_err(|_| Error::Format("bad normalization value".into())))
            .collect::<Result<Vec<_>>>()?;
        match k {
            "mean" => mean = Some(vals),
            "std" => std = Some(vals),
            _ => bail!(Format, "unknown normalization key '{}'", k),
        }
    }
    match (mean, std) {
        (Some(mean), Some(std)) if mean.len() == std.len() => Ok(Some(GlobalNormStats { mean, std })),
        _ => bail!(Format, "incomplete normalization statistics"),
    }
}

fn moments_store(names: &[String], tensors: &[Tensor]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in names.iter().zip(tensors) {
        s.insert(n.clone(), t.clone());
    }
    s
}

/// Tensors of `store` in the order of `like`, with matching shapes and no extras.
fn take_like(store: &ParamStore, like: &ParamStore, extra: usize, what: &str) -> Result<Vec<Tensor>> {
    if store.len() != like.len() + extra {
        bail!(Format, "{} block has {} entries, expected {}", what, store.len(), like.len() + extra);
    }
    like.iter()
        .map(|(name, t)| {
            let got = store.get(name).ok_or_else(|| Error::Format(format!("{what} block lacks '{name}'")))?;
            if got.shape() != t.shape() {
                bail!(Format, "{} '{}' has shape {:?}, expected {:?}", what, name, got.shape(), t.shape());
            }
            Ok(got.clone())
        })
        .collect()
}

impl Checkpoint {
    pub fn config_digest(&self) -> u64 {
        config_digest(&self.model.config)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.val_acc.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.config_digest().to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        if self.validation_clips.iter().any(|c| c.contains('\n')) {
            bail!(Contract, "clip ids must not contain newlines");
        }
        for blob in [config_text(&self.model.config), norm_text(&self.norm), self.validation_clips.join("\n")] {
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            out.extend_from_slice(blob.as_bytes());
        }
        let mut params = self.model.params.clone();
        self.model.bn.export(&mut params);
        params.write_to(&mut out)?;
        let names = self.model.params.names();
        moments_store(names, &self.adam.m).write_to(&mut out)?;
        moments_store(names, &self.adam.v).write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            bail!(Format, "not a checkpoint (magic {:?})", magic);
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            bail!(Format, "unsupported checkpoint version {}", version);
        }
        let epoch = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let val_acc = f64::from_le_bytes(read_array(&mut r)?);
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let digest = u64::from_le_bytes(read_array(&mut r)?);
        let t = u64::from_le_bytes(read_array(&mut r)?);
        let config_blob = read_blob(&mut r)?;
        let norm_blob = read_blob(&mut r)?;
        let ids_blob = read_blob(&mut r)?;
        let validation_clips = if ids_blob.is_empty() { Vec::new() } else { ids_blob.lines().map(str::to_string).collect() };
        let config = parse_config(&config_blob)?;
        if config_digest(&config) != digest {
            bail!(Format, "config digest mismatch");
        }
        let norm = parse_norm(&norm_blob)?;

        let mut model = SamGcnn::new(config, 0)?;
        let stored = ParamStore::read_from(&mut r)?;
        let bn_entries = 2 * model.bn.names().count();
        let tensors = take_like(&stored, &model.params, bn_entries, "parameter")?;
        model.bn.import(&stored).map_err(|e| Error::Format(e.to_string()))?;
        model.params.tensors_mut().clone_from_slice(&tensors);
        let m = take_like(&ParamStore::read_from(&mut r)?, &model.params, 0, "first-moment")?;
        let v = take_like(&ParamStore::read_from(&mut r)?, &model.params, 0, "second-moment")?;
        if (r.position() as usize) != bytes.len() {
            bail!(Format, "{} trailing bytes after checkpoint", bytes.len() - r.position() as usize);
        }
        Ok(Self { model, adam: AdamState { m, v, t }, epoch, val_acc, seed, norm, validation_clips })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_blob(r: &mut impl Read) -> Result<String> {
    let len = u32::from_le_bytes(read_array(r)?) as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_checkpoint(attention: bool) -> Checkpoint {
        let model = SamGcnn::new(ModelConfig::reduced(3, attention), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut f32_tensor = |t: &Tensor| Tensor::from_fn(t.shape(), |_| rng.gen_range(-1.0f32..1.0) as f64);
        let m = model.params.tensors().iter().map(&mut f32_tensor).collect();
        let v = model.params.tensors().iter().map(&mut f32_tensor).collect();
        let mut model = model;
        model.bn.get_mut("bn2").unwrap().running_var[1] = 2.5;
        let norm = Some(GlobalNormStats { mean: vec![0.1, -3.0 / 7.0], std: vec![1.0 / 3.0, 2.0] });
        let validation_clips = vec!["a_001".into(), "b 2".into()];
        Checkpoint { model, adam: AdamState { m, v, t: 17 }, epoch: 5, val_acc: 0.8125, seed: 42, norm, validation_clips }
    }

    #[test]
    fn round_trip_is_exact() {
        for attention in [true, false] {
            let c = random_checkpoint(attention);
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            assert_eq!(back, c);
        }
        let mut c = random_checkpoint(true);
        c.norm = None;
        c.validation_clips.clear();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sgc");
        let c = random_checkpoint(true);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = random_checkpoint(true).to_bytes().unwrap();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = random_checkpoint(true).to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = random_checkpoint(false).to_bytes().unwrap();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn digest_tracks_config() {
        let a = ModelConfig::new(9, true);
        let b = ModelConfig::new(3, true);
        assert_ne!(config_digest(&a), config_digest(&b));
        assert_eq!(parse_config(&config_text(&a)).unwrap(), a);
        assert_eq!(parse_config(&config_text(&ModelConfig::reduced(3, false))).unwrap(), ModelConfig::reduced(3, false));
    }
}
