//! The combined network: backbone logits fused with attention weights.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_in_place, BatchNormState, Bindings, Mode, ParamStore, Tape, Tensor, Var};
use crate::error::{bail, Error, Result};
use crate::dataset::ClipExample;
use crate::fusion::{self, predict_clip, ClipPosterior};
use crate::gcnn::{self, GcnnConfig};
use crate::sam::{self, SamConfig};

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
}

/// Layer name and per-sample output shape, in execution order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapeTrace {
    pub layers: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    pub fn push(&mut self, name: &str, shape: &[usize]) {
        self.layers.push((name.to_string(), shape.to_vec()));
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|(_, s)| s.clone()).collect()
    }

    /// Shape error naming the first layer that differs from `expected`.
    pub fn check(&self, expected: &[&[usize]]) -> Result<()> {
        if self.layers.len() != expected.len() {
            bail!(Shape, "trace has {} layers, expected {}", self.layers.len(), expected.len());
        }
        for ((name, got), want) in self.layers.iter().zip(expected) {
            if got.as_slice() != *want {
                bail!(Shape, "layer '{}' produced {:?}, expected {:?}", name, got, want);
            }
        }
        Ok(())
    }
}

/// Running statistics for every batch-norm layer, keyed by layer name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BnStates(BTreeMap<String, BatchNormState>);

impl BnStates {
    pub fn new<'a>(layers: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        Self(layers.into_iter().map(|(n, c)| (n.to_string(), BatchNormState::new(c))).collect())
    }

    pub fn get(&self, name: &str) -> Option<&BatchNormState> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut BatchNormState> {
        self.0.get_mut(name).ok_or_else(|| Error::Contract(format!("no batch-norm state '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Adds `<layer>.running_mean` and `<layer>.running_var` entries to `store`.
    pub fn export(&self, store: &mut ParamStore) {
        for (name, s) in &self.0 {
            let c = s.channels();
            store.insert(format!("{name}.running_mean"), Tensor::new(vec![c], s.running_mean.clone()).unwrap());
            store.insert(format!("{name}.running_var"), Tensor::new(vec![c], s.running_var.clone()).unwrap());
        }
    }

    /// Overwrites running statistics from entries written by [`BnStates::export`].
    pub fn import(&mut self, store: &ParamStore) -> Result<()> {
        for (name, s) in self.0.iter_mut() {
            let mean = store.require(&format!("{name}.running_mean"))?;
            let var = store.require(&format!("{name}.running_var"))?;
            if mean.len() != s.channels() || var.len() != s.channels() {
                bail!(Shape, "batch-norm '{}' expects {} channels", name, s.channels());
            }
            s.running_mean = mean.data().to_vec();
            s.running_var = var.data().to_vec();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub gcnn: GcnnConfig,
    pub sam: SamConfig,
    /// `false` gives the plain backbone: every segment weighted 1.
    pub attention: bool,
}

impl ModelConfig {
    pub fn new(num_classes: usize, attention: bool) -> Self {
        Self { gcnn: GcnnConfig::with_classes(num_classes), sam: SamConfig::default(), attention }
    }

    pub fn reduced(num_classes: usize, attention: bool) -> Self {
        Self { gcnn: GcnnConfig::reduced(num_classes), sam: SamConfig::reduced(), attention }
    }

    pub fn num_classes(&self) -> usize {
        self.gcnn.num_classes
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.gcnn.dropout = rate;
        self.sam.dropout = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.gcnn.validate()?;
        if self.attention {
            self.sam.validate()?;
            let (g, s) = (&self.gcnn, &self.sam);
            if g.input_bins != s.input_bins || g.input_frames != s.input_frames {
                bail!(Config, "branch inputs differ: {}x{} vs {}x{}", g.input_bins, g.input_frames, s.input_bins, s.input_frames);
            }
            if g.segments() != s.segments() {
                bail!(Config, "backbone yields {} segments but attention yields {}", g.segments(), s.segments());
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 2] {
        [self.gcnn.input_bins, self.gcnn.input_frames]
    }

    pub fn fresh_bn(&self) -> BnStates {
        let mut layers: Vec<(&str, usize)> = self.gcnn.bn_layers().to_vec();
        if self.attention {
            layers.extend(self.sam.bn_layers());
        }
        BnStates::new(layers)
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.gcnn.init_params(&mut store, &mut rng);
        if self.attention {
            self.sam.init_params(&mut store, &mut rng);
        }
        // start on the f32 grid that checkpoints store
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        store
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Segment logits `[B, N, C]`.
    pub segments: Var,
    /// Attention weights `[B, N]`, absent without attention.
    pub weights: Option<Var>,
    /// Pre-softmax clip scores `[B, C]`.
    pub logits: Var,
}

/// Builds both branches and the fusion on `tape`.
///
/// `global` and `time` are `[B, bins, frames, 1]` inputs; `time` is ignored
/// without attention.
#[allow(clippy::too_many_arguments)]
pub fn forward<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    tape: &mut Tape,
    p: &Bindings,
    bn: &mut BnStates,
    global: Var,
    time: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardVars> {
    let segments = gcnn::forward(&cfg.gcnn, tape, p, bn, global, mode, rng, None)?;
    let weights = if cfg.attention {
        Some(sam::forward(&cfg.sam, tape, p, bn, time, mode, rng, None)?)
    } else {
        None
    };
    let logits = fusion::fuse_on_tape(tape, segments, weights)?;
    Ok(ForwardVars { segments, weights, logits })
}

/// Per-sample inference results.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// `[N * C]` row-major segment logits.
    pub segments: Vec<f64>,
    pub weights: Option<Vec<f64>>,
    pub posterior: Vec<f64>,
}

/// Parameters, running statistics and topology of one trained system.
#[derive(Debug, Clone, PartialEq)]
pub struct SamGcnn {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub bn: BnStates,
}

impl SamGcnn {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config.init_params(seed);
        let bn = config.fresh_bn();
        Ok(Self { config, params, bn })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    /// Infer-mode forward over a batch of `[B, bins, frames, 1]` inputs.
    pub fn infer(&self, global: &Tensor, time: &Tensor) -> Result<Vec<Inference>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let g = tape.constant(global.clone());
        let t = tape.constant(time.clone());
        let mut bn = self.bn.clone();
        // dropout is inert in infer mode; the rng is never drawn from
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&self.config, &mut tape, &p, &mut bn, g, t, Mode::Infer, &mut rng)?;
        let batch = global.shape()[0];
        let seg = tape.value(out.segments).data();
        let logits = tape.value(out.logits).data();
        let per_seg = seg.len() / batch.max(1);
        let c = self.num_classes();
        let n = per_seg / c;
        let mut results = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut posterior = logits[b * c..(b + 1) * c].to_vec();
            softmax_in_place(&mut posterior);
            results.push(Inference {
                segments: seg[b * per_seg..(b + 1) * per_seg].to_vec(),
                weights: out.weights.map(|w| tape.value(w).data()[b * n..(b + 1) * n].to_vec()),
                posterior,
            });
        }
        Ok(results)
    }
}

impl SamGcnn {
    /// Channel-averaged posterior for one clip.
    pub fn score_clip(&self, clip: &ClipExample) -> Result<ClipPosterior> {
        let [bins, frames] = self.config.input_shape();
        let (g, t) = clip.batch(bins, frames)?;
        let per_channel: Vec<ClipPosterior> = self
            .infer(&g, &t)?
            .into_iter()
            .map(|r| ClipPosterior::single(clip.clip_id.clone(), r.posterior))
            .collect();
        Ok(predict_clip(&per_channel)?.0)
    }
}
