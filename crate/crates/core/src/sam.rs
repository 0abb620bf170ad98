//! Segment-level attention: one sigmoid weight per 1-second segment.
//!
//! ```text
//! [40,501,1] dense 40 per frame      -> [40,501,1]  BN-ReLU-Dropout
//!            sum over frequency      -> [1,501,1]
//!            drop trailing frame     -> [1,500,1]
//!            avg-pool 1x5            -> [1,100,1]
//!            max-pool 1x10           -> [1,10,1]
//!            squeeze, sigmoid        -> [10]
//! ```
//!
//! Average pooling 501 frames by 5 would give 101 outputs; trailing frames
//! beyond a whole number of segments are dropped so every segment pools
//! exactly `avg_pool * max_pool` frames.

use rand::Rng;

use crate::autodiff::{Bindings, Mode, Padding, ParamStore, Tape, Tensor, Var};
use crate::error::{bail, Result};
use crate::model::{glorot, BnStates, ShapeTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct SamConfig {
    pub input_bins: usize,
    pub input_frames: usize,
    pub avg_pool: usize,
    pub max_pool: usize,
    pub dropout: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self { input_bins: 40, input_frames: 501, avg_pool: 5, max_pool: 10, dropout: 0.2 }
    }
}

impl SamConfig {
    pub fn reduced() -> Self {
        Self { input_bins: 2, input_frames: 31, avg_pool: 2, max_pool: 5, dropout: 0.2 }
    }

    pub fn frames_per_segment(&self) -> usize {
        self.avg_pool * self.max_pool
    }

    pub fn segments(&self) -> usize {
        self.input_frames / self.frames_per_segment()
    }

    pub fn validate(&self) -> Result<()> {
        if self.avg_pool == 0 || self.max_pool == 0 || self.input_bins == 0 {
            bail!(Config, "attention pooling widths and bins must be positive");
        }
        if self.segments() == 0 {
            bail!(Config, "{} frames do not fill one segment of {}", self.input_frames, self.frames_per_segment());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout {} outside [0, 1)", self.dropout);
        }
        Ok(())
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let n = self.input_bins;
        store.insert("sam.fc.w", glorot(rng, &[n, n], n, n));
        store.insert("sam.fc.b", Tensor::zeros(&[n]));
        store.insert("sam.bn.gamma", Tensor::filled(&[n], 1.0));
        store.insert("sam.bn.beta", Tensor::zeros(&[n]));
    }

    pub fn bn_layers(&self) -> [(&'static str, usize); 1] {
        [("sam.bn", self.input_bins)]
    }
}

/// `floor(num_frames * frame_hop / segment_duration)`.
pub fn segment_count(num_frames: usize, frame_hop: f64, segment_duration: f64) -> Result<usize> {
    if num_frames == 0 || !(frame_hop > 0.0) || !(segment_duration > 0.0) {
        bail!(DegenerateInput, "segment_count needs positive arguments");
    }
    // nudge so exact products (e.g. 50 * 0.02) are not lost to rounding
    let n = (num_frames as f64 * frame_hop / segment_duration + 1e-9).floor() as usize;
    if n == 0 {
        bail!(DegenerateInput, "{} frames of {} s do not fill a {} s segment", num_frames, frame_hop, segment_duration);
    }
    Ok(n)
}

/// Attention weights `[B, N]` from time-normalized features `x: [B, bins, frames, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn forward<R: Rng + ?Sized>(
    cfg: &SamConfig,
    tape: &mut Tape,
    p: &Bindings,
    bn: &mut BnStates,
    x: Var,
    mode: Mode,
    rng: &mut R,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<Var> {
    let pre = pre_sigmoid(cfg, tape, p, bn, x, mode, rng, trace.as_deref_mut())?;
    let w = tape.sigmoid(pre);
    if let Some(t) = trace {
        t.push("sigmoid", &tape.shape(w)[1..]);
    }
    Ok(w)
}

/// Everything up to and including the squeeze, `[B, N]`.
#[allow(clippy::too_many_arguments)]
pub fn pre_sigmoid<R: Rng + ?Sized>(
    cfg: &SamConfig,
    tape: &mut Tape,
    p: &Bindings,
    bn: &mut BnStates,
    x: Var,
    mode: Mode,
    rng: &mut R,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 || xs[1..] != [cfg.input_bins, cfg.input_frames, 1] {
        bail!(Shape, "attention expects [B, {}, {}, 1], got {:?}", cfg.input_bins, cfg.input_frames, xs);
    }
    let (batch, bins, frames) = (xs[0], xs[1], xs[2]);
    let mut record = |name: &str, shape: &[usize]| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(name, shape);
        }
    };

    // frames become rows so the dense layer mixes the frequency axis
    let h = tape.reshape(x, &[batch, bins, frames])?;
    let h = tape.swap_axes(h, 1, 2)?;
    let h = tape.dense(h, p.get("sam.fc.w")?, p.get("sam.fc.b")?)?;
    record("dense", &[bins, frames, 1]);
    let h = tape.batch_norm(h, p.get("sam.bn.gamma")?, p.get("sam.bn.beta")?, bn.get_mut("sam.bn")?, mode)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, cfg.dropout, mode, rng)?;
    record("bn-relu-dropout", &[bins, frames, 1]);
    let h = tape.sum_axis(h, 2)?;
    let h = tape.reshape(h, &[batch, 1, frames, 1])?;
    record("sum-frequency", &tape.shape(h)[1..].to_vec());

    let n = cfg.segments();
    let h = tape.slice(h, 2, 0, n * cfg.frames_per_segment())?;
    let h = tape.avg_pool(h, cfg.avg_pool, Padding::Same)?;
    record("avg-pool", &tape.shape(h)[1..].to_vec());
    let h = tape.max_pool(h, cfg.max_pool, Padding::Same)?;
    record("max-pool", &tape.shape(h)[1..].to_vec());
    let h = tape.reshape(h, &[batch, n])?;
    record("squeeze", &tape.shape(h)[1..].to_vec());
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_counts() {
        assert_eq!(segment_count(501, 0.020, 1.0).unwrap(), 10);
        assert_eq!(segment_count(50, 0.020, 1.0).unwrap(), 1);
        assert_eq!(segment_count(1000, 0.010, 1.0).unwrap(), 10);
        assert!(segment_count(10, 0.020, 1.0).is_err());
        assert!(segment_count(10, 0.0, 1.0).is_err());
    }

    #[test]
    fn default_geometry_matches_segment_count() {
        let cfg = SamConfig::default();
        assert_eq!(cfg.segments(), segment_count(501, 0.020, 1.0).unwrap());
    }
}

#[cfg(test)]
mod forward_tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn setup(cfg: &SamConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    fn run(cfg: &SamConfig, store: &ParamStore, x: &Tensor, trace: Option<&mut ShapeTrace>) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut bn = BnStates::new(cfg.bn_layers());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = forward(cfg, &mut tape, &p, &mut bn, xv, Mode::Infer, &mut rng, trace).unwrap();
        tape.value(w).clone()
    }

    #[test]
    fn full_size_layer_shapes() {
        let cfg = SamConfig::default();
        let store = setup(&cfg, 1);
        let mut trace = ShapeTrace::default();
        let w = run(&cfg, &store, &random(&[1, 40, 501, 1], 2), Some(&mut trace));
        assert_eq!(w.shape(), &[1, 10]);
        trace
            .check(&[&[40, 501, 1], &[40, 501, 1], &[1, 501, 1], &[1, 100, 1], &[1, 10, 1], &[10], &[10]])
            .unwrap();
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zeroed_scores_give_half() {
        let cfg = SamConfig::default();
        let mut store = setup(&cfg, 1);
        // beta = 0 and gamma = 0 make every BN output zero
        store.get_mut("sam.bn.gamma").unwrap().data_mut().fill(0.0);
        let w = run(&cfg, &store, &random(&[2, 40, 501, 1], 3), None);
        assert!(w.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let cfg = SamConfig::default();
        let store = setup(&cfg, 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 39, 501, 1]));
        let mut bn = BnStates::new(cfg.bn_layers());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = forward(&cfg, &mut tape, &p, &mut bn, x, Mode::Infer, &mut rng, None).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn matches_composed_ops() {
        let cfg = SamConfig::default();
        let store = setup(&cfg, 4);
        let x = random(&[2, 40, 501, 1], 5);
        let got = run(&cfg, &store, &x, None);

        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut state = crate::autodiff::BatchNormState::new(40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xv = tape.constant(x.clone());
        let h = tape.reshape(xv, &[2, 40, 501]).unwrap();
        let h = tape.swap_axes(h, 1, 2).unwrap();
        let h = tape.dense(h, p.get("sam.fc.w").unwrap(), p.get("sam.fc.b").unwrap()).unwrap();
        let h = tape
            .batch_norm(h, p.get("sam.bn.gamma").unwrap(), p.get("sam.bn.beta").unwrap(), &mut state, Mode::Infer)
            .unwrap();
        let h = tape.relu(h);
        let h = tape.dropout(h, 0.2, Mode::Infer, &mut rng).unwrap();
        let h = tape.sum_axis(h, 2).unwrap();
        let h = tape.reshape(h, &[2, 1, 501, 1]).unwrap();
        let h = tape.slice(h, 2, 0, 500).unwrap();
        let h = tape.avg_pool(h, 5, Padding::Same).unwrap();
        let h = tape.max_pool(h, 10, Padding::Same).unwrap();
        let h = tape.reshape(h, &[2, 10]).unwrap();
        let w = tape.sigmoid(h);
        assert_eq!(&got, tape.value(w));
    }

    #[test]
    fn sigmoid_is_monotone_at_the_output() {
        let cfg = SamConfig::default();
        let mut store = setup(&cfg, 6);
        let x = random(&[1, 40, 501, 1], 7);
        let base = run(&cfg, &store, &x, None);
        // beta adds a constant per unit before ReLU; with positive shift every summed score rises
        store.get_mut("sam.bn.beta").unwrap().data_mut().fill(0.5);
        let raised = run(&cfg, &store, &x, None);
        for (a, b) in raised.data().iter().zip(base.data()) {
            assert!(a > b);
        }
    }

    fn gradcheck(mode: Mode) {
        let cfg = SamConfig::reduced();
        let store = setup(&cfg, 8);
        let x = random(&[2, 2, 31, 1], 9);
        let target = random(&[2, 3], 10);
        let report = grad_check(
            store.tensors(),
            |tape, vars| {
                let p = store.bindings_from(vars);
                let mut bn = BnStates::new(cfg.bn_layers());
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let xv = tape.constant(x.clone());
                let w = forward(&cfg, tape, &p, &mut bn, xv, mode, &mut rng, None)?;
                let t = tape.constant(target.clone());
                let prod = tape.mul(w, t)?;
                Ok(tape.sum(prod))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error());
    }

    #[test]
    fn reduced_gradcheck_train() {
        gradcheck(Mode::Train);
    }

    #[test]
    fn reduced_gradcheck_infer() {
        gradcheck(Mode::Infer);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn segment_counts_agree_with_backbone(frames in 20usize..120) {
            let mut cfg = ModelConfig::reduced(3, true);
            cfg.gcnn.input_frames = frames;
            cfg.sam.input_frames = frames;
            let agree = cfg.gcnn.segments() == cfg.sam.segments();
            prop_assert_eq!(cfg.validate().is_ok(), agree);
            if agree {
                let store = cfg.init_params(1);
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let x = tape.constant(random(&[1, 2, frames, 1], 2));
                let mut bn = cfg.fresh_bn();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let seg = crate::gcnn::forward(&cfg.gcnn, &mut tape, &p, &mut bn, x, Mode::Infer, &mut rng, None).unwrap();
                let w = forward(&cfg.sam, &mut tape, &p, &mut bn, x, Mode::Infer, &mut rng, None).unwrap();
                prop_assert_eq!(tape.shape(seg)[1], tape.shape(w)[1]);
            }
        }

        #[test]
        fn default_hop_segments(frames in 50usize..5000) {
            let cfg = SamConfig { input_frames: frames, ..SamConfig::default() };
            prop_assert_eq!(cfg.segments(), segment_count(frames, 0.020, 1.0).unwrap());
        }
    }
}
