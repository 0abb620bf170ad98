//! Gated convolutional backbone producing per-segment class logits.
//!
//! ```text
//! [40,501,1] conv valid 40x5x64      -> [1,497,64]  BN-ReLU-Dropout
//!            max-pool 1x5 valid      -> [1,99,64]
//!            gated conv same 1x3x128 -> [1,99,64]   BN-ReLU-Dropout
//!            max-pool 1x10 same      -> [1,10,64]
//!            flatten                 -> [10,64]
//!            dense 64 ReLU Dropout   -> [10,64]
//!            dense C                 -> [10,C]
//! ```

use rand::Rng;

use crate::autodiff::{Bindings, Mode, Padding, ParamStore, Tape, Tensor, Var};
use crate::error::{bail, Result};
use crate::model::{glorot, BnStates, ShapeTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct GcnnConfig {
    pub num_classes: usize,
    pub input_bins: usize,
    pub input_frames: usize,
    /// Stem kernel `[height, width, out_channels]`.
    pub stem_kernel: [usize; 3],
    /// Valid max-pool width after the stem.
    pub stem_pool: usize,
    /// Gated kernel `[height, width, out_channels]`; the output is split into two halves.
    pub gated_kernel: [usize; 3],
    /// Same-padded max-pool width after the gated block.
    pub gated_pool: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for GcnnConfig {
    fn default() -> Self {
        Self {
            num_classes: 9,
            input_bins: 40,
            input_frames: 501,
            stem_kernel: [40, 5, 64],
            stem_pool: 5,
            gated_kernel: [1, 3, 128],
            gated_pool: 10,
            hidden: 64,
            dropout: 0.2,
        }
    }
}

impl GcnnConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        Self { num_classes, ..Self::default() }
    }

    /// Same topology at toy width, used for gradient checks.
    pub fn reduced(num_classes: usize) -> Self {
        Self {
            num_classes,
            input_bins: 2,
            input_frames: 31,
            stem_kernel: [2, 3, 4],
            stem_pool: 5,
            gated_kernel: [1, 3, 8],
            gated_pool: 2,
            hidden: 4,
            dropout: 0.2,
        }
    }

    pub fn channels(&self) -> usize {
        self.stem_kernel[2]
    }

    fn stem_height(&self) -> usize {
        self.input_bins + 1 - self.stem_kernel[0]
    }

    fn stem_width(&self) -> usize {
        self.input_frames + 1 - self.stem_kernel[1]
    }

    /// Number of segments (output rows).
    pub fn segments(&self) -> usize {
        (self.stem_width() / self.stem_pool).div_ceil(self.gated_pool)
    }

    pub fn flat_width(&self) -> usize {
        self.stem_height() * self.channels()
    }

    pub fn validate(&self) -> Result<()> {
        let [kh, kw, c] = self.stem_kernel;
        let [gh, gw, gc] = self.gated_kernel;
        if self.num_classes < 2 {
            bail!(Config, "need at least 2 classes, got {}", self.num_classes);
        }
        if gc % 2 != 0 {
            bail!(Config, "gated kernel output channels {} must be even", gc);
        }
        if gc / 2 != c {
            bail!(Config, "gated half width {} must equal stem channels {} for the residual add", gc / 2, c);
        }
        if kh == 0 || kw == 0 || gh == 0 || gw == 0 || c == 0 || self.hidden == 0 {
            bail!(Config, "kernel extents and widths must be positive");
        }
        if kh > self.input_bins || kw > self.input_frames {
            bail!(Config, "stem kernel {}x{} exceeds input {}x{}", kh, kw, self.input_bins, self.input_frames);
        }
        if self.stem_pool == 0 || self.gated_pool == 0 || self.stem_width() / self.stem_pool == 0 {
            bail!(Config, "pooling leaves no frames");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout {} outside [0, 1)", self.dropout);
        }
        Ok(())
    }

    /// Seeded Glorot-uniform weights, zero biases, unit BN scale.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let [kh, kw, c] = self.stem_kernel;
        let [gh, gw, gc] = self.gated_kernel;
        let half = gc / 2;
        store.insert("stem.w", glorot(rng, &[kh, kw, 1, c], kh * kw, kh * kw * c));
        store.insert("stem.b", Tensor::zeros(&[c]));
        store.insert("bn1.gamma", Tensor::filled(&[c], 1.0));
        store.insert("bn1.beta", Tensor::zeros(&[c]));
        store.insert("gated.w", glorot(rng, &[gh, gw, c, half], gh * gw * c, gh * gw * gc));
        store.insert("gated.v", glorot(rng, &[gh, gw, c, half], gh * gw * c, gh * gw * gc));
        store.insert("gated.b", Tensor::zeros(&[half]));
        store.insert("gated.c", Tensor::zeros(&[half]));
        store.insert("bn2.gamma", Tensor::filled(&[c], 1.0));
        store.insert("bn2.beta", Tensor::zeros(&[c]));
        let flat = self.flat_width();
        store.insert("fc1.w", glorot(rng, &[flat, self.hidden], flat, self.hidden));
        store.insert("fc1.b", Tensor::zeros(&[self.hidden]));
        store.insert("fc2.w", glorot(rng, &[self.hidden, self.num_classes], self.hidden, self.num_classes));
        store.insert("fc2.b", Tensor::zeros(&[self.num_classes]));
    }

    pub fn bn_layers(&self) -> [(&'static str, usize); 2] {
        [("bn1", self.channels()), ("bn2", self.channels())]
    }
}

/// Gated residual block: `A = E*W+b`, `B = E*V+c`, `O = B (x) sigmoid(A) + E`.
///
/// `W` and `V` are concatenated into one kernel, convolved with same padding,
/// and the output split channel-wise: first half `A` (the gate), second half `B`.
pub fn gated_conv_block(tape: &mut Tape, e: Var, w: Var, v: Var, b: Var, c: Var) -> Result<Var> {
    let (ws, vs) = (tape.shape(w).to_vec(), tape.shape(v).to_vec());
    if ws != vs || ws.len() != 4 {
        bail!(Shape, "gated kernels {:?} and {:?} must match", ws, vs);
    }
    let half = ws[3];
    let ein = *tape.shape(e).last().unwrap_or(&0);
    if ein != half {
        bail!(Shape, "gated block input has {} channels, residual needs {}", ein, half);
    }
    let kernel = tape.concat(w, v, 3)?;
    let bias = tape.concat(b, c, 0)?;
    let conv = tape.conv2d(e, kernel, bias, Padding::Same)?;
    let a = tape.slice(conv, 3, 0, half)?;
    let bb = tape.slice(conv, 3, half, half)?;
    let gate = tape.sigmoid(a);
    let h = tape.mul(bb, gate)?;
    tape.add(h, e)
}

/// Forward pass on `x: [B, bins, frames, 1]`, returning logits `[B, N, C]`.
#[allow(clippy::too_many_arguments)]
pub fn forward<R: Rng + ?Sized>(
    cfg: &GcnnConfig,
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
        bail!(Shape, "backbone expects [B, {}, {}, 1], got {:?}", cfg.input_bins, cfg.input_frames, xs);
    }
    let batch = xs[0];
    let mut record = |tape: &Tape, name: &str, v: Var| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(name, &tape.shape(v)[1..]);
        }
    };

    let h = tape.conv2d(x, p.get("stem.w")?, p.get("stem.b")?, Padding::Valid)?;
    record(tape, "conv", h);
    let h = tape.batch_norm(h, p.get("bn1.gamma")?, p.get("bn1.beta")?, bn.get_mut("bn1")?, mode)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, cfg.dropout, mode, rng)?;
    record(tape, "bn-relu-dropout", h);
    let h = tape.max_pool(h, cfg.stem_pool, Padding::Valid)?;
    record(tape, "max-pool", h);

    let h = gated_conv_block(tape, h, p.get("gated.w")?, p.get("gated.v")?, p.get("gated.b")?, p.get("gated.c")?)?;
    record(tape, "gated-conv", h);
    let h = tape.batch_norm(h, p.get("bn2.gamma")?, p.get("bn2.beta")?, bn.get_mut("bn2")?, mode)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, cfg.dropout, mode, rng)?;
    record(tape, "bn-relu-dropout", h);
    let h = tape.max_pool(h, cfg.gated_pool, Padding::Same)?;
    record(tape, "max-pool", h);

    // [B, H', N, C] -> [B, N, H'*C]
    let n = tape.shape(h)[2];
    let h = tape.swap_axes(h, 1, 2)?;
    let h = tape.reshape(h, &[batch, n, cfg.flat_width()])?;
    record(tape, "flatten", h);

    let h = tape.dense(h, p.get("fc1.w")?, p.get("fc1.b")?)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, cfg.dropout, mode, rng)?;
    record(tape, "dense-relu-dropout", h);
    let out = tape.dense(h, p.get("fc2.w")?, p.get("fc2.b")?)?;
    record(tape, "dense", out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn setup(cfg: &GcnnConfig, seed: u64) -> (ParamStore, BnStates) {
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (store, BnStates::new(cfg.bn_layers()))
    }

    fn run(cfg: &GcnnConfig, store: &ParamStore, bn: &mut BnStates, x: &Tensor, mode: Mode, trace: Option<&mut ShapeTrace>) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let out = forward(cfg, &mut tape, &p, bn, xv, mode, &mut rng, trace).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn full_size_layer_shapes() {
        let cfg = GcnnConfig::default();
        let (store, mut bn) = setup(&cfg, 1);
        let mut trace = ShapeTrace::default();
        let out = run(&cfg, &store, &mut bn, &random(&[1, 40, 501, 1], 2), Mode::Infer, Some(&mut trace));
        assert_eq!(out.shape(), &[1, 10, 9]);
        trace
            .check(&[
                &[1, 497, 64],
                &[1, 497, 64],
                &[1, 99, 64],
                &[1, 99, 64],
                &[1, 99, 64],
                &[1, 10, 64],
                &[10, 64],
                &[10, 64],
                &[10, 9],
            ])
            .unwrap();
    }

    #[test]
    fn three_class_head() {
        let cfg = GcnnConfig::with_classes(3);
        let (store, mut bn) = setup(&cfg, 1);
        let out = run(&cfg, &store, &mut bn, &random(&[2, 40, 501, 1], 2), Mode::Infer, None);
        assert_eq!(out.shape(), &[2, 10, 3]);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let cfg = GcnnConfig::default();
        let (store, mut bn) = setup(&cfg, 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 40, 500, 1]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = forward(&cfg, &mut tape, &p, &mut bn, x, Mode::Infer, &mut rng, None).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn config_invariants() {
        let mut cfg = GcnnConfig::default();
        cfg.gated_kernel[2] = 127;
        assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))));
        let mut cfg = GcnnConfig::default();
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        GcnnConfig::default().validate().unwrap();
        GcnnConfig::reduced(3).validate().unwrap();
    }

    #[test]
    fn infer_is_deterministic() {
        let cfg = GcnnConfig::default();
        let (store, mut bn) = setup(&cfg, 5);
        let x = random(&[1, 40, 501, 1], 6);
        let a = run(&cfg, &store, &mut bn, &x, Mode::Infer, None);
        let b = run(&cfg, &store, &mut bn, &x, Mode::Infer, None);
        assert_eq!(a, b);
    }

    fn block(e: &Tensor, w: &Tensor, v: &Tensor, b: &Tensor, c: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let ids: Vec<Var> = [e, w, v, b, c].iter().map(|t| tape.constant((*t).clone())).collect();
        let o = gated_conv_block(&mut tape, ids[0], ids[1], ids[2], ids[3], ids[4]).unwrap();
        tape.value(o).clone()
    }

    #[test]
    fn gated_block_keeps_shape() {
        let e = random(&[1, 1, 99, 64], 1);
        let w = random(&[1, 3, 64, 64], 2);
        let v = random(&[1, 3, 64, 64], 3);
        let o = block(&e, &w, &v, &Tensor::zeros(&[64]), &Tensor::zeros(&[64]));
        assert_eq!(o.shape(), &[1, 1, 99, 64]);
    }

    #[test]
    fn gated_block_matches_composed_ops() {
        let e = random(&[2, 1, 13, 6], 1);
        let w = random(&[1, 3, 6, 6], 2);
        let v = random(&[1, 3, 6, 6], 3);
        let b = random(&[6], 4);
        let c = random(&[6], 5);
        let got = block(&e, &w, &v, &b, &c);

        let mut tape = Tape::new();
        let [ev, wv, vv, bv, cv] = [&e, &w, &v, &b, &c].map(|t| tape.constant(t.clone()));
        let a = tape.conv2d(ev, wv, bv, Padding::Same).unwrap();
        let bb = tape.conv2d(ev, vv, cv, Padding::Same).unwrap();
        let g = tape.sigmoid(a);
        let h = tape.mul(bb, g).unwrap();
        let o = tape.add(h, ev).unwrap();
        assert_eq!(&got, tape.value(o));
    }

    #[test]
    fn gate_at_rest_halves_the_value_path() {
        let e = random(&[1, 1, 9, 4], 1);
        let v = random(&[1, 3, 4, 4], 2);
        let c = random(&[4], 3);
        let got = block(&e, &Tensor::zeros(&[1, 3, 4, 4]), &v, &Tensor::zeros(&[4]), &c);

        let mut tape = Tape::new();
        let [ev, vv, cv] = [&e, &v, &c].map(|t| tape.constant(t.clone()));
        let bb = tape.conv2d(ev, vv, cv, Padding::Same).unwrap();
        let conv = tape.value(bb).data().to_vec();
        for ((o, x), b) in got.data().iter().zip(e.data()).zip(conv) {
            assert!((o - (0.5 * b + x)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_kernels_give_identity() {
        let e = random(&[1, 1, 9, 4], 1);
        let z = Tensor::zeros(&[1, 3, 4, 4]);
        let o = block(&e, &z, &z, &Tensor::zeros(&[4]), &Tensor::zeros(&[4]));
        assert_eq!(o, e);
    }

    #[test]
    fn gated_block_rejects_channel_mismatch() {
        let e = random(&[1, 1, 9, 5], 1);
        let w = random(&[1, 3, 5, 4], 2);
        let mut tape = Tape::new();
        let [ev, wv, bv] = [&e, &w, &Tensor::zeros(&[4])].map(|t| tape.constant(t.clone()));
        assert!(gated_conv_block(&mut tape, ev, wv, wv, bv, bv).is_err());
    }

    #[test]
    fn gate_is_strictly_inside_unit_interval() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[7], |i| (i as f64 - 3.0) * 10.0));
        let s = tape.sigmoid(x);
        assert!(tape.value(s).data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn infer_output_ignores_batch_order() {
        let cfg = GcnnConfig::reduced(3);
        let (store, mut bn) = setup(&cfg, 8);
        // warm the running stats with one training pass
        run(&cfg, &store, &mut bn, &random(&[4, 2, 31, 1], 9), Mode::Train, None);
        let x = random(&[3, 2, 31, 1], 10);
        let per = 2 * 31;
        let mut permuted = Vec::new();
        for b in [2, 0, 1] {
            permuted.extend_from_slice(&x.data()[b * per..(b + 1) * per]);
        }
        let xp = Tensor::new(vec![3, 2, 31, 1], permuted).unwrap();
        let a = run(&cfg, &store, &mut bn, &x, Mode::Infer, None);
        let b = run(&cfg, &store, &mut bn, &xp, Mode::Infer, None);
        let row = 3 * 3;
        for (i, src) in [2, 0, 1].into_iter().enumerate() {
            assert_eq!(&b.data()[i * row..(i + 1) * row], &a.data()[src * row..(src + 1) * row]);
        }
    }

    fn gradcheck_reduced(mode: Mode) {
        let model = ModelConfig::reduced(3, false);
        let cfg = model.gcnn.clone();
        let (store, _) = setup(&cfg, 21);
        let x = random(&[3, 2, 31, 1], 22);
        let labels = [0usize, 2, 1];
        let report = grad_check(
            store.tensors(),
            |tape, vars| {
                let p = store.bindings_from(vars);
                let mut bn = model.fresh_bn();
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let xv = tape.constant(x.clone());
                let seg = forward(&cfg, tape, &p, &mut bn, xv, mode, &mut rng, None)?;
                let y = crate::fusion::fuse_on_tape(tape, seg, None)?;
                tape.softmax_cross_entropy(y, &labels)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error());
        assert!(report.checked() > store.num_values() / 2);
    }

    #[test]
    fn reduced_backbone_gradcheck_train() {
        gradcheck_reduced(Mode::Train);
    }

    #[test]
    fn reduced_backbone_gradcheck_infer() {
        gradcheck_reduced(Mode::Infer);
    }
}
