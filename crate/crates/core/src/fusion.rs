//! Attention-weighted segment fusion and multi-channel clip decisions.

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::error::{bail, Result};

/// Segment logits, `segments x classes`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentScores {
    pub segments: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl SegmentScores {
    pub fn new(segments: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != segments * classes {
            bail!(Shape, "{} values for {}x{} segment scores", values.len(), segments, classes);
        }
        Ok(Self { segments, classes, values })
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.classes..(n + 1) * self.classes]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorSource {
    SingleChannel,
    ChannelAveraged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipPosterior {
    pub clip_id: String,
    pub values: Vec<f64>,
    pub source: PosteriorSource,
}

impl ClipPosterior {
    pub fn single(clip_id: impl Into<String>, values: Vec<f64>) -> Self {
        Self { clip_id: clip_id.into(), values, source: PosteriorSource::SingleChannel }
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.values)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `Y_pre[c] = (1/N) * sum_n W[n] * X[n, c]`.
pub fn fuse_logits(x: &SegmentScores, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != x.segments {
        bail!(Shape, "{} attention weights for {} segments", w.len(), x.segments);
    }
    if x.segments == 0 {
        bail!(DegenerateInput, "no segments to fuse");
    }
    let mut y = vec![0.0; x.classes];
    for (n, &wn) in w.iter().enumerate() {
        for (yc, &xc) in y.iter_mut().zip(x.row(n)) {
            *yc += wn * xc;
        }
    }
    let inv = 1.0 / x.segments as f64;
    y.iter_mut().for_each(|v| *v *= inv);
    Ok(y)
}

/// Softmax of [`fuse_logits`].
pub fn fuse(clip_id: &str, x: &SegmentScores, w: &[f64]) -> Result<ClipPosterior> {
    let mut y = fuse_logits(x, w)?;
    softmax_in_place(&mut y);
    Ok(ClipPosterior::single(clip_id, y))
}

/// Differentiable fusion of `x: [B, N, C]` with `w: [B, N]` into `[B, C]`
/// pre-softmax scores. `None` weights every segment by 1.
pub fn fuse_on_tape(tape: &mut Tape, x: Var, w: Option<Var>) -> Result<Var> {
    let weighted = match w {
        Some(w) => tape.scale_rows(x, w)?,
        None => x,
    };
    tape.mean_axis(weighted, 1)
}

/// Averages per-channel posteriors and picks the arg-max class.
pub fn predict_clip(channels: &[ClipPosterior]) -> Result<(ClipPosterior, usize)> {
    let Some(first) = channels.first() else {
        bail!(DegenerateInput, "no channel posteriors to average");
    };
    let c = first.values.len();
    let mut mean = vec![0.0; c];
    for ch in channels {
        if ch.values.len() != c {
            bail!(Shape, "channel posteriors have {} and {} classes", c, ch.values.len());
        }
        mean.iter_mut().zip(&ch.values).for_each(|(m, v)| *m += v);
    }
    let k = channels.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    let label = argmax(&mean);
    let posterior = ClipPosterior { clip_id: first.clip_id.clone(), values: mean, source: PosteriorSource::ChannelAveraged };
    Ok((posterior, label))
}

/// `clip_id,pred,p0,...` with six decimals.
pub fn format_prediction(posterior: &ClipPosterior, predicted: usize) -> String {
    let mut line = format!("{},{}", posterior.clip_id, predicted);
    for p in &posterior.values {
        line.push_str(&format!(",{p:.6}"));
    }
    line
}

/// Final decision for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub posterior: ClipPosterior,
    pub predicted: usize,
    /// `Some` when produced by a two-system ensemble; `true` if the second system ran.
    pub ensembled: Option<bool>,
}

impl PredictionRecord {
    pub fn new(posterior: ClipPosterior) -> Self {
        let predicted = posterior.predicted();
        Self { posterior, predicted, ensembled: None }
    }

    pub fn clip_id(&self) -> &str {
        &self.posterior.clip_id
    }

    pub fn to_line(&self) -> String {
        let mut line = format_prediction(&self.posterior, self.predicted);
        if let Some(e) = self.ensembled {
            line.push_str(if e { ",ensembled:1" } else { ",ensembled:0" });
        }
        line
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn uniform_attention_constant_rows() {
        let row = [0.3, -1.2, 2.0];
        let x = SegmentScores::new(4, 3, row.repeat(4)).unwrap();
        let y = fuse("a", &x, &[1.0; 4]).unwrap();
        for (a, b) in y.values.iter().zip(softmax(&row)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_segment_selection() {
        let x = SegmentScores::new(3, 2, vec![1.0, 2.0, 5.0, -3.0, 0.5, 0.5]).unwrap();
        let y = fuse("a", &x, &[0.0, 1.0, 0.0]).unwrap();
        let want = softmax(&[5.0 / 3.0, -3.0 / 3.0]);
        for (a, b) in y.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (n, c) = (10, 9);
            let vals: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut oracle = vec![0.0; c];
            for (ci, o) in oracle.iter_mut().enumerate() {
                let mut s = 0.0;
                for ni in 0..n {
                    s += w[ni] * vals[ni * c + ci];
                }
                *o = s / n as f64;
            }
            let oracle = softmax(&oracle);
            let y = fuse("a", &SegmentScores::new(n, c, vals).unwrap(), &w).unwrap();
            for (a, b) in y.values.iter().zip(oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let x = SegmentScores::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(fuse("a", &x, &[1.0; 3]), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn predict_clip_hand_arithmetic() {
        let chans = [ClipPosterior::single("c", vec![0.6, 0.4]), ClipPosterior::single("c", vec![0.2, 0.8])];
        let (p, k) = predict_clip(&chans).unwrap();
        assert!((p.values[0] - 0.4).abs() < 1e-15 && (p.values[1] - 0.6).abs() < 1e-15);
        assert_eq!(k, 1);
        assert_eq!(p.source, PosteriorSource::ChannelAveraged);
    }

    #[test]
    fn predict_clip_identical_channels() {
        let p = ClipPosterior::single("c", vec![0.1, 0.7, 0.2]);
        let (avg, k) = predict_clip(&vec![p.clone(); 4]).unwrap();
        assert_eq!(k, 1);
        for (a, b) in avg.values.iter().zip(&p.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn predict_clip_empty_is_degenerate() {
        assert!(matches!(predict_clip(&[]), Err(crate::Error::DegenerateInput(_))));
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.5, 0.5, 0.25]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn prediction_line_format() {
        let p = ClipPosterior::single("clip7", vec![0.25, 0.75]);
        assert_eq!(format_prediction(&p, 1), "clip7,1,0.250000,0.750000");
        let mut rec = PredictionRecord::new(p);
        assert_eq!(rec.predicted, 1);
        rec.ensembled = Some(true);
        assert_eq!(rec.to_line(), "clip7,1,0.250000,0.750000,ensembled:1");
    }

    fn prob_vec(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn fuse_is_probability_vector(
            vals in prop::collection::vec(-50.0f64..50.0, 30),
            w in prop::collection::vec(0.0f64..1.0, 10),
        ) {
            let y = fuse("a", &SegmentScores::new(10, 3, vals).unwrap(), &w).unwrap();
            prop_assert!(y.values.iter().all(|&p| p >= 0.0));
            prop_assert!((y.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pre_softmax_scales_linearly_with_weights(
            vals in prop::collection::vec(-5.0f64..5.0, 20),
            w in prop::collection::vec(0.0f64..1.0, 5),
            alpha in 0.01f64..10.0,
        ) {
            let x = SegmentScores::new(5, 4, vals).unwrap();
            let base = fuse_logits(&x, &w).unwrap();
            let scaled: Vec<f64> = w.iter().map(|v| v * alpha).collect();
            let y = fuse_logits(&x, &scaled).unwrap();
            for (a, b) in y.iter().zip(&base) {
                prop_assert!((a - alpha * b).abs() <= 1e-12 * (1.0 + (alpha * b).abs()));
            }
        }

        #[test]
        fn channel_mean_sums_to_one(chans in prop::collection::vec(prob_vec(5), 1..6)) {
            let posts: Vec<ClipPosterior> = chans.into_iter().map(|v| ClipPosterior::single("c", v)).collect();
            let (p, _) = predict_clip(&posts).unwrap();
            prop_assert!((p.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn argmax_invariant_to_channel_order(chans in prop::collection::vec(prob_vec(4), 2..5), seed in any::<u64>()) {
            let posts: Vec<ClipPosterior> = chans.into_iter().map(|v| ClipPosterior::single("c", v)).collect();
            let mut shuffled = posts.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            let (pa, ka) = predict_clip(&posts).unwrap();
            let (pb, kb) = predict_clip(&shuffled).unwrap();
            // summation order can break exact ties; compare only clear winners
            let mut sorted = pa.values.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted[0] - sorted[1] > 1e-12 {
                prop_assert_eq!(ka, kb);
            }
            for (a, b) in pa.values.iter().zip(&pb.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
