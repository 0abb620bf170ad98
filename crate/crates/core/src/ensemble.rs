//! Two-system ensemble: a specialist re-scores the classes the main system confuses.

use crate::dataset::ClipExample;
use crate::error::{bail, Result};
use crate::fusion::{argmax, ClipPosterior, PosteriorSource, PredictionRecord};
use crate::model::SamGcnn;

/// Tolerance on `|sum - 1|` when validating posteriors.
pub const POSTERIOR_TOLERANCE: f64 = 1e-6;

/// Sorted, distinct class indices handled by the second system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusableSet(Vec<usize>);

impl Default for ConfusableSet {
    /// Absence, other, working.
    fn default() -> Self {
        Self(vec![0, 4, 8])
    }
}

impl ConfusableSet {
    pub fn new(indices: Vec<usize>, classes: usize) -> Result<Self> {
        if indices.is_empty() {
            bail!(Config, "confusable set is empty");
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "confusable set {:?} must be sorted and distinct", indices);
        }
        if indices.iter().any(|&i| i >= classes) {
            bail!(Config, "confusable set {:?} exceeds {} classes", indices, classes);
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.contains(&class)
    }
}

fn check_posterior(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        bail!(Contract, "{} has a negative or non-finite entry", what);
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > POSTERIOR_TOLERANCE {
        bail!(Contract, "{} sums to {}", what, sum);
    }
    Ok(())
}

/// Replaces the mass on the confusable classes with the second system's split of it.
///
/// If the arg-max of `x1` is outside `set`, `x1` is returned unchanged.
pub fn redistribute(x1: &[f64], x2: &[f64], set: &ConfusableSet) -> Result<Vec<f64>> {
    check_posterior(x1, "first-system posterior")?;
    check_posterior(x2, "second-system posterior")?;
    if x2.len() != set.len() {
        bail!(Shape, "second system has {} outputs for {} confusable classes", x2.len(), set.len());
    }
    if set.indices().iter().any(|&i| i >= x1.len()) {
        bail!(Shape, "confusable set {:?} exceeds {} classes", set.indices(), x1.len());
    }
    let mut y = x1.to_vec();
    if !set.contains(argmax(x1)) {
        return Ok(y);
    }
    let mass: f64 = set.indices().iter().map(|&i| x1[i]).sum();
    for (&i, &p) in set.indices().iter().zip(x2) {
        y[i] = mass * p;
    }
    Ok(y)
}

/// Anything that can produce a channel-averaged posterior for a clip.
pub trait ClipScorer {
    fn num_classes(&self) -> usize;
    fn score(&self, clip: &ClipExample) -> Result<ClipPosterior>;
}

impl ClipScorer for SamGcnn {
    fn num_classes(&self) -> usize {
        SamGcnn::num_classes(self)
    }

    fn score(&self, clip: &ClipExample) -> Result<ClipPosterior> {
        self.score_clip(clip)
    }
}

/// Checks that the two systems fit `set`.
pub fn check_systems(first: &dyn ClipScorer, second: &dyn ClipScorer, set: &ConfusableSet) -> Result<()> {
    if set.indices().iter().any(|&i| i >= first.num_classes()) {
        bail!(Config, "first system has {} classes, too few for {:?}", first.num_classes(), set.indices());
    }
    if second.num_classes() != set.len() {
        bail!(Config, "second system has {} classes but {} are confusable", second.num_classes(), set.len());
    }
    Ok(())
}

/// Scores `clip` with the first system and, only if its decision is confusable, the second.
pub fn ensemble_predict(
    clip: &ClipExample,
    first: &dyn ClipScorer,
    second: &dyn ClipScorer,
    set: &ConfusableSet,
) -> Result<PredictionRecord> {
    check_systems(first, second, set)?;
    let x1 = first.score(clip)?;
    let triggered = set.contains(x1.predicted());
    let values = if triggered {
        let x2 = second.score(clip)?;
        redistribute(&x1.values, &x2.values, set)?
    } else {
        x1.values
    };
    let posterior = ClipPosterior { clip_id: x1.clip_id, values, source: PosteriorSource::ChannelAveraged };
    let mut record = PredictionRecord::new(posterior);
    record.ensembled = Some(triggered);
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::cell::Cell;

    const HAND_X1: [f64; 9] = [0.4, 0.1, 0.05, 0.05, 0.2, 0.05, 0.03, 0.02, 0.1];

    #[test]
    fn hand_case() {
        let y = redistribute(&HAND_X1, &[0.5, 0.3, 0.2], &ConfusableSet::default()).unwrap();
        for (i, want) in [(0, 0.35), (4, 0.21), (8, 0.14)] {
            assert!((y[i] - want).abs() < 1e-12, "y[{i}] = {}", y[i]);
        }
        for i in [1, 2, 3, 5, 6, 7] {
            assert_eq!(y[i], HAND_X1[i]);
        }
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_confusable_passes_through() {
        let x1 = [0.1, 0.5, 0.05, 0.05, 0.1, 0.05, 0.05, 0.05, 0.05];
        let y = redistribute(&x1, &[0.9, 0.05, 0.05], &ConfusableSet::default()).unwrap();
        assert_eq!(y, x1.to_vec());
    }

    #[test]
    fn restricted_renormalized_is_fixed_point() {
        let s = HAND_X1[0] + HAND_X1[4] + HAND_X1[8];
        let x2 = [HAND_X1[0] / s, HAND_X1[4] / s, HAND_X1[8] / s];
        let y = redistribute(&HAND_X1, &x2, &ConfusableSet::default()).unwrap();
        for (a, b) in y.iter().zip(HAND_X1) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn malformed_posteriors_rejected() {
        let set = ConfusableSet::default();
        let mut bad = HAND_X1;
        bad[1] = -0.1;
        assert!(matches!(redistribute(&bad, &[0.5, 0.3, 0.2], &set), Err(crate::Error::Contract(_))));
        assert!(redistribute(&HAND_X1, &[0.5, 0.3, 0.3], &set).is_err());
        assert!(redistribute(&HAND_X1, &[0.5, 0.5], &set).is_err());
    }

    #[test]
    fn set_validation() {
        assert!(ConfusableSet::new(vec![0, 4, 8], 9).is_ok());
        assert!(ConfusableSet::new(vec![4, 0], 9).is_err());
        assert!(ConfusableSet::new(vec![0, 0], 9).is_err());
        assert!(ConfusableSet::new(vec![0, 9], 9).is_err());
        assert!(ConfusableSet::new(vec![], 9).is_err());
    }

    struct Fixed {
        values: Vec<f64>,
        calls: Cell<usize>,
    }

    impl Fixed {
        fn new(values: Vec<f64>) -> Self {
            Self { values, calls: Cell::new(0) }
        }
    }

    impl ClipScorer for Fixed {
        fn num_classes(&self) -> usize {
            self.values.len()
        }

        fn score(&self, clip: &ClipExample) -> Result<ClipPosterior> {
            self.calls.set(self.calls.get() + 1);
            Ok(ClipPosterior::single(clip.clip_id.clone(), self.values.clone()))
        }
    }

    fn clip() -> ClipExample {
        ClipExample { clip_id: "x".into(), label: None, channels: Vec::new() }
    }

    #[test]
    fn second_system_is_lazy() {
        let mut confident = vec![0.01; 9];
        confident[7] = 0.92;
        let first = Fixed::new(confident.clone());
        let second = Fixed::new(vec![0.2, 0.3, 0.5]);
        let rec = ensemble_predict(&clip(), &first, &second, &ConfusableSet::default()).unwrap();
        assert_eq!(second.calls.get(), 0);
        assert_eq!(rec.predicted, 7);
        assert_eq!(rec.ensembled, Some(false));
        assert_eq!(rec.posterior.values, confident);
    }

    #[test]
    fn second_system_runs_on_confusable_decision() {
        let first = Fixed::new(HAND_X1.to_vec());
        let second = Fixed::new(vec![0.1, 0.2, 0.7]);
        let rec = ensemble_predict(&clip(), &first, &second, &ConfusableSet::default()).unwrap();
        assert_eq!(second.calls.get(), 1);
        assert_eq!(rec.predicted, 8);
        assert!(rec.to_line().ends_with("ensembled:1"));
    }

    #[test]
    fn class_count_mismatch_is_config_error() {
        let first = Fixed::new(HAND_X1.to_vec());
        let second = Fixed::new(vec![0.5, 0.5]);
        let err = ensemble_predict(&clip(), &first, &second, &ConfusableSet::default()).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    fn posterior(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.into_iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn mass_is_conserved(x1 in posterior(9), x2 in posterior(3)) {
            let y = redistribute(&x1, &x2, &ConfusableSet::default()).unwrap();
            prop_assert!((y.iter().sum::<f64>() - x1.iter().sum::<f64>()).abs() < 1e-12);
            prop_assert!(y.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn outside_components_untouched(x1 in posterior(9), x2 in posterior(3)) {
            let y = redistribute(&x1, &x2, &ConfusableSet::default()).unwrap();
            for i in [1, 2, 3, 5, 6, 7] {
                prop_assert_eq!(y[i], x1[i]);
            }
        }
    }
}
