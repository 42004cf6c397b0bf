//! Resolution of uncertain label states into binary training targets, and
//! class-weight computation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::{LabelState, StudyRecord, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Drop every study containing any uncertain label.
    UIgnore,
    /// Map uncertain to negative.
    UZeros,
    /// Map uncertain to positive.
    UOnes,
    /// Draw a value on a 0.1-step grid in [0, 1]; positive iff >= 0.5.
    RandomizedFlip,
}

impl PolicyKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "u-ignore" => Ok(PolicyKind::UIgnore),
            "u-zeros" => Ok(PolicyKind::UZeros),
            "u-ones" => Ok(PolicyKind::UOnes),
            "randomized-flip" => Ok(PolicyKind::RandomizedFlip),
            other => Err(Error::Config(format!(
                "unknown policy {other:?} (expected u-ignore, u-zeros, u-ones, randomized-flip)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::UIgnore => "u-ignore",
            PolicyKind::UZeros => "u-zeros",
            PolicyKind::UOnes => "u-ones",
            PolicyKind::RandomizedFlip => "randomized-flip",
        }
    }
}

/// How the flip draw is distributed over [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlipDistribution {
    /// Uniform over the 11-point grid {0.0, 0.1, ..., 1.0}; P(positive) = 6/11.
    #[default]
    Grid11,
    /// Continuous uniform; P(positive) = 1/2. For sensitivity comparisons.
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Definite label carried through unchanged.
    Original,
    /// Uncertain label mapped to a definite target by the active policy.
    Flipped,
    /// Cell excluded from training (study-level drop under UIgnore).
    Excluded,
    /// Blank manifest cell treated as negative.
    UnmentionedAsNegative,
}

/// Binary targets plus a mask and per-cell provenance, aligned with the
/// record list that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLabels {
    pub targets: Tensor,
    pub mask: Tensor,
    pub provenance: Vec<[Provenance; NUM_CLASSES]>,
}

impl ResolvedLabels {
    pub fn n_studies(&self) -> usize {
        self.provenance.len()
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        &self.targets.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]
    }

    pub fn mask_row(&self, i: usize) -> &[f64] {
        &self.mask.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]
    }

    pub fn is_retained(&self, i: usize) -> bool {
        self.mask_row(i).iter().any(|&m| m == 1.0)
    }
}

/// Draw the flip variable and threshold it. Returns (draw, target).
pub fn randomized_flip(rng: &mut ChaCha8Rng, dist: FlipDistribution) -> (f64, u8) {
    let draw = match dist {
        FlipDistribution::Grid11 => rng.gen_range(0..=10) as f64 * 0.1,
        FlipDistribution::Continuous => rng.gen::<f64>(),
    };
    (draw, flip_target(draw))
}

/// Threshold rule: positive iff the drawn value reaches 0.5.
pub fn flip_target(draw: f64) -> u8 {
    u8::from(draw >= 0.5)
}

pub fn apply_policy(
    records: &[StudyRecord],
    policy: PolicyKind,
    seed: u64,
) -> Result<ResolvedLabels> {
    apply_policy_with(records, policy, seed, FlipDistribution::default())
}

pub fn apply_policy_with(
    records: &[StudyRecord],
    policy: PolicyKind,
    seed: u64,
    dist: FlipDistribution,
) -> Result<ResolvedLabels> {
    if records.is_empty() {
        return Err(Error::Config("cannot resolve labels for zero studies".into()));
    }
    let n = records.len();
    let mut targets = vec![0.0; n * NUM_CLASSES];
    let mut mask = vec![1.0; n * NUM_CLASSES];
    let mut provenance = vec![[Provenance::Original; NUM_CLASSES]; n];
    let mut rng = rng_from(seed);

    for (i, rec) in records.iter().enumerate() {
        let excluded = policy == PolicyKind::UIgnore
            && rec.labels.iter().any(|&l| l == LabelState::Uncertain);
        for (k, &label) in rec.labels.iter().enumerate() {
            let cell = i * NUM_CLASSES + k;
            if excluded {
                targets[cell] = 0.0;
                mask[cell] = 0.0;
                provenance[i][k] = Provenance::Excluded;
                continue;
            }
            let (t, p) = match label {
                LabelState::Positive => (1.0, Provenance::Original),
                LabelState::Negative => (0.0, Provenance::Original),
                LabelState::Unmentioned => (0.0, Provenance::UnmentionedAsNegative),
                LabelState::Uncertain => match policy {
                    PolicyKind::UZeros => (0.0, Provenance::Flipped),
                    PolicyKind::UOnes => (1.0, Provenance::Flipped),
                    PolicyKind::RandomizedFlip => {
                        let (_, target) = randomized_flip(&mut rng, dist);
                        (target as f64, Provenance::Flipped)
                    }
                    PolicyKind::UIgnore => unreachable!("study-level exclusion handled above"),
                },
            };
            targets[cell] = t;
            provenance[i][k] = p;
        }
    }

    Ok(ResolvedLabels {
        targets: Tensor::new(vec![n, NUM_CLASSES], targets)?,
        mask: Tensor::new(vec![n, NUM_CLASSES], mask)?,
        provenance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// w_k = count_k / total positives, the formula as printed.
    Literal,
    /// w_k = total / (K * count_k); up-weights rare classes.
    #[default]
    InverseFrequency,
}

impl WeightMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "literal" => Ok(WeightMode::Literal),
            "inverse-frequency" => Ok(WeightMode::InverseFrequency),
            other => Err(Error::Config(format!(
                "unknown weight mode {other:?} (expected literal or inverse-frequency)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w: [f64; NUM_CLASSES],
    pub mode: WeightMode,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights { w: [1.0; NUM_CLASSES], mode: WeightMode::Literal }
    }
}

/// Positive counts per class over unmasked cells.
pub fn positive_counts(resolved: &ResolvedLabels) -> [usize; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for (i, (t, m)) in resolved
        .targets
        .data()
        .iter()
        .zip(resolved.mask.data())
        .enumerate()
    {
        if *m == 1.0 && *t == 1.0 {
            counts[i % NUM_CLASSES] += 1;
        }
    }
    counts
}

pub fn compute_class_weights(resolved: &ResolvedLabels, mode: WeightMode) -> Result<ClassWeights> {
    let counts = positive_counts(resolved);
    compute_class_weights_from_counts(&counts, mode)
}

pub fn compute_class_weights_from_counts(
    counts: &[usize; NUM_CLASSES],
    mode: WeightMode,
) -> Result<ClassWeights> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Config("no positive cells to weight".into()));
    }
    let mut w = [0.0; NUM_CLASSES];
    match mode {
        WeightMode::Literal => {
            for (wk, &c) in w.iter_mut().zip(counts) {
                *wk = c as f64 / total as f64;
            }
        }
        WeightMode::InverseFrequency => {
            for (k, (wk, &c)) in w.iter_mut().zip(counts).enumerate() {
                if c == 0 {
                    return Err(Error::Config(format!(
                        "class {k} has no positives; inverse-frequency weight undefined"
                    )));
                }
                *wk = total as f64 / (NUM_CLASSES as f64 * c as f64);
            }
        }
    }
    Ok(ClassWeights { w, mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::LabelState::*;

    fn record(labels: [LabelState; NUM_CLASSES]) -> StudyRecord {
        StudyRecord {
            study_id: "s".into(),
            patient_id: "p".into(),
            frontal_path: Some("f.pgm".into()),
            lateral_path: None,
            labels,
        }
    }

    #[test]
    fn definite_labels_survive_every_policy() {
        let recs = vec![record([Positive, Negative, Positive, Negative, Positive])];
        for policy in [
            PolicyKind::UIgnore,
            PolicyKind::UZeros,
            PolicyKind::UOnes,
            PolicyKind::RandomizedFlip,
        ] {
            let r = apply_policy(&recs, policy, 1).unwrap();
            assert_eq!(r.target_row(0), &[1.0, 0.0, 1.0, 0.0, 1.0], "{policy:?}");
            assert!(r.provenance[0].iter().all(|&p| p == Provenance::Original));
        }
    }

    #[test]
    fn uzeros_and_uones_map_uncertain() {
        let recs = vec![record([Uncertain, Negative, Uncertain, Positive, Unmentioned])];
        let z = apply_policy(&recs, PolicyKind::UZeros, 0).unwrap();
        assert_eq!(z.target_row(0), &[0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(z.provenance[0][0], Provenance::Flipped);
        assert_eq!(z.provenance[0][4], Provenance::UnmentionedAsNegative);

        let o = apply_policy(&recs, PolicyKind::UOnes, 0).unwrap();
        assert_eq!(o.target_row(0), &[1.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn uignore_drops_whole_studies_with_any_uncertainty() {
        let mut recs = Vec::new();
        for i in 0..10 {
            let labels = if i < 3 {
                [Uncertain, Negative, Negative, Negative, Negative]
            } else {
                [Positive, Negative, Negative, Negative, Negative]
            };
            recs.push(record(labels));
        }
        let r = apply_policy(&recs, PolicyKind::UIgnore, 0).unwrap();
        let retained: Vec<usize> = (0..10).filter(|&i| r.is_retained(i)).collect();
        assert_eq!(retained.len(), 7);
        for i in 0..10 {
            if i < 3 {
                assert!(r.provenance[i].iter().all(|&p| p == Provenance::Excluded));
                assert!(r.mask_row(i).iter().all(|&m| m == 0.0));
            } else {
                assert!(r.mask_row(i).iter().all(|&m| m == 1.0));
                assert!(r.provenance[i].iter().all(|&p| p != Provenance::Excluded));
            }
        }
    }

    #[test]
    fn flip_threshold_is_inclusive_at_half() {
        assert_eq!(flip_target(0.5), 1);
        assert_eq!(flip_target(0.4), 0);
        assert_eq!(flip_target(1.0), 1);
        assert_eq!(flip_target(0.0), 0);
    }

    #[test]
    fn grid_draw_lands_on_tenths() {
        let mut rng = rng_from(42);
        for _ in 0..200 {
            let (draw, t) = randomized_flip(&mut rng, FlipDistribution::Grid11);
            let tenths = draw * 10.0;
            assert!((tenths - tenths.round()).abs() < 1e-12);
            assert_eq!(t, u8::from(draw >= 0.5));
        }
    }

    #[test]
    fn same_seed_same_resolution_different_seed_differs() {
        let recs: Vec<StudyRecord> = (0..50)
            .map(|_| record([Uncertain, Uncertain, Uncertain, Uncertain, Uncertain]))
            .collect();
        let a = apply_policy(&recs, PolicyKind::RandomizedFlip, 7).unwrap();
        let b = apply_policy(&recs, PolicyKind::RandomizedFlip, 7).unwrap();
        let c = apply_policy(&recs, PolicyKind::RandomizedFlip, 8).unwrap();
        assert!(a.targets.bit_eq(&b.targets));
        assert!(!a.targets.bit_eq(&c.targets));
    }

    #[test]
    fn literal_weights_reproduce_hand_ratios() {
        let counts = [10, 30, 60, 50, 50];
        let w = compute_class_weights_from_counts(&counts, WeightMode::Literal).unwrap();
        assert_eq!(w.w, [0.05, 0.15, 0.30, 0.25, 0.25]);
        assert!((w.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_frequency_matches_stated_formula() {
        let counts = [10, 30, 60, 50, 50];
        let w = compute_class_weights_from_counts(&counts, WeightMode::InverseFrequency).unwrap();
        let expect = [4.0, 200.0 / 150.0, 200.0 / 300.0, 0.8, 0.8];
        for (a, e) in w.w.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        // sum of w_k * count_k equals the total
        let total: f64 = w.w.iter().zip(counts).map(|(wk, c)| wk * c as f64).sum();
        assert!((total - 200.0).abs() < 1e-9);
    }

    #[test]
    fn equal_counts_give_equal_weights_in_both_modes() {
        let counts = [20, 20, 20, 20, 20];
        for mode in [WeightMode::Literal, WeightMode::InverseFrequency] {
            let w = compute_class_weights_from_counts(&counts, mode).unwrap();
            assert!(w.w.iter().all(|&x| (x - w.w[0]).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_count_class_rejected_in_inverse_mode() {
        let counts = [0, 10, 10, 10, 10];
        assert!(compute_class_weights_from_counts(&counts, WeightMode::InverseFrequency).is_err());
        assert!(compute_class_weights_from_counts(&counts, WeightMode::Literal).is_ok());
    }

    #[test]
    fn empty_record_list_is_an_error() {
        assert!(apply_policy(&[], PolicyKind::UZeros, 0).is_err());
    }
}
