//! Train/test split protocols.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::types::LabeledSample;
use super::DataError;

/// Subjects on the training side of the subject split protocol.
pub const H36M_TRAIN_SUBJECTS: [usize; 5] = [1, 5, 6, 7, 8];
/// Subjects held out for evaluation.
pub const H36M_TEST_SUBJECTS: [usize; 2] = [9, 11];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitProtocol {
    /// Subjects 1,5,6,7,8 train; 9,11 test. Other subject ids are a
    /// protocol error.
    H36mSubject,
    /// Odd-numbered subjects train, even-numbered subjects test.
    MsrHalf,
    /// Seeded 5-fold partition; `fold` selects the test fold.
    Sbu5Fold,
    /// Seeded shuffle with a 20% holdout (at least one test sample).
    RandomHoldout,
}

impl SplitProtocol {
    pub fn parse(name: &str) -> Result<Self, DataError> {
        match name {
            "h36m_subject" => Ok(Self::H36mSubject),
            "msr_half" => Ok(Self::MsrHalf),
            "sbu_5fold" => Ok(Self::Sbu5Fold),
            "random_holdout" => Ok(Self::RandomHoldout),
            other => Err(DataError::Protocol(format!("unknown protocol '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::H36mSubject => "h36m_subject",
            Self::MsrHalf => "msr_half",
            Self::Sbu5Fold => "sbu_5fold",
            Self::RandomHoldout => "random_holdout",
        }
    }
}

/// Partition samples into disjoint, covering (train, test) sets. Returned
/// samples carry split tags "train" / "test".
pub fn split_dataset(
    samples: &[LabeledSample],
    protocol: SplitProtocol,
    fold: Option<usize>,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>), DataError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    match protocol {
        SplitProtocol::H36mSubject => {
            for s in samples {
                if H36M_TRAIN_SUBJECTS.contains(&s.subject) {
                    train.push(s.tagged("train"));
                } else if H36M_TEST_SUBJECTS.contains(&s.subject) {
                    test.push(s.tagged("test"));
                } else {
                    return Err(DataError::Protocol(format!(
                        "subject {} is not part of the subject split protocol",
                        s.subject
                    )));
                }
            }
        }
        SplitProtocol::MsrHalf => {
            for s in samples {
                if s.subject % 2 == 1 {
                    train.push(s.tagged("train"));
                } else {
                    test.push(s.tagged("test"));
                }
            }
        }
        SplitProtocol::Sbu5Fold => {
            let fold = fold.ok_or_else(|| {
                DataError::Protocol("sbu_5fold requires a fold index".into())
            })?;
            if fold >= 5 {
                return Err(DataError::Protocol(format!("fold {fold} outside [0, 5)")));
            }
            let mut order: Vec<usize> = (0..samples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            for (pos, &idx) in order.iter().enumerate() {
                if pos % 5 == fold {
                    test.push(samples[idx].tagged("test"));
                } else {
                    train.push(samples[idx].tagged("train"));
                }
            }
        }
        SplitProtocol::RandomHoldout => {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            let n_test = (samples.len() / 5).max(1).min(samples.len());
            for (pos, &idx) in order.iter().enumerate() {
                if pos < n_test {
                    test.push(samples[idx].tagged("test"));
                } else {
                    train.push(samples[idx].tagged("train"));
                }
            }
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_actions, SynthConfig};

    fn synth(subjects: usize) -> Vec<LabeledSample> {
        let config = SynthConfig {
            classes: 4,
            samples_per_class: 10,
            frames_per_sequence: 4,
            joints: 5,
            num_subjects: subjects,
            ..Default::default()
        };
        generate_synthetic_actions(&config, 99).unwrap()
    }

    fn with_subjects(mut samples: Vec<LabeledSample>, subjects: &[usize]) -> Vec<LabeledSample> {
        for (i, s) in samples.iter_mut().enumerate() {
            s.subject = subjects[i % subjects.len()];
        }
        samples
    }

    #[test]
    fn h36m_puts_test_subjects_in_test() {
        let samples = with_subjects(synth(3), &[1, 5, 9]);
        let (train, test) = split_dataset(&samples, SplitProtocol::H36mSubject, None, 0).unwrap();
        assert!(test.iter().all(|s| s.subject == 9));
        assert!(train.iter().all(|s| s.subject == 1 || s.subject == 5));
        assert_eq!(train.len() + test.len(), samples.len());
    }

    #[test]
    fn h36m_unknown_subject_is_protocol_error() {
        let samples = with_subjects(synth(2), &[1, 3]);
        assert!(matches!(
            split_dataset(&samples, SplitProtocol::H36mSubject, None, 0),
            Err(DataError::Protocol(_))
        ));
    }

    #[test]
    fn msr_half_on_ten_subjects_is_near_even() {
        let samples = synth(10); // subjects 1..=10 round robin, 40 samples
        let (train, test) = split_dataset(&samples, SplitProtocol::MsrHalf, None, 0).unwrap();
        // Subjects 1,3,5,7,9 train / 2,4,6,8,10 test; round-robin makes it even.
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 20);
        assert!(train.iter().all(|s| s.subject % 2 == 1));
        assert!(test.iter().all(|s| s.subject % 2 == 0));
    }

    #[test]
    fn sbu_folds_are_disjoint_and_cover() {
        let samples = synth(7);
        let mut seen: Vec<String> = Vec::new();
        for fold in 0..5 {
            let (train, test) =
                split_dataset(&samples, SplitProtocol::Sbu5Fold, Some(fold), 42).unwrap();
            assert_eq!(train.len() + test.len(), samples.len());
            for s in &test {
                assert!(!seen.contains(&s.id), "sample {} in two test folds", s.id);
                seen.push(s.id.clone());
            }
        }
        assert_eq!(seen.len(), samples.len());
    }

    #[test]
    fn sbu_fold_out_of_range_errors() {
        let samples = synth(7);
        assert!(split_dataset(&samples, SplitProtocol::Sbu5Fold, Some(5), 0).is_err());
        assert!(split_dataset(&samples, SplitProtocol::Sbu5Fold, None, 0).is_err());
    }

    #[test]
    fn splits_are_tagged() {
        let samples = synth(10);
        let (train, test) =
            split_dataset(&samples, SplitProtocol::RandomHoldout, None, 7).unwrap();
        assert!(train.iter().all(|s| s.split_tag.as_deref() == Some("train")));
        assert!(test.iter().all(|s| s.split_tag.as_deref() == Some("test")));
    }

    #[test]
    fn random_holdout_deterministic_per_seed() {
        let samples = synth(10);
        let a = split_dataset(&samples, SplitProtocol::RandomHoldout, None, 3).unwrap();
        let b = split_dataset(&samples, SplitProtocol::RandomHoldout, None, 3).unwrap();
        assert_eq!(a, b);
    }
}
