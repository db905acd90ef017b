//! Multi-subject trial collections, the synthetic benchmark and the binary
//! trial file format.

mod io;
mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::SubjectId;
use crate::tensor::Tensor;

pub use io::{decode, encode, read_dataset, write_dataset, FORMAT_VERSION, MAGIC};
pub use synthetic::{gen_synthetic, oracle_accuracy, Generator, Output, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    /// Read from a file, which does not record the split.
    Unspecified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub subject: SubjectId,
    pub label: usize,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Per-trial feature shape.
    pub shape: Vec<usize>,
    pub subjects: usize,
    pub classes: usize,
    pub split: Split,
    pub trials: Vec<Trial>,
}

/// A minibatch ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub subjects: Vec<Option<SubjectId>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.feature_len();
        for (i, t) in self.trials.iter().enumerate() {
            if t.label >= self.classes {
                return Err(Error::Input(format!("trial {i}: label {} >= {}", t.label, self.classes)));
            }
            if t.subject.index() >= self.subjects {
                return Err(Error::Input(format!("trial {i}: subject {} >= {}", t.subject, self.subjects)));
            }
            if t.features.len() != width {
                return Err(Error::Input(format!(
                    "trial {i}: {} features, shape {:?} needs {width}",
                    t.features.len(),
                    self.shape
                )));
            }
        }
        Ok(())
    }

    /// Trial count per subject present in the set.
    pub fn trials_per_subject(&self) -> BTreeMap<SubjectId, usize> {
        let mut out = BTreeMap::new();
        for t in &self.trials {
            *out.entry(t.subject).or_insert(0) += 1;
        }
        out
    }

    /// Trial count per (subject, class).
    pub fn cell_counts(&self) -> BTreeMap<(SubjectId, usize), usize> {
        let mut out = BTreeMap::new();
        for t in &self.trials {
            *out.entry((t.subject, t.label)).or_insert(0) += 1;
        }
        out
    }

    pub fn subject_ids(&self) -> Vec<SubjectId> {
        self.trials_per_subject().into_keys().collect()
    }

    pub fn filter(&self, keep: impl Fn(&Trial) -> bool) -> Dataset {
        Dataset {
            trials: self.trials.iter().filter(|t| keep(t)).cloned().collect(),
            ..self.metadata_only()
        }
    }

    pub fn of_subject(&self, subject: SubjectId) -> Dataset {
        self.filter(|t| t.subject == subject)
    }

    fn metadata_only(&self) -> Dataset {
        Dataset {
            shape: self.shape.clone(),
            subjects: self.subjects,
            classes: self.classes,
            split: self.split,
            trials: Vec::new(),
        }
    }

    /// Partitions the trials into (all other subjects, `held_out`).
    pub fn split_by_subject(&self, held_out: SubjectId) -> Result<(Dataset, Dataset)> {
        if !self.trials.iter().any(|t| t.subject == held_out) {
            return Err(Error::Input(format!("subject {held_out} not present in dataset")));
        }
        let (out, seen): (Vec<Trial>, Vec<Trial>) =
            self.trials.iter().cloned().partition(|t| t.subject == held_out);
        Ok((
            Dataset {
                trials: seen,
                ..self.metadata_only()
            },
            Dataset {
                trials: out,
                ..self.metadata_only()
            },
        ))
    }

    /// Batch of the trials at `indices`. Subjects are passed through as known.
    pub fn batch(&self, indices: &[usize]) -> Result<SubjectBatch> {
        if indices.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let width = self.feature_len();
        let mut data = Vec::with_capacity(indices.len() * width);
        let mut labels = Vec::with_capacity(indices.len());
        let mut subjects = Vec::with_capacity(indices.len());
        for &i in indices {
            let t = &self.trials[i];
            data.extend_from_slice(&t.features);
            labels.push(t.label);
            subjects.push(Some(t.subject));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.shape);
        Ok(SubjectBatch {
            features: Tensor::new(shape, data)?,
            labels,
            subjects,
        })
    }

    pub fn full_batch(&self) -> Result<SubjectBatch> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }
}

impl SubjectBatch {
    /// The same batch with every subject marked unknown.
    pub fn anonymized(mut self) -> SubjectBatch {
        self.subjects.iter_mut().for_each(|s| *s = None);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let trials = (0..9)
            .map(|i| Trial {
                subject: SubjectId(i % 3),
                label: (i / 3) as usize % 2,
                features: vec![i as f64, -(i as f64)],
            })
            .collect();
        Dataset {
            shape: vec![2],
            subjects: 3,
            classes: 2,
            split: Split::Train,
            trials,
        }
    }

    #[test]
    fn split_by_subject_partitions() {
        let d = tiny();
        let (seen, held) = d.split_by_subject(SubjectId(2)).unwrap();
        assert_eq!(seen.subject_ids(), vec![SubjectId(0), SubjectId(1)]);
        assert_eq!(held.subject_ids(), vec![SubjectId(2)]);
        assert_eq!(seen.len() + held.len(), d.len());
        let mut union: Vec<_> = seen.trials.iter().chain(&held.trials).map(|t| t.features[0] as i64).collect();
        union.sort();
        assert_eq!(union, (0..9).collect::<Vec<_>>());
        assert_eq!(seen.trials_per_subject()[&SubjectId(0)], 3);
        assert!(matches!(d.split_by_subject(SubjectId(7)), Err(Error::Input(_))));
    }

    #[test]
    fn batch_layout() {
        let d = tiny();
        let b = d.batch(&[4, 1]).unwrap();
        assert_eq!(b.features.shape(), &[2, 2]);
        assert_eq!(b.features.data(), &[4.0, -4.0, 1.0, -1.0]);
        assert_eq!(b.subjects, vec![Some(SubjectId(1)), Some(SubjectId(1))]);
        assert!(b.anonymized().subjects.iter().all(Option::is_none));
        assert!(d.batch(&[]).is_err());
    }

    #[test]
    fn validate_catches_bad_labels() {
        let mut d = tiny();
        d.validate().unwrap();
        d.trials[0].label = 5;
        assert!(d.validate().is_err());
    }
}
