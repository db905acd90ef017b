use serde::Serialize;

use crate::error::{Error, Result};

/// Parameter bookkeeping in the shared-plus-per-subject form.
///
/// `total` counts every stored parameter; `active` counts the parameters one
/// subject's sample touches (shared weights plus that subject's adapters).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub shared: usize,
    pub per_subject: usize,
    pub subjects: usize,
}

impl ParamCount {
    pub fn shared_only(shared: usize) -> Self {
        ParamCount {
            shared,
            per_subject: 0,
            subjects: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.shared + self.subjects * self.per_subject
    }

    pub fn active(&self) -> usize {
        self.shared + self.per_subject
    }

    /// Recovers the per-subject size from reported shared and total counts.
    pub fn from_totals(shared: usize, total: usize, subjects: usize) -> Result<Self> {
        if subjects == 0 || total < shared || (total - shared) % subjects != 0 {
            return Err(Error::Input(format!(
                "total {total} is not shared {shared} plus {subjects} equal adapter blocks"
            )));
        }
        Ok(ParamCount {
            shared,
            per_subject: (total - shared) / subjects,
            subjects,
        })
    }

    /// Sum of two layer counts. Layers with adapters must agree on the
    /// subject count.
    pub fn merge(self, other: ParamCount) -> Result<Self> {
        let subjects = match (self.per_subject, other.per_subject) {
            (0, _) => other.subjects.max(self.subjects),
            (_, 0) => self.subjects.max(other.subjects),
            _ if self.subjects == other.subjects => self.subjects,
            _ => {
                return Err(Error::Config(format!(
                    "layers disagree on subject count: {} vs {}",
                    self.subjects, other.subjects
                )))
            }
        };
        Ok(ParamCount {
            shared: self.shared + other.shared,
            per_subject: self.per_subject + other.per_subject,
            subjects,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reported_architectures_decompose() {
        let eegnex = ParamCount::from_totals(55_972, 134_884, 9).unwrap();
        assert_eq!(eegnex.per_subject, 8_768);
        assert_eq!(eegnex.active(), 64_740);
        let pbt = ParamCount::from_totals(867_460, 1_480_612, 9).unwrap();
        assert_eq!(pbt.per_subject, 68_128);
        assert_eq!(pbt.active(), 935_588);
        assert!(ParamCount::from_totals(10, 21, 2).is_err());
    }

    #[test]
    fn hand_count_for_small_layer() {
        // m=4, n=3, r=2, N=5, no bias
        let c = ParamCount {
            shared: 12,
            per_subject: 2 * (4 + 3),
            subjects: 5,
        };
        assert_eq!(c.total(), 82);
        assert_eq!(c.active(), 26);
    }

    #[test]
    fn merge_requires_consistent_subjects() {
        let a = ParamCount { shared: 3, per_subject: 2, subjects: 4 };
        let b = ParamCount::shared_only(5);
        assert_eq!(a.merge(b).unwrap(), ParamCount { shared: 8, per_subject: 2, subjects: 4 });
        let c = ParamCount { shared: 0, per_subject: 1, subjects: 3 };
        assert!(a.merge(c).is_err());
    }
}
