use super::SubjectId;

/// Per-subject row selection for one batch.
///
/// Row `i` is selected by exactly one subject's list when its id is known and
/// below the subject count, and by none otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectMask {
    rows: Vec<Vec<usize>>,
    unrouted: Vec<usize>,
    batch: usize,
}

/// Builds the masks for `ids` over subjects `0..subject_count`.
pub fn route(ids: &[Option<SubjectId>], subject_count: usize) -> SubjectMask {
    let mut rows = vec![Vec::new(); subject_count];
    let mut unrouted = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        match id {
            Some(s) if s.index() < subject_count => rows[s.index()].push(i),
            _ => unrouted.push(i),
        }
    }
    SubjectMask {
        rows,
        unrouted,
        batch: ids.len(),
    }
}

impl SubjectMask {
    pub fn subject_count(&self) -> usize {
        self.rows.len()
    }

    pub fn batch_len(&self) -> usize {
        self.batch
    }

    pub fn rows(&self, subject: SubjectId) -> &[usize] {
        self.rows.get(subject.index()).map_or(&[], Vec::as_slice)
    }

    /// Rows that no subject selects.
    pub fn unrouted(&self) -> &[usize] {
        &self.unrouted
    }

    /// Subjects with at least one selected row, in increasing order.
    pub fn present(&self) -> impl Iterator<Item = (SubjectId, &[usize])> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_empty())
            .map(|(s, r)| (SubjectId(s as u32), r.as_slice()))
    }

    /// Diagonal of the binary mask matrix `M_s`.
    pub fn indicator(&self, subject: SubjectId) -> Vec<f64> {
        let mut out = vec![0.0; self.batch];
        for &i in self.rows(subject) {
            out[i] = 1.0;
        }
        out
    }

    /// Gathers rows per subject and scatters them back into batch order.
    pub fn reassemble<T: Clone>(&self, items: &[T]) -> Vec<Option<T>> {
        let mut out = vec![None; self.batch];
        for rows in &self.rows {
            let gathered: Vec<T> = rows.iter().map(|&i| items[i].clone()).collect();
            for (&i, v) in rows.iter().zip(gathered) {
                out[i] = Some(v);
            }
        }
        out
    }
}
