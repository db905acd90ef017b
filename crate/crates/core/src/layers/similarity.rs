use super::conv::composed_kernel;
use super::{SubjectConditionedConv, SubjectConditionedLinear, SubjectId};
use crate::tensor::Tensor;

/// Layers that hold one low-rank correction per subject.
pub trait AdapterBank {
    /// Effective scaled correction of every subject, in subject order.
    fn corrections(&self) -> Vec<(SubjectId, Tensor)>;
}

impl AdapterBank for SubjectConditionedLinear {
    fn corrections(&self) -> Vec<(SubjectId, Tensor)> {
        let scale = self.low_rank.scale();
        self.adapters()
            .iter()
            .map(|(&s, ad)| {
                let a = &ad.a.value;
                let b = &ad.b.value;
                let (n, r, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    for k in 0..r {
                        let w = a.data()[i * r + k] * scale;
                        for j in 0..m {
                            out[i * m + j] += w * b.data()[k * m + j];
                        }
                    }
                }
                (s, Tensor::new(vec![n, m], out).expect("correction shape"))
            })
            .collect()
    }
}

impl AdapterBank for SubjectConditionedConv {
    fn corrections(&self) -> Vec<(SubjectId, Tensor)> {
        let scale = self.low_rank.scale();
        self.adapters()
            .iter()
            .map(|(&s, ad)| (s, composed_kernel(ad, scale)))
            .collect()
    }
}

/// Pairwise Frobenius cosine of the tensors. Pairs involving a zero tensor
/// score 0, including a zero tensor with itself.
pub fn cosine_similarity_matrix(items: &[Tensor]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = items.iter().map(|t| t.dot(t).sqrt()).collect();
    let n = items.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                (items[i].dot(&items[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    out
}

/// Similarity of the subjects' effective corrections.
pub fn adapter_similarity(layer: &(impl AdapterBank + ?Sized)) -> (Vec<SubjectId>, Vec<Vec<f64>>) {
    let (ids, mats): (Vec<_>, Vec<_>) = layer.corrections().into_iter().unzip();
    let sim = cosine_similarity_matrix(&mats);
    (ids, sim)
}
