use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::silhouette::silhouette;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::SubjectId;
use crate::model::Network;
use crate::tensor::Tensor;

pub const EMBEDDING_PATHS: [&str; 3] = ["general", "adapter", "fused"];

/// Last-hidden-layer embeddings of every trial along the three paths.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub subjects: Vec<SubjectId>,
    pub labels: Vec<usize>,
    pub general: Vec<Vec<f64>>,
    pub adapter: Vec<Vec<f64>>,
    pub fused: Vec<Vec<f64>>,
}

fn rows(t: &Tensor) -> impl Iterator<Item = Vec<f64>> + '_ {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec())
}

impl Embeddings {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.general.first().map_or(0, Vec::len)
    }

    fn path(&self, name: &str) -> &[Vec<f64>] {
        match name {
            "general" => &self.general,
            "adapter" => &self.adapter,
            _ => &self.fused,
        }
    }

    /// One row per (trial, path), trials in dataset order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,subject,label");
        for j in 0..self.dim() {
            write!(out, ",e{j}").expect("string write");
        }
        out.push('\n');
        for i in 0..self.len() {
            for name in EMBEDDING_PATHS {
                write!(out, "{name},{},{}", self.subjects[i], self.labels[i]).expect("string write");
                for v in &self.path(name)[i] {
                    write!(out, ",{v}").expect("string write");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn diagnostics(&self) -> Result<SilhouetteDiagnostics> {
        let by_subject: Vec<usize> = self.subjects.iter().map(|s| s.index()).collect();
        Ok(SilhouetteDiagnostics {
            subject_general: silhouette(&self.general, &by_subject)?,
            subject_adapter: silhouette(&self.adapter, &by_subject)?,
            subject_fused: silhouette(&self.fused, &by_subject)?,
            class_general: silhouette(&self.general, &self.labels)?,
            class_adapter: silhouette(&self.adapter, &self.labels)?,
            class_fused: silhouette(&self.fused, &self.labels)?,
        })
    }
}

/// Silhouette scores of each embedding path, clustered by subject and by class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SilhouetteDiagnostics {
    pub subject_general: f64,
    pub subject_adapter: f64,
    pub subject_fused: f64,
    pub class_general: f64,
    pub class_adapter: f64,
    pub class_fused: f64,
}

/// Taps every trial of `data` through a subject-conditioned network.
pub fn embed(net: &Network, data: &Dataset) -> Result<Embeddings> {
    let mut out = Embeddings {
        subjects: Vec::with_capacity(data.len()),
        labels: Vec::with_capacity(data.len()),
        general: Vec::with_capacity(data.len()),
        adapter: Vec::with_capacity(data.len()),
        fused: Vec::with_capacity(data.len()),
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(512) {
        let batch = data.batch(chunk)?;
        let (_, tap) = net.forward_with_taps(&batch.features, &batch.subjects)?;
        out.general.extend(rows(&tap.general));
        out.adapter.extend(rows(&tap.adapter));
        out.fused.extend(rows(&tap.fused));
        out.labels.extend(&batch.labels);
        out.subjects.extend(batch.subjects.iter().map(|s| s.expect("dataset subjects are known")));
    }
    Ok(out)
}

pub fn export_embeddings(net: &Network, data: &Dataset, path: impl AsRef<Path>) -> Result<Embeddings> {
    let emb = embed(net, data)?;
    let path = path.as_ref();
    std::fs::write(path, emb.to_csv()).map_err(|e| Error::io(path, e))?;
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::model::{build_model, ModelConfig, ModelSet};

    #[test]
    fn export_layout_at_init() {
        let spec = SyntheticSpec {
            subjects: 2,
            train_trials: 4,
            test_trials: 6,
            ..SyntheticSpec::default()
        };
        let (_, test) = gen_synthetic(&spec).unwrap();
        let cfg = ModelConfig {
            subjects: 2,
            ..ModelConfig::default()
        };
        let ModelSet::Shared(net) = build_model(&cfg).unwrap() else { unreachable!() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let emb = export_embeddings(&net, &test, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * test.len());
        assert!(lines[0].starts_with("path,subject,label,e0,e1"));
        assert!(lines[0].ends_with(",e31"));
        for l in lines.iter().skip(1).filter(|l| l.starts_with("adapter,")) {
            assert!(l.split(',').skip(3).all(|v| v.parse::<f64>().unwrap() == 0.0));
        }
        for i in 0..emb.len() {
            for j in 0..emb.dim() {
                assert!((emb.fused[i][j] - emb.general[i][j] - emb.adapter[i][j]).abs() < 1e-12);
            }
        }
    }
}
