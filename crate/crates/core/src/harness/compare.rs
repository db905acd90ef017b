use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfig;
use super::embed::{embed, Embeddings, SilhouetteDiagnostics};
use super::train::{evaluate, train};
use crate::data::{gen_synthetic, oracle_accuracy, Dataset};
use crate::error::{Error, Result};
use crate::layers::{ParamCount, SubjectId};
use crate::model::{build_model, Mode, ModelSet};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub condition: Mode,
    pub seed: u64,
    pub subject: SubjectId,
    pub accuracy: f64,
    pub total_params: usize,
    pub active_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub condition: Mode,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedDiagnostics {
    pub seed: u64,
    pub silhouette: SilhouetteDiagnostics,
    pub oracle_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<Aggregate>,
    pub counts: Vec<(Mode, ParamCount)>,
    pub diagnostics: Vec<SeedDiagnostics>,
    /// Test-set embeddings of the subject-conditioned model, per seed.
    pub embeddings: Vec<(u64, Embeddings)>,
}

/// The trained model of one (condition, seed) cell and its test results.
pub struct Cell {
    pub condition: Mode,
    pub seed: u64,
    pub models: ModelSet,
    pub count: ParamCount,
    pub accuracy: BTreeMap<SubjectId, f64>,
}

pub fn model_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "model")
}

pub fn train_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "train")
}

/// Builds, trains and evaluates one condition on pre-generated data.
pub fn run_cell(run: &RunConfig, condition: Mode, seed: u64, train_set: &Dataset, test_set: &Dataset) -> Result<Cell> {
    let cfg = run.model.resolve_for(train_set, condition, model_seed(seed));
    let mut models = build_model(&cfg)?;
    train(&mut models, train_set, &run.train, train_seed(seed))?;
    let eval = evaluate(&models, test_set, false)?;
    Ok(Cell {
        condition,
        seed,
        count: models.count(cfg.subjects)?,
        accuracy: eval.per_subject.iter().map(|(&s, sc)| (s, sc.accuracy())).collect(),
        models,
    })
}

fn population_std(values: &[f64], mean: f64) -> f64 {
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Mean over seeds of each seed's subject-mean accuracy, with the
/// population standard deviation across seeds.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Aggregate> {
    let mut by: BTreeMap<Mode, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        by.entry(r.condition).or_default().entry(r.seed).or_default().push(r.accuracy);
    }
    let mut out: Vec<Aggregate> = by
        .into_iter()
        .map(|(condition, seeds)| {
            let per_seed: Vec<f64> = seeds.values().map(|a| a.iter().sum::<f64>() / a.len() as f64).collect();
            let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            Aggregate {
                condition,
                mean_accuracy: mean,
                std_accuracy: population_std(&per_seed, mean),
            }
        })
        .collect();
    let order = |m: Mode| rows.iter().position(|r| r.condition == m);
    out.sort_by_key(|a| order(a.condition));
    out
}

/// Runs every configured condition for every seed. Cells run on `run.jobs`
/// threads; results are joined in (condition, seed, subject) order so the
/// report does not depend on scheduling.
pub fn compare(run: &RunConfig) -> Result<RunReport> {
    run.validate()?;
    let data: Vec<(u64, Dataset, Dataset)> = run
        .train
        .seeds
        .iter()
        .map(|&seed| {
            let (tr, te) = gen_synthetic(&run.benchmark_for(seed))?;
            Ok((seed, tr, te))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(Mode, usize)> = run
        .conditions
        .iter()
        .flat_map(|&m| (0..data.len()).map(move |i| (m, i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells: Vec<Result<(Cell, Option<Embeddings>)>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mode, i)| {
                let (seed, tr, te) = &data[i];
                let cell = run_cell(run, mode, *seed, tr, te)?;
                let emb = match (&cell.models, mode) {
                    (ModelSet::Shared(net), Mode::SubjectConditioned) => Some(embed(net, te)?),
                    _ => None,
                };
                Ok((cell, emb))
            })
            .collect()
    });

    let mut report = RunReport {
        rows: Vec::new(),
        aggregates: Vec::new(),
        counts: Vec::new(),
        diagnostics: Vec::new(),
        embeddings: Vec::new(),
    };
    for res in cells {
        let (cell, emb) = res?;
        if !report.counts.iter().any(|(m, _)| *m == cell.condition) {
            report.counts.push((cell.condition, cell.count));
        }
        for (&subject, &accuracy) in &cell.accuracy {
            report.rows.push(ResultRow {
                condition: cell.condition,
                seed: cell.seed,
                subject,
                accuracy,
                total_params: cell.count.total(),
                active_params: cell.count.active(),
            });
        }
        if let Some(emb) = emb {
            let (_, _, test) = data.iter().find(|(s, _, _)| *s == cell.seed).expect("seed has data");
            report.diagnostics.push(SeedDiagnostics {
                seed: cell.seed,
                silhouette: emb.diagnostics()?,
                oracle_accuracy: oracle_accuracy(&run.benchmark_for(cell.seed), test)?,
            });
            report.embeddings.push((cell.seed, emb));
        }
    }
    report.aggregates = aggregate(&report.rows);
    Ok(report)
}

impl RunReport {
    pub fn mean_accuracy(&self, condition: Mode) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.condition == condition)
            .map(|a| a.mean_accuracy)
    }

    pub fn results_csv(&self) -> String {
        let mut out = String::from("condition,seed,subject,split,accuracy,total_params,active_params\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},test,{},{},{}",
                r.condition.name(),
                r.seed,
                r.subject,
                r.accuracy,
                r.total_params,
                r.active_params
            )
            .expect("string write");
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("condition,mean_accuracy,std_accuracy\n");
        for a in &self.aggregates {
            writeln!(out, "{},{},{}", a.condition.name(), a.mean_accuracy, a.std_accuracy).expect("string write");
        }
        out
    }

    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from(
            "seed,subject_general,subject_adapter,subject_fused,class_general,class_adapter,class_fused,oracle_accuracy\n",
        );
        for d in &self.diagnostics {
            let s = &d.silhouette;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                d.seed,
                s.subject_general,
                s.subject_adapter,
                s.subject_fused,
                s.class_general,
                s.class_adapter,
                s.class_fused,
                d.oracle_accuracy
            )
            .expect("string write");
        }
        out
    }

    /// Writes the report's CSV files into `dir` and returns their paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![
            ("results.csv".to_string(), self.results_csv()),
            ("aggregate.csv".to_string(), self.aggregate_csv()),
        ];
        if !self.diagnostics.is_empty() {
            files.push(("diagnostics.csv".to_string(), self.diagnostics_csv()));
        }
        for (seed, emb) in &self.embeddings {
            files.push((format!("embeddings_seed{seed}.csv"), emb.to_csv()));
        }
        let mut paths = Vec::with_capacity(files.len());
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}
