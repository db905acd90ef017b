//! Synthetic benchmark with a low-rank per-subject distortion.
//!
//! Class prototypes `μ_k ~ N(0, I_d)` are shared by all subjects. Subject `s`
//! observes `x = T_s (μ_y + ε)` with `T_s = I + γ U_s V_sᵀ`, `U_s, V_s ∈ R^{d×q}`
//! and `ε ~ N(0, σ² I)`. An optional fixed random lift maps the `d`-vector to
//! a `C×T` array shared by every subject.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split, Trial};
use crate::error::{Error, Result};
use crate::layers::SubjectId;
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Output {
    /// Features are the `d`-vector itself.
    #[default]
    Flat,
    /// Features are `L z` reshaped to `channels × samples`.
    Lifted { channels: usize, samples: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub classes: usize,
    pub latent_dim: usize,
    pub shift_rank: usize,
    pub shift_strength: f64,
    pub noise_std: f64,
    pub train_trials: usize,
    pub test_trials: usize,
    pub output: Output,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects: 6,
            classes: 4,
            latent_dim: 16,
            shift_rank: 2,
            shift_strength: 1.0,
            noise_std: 1.0,
            train_trials: 100,
            test_trials: 200,
            output: Output::Flat,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.subjects == 0 || self.classes == 0 || self.latent_dim == 0 {
            return fail("subjects, classes and latent_dim must be positive");
        }
        if self.shift_rank == 0 || self.shift_rank > self.latent_dim {
            return fail("shift_rank must be in 1..=latent_dim");
        }
        if !(self.shift_strength >= 0.0 && self.shift_strength.is_finite()) {
            return fail("shift_strength must be finite and >= 0");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and >= 0");
        }
        if self.train_trials == 0 || self.test_trials == 0 {
            return fail("trial counts must be positive");
        }
        if let Output::Lifted { channels, samples } = self.output {
            if channels == 0 || samples == 0 || channels * samples < self.latent_dim {
                return fail("lift must have channels*samples >= latent_dim");
            }
        }
        Ok(())
    }

    pub fn feature_shape(&self) -> Vec<usize> {
        match self.output {
            Output::Flat => vec![self.latent_dim],
            Output::Lifted { channels, samples } => vec![channels, samples],
        }
    }
}

/// Materialized generative parameters of a [`SyntheticSpec`].
#[derive(Clone, Debug)]
pub struct Generator {
    spec: SyntheticSpec,
    prototypes: Vec<DVector<f64>>,
    transforms: Vec<DMatrix<f64>>,
    lift: Option<DMatrix<f64>>,
}

fn gaussian_matrix(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, name);
    DMatrix::from_row_slice(rows, cols, &rng::normal_vec(&mut r, rows * cols, std))
}

impl Generator {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let (d, q) = (spec.latent_dim, spec.shift_rank);
        let prototypes = (0..spec.classes)
            .map(|k| gaussian_matrix(spec.seed, &format!("prototype.{k}"), d, 1, 1.0).column(0).into_owned())
            .collect();
        // Factor entries have variance 1/sqrt(d q).
        let factor_std = ((d * q) as f64).powf(-0.25);
        let transforms = (0..spec.subjects)
            .map(|s| {
                let u = gaussian_matrix(spec.seed, &format!("shift.{s}.u"), d, q, factor_std);
                let v = gaussian_matrix(spec.seed, &format!("shift.{s}.v"), d, q, factor_std);
                DMatrix::identity(d, d) + (u * v.transpose()) * spec.shift_strength
            })
            .collect();
        let lift = match spec.output {
            Output::Flat => None,
            Output::Lifted { channels, samples } => Some(gaussian_matrix(
                spec.seed,
                "lift",
                channels * samples,
                d,
                (1.0 / d as f64).sqrt(),
            )),
        };
        Ok(Generator {
            spec: spec.clone(),
            prototypes,
            transforms,
            lift,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn transform(&self, subject: SubjectId) -> &DMatrix<f64> {
        &self.transforms[subject.index()]
    }

    pub fn prototype(&self, class: usize) -> &DVector<f64> {
        &self.prototypes[class]
    }

    fn sample(&self, split: Split, count: usize) -> Dataset {
        let spec = &self.spec;
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unspecified => "all",
        };
        let mut trials = Vec::with_capacity(spec.subjects * count);
        for s in 0..spec.subjects {
            let mut labels: Vec<usize> = (0..count).map(|i| i % spec.classes).collect();
            labels.shuffle(&mut rng::stream(spec.seed, &format!("{tag}.{s}.labels")));
            let mut noise = rng::stream(spec.seed, &format!("{tag}.{s}.noise"));
            for label in labels {
                let eps = DVector::from_vec(rng::normal_vec(&mut noise, spec.latent_dim, spec.noise_std));
                let z = &self.transforms[s] * (&self.prototypes[label] + eps);
                let features = match &self.lift {
                    Some(l) => (l * z).as_slice().to_vec(),
                    None => z.as_slice().to_vec(),
                };
                trials.push(Trial {
                    subject: SubjectId(s as u32),
                    label,
                    features,
                });
            }
        }
        Dataset {
            shape: spec.feature_shape(),
            subjects: spec.subjects,
            classes: spec.classes,
            split,
            trials,
        }
    }

    /// Nearest-prototype accuracy after undoing the lift and each trial's
    /// subject transform.
    pub fn oracle_accuracy(&self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Input("oracle accuracy of an empty dataset".into()));
        }
        let unlift = match &self.lift {
            Some(l) => Some(
                l.clone()
                    .pseudo_inverse(1e-12)
                    .map_err(|e| Error::Input(format!("lift not invertible: {e}")))?,
            ),
            None => None,
        };
        let mut inverses = Vec::with_capacity(self.transforms.len());
        for (s, t) in self.transforms.iter().enumerate() {
            let sv = t.singular_values();
            let (max, min) = (sv.max(), sv.min());
            if min <= 1e-10 * max {
                return Err(Error::Input(format!("transform of subject {s} is numerically singular")));
            }
            inverses.push(
                t.clone()
                    .try_inverse()
                    .ok_or_else(|| Error::Input(format!("transform of subject {s} is singular")))?,
            );
        }
        let mut correct = 0usize;
        for t in &dataset.trials {
            let s = t.subject.index();
            if s >= inverses.len() {
                return Err(Error::Input(format!("subject {s} not in generator")));
            }
            let x = DVector::from_column_slice(&t.features);
            let z = match &unlift {
                Some(p) => p * x,
                None => x,
            };
            let u = &inverses[s] * z;
            let best = (0..self.prototypes.len())
                .map(|k| (k, (&u - &self.prototypes[k]).norm_squared()))
                .fold((0, f64::INFINITY), |acc, (k, d)| if d < acc.1 { (k, d) } else { acc })
                .0;
            correct += usize::from(best == t.label);
        }
        Ok(correct as f64 / dataset.len() as f64)
    }
}

/// Train and test sets drawn from independent noise streams.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let g = Generator::new(spec)?;
    Ok((g.sample(Split::Train, spec.train_trials), g.sample(Split::Test, spec.test_trials)))
}

pub fn oracle_accuracy(spec: &SyntheticSpec, dataset: &Dataset) -> Result<f64> {
    Generator::new(spec)?.oracle_accuracy(dataset)
}
