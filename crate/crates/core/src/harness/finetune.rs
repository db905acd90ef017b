use serde::Serialize;
use sha2::{Digest, Sha256};

use super::compare::{model_seed, train_seed};
use super::config::RunConfig;
use super::train::{evaluate, train_model, TrainConfig};
use crate::data::{gen_synthetic, Dataset};
use crate::error::{Error, Result};
use crate::layers::SubjectId;
use crate::model::{build_model, Mode, ModelSet, Network};
use crate::rng;
use crate::tensor::Param;

/// SHA-256 over parameter names, shapes and value bits, in the given order.
pub fn param_digest<'a>(params: impl IntoIterator<Item = &'a Param>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        h.update([0]);
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_except(net: &Network, subject: SubjectId) -> String {
    let marker = format!(".adapter.{subject}.");
    param_digest(net.params().into_iter().filter(|p| !p.name.contains(&marker)))
}

/// Adds adapters for `subject` and trains only them on `data`; every other
/// parameter is left bit-identical. Returns the loss history.
pub fn finetune_new_subject(
    net: &mut Network,
    subject: SubjectId,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.trials.iter().any(|t| t.subject != subject) {
        return Err(Error::Input(format!("fine-tuning data must contain only subject {subject}")));
    }
    net.add_subject(subject, rng::derive_seed(seed, "adapter"))?;
    net.train_only_subject(subject);
    let history = train_model(net, data, cfg, seed);
    net.unfreeze_all();
    history
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeldOutReport {
    pub seed: u64,
    pub subject: SubjectId,
    pub fallback_accuracy: f64,
    pub finetuned_accuracy: f64,
    /// Fallback logits equal those of the model with every adapter zeroed.
    pub fallback_matches_zeroed: bool,
    /// Digest of all parameters other than the new adapter, unchanged by fine-tuning.
    pub frozen_unchanged: bool,
    pub digest_before: String,
    pub digest_after: String,
}

/// Trains a subject-conditioned model without the last subject, then
/// compares its shared-path fallback on that subject against a fine-tuned
/// adapter.
pub fn held_out_workflow(run: &RunConfig, seed: u64) -> Result<HeldOutReport> {
    run.validate()?;
    let spec = run.benchmark_for(seed);
    if spec.subjects < 2 {
        return Err(Error::Config("held-out workflow needs at least two subjects".into()));
    }
    let held = SubjectId((spec.subjects - 1) as u32);
    let (train_all, test_all) = gen_synthetic(&spec)?;
    let (seen_train, held_train) = train_all.split_by_subject(held)?;
    let (_, held_test) = test_all.split_by_subject(held)?;

    let mut cfg = run.model.resolve(&spec, Mode::SubjectConditioned, model_seed(seed));
    cfg.subjects -= 1;
    let ModelSet::Shared(mut net) = build_model(&cfg)? else {
        unreachable!("subject-conditioned models are shared")
    };
    super::train::train_model(&mut net, &seen_train, &run.train, train_seed(seed))?;

    let batch = held_test.full_batch()?.anonymized();
    let fallback = net.logits(&batch.features, &batch.subjects)?;
    let mut zeroed = net.clone();
    zeroed.zero_adapters();
    let as_seen = vec![Some(SubjectId(0)); batch.subjects.len()];
    let zeroed_logits = zeroed.logits(&batch.features, &as_seen)?;
    let bits = |t: &crate::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let fallback_matches_zeroed = bits(&fallback) == bits(&zeroed_logits);

    let mut set = ModelSet::Shared(net);
    let fallback_accuracy = evaluate(&set, &held_test, true)?.overall();
    let ModelSet::Shared(net) = &mut set else { unreachable!() };

    let n = run.finetune_trials.min(held_train.len());
    let tune = Dataset {
        trials: held_train.trials[..n].to_vec(),
        ..held_train.clone()
    };
    let digest_before = digest_except(net, held);
    finetune_new_subject(net, held, &tune, &run.train, rng::derive_seed(seed, "finetune"))?;
    let digest_after = digest_except(net, held);
    let finetuned_accuracy = evaluate(&set, &held_test, false)?.overall();

    Ok(HeldOutReport {
        seed,
        subject: held,
        fallback_accuracy,
        finetuned_accuracy,
        fallback_matches_zeroed,
        frozen_unchanged: digest_before == digest_after,
        digest_before,
        digest_after,
    })
}
