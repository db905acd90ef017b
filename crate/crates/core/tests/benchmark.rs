use subcond_core::data::{gen_synthetic, oracle_accuracy, read_dataset, write_dataset, SyntheticSpec};
use subcond_core::harness::{evaluate, linear_probe_accuracy, score, TrainConfig};
use subcond_core::model::{build_model, ModelConfig, Mode};

#[test]
fn oracle_reference_constant() {
    // d = 16, K = 4, sigma = 1.0, seed 1, 200 test trials for each of 6 subjects.
    let spec = SyntheticSpec::default();
    let (_, test) = gen_synthetic(&spec).unwrap();
    assert_eq!(oracle_accuracy(&spec, &test).unwrap(), 1192.0 / 1200.0);
}

#[test]
fn pooled_linear_probe_degrades_with_shift() {
    let mean = |gamma: f64| {
        [1u64, 2, 3]
            .iter()
            .map(|&seed| {
                let spec = SyntheticSpec {
                    shift_strength: gamma,
                    seed,
                    ..SyntheticSpec::default()
                };
                let (train, test) = gen_synthetic(&spec).unwrap();
                linear_probe_accuracy(&train, &test, &TrainConfig::default(), seed).unwrap()
            })
            .sum::<f64>()
            / 3.0
    };
    let (flat, shifted) = (mean(0.0), mean(2.0));
    assert!(shifted <= flat, "gamma 2: {shifted}, gamma 0: {flat}");
}

#[test]
fn untrained_models_are_at_chance_on_average() {
    // The head's class outputs are exchangeable under the initial weight
    // distribution, so accuracy averaged over initializations is 1/K.
    let spec = SyntheticSpec::default();
    let (_, test) = gen_synthetic(&spec).unwrap();
    let seeds = 40;
    let mut total = 0.0;
    for seed in 0..seeds {
        let models = build_model(&ModelConfig {
            mode: Mode::Agnostic,
            seed,
            ..ModelConfig::default()
        })
        .unwrap();
        let eval = evaluate(&models, &test, false).unwrap();
        assert!(eval.per_subject.values().all(|s| s.total == 200));
        total += eval.overall();
    }
    let mean = total / seeds as f64;
    assert!((mean - 0.25).abs() < 0.05, "{mean}");
}

#[test]
fn label_predictions_score_one() {
    let (train, _) = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let labels: Vec<usize> = train.trials.iter().map(|t| t.label).collect();
    let eval = score(&train, &labels);
    assert!(eval.per_subject.values().all(|s| s.accuracy() == 1.0));
    assert_eq!(eval.overall(), 1.0);
}

#[test]
fn written_files_reload_identically() {
    let spec = SyntheticSpec {
        output: subcond_core::data::Output::Lifted { channels: 4, samples: 32 },
        ..SyntheticSpec::default()
    };
    let (train, test) = gen_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, d) in [("train", &train), ("test", &test)] {
        let path = dir.path().join(name);
        write_dataset(d, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.trials, d.trials);
        assert_eq!((back.shape.clone(), back.subjects, back.classes), (vec![4, 32], 6, 4));
    }
}
