use crpsrft_core::backbone::BackboneConfig;
use crpsrft_core::dynamics::{generate, SystemSpec, TrajectoryDataset};
use crpsrft_core::evaluation::{evaluate_model, paired_improvement, EvalConfig, MetricsReport};
use crpsrft_core::model::ModelBundle;
use crpsrft_core::modulation::NoiseBranchConfig;
use crpsrft_core::training::{retrofit_crps, train_deterministic, TrainConfig};

fn small_data() -> TrajectoryDataset {
    let spec = SystemSpec {
        n_trajectories: 30,
        t_steps: 20,
        ..SystemSpec::preset("lorenz96").unwrap()
    };
    generate(&spec, None).unwrap()
}

fn short(loss: &str) -> TrainConfig {
    TrainConfig {
        loss: loss.into(),
        epochs: 2,
        steps_per_epoch: 5,
        warmup_epochs: 0,
        cooldown_epochs: 0,
        val_windows: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn public_pipeline_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data();
    let data_path = dir.path().join("d.bin");
    data.write(&data_path).unwrap();
    let data = TrajectoryDataset::read(&data_path).unwrap();

    let bb = BackboneConfig {
        hidden_dim: 8,
        n_blocks: 2,
        ..BackboneConfig::default()
    };
    let (det, log) = train_deterministic(&data, &bb, &short("mae"), "det".into()).unwrap();
    assert_eq!(log.epochs.len(), 3);
    let (prob, _) = retrofit_crps(&det, &NoiseBranchConfig::default(), &data, &short("fair_crps"), "rf".into()).unwrap();

    let ckpt = dir.path().join("rf.ckpt");
    prob.save(&ckpt).unwrap();
    let loaded = ModelBundle::load(&ckpt).unwrap();
    assert_eq!(loaded, prob);
    assert_eq!(loaded.config_hash, "rf");

    let cfg = EvalConfig {
        members: 4,
        horizon: Some(8),
        n_boot: 20,
        ..EvalConfig::default()
    };
    let a = evaluate_model(&loaded, &data, &cfg).unwrap();
    let b = evaluate_model(&det, &data, &cfg).unwrap();
    assert_eq!(a.len(), data.splits().test.len());
    assert!(a.iter().all(|r| r.members == 4) && b.iter().all(|r| r.members == 1));

    let ra = MetricsReport::build(a, "h", data.config_hash(), "rf", 8, 20, 0).unwrap();
    let rb = MetricsReport::build(b, "h", data.config_hash(), "det", 8, 20, 0).unwrap();
    assert_eq!(MetricsReport::from_json(&ra.to_json()).unwrap(), ra);
    let imp = paired_improvement(&rb.paired_values("fcrps"), &ra.paired_values("fcrps"), 20, 0).unwrap();
    assert!(imp.interval.median.is_finite());
    assert_eq!(imp.samples.len(), 20);
}
