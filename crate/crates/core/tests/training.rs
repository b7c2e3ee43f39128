use dtss::checkpoint::Checkpoint;
use dtss::data::{synthetic, Dataset, SyntheticConfig};
use dtss::model::{Model, ModelConfig};
use dtss::train::{evaluate, train_loop, TrainConfig, METRICS_HEADER};

fn data() -> (Dataset, Dataset) {
    let cfg = SyntheticConfig {
        samples_per_class: 6,
        ..SyntheticConfig::default()
    };
    let train = synthetic(&cfg, 1, "train").unwrap();
    let eval = synthetic(
        &SyntheticConfig {
            samples_per_class: 3,
            ..cfg
        },
        1,
        "eval",
    )
    .unwrap();
    (train, eval)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        t_init: Some(2),
        lambda_m: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_leaves_model_untouched() {
    let (train, eval) = data();
    let mut model = Model::build(&ModelConfig::default(), 2, 5).unwrap();
    let before: Vec<Vec<f32>> = model
        .params()
        .iter()
        .map(|p| p.value.data().to_vec())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let st = train_loop(&mut model, &train, &eval, &cfg(0), Some(dir.path())).unwrap();
    assert_eq!(st.epochs_run, 0);
    assert!(st.history.is_empty());
    assert_eq!(st.best_epoch, None);
    assert_eq!(st.metrics_csv().trim_end(), METRICS_HEADER);
    let after: Vec<Vec<f32>> = model
        .params()
        .iter()
        .map(|p| p.value.data().to_vec())
        .collect();
    assert_eq!(before, after);
    assert!(!dir.path().join("best.ckpt").exists());
}

#[test]
fn runs_are_reproducible_and_best_checkpoint_restores() {
    let (train, eval) = data();
    let mut csvs = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let mut best = 0.0;
    for run in 0..2 {
        let mut model = Model::build(&ModelConfig::default(), 2, 5).unwrap();
        let out = dir.path().join(format!("run{run}"));
        let st = train_loop(&mut model, &train, &eval, &cfg(2), Some(&out)).unwrap();
        best = st.best_eval_acc;
        let on_disk = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(on_disk, st.metrics_csv());
        csvs.push(on_disk);
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0].lines().count(), 3);

    let path = dir.path().join("run0/best.ckpt");
    let mut fresh = Model::build(&ModelConfig::default(), 2, 99).unwrap();
    Checkpoint::load(&path)
        .unwrap()
        .restore(&mut fresh, &path)
        .unwrap();
    assert_eq!(evaluate(&fresh, &eval, 100).unwrap().accuracy, best);
}

#[test]
fn checkpoint_bytes_survive_a_round_trip() {
    let (train, eval) = data();
    let mut model = Model::build(&ModelConfig::default(), 2, 5).unwrap();
    let st = train_loop(&mut model, &train, &eval, &cfg(1), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let ck = Checkpoint::from_model(&model, Some(&st.optimizer));
    ck.save(&a).unwrap();

    let mut other = Model::build(&ModelConfig::default(), 2, 7).unwrap();
    let mut opt = dtss::train::optimizer_for(&other, &cfg(1));
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.restore(&mut other, &a).unwrap();
    assert!(loaded.restore_optimizer(&other, &mut opt).unwrap());
    Checkpoint::from_model(&other, Some(&opt)).save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
