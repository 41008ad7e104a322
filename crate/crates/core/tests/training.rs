use ami_core::checkpoint::{load_state, save_state};
use ami_core::data::WindowBatch;
use ami_core::experiment::{prepare_splits, train_run, RunConfig};
use ami_core::fmpm::Model;
use ami_core::trainer::{
    confusion_metrics, evaluate, train_epochs, unroll, GatePolicy, PredictTarget, TrainState, UnrollOptions,
};
use ami_core::AmiError;
use ami_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const QUICK: &str = include_str!("../../../configs/quick.toml");

fn quick(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml(QUICK, &o).unwrap()
}

fn probe_logits(model: &Model, windows: &[WindowBatch]) -> Vec<Tensor> {
    let opts = UnrollOptions {
        switches: Default::default(),
        gates: GatePolicy::Controller {
            sample_tau: None,
            straight_through: false,
            cold_start_open: true,
        },
        train: false,
        weights: Default::default(),
        contrastive_tau: 0.1,
        predict_offset: 1,
        predict_target: PredictTarget::Cls,
        bank: None,
        frozen_targets: None,
        compute_loss: false,
        modality_dropout: 0.0,
    };
    let mut g = Graph::new();
    unroll(&mut g, model, windows, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().logits
}

#[test]
fn fixed_seed_retrain_is_bit_exact() {
    let cfg = quick(&["train.modality_dropout=0.1"]);
    let splits = prepare_splits(&cfg).unwrap();
    let a = train_run(&cfg, &splits, None, false).unwrap();
    let b = train_run(&cfg, &splits, None, false).unwrap();
    assert_eq!(a.state.model.params, b.state.model.params);
    assert_eq!(a.log, b.log);
    assert_eq!(a.val, b.val);
}

#[test]
fn interrupted_run_resumes_exactly() {
    let cfg = quick(&["train.epochs=3"]);
    let splits = prepare_splits(&cfg).unwrap();
    let straight = train_run(&cfg, &splits, None, false).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let model = Model::new(cfg.model_spec(&splits.train), cfg.seed).unwrap();
    let mut state = TrainState::new(model, &cfg.train);
    let mut log = Vec::new();
    train_epochs(&mut state, &splits.train, &cfg.train, &cfg.gate, cfg.seed, 2, &mut log).unwrap();
    save_state(&path, &state, &serde_json::Value::Null).unwrap();
    let (mut resumed, _) = load_state(&path).unwrap();
    train_epochs(&mut resumed, &splits.train, &cfg.train, &cfg.gate, cfg.seed, 3, &mut log).unwrap();

    assert_eq!(resumed.model.params, straight.state.model.params);
    assert_eq!(log, straight.log);
}

#[test]
fn checkpoint_round_trip_reproduces_logits() {
    let cfg = quick(&[]);
    let splits = prepare_splits(&cfg).unwrap();
    let trained = train_run(&cfg, &splits, None, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_state(&p1, &trained.state, &serde_json::json!({"seed": cfg.seed})).unwrap();
    let (loaded, _) = load_state(&p1).unwrap();
    save_state(&p2, &loaded, &serde_json::json!({"seed": cfg.seed})).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let ids: Vec<usize> = (0..4).collect();
    let probe: Vec<WindowBatch> = (0..3).map(|t| splits.test.stack(&ids, t)).collect();
    let a = probe_logits(&trained.state.model, &probe);
    let b = probe_logits(&loaded.model, &probe);
    assert_eq!(a, b);
}

#[test]
fn wrong_modality_count_names_the_field() {
    let cfg = quick(&[]);
    let splits = prepare_splits(&cfg).unwrap();
    let model = Model::new(cfg.model_spec(&splits.train), 0).unwrap();
    let other = prepare_splits(&quick(&["dataset.modalities=3"])).unwrap();
    match evaluate(&model, &other.val, &cfg.eval_options()) {
        Err(AmiError::Config { field, .. }) => assert_eq!(field, "dataset.modalities"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn task_loss_falls_over_the_first_hundred_steps() {
    let cfg = quick(&["train.epochs=20", "dataset.sequences=80", "train.batch_size=2"]);
    let splits = prepare_splits(&cfg).unwrap();
    let model = Model::new(cfg.model_spec(&splits.train), cfg.seed).unwrap();
    let mut state = TrainState::new(model, &cfg.train);
    let mut log = Vec::new();
    while log.len() < 100 {
        let next = state.epochs_done + 1;
        train_epochs(&mut state, &splits.train, &cfg.train, &cfg.gate, cfg.seed, next, &mut log).unwrap();
    }
    let mean = |rows: &[ami_core::trainer::LogRow]| rows.iter().map(|r| r.task).sum::<f64>() / rows.len() as f64;
    assert!(log[..100].iter().all(|r| r.total.is_finite()));
    let (first, last) = (mean(&log[..20]), mean(&log[80..100]));
    assert!(last < first, "task loss {first} -> {last}");
}

#[test]
fn single_window_unrolls_keep_every_gate_open() {
    let cfg = quick(&["train.bptt_window=1", "train.epochs=1", "train.ablation.sigma_delta=false"]);
    let splits = prepare_splits(&cfg).unwrap();
    let out = train_run(&cfg, &splits, None, false).unwrap();
    assert!(out.log.iter().all(|r| r.sensing_rate == 1.0 && r.gating == 0.0));
}

#[test]
fn reported_accuracy_matches_confusion_matrix() {
    let cfg = quick(&[]);
    let splits = prepare_splits(&cfg).unwrap();
    let out = train_run(&cfg, &splits, None, false).unwrap();
    let r = evaluate(&out.state.model, &splits.test, &cfg.eval_options()).unwrap();
    let total: usize = r.confusion.iter().flatten().sum();
    let correct: usize = (0..r.confusion.len()).map(|i| r.confusion[i][i]).sum();
    assert_eq!(total, r.windows);
    assert_eq!(r.accuracy, 100.0 * correct as f64 / total as f64);
    assert_eq!(confusion_metrics(&r.confusion), (r.accuracy, r.macro_f1));
    assert!((0.0..=100.0).contains(&r.modality_sensing) && (0.0..=100.0).contains(&r.patch_sensing));
}
