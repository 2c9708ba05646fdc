use msmp_core::nn::ParameterStore;
use msmp_core::runtime::CompiledModel;
use msmp_core::training::{
    evaluate, evaluate_samples, load_samples, resolve_checkpoint, train, train_samples, EpochLog, Sample, TrainConfig,
};
use msmp_core::zoo::{generate, Task, TopologyGenConfig, ROUTENET_YAML, SHORTEST_PATH_YAML};

fn dataset(task: Task, count: usize, seed: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut config = TopologyGenConfig::new(task);
    config.count = count;
    config.seed = seed;
    generate(&config, dir.path()).unwrap();
    dir
}

fn config(epochs: usize, lr: f64, group: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: lr,
        group_size: group,
        ..TrainConfig::default()
    }
}

#[test]
fn small_steps_on_one_sample_reduce_its_loss() {
    let dir = dataset(Task::Routenet, 5, 11);
    let model = CompiledModel::from_yaml(ROUTENET_YAML).unwrap();
    let one: Vec<Sample> = load_samples(&dir.path().join("train")).unwrap().into_iter().take(1).collect();
    let params = model.init_parameters(0);
    let before = evaluate_samples(&model, &params, &one).unwrap().loss;
    let report = train_samples(&model, params, &one, &[], &config(20, 1e-4, 1), &mut |_| {}).unwrap();
    assert_eq!(report.optimizer_steps, 20);
    assert_eq!(report.log[0].train_loss, before);
    let after = evaluate_samples(&model, &report.params, &one).unwrap().loss;
    assert!(after < before, "loss went from {before} to {after}");
}

fn losses(log: &[EpochLog]) -> Vec<(u64, Option<u64>)> {
    log.iter().map(|e| (e.train_loss.to_bits(), e.val_loss.map(f64::to_bits))).collect()
}

#[test]
fn identical_runs_give_identical_traces() {
    let dir = dataset(Task::ShortestPath, 20, 3);
    let model = CompiledModel::from_yaml(SHORTEST_PATH_YAML).unwrap();
    let c = TrainConfig {
        seed: 9,
        ..config(3, 3e-3, 4)
    };
    let a = train(&model, dir.path(), &c).unwrap();
    let b = train(&model, dir.path(), &c).unwrap();
    assert_eq!(losses(&a.log), losses(&b.log));
    assert_eq!(a.params, b.params);
    assert!(a.log.iter().all(|e| e.val_accuracy.is_some()));

    // A different shuffle seed changes the trajectory.
    let other = train(&model, dir.path(), &TrainConfig { seed: 10, ..c }).unwrap();
    assert_ne!(losses(&a.log), losses(&other.log));
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let dir = dataset(Task::Routenet, 10, 5);
    let ckpt = tempfile::tempdir().unwrap();
    let model = CompiledModel::from_yaml(ROUTENET_YAML).unwrap();
    let c = TrainConfig {
        checkpoint_dir: Some(ckpt.path().to_path_buf()),
        ..config(2, 1e-3, 4)
    };
    let report = train(&model, dir.path(), &c).unwrap();
    for n in 1..=2 {
        assert!(ckpt.path().join(format!("epoch_{n}.json")).is_file());
    }
    let latest = resolve_checkpoint(ckpt.path()).unwrap();
    assert_eq!(latest, ckpt.path().join("epoch_2.json"));
    assert_eq!(resolve_checkpoint(&ckpt.path().join("latest")).unwrap(), latest);

    let loaded = ParameterStore::load(&latest).unwrap();
    assert_eq!(loaded, report.params);
    let val = dir.path().join("validation");
    let direct = evaluate(&model, &report.params, &val).unwrap();
    let restored = evaluate(&model, &loaded, &val).unwrap();
    assert_eq!(direct.loss.to_bits(), restored.loss.to_bits());
    assert_eq!(direct.mre.to_bits(), restored.mre.to_bits());
    assert_eq!(direct, restored);

    let log = std::fs::read_to_string(ckpt.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "train_loss", "val_loss", "val_mre", "val_accuracy", "wall_ms"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    assert_eq!(lines[1]["epoch"], 2);
}

#[test]
fn optimizer_step_count() {
    let dir = dataset(Task::Routenet, 10, 2);
    let model = CompiledModel::from_yaml(ROUTENET_YAML).unwrap();
    let samples = load_samples(&dir.path().join("train")).unwrap();
    assert_eq!(samples.len(), 8);
    for (n, group, epochs) in [(1, 16, 1), (1, 1, 1), (8, 3, 1), (8, 3, 2), (5, 5, 3), (8, 1, 1)] {
        let set = &samples[..n];
        let report = train_samples(&model, model.init_parameters(0), set, &[], &config(epochs, 1e-3, group), &mut |_| {})
            .unwrap();
        assert_eq!(report.optimizer_steps, (n.div_ceil(group) * epochs) as u64, "n={n} group={group}");
        assert_eq!(report.log.len(), epochs);
    }
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let dir = dataset(Task::Gqnn, 10, 8);
    let model = CompiledModel::from_yaml(msmp_core::zoo::GQNN_YAML).unwrap();
    let params = model.init_parameters(4);
    let snapshot = params.clone();
    let val = dir.path().join("validation");
    let a = evaluate(&model, &params, &val).unwrap();
    let b = evaluate(&model, &params, &val).unwrap();
    assert_eq!(a, b);
    assert_eq!(params, snapshot);
    assert_eq!(a.samples, 2);
    let acc = a.accuracy.expect("binary labels");
    assert!((0.0..=1.0).contains(&acc) && a.mre >= 0.0);
}

#[test]
fn evaluate_faults() {
    let model = CompiledModel::from_yaml(ROUTENET_YAML).unwrap();
    let empty = tempfile::tempdir().unwrap();
    assert!(evaluate(&model, &model.init_parameters(0), empty.path()).is_err());

    // A bad sample is named in the fault.
    let dir = dataset(Task::Routenet, 5, 1);
    let bad = dir.path().join("train/sample_00002.json");
    let text = std::fs::read_to_string(&bad).unwrap().replace("\"capacity\"", "\"capacityx\"");
    std::fs::write(&bad, text).unwrap();
    let err = train(&model, dir.path(), &config(1, 1e-3, 2)).unwrap_err().to_string();
    assert!(err.contains("capacity") && err.contains("sample_00002.json"), "{err}");
}

#[test]
fn sample_fault_names_the_file() {
    let model = CompiledModel::from_yaml(ROUTENET_YAML).unwrap();
    let dir = dataset(Task::Routenet, 5, 1);
    let victim = dir.path().join("validation/sample_00000.json");
    // Hop positions gone: the ordered aggregation cannot sequence the links.
    let text = std::fs::read_to_string(&victim).unwrap();
    let stripped = without_positions(&text);
    assert_ne!(stripped, text);
    std::fs::write(&victim, stripped).unwrap();
    let err = evaluate(&model, &model.init_parameters(0), victim.parent().unwrap()).unwrap_err().to_string();
    assert!(err.contains("sample_00000.json"), "{err}");
}

fn without_positions(text: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    for e in v["links"].as_array_mut().unwrap() {
        e.as_object_mut().unwrap().remove("position");
    }
    v.to_string()
}

#[test]
fn config_file_overrides() {
    let mut c = TrainConfig::default();
    c.apply_yaml("epochs: 3\nlearning_rate: 0.01\ngroup_size: 2\nseed: 7\n").unwrap();
    assert_eq!((c.epochs, c.learning_rate, c.group_size, c.seed), (3, 0.01, 2, 7));
    assert!(TrainConfig::default().apply_yaml("epoch: 3\n").unwrap_err().to_string().contains("'epoch'"));
    assert!(TrainConfig::default().apply_yaml("epochs: 0\n").is_err());
    assert!(TrainConfig::default().apply_yaml("learning_rate: -1\n").is_err());
}
