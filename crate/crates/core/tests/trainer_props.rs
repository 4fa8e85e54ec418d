mod common;

use std::path::Path;

use ssmqa::dataset::ChatTemplate;
use ssmqa::ssm::ModelVariant;
use ssmqa::tensor::Scalar;
use ssmqa::trainer::{
    checkpoint_steps, load_checkpoint, optimizer_step, prepare_examples, save_checkpoint, train, Example, TrainConfig,
    TrainOutputs, TrainState,
};
use ssmqa::Error;

fn setup<T: Scalar>(n: usize, cfg: TrainConfig) -> (TrainState<T>, Vec<Example>) {
    let recs = common::records(n, 3);
    let vocab = common::vocab(&recs);
    let ex = prepare_examples(&recs, &vocab, &ChatTemplate::default(), &cfg).unwrap();
    let model = common::adapted(ModelVariant::Hybrid, vocab.len(), &cfg.lora, cfg.span_head);
    let mut state = TrainState::new(model, cfg);
    state.vocab = Some(vocab);
    state.template = Some(ChatTemplate::default());
    (state, ex)
}

fn assert_same_params<T: Scalar>(a: &TrainState<T>, b: &TrainState<T>) {
    assert_eq!(a.model.params.names(), b.model.params.names());
    for ((_, p), (_, q)) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
        assert_eq!(p.trainable, q.trainable, "{}", p.name);
    }
}

#[test]
fn accumulation_matches_one_large_batch() {
    let mut cfg = common::train_config(true);
    cfg.lora.dropout = 0.0;
    cfg.batch_size = 8;
    let (mut whole, ex) = setup::<f64>(8, cfg.clone());
    let mut split = whole.clone();
    split.config.batch_size = 2;
    split.config.accumulation_steps = 4;
    let group: Vec<&Example> = ex.iter().collect();
    let la = optimizer_step(&mut whole, &group).unwrap();
    let lb = optimizer_step(&mut split, &group).unwrap();
    assert!((la - lb).abs() < 1e-6, "{la} vs {lb}");
    let mut checked = 0;
    for ((_, p), (_, q)) in whole.model.params.iter().zip(split.model.params.iter()) {
        if p.trainable {
            assert!(p.grad.max_abs_diff(&q.grad) < 1e-6, "{}", p.name);
            assert!(p.value.max_abs_diff(&q.value) < 1e-6, "{}", p.name);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (mut state, ex) = setup::<f32>(16, common::train_config(true));
    let refs: Vec<&Example> = ex.iter().collect();
    for k in 0..3 {
        optimizer_step(&mut state, &refs[k * 4..k * 4 + 4]).unwrap();
    }
    state.cursor = 12;
    let path = dir.path().join("ck");
    save_checkpoint(&state, &path).unwrap();
    let mut back = load_checkpoint::<f32>(&path).unwrap();
    assert_same_params(&state, &back);
    assert_eq!(back.optimizer, state.optimizer);
    assert_eq!(back.config, state.config);
    assert_eq!((back.step, back.epoch, back.cursor), (3, 0, 12));
    assert_eq!(back.model.adapters, state.model.adapters);
    assert_eq!(back.vocab, state.vocab);
    assert_eq!(back.template, state.template);
    optimizer_step(&mut state, &refs[12..16]).unwrap();
    optimizer_step(&mut back, &refs[12..16]).unwrap();
    assert_same_params(&state, &back);
    assert!(load_checkpoint::<f64>(&path).is_err());
}

fn expect_checkpoint_error(path: &Path) {
    match load_checkpoint::<f32>(path) {
        Err(Error::Checkpoint(_)) => {}
        other => panic!("expected a checkpoint error, got {:?}", other.map(|s| s.step)),
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = setup::<f32>(4, common::train_config(false));
    let path = dir.path().join("ck");
    save_checkpoint(&state, &path).unwrap();

    let blob = path.join("tensors").join("embed.bin");
    let original = std::fs::read(&blob).unwrap();
    let mut flipped = original.clone();
    flipped[original.len() / 2] ^= 0x40;
    std::fs::write(&blob, &flipped).unwrap();
    expect_checkpoint_error(&path);
    std::fs::write(&blob, &original).unwrap();
    load_checkpoint::<f32>(&path).unwrap();

    let manifest = path.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["version"] = 999.into();
    std::fs::write(&manifest, json.to_string()).unwrap();
    expect_checkpoint_error(&path);
    std::fs::write(&manifest, &text).unwrap();

    std::fs::remove_file(path.join("tensors").join("layer0.in_proj.bin")).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
    assert!(load_checkpoint::<f32>(&dir.path().join("absent")).is_err());
}

#[test]
fn resuming_continues_the_schedule() {
    let mut cfg = common::train_config(true);
    cfg.epochs = 2;
    let (fresh, ex) = setup::<f32>(12, cfg);
    let mut straight = fresh.clone();
    let full = train(&mut straight, &ex, None, &TrainOutputs::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = fresh.clone();
    first.config.epochs = 1;
    train(&mut first, &ex, None, &TrainOutputs::default()).unwrap();
    save_checkpoint(&first, &dir.path().join("ck")).unwrap();
    let mut resumed = load_checkpoint::<f32>(&dir.path().join("ck")).unwrap();
    resumed.config.epochs = 2;
    let rest = train(&mut resumed, &ex, None, &TrainOutputs::default()).unwrap();

    assert_same_params(&straight, &resumed);
    assert_eq!(rest.log, full.log[3..]);
    assert_eq!(resumed.step, 6);
}

#[test]
fn checkpoint_cadence() {
    assert_eq!(checkpoint_steps(1200, 500), vec![500, 1000]);
    let mut cfg = common::train_config(false);
    cfg.epochs = 2;
    cfg.checkpoint_interval = 5;
    let (state, ex) = setup::<f32>(24, cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs {
        out_dir: Some(dir.path().to_path_buf()),
    };
    let mut run = state.clone();
    let summary = train(&mut run, &ex, None, &out).unwrap();
    let names: Vec<String> = summary
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["step-5", "step-10", "final"]);
    for p in &summary.checkpoints {
        assert!(p.join("manifest.json").exists());
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);

    let idle = tempfile::tempdir().unwrap();
    let mut none = state.clone();
    none.config.epochs = 0;
    let summary = train(
        &mut none,
        &ex,
        None,
        &TrainOutputs {
            out_dir: Some(idle.path().to_path_buf()),
        },
    )
    .unwrap();
    assert!(summary.checkpoints.is_empty() && summary.log.is_empty());
    assert_eq!(std::fs::read_dir(idle.path()).unwrap().count(), 0);
}

#[test]
fn best_checkpoint_follows_eval_loss() {
    let mut cfg = common::train_config(true);
    cfg.epochs = 2;
    cfg.eval_interval = 2;
    let (mut state, ex) = setup::<f32>(16, cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs {
        out_dir: Some(dir.path().to_path_buf()),
    };
    let summary = train(&mut state, &ex[..12], Some(&ex[12..]), &out).unwrap();
    let evals: Vec<f64> = summary.log.iter().filter_map(|r| r.eval_loss).collect();
    assert_eq!(evals.len(), 3);
    let best = evals.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(state.best_eval_loss, Some(best));
    assert!(dir.path().join("best").join("manifest.json").exists());
}

#[test]
fn loss_decreases_and_logs_repeat() {
    let mut cfg = common::train_config(true);
    cfg.epochs = 6;
    cfg.learning_rate = 1e-2;
    let (state, ex) = setup::<f32>(16, cfg);
    let mut a = state.clone();
    let mut b = state.clone();
    let sa = train(&mut a, &ex, None, &TrainOutputs::default()).unwrap();
    let sb = train(&mut b, &ex, None, &TrainOutputs::default()).unwrap();
    assert_eq!(sa.log, sb.log);
    assert_same_params(&a, &b);
    let losses = &sa.epoch_losses;
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
    let mut other = state.clone();
    other.config.seed = 9;
    let so = train(&mut other, &ex, None, &TrainOutputs::default()).unwrap();
    assert_ne!(so.log, sa.log);
}

#[test]
fn presets_and_validation() {
    assert!(TrainConfig::preset("falcon").unwrap().span_head);
    assert!(!TrainConfig::preset("mamba").unwrap().span_head);
    assert_eq!(TrainConfig::preset("zamba").unwrap().max_seq_len, 4096);
    assert!(TrainConfig::preset("gpt").is_err());
    for name in ["mamba", "mamba2", "falcon", "jamba", "zamba", "samba", "hymba"] {
        TrainConfig::preset(name).unwrap().validate().unwrap();
    }
    let base = TrainConfig::default();
    for bad in [
        TrainConfig { batch_size: 0, ..base.clone() },
        TrainConfig { learning_rate: f64::NAN, ..base.clone() },
        TrainConfig { lm_objective: false, ..base.clone() },
        TrainConfig { checkpoint_interval: 0, ..base.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
    let (mut state, _) = setup::<f32>(4, common::train_config(true));
    assert!(train(&mut state, &[], None, &TrainOutputs::default()).is_err());
}
