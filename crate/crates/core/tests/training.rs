mod common;

use engram_ar::checkpoint::{load_checkpoint, load_optimizer, save_checkpoint};
use engram_ar::hashing::{BankVariant, TableMode};
use engram_ar::model::{EngramModel, ParamKind};
use engram_ar::tokens::{generate_range, CorpusSpec, TokenGrid};
use engram_ar::training::{train, TrainConfig, TrainOutcome};

use common::tiny;

fn corpus() -> Vec<TokenGrid> {
    let spec = CorpusSpec {
        num_classes: 4,
        grid_height: 4,
        grid_width: 4,
        vocab_size: 32,
        motif_shapes: vec![(2, 2)],
        ..CorpusSpec::default()
    };
    generate_range(&spec, 0, 64).unwrap()
}

fn short(mode: TableMode) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 4,
        total_steps: 60,
        seed: 12,
        table_mode: mode,
        log_interval: 20,
        eval_sequences: 16,
        ..TrainConfig::default()
    }
}

fn run(mode: TableMode, threads: usize) -> TrainOutcome<f32> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let data = corpus();
    pool.install(|| train::<f32>(&data, &data[..8], &tiny(BankVariant::Seq1d), &short(mode), &mut |_| {}).unwrap())
}

#[test]
fn loss_decreases() {
    let out = run(TableMode::Learned, 1);
    let first = out.curve.first().unwrap().val_ce.unwrap();
    let last = out.curve.last().unwrap().val_ce.unwrap();
    assert!(last < first - 0.3, "{first} -> {last}");
    assert_eq!(out.optimizer.step, 60);
}

#[test]
fn training_is_independent_of_thread_count() {
    let a = run(TableMode::Learned, 1);
    let b = run(TableMode::Learned, 3);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.curve, b.curve);
}

#[test]
fn frozen_tables_never_move_but_glue_does() {
    let cfg = short(TableMode::FrozenNoise);
    let mut mc = tiny(BankVariant::Seq1d);
    cfg.apply_to(&mut mc);
    let init = EngramModel::<f32>::init(mc, cfg.seed).unwrap();
    let out = run(TableMode::FrozenNoise, 2);
    let ids = init.param_ids();
    for ((id, before), after) in ids.iter().zip(init.params.leaves()).zip(out.model.params.leaves()) {
        let same = before.data().iter().zip(after.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        match id.kind {
            ParamKind::Table => assert!(same, "{} moved", id.name),
            ParamKind::Matrix | ParamKind::LayerScale | ParamKind::Conv => assert!(!same, "{} stuck", id.name),
            _ => {}
        }
    }
}

#[test]
fn checkpoints_are_byte_deterministic_and_resume() {
    let a = run(TableMode::Learned, 1);
    let b = run(TableMode::Learned, 2);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_checkpoint(da.path(), &a.model, 60, 12, Some(&a.optimizer), serde_json::Value::Null).unwrap();
    save_checkpoint(db.path(), &b.model, 60, 12, Some(&b.optimizer), serde_json::Value::Null).unwrap();
    for f in ["manifest.json", "tensors.bin", "optimizer.bin"] {
        assert_eq!(std::fs::read(da.path().join(f)).unwrap(), std::fs::read(db.path().join(f)).unwrap(), "{f}");
    }
    let (model, manifest) = load_checkpoint::<f32>(da.path()).unwrap();
    assert_eq!(model.params, a.model.params);
    assert_eq!(manifest.step, 60);
    let opt = load_optimizer(da.path(), &model).unwrap().unwrap();
    assert_eq!(opt, a.optimizer);
}
