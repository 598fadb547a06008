use loraudio::corpus::{synth_corpus, Algorithm, CorpusSpec};
use loraudio::io::{fingerprint, read_bytes};
use loraudio::lfcc::LfccConfig;
use loraudio::metrics::format_scores;
use loraudio::model::{build_model, encode_checkpoint, SENetConfig};
use loraudio::trainer::{
    evaluate, finetune, run_sequence, score_dataset, score_path, train_adapter, train_base, Dataset, Mode,
    SequencePlan, TrainConfig, SOM_ROW,
};
use loraudio::Error;

fn lfcc() -> LfccConfig {
    LfccConfig {
        target_frames: 24,
        ..Default::default()
    }
}

fn spec(algo: Algorithm, seed: u64, n: usize) -> CorpusSpec {
    CorpusSpec {
        n_bonafide: n,
        n_per_algo: n,
        algorithms: vec![algo],
        duration_s: 0.25,
        seed,
        ..Default::default()
    }
}

fn dataset(tag: &str, algo: Algorithm, seed: u64) -> Dataset {
    let c = synth_corpus(&spec(algo, seed, 16), tag).unwrap();
    Dataset::from_corpus(&c, &lfcc()).unwrap()
}

fn cfg(mode: Mode) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 2,
        seed: 3,
        mode,
        ..Default::default()
    }
}

#[test]
fn base_training_is_bitwise_reproducible() {
    let data = dataset("A", Algorithm::S2, 1);
    let init = build_model(&SENetConfig::desk(), 3).unwrap();
    let (a, oa) = train_base(&init, &data, &cfg(Mode::Lora)).unwrap();
    let (b, ob) = train_base(&init, &data, &cfg(Mode::Lora)).unwrap();
    assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
    assert_eq!(oa.epoch_losses, ob.epoch_losses);
    assert_eq!(oa.steps, 4);
    assert_ne!(encode_checkpoint(&a), encode_checkpoint(&init));
}

#[test]
fn adapter_training_leaves_base_scores_bitwise_identical() {
    let a = dataset("A", Algorithm::S2, 1);
    let b = dataset("B", Algorithm::S3, 2);
    let base = build_model(&SENetConfig::desk(), 3).unwrap();
    let bytes = encode_checkpoint(&base);
    let before = format_scores(&score_dataset(&base, None, &a, 1).unwrap());
    let (set, outcome) = train_adapter(&base, &b, &cfg(Mode::Lora)).unwrap();
    assert_eq!(outcome.steps, 4);
    assert!(set.pairs().values().any(|p| p.a.data().iter().any(|&v| v != 0.0)));
    assert_eq!(encode_checkpoint(&base), bytes);
    assert_eq!(format_scores(&score_dataset(&base, None, &a, 1).unwrap()), before);
    // Threaded evaluation splits fixed chunks, so it agrees bitwise.
    assert_eq!(format_scores(&score_dataset(&base, Some(&set), &b, 3).unwrap()), format_scores(&score_dataset(&base, Some(&set), &b, 1).unwrap()));
}

#[test]
fn literal_zero_init_stays_at_zero_for_100_steps() {
    let b = dataset("B", Algorithm::S3, 2);
    let base = build_model(&SENetConfig::desk(), 3).unwrap();
    let c = TrainConfig {
        epochs: 50,
        paper_literal_init: true,
        lr: 0.01,
        ..cfg(Mode::Lora)
    };
    let (set, outcome) = train_adapter(&base, &b, &c).unwrap();
    assert_eq!(outcome.steps, 100);
    for p in set.pairs().values() {
        assert!(p.a.data().iter().chain(p.b.data()).all(|&v| v.to_bits() == 0), "{}", p.target);
    }
}

#[test]
fn adapters_refuse_a_different_base_and_modes_are_checked() {
    let b = dataset("B", Algorithm::S3, 2);
    let base = build_model(&SENetConfig::desk(), 3).unwrap();
    let other = build_model(&SENetConfig::desk(), 4).unwrap();
    let (set, _) = train_adapter(&base, &b, &TrainConfig { epochs: 1, ..cfg(Mode::Lora) }).unwrap();
    assert!(matches!(evaluate(&other, Some(&set), &b, 1), Err(Error::FingerprintMismatch { .. })));
    assert!(train_adapter(&base, &b, &cfg(Mode::Finetune)).is_err());
    assert!(finetune(&base, &b, &cfg(Mode::Lora)).is_err());
    let (tuned, _) = finetune(&base, &b, &cfg(Mode::Finetune)).unwrap();
    assert_ne!(encode_checkpoint(&tuned), encode_checkpoint(&base));
}

#[test]
fn short_lora_sequence_writes_reports_and_keeps_the_base() {
    let corpora = [("A", Algorithm::S2), ("B", Algorithm::S3), ("C", Algorithm::S1)]
        .iter()
        .enumerate()
        .map(|(i, (t, a))| synth_corpus(&spec(*a, 10 + i as u64, 16), t).unwrap())
        .collect();
    let plan = SequencePlan {
        corpora,
        mode: Mode::Lora,
        note: "short".into(),
        train_fraction: 0.5,
    };
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig {
        batch_size: 8,
        ..cfg(Mode::Lora)
    };
    let out = run_sequence(&plan, &SENetConfig::desk(), &lfcc(), &c, dir.path(), 1).unwrap();
    assert_eq!(out.base_fingerprint_before, out.base_fingerprint_after);
    assert_eq!(out.base_fingerprint_after, fingerprint(&read_bytes(&out.base_path).unwrap()));
    assert_eq!(out.matrix.rows, ["SoM", "after-B", "after-C"]);
    assert_eq!(out.matrix.cols, ["A", "B", "C"]);
    // Corpus A is always routed to the bare base.
    let som_a = std::fs::read(score_path(dir.path(), SOM_ROW, "A")).unwrap();
    for row in ["after-B", "after-C"] {
        assert_eq!(std::fs::read(score_path(dir.path(), row, "A")).unwrap(), som_a);
        assert_eq!(out.matrix.get(row, "A"), out.matrix.get(SOM_ROW, "A"));
    }
    // C has no adapters until its own stage.
    assert_eq!(out.matrix.get("after-B", "C"), out.matrix.get(SOM_ROW, "C"));
    assert!(dir.path().join("adapters/B.fadlora").exists());
    assert!(dir.path().join("adapters/C.fadlora").exists());
    let kv = std::fs::read_to_string(&out.kv_path).unwrap();
    assert!(kv.contains("mode=lora\n") && kv.contains("note=short\n"));
    assert!(kv.contains("cell.after-C.C="));
    assert!(std::fs::read_to_string(&out.report_path).unwrap().contains("EER (%)"));
}
