use tek_core::corpus::{parse_corpus_jsonl, CorpusIndex};
use tek_core::masking::MaskConfig;
use tek_core::model::{load_checkpoint, save_checkpoint, EncoderConfig, ModelState};
use tek_core::packer::PackConfig;
use tek_core::retrieval::Retriever;
use tek_core::synthetic::{tek_benchmark, SyntheticConfig};
use tek_core::tokenizer::{build_vocab, is_special, MASK};
use tek_core::train::{evaluate, finetune_qa, mask_inputs, pack_records, pretrain, pretrain_inputs, TrainConfig};

fn small_bench() -> tek_core::synthetic::SyntheticBenchmark {
    tek_benchmark(&SyntheticConfig {
        train_entities: 30,
        dev_entities: 12,
        train_questions: 40,
        dev_questions: 10,
        ..Default::default()
    })
}

#[test]
fn corpus_survives_jsonl_round_trip() {
    let bench = small_bench();
    let text: String = bench
        .corpus
        .iter()
        .map(|p| serde_json::to_string(p).unwrap() + "\n")
        .collect();
    let parsed = parse_corpus_jsonl(&text).unwrap();
    let direct = CorpusIndex::from_records(bench.corpus).unwrap();
    assert_eq!(parsed, direct);
    let reloaded = CorpusIndex::from_json(&direct.to_json().unwrap()).unwrap();
    assert_eq!(reloaded.pages, direct.pages);
    assert_eq!(reloaded.alias_dict, direct.alias_dict);
}

#[test]
fn pretrain_then_finetune_then_evaluate() {
    let bench = small_bench();
    let index = CorpusIndex::from_records(bench.corpus).unwrap();
    let vocab = build_vocab(&index, 5000);
    let retriever = Retriever::new(&index, &vocab);

    let pack = PackConfig::new(64, 64, 32).unwrap();
    let inputs = pretrain_inputs(&retriever, &pack).unwrap();
    assert_eq!(inputs.len(), index.pages.len());
    assert!(inputs.iter().all(|p| p.check_invariants(&pack).is_ok()));
    assert!(inputs.iter().any(|p| !p.regions.backgrounds.is_empty()));
    let masked = mask_inputs(&inputs, &MaskConfig::default(), vocab.len()).unwrap();
    for (m, p) in masked.iter().zip(&inputs) {
        assert!(m.mask_positions.iter().all(|&i| !is_special(p.ids[i])));
    }
    assert!(masked.iter().any(|m| m.input_ids.contains(&MASK)));

    let cfg = EncoderConfig {
        layers: 1,
        heads: 2,
        hidden: 16,
        ffn: 32,
        max_positions: 128,
        vocab_size: vocab.len(),
        dropout: 0.1,
    };
    let mut model = ModelState::new(cfg, 1).unwrap();
    let report = pretrain(&mut model, &masked, &TrainConfig::with_steps(1e-3, 20, 4), None).unwrap();
    assert_eq!(report.steps.len(), 20);

    let train = pack_records(&bench.train, &vocab, Some(&retriever), &pack).unwrap();
    let dev = pack_records(&bench.dev, &vocab, Some(&retriever), &pack).unwrap();
    let examples: Vec<_> = train.iter().flat_map(|r| r.examples.clone()).collect();
    let tc = TrainConfig {
        epochs: Some(1),
        ..TrainConfig::with_steps(1e-3, 0, 8)
    };
    let report = finetune_qa(&mut model, &examples, &tc, None).unwrap();
    assert_eq!(report.steps.len(), examples.len().div_ceil(8));

    // Checkpoints store f32; round first so the reload is exact.
    for v in model.params_mut() {
        *v = *v as f32 as f64;
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let (m1, p1) = evaluate(&model, &dev).unwrap();
    let (m2, _) = evaluate(&loaded, &dev).unwrap();
    assert_eq!(m1.n, 10);
    assert_eq!(p1.len(), 10);
    assert!((0.0..=100.0).contains(&m1.em) && m1.em <= m1.f1 + 1e-9);
    assert_eq!(loaded.params(), model.params());
    assert_eq!(m1, m2);
}
