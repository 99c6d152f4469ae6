//! Trains two identical readers on the synthetic benchmark, one with
//! background sentences packed after the passage and one without, and
//! prints their dev metrics.
//!
//! Usage: synthetic_tek [seed] [steps] [hidden] [layers] [lr]

use std::time::Instant;

use tek_core::corpus::CorpusIndex;
use tek_core::model::{EncoderConfig, ModelState};
use tek_core::packer::PackConfig;
use tek_core::retrieval::Retriever;
use tek_core::synthetic::{tek_benchmark, SyntheticConfig};
use tek_core::tokenizer::build_vocab;
use tek_core::train::{evaluate, finetune_qa, pack_records, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> tek_core::Result<()> {
    let seed: u64 = arg(1, 0);
    let steps: usize = arg(2, 1000);
    let hidden: usize = arg(3, 64);
    let layers: usize = arg(4, 2);
    let lr: f64 = arg(5, 1e-3);
    let bench = tek_benchmark(&SyntheticConfig {
        seed,
        ..Default::default()
    });
    let index = CorpusIndex::from_records(bench.corpus)?;
    let vocab = build_vocab(&index, 10_000);
    let retriever = Retriever::new(&index, &vocab);
    let model_cfg = EncoderConfig {
        layers,
        heads: 4,
        hidden,
        ffn: 2 * hidden,
        max_positions: 512,
        vocab_size: vocab.len(),
        dropout: 0.0,
    };
    let train_cfg = TrainConfig {
        seed,
        ..TrainConfig::with_steps(lr, steps, 16)
    };
    for n_b in [128, 0] {
        let pack = PackConfig::new(384, n_b, 128)?;
        let t = Instant::now();
        let train = pack_records(&bench.train, &vocab, Some(&retriever), &pack)?;
        let dev = pack_records(&bench.dev, &vocab, Some(&retriever), &pack)?;
        let examples: Vec<_> = train.iter().flat_map(|r| r.examples.clone()).collect();
        let mut model = ModelState::new(model_cfg, seed)?;
        let report = finetune_qa(&mut model, &examples, &train_cfg, None)?;
        let (train_metrics, _) = evaluate(&model, &train[..200])?;
        let (dev_metrics, _) = evaluate(&model, &dev)?;
        let tail: f64 = report.steps.iter().rev().take(50).map(|s| s.loss).sum::<f64>() / 50.0;
        println!(
            "n_b={n_b:>3} train_em={:.1} dev_em={:.1} dev_f1={:.1} final_loss={tail:.3} secs={:.1}",
            train_metrics.em,
            dev_metrics.em,
            dev_metrics.f1,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
