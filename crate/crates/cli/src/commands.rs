use std::fs;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tek_core::corpus::{load_corpus, CorpusIndex};
use tek_core::model::{load_checkpoint, save_checkpoint, ModelState};
use tek_core::packer::{fit_backgrounds, PackConfig, QaRecord};
use tek_core::retrieval::{Background, PretrainBackground, Retriever};
use tek_core::synthetic::tek_benchmark;
use tek_core::tokenizer::{build_vocab, encode, Vocab};
use tek_core::train::{
    ablate, ablation_configs, ablation_table, evaluate, finetune_qa, mask_inputs, pack_records, predict, pretrain,
    pretrain_inputs, TrainConfig,
};

use crate::args::{Cli, Command, CorpusArgs, MaskArgs, ModeArg, ModelArgs, PackArgs, TrainArgs};
use crate::config::{apply, Mode, RunConfig};
use crate::manifest::{hash_file, sha256_hex, InputEntry, Manifest};
use crate::{stage, CliError, VERSION};

const DEFAULT_OUT: &str = "tek-out";

/// Per-invocation state: effective configuration, recorded inputs and
/// outputs.
struct Run {
    command: &'static str,
    cfg: RunConfig,
    inputs: Vec<InputEntry>,
    outputs: Vec<String>,
    out_explicit: bool,
}

impl Run {
    fn out_dir(&self) -> PathBuf {
        self.cfg.paths.out.clone().unwrap_or_else(|| DEFAULT_OUT.into())
    }

    fn require(&mut self, flag: &'static str, path: Option<PathBuf>) -> Result<PathBuf, CliError> {
        let path = path.ok_or_else(|| CliError::Usage(format!("missing required flag {flag}")))?;
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "{flag}: path does not exist: {}",
                path.display()
            )));
        }
        let sha256 = hash_file(&path)?;
        self.inputs.push(InputEntry {
            flag: flag.to_string(),
            path: path.clone(),
            sha256,
        });
        Ok(path)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.out_dir().join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(stage("write-output"))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::Stage {
            stage: "write-output",
            message: format!("{}: {e}", path.display()),
        })?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut buf, &r).map_err(stage("write-output"))?;
            buf.push(b'\n');
        }
        self.write(name, &buf)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(stage("write-output"))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn save_model(&mut self, name: &str, model: &ModelState) -> Result<(), CliError> {
        let path = self.out_dir().join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(stage("write-output"))?;
        }
        save_checkpoint(model, &path).map_err(stage("write-output"))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    /// Writes the effective config and the manifest.
    fn finish(mut self) -> Result<(), CliError> {
        if self.outputs.is_empty() && !self.out_explicit {
            return Ok(());
        }
        let config = self.cfg.to_toml();
        self.write("config.toml", config.as_bytes())?;
        let manifest = Manifest {
            command: self.command.to_string(),
            version: VERSION.to_string(),
            seed: self.cfg.seed,
            config_file: "config.toml".into(),
            config_sha256: sha256_hex(config.as_bytes()),
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
        };
        self.write_json("manifest.json", &manifest)
    }
}

fn apply_corpus(cfg: &mut RunConfig, a: &CorpusArgs) {
    apply!(cfg.paths.corpus, a.corpus.as_ref().map(|p| Some(p.clone())));
    apply!(cfg.vocab_size, a.vocab_size);
}

fn apply_pack(cfg: &mut RunConfig, a: &PackArgs) -> Result<(), CliError> {
    apply!(cfg.pack.n_c, a.nc);
    apply!(cfg.pack.n_b, a.nb);
    apply!(cfg.pack.stride, a.stride);
    match a.total_len {
        Some(t) => cfg.pack.total_len = t,
        None if a.nc.is_some() || a.nb.is_some() => cfg.pack.total_len = cfg.pack.n_c + cfg.pack.n_b,
        None => {}
    }
    cfg.pack
        .validate()
        .map_err(|e| CliError::Usage(format!("pack configuration: {e}")))
}

fn apply_mask(cfg: &mut RunConfig, a: &MaskArgs) -> Result<(), CliError> {
    apply!(cfg.mask.mask_rate, a.rate);
    apply!(cfg.mask.geom_p, a.geom_p);
    apply!(cfg.mask.max_span, a.max_span);
    cfg.mask
        .validate()
        .map_err(|e| CliError::Usage(format!("mask configuration: {e}")))
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) -> Result<(), CliError> {
    if let Some(steps) = a.steps {
        cfg.train.total_steps = steps;
        cfg.train.warmup_steps = steps / 20;
    }
    apply!(cfg.train.warmup_steps, a.warmup);
    apply!(cfg.train.epochs, a.epochs.map(Some));
    apply!(cfg.train.batch_size, a.batch_size);
    apply!(cfg.train.peak_lr, a.lr);
    apply!(cfg.train.checkpoint_every, a.checkpoint_every);
    cfg.train
        .validate()
        .map_err(|e| CliError::Usage(format!("train configuration: {e}")))
}

fn apply_model(cfg: &mut RunConfig, a: &ModelArgs) -> Result<(), CliError> {
    apply!(cfg.model.layers, a.layers);
    apply!(cfg.model.heads, a.heads);
    apply!(cfg.model.hidden, a.hidden);
    apply!(cfg.model.ffn, a.ffn);
    apply!(cfg.model.dropout, a.dropout);
    apply!(cfg.paths.init, a.init.as_ref().map(|p| Some(p.clone())));
    cfg.model
        .encoder(tek_core::tokenizer::NUM_SPECIAL)
        .validate()
        .map_err(|e| CliError::Usage(format!("model configuration: {e}")))
}

fn mode(m: Mode) -> ModeArg {
    match m {
        Mode::Qa => ModeArg::Qa,
        Mode::Pretrain => ModeArg::Pretrain,
    }
}

fn to_mode(m: ModeArg) -> Mode {
    match m {
        ModeArg::Qa => Mode::Qa,
        ModeArg::Pretrain => Mode::Pretrain,
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "--config: path does not exist: {}",
                    path.display()
                )));
            }
            RunConfig::load(path).map_err(|e| CliError::Usage(format!("--config: {e}")))?
        }
        None => RunConfig::default(),
    };
    apply!(cfg.seed, cli.seed);
    apply!(cfg.threads, cli.threads.map(|t| Some(t as usize)));
    apply!(cfg.paths.out, cli.out.as_ref().map(|p| Some(p.clone())));
    if let Some(n) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    let command = match &cli.command {
        Command::Ingest(_) => "ingest",
        Command::Retrieve(_) => "retrieve",
        Command::Pack(_) => "pack",
        Command::Mask(_) => "mask",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::Predict(_) => "predict",
        Command::Evaluate(_) => "evaluate",
        Command::Ablate(_) => "ablate",
        Command::Synth(_) => "synth",
    };
    let mut run = Run {
        command,
        cfg,
        inputs: Vec::new(),
        outputs: Vec::new(),
        out_explicit: cli.out.is_some(),
    };
    let cfg = &mut run.cfg;
    match &cli.command {
        Command::Ingest(a) => apply_corpus(cfg, a),
        Command::Retrieve(a) => {
            apply_corpus(cfg, &a.corpus);
            apply!(cfg.retrieve.mode, a.mode.map(to_mode));
            apply!(cfg.retrieve.budget, a.budget);
        }
        Command::Pack(a) => {
            apply_corpus(cfg, &a.corpus);
            apply!(cfg.paths.dataset, a.dataset.as_ref().map(|p| Some(p.clone())));
            apply!(cfg.retrieve.mode, a.mode.map(to_mode));
            apply_pack(cfg, &a.pack)?;
        }
        Command::Mask(a) => {
            apply_corpus(cfg, &a.corpus);
            apply_pack(cfg, &a.pack)?;
            apply_mask(cfg, &a.mask)?;
        }
        Command::Pretrain(a) => {
            apply_corpus(cfg, &a.corpus);
            apply_pack(cfg, &a.pack)?;
            apply_mask(cfg, &a.mask)?;
            apply_train(cfg, &a.train)?;
            apply_model(cfg, &a.model)?;
        }
        Command::Finetune(a) => {
            apply_corpus(cfg, &a.corpus);
            apply!(cfg.paths.dataset, a.dataset.as_ref().map(|p| Some(p.clone())));
            apply_pack(cfg, &a.pack)?;
            apply_train(cfg, &a.train)?;
            apply_model(cfg, &a.model)?;
        }
        Command::Predict(a) | Command::Evaluate(a) => {
            apply_corpus(cfg, &a.corpus);
            apply!(cfg.paths.dataset, a.dataset.as_ref().map(|p| Some(p.clone())));
            apply!(cfg.paths.checkpoint, a.checkpoint.as_ref().map(|p| Some(p.clone())));
            apply_pack(cfg, &a.pack)?;
        }
        Command::Ablate(a) => {
            apply_corpus(cfg, &a.corpus);
            apply!(cfg.paths.dataset, a.dataset.as_ref().map(|p| Some(p.clone())));
            apply!(cfg.paths.checkpoint, a.checkpoint.as_ref().map(|p| Some(p.clone())));
            apply!(cfg.pack.stride, a.stride);
        }
        Command::Synth(a) => {
            apply!(cfg.synth.train_entities, a.train_entities);
            apply!(cfg.synth.dev_entities, a.dev_entities);
            apply!(cfg.synth.train_questions, a.train_questions);
            apply!(cfg.synth.dev_questions, a.dev_questions);
            apply!(cfg.synth.candidates, a.candidates);
            if !(2..=tek_core::synthetic::ROLES.len()).contains(&cfg.synth.candidates) {
                return Err(CliError::Usage(format!(
                    "--candidates must be between 2 and {}",
                    tek_core::synthetic::ROLES.len()
                )));
            }
        }
    }
    run.cfg = std::mem::take(&mut run.cfg).seeded();
    match cli.command {
        Command::Ingest(_) => ingest(&mut run)?,
        Command::Retrieve(_) => retrieve(&mut run)?,
        Command::Pack(_) => pack(&mut run)?,
        Command::Mask(_) => mask(&mut run)?,
        Command::Pretrain(_) => run_pretrain(&mut run)?,
        Command::Finetune(_) => finetune(&mut run)?,
        Command::Predict(_) => run_predict(&mut run, false)?,
        Command::Evaluate(_) => run_predict(&mut run, true)?,
        Command::Ablate(_) => run_ablate(&mut run)?,
        Command::Synth(_) => synth(&mut run)?,
    }
    run.finish()
}

fn load_index(run: &mut Run) -> Result<(CorpusIndex, Vocab), CliError> {
    let path = run.require("--corpus", run.cfg.paths.corpus.clone())?;
    let index = load_corpus(&path).map_err(stage("load-corpus"))?;
    if index.stats.dangling_mentions > 0 {
        log::warn!(
            "{} dangling hyperlinks kept but never scored",
            index.stats.dangling_mentions
        );
    }
    let vocab = build_vocab(&index, run.cfg.vocab_size);
    Ok((index, vocab))
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{what} line {}: {e}", i + 1)))
        .collect()
}

fn load_dataset(run: &mut Run) -> Result<Vec<QaRecord>, CliError> {
    let path = run.require("--dataset", run.cfg.paths.dataset.clone())?;
    let text = fs::read_to_string(&path).map_err(stage("load-dataset"))?;
    parse_jsonl(&text, &path.display().to_string()).map_err(stage("load-dataset"))
}

fn load_model(run: &mut Run, flag: &'static str, path: Option<PathBuf>, vocab: &Vocab) -> Result<ModelState, CliError> {
    let path = run.require(flag, path)?;
    let model = load_checkpoint(&path).map_err(stage("load-checkpoint"))?;
    if model.config().vocab_size != vocab.len() {
        return Err(CliError::Stage {
            stage: "load-checkpoint",
            message: format!(
                "checkpoint vocabulary size {} does not match the corpus vocabulary size {} (check --vocab-size)",
                model.config().vocab_size,
                vocab.len()
            ),
        });
    }
    Ok(model)
}

fn ingest(run: &mut Run) -> Result<(), CliError> {
    let (index, vocab) = load_index(run)?;
    let json = index.to_json().map_err(stage("ingest"))?;
    run.write("index.json", json.as_bytes())?;
    run.write("vocab.txt", vocab.to_text().as_bytes())?;
    let stats = serde_json::json!({ "stats": index.stats, "vocab_size": vocab.len() });
    run.write_json("stats.json", &stats)?;
    println!("{}", serde_json::to_string(&stats).map_err(stage("ingest"))?);
    Ok(())
}

#[derive(Deserialize)]
struct PretrainQuery {
    page_id: String,
}

#[derive(Serialize)]
struct QaRetrieval<'a> {
    qid: &'a str,
    backgrounds: Vec<Background>,
    skipped: usize,
    used: usize,
}

#[derive(Serialize)]
struct BlockRetrieval<'a> {
    page_id: &'a str,
    start: usize,
    background: PretrainBackground,
}

fn retrieve(run: &mut Run) -> Result<(), CliError> {
    let (index, vocab) = load_index(run)?;
    let retriever = Retriever::new(&index, &vocab);
    let budget = run.cfg.retrieve.budget;
    let block_len = run.cfg.pack.n_c.saturating_sub(2).max(1);
    let stdin = io::stdin();
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    for (i, line) in stdin.lock().lines().enumerate() {
        let line = line.map_err(stage("retrieve"))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad_line = |e: serde_json::Error| CliError::Stage {
            stage: "retrieve",
            message: format!("stdin line {}: {e}", i + 1),
        };
        let text = match mode(run.cfg.retrieve.mode) {
            ModeArg::Qa => {
                let rec: QaRecord = serde_json::from_str(&line).map_err(bad_line)?;
                let q = encode(&rec.question, &vocab);
                let query = retriever.qa_query(&rec.question, &q.ids, &rec.context);
                let ranked = retriever.rank_backgrounds(&query, &rec.passage_refs);
                let fit = fit_backgrounds(&ranked, budget);
                let row = QaRetrieval {
                    qid: &rec.qid,
                    backgrounds: fit.selected.iter().map(|&k| ranked[k].clone()).collect(),
                    skipped: fit.skipped,
                    used: fit.used,
                };
                serde_json::to_string(&row).map_err(stage("retrieve"))?
            }
            ModeArg::Pretrain => {
                let q: PretrainQuery = serde_json::from_str(&line).map_err(bad_line)?;
                if !index.contains(&q.page_id) {
                    return Err(CliError::Stage {
                        stage: "retrieve",
                        message: format!("stdin line {}: unknown page_id {:?}", i + 1, q.page_id),
                    });
                }
                let rows: Vec<String> = retriever
                    .page_blocks(&q.page_id, block_len)
                    .iter()
                    .map(|b| {
                        serde_json::to_string(&BlockRetrieval {
                            page_id: &b.page_id,
                            start: b.start,
                            background: retriever.retrieve_pretrain_background(b, budget),
                        })
                    })
                    .collect::<Result<_, _>>()
                    .map_err(stage("retrieve"))?;
                rows.join("\n")
            }
        };
        if !text.is_empty() {
            writeln!(out, "{text}").map_err(stage("retrieve"))?;
        }
    }
    out.flush().map_err(stage("retrieve"))
}

fn retriever_for<'a>(pack: &PackConfig, r: &'a Retriever<'a>) -> Option<&'a Retriever<'a>> {
    (pack.n_b > 0).then_some(r)
}

fn pack(run: &mut Run) -> Result<(), CliError> {
    let (index, vocab) = load_index(run)?;
    let retriever = Retriever::new(&index, &vocab);
    let cfg = run.cfg.pack;
    match mode(run.cfg.retrieve.mode) {
        ModeArg::Qa => {
            let records = load_dataset(run)?;
            let packed =
                pack_records(&records, &vocab, retriever_for(&cfg, &retriever), &cfg).map_err(stage("pack"))?;
            run.write_jsonl("packed.jsonl", packed.iter().flat_map(|r| &r.examples))
        }
        ModeArg::Pretrain => {
            let inputs = pretrain_inputs(&retriever, &cfg).map_err(stage("pack"))?;
            run.write_jsonl("packed.jsonl", &inputs)
        }
    }
}

fn mask(run: &mut Run) -> Result<(), CliError> {
    let (index, vocab) = load_index(run)?;
    let retriever = Retriever::new(&index, &vocab);
    let inputs = pretrain_inputs(&retriever, &run.cfg.pack).map_err(stage("pack"))?;
    let masked = mask_inputs(&inputs, &run.cfg.mask, vocab.len()).map_err(stage("mask"))?;
    run.write_jsonl("masked.jsonl", &masked)
}

fn init_model(run: &mut Run, vocab: &Vocab) -> Result<ModelState, CliError> {
    match run.cfg.paths.init.clone() {
        Some(p) => load_model(run, "--init", Some(p), vocab),
        None => {
            let c = run.cfg.model.encoder(vocab.len());
            if run.cfg.pack.total_len > c.max_positions {
                return Err(CliError::Usage(format!(
                    "total length {} exceeds max_positions {}",
                    run.cfg.pack.total_len, c.max_positions
                )));
            }
            ModelState::new(c, run.cfg.seed).map_err(|e| CliError::Usage(format!("model configuration: {e}")))
        }
    }
}

fn train_with_checkpoints(
    run: &mut Run,
    stage_name: &'static str,
    train_fn: impl FnOnce(
        &mut ModelState,
        &TrainConfig,
        &mut dyn FnMut(usize, &ModelState) -> tek_core::Result<()>,
    ) -> tek_core::Result<tek_core::train::TrainReport>,
    mut model: ModelState,
) -> Result<(), CliError> {
    let out = run.out_dir();
    let every = run.cfg.train.checkpoint_every;
    let total = run.cfg.train.total_steps;
    let mut written = Vec::new();
    let mut cb = |step: usize, m: &ModelState| -> tek_core::Result<()> {
        if every > 0 && step != total {
            let name = format!("checkpoints/step-{step:06}.ckpt");
            let path = out.join(&name);
            fs::create_dir_all(path.parent().expect("has parent"))
                .map_err(|e| tek_core::Error::Checkpoint(e.to_string()))?;
            save_checkpoint(m, &path)?;
            written.push(name);
        }
        Ok(())
    };
    let cfg = run.cfg.train;
    let report = train_fn(&mut model, &cfg, &mut cb).map_err(stage(stage_name))?;
    run.outputs.extend(written);
    run.save_model("model.ckpt", &model)?;
    run.write("train_log.csv", report.to_csv().as_bytes())?;
    if let Some(last) = report.steps.last() {
        log::info!(
            "{stage_name}: {} steps, final loss {:.4}",
            report.steps.len(),
            last.loss
        );
    }
    Ok(())
}

fn run_pretrain(run: &mut Run) -> Result<(), CliError> {
    let (index, vocab) = load_index(run)?;
    let retriever = Retriever::new(&index, &vocab);
    let inputs = pretrain_inputs(&retriever, &run.cfg.pack).map_err(stage("pack"))?;
    let masked = mask_inputs(&inputs, &run.cfg.mask, vocab.len()).map_err(stage("mask"))?;
    let model = init_model(run, &vocab)?;
    train_with_checkpoints(run, "pretrain", |m, cfg, cb| pretrain(m, &masked, cfg, Some(cb)), model)
}

fn finetune(run: &mut Run) -> Result<(), CliError> {
    let (index, vocab) = load_index(run)?;
    let retriever = Retriever::new(&index, &vocab);
    let records = load_dataset(run)?;
    let pack = run.cfg.pack;
    let packed = pack_records(&records, &vocab, retriever_for(&pack, &retriever), &pack).map_err(stage("pack"))?;
    let examples: Vec<_> = packed.into_iter().flat_map(|r| r.examples).collect();
    let model = init_model(run, &vocab)?;
    if let Some(e) = run.cfg.train.epochs {
        run.cfg.train = run.cfg.train.for_examples(examples.len());
        log::info!("{e} epochs = {} steps", run.cfg.train.total_steps);
    }
    train_with_checkpoints(
        run,
        "finetune",
        |m, cfg, cb| finetune_qa(m, &examples, cfg, Some(cb)),
        model,
    )
}

fn run_predict(run: &mut Run, score: bool) -> Result<(), CliError> {
    let (index, vocab) = load_index(run)?;
    let retriever = Retriever::new(&index, &vocab);
    let records = load_dataset(run)?;
    let model = load_model(run, "--checkpoint", run.cfg.paths.checkpoint.clone(), &vocab)?;
    let pack = run.cfg.pack;
    let packed = pack_records(&records, &vocab, retriever_for(&pack, &retriever), &pack).map_err(stage("pack"))?;
    if score {
        let (report, preds) = evaluate(&model, &packed).map_err(stage("evaluate"))?;
        run.write_jsonl("predictions.jsonl", &preds)?;
        run.write_json("metrics.json", &report)?;
        println!(
            "{}",
            serde_json::json!({ "em": report.em, "f1": report.f1, "n": report.n })
        );
    } else {
        let preds = predict(&model, &packed).map_err(stage("predict"))?;
        run.write_jsonl("predictions.jsonl", &preds)?;
    }
    Ok(())
}

fn run_ablate(run: &mut Run) -> Result<(), CliError> {
    let (index, vocab) = load_index(run)?;
    let retriever = Retriever::new(&index, &vocab);
    let records = load_dataset(run)?;
    let model = load_model(run, "--checkpoint", run.cfg.paths.checkpoint.clone(), &vocab)?;
    let configs = ablation_configs(run.cfg.pack.stride).map_err(|e| CliError::Usage(format!("--stride: {e}")))?;
    let rows = ablate(&model, &records, &vocab, Some(&retriever), &configs).map_err(stage("ablate"))?;
    let table = ablation_table(&rows);
    run.write_json("ablation.json", &rows)?;
    run.write("ablation.md", table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn synth(run: &mut Run) -> Result<(), CliError> {
    let bench = tek_benchmark(&run.cfg.synth);
    run.write_jsonl("corpus.jsonl", &bench.corpus)?;
    run.write_jsonl("train.jsonl", &bench.train)?;
    run.write_jsonl("dev.jsonl", &bench.dev)?;
    Ok(())
}
