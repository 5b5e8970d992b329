use std::fs;
use std::path::Path;

use aes_core::checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint};
use aes_core::corpus::{grade_histogram, load_corpus, split_corpus, Corpus, CorpusFormat, SplitSpec};
use aes_core::metrics::{bin_score, evaluate};
use aes_core::model::{forward, init_model, scale_weights, Mode};
use aes_core::seed::derive_seed;
use aes_core::tokenizer::{build_vocab, encode_pair, Vocab};
use aes_core::training::{denormalize, grad_check, normalize, train, FdPrecision, GradCheckOptions, TrainConfig};
use aes_core::{AesError, DType, ModelConfig, ParamStore, Scalar, TokenizedInput, COMPETENCIES};
use anyhow::{bail, Result};
use log::info;
use serde::Serialize;
use serde_json::Value;

use crate::args::*;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Stats(a) => stats(a),
        Command::Split(a) => split(a, cli.seed),
        Command::BuildVocab(a) => build_vocab_cmd(a),
        Command::Train(a) => match cli.precision {
            DType::F32 => train_cmd::<f32>(a, cli.seed),
            DType::F64 => train_cmd::<f64>(a, cli.seed),
        },
        Command::Eval(a) => match checkpoint_dtype(&a.checkpoint)? {
            DType::F32 => eval_cmd::<f32>(a),
            DType::F64 => eval_cmd::<f64>(a),
        },
        Command::Score(a) => match checkpoint_dtype(&a.checkpoint)? {
            DType::F32 => score_cmd::<f32>(a),
            DType::F64 => score_cmd::<f64>(a),
        },
        Command::GradCheck(a) => {
            let dtype = match &a.checkpoint {
                Some(path) => checkpoint_dtype(path)?,
                None => cli.precision,
            };
            match dtype {
                DType::F32 => grad_check_cmd::<f32>(a, cli.seed),
                DType::F64 => grad_check_cmd::<f64>(a, cli.seed),
            }
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| AesError::io(path, e))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path).map_err(|e| AesError::io(path, e))?)
}

fn corpus(path: &Path, format: FormatArg) -> Result<Corpus> {
    let format = match format {
        FormatArg::Auto => CorpusFormat::from_path(path),
        FormatArg::Jsonl => CorpusFormat::Jsonl,
        FormatArg::Csv => CorpusFormat::Csv,
    };
    let corpus = load_corpus(path, format)?;
    info!("loaded {} records from {}", corpus.len(), path.display());
    Ok(corpus)
}

/// A preset name, or a JSON file whose missing `vocab_size` is filled from
/// the vocabulary.
fn model_config(spec: &str, vocab_size: usize) -> Result<ModelConfig> {
    if let Some(cfg) = ModelConfig::preset(spec, vocab_size) {
        return Ok(cfg);
    }
    let path = Path::new(spec);
    let mut value: Value = serde_json::from_str(&read_text(path)?)
        .map_err(|e| AesError::InvalidConfig(format!("{}: {e}", path.display())))?;
    if let Value::Object(map) = &mut value {
        map.entry("vocab_size").or_insert(vocab_size.into());
    }
    let cfg: ModelConfig = serde_json::from_value(value)
        .map_err(|e| AesError::InvalidConfig(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    if cfg.vocab_size != vocab_size {
        return Err(AesError::InvalidConfig(format!(
            "model config has vocab_size {} but the vocabulary has {vocab_size} tokens",
            cfg.vocab_size
        ))
        .into());
    }
    Ok(cfg)
}

fn stats(a: &StatsArgs) -> Result<()> {
    let corpus = corpus(&a.input, a.format)?;
    info!("{} essays, {} prompts", corpus.len(), corpus.prompt_count());
    let csv = grade_histogram(&corpus).to_csv();
    match &a.output {
        Some(path) => write_file(path, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SplitManifest {
    seed: u64,
    split_seed: u64,
    ratios: [f64; 3],
    counts: [usize; 3],
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn split(a: &SplitArgs, seed: u64) -> Result<()> {
    let corpus = corpus(&a.input, a.format)?;
    let [tr, va, te] = a.ratios.0;
    let split_seed = derive_seed(seed, "split");
    let spec = SplitSpec::new(tr, va, te, split_seed)?;
    let parts = split_corpus(&corpus, &spec)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| AesError::io(&a.out_dir, e))?;
    for (name, part) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        part.write_jsonl(&a.out_dir.join(format!("{name}.jsonl")))?;
    }
    let ids = |c: &Corpus| -> Vec<String> { c.records().iter().map(|r| r.id.clone()).collect() };
    let manifest = SplitManifest {
        seed,
        split_seed,
        ratios: a.ratios.0,
        counts: [parts.train.len(), parts.val.len(), parts.test.len()],
        train: ids(&parts.train),
        val: ids(&parts.val),
        test: ids(&parts.test),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&a.out_dir.join("split.json"), json + "\n")?;
    info!("split sizes {:?}", manifest.counts);
    Ok(())
}

fn build_vocab_cmd(a: &BuildVocabArgs) -> Result<()> {
    let corpus = corpus(&a.input, a.format)?;
    let vocab = build_vocab(&corpus, a.size, a.min_freq)?;
    if vocab.len() < a.size {
        info!("corpus supports only {} of the requested {} tokens", vocab.len(), a.size);
    }
    vocab.save(&a.output)?;
    info!("wrote {} tokens to {}", vocab.len(), a.output.display());
    Ok(())
}

fn train_cmd<T: Scalar>(a: &TrainArgs, seed: u64) -> Result<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let train_set = corpus(&a.train, a.format)?;
    let val_set = corpus(&a.val, a.format)?;
    let cfg = model_config(&a.model_config, vocab.len())?;
    info!("model: {}", serde_json::to_string(&cfg)?);
    let params = init_model::<T>(&cfg, derive_seed(seed, "init"))?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        warmup_steps: a.warmup_steps,
        grad_clip_norm: a.grad_clip,
        max_len: a.max_len,
        shuffle_seed: derive_seed(seed, "shuffle"),
        dropout_seed: derive_seed(seed, "dropout"),
        ..TrainConfig::default()
    };
    let (params, history) = train(params, &train_set, &val_set, &vocab, &cfg, &tc)?;
    save_checkpoint(&params, &cfg, &a.out_checkpoint)?;
    write_file(&a.history_out, history.to_csv())?;
    info!(
        "wrote {} and {}",
        a.out_checkpoint.display(),
        a.history_out.display()
    );
    Ok(())
}

fn eval_cmd<T: Scalar>(a: &EvalArgs) -> Result<()> {
    let (params, cfg) = load_checkpoint::<T>(&a.checkpoint)?;
    let vocab = Vocab::load(&a.vocab)?;
    let data = corpus(&a.data, a.format)?;
    let max_len = a.max_len.unwrap_or(cfg.max_positions);
    let report = evaluate(&params, &vocab, &cfg, &data, max_len)?;
    if let Some(path) = &a.report_out {
        write_file(path, report.to_csv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn score_cmd<T: Scalar>(a: &ScoreArgs) -> Result<()> {
    let (params, cfg) = load_checkpoint::<T>(&a.checkpoint)?;
    let vocab = Vocab::load(&a.vocab)?;
    let prompt = read_text(&a.prompt_file)?;
    let essay = read_text(&a.essay_file)?;
    let max_len = a.max_len.unwrap_or(cfg.max_positions);
    let input = encode_pair(prompt.trim(), essay.trim(), &vocab, max_len)?;
    let out = forward(&params, &cfg, &[&input], Mode::Eval, 0)?;
    let points = denormalize(&out.predictions[0].map(T::as_f64));
    let mut grades = [0u32; COMPETENCIES];
    for (g, &p) in grades.iter_mut().zip(&points) {
        *g = bin_score(p)?;
    }
    info!("raw points {points:.2?}");
    println!("c1,c2,c3,c4,c5,total");
    let cells: Vec<String> = grades.iter().map(u32::to_string).collect();
    println!("{},{}", cells.join(","), grades.iter().sum::<u32>());
    Ok(())
}

fn grad_check_cmd<T: Scalar>(a: &GradCheckArgs, seed: u64) -> Result<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let data = corpus(&a.data, a.format)?;
    let (mut params, cfg): (ParamStore<T>, ModelConfig) = match &a.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let cfg = model_config(&a.model_config, vocab.len())?;
            (init_model(&cfg, derive_seed(seed, "init"))?, cfg)
        }
    };
    if a.weight_scale != 1.0 {
        scale_weights(&mut params, a.weight_scale);
    }
    if a.batch_size == 0 {
        bail!(AesError::InvalidConfig("batch_size must be positive".into()));
    }
    let records = &data.records()[..a.batch_size.min(data.len())];
    let inputs = records
        .iter()
        .map(|r| {
            let (p, e) = r.compose_pair();
            encode_pair(p, e, &vocab, a.max_len)
        })
        .collect::<aes_core::Result<Vec<TokenizedInput>>>()?;
    let batch: Vec<&TokenizedInput> = inputs.iter().collect();
    let targets: Vec<[T; COMPETENCIES]> = records
        .iter()
        .map(|r| normalize(&r.scores).map(T::lit))
        .collect();
    let opts = GradCheckOptions {
        epsilon: a.epsilon,
        sample: a.sample,
        seed: derive_seed(seed, "grad-check"),
        only: (!a.only.is_empty()).then(|| a.only.clone()),
        exclude: a.exclude.clone(),
        reference: match a.fd_precision {
            FdArg::Native => FdPrecision::Native,
            FdArg::F64 => FdPrecision::F64,
        },
    };
    let report = grad_check(&params, &cfg, &batch, &targets, &opts)?;

    let mut worst: Vec<_> = report.entries.iter().collect();
    worst.sort_by(|x, y| y.rel_error.total_cmp(&x.rel_error));
    println!("name,index,analytic,numeric,rel_error");
    for e in worst.iter().take(10) {
        println!(
            "{},{},{:.6e},{:.6e},{:.3e}",
            e.name, e.index, e.analytic, e.numeric, e.rel_error
        );
    }
    println!(
        "max relative error {:.3e} over {} samples",
        report.max_rel_error,
        report.entries.len()
    );
    if let Some(limit) = a.threshold {
        if report.max_rel_error > limit {
            bail!(
                "max relative error {:.3e} exceeds {limit:e}",
                report.max_rel_error
            );
        }
    }
    Ok(())
}

/// 2 for file-system failures, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<AesError>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}
