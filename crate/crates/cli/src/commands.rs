use std::path::{Path, PathBuf};

use gamlab_bench::{run_sweep, write_sweep, BenchConfig};
use gamlab_core::checkpoint;
use gamlab_core::data::{load_corpus, read_token_cache, write_token_cache};
use gamlab_core::trainer::{self, metrics_csv, StepRecord, TrainObserver};
use gamlab_core::{kernels, Arch, Bpe, MetricsRow, Model, Result, TokenDataset};
use serde_json::json;

use crate::config::{content_hash, RunConfig};
use crate::{BenchArgs, EvalArgs, Failure, TokenizerTrainArgs, TrainArgs};

type CmdResult = std::result::Result<(), Failure>;

pub fn tokenizer_train(args: &TokenizerTrainArgs) -> CmdResult {
    let corpus = load_corpus(&args.corpus)?;
    let bpe = Bpe::train(&corpus.bytes, args.vocab_size)?;
    create_parent(&args.out)?;
    bpe.save(&args.out)?;
    if bpe.vocab_size() < args.vocab_size {
        eprintln!(
            "warning: corpus supports only {} of the {} requested tokens",
            bpe.vocab_size(),
            args.vocab_size
        );
    }
    println!(
        "vocab_size={} corpus_bytes={}",
        bpe.vocab_size(),
        corpus.bytes.len()
    );
    Ok(())
}

/// File values, then flags. `--seed` sets both initialization and data order.
fn effective_config(args: &TrainArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(arch) = args.arch {
        cfg.model.arch = arch;
    }
    if let Some(v) = args.variant {
        if cfg.model.arch == Arch::Transformer {
            return Err(Failure::usage("--variant applies only to --arch gam"));
        }
        cfg.model.variant = v;
    }
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn obtain_tokenizer(cfg: &RunConfig) -> Result<Bpe> {
    if let Some(p) = &cfg.data.tokenizer {
        if p.exists() {
            eprintln!("loading tokenizer {}", p.display());
            return Bpe::load(p);
        }
    }
    let corpus = load_corpus(&cfg.data.train)?;
    eprintln!(
        "training tokenizer: {} bytes, vocab {}",
        corpus.bytes.len(),
        cfg.model.vocab_size
    );
    let bpe = Bpe::train(&corpus.bytes, cfg.model.vocab_size)?;
    if bpe.vocab_size() < cfg.model.vocab_size {
        eprintln!(
            "warning: corpus supports only {} of the {} requested tokens",
            bpe.vocab_size(),
            cfg.model.vocab_size
        );
    }
    if let Some(p) = &cfg.data.tokenizer {
        create_parent(p)?;
        bpe.save(p)?;
    }
    Ok(bpe)
}

/// A present cache is trusted as-is; delete it after changing the
/// tokenizer or corpus.
fn training_tokens(cfg: &RunConfig, bpe: &Bpe) -> Result<Vec<u32>> {
    if let Some(p) = &cfg.data.cache {
        if p.exists() {
            eprintln!("reading token cache {}", p.display());
            return read_token_cache(p);
        }
    }
    let tokens = bpe.encode(&load_corpus(&cfg.data.train)?.bytes);
    if let Some(p) = &cfg.data.cache {
        create_parent(p)?;
        write_token_cache(p, &tokens)?;
    }
    Ok(tokens)
}

fn split(cfg: &RunConfig, bpe: &Bpe, block: usize) -> Result<(TokenDataset, TokenDataset)> {
    let mut train = training_tokens(cfg, bpe)?;
    let val = if cfg.data.val.is_empty() {
        let n_val = (train.len() as f64 * cfg.data.val_fraction).round() as usize;
        train.split_off(train.len() - n_val)
    } else {
        bpe.encode(&load_corpus(&cfg.data.val)?.bytes)
    };
    Ok((
        TokenDataset::new(train, block)?,
        TokenDataset::new(val, block)?,
    ))
}

struct Progress<'a> {
    out_dir: &'a Path,
    rows: Vec<MetricsRow>,
    best: Option<(usize, f64)>,
    log_every: usize,
}

impl TrainObserver for Progress<'_> {
    fn on_step(&mut self, r: &StepRecord) {
        if r.step == 1 || r.step.is_multiple_of(self.log_every) {
            eprintln!(
                "step {} epoch {} lr {:.3e} loss {:.4} grad_norm {:.3}",
                r.step, r.epoch, r.lr, r.loss, r.grad_norm
            );
        }
    }

    fn on_epoch(&mut self, model: &Model<f32>, row: &MetricsRow) -> Result<()> {
        eprintln!(
            "epoch {} train_loss {:.4} val_loss {:.4} val_ppl {:.2} ({:.1}s)",
            row.epoch, row.train_loss, row.val_loss, row.val_ppl, row.epoch_seconds
        );
        self.rows.push(row.clone());
        std::fs::write(self.out_dir.join("metrics.csv"), metrics_csv(&self.rows))?;
        if self.best.is_none_or(|(_, l)| row.val_loss < l) {
            self.best = Some((row.epoch, row.val_loss));
            checkpoint::save(model, &self.out_dir.join("checkpoint_best.gamc"))?;
        }
        Ok(())
    }
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let mut cfg = effective_config(args)?;
    let have_data = !cfg.data.train.is_empty();
    if !have_data && !args.dry_run {
        return Err(Failure::usage(
            "no training data: set data.train in the run configuration",
        ));
    }
    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir)?;

    let tokenized = if have_data {
        let bpe = obtain_tokenizer(&cfg)?;
        cfg.model.vocab_size = bpe.vocab_size();
        let (train_ds, val_ds) = split(&cfg, &bpe, cfg.model.block_size)?;
        Some((bpe, train_ds, val_ds))
    } else {
        None
    };

    let config_json = cfg.to_json();
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let mut manifest = json!({
        "config": serde_json::to_value(&cfg).expect("config serializes"),
        "config_hash": content_hash(config_json.as_bytes()),
        "param_count": model.count_params(),
        "vocab_size": cfg.model.vocab_size,
        "threads": kernels::num_threads(),
    });
    if let Some((_, train_ds, val_ds)) = &tokenized {
        manifest["train_tokens"] = json!(train_ds.tokens().len());
        manifest["val_tokens"] = json!(val_ds.tokens().len());
        manifest["train_chunks"] = json!(train_ds.num_chunks());
        manifest["dropped_tail"] = json!(train_ds.dropped_tail());
    }
    let manifest_path = out_dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    eprintln!(
        "{} ({}) with {} parameters",
        cfg.model.arch,
        cfg.model.variant,
        model.count_params()
    );
    println!("param_count={}", model.count_params());

    let Some((bpe, train_ds, val_ds)) = tokenized.filter(|_| !args.dry_run) else {
        return Ok(());
    };
    bpe.save(&out_dir.join("tokenizer.json"))?;
    let steps_per_epoch = train_ds.train_batches(cfg.train.batch_size);
    let mut progress = Progress {
        out_dir: &out_dir,
        rows: Vec::new(),
        best: None,
        log_every: (steps_per_epoch / 10).max(1),
    };
    trainer::train(&mut model, &train_ds, &val_ds, &cfg.train, &mut progress)?;
    checkpoint::save(&model, &out_dir.join("checkpoint_final.gamc"))?;

    let last = progress.rows.last().expect("at least one epoch");
    let (best_epoch, best_loss) = progress.best.expect("at least one epoch");
    manifest["result"] = json!({
        "final_val_loss": last.val_loss,
        "final_val_ppl": last.val_ppl,
        "best_epoch": best_epoch,
        "best_val_loss": best_loss,
    });
    write_json(&manifest_path, &manifest)?;
    println!("val_loss={} val_ppl={}", last.val_loss, last.val_ppl);
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let model = checkpoint::load(&args.checkpoint)?;
    let tok_path = args.tokenizer.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new(""))
            .join("tokenizer.json")
    });
    let bpe = Bpe::load(&tok_path)?;
    if bpe.vocab_size() != model.config.vocab_size {
        return Err(gamlab_core::Error::Input(format!(
            "tokenizer has {} tokens but the checkpoint expects {}",
            bpe.vocab_size(),
            model.config.vocab_size
        ))
        .into());
    }
    let tokens = bpe.encode(&load_corpus(&args.data)?.bytes);
    let ds = TokenDataset::new(tokens, model.config.block_size)?;
    let ev = trainer::evaluate(&model, &ds, args.batch_size.max(1))?;
    println!("val_loss={} val_ppl={}", ev.loss, ev.ppl);
    Ok(())
}

pub fn bench(args: &BenchArgs) -> CmdResult {
    if args.seq_lens.contains(&0) {
        return Err(Failure::usage("sequence lengths must be positive"));
    }
    let cfg = BenchConfig {
        batch: args.batch,
        d_model: args.d_model,
        num_slots: args.num_slots.unwrap_or(args.d_model),
        kernel_size: args.kernel_size,
        n_head: args.n_head,
        warmup: args.warmup,
        iters: args.iters,
        mem_limit: args.mem_limit_mb.map(|mb| mb << 20),
        ..Default::default()
    };
    if cfg.batch == 0 || cfg.d_model == 0 || cfg.iters == 0 {
        return Err(Failure::usage("batch, d-model and iters must be positive"));
    }
    if args.archs.contains(&Arch::Transformer)
        && (cfg.n_head == 0 || !cfg.d_model.is_multiple_of(cfg.n_head))
    {
        return Err(Failure::usage(format!(
            "d-model {} is not divisible by n-head {}",
            cfg.d_model, cfg.n_head
        )));
    }
    let records = run_sweep(&args.archs, &args.seq_lens, &cfg, |r| {
        eprintln!("{}", r.csv_line());
    });
    let (csv, svg) = write_sweep(&args.out, &records, &cfg)?;
    println!("csv={} plot={}", csv.display(), svg.display());
    Ok(())
}

fn create_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p),
        _ => Ok(()),
    }
}

fn write_json(path: &PathBuf, value: &serde_json::Value) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    std::fs::write(path, text)
}
