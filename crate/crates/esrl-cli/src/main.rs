//! Command-line front end: data generation, training, evaluation, benchmark
//! comparison, and hyperparameter sweeps.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use esrl::checkpoint::{self, Checkpoint};
use esrl::config::{validate_config, CapabilityEstimator, EsrlConfig, RewardMetric, RunSeed};
use esrl::model::{init_model, ModelDims, SpecialIds, UpdateMode};
use esrl::report::{bench_csv, bench_report, line_plot_svg};
use esrl::taskgen::{generate_corpus, read_corpus_auto, split_corpus, write_corpus, Corpus, TaskKind};
use esrl::trainer::{MethodKind, TrainOutcome, Trainer};
use esrl::Error;

#[derive(Parser)]
#[command(name = "esrl", version, about = "Train small sequence models with efficient sampling-based RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Every config field is overridable by a flag of the same name; a config
/// file supplies the rest.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file with `key = value` lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long = "k_max", global = true)]
    k_max: Option<usize>,
    #[arg(long = "beta", global = true)]
    beta: Option<f64>,
    #[arg(long = "tau_min", global = true)]
    tau_min: Option<f64>,
    #[arg(long = "tau_max", global = true)]
    tau_max: Option<f64>,
    #[arg(long = "alpha", global = true)]
    alpha: Option<f64>,
    #[arg(long = "queue_size", global = true)]
    queue_size: Option<usize>,
    #[arg(long = "top_k", global = true)]
    top_k: Option<usize>,
    #[arg(long = "learning_rate", global = true)]
    learning_rate: Option<f64>,
    #[arg(long = "mle_epochs", global = true)]
    mle_epochs: Option<usize>,
    #[arg(long = "rl_epochs", global = true)]
    rl_epochs: Option<usize>,
    #[arg(long = "capability_estimator", global = true)]
    capability_estimator: Option<String>,
    #[arg(long = "reward_metric", global = true)]
    reward_metric: Option<String>,
    #[arg(long = "master_seed", global = true)]
    master_seed: Option<u64>,
    #[arg(long = "max_decode_len", global = true)]
    max_decode_len: Option<usize>,
    #[arg(long = "batch_size", global = true)]
    batch_size: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<EsrlConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => EsrlConfig::from_file(path)?,
            None => EsrlConfig::default(),
        };
        if let Some(v) = self.k_max {
            cfg.k_max = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.tau_min {
            cfg.tau_min = v;
        }
        if let Some(v) = self.tau_max {
            cfg.tau_max = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.queue_size {
            cfg.queue_size = v;
        }
        if let Some(v) = self.top_k {
            cfg.top_k = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.mle_epochs {
            cfg.mle_epochs = v;
        }
        if let Some(v) = self.rl_epochs {
            cfg.rl_epochs = v;
        }
        if let Some(v) = &self.capability_estimator {
            cfg.capability_estimator = CapabilityEstimator::parse(v)?;
        }
        if let Some(v) = &self.reward_metric {
            cfg.reward_metric = RewardMetric::parse(v)?;
        }
        if let Some(v) = self.master_seed {
            cfg.master_seed = v;
        }
        if let Some(v) = self.max_decode_len {
            cfg.max_decode_len = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        validate_config(cfg)
    }
}

#[derive(Args, Clone)]
struct DimArgs {
    #[arg(long = "d_model", default_value_t = 64)]
    d_model: usize,
    #[arg(long = "n_heads", default_value_t = 2)]
    n_heads: usize,
    #[arg(long = "n_enc_layers", default_value_t = 2)]
    n_enc_layers: usize,
    #[arg(long = "n_dec_layers", default_value_t = 2)]
    n_dec_layers: usize,
    #[arg(long = "d_ff", default_value_t = 128)]
    d_ff: usize,
    #[arg(long = "max_len", default_value_t = 32)]
    max_len: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write train/dev/test splits
    GenData {
        #[arg(long)]
        task: String,
        #[arg(long = "n_pairs")]
        n_pairs: usize,
        #[arg(long = "min_len")]
        min_len: usize,
        #[arg(long = "max_len")]
        max_len: usize,
        #[arg(long = "vocab_size")]
        vocab_size: usize,
        /// train,dev,test ratios
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Maximum-likelihood pretraining
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        dims: DimArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// RL training with dynamic two-stage sampling
    TrainEsrl {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to start from (pretrained model)
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume optimizer, registry, and queue state from the checkpoint
        #[arg(long, default_value_t = false)]
        resume: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// RL training with conventional sampling (reinforce or mrt)
    TrainBaseline {
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Greedy-decode a split and report corpus BLEU and ROUGE-L
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run several methods from one initialization and compare cost/quality
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value = "esrl-metric,esrl-random,reinforce")]
        methods: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Sweep one knob (beta, tau, queue_size) across values
    Sweep {
        /// beta | tau | queue_size
        #[arg(long)]
        param: String,
        /// Comma-separated values; tau intervals as min:max
        #[arg(long)]
        values: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn load_splits(dir: &Path) -> Result<(Corpus, Corpus, Corpus), Error> {
    Ok((
        read_corpus_auto(&dir.join("train.tsv"))?,
        read_corpus_auto(&dir.join("dev.tsv"))?,
        read_corpus_auto(&dir.join("test.tsv"))?,
    ))
}

fn write_run_outputs(out: &Path, outcome: &TrainOutcome) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.jsonl"), outcome.report.to_jsonl())?;
    checkpoint::save(&out.join("final.ckpt"), &outcome.to_checkpoint())?;
    let mut best = outcome.to_checkpoint();
    best.params = outcome.best_params.clone();
    checkpoint::save(&out.join("best.ckpt"), &best)?;
    Ok(())
}

fn print_summary(outcome: &TrainOutcome) {
    let last = outcome.report.records.last();
    println!(
        "{}",
        serde_json::json!({
            "method": outcome.report.method,
            "epochs": outcome.report.records.len(),
            "final_dev_bleu": last.map(|r| r.dev_bleu),
            "best_dev_bleu": outcome.best_dev_bleu,
            "sum_k": outcome.report.total_sum_k(),
            "retained_forward_passes": outcome.report.total_retained_passes(),
            "peak_activation_scalars": outcome.report.peak_activation_scalars(),
        })
    );
}

fn run_esrl_method(
    cfg: &EsrlConfig,
    method: MethodKind,
    train: &Corpus,
    dev: &Corpus,
    init: &Checkpoint,
    out_dir: Option<PathBuf>,
) -> Result<TrainOutcome, Error> {
    let mut cfg = cfg.clone();
    let mut trainer_dir = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir)?;
        trainer_dir = Some(dir);
    }
    let outcome = match method {
        MethodKind::Reinforce | MethodKind::Mrt => {
            let trainer = Trainer {
                config: cfg,
                checkpoint_dir: trainer_dir,
            };
            trainer.train_baseline(train, dev, init.params.clone(), method)?
        }
        MethodKind::EsrlMetric | MethodKind::EsrlEntropy | MethodKind::EsrlRandom => {
            cfg.capability_estimator = method.estimator().expect("esrl method");
            let trainer = Trainer {
                config: cfg,
                checkpoint_dir: trainer_dir,
            };
            trainer.train_esrl(train, dev, init.params.clone())?
        }
        MethodKind::Mle => {
            return Err(Error::InvalidConfig(
                "mle runs through the pretrain subcommand".into(),
            ))
        }
    };
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    task: &str,
    n_pairs: usize,
    min_len: usize,
    max_len: usize,
    vocab_size: usize,
    ratios: &str,
    out: &Path,
    config: &ConfigArgs,
) -> Result<(), Error> {
    let cfg = config.resolve()?;
    let task = TaskKind::parse(task)?;
    let parts: Vec<f64> = ratios
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::InvalidRatio(format!("bad ratios {ratios:?}")))?;
    if parts.len() != 3 {
        return Err(Error::InvalidRatio("need train,dev,test ratios".into()));
    }
    let seed = RunSeed::new(cfg.master_seed);
    let corpus = generate_corpus(
        task,
        n_pairs,
        (min_len, max_len),
        vocab_size,
        cfg.max_decode_len,
        &seed.derive("gen", 0),
    )?;
    let (train, dev, test) =
        split_corpus(&corpus, (parts[0], parts[1], parts[2]), &seed.derive("split", 0))?;
    std::fs::create_dir_all(out)?;
    write_corpus(&train, &out.join("train.tsv"))?;
    write_corpus(&dev, &out.join("dev.tsv"))?;
    write_corpus(&test, &out.join("test.tsv"))?;
    println!(
        "{}",
        serde_json::json!({
            "task": task.to_string(),
            "train": train.pairs.len(),
            "dev": dev.pairs.len(),
            "test": test.pairs.len(),
            "vocab": train.vocab.size(),
        })
    );
    Ok(())
}

fn cmd_pretrain(data: &Path, out: &Path, dims: &DimArgs, config: &ConfigArgs) -> Result<(), Error> {
    let cfg = config.resolve()?;
    let (train, dev, _) = load_splits(data)?;
    let model_dims = ModelDims {
        d_model: dims.d_model,
        n_heads: dims.n_heads,
        n_enc_layers: dims.n_enc_layers,
        n_dec_layers: dims.n_dec_layers,
        d_ff: dims.d_ff,
        vocab_size: train.vocab.size(),
        max_len: dims.max_len,
    };
    let params = init_model(
        model_dims,
        SpecialIds::standard(),
        &RunSeed::new(cfg.master_seed),
    )?;
    let trainer = Trainer {
        config: cfg,
        checkpoint_dir: Some(out.to_path_buf()),
    };
    let outcome = trainer.pretrain_mle(&train, &dev, params)?;
    write_run_outputs(out, &outcome)?;
    print_summary(&outcome);
    Ok(())
}

fn cmd_train_esrl(
    data: &Path,
    init: &Path,
    out: &Path,
    resume: bool,
    config: &ConfigArgs,
) -> Result<(), Error> {
    let cfg = config.resolve()?;
    let (train, dev, _) = load_splits(data)?;
    let loaded = checkpoint::load(init)?;
    let trainer = Trainer {
        config: cfg.clone(),
        checkpoint_dir: Some(out.to_path_buf()),
    };
    let outcome = if resume {
        trainer.train_esrl_from(&train, &dev, loaded)?
    } else {
        let state = Checkpoint::fresh(loaded.params, UpdateMode::Adam, cfg.queue_size);
        trainer.train_esrl_from(&train, &dev, state)?
    };
    write_run_outputs(out, &outcome)?;
    print_summary(&outcome);
    Ok(())
}

fn cmd_train_baseline(
    method: &str,
    data: &Path,
    init: &Path,
    out: &Path,
    config: &ConfigArgs,
) -> Result<(), Error> {
    let cfg = config.resolve()?;
    let method = MethodKind::parse(method)?;
    let (train, dev, _) = load_splits(data)?;
    let loaded = checkpoint::load(init)?;
    let trainer = Trainer {
        config: cfg,
        checkpoint_dir: Some(out.to_path_buf()),
    };
    let outcome = trainer.train_baseline(&train, &dev, loaded.params, method)?;
    write_run_outputs(out, &outcome)?;
    print_summary(&outcome);
    Ok(())
}

fn cmd_eval(data: &Path, split: &str, ckpt: &Path, config: &ConfigArgs) -> Result<(), Error> {
    let cfg = config.resolve()?;
    let (train, dev, test) = load_splits(data)?;
    let corpus = match split {
        "train" => train,
        "dev" => dev,
        "test" => test,
        other => return Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
    };
    let loaded = checkpoint::load(ckpt)?;
    let trainer = Trainer::new(cfg);
    let scores = trainer.evaluate(&loaded.params, &corpus)?;
    println!(
        "{}",
        serde_json::json!({
            "split": split,
            "pairs": corpus.pairs.len(),
            "bleu": scores.bleu,
            "rouge_l": scores.rouge_l,
        })
    );
    Ok(())
}

fn cmd_bench(
    data: &Path,
    init: &Path,
    methods: &str,
    out: &Path,
    config: &ConfigArgs,
) -> Result<(), Error> {
    let cfg = config.resolve()?;
    let (train, dev, _) = load_splits(data)?;
    let loaded = checkpoint::load(init)?;
    std::fs::create_dir_all(out)?;
    let mut reports = Vec::new();
    for name in methods.split(',') {
        let method = MethodKind::parse(name.trim())?;
        let outcome = run_esrl_method(&cfg, method, &train, &dev, &loaded, None)?;
        std::fs::write(
            out.join(format!("{method}.jsonl")),
            outcome.report.to_jsonl(),
        )?;
        eprintln!(
            "bench: {method} done (best dev BLEU {:.4})",
            outcome.best_dev_bleu
        );
        reports.push(outcome.report);
    }
    let rows = bench_report(&reports);
    std::fs::write(out.join("comparison.csv"), bench_csv(&rows))?;

    let reward_series: Vec<(String, Vec<(f64, f64)>)> = reports
        .iter()
        .map(|r| {
            let pts = r
                .records
                .iter()
                .map(|rec| (rec.epoch as f64, rec.mean_train_reward.unwrap_or(0.0)))
                .collect();
            (r.method.clone(), pts)
        })
        .collect();
    std::fs::write(
        out.join("reward_vs_epoch.svg"),
        line_plot_svg("mean train reward", "epoch", "reward", &reward_series),
    )?;
    let bleu_series: Vec<(String, Vec<(f64, f64)>)> = reports
        .iter()
        .map(|r| {
            let pts = r
                .records
                .iter()
                .map(|rec| (rec.epoch as f64, rec.dev_bleu))
                .collect();
            (r.method.clone(), pts)
        })
        .collect();
    std::fs::write(
        out.join("dev_bleu_vs_epoch.svg"),
        line_plot_svg("dev BLEU", "epoch", "BLEU", &bleu_series),
    )?;
    println!("{}", bench_csv(&rows));
    Ok(())
}

fn cmd_sweep(
    param: &str,
    values: &str,
    data: &Path,
    init: &Path,
    out: &Path,
    config: &ConfigArgs,
) -> Result<(), Error> {
    let cfg = config.resolve()?;
    let (train, dev, _) = load_splits(data)?;
    let loaded = checkpoint::load(init)?;
    std::fs::create_dir_all(out)?;

    let mut rows = String::from("param,value,sum_k,final_dev_bleu,best_dev_bleu\n");
    let mut sum_k_points = Vec::new();
    let mut bleu_points = Vec::new();
    for raw in values.split(',') {
        let raw = raw.trim();
        let mut run_cfg = cfg.clone();
        let knob: f64 = match param {
            "beta" => {
                run_cfg.beta = raw
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad beta {raw:?}")))?;
                run_cfg.beta
            }
            "tau" => {
                let (lo, hi) = raw
                    .split_once(':')
                    .ok_or_else(|| Error::InvalidConfig(format!("tau interval must be min:max, got {raw:?}")))?;
                run_cfg.tau_min = lo
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad tau {lo:?}")))?;
                run_cfg.tau_max = hi
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad tau {hi:?}")))?;
                run_cfg.tau_min
            }
            "queue_size" => {
                run_cfg.queue_size = raw
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad queue_size {raw:?}")))?;
                run_cfg.queue_size as f64
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "sweep param must be beta|tau|queue_size, got {other:?}"
                )))
            }
        };
        let run_cfg = validate_config(run_cfg)?;
        let trainer = Trainer::new(run_cfg);
        let outcome = trainer.train_esrl(&train, &dev, loaded.params.clone())?;
        let sum_k = outcome.report.total_sum_k();
        rows.push_str(&format!(
            "{param},{raw},{sum_k},{:.6},{:.6}\n",
            outcome.report.final_dev_bleu(),
            outcome.best_dev_bleu
        ));
        std::fs::write(
            out.join(format!("{param}_{}.jsonl", raw.replace(':', "-"))),
            outcome.report.to_jsonl(),
        )?;
        eprintln!("sweep: {param}={raw} done (sum_k {sum_k})");
        sum_k_points.push((knob, sum_k as f64));
        bleu_points.push((knob, outcome.best_dev_bleu));
    }
    std::fs::write(out.join("sweep.csv"), &rows)?;
    std::fs::write(
        out.join(format!("sum_k_vs_{param}.svg")),
        line_plot_svg(
            &format!("candidates sampled vs {param}"),
            param,
            "sum_k",
            &[("sum_k".to_string(), sum_k_points)],
        ),
    )?;
    std::fs::write(
        out.join(format!("bleu_vs_{param}.svg")),
        line_plot_svg(
            &format!("best dev BLEU vs {param}"),
            param,
            "BLEU",
            &[("best_dev_bleu".to_string(), bleu_points)],
        ),
    )?;
    println!("{rows}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::GenData {
            task,
            n_pairs,
            min_len,
            max_len,
            vocab_size,
            ratios,
            out,
            config,
        } => cmd_gen_data(task, *n_pairs, *min_len, *max_len, *vocab_size, ratios, out, config),
        Command::Pretrain { data, out, dims, config } => cmd_pretrain(data, out, dims, config),
        Command::TrainEsrl {
            data,
            init,
            out,
            resume,
            config,
        } => cmd_train_esrl(data, init, out, *resume, config),
        Command::TrainBaseline {
            method,
            data,
            init,
            out,
            config,
        } => cmd_train_baseline(method, data, init, out, config),
        Command::Eval {
            data,
            split,
            ckpt,
            config,
        } => cmd_eval(data, split, ckpt, config),
        Command::Bench {
            data,
            init,
            methods,
            out,
            config,
        } => cmd_bench(data, init, methods, out, config),
        Command::Sweep {
            param,
            values,
            data,
            init,
            out,
            config,
        } => cmd_sweep(param, values, data, init, out, config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
