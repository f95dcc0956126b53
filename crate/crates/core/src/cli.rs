//! Command implementations behind the `cecr` binary.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 configuration, shape,
//! data or usage error, 3 numeric divergence, 4 I/O or file-format error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::config::RunConfig;
use crate::data::PairBatch;
use crate::error::{cfg_err, Error, Result};
use crate::eval::{evaluate, export_scatter_csv, metrics_csv, pca_project, MetricsRecord};
use crate::models::{pretrain_layerwise, Network, PretrainOptions};
use crate::rng::{streams, Rng};
use crate::training::{gradient_check, load_checkpoint, save_checkpoint, training_pairs, Trainer};

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const GRADCHECK_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Train,
    Eval,
    Scatter,
    Gradcheck,
    Pretrain,
}

#[derive(Debug, Parser)]
#[command(name = "cecr", version, about = "Class-encoder, CEC and DCEC training")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to read (eval, scatter) or write (train, pretrain).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output file (scatter CSV; metrics CSV for train).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Layer to export with `scatter` (defaults to the code layer).
    #[arg(long)]
    pub layer: Option<String>,
    /// Continue training from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Flip the sign of one analytic gradient (test hook for `gradcheck`).
    #[arg(long, hide = true)]
    pub sabotage: bool,
}

/// Runs a command, writing its `key=value` report to `out`, and returns the
/// process exit code.
pub fn run(cli: &Cli, out: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Train => cmd_train(cli, out),
        Command::Eval => cmd_eval(cli, out),
        Command::Scatter => cmd_scatter(cli, out),
        Command::Gradcheck => cmd_gradcheck(cli, out),
        Command::Pretrain => cmd_pretrain(cli, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("cecr: {e}");
            e.exit_code()
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn checkpoint_path(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf> {
    cli.checkpoint
        .clone()
        .or_else(|| cfg.output.checkpoint.clone())
        .ok_or_else(|| Error::Usage("no checkpoint path: pass --checkpoint or set [output] checkpoint".into()))
}

fn build_network(cfg: &RunConfig) -> Result<Network> {
    cfg.arch.build(&mut Rng::stream(cfg.train.seed, streams::INIT))
}

/// Layer name with its pretraining cost before and after.
type PretrainedLayer = (String, f64, f64);

fn maybe_pretrain(cfg: &RunConfig, net: Network, data: &crate::data::Dataset) -> Result<(Network, Vec<PretrainedLayer>)> {
    let Some(method) = cfg.train.pretrain else {
        return Ok((net, Vec::new()));
    };
    let opts = PretrainOptions {
        method,
        epochs: cfg.train.pretrain_epochs,
        lr: cfg.train.lr,
        momentum: cfg.train.momentum,
        batch_size: cfg.train.batch_size,
    };
    let (net, report) = pretrain_layerwise(&net, data.samples(), &opts, &mut Rng::stream(cfg.train.seed, streams::PRETRAIN))?;
    Ok((net, report.layers))
}

fn write_metrics(path: Option<&Path>, rows: &[MetricsRecord]) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, metrics_csv(rows))?;
    }
    Ok(())
}

fn read_metrics_rows(path: &Path) -> Result<Vec<String>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(text.lines().skip(2).map(str::to_string).collect()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

fn cmd_train(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(&cli.config)?;
    let splits = cfg.data.load(cfg.train.seed)?;
    let metrics_path = cli.out.clone().or_else(|| cfg.output.metrics.clone());
    let ckpt_path = checkpoint_path(cli, &cfg)?;

    let (mut trainer, mut prior_rows) = match &cli.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.net.architecture() != &cfg.arch {
                return Err(cfg_err!("checkpoint architecture differs from the config"));
            }
            let pairs = training_pairs(&splits.train, ckpt.cfg.seed, cfg.data.pairs_per_class, cfg.data.self_pairs)?;
            let mut trainer = Trainer::resume(ckpt, pairs)?;
            trainer.cfg.epochs = cfg.train.epochs;
            let rows = match &metrics_path {
                Some(p) => read_metrics_rows(p)?,
                None => Vec::new(),
            };
            (trainer, rows)
        }
        None => {
            let (net, report) = maybe_pretrain(&cfg, build_network(&cfg)?, &splits.train)?;
            for (name, before, after) in report {
                write_out(out, &format!("pretrain_{name}={before:.16e}->{after:.16e}\n"))?;
            }
            let pairs = training_pairs(&splits.train, cfg.train.seed, cfg.data.pairs_per_class, cfg.data.self_pairs)?;
            (Trainer::new(net, cfg.train.clone(), pairs)?, Vec::new())
        }
    };

    let mut rows: Vec<MetricsRecord> = Vec::new();
    let record = |trainer: &Trainer| -> Result<MetricsRecord> {
        let cost = trainer.evaluate_cost(&splits.train)?;
        evaluate(&trainer.net, &trainer.cfg, &splits.eval, trainer.epoch(), cost)
    };
    if cli.resume.is_none() {
        rows.push(record(&trainer)?);
        write_metrics(metrics_path.as_deref(), &rows)?;
    }
    while trainer.epoch() < trainer.cfg.epochs {
        trainer.train_epoch(&splits.train)?;
        rows.push(record(&trainer)?);
        match &metrics_path {
            Some(p) if !prior_rows.is_empty() => {
                let mut text = metrics_csv(&[]);
                for r in &prior_rows {
                    text.push_str(r);
                    text.push('\n');
                }
                for r in &rows {
                    text.push_str(&r.csv_row());
                    text.push('\n');
                }
                fs::write(p, text)?;
            }
            p => write_metrics(p.as_deref(), &rows)?,
        }
    }
    prior_rows.clear();
    if let Some(parent) = ckpt_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    if let Some(last) = rows.last() {
        write_out(out, &last.key_values())?;
    }
    write_out(out, &format!("checkpoint={}\n", ckpt_path.display()))?;
    Ok(0)
}

fn cmd_pretrain(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(&cli.config)?;
    if cfg.train.pretrain.is_none() {
        return Err(cfg_err!("[train] pretrain is not set"));
    }
    let splits = cfg.data.load(cfg.train.seed)?;
    let (net, report) = maybe_pretrain(&cfg, build_network(&cfg)?, &splits.train)?;
    for (name, before, after) in report {
        write_out(out, &format!("layer={name}\ncost_before={before:.16e}\ncost_after={after:.16e}\n"))?;
    }
    let ckpt_path = checkpoint_path(cli, &cfg)?;
    let pairs = training_pairs(&splits.train, cfg.train.seed, cfg.data.pairs_per_class, cfg.data.self_pairs)?;
    save_checkpoint(&Trainer::new(net, cfg.train.clone(), pairs)?.checkpoint(), &ckpt_path)?;
    write_out(out, &format!("checkpoint={}\n", ckpt_path.display()))?;
    Ok(0)
}

fn load_for_eval(cli: &Cli) -> Result<(RunConfig, crate::config::Splits, Trainer)> {
    let cfg = RunConfig::load(&cli.config)?;
    let ckpt = load_checkpoint(&checkpoint_path(cli, &cfg)?)?;
    let splits = cfg.data.load(ckpt.cfg.seed)?;
    if let Some(n) = ckpt.net.num_classes() {
        if n != splits.eval.num_classes() {
            return Err(crate::error::dim_err!(
                "checkpoint network has {n} classes, data has {}",
                splits.eval.num_classes()
            ));
        }
    }
    if ckpt.net.input_len() != splits.eval.sample_len() {
        return Err(crate::error::dim_err!(
            "checkpoint network takes {} inputs, data samples have {}",
            ckpt.net.input_len(),
            splits.eval.sample_len()
        ));
    }
    let pairs = training_pairs(&splits.train, ckpt.cfg.seed, cfg.data.pairs_per_class, cfg.data.self_pairs)?;
    let trainer = Trainer::resume(ckpt, pairs)?;
    Ok((cfg, splits, trainer))
}

fn cmd_eval(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let (_, splits, trainer) = load_for_eval(cli)?;
    let cost = trainer.evaluate_cost(&splits.train)?;
    let record = evaluate(&trainer.net, &trainer.cfg, &splits.eval, trainer.epoch(), cost)?;
    write_out(out, &format!("samples={}\n", splits.eval.len()))?;
    write_out(out, &record.key_values())?;
    Ok(0)
}

fn cmd_scatter(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let path = cli
        .out
        .clone()
        .ok_or_else(|| Error::Usage("scatter needs --out PATH".into()))?;
    let (_, splits, trainer) = load_for_eval(cli)?;
    let net = &trainer.net;
    let layer = cli.layer.clone().unwrap_or_else(|| net.code_layer().to_string());
    let features = net.features(splits.eval.samples(), &layer)?;
    let coords = pca_project(&features, 2)?;
    export_scatter_csv(&coords, splits.eval.labels(), &path)?;
    write_out(out, &format!("layer={layer}\nrows={}\nscatter={}\n", coords.rows(), path.display()))?;
    Ok(0)
}

fn cmd_gradcheck(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(&cli.config)?;
    let splits = cfg.data.load(cfg.train.seed)?;
    let net = build_network(&cfg)?;
    let pairs = training_pairs(&splits.train, cfg.train.seed, cfg.data.pairs_per_class, cfg.data.self_pairs)?;
    let take = cfg.train.batch_size.min(pairs.len());
    let batch = PairBatch::gather(&splits.train, &pairs[..take])?;
    let report = gradient_check(&net, &batch, &cfg.train.loss_options(), GRADCHECK_EPSILON, cli.sabotage)?;
    let pass = report.max_relative_error < GRADCHECK_TOLERANCE;
    write_out(
        out,
        &format!(
            "parameters={}\nchecked={}\nmax_relative_error={:.6e}\nworst_layer={}\nworst_tensor={}\nworst_index={}\nanalytic={:.16e}\nnumeric={:.16e}\nresult={}\n",
            net.num_params(),
            report.checked,
            report.max_relative_error,
            report.worst.0,
            report.worst.1,
            report.worst.2,
            report.analytic,
            report.numeric,
            if pass { "pass" } else { "fail" }
        ),
    )?;
    Ok(if pass { 0 } else { 1 })
}
