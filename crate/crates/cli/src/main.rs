//! `crac`: dataset generation, training, evaluation, sweeps, rank reports
//! and self-checks.
//!
//! Exit status is 0 on success, 2 on a usage error and 1 when the command
//! itself fails.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use crac_core::config::TrainConfig;
use crac_core::datagen::{generate, read_dataset, write_dataset, DatasetSpec, SplitKind};
use crac_core::metrics::{friedman_rank, LogitHistograms, MetricsConfig, MetricsReport, RankTable, Setting};
use crac_core::trainer::{evaluate, load_model, train};
use crac_core::verify::run_checks;

#[derive(Parser)]
#[command(name = "crac", version, about = "Constrained training for calibrated segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as <out>/dataset.crsd.
    Gen {
        /// `toy4` (K = 4, 64x64, 200/40/40) or `tiny` (K = 3, 48x48, 12/4/4).
        #[arg(long, default_value = "toy4")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config file; checkpoints and train_log.csv go to its
    /// `output` directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config key, as `key=value`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on one split and write metric CSVs to <out>.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Row label in the CSVs; defaults to the checkpoint's directory name.
        #[arg(long)]
        method: Option<String>,
    },
    /// Train and evaluate once per penalty weight; writes <out>/sweep.csv.
    Sweep {
        /// Base config; its `loss`, weight and `output` keys are overridden.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        loss: SweepLoss,
        /// Comma-separated weights.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Number of runs trained concurrently.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        jobs: u32,
    },
    /// Rank methods across metric CSVs written by `eval` or `sweep`.
    ///
    /// Every column other than `method` is a setting; columns whose name
    /// contains `dsc` rank higher-is-better, the rest lower-is-better.
    /// A `logit_hist.csv` next to an input is split per method.
    Report {
        #[arg(long = "metrics", num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the penalty axiom, gradient and toy-problem checks.
    Check {
        /// Random instances per primitive and per loss.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, hide = true)]
        inject_noncompliant: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepLoss {
    Nacl,
    CracFixed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen { preset, seed, out } => {
            let spec = DatasetSpec::preset(&preset, seed)?;
            let ds = generate(&spec)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("dataset.crsd");
            write_dataset(&ds, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Train {
            config,
            resume,
            overrides,
        } => {
            let mut cfg = TrainConfig::read(&config).with_context(|| format!("reading {}", config.display()))?;
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .with_context(|| format!("--set expects key=value, got {o:?}"))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            let outcome = train(&cfg, resume.as_deref())?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "epoch {}: train loss {:.6}, val loss {:.6}",
                    last.epoch, last.train_loss, last.val_loss
                );
            }
            println!("checkpoint {}", outcome.last_checkpoint.display());
        }
        Command::Eval {
            ckpt,
            dataset,
            split,
            out,
            method,
        } => {
            let split: SplitKind = split.parse()?;
            let method = method.unwrap_or_else(|| default_method(&ckpt));
            let report = eval_checkpoint(&ckpt, &dataset, split)?;
            write_eval(&out, &method, &report)?;
            println!(
                "{method}: dsc {:.4}, hd95 {:.4}, ece {:.4}, tace {:.4}",
                report.dsc, report.hd95, report.ece, report.tace
            );
        }
        Command::Sweep {
            config,
            loss,
            lambdas,
            out,
            split,
            jobs,
        } => {
            let base = TrainConfig::read(&config).with_context(|| format!("reading {}", config.display()))?;
            let split: SplitKind = split.parse()?;
            sweep(&base, loss, &lambdas, &out, split, jobs as usize)?;
        }
        Command::Report { metrics, out } => report(&metrics, &out)?,
        Command::Check {
            instances,
            inject_noncompliant,
        } => {
            let report = run_checks(instances, inject_noncompliant)?;
            // A closed stdout must not turn a verdict into a panic.
            let _ = write!(std::io::stdout(), "{report}");
            if !report.passed() {
                eprintln!("error: verification failed");
                return Ok(ExitCode::FAILURE);
            }
            println!("all checks passed");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn default_method(ckpt: &Path) -> String {
    ckpt.parent()
        .and_then(Path::file_name)
        .and_then(|n| n.to_str())
        .filter(|n| !n.is_empty())
        .unwrap_or("model")
        .to_string()
}

fn eval_checkpoint(ckpt: &Path, dataset: &Path, split: SplitKind) -> Result<MetricsReport> {
    let params = load_model(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let ds = read_dataset(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    Ok(evaluate(&params, ds.split(split), &MetricsConfig::default())?)
}

fn create(out: &Path, name: &str) -> Result<csv::Writer<std::fs::File>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))
}

fn write_eval(out: &Path, method: &str, r: &MetricsReport) -> Result<()> {
    let mut w = create(out, "metrics.csv")?;
    w.write_record(["method", "dsc", "hd95", "ece", "tace"])?;
    w.write_record([method.to_string(), r.dsc.to_string(), r.hd95.to_string(), r.ece.to_string(), r.tace.to_string()])?;
    w.flush()?;

    let mut w = create(out, "metrics_per_class.csv")?;
    w.write_record(["method", "class", "dsc", "hd95"])?;
    for c in &r.per_class {
        w.write_record([method.to_string(), c.class.to_string(), c.dsc.to_string(), c.hd95.to_string()])?;
    }
    w.flush()?;

    let mut w = create(out, "reliability.csv")?;
    w.write_record(["method", "bin", "lower", "upper", "count", "accuracy", "confidence"])?;
    for (b, bin) in r.reliability.iter().enumerate() {
        w.write_record([
            method.to_string(),
            b.to_string(),
            bin.lower.to_string(),
            bin.upper.to_string(),
            bin.count.to_string(),
            bin.accuracy.to_string(),
            bin.confidence.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = create(out, "logit_hist.csv")?;
    w.write_record(["method", "role", "bin", "lower", "upper", "count"])?;
    let h = &r.histograms;
    for role in LogitHistograms::ROLES {
        let counts = h.role(role).expect("known role");
        for (b, count) in counts.iter().enumerate() {
            let (lo, hi) = h.spec.edges(b);
            w.write_record([
                method.to_string(),
                role.to_string(),
                b.to_string(),
                lo.to_string(),
                hi.to_string(),
                count.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn sweep(base: &TrainConfig, loss: SweepLoss, lambdas: &[f64], out: &Path, split: SplitKind, jobs: usize) -> Result<()> {
    let name = match loss {
        SweepLoss::Nacl => "nacl",
        SweepLoss::CracFixed => "crac-fixed",
    };
    let configs = lambdas
        .iter()
        .map(|&l| {
            let mut cfg = base.clone();
            cfg.loss = name.to_string();
            match loss {
                SweepLoss::Nacl => cfg.nacl_lambda = l,
                SweepLoss::CracFixed => {
                    cfg.crac_fixed_inner = l;
                    cfg.crac_fixed_outer = l;
                }
            }
            cfg.output = out.join(format!("{name}_lambda_{l}"));
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let run_one = |cfg: &TrainConfig| -> Result<MetricsReport> {
        let outcome = train(cfg, None)?;
        eval_checkpoint(&outcome.last_checkpoint, &cfg.dataset, split)
    };
    let mut results: Vec<Option<Result<MetricsReport>>> = (0..configs.len()).map(|_| None).collect();
    for (chunk_cfg, chunk_out) in configs.chunks(jobs).zip(results.chunks_mut(jobs)) {
        std::thread::scope(|s| {
            for (cfg, slot) in chunk_cfg.iter().zip(chunk_out.iter_mut()) {
                let run_one = &run_one;
                s.spawn(move || *slot = Some(run_one(cfg)));
            }
        });
    }

    let mut w = create(out, "sweep.csv")?;
    w.write_record(["method", "lambda", "dsc", "hd95", "ece", "tace"])?;
    for ((cfg, &l), r) in configs.iter().zip(lambdas).zip(results) {
        let r = r.expect("every run finished").with_context(|| format!("run in {}", cfg.output.display()))?;
        write_eval(&cfg.output, &format!("{name}_lambda_{l}"), &r)?;
        w.write_record([
            name.to_string(),
            l.to_string(),
            r.dsc.to_string(),
            r.hd95.to_string(),
            r.ece.to_string(),
            r.tace.to_string(),
        ])?;
        println!("{name} lambda {l}: dsc {:.4}, ece {:.4}", r.dsc, r.ece);
    }
    w.flush()?;
    Ok(())
}

fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mcol = headers
        .iter()
        .position(|h| h == "method")
        .with_context(|| format!("{}: no method column", path.display()))?;
    let columns: Vec<String> = headers.iter().enumerate().filter(|&(i, _)| i != mcol).map(|(_, h)| h.clone()).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != mcol)
            .map(|(i, v)| {
                v.trim()
                    .parse::<f64>()
                    .with_context(|| format!("{}: column {} has {v:?}", path.display(), headers[i]))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((rec[mcol].to_string(), values));
    }
    Ok((columns, rows))
}

fn report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut columns: Option<Vec<String>> = None;
    let mut methods = Vec::new();
    let mut values = Vec::new();
    for path in inputs {
        let (cols, rows) = read_metrics(path)?;
        match &columns {
            None => columns = Some(cols),
            Some(c) if *c != cols => bail!(
                "{} has columns {:?}, expected {:?}",
                path.display(),
                cols,
                c
            ),
            Some(_) => {}
        }
        for (m, v) in rows {
            if methods.contains(&m) {
                bail!("method {m:?} appears more than once");
            }
            methods.push(m);
            values.push(v);
        }
    }
    let columns = columns.expect("at least one input");
    let table = RankTable {
        methods,
        settings: columns
            .iter()
            .map(|c| Setting {
                name: c.clone(),
                higher_is_better: c.to_ascii_lowercase().contains("dsc"),
            })
            .collect(),
        values,
    };
    let result = friedman_rank(&table)?;

    let mut w = create(out, "rank.csv")?;
    let mut header = vec!["method".to_string()];
    header.extend(columns.iter().map(|c| format!("rank_{c}")));
    header.extend(["rank".to_string(), "position".to_string()]);
    w.write_record(&header)?;
    let mut position = vec![0; table.methods.len()];
    for (p, &m) in result.order.iter().enumerate() {
        position[m] = p + 1;
    }
    for &m in &result.order {
        let mut row = vec![table.methods[m].clone()];
        row.extend(result.ranks[m].iter().map(f64::to_string));
        row.extend([result.rank[m].to_string(), position[m].to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    for &m in &result.order {
        println!("{}. {} (rank {:.4})", position[m], table.methods[m], result.rank[m]);
    }

    for path in inputs {
        let hist = path.with_file_name("logit_hist.csv");
        if hist.is_file() {
            split_histograms(&hist, out)?;
        }
    }
    Ok(())
}

/// Writes `logit_hist_<method>.csv` for every method in a histogram CSV.
fn split_histograms(path: &Path, out: &Path) -> Result<()> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let mcol = headers
        .iter()
        .position(|h| h == "method")
        .with_context(|| format!("{}: no method column", path.display()))?;
    let mut writers: Vec<(String, csv::Writer<std::fs::File>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let method = &rec[mcol];
        let i = match writers.iter().position(|(m, _)| m == method) {
            Some(i) => i,
            None => {
                let safe: String = method
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
                    .collect();
                let mut w = create(out, &format!("logit_hist_{safe}.csv"))?;
                w.write_record(&headers)?;
                writers.push((method.to_string(), w));
                writers.len() - 1
            }
        };
        writers[i].1.write_record(&rec)?;
    }
    for (_, mut w) in writers {
        w.flush()?;
    }
    Ok(())
}
