//! Training configuration as flat `key = value` lines.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `dataset` | required | CRSD file |
//! | `output` | required | directory for checkpoints and logs |
//! | `loss` | `ce` | `ce`, `fl`, `ls`, `ecp`, `mbls`, `nacl`, `crac-fixed`, `crac` |
//! | `epochs` | 100 | |
//! | `batch_size` | 16 | |
//! | `lr` | 1e-3 | learning rate up to `lr_switch_epoch` |
//! | `lr_late` | 1e-4 | learning rate afterwards |
//! | `lr_switch_epoch` | `epochs / 2` | last epoch at `lr` |
//! | `seed` | 0 | initialization and shuffling |
//! | `prior` | `counts` | `counts` or `proportions` |
//! | `convention` | `signed` | constraint argument for `crac` |
//! | `focal_gamma` | 3 | |
//! | `ls_alpha` | 0.1 | |
//! | `ecp_lambda` | 0.1 | |
//! | `mbls_lambda`, `mbls_margin` | 0.1, 10 | |
//! | `nacl_lambda` | 0.1 | |
//! | `crac_fixed_inner`, `crac_fixed_outer` | 0.1, 0.1 | weights for every class |
//! | `lambda0`, `rho0`, `gamma`, `mu` | 0.1, 1, 1.2, 0.9 | scheduler |
//! | `lambda_min`, `lambda_max` | 1e-6, 1e6 | scheduler |
//! | `log_wall_time` | false | adds a `wall_seconds` log column |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{Convention, LossKind};
use crate::priors::{PriorMode, Region, RegionMatrix};
use crate::scheduler::SchedulerConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub loss: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_late: f64,
    pub lr_switch_epoch: Option<usize>,
    pub seed: u64,
    pub prior: PriorMode,
    pub focal_gamma: f64,
    pub ls_alpha: f64,
    pub ecp_lambda: f64,
    pub mbls_lambda: f64,
    pub mbls_margin: f64,
    pub nacl_lambda: f64,
    pub crac_fixed_inner: f64,
    pub crac_fixed_outer: f64,
    pub scheduler: SchedulerConfig,
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            output: PathBuf::new(),
            loss: "ce".into(),
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            lr_late: 1e-4,
            lr_switch_epoch: None,
            seed: 0,
            prior: PriorMode::Counts,
            focal_gamma: 3.0,
            ls_alpha: 0.1,
            ecp_lambda: 0.1,
            mbls_lambda: 0.1,
            mbls_margin: 10.0,
            nacl_lambda: 0.1,
            crac_fixed_inner: 0.1,
            crac_fixed_outer: 0.1,
            scheduler: SchedulerConfig::default(),
            log_wall_time: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "output" => self.output = PathBuf::from(v),
            "loss" => {
                LossKind::default_for(v, 2).map_err(|e| Error::Config(e.to_string()))?;
                self.loss = v.to_string();
            }
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_late" => self.lr_late = parse(key, v)?,
            "lr_switch_epoch" => self.lr_switch_epoch = Some(parse(key, v)?),
            "seed" => self.seed = parse(key, v)?,
            "prior" => self.prior = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "convention" => {
                self.scheduler.convention = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "focal_gamma" => self.focal_gamma = parse(key, v)?,
            "ls_alpha" => self.ls_alpha = parse(key, v)?,
            "ecp_lambda" => self.ecp_lambda = parse(key, v)?,
            "mbls_lambda" => self.mbls_lambda = parse(key, v)?,
            "mbls_margin" => self.mbls_margin = parse(key, v)?,
            "nacl_lambda" => self.nacl_lambda = parse(key, v)?,
            "crac_fixed_inner" => self.crac_fixed_inner = parse(key, v)?,
            "crac_fixed_outer" => self.crac_fixed_outer = parse(key, v)?,
            "lambda0" => self.scheduler.lambda0 = parse(key, v)?,
            "rho0" => self.scheduler.rho0 = parse(key, v)?,
            "gamma" => self.scheduler.gamma = parse(key, v)?,
            "mu" => self.scheduler.mu = parse(key, v)?,
            "lambda_min" => self.scheduler.lambda_min = parse(key, v)?,
            "lambda_max" => self.scheduler.lambda_max = parse(key, v)?,
            "log_wall_time" => self.log_wall_time = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let c = &self.scheduler;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("dataset", self.dataset.display().to_string());
        kv("output", self.output.display().to_string());
        kv("loss", self.loss.clone());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_late", self.lr_late.to_string());
        if let Some(e) = self.lr_switch_epoch {
            kv("lr_switch_epoch", e.to_string());
        }
        kv("seed", self.seed.to_string());
        kv(
            "prior",
            match self.prior {
                PriorMode::Counts => "counts",
                PriorMode::Proportions => "proportions",
            }
            .into(),
        );
        kv(
            "convention",
            match c.convention {
                Convention::Signed => "signed",
                Convention::Absolute => "absolute",
            }
            .into(),
        );
        kv("focal_gamma", self.focal_gamma.to_string());
        kv("ls_alpha", self.ls_alpha.to_string());
        kv("ecp_lambda", self.ecp_lambda.to_string());
        kv("mbls_lambda", self.mbls_lambda.to_string());
        kv("mbls_margin", self.mbls_margin.to_string());
        kv("nacl_lambda", self.nacl_lambda.to_string());
        kv("crac_fixed_inner", self.crac_fixed_inner.to_string());
        kv("crac_fixed_outer", self.crac_fixed_outer.to_string());
        kv("lambda0", c.lambda0.to_string());
        kv("rho0", c.rho0.to_string());
        kv("gamma", c.gamma.to_string());
        kv("mu", c.mu.to_string());
        kv("lambda_min", c.lambda_min.to_string());
        kv("lambda_max", c.lambda_max.to_string());
        kv("log_wall_time", self.log_wall_time.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dataset.as_os_str().is_empty() {
            return bad("dataset is required".into());
        }
        if self.output.as_os_str().is_empty() {
            return bad("output is required".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr_late > 0.0) {
            return bad("learning rates must be positive".into());
        }
        self.scheduler.validate()?;
        self.loss_kind(2).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Last epoch (1-based) trained at `lr`.
    pub fn switch_epoch(&self) -> usize {
        self.lr_switch_epoch.unwrap_or(self.epochs / 2)
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch <= self.switch_epoch() {
            self.lr
        } else {
            self.lr_late
        }
    }

    pub fn loss_kind(&self, classes: usize) -> Result<LossKind> {
        let kind = match LossKind::default_for(&self.loss, classes)? {
            LossKind::CrossEntropy => LossKind::CrossEntropy,
            LossKind::Focal { .. } => LossKind::Focal { gamma: self.focal_gamma },
            LossKind::LabelSmoothing { .. } => LossKind::LabelSmoothing { alpha: self.ls_alpha },
            LossKind::Entropy { .. } => LossKind::Entropy { lambda: self.ecp_lambda },
            LossKind::Margin { .. } => LossKind::Margin {
                lambda: self.mbls_lambda,
                margin: self.mbls_margin,
            },
            LossKind::Nacl { .. } => LossKind::Nacl { lambda: self.nacl_lambda },
            LossKind::CracFixed { .. } => {
                let mut w = RegionMatrix::filled(classes, 0.0);
                for k in 0..classes {
                    w.set(k, Region::Inner, self.crac_fixed_inner);
                    w.set(k, Region::Outer, self.crac_fixed_outer);
                }
                LossKind::CracFixed { weights: w }
            }
            LossKind::Crac { .. } => LossKind::Crac {
                convention: self.scheduler.convention,
            },
        };
        Ok(kind)
    }
}
