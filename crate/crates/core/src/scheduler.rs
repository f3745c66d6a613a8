//! Outer iterations of the augmented-Lagrangian scheme.
//!
//! After each training epoch the validation split is scored, and for every
//! class `k` and region `r`
//!
//! * `λ_{k,r}` becomes the pixel-weighted mean of `P′(z, ρ_{k,r}, λ_{k,r})`,
//!   clamped to `[λ_min, λ_max]`;
//! * `ρ_{k,r}` is multiplied by `γ` when the mean `|τ_k − l_k|` fails to
//!   drop below `μ` times its value from the previous epoch.
//!
//! Cells with no validation pixels keep their `λ`, `ρ` and previous
//! violation. The first epoch only records the violation.

use crac_tensor::Tensor;

use crate::checkpoint::NamedTensors;
use crate::error::{invalid, Error, Result};
use crate::losses::{AlmParams, ConstraintStats, Convention};
use crate::penalty::{Penalty, Phr};
use crate::priors::{Region, RegionMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    pub lambda0: f64,
    pub rho0: f64,
    pub gamma: f64,
    pub mu: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub convention: Convention,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.1,
            rho0: 1.0,
            gamma: 1.2,
            mu: 0.9,
            lambda_min: 1e-6,
            lambda_max: 1e6,
            convention: Convention::Signed,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max && self.lambda_max.is_finite()) {
            return bad(format!(
                "need 0 < lambda_min <= lambda_max, got [{}, {}]",
                self.lambda_min, self.lambda_max
            ));
        }
        if !(self.lambda0 >= self.lambda_min && self.lambda0 <= self.lambda_max) {
            return bad(format!("lambda0 {} outside [lambda_min, lambda_max]", self.lambda0));
        }
        if !(self.rho0 > 0.0 && self.rho0.is_finite()) {
            return bad(format!("rho0 must be positive, got {}", self.rho0));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be at least 1, got {}", self.gamma));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return bad(format!("mu must be in (0, 1], got {}", self.mu));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub config: SchedulerConfig,
    pub lambda: RegionMatrix,
    pub rho: RegionMatrix,
    /// Mean `|τ − l|` from the previous epoch, absent before the first.
    pub prev_violation: Option<RegionMatrix>,
    pub epoch: usize,
}

/// Validation statistics merged over a whole split.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulatedStats {
    pub pixels: [usize; 2],
    pub mean_derivative: RegionMatrix,
    pub mean_abs_violation: RegionMatrix,
}

impl AccumulatedStats {
    pub fn count(&self, region: Region) -> usize {
        self.pixels[region.index()]
    }
}

/// Order-insensitive running sums of batch statistics. The range of batch
/// means is tracked too, so that a cell seeing one value throughout (for
/// instance `P′ = λ` when every `z` is 0) reports it without rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationAccumulator {
    pixels: [usize; 2],
    derivative: RegionMatrix,
    abs_violation: RegionMatrix,
    derivative_range: Vec<(f64, f64)>,
}

impl ValidationAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            pixels: [0; 2],
            derivative: RegionMatrix::filled(classes, 0.0),
            abs_violation: RegionMatrix::filled(classes, 0.0),
            derivative_range: vec![(f64::INFINITY, f64::NEG_INFINITY); 2 * classes],
        }
    }

    pub fn add(&mut self, batch: &ConstraintStats) -> Result<()> {
        if batch.mean_derivative.classes() != self.derivative.classes() {
            return Err(invalid("batch statistics have the wrong class count"));
        }
        for (k, r) in self.derivative.clone().cells() {
            let n = batch.count(r) as f64;
            if n > 0.0 {
                let v = batch.mean_derivative.get(k, r);
                let c = &mut self.derivative_range[k * 2 + r.index()];
                *c = (c.0.min(v), c.1.max(v));
            }
            self.derivative
                .set(k, r, self.derivative.get(k, r) + n * batch.mean_derivative.get(k, r));
            self.abs_violation
                .set(k, r, self.abs_violation.get(k, r) + n * batch.mean_abs_violation.get(k, r));
        }
        self.pixels[0] += batch.pixels[0];
        self.pixels[1] += batch.pixels[1];
        Ok(())
    }

    pub fn merge(&mut self, other: &ValidationAccumulator) {
        for i in 0..self.derivative.values().len() {
            self.derivative.values_mut()[i] += other.derivative.values()[i];
            self.abs_violation.values_mut()[i] += other.abs_violation.values()[i];
            let (a, b) = (self.derivative_range[i], other.derivative_range[i]);
            self.derivative_range[i] = (a.0.min(b.0), a.1.max(b.1));
        }
        self.pixels[0] += other.pixels[0];
        self.pixels[1] += other.pixels[1];
    }

    pub fn finish(&self) -> Result<AccumulatedStats> {
        if self.pixels == [0, 0] {
            return Err(invalid("validation split has no pixels"));
        }
        let mean = |m: &RegionMatrix| {
            let mut out = m.clone();
            for (k, r) in m.cells() {
                let n = self.pixels[r.index()];
                out.set(k, r, if n == 0 { 0.0 } else { m.get(k, r) / n as f64 });
            }
            out
        };
        let mut mean_derivative = mean(&self.derivative);
        for (k, r) in self.derivative.cells() {
            let (lo, hi) = self.derivative_range[k * 2 + r.index()];
            if lo == hi {
                mean_derivative.set(k, r, lo);
            }
        }
        Ok(AccumulatedStats {
            pixels: self.pixels,
            mean_derivative,
            mean_abs_violation: mean(&self.abs_violation),
        })
    }
}

pub fn accumulate_validation<'a>(
    classes: usize,
    stream: impl IntoIterator<Item = &'a ConstraintStats>,
) -> Result<AccumulatedStats> {
    let mut acc = ValidationAccumulator::new(classes);
    for s in stream {
        acc.add(s)?;
    }
    acc.finish()
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

impl SchedulerState {
    pub fn new(classes: usize, config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(invalid(format!("class count must be at least 2, got {classes}")));
        }
        Ok(Self {
            lambda: RegionMatrix::filled(classes, config.lambda0),
            rho: RegionMatrix::filled(classes, config.rho0),
            prev_violation: None,
            epoch: 0,
            config,
        })
    }

    pub fn classes(&self) -> usize {
        self.lambda.classes()
    }

    pub fn alm_params(&self) -> AlmParams<'_> {
        AlmParams {
            lambda: &self.lambda,
            rho: &self.rho,
            convention: self.config.convention,
        }
    }

    fn check(&self, acc: &AccumulatedStats) -> Result<()> {
        if acc.mean_derivative.classes() != self.classes() {
            return Err(invalid("accumulated statistics have the wrong class count"));
        }
        if !acc.mean_derivative.is_finite() || !acc.mean_abs_violation.is_finite() {
            return Err(Error::NonFinite("accumulated validation statistics".into()));
        }
        Ok(())
    }

    /// Sets each `λ_{k,r}` to its clamped validation mean of `P′` and
    /// advances the epoch index.
    pub fn update_multipliers(&mut self, acc: &AccumulatedStats) -> Result<()> {
        self.check(acc)?;
        let (lo, hi) = (self.config.lambda_min, self.config.lambda_max);
        for (k, r) in self.lambda.clone().cells() {
            if acc.count(r) > 0 {
                self.lambda.set(k, r, acc.mean_derivative.get(k, r).clamp(lo, hi));
            }
        }
        self.epoch += 1;
        Ok(())
    }

    /// Grows `ρ_{k,r}` by `γ` where the violation did not decrease enough,
    /// then records the current violation.
    pub fn update_rho(&mut self, acc: &AccumulatedStats) -> Result<()> {
        self.check(acc)?;
        let current = &acc.mean_abs_violation;
        let mut next = self.prev_violation.clone().unwrap_or_else(|| current.clone());
        for (k, r) in self.rho.clone().cells() {
            if acc.count(r) == 0 {
                continue;
            }
            if let Some(prev) = &self.prev_violation {
                if current.get(k, r) > self.config.mu * prev.get(k, r) {
                    self.rho.set(k, r, self.config.gamma * self.rho.get(k, r));
                }
            }
            next.set(k, r, current.get(k, r));
        }
        self.prev_violation = Some(next);
        Ok(())
    }

    /// Rounds the state to `f32` precision so that a checkpoint, which
    /// stores `f32`, restores it exactly. The `λ` bounds are rounded too,
    /// so clamped values stay representable.
    pub fn quantize(&mut self) {
        self.config.lambda_min = f32_round(self.config.lambda_min);
        self.config.lambda_max = f32_round(self.config.lambda_max);
        let (lo, hi) = (self.config.lambda_min, self.config.lambda_max);
        self.lambda = self.lambda.map(|v| f32_round(v).clamp(lo, hi));
        self.rho = self.rho.map(f32_round);
        self.prev_violation = self.prev_violation.as_ref().map(|m| m.map(f32_round));
    }

    pub fn to_named(&self, out: &mut NamedTensors) -> Result<()> {
        let k = self.classes();
        let f = |m: &RegionMatrix| m.values().iter().map(|&v| v as f32).collect::<Vec<_>>();
        out.push("scheduler.lambda", vec![k, 2], f(&self.lambda))?;
        out.push("scheduler.rho", vec![k, 2], f(&self.rho))?;
        if let Some(prev) = &self.prev_violation {
            out.push("scheduler.prev_violation", vec![k, 2], f(prev))?;
        }
        out.push("scheduler.epoch", vec![1], vec![self.epoch as f32])?;
        Ok(())
    }

    /// Restores the state saved by [`SchedulerState::to_named`] under the
    /// given configuration.
    pub fn from_named(named: &NamedTensors, config: SchedulerConfig, classes: usize) -> Result<Self> {
        let mut state = Self::new(classes, config)?;
        let read = |name: &str| -> Result<RegionMatrix> {
            let e = named.require(name)?;
            if e.shape != [classes, 2] {
                return Err(Error::Incompatible(format!("{name} has shape {:?}", e.shape)));
            }
            let mut m = RegionMatrix::filled(classes, 0.0);
            for (dst, &src) in m.values_mut().iter_mut().zip(&e.data) {
                *dst = src as f64;
            }
            Ok(m)
        };
        state.lambda = read("scheduler.lambda")?;
        state.rho = read("scheduler.rho")?;
        state.prev_violation = match named.get("scheduler.prev_violation") {
            Some(_) => Some(read("scheduler.prev_violation")?),
            None => None,
        };
        state.epoch = named.require("scheduler.epoch")?.data.first().copied().unwrap_or(0.0) as usize;
        state.quantize();
        Ok(state)
    }

    /// `λ` then `ρ` as a flat `[K·2]` tensor each, for logging.
    pub fn snapshot(&self) -> (Tensor, Tensor) {
        let k = self.classes();
        (
            Tensor::new(vec![k, 2], self.lambda.values().to_vec()).expect("shape"),
            Tensor::new(vec![k, 2], self.rho.values().to_vec()).expect("shape"),
        )
    }
}

pub type ScalarFn = Box<dyn Fn(&[f64]) -> f64>;
pub type GradFn = Box<dyn Fn(&[f64]) -> Vec<f64>>;

/// `minimize g(x) subject to h_i(x) ≤ 0`.
pub struct ToyProblem {
    pub objective: ScalarFn,
    pub objective_grad: GradFn,
    pub constraints: Vec<(ScalarFn, GradFn)>,
}

impl ToyProblem {
    /// `(x − a)²` subject to `x ≤ b`.
    pub fn shifted_quadratic(a: f64, b: f64) -> Self {
        Self {
            objective: Box::new(move |x| (x[0] - a).powi(2)),
            objective_grad: Box::new(move |x| vec![2.0 * (x[0] - a)]),
            constraints: vec![(Box::new(move |x| x[0] - b), Box::new(|_| vec![1.0]))],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToySolverConfig {
    pub scheduler: SchedulerConfig,
    pub step: f64,
    pub inner_steps: usize,
    pub outer_iters: usize,
}

impl Default for ToySolverConfig {
    fn default() -> Self {
        Self {
            scheduler: SchedulerConfig::default(),
            step: 0.01,
            inner_steps: 500,
            outer_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySolution {
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    /// Largest `max(h_i(x), 0)`.
    pub violation: f64,
}

/// Augmented-Lagrangian solve with a gradient-descent inner loop. `ρ_i`
/// grows when `|max(h_i, −λ_i/ρ_i)|` fails the sufficient-decrease test.
pub fn solve_toy(problem: &ToyProblem, x0: &[f64], config: &ToySolverConfig) -> Result<ToySolution> {
    let sc = &config.scheduler;
    sc.validate()?;
    if !(config.step > 0.0) {
        return Err(invalid("step must be positive"));
    }
    let m = problem.constraints.len();
    let mut x = x0.to_vec();
    let mut lambda = vec![sc.lambda0; m];
    let mut rho = vec![sc.rho0; m];
    let mut prev: Option<Vec<f64>> = None;
    for _ in 0..config.outer_iters {
        for _ in 0..config.inner_steps {
            let mut grad = (problem.objective_grad)(&x);
            for (i, (h, dh)) in problem.constraints.iter().enumerate() {
                let d = Phr.eval(h(&x), rho[i], lambda[i]).derivative;
                for (gj, dj) in grad.iter_mut().zip(dh(&x)) {
                    *gj += d * dj;
                }
            }
            for (xj, gj) in x.iter_mut().zip(&grad) {
                *xj -= config.step * gj;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("toy solver iterate diverged".into()));
            }
        }
        let hs: Vec<f64> = problem.constraints.iter().map(|(h, _)| h(&x)).collect();
        let measure: Vec<f64> = (0..m).map(|i| hs[i].max(-lambda[i] / rho[i]).abs()).collect();
        for i in 0..m {
            lambda[i] = Phr.eval(hs[i], rho[i], lambda[i]).derivative.clamp(sc.lambda_min, sc.lambda_max);
            if let Some(p) = &prev {
                if measure[i] > sc.mu * p[i] {
                    rho[i] *= sc.gamma;
                }
            }
        }
        prev = Some(measure);
    }
    let violation = problem
        .constraints
        .iter()
        .map(|(h, _)| h(&x).max(0.0))
        .fold(0.0, f64::max);
    Ok(ToySolution { x, lambda, rho, violation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(classes: usize, pixels: [usize; 2], d: f64, a: f64) -> ConstraintStats {
        ConstraintStats {
            pixels,
            mean_derivative: RegionMatrix::filled(classes, d),
            mean_abs_violation: RegionMatrix::filled(classes, a),
            mean_violation: RegionMatrix::filled(classes, 0.0),
        }
    }

    #[test]
    fn weighted_mean_over_batches() {
        let acc = accumulate_validation(2, &[stats(2, [10, 10], 1.0, 1.0), stats(2, [30, 30], 3.0, 3.0)]).unwrap();
        assert_eq!(acc.mean_derivative.get(1, Region::Outer), 2.5);
        let same = accumulate_validation(2, &[stats(2, [5, 7], 1.5, 0.2), stats(2, [5, 7], 1.5, 0.2)]).unwrap();
        assert!((same.mean_derivative.get(0, Region::Inner) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn constant_stream_mean_is_exact() {
        let batches: Vec<_> = [3, 7, 11, 1].iter().map(|&n| stats(2, [n, n + 2], 0.1, 0.3)).collect();
        let acc = accumulate_validation(2, &batches).unwrap();
        assert!(acc.mean_derivative.values().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn empty_validation_is_an_error() {
        assert!(accumulate_validation(2, &[]).is_err());
    }

    #[test]
    fn zero_pixel_cells_carry_forward() {
        let mut s = SchedulerState::new(2, SchedulerConfig::default()).unwrap();
        let acc = accumulate_validation(2, &[stats(2, [10, 0], 5.0, 1.0)]).unwrap();
        s.update_multipliers(&acc).unwrap();
        s.update_rho(&acc).unwrap();
        let acc = accumulate_validation(2, &[stats(2, [10, 0], 5.0, 2.0)]).unwrap();
        s.update_multipliers(&acc).unwrap();
        s.update_rho(&acc).unwrap();
        assert_eq!(s.lambda.get(0, Region::Inner), 5.0);
        assert_eq!(s.lambda.get(0, Region::Outer), 0.1);
        assert_eq!(s.rho.get(0, Region::Inner), 1.2);
        assert_eq!(s.rho.get(0, Region::Outer), 1.0);
        assert_eq!(s.epoch, 2);
    }

    #[test]
    fn rho_rule_examples() {
        let run = |gamma: f64, prev: f64, cur: f64| {
            let cfg = SchedulerConfig {
                gamma,
                ..Default::default()
            };
            let mut s = SchedulerState::new(2, cfg).unwrap();
            s.update_rho(&accumulate_validation(2, &[stats(2, [1, 1], 1.0, prev)]).unwrap()).unwrap();
            assert_eq!(s.rho.get(0, Region::Inner), 1.0);
            s.update_rho(&accumulate_validation(2, &[stats(2, [1, 1], 1.0, cur)]).unwrap()).unwrap();
            s.rho.get(0, Region::Inner)
        };
        assert_eq!(run(1.2, 1.0, 1.0), 1.2);
        assert_eq!(run(1.2, 1.0, 0.5), 1.0);
        assert_eq!(run(1.0, 1.0, 5.0), 1.0);
    }

    #[test]
    fn config_validation() {
        let bad = [
            SchedulerConfig { gamma: 0.5, ..Default::default() },
            SchedulerConfig { mu: 0.0, ..Default::default() },
            SchedulerConfig { lambda_min: 0.0, ..Default::default() },
            SchedulerConfig { lambda0: 1e7, ..Default::default() },
            SchedulerConfig { rho0: -1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(SchedulerState::new(3, cfg).is_err());
        }
    }

    #[test]
    fn named_round_trip_after_quantize() {
        let mut s = SchedulerState::new(3, SchedulerConfig::default()).unwrap();
        let acc = accumulate_validation(3, &[stats(3, [4, 9], 0.123456789, 0.3)]).unwrap();
        s.update_multipliers(&acc).unwrap();
        s.update_rho(&acc).unwrap();
        s.quantize();
        let mut named = NamedTensors::new();
        s.to_named(&mut named).unwrap();
        let back = SchedulerState::from_named(&named, SchedulerConfig::default(), 3).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn toy_active_constraint() {
        let sol = solve_toy(&ToyProblem::shifted_quadratic(2.0, 1.0), &[0.0], &ToySolverConfig::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() <= 1e-3, "{sol:?}");
        assert!((sol.lambda[0] - 2.0).abs() <= 0.1, "{sol:?}");
        assert!(sol.violation <= 1e-3);
    }

    #[test]
    fn toy_inactive_constraints() {
        let cfg = ToySolverConfig::default();
        let sol = solve_toy(&ToyProblem::shifted_quadratic(2.0, 3.0), &[0.0], &cfg).unwrap();
        assert!((sol.x[0] - 2.0).abs() <= 1e-3, "{sol:?}");
        assert_eq!(sol.lambda[0], cfg.scheduler.lambda_min);
        let sol = solve_toy(&ToyProblem::shifted_quadratic(0.0, 0.0), &[1.0], &cfg).unwrap();
        assert!(sol.x[0].abs() <= 1e-3, "{sol:?}");
        assert_eq!(sol.lambda[0], cfg.scheduler.lambda_min);
    }

    #[test]
    fn toy_divergence_is_reported() {
        let cfg = ToySolverConfig {
            step: 5.0,
            ..Default::default()
        };
        assert!(solve_toy(&ToyProblem::shifted_quadratic(2.0, 1.0), &[0.0], &cfg).is_err());
    }

    fn cell() -> impl Strategy<Value = (usize, usize, f64, f64)> {
        (0usize..50, 0usize..50, 0.0f64..20.0, 0.0f64..5.0)
    }

    proptest! {
        #[test]
        fn invariants_hold_along_trajectories(epochs in proptest::collection::vec(cell(), 1..15)) {
            let mut s = SchedulerState::new(2, SchedulerConfig::default()).unwrap();
            let mut replay = s.clone();
            for &(a, b, d, v) in &epochs {
                let before = s.rho.clone();
                let Ok(acc) = accumulate_validation(2, &[stats(2, [a, b], d, v)]) else { continue };
                s.update_multipliers(&acc).unwrap();
                s.update_rho(&acc).unwrap();
                replay.update_multipliers(&acc).unwrap();
                replay.update_rho(&acc).unwrap();
                for (k, r) in s.lambda.cells() {
                    let l = s.lambda.get(k, r);
                    prop_assert!(l >= 1e-6 && l <= 1e6);
                    let (old, new) = (before.get(k, r), s.rho.get(k, r));
                    prop_assert!(new == old || new == old * 1.2);
                }
            }
            prop_assert_eq!(s, replay);
        }

        #[test]
        fn multiplier_update_is_order_preserving(l1 in 1e-3f64..10.0, l2 in 1e-3f64..10.0, rho in 0.1f64..10.0, z in 1e-3f64..5.0) {
            let next = |l: f64| Phr.eval(z, rho, l).derivative;
            if l1 <= l2 {
                prop_assert!(next(l1) <= next(l2));
            } else {
                prop_assert!(next(l1) >= next(l2));
            }
        }
    }
}
