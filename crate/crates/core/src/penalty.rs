//! Penalty-Lagrangian functions and executable checks of the axioms an
//! augmented-Lagrangian penalty must satisfy.
//!
//! A penalty `P(z, ρ, λ)` for the constraint `z ≤ 0` must have
//!
//! 1. `P′(z, ρ, λ) ≥ 0`,
//! 2. `P′(0, ρ, λ) = λ`,
//! 3. `P′(z, ρ, λ) → ∞` as `ρ → ∞` when `z > 0`,
//! 4. `P′(z, ρ, λ) → 0` as `ρ → ∞` when `z < 0`,
//!
//! with `P′ = ∂P/∂z`. The limits are checked along an explicit geometric
//! `ρ` sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyEval {
    pub value: f64,
    /// `∂P/∂z`.
    pub derivative: f64,
}

pub trait Penalty {
    fn name(&self) -> &str;

    /// Evaluates without argument checks.
    fn eval(&self, z: f64, rho: f64, lambda: f64) -> PenaltyEval;
}

/// Powell-Hestenes-Rockafellar penalty: `λz + ½ρz²` while `λ + ρz ≥ 0`,
/// `−λ²/(2ρ)` below.
#[derive(Debug, Clone, Copy, Default)]
pub struct Phr;

impl Penalty for Phr {
    fn name(&self) -> &str {
        "phr"
    }

    fn eval(&self, z: f64, rho: f64, lambda: f64) -> PenaltyEval {
        let slope = lambda + rho * z;
        if slope >= 0.0 {
            PenaltyEval {
                value: lambda * z + 0.5 * rho * z * z,
                derivative: slope,
            }
        } else {
            PenaltyEval {
                value: -lambda * lambda / (2.0 * rho),
                derivative: 0.0,
            }
        }
    }
}

/// `λz`. Not a valid penalty: its derivative ignores `ρ`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearPenalty;

impl Penalty for LinearPenalty {
    fn name(&self) -> &str {
        "linear"
    }

    fn eval(&self, z: f64, _rho: f64, lambda: f64) -> PenaltyEval {
        PenaltyEval {
            value: lambda * z,
            derivative: lambda,
        }
    }
}

fn check_args(z: f64, rho: f64, lambda: f64) -> Result<()> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(invalid(format!("penalty parameter must be positive, got {rho}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("multiplier must be positive, got {lambda}")));
    }
    if !z.is_finite() {
        return Err(invalid(format!("constraint value must be finite, got {z}")));
    }
    Ok(())
}

pub fn phr(z: f64, rho: f64, lambda: f64) -> Result<PenaltyEval> {
    check_args(z, rho, lambda)?;
    Ok(Phr.eval(z, rho, lambda))
}

/// `ρ = 10^0, 10^1, …, 10^12`.
pub fn default_rho_sequence() -> Vec<f64> {
    (0..=12).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone)]
pub struct AxiomCheckConfig {
    pub samples: usize,
    pub rho_sequence: Vec<f64>,
    pub lambda_range: (f64, f64),
    pub z_range: (f64, f64),
    /// Axiom 3 requires the last derivative to exceed this.
    pub divergence_bound: f64,
    /// Axiom 4 requires the last derivative to fall below this.
    pub vanishing_bound: f64,
    pub seed: u64,
}

impl Default for AxiomCheckConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            rho_sequence: default_rho_sequence(),
            lambda_range: (1e-3, 10.0),
            z_range: (1e-3, 10.0),
            divergence_bound: 1e8,
            vanishing_bound: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomResult {
    pub axiom: u8,
    pub checked: usize,
    pub failures: usize,
    /// `(z, ρ, λ)` of the first failure.
    pub first_failure: Option<(f64, f64, f64)>,
}

impl AxiomResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomReport {
    pub penalty: String,
    pub axioms: [AxiomResult; 4],
}

impl AxiomReport {
    pub fn passed(&self) -> bool {
        self.axioms.iter().all(AxiomResult::passed)
    }

    pub fn axiom(&self, n: u8) -> &AxiomResult {
        &self.axioms[n as usize - 1]
    }
}

impl std::fmt::Display for AxiomReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for a in &self.axioms {
            write!(
                f,
                "{} axiom {}: {} ({} checked, {} failed)",
                self.penalty,
                a.axiom,
                if a.passed() { "pass" } else { "FAIL" },
                a.checked,
                a.failures
            )?;
            if let Some((z, rho, lambda)) = a.first_failure {
                write!(f, " first at z={z:e} rho={rho:e} lambda={lambda:e}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

struct Tally {
    axiom: u8,
    checked: usize,
    failures: usize,
    first: Option<(f64, f64, f64)>,
}

impl Tally {
    fn new(axiom: u8) -> Self {
        Self {
            axiom,
            checked: 0,
            failures: 0,
            first: None,
        }
    }

    fn record(&mut self, ok: bool, at: (f64, f64, f64)) {
        self.checked += 1;
        if !ok {
            self.failures += 1;
            self.first.get_or_insert(at);
        }
    }

    fn finish(self) -> AxiomResult {
        AxiomResult {
            axiom: self.axiom,
            checked: self.checked,
            failures: self.failures,
            first_failure: self.first,
        }
    }
}

pub fn check_axioms(penalty: &dyn Penalty, config: &AxiomCheckConfig) -> Result<AxiomReport> {
    if config.samples < 1000 {
        return Err(invalid(format!("need at least 1000 samples, got {}", config.samples)));
    }
    if config.rho_sequence.len() < 2 || config.rho_sequence.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("rho sequence must be strictly increasing with at least two entries"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rho_range = (config.rho_sequence[0], *config.rho_sequence.last().unwrap());
    let mut tallies = [Tally::new(1), Tally::new(2), Tally::new(3), Tally::new(4)];
    for _ in 0..config.samples {
        let lambda = log_uniform(&mut rng, config.lambda_range);
        let magnitude = log_uniform(&mut rng, config.z_range);
        let z = if rng.gen::<bool>() { magnitude } else { -magnitude };
        let rho = log_uniform(&mut rng, rho_range);

        let d = penalty.eval(z, rho, lambda).derivative;
        tallies[0].record(d >= 0.0, (z, rho, lambda));

        let d0 = penalty.eval(0.0, rho, lambda).derivative;
        tallies[1].record((d0 - lambda).abs() <= 1e-12, (0.0, rho, lambda));

        let path: Vec<f64> = config
            .rho_sequence
            .iter()
            .map(|&r| penalty.eval(z, r, lambda).derivative)
            .collect();
        let last = *path.last().unwrap();
        let rho_last = rho_range.1;
        if z > 0.0 {
            let monotone = path.windows(2).all(|w| w[1] >= w[0]);
            tallies[2].record(monotone && last > config.divergence_bound, (z, rho_last, lambda));
        } else {
            let monotone = path.windows(2).all(|w| w[1] <= w[0]);
            tallies[3].record(monotone && last < config.vanishing_bound, (z, rho_last, lambda));
        }
    }
    let [a1, a2, a3, a4] = tallies;
    Ok(AxiomReport {
        penalty: penalty.name().to_string(),
        axioms: [a1.finish(), a2.finish(), a3.finish(), a4.finish()],
    })
}
