//! Self-checks behind the `check` command: penalty axioms, gradient
//! fidelity of every primitive and loss, and the toy constrained problems.

use crac_tensor::{grad_check, GradCheckOptions, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{compute_loss, AlmParams, BatchTargets, Convention, LossKind};
use crate::penalty::{check_axioms, AxiomCheckConfig, AxiomReport, LinearPenalty, Penalty, Phr};
use crate::priors::{PriorMode, RegionMatrix};
use crate::scheduler::{solve_toy, ToyProblem, ToySolution, ToySolverConfig};

pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

impl GradSuiteResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= GRAD_TOLERANCE
    }
}

type Builder = fn(&mut Graph, &[Var]) -> crac_tensor::Result<Var>;

/// `(name, input shapes, positive inputs, builder)`. Builders return a
/// tensor that is reduced against a random weight tensor.
fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, bool, Builder)> {
    let s = || vec![2, 3, 4, 4];
    vec![
        ("add", vec![s(), s()], false, |g, v| g.add(v[0], v[1])),
        ("sub", vec![s(), s()], false, |g, v| g.sub(v[0], v[1])),
        ("mul", vec![s(), s()], false, |g, v| g.mul(v[0], v[1])),
        ("scale", vec![s()], false, |g, v| g.scale(v[0], -1.7)),
        ("offset", vec![s()], false, |g, v| g.offset(v[0], 0.3)),
        ("matmul", vec![vec![3, 4], vec![4, 5]], false, |g, v| g.matmul(v[0], v[1])),
        ("conv2d", vec![vec![2, 2, 4, 4], vec![3, 2, 3, 3], vec![3]], false, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]))
        }),
        ("conv2d_1x1", vec![vec![1, 3, 4, 4], vec![2, 3, 1, 1]], false, |g, v| g.conv2d(v[0], v[1], None)),
        ("relu", vec![s()], false, |g, v| g.relu(v[0])),
        ("max_pool2", vec![s()], false, |g, v| g.max_pool2(v[0])),
        ("upsample2", vec![s()], false, |g, v| g.upsample2(v[0])),
        ("concat_channels", vec![s(), vec![2, 2, 4, 4]], false, |g, v| g.concat_channels(v[0], v[1])),
        ("exp", vec![s()], false, |g, v| g.exp(v[0])),
        ("log", vec![s()], true, |g, v| g.log(v[0])),
        ("abs", vec![s()], false, |g, v| g.abs(v[0])),
        ("powf", vec![s()], true, |g, v| g.powf(v[0], 2.5)),
        ("sum", vec![s()], false, |g, v| g.sum(v[0])),
        ("mean", vec![s()], false, |g, v| g.mean(v[0])),
        ("softmax", vec![s()], false, |g, v| g.softmax(v[0])),
        ("log_softmax", vec![s()], false, |g, v| g.log_softmax(v[0])),
        ("sum_channels", vec![s()], false, |g, v| g.sum_channels(v[0])),
        ("max_channels", vec![s()], false, |g, v| g.max_channels(v[0])),
        ("expand_channels", vec![vec![2, 1, 4, 4]], false, |g, v| g.expand_channels(v[0], 3)),
        ("softmax_cross_entropy", vec![s()], false, |g, v| {
            let labels: Vec<usize> = (0..32).map(|i| (i * 7 + 1) % 3).collect();
            g.softmax_cross_entropy(v[0], &labels)
        }),
        ("phr", vec![s()], false, |g, v| {
            g.pointwise(v[0], "phr", |z, i| {
                let (rho, lambda) = (0.5 + (i % 3) as f64, 0.2 + (i % 5) as f64 * 0.3);
                let e = Phr.eval(z, rho, lambda);
                (e.value, e.derivative, lambda + rho * z >= 0.0)
            })
        }),
    ]
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor {
    let n = shape.iter().product();
    let range = if positive { 0.1..2.0 } else { -2.0..2.0 };
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(range.clone())).collect()).expect("shape")
}

fn tally(name: &str, reports: impl IntoIterator<Item = crac_tensor::GradCheckReport>) -> GradSuiteResult {
    let mut out = GradSuiteResult {
        name: name.to_string(),
        instances: 0,
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for r in reports {
        out.instances += 1;
        out.max_rel_error = out.max_rel_error.max(r.max_rel_error());
        out.checked += r.checked();
        out.excluded += r.excluded();
    }
    out
}

/// Central-difference checks of every primitive on `instances` random
/// inputs with values in `[-2, 2]` (`[0.1, 2]` where the domain requires).
pub fn primitive_suite(instances: usize, seed: u64) -> Result<Vec<GradSuiteResult>> {
    let opts = GradCheckOptions::new(GRAD_STEP, GRAD_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, positive, build) in primitive_cases() {
        let mut reports = Vec::with_capacity(instances);
        for _ in 0..instances {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, positive)).collect();
            let mut probe = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect::<crac_tensor::Result<_>>()?;
            let y = build(&mut probe, &vars)?;
            let out_shape = probe.value(y).shape().to_vec();
            let weights = random_tensor(&mut rng, &out_shape, false);
            let report = grad_check::<_, Error>(
                &inputs,
                |g, v| {
                    let y = build(g, v)?;
                    let w = g.constant(weights.clone())?;
                    let p = g.mul(y, w)?;
                    Ok(g.sum(p)?)
                },
                &opts,
            )?;
            reports.push(report);
        }
        out.push(tally(name, reports));
    }
    Ok(out)
}

/// Central-difference checks of every training loss on `instances` random
/// 4×4 images with three classes.
pub fn loss_suite(instances: usize, seed: u64) -> Result<Vec<GradSuiteResult>> {
    let opts = GradCheckOptions::new(GRAD_STEP, GRAD_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 3;
    let mut out = Vec::new();
    for name in LossKind::NAMES {
        let mut reports = Vec::with_capacity(instances);
        for i in 0..instances {
            let mut kind = LossKind::default_for(name, classes)?;
            if let LossKind::CracFixed { weights } = &mut kind {
                for w in weights.values_mut() {
                    *w = rng.gen_range(0.05..1.0);
                }
            }
            let convention = if i % 2 == 0 { Convention::Signed } else { Convention::Absolute };
            if let LossKind::Crac { convention: c } = &mut kind {
                *c = convention;
            }
            let labels: Vec<u8> = (0..16).map(|_| rng.gen_range(0..classes as u8)).collect();
            let t = BatchTargets::from_labels(&labels, 4, 4, classes, PriorMode::Counts)?;
            let x = random_tensor(&mut rng, &t.shape(), false).map(|v| 4.0 * v + 2.0);
            let mut lambda = RegionMatrix::filled(classes, 0.0);
            lambda.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.05..2.0));
            let mut rho = RegionMatrix::filled(classes, 0.0);
            rho.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.1..3.0));
            let alm = AlmParams {
                lambda: &lambda,
                rho: &rho,
                convention,
            };
            let report = grad_check::<_, Error>(
                &[x],
                |g, v| Ok(compute_loss(g, v[0], &t, &kind, Some(&alm))?.loss),
                &opts,
            )?;
            reports.push(report);
        }
        out.push(tally(name, reports));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ToyResult {
    pub name: &'static str,
    pub solution: ToySolution,
    pub expected_x: f64,
    /// `None` means the multiplier must end at `λ_min`.
    pub expected_lambda: Option<f64>,
    pub passed: bool,
}

/// The three scalar problems with known KKT points.
pub fn toy_suite() -> Result<Vec<ToyResult>> {
    let cfg = ToySolverConfig::default();
    let cases: [(&str, f64, f64, f64, f64, Option<f64>); 3] = [
        ("(x-2)^2 s.t. x<=1", 2.0, 1.0, 0.0, 1.0, Some(2.0)),
        ("(x-2)^2 s.t. x<=3", 2.0, 3.0, 0.0, 2.0, None),
        ("x^2 s.t. x<=0", 0.0, 0.0, 1.0, 0.0, None),
    ];
    cases
        .into_iter()
        .map(|(name, a, b, x0, expected_x, expected_lambda)| {
            let solution = solve_toy(&ToyProblem::shifted_quadratic(a, b), &[x0], &cfg)?;
            let x_ok = (solution.x[0] - expected_x).abs() <= 1e-3 && solution.violation <= 1e-3;
            let l_ok = match expected_lambda {
                Some(l) => (solution.lambda[0] - l).abs() <= 0.1,
                None => solution.lambda[0] == cfg.scheduler.lambda_min,
            };
            Ok(ToyResult {
                name,
                solution,
                expected_x,
                expected_lambda,
                passed: x_ok && l_ok,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub axioms: AxiomReport,
    pub primitives: Vec<GradSuiteResult>,
    pub losses: Vec<GradSuiteResult>,
    pub toys: Vec<ToyResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.axioms.passed()
            && self.primitives.iter().all(GradSuiteResult::passed)
            && self.losses.iter().all(GradSuiteResult::passed)
            && self.toys.iter().all(|t| t.passed)
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.axioms)?;
        for (kind, suite) in [("primitive", &self.primitives), ("loss", &self.losses)] {
            for r in suite {
                writeln!(
                    f,
                    "grad {kind} {}: {} (max rel err {:.2e}, {} checked, {} excluded, {} instances)",
                    r.name,
                    if r.passed() { "pass" } else { "FAIL" },
                    r.max_rel_error,
                    r.checked,
                    r.excluded,
                    r.instances
                )?;
            }
        }
        for t in &self.toys {
            writeln!(
                f,
                "toy {}: {} (x = {:.6}, lambda = {:.6e})",
                t.name,
                if t.passed { "pass" } else { "FAIL" },
                t.solution.x[0],
                t.solution.lambda[0]
            )?;
        }
        Ok(())
    }
}

/// Runs every check. With `noncompliant`, the axiom suite is run on the
/// linear penalty instead of PHR.
pub fn run_checks(instances: usize, noncompliant: bool) -> Result<CheckReport> {
    let penalty: &dyn Penalty = if noncompliant { &LinearPenalty } else { &Phr };
    Ok(CheckReport {
        axioms: check_axioms(penalty, &AxiomCheckConfig::default())?,
        primitives: primitive_suite(instances, 1)?,
        losses: loss_suite(instances, 2)?,
        toys: toy_suite()?,
    })
}
