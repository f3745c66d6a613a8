//! Training objectives.
//!
//! Every loss takes logits `[N, K, H, W]` recorded in a [`Graph`] and returns
//! a scalar node. Reductions are means: the cross-entropy is averaged over
//! the `P = N·H·W` pixels, and constraint penalties are summed over pixels
//! and classes then divided by `P·K`, so the inner and outer terms add up to
//! a mean over the whole batch.
//!
//! Constraint losses compare each logit `l_k` with the neighbourhood prior
//! `τ_k`. Every class participates at every pixel, including classes absent
//! from the patch (`τ_k = 0`).

use crac_tensor::{Graph, Tensor, Var};

use crate::error::{invalid, Result};
use crate::penalty::{Penalty, Phr};
use crate::priors::{classify_regions, compute_prior, PriorMode, Region, RegionMatrix};

/// Labels, priors and regions for one batch, matching logits `[N, K, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    pub samples: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// One label per pixel, `[N, H, W]`.
    pub labels: Vec<usize>,
    /// Prior values `[N, K, H, W]`.
    pub tau: Vec<f64>,
    /// `[N, H, W]`.
    pub regions: Vec<Region>,
}

impl BatchTargets {
    /// Targets for one label map, using a 3×3 patch.
    pub fn from_labels(labels: &[u8], height: usize, width: usize, classes: usize, mode: PriorMode) -> Result<Self> {
        let prior = compute_prior(labels, height, width, classes, 3)?;
        let mask = classify_regions(labels, height, width, 3)?;
        Ok(Self {
            samples: 1,
            classes,
            height,
            width,
            labels: labels.iter().map(|&l| l as usize).collect(),
            tau: prior.targets(mode),
            regions: mask.regions,
        })
    }

    /// Stacks per-sample targets along the batch axis.
    pub fn concat(parts: &[&BatchTargets]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("cannot stack an empty batch"))?;
        let mut out = Self {
            samples: 0,
            classes: first.classes,
            height: first.height,
            width: first.width,
            labels: Vec::new(),
            tau: Vec::new(),
            regions: Vec::new(),
        };
        for p in parts {
            if (p.classes, p.height, p.width) != (out.classes, out.height, out.width) {
                return Err(invalid("batch targets disagree on class count or extents"));
            }
            out.samples += p.samples;
            out.labels.extend_from_slice(&p.labels);
            out.tau.extend_from_slice(&p.tau);
            out.regions.extend_from_slice(&p.regions);
        }
        Ok(out)
    }

    pub fn pixels(&self) -> usize {
        self.samples * self.height * self.width
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.samples, self.classes, self.height, self.width]
    }

    /// `(pixel, class)` of a flat `[N, K, H, W]` index.
    fn locate(&self, i: usize) -> (usize, usize) {
        let hw = self.height * self.width;
        let n = i / (self.classes * hw);
        let k = (i / hw) % self.classes;
        (n * hw + i % hw, k)
    }

    fn region_of(&self, i: usize) -> (usize, Region) {
        let (p, k) = self.locate(i);
        (k, self.regions[p])
    }

    fn tau_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.tau.clone()).expect("targets shape")
    }

    fn one_hot(&self) -> Tensor {
        let mut data = vec![0.0; self.tau.len()];
        let hw = self.height * self.width;
        for (p, &l) in self.labels.iter().enumerate() {
            let n = p / hw;
            data[(n * self.classes + l) * hw + p % hw] = 1.0;
        }
        Tensor::new(self.shape().to_vec(), data).expect("targets shape")
    }

    fn check(&self, g: &Graph, logits: Var) -> Result<()> {
        let shape = g.try_value(logits)?.shape();
        if shape != self.shape() {
            return Err(crac_tensor::TensorError::ShapeMismatch {
                op: "loss",
                expected: self.shape().to_vec(),
                found: shape.to_vec(),
            }
            .into());
        }
        Ok(())
    }
}

/// How the constraint argument is formed from prior and logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Convention {
    /// `z = τ_k − l_k`.
    #[default]
    Signed,
    /// `z = |τ_k − l_k|`.
    Absolute,
}

impl Convention {
    pub fn apply(self, tau: f64, logit: f64) -> f64 {
        match self {
            Convention::Signed => tau - logit,
            Convention::Absolute => (tau - logit).abs(),
        }
    }
}

impl std::str::FromStr for Convention {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed" => Ok(Convention::Signed),
            "absolute" => Ok(Convention::Absolute),
            _ => Err(invalid(format!("unknown constraint convention {s:?}"))),
        }
    }
}

/// Multipliers and penalty parameters for the augmented-Lagrangian loss.
#[derive(Debug, Clone, Copy)]
pub struct AlmParams<'a> {
    pub lambda: &'a RegionMatrix,
    pub rho: &'a RegionMatrix,
    pub convention: Convention,
}

impl AlmParams<'_> {
    fn check(&self, classes: usize) -> Result<()> {
        for (name, m) in [("lambda", self.lambda), ("rho", self.rho)] {
            if m.classes() != classes {
                return Err(invalid(format!("{name} has {} rows, expected {classes}", m.classes())));
            }
            if m.values().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(invalid(format!("{name} entries must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// The data term: cross-entropy for constraint losses, the whole
    /// objective for the other baselines.
    pub ce_term: f64,
    pub penalty_inner: f64,
    pub penalty_outer: f64,
    /// Mean `τ_k − l_k` per class and region, 0 for empty cells.
    pub violation: RegionMatrix,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

/// Per-(class, region) constraint statistics for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintStats {
    /// Pixels per region, `[inner, outer]`. Each class sees every pixel.
    pub pixels: [usize; 2],
    /// Mean penalty derivative `P′(z, ρ, λ)`.
    pub mean_derivative: RegionMatrix,
    /// Mean `|τ_k − l_k|`.
    pub mean_abs_violation: RegionMatrix,
    /// Mean `τ_k − l_k`.
    pub mean_violation: RegionMatrix,
}

impl ConstraintStats {
    pub fn count(&self, region: Region) -> usize {
        self.pixels[region.index()]
    }
}

fn region_counts(t: &BatchTargets) -> [usize; 2] {
    let mut c = [0; 2];
    for r in &t.regions {
        c[r.index()] += 1;
    }
    c
}

/// Sums `f(i)` per (class, region) over all elements, returning means. A
/// cell whose values are all equal gets that value exactly.
fn cell_means(t: &BatchTargets, counts: [usize; 2], f: impl Fn(usize) -> f64) -> RegionMatrix {
    let mut m = RegionMatrix::filled(t.classes, 0.0);
    let mut range = vec![(f64::INFINITY, f64::NEG_INFINITY); m.values().len()];
    for i in 0..t.tau.len() {
        let (k, r) = t.region_of(i);
        let v = f(i);
        m.set(k, r, m.get(k, r) + v);
        let c = &mut range[k * 2 + r.index()];
        *c = (c.0.min(v), c.1.max(v));
    }
    for (k, r) in m.clone().cells() {
        let n = counts[r.index()];
        let (lo, hi) = range[k * 2 + r.index()];
        let mean = match n {
            0 => 0.0,
            _ if lo == hi => lo,
            _ => m.get(k, r) / n as f64,
        };
        m.set(k, r, mean);
    }
    m
}

/// Constraint statistics under the given multipliers, from logit values.
pub fn constraint_stats(logits: &Tensor, t: &BatchTargets, alm: &AlmParams) -> Result<ConstraintStats> {
    if logits.shape() != t.shape() {
        return Err(invalid("logits do not match batch targets"));
    }
    alm.check(t.classes)?;
    let l = logits.data();
    let pixels = region_counts(t);
    let mean_derivative = cell_means(t, pixels, |i| {
        let (k, r) = t.region_of(i);
        let z = alm.convention.apply(t.tau[i], l[i]);
        Phr.eval(z, alm.rho.get(k, r), alm.lambda.get(k, r)).derivative
    });
    Ok(ConstraintStats {
        pixels,
        mean_derivative,
        mean_abs_violation: cell_means(t, pixels, |i| (t.tau[i] - l[i]).abs()),
        mean_violation: cell_means(t, pixels, |i| t.tau[i] - l[i]),
    })
}

/// Mean over pixels of `−log softmax(l)[y]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(g.softmax_cross_entropy(logits, labels)?)
}

/// Builds a constraint loss `CE + Σ_i w_i / (P·K)` where `w` is the node
/// produced by `penalty` from the constraint argument, and `split` gives the
/// numeric per-element penalty for the region breakdown.
fn constrained(
    g: &mut Graph,
    logits: Var,
    t: &BatchTargets,
    penalty: impl FnOnce(&mut Graph, Var) -> Result<Var>,
    split: impl Fn(usize, f64) -> f64,
) -> Result<LossOutput> {
    t.check(g, logits)?;
    let ce = cross_entropy(g, logits, &t.labels)?;
    let tau = g.constant(t.tau_tensor())?;
    let z = g.sub(tau, logits)?;
    let per_element = penalty(g, z)?;
    let summed = g.sum(per_element)?;
    let norm = (t.pixels() * t.classes) as f64;
    let pen = g.scale(summed, 1.0 / norm)?;
    let loss = g.add(ce, pen)?;

    let zv = g.value(z).data();
    let mut parts = [0.0; 2];
    for (i, &zi) in zv.iter().enumerate() {
        let (_, r) = t.region_of(i);
        parts[r.index()] += split(i, zi);
    }
    let pixels = region_counts(t);
    let violation = cell_means(t, pixels, |i| zv[i]);
    let breakdown = LossBreakdown {
        total: g.value(loss).item()?,
        ce_term: g.value(ce).item()?,
        penalty_inner: parts[0] / norm,
        penalty_outer: parts[1] / norm,
        violation,
    };
    Ok(LossOutput { loss, breakdown })
}

/// `CE + λ · mean_{i,k} |τ_k − l_k|`.
pub fn nacl_loss(g: &mut Graph, logits: Var, t: &BatchTargets, lambda: f64) -> Result<LossOutput> {
    if !(lambda >= 0.0) {
        return Err(invalid(format!("nacl weight must be non-negative, got {lambda}")));
    }
    constrained(
        g,
        logits,
        t,
        |g, z| {
            let a = g.abs(z)?;
            Ok(g.scale(a, lambda)?)
        },
        |_, z| lambda * z.abs(),
    )
}

/// Cross-entropy plus `|τ_k − l_k|` weighted by a fixed `λ_{k,r}`.
pub fn crac_fixed_loss(g: &mut Graph, logits: Var, t: &BatchTargets, weights: &RegionMatrix) -> Result<LossOutput> {
    if weights.classes() != t.classes {
        return Err(invalid(format!(
            "weight matrix has {} rows, expected {}",
            weights.classes(),
            t.classes
        )));
    }
    if weights.values().iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(invalid("weights must be non-negative"));
    }
    let w: Vec<f64> = (0..t.tau.len())
        .map(|i| {
            let (k, r) = t.region_of(i);
            weights.get(k, r)
        })
        .collect();
    let wt = Tensor::new(t.shape().to_vec(), w.clone())?;
    constrained(
        g,
        logits,
        t,
        |g, z| {
            let a = g.abs(z)?;
            let wv = g.constant(wt)?;
            Ok(g.mul(a, wv)?)
        },
        |i, z| w[i] * z.abs(),
    )
}

/// Cross-entropy plus the PHR penalty of each constraint argument under
/// per-(class, region) multipliers and penalty parameters.
pub fn crac_alm_loss(g: &mut Graph, logits: Var, t: &BatchTargets, alm: &AlmParams) -> Result<LossOutput> {
    alm.check(t.classes)?;
    let param = |i: usize| {
        let (k, r) = t.region_of(i);
        (alm.rho.get(k, r), alm.lambda.get(k, r))
    };
    let phr_node = |g: &mut Graph, z: Var| -> Result<Var> {
        Ok(g.pointwise(z, "phr", |v, i| {
            let (rho, lambda) = param(i);
            let e = Phr.eval(v, rho, lambda);
            (e.value, e.derivative, lambda + rho * v >= 0.0)
        })?)
    };
    let convention = alm.convention;
    constrained(
        g,
        logits,
        t,
        |g, z| match convention {
            Convention::Signed => phr_node(g, z),
            Convention::Absolute => {
                let a = g.abs(z)?;
                phr_node(g, a)
            }
        },
        |i, z| {
            let (rho, lambda) = param(i);
            let z = if convention == Convention::Absolute { z.abs() } else { z };
            Phr.eval(z, rho, lambda).value
        },
    )
}

/// Mean of `−(1 − s_y)^γ log s_y`.
pub fn focal_loss(g: &mut Graph, logits: Var, t: &BatchTargets, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(invalid(format!("focal gamma must be non-negative, got {gamma}")));
    }
    t.check(g, logits)?;
    let log_p = g.log_softmax(logits)?;
    let mask = g.constant(t.one_hot())?;
    let picked = g.mul(log_p, mask)?;
    let log_true = g.sum_channels(picked)?;
    let per_pixel = if gamma == 0.0 {
        log_true
    } else {
        let p = g.exp(log_true)?;
        let neg = g.scale(p, -1.0)?;
        let rest = g.offset(neg, 1.0)?;
        let w = g.powf(rest, gamma)?;
        g.mul(w, log_true)?
    };
    let m = g.mean(per_pixel)?;
    Ok(g.scale(m, -1.0)?)
}

/// Cross-entropy against `1 − α + α/K` on the true class and `α/K` elsewhere.
pub fn label_smoothing_ce(g: &mut Graph, logits: Var, t: &BatchTargets, alpha: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid(format!("smoothing alpha must be in [0, 1), got {alpha}")));
    }
    t.check(g, logits)?;
    let uniform = alpha / t.classes as f64;
    let q = t.one_hot().map(|v| (1.0 - alpha) * v + uniform);
    let log_p = g.log_softmax(logits)?;
    let q = g.constant(q)?;
    let prod = g.mul(q, log_p)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, -1.0 / t.pixels() as f64)?)
}

/// `CE − λ · mean Shannon entropy` of the softmax outputs.
pub fn entropy_penalty_loss(g: &mut Graph, logits: Var, t: &BatchTargets, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(invalid(format!("entropy weight must be non-negative, got {lambda}")));
    }
    t.check(g, logits)?;
    let ce = cross_entropy(g, logits, &t.labels)?;
    let p = g.softmax(logits)?;
    let log_p = g.log_softmax(logits)?;
    let plogp = g.mul(p, log_p)?;
    let s = g.sum(plogp)?;
    let neg_entropy = g.scale(s, lambda / t.pixels() as f64)?;
    Ok(g.add(ce, neg_entropy)?)
}

/// `CE + λ · mean_{i,k} max(0, max_j l_j − l_k − m)`.
pub fn margin_logit_loss(g: &mut Graph, logits: Var, t: &BatchTargets, lambda: f64, margin: f64) -> Result<Var> {
    if !(margin >= 0.0) {
        return Err(invalid(format!("margin must be non-negative, got {margin}")));
    }
    if !(lambda >= 0.0) {
        return Err(invalid(format!("margin weight must be non-negative, got {lambda}")));
    }
    t.check(g, logits)?;
    let ce = cross_entropy(g, logits, &t.labels)?;
    let top = g.max_channels(logits)?;
    let top = g.expand_channels(top, t.classes)?;
    let gap = g.sub(top, logits)?;
    let shifted = g.offset(gap, -margin)?;
    let hinge = g.relu(shifted)?;
    let m = g.mean(hinge)?;
    let pen = g.scale(m, lambda)?;
    Ok(g.add(ce, pen)?)
}

/// A training objective and its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    Focal { gamma: f64 },
    LabelSmoothing { alpha: f64 },
    Entropy { lambda: f64 },
    Margin { lambda: f64, margin: f64 },
    Nacl { lambda: f64 },
    CracFixed { weights: RegionMatrix },
    Crac { convention: Convention },
}

impl LossKind {
    pub const NAMES: [&'static str; 8] = ["ce", "fl", "ls", "ecp", "mbls", "nacl", "crac-fixed", "crac"];

    /// The named loss with its default hyperparameters.
    pub fn default_for(name: &str, classes: usize) -> Result<Self> {
        Ok(match name {
            "ce" => LossKind::CrossEntropy,
            "fl" => LossKind::Focal { gamma: 3.0 },
            "ls" => LossKind::LabelSmoothing { alpha: 0.1 },
            "ecp" => LossKind::Entropy { lambda: 0.1 },
            "mbls" => LossKind::Margin {
                lambda: 0.1,
                margin: 10.0,
            },
            "nacl" => LossKind::Nacl { lambda: 0.1 },
            "crac-fixed" => LossKind::CracFixed {
                weights: RegionMatrix::filled(classes, 0.1),
            },
            "crac" => LossKind::Crac {
                convention: Convention::Signed,
            },
            _ => {
                return Err(invalid(format!(
                    "unknown loss {name:?} (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Focal { .. } => "fl",
            LossKind::LabelSmoothing { .. } => "ls",
            LossKind::Entropy { .. } => "ecp",
            LossKind::Margin { .. } => "mbls",
            LossKind::Nacl { .. } => "nacl",
            LossKind::CracFixed { .. } => "crac-fixed",
            LossKind::Crac { .. } => "crac",
        }
    }

    pub fn uses_scheduler(&self) -> bool {
        matches!(self, LossKind::Crac { .. })
    }
}

fn plain(g: &mut Graph, loss: Var, t: &BatchTargets) -> Result<LossOutput> {
    let v = g.value(loss).item()?;
    Ok(LossOutput {
        loss,
        breakdown: LossBreakdown {
            total: v,
            ce_term: v,
            penalty_inner: 0.0,
            penalty_outer: 0.0,
            violation: RegionMatrix::filled(t.classes, 0.0),
        },
    })
}

/// Evaluates `kind`. `alm` is required for [`LossKind::Crac`] and ignored
/// otherwise; its convention is overridden by the one in `kind`.
pub fn compute_loss(
    g: &mut Graph,
    logits: Var,
    t: &BatchTargets,
    kind: &LossKind,
    alm: Option<&AlmParams>,
) -> Result<LossOutput> {
    match kind {
        LossKind::CrossEntropy => {
            t.check(g, logits)?;
            let l = cross_entropy(g, logits, &t.labels)?;
            plain(g, l, t)
        }
        LossKind::Focal { gamma } => {
            let l = focal_loss(g, logits, t, *gamma)?;
            plain(g, l, t)
        }
        LossKind::LabelSmoothing { alpha } => {
            let l = label_smoothing_ce(g, logits, t, *alpha)?;
            plain(g, l, t)
        }
        LossKind::Entropy { lambda } => {
            let l = entropy_penalty_loss(g, logits, t, *lambda)?;
            plain(g, l, t)
        }
        LossKind::Margin { lambda, margin } => {
            let l = margin_logit_loss(g, logits, t, *lambda, *margin)?;
            plain(g, l, t)
        }
        LossKind::Nacl { lambda } => nacl_loss(g, logits, t, *lambda),
        LossKind::CracFixed { weights } => crac_fixed_loss(g, logits, t, weights),
        LossKind::Crac { convention } => {
            let alm = alm.ok_or_else(|| invalid("crac loss needs multipliers"))?;
            let alm = AlmParams {
                convention: *convention,
                ..*alm
            };
            crac_alm_loss(g, logits, t, &alm)
        }
    }
}
