//! Segmentation and calibration metrics.
//!
//! Predictions are argmax class maps (first class wins ties), confidences
//! are the maximum softmax probability. ECE is scored on pixels whose
//! ground truth is a foreground class; TACE on every pixel and class.

use crate::error::{invalid, Result};

/// `2|A∩B| / (|A| + |B|)` for the masks `pred == class` and
/// `labels == class`; 1 when both are empty.
pub fn dice(pred: &[u8], labels: &[u8], class: u8) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(invalid("prediction and label maps differ in size"));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        let (ip, il) = (p == class, l == class);
        a += ip as usize;
        b += il as usize;
        both += (ip && il) as usize;
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    })
}

/// Mask pixels with a 4-neighbour outside the mask; the image edge counts
/// as outside.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<(usize, usize)> {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && mask[y as usize * width + x as usize]
    };
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Exact squared distance along one line to the nearest zero-cost site,
/// by the lower envelope of parabolas.
fn edt_line(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest site.
pub fn squared_distance_transform(sites: &[bool], height: usize, width: usize) -> Vec<f64> {
    let n = height.max(width);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let mut col = vec![0.0; height];
    let mut out = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        edt_line(&col, &mut out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    let mut row_out = vec![0.0; width];
    for y in 0..height {
        let row = grid[y * width..(y + 1) * width].to_vec();
        edt_line(&row, &mut row_out, &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&row_out);
    }
    grid
}

/// Percentile with linear interpolation at position `q·(n−1)` of the
/// sorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// 95th percentile of the pooled boundary-to-boundary nearest distances in
/// both directions. 0 when both masks are empty, the image diagonal when
/// only one is.
pub fn hd95(pred: &[u8], labels: &[u8], height: usize, width: usize, class: u8) -> Result<f64> {
    if pred.len() != labels.len() || pred.len() != height * width {
        return Err(invalid("prediction and label maps differ in size"));
    }
    let a: Vec<bool> = pred.iter().map(|&p| p == class).collect();
    let b: Vec<bool> = labels.iter().map(|&l| l == class).collect();
    let ba = boundary(&a, height, width);
    let bb = boundary(&b, height, width);
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(((height * height + width * width) as f64).sqrt()),
        _ => {}
    }
    let sites = |pts: &[(usize, usize)]| {
        let mut s = vec![false; height * width];
        for &(y, x) in pts {
            s[y * width + x] = true;
        }
        squared_distance_transform(&s, height, width)
    };
    let (da, db) = (sites(&ba), sites(&bb));
    let mut d: Vec<f64> = ba.iter().map(|&(y, x)| db[y * width + x].sqrt()).collect();
    d.extend(bb.iter().map(|&(y, x)| da[y * width + x].sqrt()));
    Ok(percentile(&mut d, 0.95))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// 0 for empty bins.
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EceReport {
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
}

/// Index of the bin `(b/B, (b+1)/B]` holding `c`; 0 goes to the first bin.
pub fn bin_index(c: f64, bins: usize) -> usize {
    (0..bins).find(|&b| c <= (b + 1) as f64 / bins as f64).unwrap_or(bins - 1)
}

/// `Σ_b (n_b/N)|acc(b) − conf(b)|` over equal-width bins.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<EceReport> {
    if confidences.len() != correct.len() {
        return Err(invalid("confidence and correctness lengths differ"));
    }
    if confidences.is_empty() {
        return Err(invalid("no pixels to score"));
    }
    if bins == 0 {
        return Err(invalid("need at least one bin"));
    }
    if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(invalid("confidences must lie in [0, 1]"));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, bins);
        count[b] += 1;
        hits[b] += ok as usize;
        conf[b] += c;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let table = (0..bins)
        .map(|b| {
            let (accuracy, confidence) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (hits[b] as f64 / count[b] as f64, conf[b] / count[b] as f64)
            };
            total += count[b] as f64 / n * (accuracy - confidence).abs();
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                accuracy,
                confidence,
            }
        })
        .collect();
    Ok(EceReport { ece: total, bins: table })
}

/// Thresholded adaptive calibration error.
///
/// `probs` holds `classes` probabilities per pixel and `labels` one class
/// per pixel. For each class, probabilities below `threshold` are dropped
/// and the rest, sorted ascending, are split into `ranges` runs of equal
/// size (`⌊r·n/R⌋` boundaries). The result averages `|acc − conf|` over
/// the non-empty (class, range) cells.
pub fn tace(probs: &[f64], labels: &[usize], classes: usize, threshold: f64, ranges: usize) -> Result<f64> {
    if probs.len() != labels.len() * classes {
        return Err(invalid("probability and label lengths differ"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid(format!("threshold must be in (0, 1), got {threshold}")));
    }
    if ranges == 0 {
        return Err(invalid("need at least one range"));
    }
    let mut total = 0.0;
    let mut cells = 0usize;
    for k in 0..classes {
        let mut kept: Vec<(f64, bool)> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (probs[i * classes + k], l == k))
            .filter(|&(p, _)| p >= threshold)
            .collect();
        kept.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = kept.len();
        for r in 0..ranges {
            let cell = &kept[r * n / ranges..(r + 1) * n / ranges];
            if cell.is_empty() {
                continue;
            }
            let m = cell.len() as f64;
            let acc = cell.iter().filter(|c| c.1).count() as f64 / m;
            let conf = cell.iter().map(|c| c.0).sum::<f64>() / m;
            total += (acc - conf).abs();
            cells += 1;
        }
    }
    if cells == 0 {
        return Err(invalid("every confidence is below the threshold"));
    }
    Ok(total / cells as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub name: String,
    pub higher_is_better: bool,
}

/// Metric values for several methods under several settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub settings: Vec<Setting>,
    /// `values[method][setting]`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FriedmanResult {
    /// Per method, per setting.
    pub ranks: Vec<Vec<f64>>,
    /// Mean rank per method.
    pub rank: Vec<f64>,
    /// Method indices from best to worst.
    pub order: Vec<usize>,
}

/// Ranks within each setting (1 is best, ties share the average rank),
/// averaged over settings.
pub fn friedman_rank(table: &RankTable) -> Result<FriedmanResult> {
    let m = table.methods.len();
    let s = table.settings.len();
    if m == 0 || s == 0 {
        return Err(invalid("rank table needs at least one method and one setting"));
    }
    if table.values.len() != m || table.values.iter().any(|row| row.len() != s) {
        return Err(invalid("rank table is ragged"));
    }
    if table.values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("rank table has non-finite values"));
    }
    let mut ranks = vec![vec![0.0; s]; m];
    for (j, setting) in table.settings.iter().enumerate() {
        let key = |i: usize| {
            let v = table.values[i][j];
            if setting.higher_is_better {
                -v
            } else {
                v
            }
        };
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
        let mut start = 0;
        while start < m {
            let mut end = start + 1;
            while end < m && key(idx[end]) == key(idx[start]) {
                end += 1;
            }
            let avg = (start + 1 + end) as f64 / 2.0;
            for &i in &idx[start..end] {
                ranks[i][j] = avg;
            }
            start = end;
        }
    }
    let rank: Vec<f64> = ranks.iter().map(|r| r.iter().sum::<f64>() / s as f64).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| rank[a].total_cmp(&rank[b]));
    Ok(FriedmanResult { ranks, rank, order })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramSpec {
    pub lower: f64,
    pub upper: f64,
    pub bins: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            lower: -20.0,
            upper: 30.0,
            bins: 50,
        }
    }
}

impl HistogramSpec {
    /// Out-of-range values land in the edge bins.
    pub fn bin(&self, v: f64) -> usize {
        let t = (v - self.lower) / (self.upper - self.lower) * self.bins as f64;
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(self.bins - 1)
        }
    }

    pub fn edges(&self, b: usize) -> (f64, f64) {
        let w = (self.upper - self.lower) / self.bins as f64;
        (self.lower + b as f64 * w, self.lower + (b + 1) as f64 * w)
    }
}

/// Histograms of the largest, second-largest and true-class logit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitHistograms {
    pub spec: HistogramSpec,
    pub winner: Vec<u64>,
    pub runner_up: Vec<u64>,
    pub true_class: Vec<u64>,
}

impl LogitHistograms {
    pub fn new(spec: HistogramSpec) -> Result<Self> {
        if spec.bins == 0 || !(spec.upper > spec.lower) {
            return Err(invalid("histogram needs bins and a non-empty range"));
        }
        Ok(Self {
            spec,
            winner: vec![0; spec.bins],
            runner_up: vec![0; spec.bins],
            true_class: vec![0; spec.bins],
        })
    }

    pub const ROLES: [&'static str; 3] = ["winner", "runner_up", "true_class"];

    pub fn role(&self, name: &str) -> Option<&[u64]> {
        match name {
            "winner" => Some(&self.winner),
            "runner_up" => Some(&self.runner_up),
            "true_class" => Some(&self.true_class),
            _ => None,
        }
    }

    /// Adds one image given logits `[K, H·W]` and labels `[H·W]`.
    pub fn add(&mut self, logits: &[f64], labels: &[usize], classes: usize) -> Result<()> {
        if classes < 2 || logits.len() != labels.len() * classes {
            return Err(invalid("logits do not match labels"));
        }
        let hw = labels.len();
        for (p, &y) in labels.iter().enumerate() {
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for k in 0..classes {
                let v = logits[k * hw + p];
                if v > first {
                    second = first;
                    first = v;
                } else if v > second {
                    second = v;
                }
            }
            self.winner[self.spec.bin(first)] += 1;
            self.runner_up[self.spec.bin(second)] += 1;
            self.true_class[self.spec.bin(logits[y * hw + p])] += 1;
        }
        Ok(())
    }
}

pub fn logit_histogram(logits: &[f64], labels: &[usize], classes: usize, spec: HistogramSpec) -> Result<LogitHistograms> {
    let mut h = LogitHistograms::new(spec)?;
    h.add(logits, labels, classes)?;
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub dsc: f64,
    pub hd95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub images: usize,
    /// Means over images, foreground classes only.
    pub per_class: Vec<ClassMetrics>,
    pub dsc: f64,
    pub hd95: f64,
    pub ece: f64,
    pub tace: f64,
    pub reliability: Vec<ReliabilityBin>,
    pub histograms: LogitHistograms,
}

#[derive(Debug, Clone)]
pub struct MetricsConfig {
    pub ece_bins: usize,
    pub tace_threshold: f64,
    pub tace_ranges: usize,
    pub histogram: HistogramSpec,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ece_bins: 10,
            tace_threshold: 1e-3,
            tace_ranges: 15,
            histogram: HistogramSpec::default(),
        }
    }
}

/// Collects per-image results and produces a [`MetricsReport`].
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    config: MetricsConfig,
    classes: usize,
    images: usize,
    dsc_sum: Vec<f64>,
    hd_sum: Vec<f64>,
    fg_conf: Vec<f64>,
    fg_correct: Vec<bool>,
    probs: Vec<f64>,
    labels: Vec<usize>,
    histograms: LogitHistograms,
}

impl MetricsAccumulator {
    pub fn new(classes: usize, config: MetricsConfig) -> Result<Self> {
        if classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        Ok(Self {
            histograms: LogitHistograms::new(config.histogram)?,
            config,
            classes,
            images: 0,
            dsc_sum: vec![0.0; classes],
            hd_sum: vec![0.0; classes],
            fg_conf: Vec::new(),
            fg_correct: Vec::new(),
            probs: Vec::new(),
            labels: Vec::new(),
        })
    }

    /// Adds one image from its logits `[K, H, W]` and labels `[H, W]`.
    pub fn add_image(&mut self, logits: &[f64], labels: &[u8], height: usize, width: usize) -> Result<()> {
        let (k, hw) = (self.classes, height * width);
        if logits.len() != k * hw || labels.len() != hw {
            return Err(invalid("image logits or labels have the wrong size"));
        }
        if labels.iter().any(|&l| l as usize >= k) {
            return Err(invalid("label out of range"));
        }
        let probs = crac_tensor::softmax_channels(logits, 1, k, hw);
        let mut pred = vec![0u8; hw];
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if probs[c * hw + p] > probs[best * hw + p] {
                    best = c;
                }
            }
            pred[p] = best as u8;
            let y = labels[p] as usize;
            if y != 0 {
                self.fg_conf.push(probs[best * hw + p]);
                self.fg_correct.push(best == y);
            }
            for c in 0..k {
                self.probs.push(probs[c * hw + p]);
            }
            self.labels.push(y);
        }
        for c in 1..k {
            self.dsc_sum[c] += dice(&pred, labels, c as u8)?;
            self.hd_sum[c] += hd95(&pred, labels, height, width, c as u8)?;
        }
        let ls: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        self.histograms.add(logits, &ls, k)?;
        self.images += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.images == 0 {
            return Err(invalid("no images evaluated"));
        }
        let n = self.images as f64;
        let per_class: Vec<ClassMetrics> = (1..self.classes)
            .map(|c| ClassMetrics {
                class: c,
                dsc: self.dsc_sum[c] / n,
                hd95: self.hd_sum[c] / n,
            })
            .collect();
        let fg = per_class.len() as f64;
        let e = ece(&self.fg_conf, &self.fg_correct, self.config.ece_bins)?;
        Ok(MetricsReport {
            images: self.images,
            dsc: per_class.iter().map(|c| c.dsc).sum::<f64>() / fg,
            hd95: per_class.iter().map(|c| c.hd95).sum::<f64>() / fg,
            per_class,
            ece: e.ece,
            tace: tace(
                &self.probs,
                &self.labels,
                self.classes,
                self.config.tace_threshold,
                self.config.tace_ranges,
            )?,
            reliability: e.bins,
            histograms: self.histograms.clone(),
        })
    }
}
