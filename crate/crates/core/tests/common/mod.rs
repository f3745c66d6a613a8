//! Brute-force reference implementations shared by the integration tests.

#![allow(dead_code)]

use crac_core::metrics::{RankTable, Setting};

pub fn dice_oracle(a: &[u8], b: &[u8], class: u8) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x == class && y == class).count();
    let total = a.iter().filter(|&&x| x == class).count() + b.iter().filter(|&&y| y == class).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn boundary_oracle(m: &[u8], h: usize, w: usize, class: u8) -> Vec<(f64, f64)> {
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[y as usize * w + x as usize] == class;
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if at(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !at(y + dy, x + dx)) {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

/// All-pairs nearest distances, pooled, 95th percentile by linear
/// interpolation.
pub fn hd95_oracle(a: &[u8], b: &[u8], h: usize, w: usize, class: u8) -> f64 {
    let ba = boundary_oracle(a, h, w, class);
    let bb = boundary_oracle(b, h, w, class);
    if ba.is_empty() && bb.is_empty() {
        return 0.0;
    }
    if ba.is_empty() || bb.is_empty() {
        return ((h * h + w * w) as f64).sqrt();
    }
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = ba.iter().map(|p| nearest(p, &bb)).collect();
    d.extend(bb.iter().map(|p| nearest(p, &ba)));
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let pos = 0.95 * (d.len() - 1) as f64;
    let i = pos as usize;
    if i + 1 < d.len() {
        d[i] + (pos - i as f64) * (d[i + 1] - d[i])
    } else {
        d[i]
    }
}

/// Per-pixel pass: each pixel is assigned by scanning bin upper edges.
pub fn ece_oracle(conf: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| (conf[i] > lo || (b == 0 && conf[i] == 0.0)) && conf[i] <= hi)
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
        let c = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
        total += m / n * (acc - c).abs();
    }
    total
}

pub fn tace_oracle(probs: &[f64], labels: &[usize], k: usize, threshold: f64, ranges: usize) -> f64 {
    let mut errs = Vec::new();
    for c in 0..k {
        let mut v: Vec<(f64, bool)> = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            let p = probs[i * k + c];
            if p >= threshold {
                v.push((p, l == c));
            }
        }
        v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let n = v.len();
        for r in 0..ranges {
            let (s, e) = (r * n / ranges, (r + 1) * n / ranges);
            if s == e {
                continue;
            }
            let m = (e - s) as f64;
            let acc = v[s..e].iter().filter(|x| x.1).count() as f64 / m;
            let conf = v[s..e].iter().map(|x| x.0).sum::<f64>() / m;
            errs.push((acc - conf).abs());
        }
    }
    errs.iter().sum::<f64>() / errs.len() as f64
}

/// Published columns: DSC, HD, ECE, TACE on two datasets.
pub fn published_table() -> RankTable {
    let methods = ["FL", "ECP", "LS", "SVLS", "MbLS", "NACL", "BWCR", "CRaC"];
    let values = [
        [0.620, 7.30, 0.153, 0.224, 0.834, 6.65, 0.053, 0.145],
        [0.782, 4.44, 0.130, 0.151, 0.860, 5.30, 0.037, 0.134],
        [0.809, 3.30, 0.083, 0.093, 0.860, 5.33, 0.055, 0.050],
        [0.824, 2.81, 0.091, 0.138, 0.857, 5.72, 0.039, 0.144],
        [0.827, 2.99, 0.103, 0.081, 0.836, 5.75, 0.046, 0.041],
        [0.854, 2.93, 0.068, 0.073, 0.868, 5.12, 0.033, 0.031],
        [0.841, 2.69, 0.051, 0.075, 0.848, 5.39, 0.029, 0.059],
        [0.877, 1.72, 0.057, 0.058, 0.876, 5.52, 0.029, 0.033],
    ];
    let mut settings = Vec::new();
    for ds in ["acdc", "flare"] {
        for (m, hib) in [("dsc", true), ("hd", false), ("ece", false), ("tace", false)] {
            settings.push(Setting {
                name: format!("{ds}_{m}"),
                higher_is_better: hib,
            });
        }
    }
    RankTable {
        methods: methods.iter().map(|s| s.to_string()).collect(),
        settings,
        values: values.iter().map(|r| r.to_vec()).collect(),
    }
}
