mod common;

use common::*;
use crac_core::metrics::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_masks(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>, usize, usize) {
    let h = rng.gen_range(1..=16);
    let w = rng.gen_range(1..=16);
    let density = rng.gen_range(0.0..1.0);
    let mut mk = || (0..h * w).map(|_| rng.gen_bool(density) as u8).collect::<Vec<u8>>();
    let a = mk();
    let b = mk();
    (a, b, h, w)
}

#[test]
fn dice_and_hd95_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (a, b, h, w) = random_masks(&mut rng);
        let d = dice(&a, &b, 1).unwrap();
        assert!((d - dice_oracle(&a, &b, 1)).abs() <= 1e-12);
        assert_eq!(d, dice(&b, &a, 1).unwrap());
        assert!((0.0..=1.0).contains(&d));
        let hd = hd95(&a, &b, h, w, 1).unwrap();
        assert!((hd - hd95_oracle(&a, &b, h, w, 1)).abs() <= 1e-9, "{h}x{w}");
        assert_eq!(hd, hd95(&b, &a, h, w, 1).unwrap());
        assert!(hd >= 0.0);
    }
}

#[test]
fn ece_matches_oracle_and_ignores_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let n = rng.gen_range(1..=256);
        let conf: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.1) { (rng.gen_range(0..=10) as f64) / 10.0 } else { rng.gen() })
            .collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let r = ece(&conf, &correct, 10).unwrap();
        assert!((r.ece - ece_oracle(&conf, &correct, 10)).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(&r.ece));
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let c2: Vec<f64> = idx.iter().map(|&i| conf[i]).collect();
        let k2: Vec<bool> = idx.iter().map(|&i| correct[i]).collect();
        assert!((ece(&c2, &k2, 10).unwrap().ece - r.ece).abs() <= 1e-12);
    }
}

#[test]
fn ece_unchanged_by_a_pixel_matching_its_bin() {
    // bin (0.7, 0.8] holds confidences 0.75 and 0.8 with one hit: acc 0.5
    let conf = vec![0.75, 0.8, 0.3];
    let correct = vec![true, false, true];
    let before = ece(&conf, &correct, 10).unwrap().ece;
    // two more pixels at the bin's mean confidence 0.775, one correct
    let conf2 = [conf.clone(), vec![0.775, 0.775]].concat();
    let correct2 = [correct.clone(), vec![true, false]].concat();
    let r = ece(&conf2, &correct2, 10).unwrap();
    let bin = &r.bins[7];
    assert!((bin.accuracy - 0.5).abs() < 1e-12 && (bin.confidence - 0.775).abs() < 1e-12);
    // the bin's weight grows but its gap is unchanged; other bins rescale
    let gap = (0.5f64 - 0.775).abs();
    let other = (1.0f64 - 0.3).abs();
    assert!((before - (2.0 / 3.0 * gap + 1.0 / 3.0 * other)).abs() < 1e-12);
    assert!((r.ece - (4.0 / 5.0 * gap + 1.0 / 5.0 * other)).abs() < 1e-12);
}

#[test]
fn tace_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let k = rng.gen_range(2..=4);
        let n = rng.gen_range(1..=256);
        let mut probs = Vec::with_capacity(n * k);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(4)).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|r| r / s));
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let t = tace(&probs, &labels, k, 1e-3, 15).unwrap();
        assert!((t - tace_oracle(&probs, &labels, k, 1e-3, 15)).abs() <= 1e-9);
    }
}

#[test]
fn tace_is_small_for_calibrated_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 100_000;
    let mut probs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let p: f64 = rng.gen();
        probs.extend([1.0 - p, p]);
        labels.push(rng.gen_bool(p) as usize);
    }
    assert!(tace(&probs, &labels, 2, 1e-3, 15).unwrap() < 0.02);
}

#[test]
fn published_columns_rank_crac_then_nacl() {
    let table = published_table();
    let r = friedman_rank(&table).unwrap();
    let name = |i: usize| table.methods[i].as_str();
    assert_eq!(name(r.order[0]), "CRaC");
    assert_eq!(name(r.order[1]), "NACL");
}

#[test]
fn dominant_method_ranks_first_everywhere() {
    let mut table = published_table();
    table.values.push(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    table.methods.push("oracle".into());
    let r = friedman_rank(&table).unwrap();
    assert_eq!(r.rank[8], 1.0);
}

#[test]
fn histograms_match_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let spec = HistogramSpec {
        lower: -5.0,
        upper: 5.0,
        bins: 7,
    };
    for _ in 0..50 {
        let k = rng.gen_range(2..=4);
        let hw = rng.gen_range(1..=64);
        let logits: Vec<f64> = (0..k * hw).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let labels: Vec<usize> = (0..hw).map(|_| rng.gen_range(0..k)).collect();
        let h = logit_histogram(&logits, &labels, k, spec).unwrap();
        let bin = |v: f64| {
            let w = 10.0 / 7.0;
            (0..7).find(|&b| v < -5.0 + (b + 1) as f64 * w).unwrap_or(6)
        };
        let (mut win, mut run, mut tru) = (vec![0u64; 7], vec![0u64; 7], vec![0u64; 7]);
        for p in 0..hw {
            let mut col: Vec<f64> = (0..k).map(|c| logits[c * hw + p]).collect();
            tru[bin(col[labels[p]])] += 1;
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            win[bin(col[0])] += 1;
            run[bin(col[1])] += 1;
        }
        assert_eq!(h.winner, win);
        assert_eq!(h.runner_up, run);
        assert_eq!(h.true_class, tru);
        assert_eq!(h.winner.iter().sum::<u64>(), hw as u64);
    }
}
