//! Library results checked against independent oracles: exhaustive
//! partitions, direct attention sums, eigen-decomposition.

mod common;

use common::{brute_force_kmeans, naive_attention, Lcg};
use cqkv::attnsim::attention_step;
use cqkv::clustering::{weighted_kmeans, PointSet};
use cqkv::infostats::{discretize, entropy_sweep, fit_bins, joint_entropy};
use cqkv::{synth_correlated, ActivationMatrix, Mixing, SynthSpec};
use nalgebra::{DMatrix, SymmetricEigen};

#[test]
fn two_means_on_line_is_globally_optimal() {
    let pts = [0.0, 1.0, 10.0, 11.0];
    let opt = brute_force_kmeans(&pts, &[1.0; 4], 2);
    assert_eq!(opt, 1.0);
    let set = PointSet::unweighted(1, pts.iter().map(|&v| v as f32).collect()).unwrap();
    for seed in 0..10 {
        let r = weighted_kmeans(&set, 2, 2, seed).unwrap();
        assert_eq!(r.objective, opt);
    }
}

#[test]
fn weighted_kmeans_small_instances_match_brute_force() {
    let mut rng = Lcg(0xC0FFEE);
    for _ in 0..30 {
        let n = 3 + rng.below(7);
        let k = 1 + rng.below(3);
        let pts: Vec<f64> = (0..n)
            .map(|_| ((rng.next_f64() * 40.0 - 20.0) as f32) as f64)
            .collect();
        let w: Vec<f64> = (0..n).map(|_| 0.1 + rng.next_f64() * 3.0).collect();
        let opt = brute_force_kmeans(&pts, &w, k);
        let set = PointSet::new(1, pts.iter().map(|&v| v as f32).collect(), w.clone()).unwrap();
        let best = (0..8)
            .map(|s| weighted_kmeans(&set, k, 100, s).unwrap().objective)
            .fold(f64::INFINITY, f64::min);
        assert!(
            (best - opt).abs() <= 1e-9 * opt.max(1e-12),
            "n={n} k={k}: {best} vs {opt}"
        );
    }
}

#[test]
fn attention_matches_direct_sum() {
    let mut rng = Lcg(17);
    let d = 8;
    let q: Vec<f32> = (0..d).map(|_| rng.next_f64() as f32 - 0.5).collect();
    let keys: Vec<Vec<f32>> = (0..4)
        .map(|_| (0..d).map(|_| rng.next_f64() as f32 * 2.0 - 1.0).collect())
        .collect();
    let values: Vec<Vec<f32>> = (0..4)
        .map(|_| (0..d).map(|_| rng.next_f64() as f32 * 4.0 - 2.0).collect())
        .collect();
    let flat = |m: &[Vec<f32>]| m.iter().flatten().copied().collect::<Vec<f32>>();
    let got = attention_step(&q, &flat(&keys), &flat(&values), false).unwrap();
    let widen = |m: &[Vec<f32>]| {
        m.iter()
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect::<Vec<Vec<f64>>>()
    };
    let q64: Vec<f64> = q.iter().map(|&x| x as f64).collect();
    let want = naive_attention(&q64, &widen(&keys), &widen(&values));
    for (a, b) in got.output.iter().zip(&want) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn synthetic_covariance_has_two_dominant_directions() {
    let m = synth_correlated(&SynthSpec::new(8, 4096, 2).noise(0.1).seed(77)).unwrap();
    let (c, t) = (m.channels(), m.tokens());
    let means: Vec<f64> = (0..c)
        .map(|ch| m.channel(ch).iter().map(|&v| v as f64).sum::<f64>() / t as f64)
        .collect();
    let cov = DMatrix::from_fn(c, c, |i, j| {
        m.channel(i)
            .iter()
            .zip(m.channel(j))
            .map(|(&a, &b)| (a as f64 - means[i]) * (b as f64 - means[j]))
            .sum::<f64>()
            / (t - 1) as f64
    });
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    assert!(eig[2] / eig[0] < 0.05, "{eig:?}");
}

#[test]
fn discretize_follows_formula() {
    let mut rng = Lcg(3);
    let values: Vec<f32> = (0..500)
        .map(|_| (rng.next_f64() * 7.0 - 2.0) as f32)
        .collect();
    let m = ActivationMatrix::new(1, 500, values.clone()).unwrap();
    let bins = fit_bins(&m, 16).unwrap();
    let idx = discretize(&m, &bins).unwrap();
    let lo = values.iter().fold(f64::INFINITY, |a, &v| a.min(v as f64));
    let hi = values
        .iter()
        .fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    for (&x, &b) in values.iter().zip(&idx.indices) {
        let want = (((x as f64 - lo) * 16.0 / (hi - lo)).floor() as i64).clamp(0, 15);
        assert_eq!(b as i64, want);
    }
}

#[test]
fn joint_entropy_matches_counted_histogram() {
    let mut rng = Lcg(99);
    let tokens = 3000;
    let a: Vec<u16> = (0..tokens).map(|_| rng.below(5) as u16).collect();
    let b: Vec<u16> = a
        .iter()
        .map(|&x| ((x as usize + rng.below(2)) % 5) as u16)
        .collect();
    let mut counts = std::collections::BTreeMap::new();
    for (&x, &y) in a.iter().zip(&b) {
        *counts.entry((x, y)).or_insert(0usize) += 1;
    }
    let want: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / tokens as f64;
            -p * p.log2()
        })
        .sum();
    let mut indices = a.clone();
    indices.extend(&b);
    let idx = cqkv::infostats::BinIndices {
        channels: 2,
        tokens,
        num_bins: 5,
        indices,
    };
    assert!((joint_entropy(&idx, &[0, 1]).unwrap() - want).abs() < 1e-9);
}

#[test]
fn independent_channels_have_no_entropy_gap() {
    let spec = SynthSpec::new(8, 1 << 18, 8)
        .noise(0.0)
        .mixing(Mixing::Identity)
        .seed(5);
    let m = synth_correlated(&spec).unwrap();
    let r = &entropy_sweep(&m, &[2], 16).unwrap()[0];
    let gap = r.sum_marginal_mean - r.joint_mean;
    assert!(gap.abs() < 0.1, "gap {gap}");
}

#[test]
fn rank_one_channels_have_large_entropy_gap() {
    let m = synth_correlated(&SynthSpec::new(8, 1 << 14, 1).noise(0.0).seed(2)).unwrap();
    let r = &entropy_sweep(&m, &[2], 16).unwrap()[0];
    for (j, s) in r.joint_bits.iter().zip(&r.sum_marginal_bits) {
        assert!(s - j > 1.0, "{j} vs {s}");
    }
}

#[test]
fn independent_channels_are_uncorrelated() {
    for seed in 0..3 {
        let spec = SynthSpec::new(6, 1 << 16, 6)
            .noise(0.0)
            .mixing(Mixing::Identity)
            .seed(seed);
        let c = cqkv::infostats::correlation_matrix(&synth_correlated(&spec).unwrap(), 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert!(c.get(i, j).abs() < 0.03);
                }
            }
        }
    }
}
