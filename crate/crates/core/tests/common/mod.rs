//! Test-only oracles and fixtures, independent of the library code paths
//! they check.

#![allow(dead_code)]

use cqkv::{ActivationMatrix, Codebook, Coupling, LearningMode};

/// Optimal weighted k-means objective over every labelling of `points`
/// with at most `k` labels.
pub fn brute_force_kmeans(points: &[f64], weights: &[f64], k: usize) -> f64 {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut objective = 0.0;
        for cluster in 0..k {
            let (mut w, mut wx) = (0.0, 0.0);
            for i in 0..n {
                if labels[i] == cluster {
                    w += weights[i];
                    wx += weights[i] * points[i];
                }
            }
            if w > 0.0 {
                let mean = wx / w;
                for i in 0..n {
                    if labels[i] == cluster {
                        objective += weights[i] * (points[i] - mean).powi(2);
                    }
                }
            }
        }
        best = best.min(objective);
        // next labelling in base k
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Softmax attention written out directly: no max subtraction, scores
/// summed in whatever order the loops give.
pub fn naive_attention(query: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| (0..query.len()).map(|i| query[i] * k[i]).sum())
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let mut out = vec![0.0; values[0].len()];
    for (s, v) in scores.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += s.exp() / z * x;
        }
    }
    out
}

/// Small linear congruential generator for building test instances
/// without touching the library's PRNG.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize
    }
}

/// 4 channels x 6 tokens of exactly representable values.
pub fn golden_matrix() -> ActivationMatrix {
    let values = vec![
        0.0, 1.0, -1.0, 0.5, 2.0, -2.5, //
        3.25, 3.25, -0.125, 8.0, 1.5, 0.75, //
        -4.0, 0.0, 0.0, 16.0, -0.5, 2.0, //
        1.0, 2.0, 3.0, 4.0, 5.0, 6.0,
    ];
    ActivationMatrix::new(4, 6, values).unwrap()
}

pub fn golden_matrix_with_gradients() -> ActivationMatrix {
    let grads: Vec<f32> = (0..24).map(|i| (i as f32 - 12.0) * 0.25).collect();
    golden_matrix().with_gradients(grads).unwrap()
}

/// Hand-written CQ-2c2b codebook for the golden matrix.
pub fn golden_codebook() -> Codebook {
    let coupling: Coupling = "2c2b".parse().unwrap();
    let centroids = vec![
        0.0, 3.0, 1.0, 3.0, -1.0, 0.0, 2.0, 1.0, // group 0
        -4.0, 1.0, 0.0, 2.0, 16.0, 4.0, -0.5, 5.5, // group 1
    ];
    Codebook::from_centroids(coupling, LearningMode::Uniform, 2, centroids).unwrap()
}
