//! Binned entropy estimates and channel correlation.
//!
//! Each channel's support is split into equal-width bins fitted on the data
//! being measured. Joint entropies are plug-in estimates over the occupied
//! cells of the empirical joint histogram.

use std::collections::HashMap;
use std::io::{self, Write};

use crate::actdata::ActivationMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_NUM_BINS: usize = 16;
pub const MAX_JOINT_GROUP: usize = 8;

/// Equal-width bins per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BinningSpec {
    pub num_bins: usize,
    /// `(min, max)` per channel.
    pub ranges: Vec<(f64, f64)>,
}

impl BinningSpec {
    pub fn channels(&self) -> usize {
        self.ranges.len()
    }

    /// `num_bins + 1` edges for one channel; a constant channel has every
    /// edge at its single value.
    pub fn edges(&self, ch: usize) -> Vec<f64> {
        let (lo, hi) = self.ranges[ch];
        let width = (hi - lo) / self.num_bins as f64;
        (0..=self.num_bins)
            .map(|i| {
                if i == self.num_bins {
                    hi
                } else {
                    lo + width * i as f64
                }
            })
            .collect()
    }

    pub fn is_degenerate(&self, ch: usize) -> bool {
        let (lo, hi) = self.ranges[ch];
        hi <= lo
    }

    pub fn bin_of(&self, ch: usize, x: f64) -> u16 {
        let (lo, hi) = self.ranges[ch];
        if hi <= lo {
            return 0;
        }
        let pos = ((x - lo) * self.num_bins as f64 / (hi - lo)).floor();
        pos.clamp(0.0, (self.num_bins - 1) as f64) as u16
    }
}

pub fn fit_bins(matrix: &ActivationMatrix, num_bins: usize) -> Result<BinningSpec> {
    if !(2..=u16::MAX as usize + 1).contains(&num_bins) {
        return Err(Error::InvalidConfig(format!(
            "num_bins {num_bins} must lie in 2..=65536"
        )));
    }
    let ranges = (0..matrix.channels())
        .map(|ch| {
            matrix
                .channel(ch)
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v as f64), hi.max(v as f64))
                })
        })
        .collect();
    Ok(BinningSpec { num_bins, ranges })
}

/// Bin indices, channel-major like the source matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinIndices {
    pub channels: usize,
    pub tokens: usize,
    pub num_bins: usize,
    pub indices: Vec<u16>,
}

impl BinIndices {
    pub fn channel(&self, ch: usize) -> &[u16] {
        &self.indices[ch * self.tokens..(ch + 1) * self.tokens]
    }
}

pub fn discretize(matrix: &ActivationMatrix, bins: &BinningSpec) -> Result<BinIndices> {
    if bins.channels() != matrix.channels() {
        return Err(Error::Shape(format!(
            "binning spec covers {} channels, matrix has {}",
            bins.channels(),
            matrix.channels()
        )));
    }
    let mut indices = Vec::with_capacity(matrix.values().len());
    for ch in 0..matrix.channels() {
        indices.extend(
            matrix
                .channel(ch)
                .iter()
                .map(|&v| bins.bin_of(ch, v as f64)),
        );
    }
    Ok(BinIndices {
        channels: matrix.channels(),
        tokens: matrix.tokens(),
        num_bins: bins.num_bins,
        indices,
    })
}

/// Plug-in entropy, in bits, of a histogram with `total` samples. Counts are
/// summed in ascending order so the result does not depend on how the
/// histogram was iterated.
fn entropy_of_counts(mut counts: Vec<u64>, total: u64) -> f64 {
    counts.retain(|&c| c > 0);
    if counts.len() <= 1 {
        return 0.0;
    }
    counts.sort_unstable();
    let n = total as f64;
    let weighted: f64 = counts
        .iter()
        .map(|&c| {
            let c = c as f64;
            c * c.log2()
        })
        .sum();
    (n.log2() - weighted / n).max(0.0)
}

/// Joint entropy (bits) of the given channels' bin indices.
pub fn joint_entropy(indices: &BinIndices, group: &[usize]) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::Domain("channel group must be non-empty".into()));
    }
    if group.len() > MAX_JOINT_GROUP {
        return Err(Error::Domain(format!(
            "group of {} channels exceeds the limit of {MAX_JOINT_GROUP}",
            group.len()
        )));
    }
    if let Some(&bad) = group.iter().find(|&&ch| ch >= indices.channels) {
        return Err(Error::Shape(format!(
            "channel {bad} out of range for {} channels",
            indices.channels
        )));
    }
    let tokens = indices.tokens;
    if group.len() == 1 {
        let mut counts = vec![0u64; indices.num_bins];
        for &b in indices.channel(group[0]) {
            counts[b as usize] += 1;
        }
        return Ok(entropy_of_counts(counts, tokens as u64));
    }
    let rows: Vec<&[u16]> = group.iter().map(|&ch| indices.channel(ch)).collect();
    let mut cells: HashMap<u128, u64> = HashMap::new();
    for t in 0..tokens {
        let key = rows
            .iter()
            .fold(0u128, |acc, row| (acc << 16) | row[t] as u128);
        *cells.entry(key).or_insert(0) += 1;
    }
    Ok(entropy_of_counts(
        cells.into_values().collect(),
        tokens as u64,
    ))
}

/// Entropy statistics for one coupling group size.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub group_size: usize,
    pub num_bins: usize,
    /// Joint entropy of each group of contiguous channels.
    pub joint_bits: Vec<f64>,
    /// Sum of the member channels' marginal entropies, per group.
    pub sum_marginal_bits: Vec<f64>,
    /// Marginal entropy of every channel covered by a group.
    pub marginal_bits: Vec<f64>,
    pub joint_mean: f64,
    pub joint_std: f64,
    pub sum_marginal_mean: f64,
    pub sum_marginal_std: f64,
    /// Trailing channels left out because they do not fill a group.
    pub dropped_channels: usize,
}

impl EntropyReport {
    pub fn num_groups(&self) -> usize {
        self.joint_bits.len()
    }

    /// CSV rows `group_size,group_index,joint_bits,sum_marginal_bits`.
    pub fn write_csv_rows<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (g, (j, m)) in self
            .joint_bits
            .iter()
            .zip(&self.sum_marginal_bits)
            .enumerate()
        {
            writeln!(out, "{},{},{:.9},{:.9}", self.group_size, g, j, m)?;
        }
        Ok(())
    }
}

pub const ENTROPY_CSV_HEADER: &str = "group_size,group_index,joint_bits,sum_marginal_bits";

pub fn write_entropy_csv<W: Write>(reports: &[EntropyReport], mut out: W) -> io::Result<()> {
    writeln!(out, "{ENTROPY_CSV_HEADER}")?;
    for r in reports {
        r.write_csv_rows(&mut out)?;
    }
    Ok(())
}

/// Population mean and standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Joint entropy versus sum of marginals over non-overlapping groups of
/// contiguous channels, for each requested group size. Bins are fitted on
/// `matrix` itself.
pub fn entropy_sweep(
    matrix: &ActivationMatrix,
    group_sizes: &[usize],
    num_bins: usize,
) -> Result<Vec<EntropyReport>> {
    let bins = fit_bins(matrix, num_bins)?;
    let indices = discretize(matrix, &bins)?;
    let marginals = (0..matrix.channels())
        .map(|ch| joint_entropy(&indices, &[ch]))
        .collect::<Result<Vec<f64>>>()?;

    group_sizes
        .iter()
        .map(|&size| {
            if size == 0 || size > MAX_JOINT_GROUP {
                return Err(Error::Domain(format!(
                    "group size {size} must lie in 1..={MAX_JOINT_GROUP}"
                )));
            }
            let groups = matrix.channels() / size;
            let mut joint_bits = Vec::with_capacity(groups);
            let mut sum_marginal_bits = Vec::with_capacity(groups);
            for g in 0..groups {
                let members: Vec<usize> = (g * size..(g + 1) * size).collect();
                let joint = if size == 1 {
                    marginals[g]
                } else {
                    joint_entropy(&indices, &members)?
                };
                joint_bits.push(joint);
                sum_marginal_bits.push(members.iter().map(|&ch| marginals[ch]).sum());
            }
            let (joint_mean, joint_std) = mean_std(&joint_bits);
            let (sum_marginal_mean, sum_marginal_std) = mean_std(&sum_marginal_bits);
            Ok(EntropyReport {
                group_size: size,
                num_bins,
                joint_bits,
                sum_marginal_bits,
                marginal_bits: marginals[..groups * size].to_vec(),
                joint_mean,
                joint_std,
                sum_marginal_mean,
                sum_marginal_std,
                dropped_channels: matrix.channels() - groups * size,
            })
        })
        .collect()
}

/// Pearson correlation among the first `n` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub n: usize,
    /// Row-major `n * n` coefficients.
    pub coefficients: Vec<f64>,
    /// Channels with zero variance; their off-diagonal entries are 0.
    pub degenerate: Vec<bool>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.coefficients[i * self.n + j]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for row in self.coefficients.chunks_exact(self.n) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

pub fn correlation_matrix(
    matrix: &ActivationMatrix,
    channel_limit: usize,
) -> Result<CorrelationMatrix> {
    if channel_limit == 0 || channel_limit > matrix.channels() {
        return Err(Error::Shape(format!(
            "channel limit {channel_limit} must lie in 1..={}",
            matrix.channels()
        )));
    }
    if matrix.tokens() < 2 {
        return Err(Error::Shape("correlation needs at least 2 tokens".into()));
    }
    let n = channel_limit;
    let tokens = matrix.tokens() as f64;
    let centred: Vec<Vec<f64>> = (0..n)
        .map(|ch| {
            let row = matrix.channel(ch);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / tokens;
            row.iter().map(|&v| v as f64 - mean).collect()
        })
        .collect();
    let var: Vec<f64> = centred
        .iter()
        .map(|r| r.iter().map(|d| d * d).sum())
        .collect();
    let degenerate: Vec<bool> = var.iter().map(|&v| v <= 0.0).collect();

    let mut coefficients = vec![0.0; n * n];
    for i in 0..n {
        coefficients[i * n + i] = 1.0;
        for j in i + 1..n {
            let r = if degenerate[i] || degenerate[j] {
                0.0
            } else {
                let cov: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
                (cov / (var[i] * var[j]).sqrt()).clamp(-1.0, 1.0)
            };
            coefficients[i * n + j] = r;
            coefficients[j * n + i] = r;
        }
    }
    Ok(CorrelationMatrix {
        n,
        coefficients,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f32]) -> ActivationMatrix {
        ActivationMatrix::new(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn equal_width_edges() {
        let bins = fit_bins(&row(&[0.0, 1.0, 2.0, 3.0]), 4).unwrap();
        assert_eq!(bins.edges(0), [0.0, 0.75, 1.5, 2.25, 3.0]);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let m = row(&[5.0, 5.0, 5.0]);
        let bins = fit_bins(&m, 16).unwrap();
        assert!(bins.is_degenerate(0));
        let idx = discretize(&m, &bins).unwrap();
        assert_eq!(idx.indices, [0, 0, 0]);
        assert_eq!(joint_entropy(&idx, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn per_channel_ranges() {
        let m = ActivationMatrix::new(2, 2, vec![0.0, 1.0, -10.0, 30.0]).unwrap();
        let bins = fit_bins(&m, 8).unwrap();
        assert_eq!(bins.ranges, [(0.0, 1.0), (-10.0, 30.0)]);
    }

    #[test]
    fn boundaries_and_clamping() {
        let bins = BinningSpec {
            num_bins: 16,
            ranges: vec![(-2.0, 6.0)],
        };
        assert_eq!(bins.bin_of(0, -2.0), 0);
        assert_eq!(bins.bin_of(0, 6.0), 15);
        assert_eq!(bins.bin_of(0, -102.0), 0);
        assert_eq!(bins.bin_of(0, 1e9), 15);
    }

    #[test]
    fn uniform_grid_hits_every_bin_once() {
        let grid: Vec<f32> = (0..16).map(|k| -1.0 + k as f32 * (4.0 / 15.0)).collect();
        let m = row(&grid);
        let idx = discretize(&m, &fit_bins(&m, 16).unwrap()).unwrap();
        assert_eq!(idx.indices, (0..16).collect::<Vec<u16>>());
    }

    #[test]
    fn discretize_shape_mismatch() {
        let bins = fit_bins(&row(&[0.0, 1.0]), 4).unwrap();
        let m = ActivationMatrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(discretize(&m, &bins), Err(Error::Shape(_))));
    }

    #[test]
    fn entropy_point_mass_and_uniform() {
        let idx = BinIndices {
            channels: 2,
            tokens: 8,
            num_bins: 4,
            indices: vec![2, 2, 2, 2, 2, 2, 2, 2, 0, 1, 2, 3, 3, 2, 1, 0],
        };
        assert_eq!(joint_entropy(&idx, &[0]).unwrap(), 0.0);
        assert_eq!(joint_entropy(&idx, &[1]).unwrap(), 2.0);
    }

    #[test]
    fn duplicated_channel_adds_nothing() {
        let a: Vec<u16> = (0..1000u32)
            .map(|i| ((i * i + 7 * i) % 13) as u16)
            .collect();
        let mut indices = a.clone();
        indices.extend_from_slice(&a);
        let idx = BinIndices {
            channels: 2,
            tokens: 1000,
            num_bins: 16,
            indices,
        };
        let joint = joint_entropy(&idx, &[0, 1]).unwrap();
        let marginal = joint_entropy(&idx, &[0]).unwrap();
        assert!((joint - marginal).abs() < 1e-9);
    }

    #[test]
    fn oversized_group_rejected() {
        let idx = BinIndices {
            channels: 9,
            tokens: 1,
            num_bins: 2,
            indices: vec![0; 9],
        };
        let all: Vec<usize> = (0..9).collect();
        assert!(matches!(joint_entropy(&idx, &all), Err(Error::Domain(_))));
        assert!(joint_entropy(&idx, &all[..8]).is_ok());
        assert!(joint_entropy(&idx, &[]).is_err());
    }

    #[test]
    fn sweep_group_size_one_matches_marginals() {
        let m =
            crate::actdata::synth_correlated(&crate::actdata::SynthSpec::new(6, 500, 2).seed(4))
                .unwrap();
        let reports = entropy_sweep(&m, &[1, 4], 16).unwrap();
        let r1 = &reports[0];
        assert_eq!(r1.joint_bits, r1.sum_marginal_bits);
        assert_eq!(r1.dropped_channels, 0);
        assert_eq!(reports[1].num_groups(), 1);
        assert_eq!(reports[1].dropped_channels, 2);
    }

    #[test]
    fn correlation_signs() {
        let a: Vec<f32> = (0..50).map(|i| ((i * 17) % 23) as f32).collect();
        let mut values = a.clone();
        values.extend(a.iter().copied());
        values.extend(a.iter().map(|v| -v));
        values.extend(std::iter::repeat_n(2.0, 50));
        let m = ActivationMatrix::new(4, 50, values).unwrap();
        let c = correlation_matrix(&m, 4).unwrap();
        assert_eq!(c.get(0, 1), 1.0);
        assert_eq!(c.get(0, 2), -1.0);
        assert_eq!(c.get(0, 3), 0.0);
        assert!(c.degenerate[3] && !c.degenerate[0]);
        for i in 0..4 {
            assert_eq!(c.get(i, i), 1.0);
            for j in 0..4 {
                assert_eq!(c.get(i, j), c.get(j, i));
            }
        }
        assert!(correlation_matrix(&m, 5).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = crate::actdata::synth_correlated(&crate::actdata::SynthSpec::new(4, 64, 1).seed(1))
            .unwrap();
        let reports = entropy_sweep(&m, &[2], 4).unwrap();
        let mut buf = Vec::new();
        write_entropy_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], ENTROPY_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("2,0,"));
        let mut buf = Vec::new();
        correlation_matrix(&m, 3)
            .unwrap()
            .write_csv(&mut buf)
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.split(',').count() == 3));
    }
}
