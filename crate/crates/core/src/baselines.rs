//! Reference quantizers: channel-wise non-uniform (one-channel coupled
//! quantization) and asymmetric min-max integer quantization.

use crate::actdata::ActivationMatrix;
use crate::cqcodec::{
    dequantize, learn_codebook, quantize, CQConfig, Codebook, Coupling, QuantizedCache,
};
use crate::error::{Error, Result};

pub struct ChannelwiseResult {
    pub codebook: Codebook,
    pub cache: QuantizedCache,
    pub reconstruction: ActivationMatrix,
}

/// Per-channel `2^bits`-centroid quantization, i.e. `CQ-1c<bits>b` with
/// uniform centroid learning.
pub fn channelwise_nonuniform(
    matrix: &ActivationMatrix,
    bits: usize,
    seed: u64,
) -> Result<ChannelwiseResult> {
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidConfig(format!(
            "channel-wise bits {bits} must lie in 1..=8"
        )));
    }
    let config = CQConfig::new(Coupling::new(1, bits)?).seed(seed);
    let codebook = learn_codebook(matrix, &config)?;
    let cache = quantize(matrix, &codebook)?;
    let reconstruction = dequantize(&cache, &codebook)?;
    Ok(ChannelwiseResult {
        codebook,
        cache,
        reconstruction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// One slice per channel, spanning tokens.
    PerChannel,
    /// One slice per token, spanning channels.
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformQuantConfig {
    pub bits: u8,
    pub axis: Axis,
    /// Splits each slice into runs of this many entries.
    pub group_size: Option<usize>,
}

impl UniformQuantConfig {
    pub fn new(bits: u8, axis: Axis) -> Self {
        Self {
            bits,
            axis,
            group_size: None,
        }
    }

    pub fn group_size(mut self, size: usize) -> Self {
        self.group_size = Some(size);
        self
    }

    fn levels(&self) -> u32 {
        1 << self.bits
    }

    fn validate(&self, matrix: &ActivationMatrix) -> Result<usize> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "INT bits {} must lie in 1..=8",
                self.bits
            )));
        }
        let axis_len = match self.axis {
            Axis::PerChannel => matrix.tokens(),
            Axis::PerToken => matrix.channels(),
        };
        match self.group_size {
            None => Ok(axis_len),
            Some(0) => Err(Error::InvalidConfig("group size must be positive".into())),
            Some(g) if axis_len % g != 0 => Err(Error::Shape(format!(
                "group size {g} does not divide axis length {axis_len}"
            ))),
            Some(g) => Ok(g),
        }
    }
}

/// Min-max affine parameters of one slice.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SliceRange {
    lo: f64,
    hi: f64,
}

impl SliceRange {
    fn fit(values: impl Iterator<Item = f32>) -> Self {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
        Self { lo, hi }
    }

    /// Rounds half away from zero, clamping into the representable codes.
    fn encode(&self, x: f32, levels: u32) -> (u8, f32) {
        if self.hi <= self.lo {
            return (0, self.lo as f32);
        }
        let scale = (self.hi - self.lo) / (levels - 1) as f64;
        let code = ((x as f64 - self.lo) / scale)
            .round()
            .clamp(0.0, (levels - 1) as f64);
        (code as u8, (self.lo + code * scale) as f32)
    }
}

pub struct UniformIntResult {
    /// Channel-major, like the input.
    pub codes: Vec<u8>,
    pub reconstruction: ActivationMatrix,
    /// Number of (min, scale) pairs stored as side information.
    pub slices: usize,
}

impl UniformIntResult {
    pub fn code_bits(&self, bits: u8) -> u64 {
        self.codes.len() as u64 * bits as u64
    }
}

/// Asymmetric min-max quantization per slice: `scale = (max - min) /
/// (2^bits - 1)`, `code = round((x - min) / scale)`.
pub fn uniform_int(
    matrix: &ActivationMatrix,
    config: &UniformQuantConfig,
) -> Result<UniformIntResult> {
    let run = config.validate(matrix)?;
    let (channels, tokens) = (matrix.channels(), matrix.tokens());
    let levels = config.levels();
    let mut codes = vec![0u8; channels * tokens];
    let mut recon = vec![0f32; channels * tokens];
    let mut slices = 0;
    match config.axis {
        Axis::PerChannel => {
            for ch in 0..channels {
                let row = matrix.channel(ch);
                for start in (0..tokens).step_by(run) {
                    let part = &row[start..start + run];
                    let range = SliceRange::fit(part.iter().copied());
                    slices += 1;
                    for (t, &x) in part.iter().enumerate() {
                        let (code, r) = range.encode(x, levels);
                        codes[ch * tokens + start + t] = code;
                        recon[ch * tokens + start + t] = r;
                    }
                }
            }
        }
        Axis::PerToken => {
            for t in 0..tokens {
                for start in (0..channels).step_by(run) {
                    let range = SliceRange::fit((start..start + run).map(|ch| matrix.get(ch, t)));
                    slices += 1;
                    for ch in start..start + run {
                        let (code, r) = range.encode(matrix.get(ch, t), levels);
                        codes[ch * tokens + t] = code;
                        recon[ch * tokens + t] = r;
                    }
                }
            }
        }
    }
    Ok(UniformIntResult {
        codes,
        reconstruction: ActivationMatrix::new(channels, tokens, recon)?,
        slices,
    })
}

/// Integer quantizer applied one token column at a time, so it can stand in
/// for a cache that grows token by token. Per-channel ranges are fitted
/// once on calibration data; per-token ranges come from each column.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformIntCodec {
    config: UniformQuantConfig,
    channels: usize,
    channel_ranges: Option<Vec<SliceRange>>,
}

impl UniformIntCodec {
    pub fn fit(calibration: &ActivationMatrix, config: UniformQuantConfig) -> Result<Self> {
        config.validate(calibration)?;
        let channel_ranges = match config.axis {
            Axis::PerChannel => {
                if config.group_size.is_some() {
                    return Err(Error::InvalidConfig(
                        "per-channel token groups cannot be applied column by column".into(),
                    ));
                }
                Some(
                    (0..calibration.channels())
                        .map(|ch| SliceRange::fit(calibration.channel(ch).iter().copied()))
                        .collect(),
                )
            }
            Axis::PerToken => None,
        };
        Ok(Self {
            config,
            channels: calibration.channels(),
            channel_ranges,
        })
    }

    pub fn config(&self) -> &UniformQuantConfig {
        &self.config
    }

    pub fn reconstruct_column(&self, column: &[f32]) -> Result<Vec<f32>> {
        if column.len() != self.channels {
            return Err(Error::Shape(format!(
                "column of {} channels, codec fitted on {}",
                column.len(),
                self.channels
            )));
        }
        let levels = self.config.levels();
        Ok(match &self.channel_ranges {
            Some(ranges) => column
                .iter()
                .zip(ranges)
                .map(|(&x, r)| r.encode(x, levels).1)
                .collect(),
            None => {
                let run = self.config.group_size.unwrap_or(self.channels);
                column
                    .chunks(run)
                    .flat_map(|part| {
                        let r = SliceRange::fit(part.iter().copied());
                        part.iter().map(move |&x| r.encode(x, levels).1)
                    })
                    .collect()
            }
        })
    }
}
