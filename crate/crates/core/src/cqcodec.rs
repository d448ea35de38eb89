//! Coupled quantization: every `c` contiguous channels share one `b`-bit
//! code per token, indexing a group-specific set of `2^b` learned
//! `c`-dimensional centroids.
//!
//! CQCB codebook file (little-endian):
//!
//! ```text
//! "CQCB" | version u16 = 1 | c u16 | b u16 | mode u8 | reserved u8 = 0 | num_groups u64
//! centroids  num_groups * 2^b * c f32, group-major then centroid-major
//! fallback   ceil(num_groups / 8) bytes, bit g (LSB first) set when group g
//!            fell back from Fisher to uniform weights
//! ```
//!
//! CQQC cache file:
//!
//! ```text
//! "CQQC" | version u16 = 1 | c u16 | b u16 | num_groups u64 | tokens u64 | codebook_hash u64
//! payload    per group ceil(tokens * b / 8) bytes of b-bit codes, LSB first
//! ```
//!
//! `codebook_hash` is FNV-1a 64 over the codebook's complete CQCB encoding.

use std::fmt;
use std::hash::Hasher;
use std::io::{Read, Write};
use std::str::FromStr;

use fnv::FnvHasher;
use rayon::prelude::*;

use crate::actdata::{ActivationMatrix, CountingWriter, ModelDims, OffsetReader};
use crate::clustering::{weighted_kmeans, PointSet};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const CQCB_MAGIC: [u8; 4] = *b"CQCB";
pub const CQQC_MAGIC: [u8; 4] = *b"CQQC";
pub const FORMAT_VERSION: u16 = 1;
pub const CQCB_HEADER_LEN: usize = 20;
pub const CQQC_HEADER_LEN: usize = 34;
pub const DEFAULT_KMEANS_ITERS: usize = 100;
pub const MAX_BITS: u8 = 16;

/// Channels per group and bits per code, written `CQ-<c>c<b>b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Coupling {
    channels_per_group: u16,
    bits: u8,
}

impl Coupling {
    pub fn new(channels_per_group: usize, bits: usize) -> Result<Self> {
        if channels_per_group == 0 || channels_per_group > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "channels per group {channels_per_group} must lie in 1..=65535"
            )));
        }
        if bits == 0 || bits > MAX_BITS as usize {
            return Err(Error::InvalidConfig(format!(
                "code bits {bits} must lie in 1..={MAX_BITS}"
            )));
        }
        Ok(Self {
            channels_per_group: channels_per_group as u16,
            bits: bits as u8,
        })
    }

    pub fn channels_per_group(&self) -> usize {
        self.channels_per_group as usize
    }

    pub fn bits(&self) -> usize {
        self.bits as usize
    }

    pub fn centroids_per_group(&self) -> usize {
        1 << self.bits
    }

    pub fn bits_per_fpn(&self) -> f64 {
        self.bits as f64 / self.channels_per_group as f64
    }

    pub fn groups_for(&self, channels: usize) -> Result<usize> {
        let c = self.channels_per_group();
        if !channels.is_multiple_of(c) {
            return Err(Error::Shape(format!(
                "{channels} channels are not divisible by {c} channels per group"
            )));
        }
        Ok(channels / c)
    }

    /// Packed bytes holding one group's codes for `tokens` tokens.
    pub fn group_payload_len(&self, tokens: usize) -> usize {
        (tokens * self.bits()).div_ceil(8)
    }
}

impl fmt::Display for Coupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CQ-{}c{}b", self.channels_per_group, self.bits)
    }
}

impl FromStr for Coupling {
    type Err = Error;

    /// Accepts `<c>c<b>b`, optionally prefixed with `CQ-`. Numbers are
    /// plain decimal without sign or leading zeros.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("`{s}` is not of the form <c>c<b>b"));
        let body = s.strip_prefix("CQ-").unwrap_or(s);
        let body = body.strip_suffix('b').ok_or_else(bad)?;
        let (c, b) = body.split_once('c').ok_or_else(bad)?;
        let number = |digits: &str| -> Result<usize> {
            let ok = !digits.is_empty()
                && digits.bytes().all(|d| d.is_ascii_digit())
                && !(digits.len() > 1 && digits.starts_with('0'));
            if !ok {
                return Err(bad());
            }
            digits.parse().map_err(|_| bad())
        };
        Coupling::new(number(c)?, number(b)?)
    }
}

pub fn bits_per_fpn(coupling: &Coupling) -> f64 {
    coupling.bits_per_fpn()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LearningMode {
    #[default]
    Uniform,
    /// Each token column weighted by the sum of its squared gradients over
    /// the group's channels.
    Fisher,
}

impl LearningMode {
    fn code(self) -> u8 {
        match self {
            LearningMode::Uniform => 0,
            LearningMode::Fisher => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LearningMode::Uniform),
            1 => Some(LearningMode::Fisher),
            _ => None,
        }
    }
}

impl fmt::Display for LearningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearningMode::Uniform => "uniform",
            LearningMode::Fisher => "fisher",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CQConfig {
    pub coupling: Coupling,
    pub mode: LearningMode,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl CQConfig {
    pub fn new(coupling: Coupling) -> Self {
        Self {
            coupling,
            mode: LearningMode::Uniform,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
            seed: 0,
        }
    }

    pub fn mode(mut self, mode: LearningMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn iters(mut self, iters: usize) -> Self {
        self.kmeans_iters = iters;
        self
    }

    /// Clustering seed for group `group`.
    pub fn group_seed(&self, group: usize) -> u64 {
        derive_seed(self.seed, group as u64)
    }
}

/// Learned centroids for every channel group.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    coupling: Coupling,
    mode: LearningMode,
    num_groups: usize,
    centroids: Vec<f32>,
    fisher_fallback: Vec<bool>,
}

impl Codebook {
    pub fn from_centroids(
        coupling: Coupling,
        mode: LearningMode,
        num_groups: usize,
        centroids: Vec<f32>,
    ) -> Result<Self> {
        let expected = num_groups * coupling.centroids_per_group() * coupling.channels_per_group();
        if num_groups == 0 || centroids.len() != expected {
            return Err(Error::Shape(format!(
                "{} centroid coordinates, expected {expected} for {num_groups} groups of {coupling}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("centroids must be finite".into()));
        }
        Ok(Self {
            coupling,
            mode,
            num_groups,
            centroids,
            fisher_fallback: vec![false; num_groups],
        })
    }

    pub fn coupling(&self) -> Coupling {
        self.coupling
    }

    pub fn mode(&self) -> LearningMode {
        self.mode
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn channels(&self) -> usize {
        self.num_groups * self.coupling.channels_per_group()
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn fisher_fallback(&self) -> &[bool] {
        &self.fisher_fallback
    }

    /// The `2^b * c` coordinates of one group.
    pub fn group(&self, g: usize) -> &[f32] {
        let len = self.coupling.centroids_per_group() * self.coupling.channels_per_group();
        &self.centroids[g * len..(g + 1) * len]
    }

    pub fn centroid(&self, g: usize, code: usize) -> &[f32] {
        let c = self.coupling.channels_per_group();
        &self.group(g)[code * c..(code + 1) * c]
    }

    /// Mutable access for perturbation experiments.
    pub fn centroid_mut(&mut self, g: usize, code: usize) -> &mut [f32] {
        let c = self.coupling.channels_per_group();
        let len = self.coupling.centroids_per_group() * c;
        let start = g * len + code * c;
        &mut self.centroids[start..start + c]
    }

    pub fn param_count(&self) -> usize {
        self.centroids.len()
    }

    /// Storage counting each centroid entry as a 16-bit float.
    pub fn storage_bytes_f16(&self) -> usize {
        self.centroids.len() * 2
    }

    pub fn storage_bytes_f32(&self) -> usize {
        self.centroids.len() * 4
    }

    pub fn save<W: Write>(&self, sink: W) -> Result<u64> {
        let mut w = CountingWriter::new(sink);
        w.put(&CQCB_MAGIC)?;
        w.put(&FORMAT_VERSION.to_le_bytes())?;
        w.put(&self.coupling.channels_per_group.to_le_bytes())?;
        w.put(&(self.coupling.bits as u16).to_le_bytes())?;
        w.put(&[self.mode.code(), 0])?;
        w.put(&(self.num_groups as u64).to_le_bytes())?;
        w.put_f32s(&self.centroids)?;
        let mut bitset = vec![0u8; self.num_groups.div_ceil(8)];
        for (g, _) in self.fisher_fallback.iter().enumerate().filter(|(_, &f)| f) {
            bitset[g / 8] |= 1 << (g % 8);
        }
        w.put(&bitset)?;
        w.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn load<R: Read>(source: R) -> Result<Self> {
        let mut r = OffsetReader::new(source);
        r.magic(CQCB_MAGIC)?;
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                format: "CQCB",
                version,
            });
        }
        let c = r.u16("c")?;
        let b = r.u16("b")?;
        let coupling = Coupling::new(c as usize, b as usize).map_err(|e| Error::InvalidHeader {
            field: "c/b",
            reason: e.to_string(),
        })?;
        let mode_code = r.u8("learning_mode")?;
        let mode = LearningMode::from_code(mode_code).ok_or_else(|| Error::InvalidHeader {
            field: "learning_mode",
            reason: format!("unknown mode {mode_code}"),
        })?;
        let reserved = r.u8("reserved")?;
        if reserved != 0 {
            return Err(Error::InvalidHeader {
                field: "reserved",
                reason: format!("expected 0, found {reserved}"),
            });
        }
        let num_groups = r.u64("num_groups")?;
        if num_groups == 0 {
            return Err(Error::InvalidHeader {
                field: "num_groups",
                reason: "must be positive".into(),
            });
        }
        let count = num_groups
            .checked_mul((coupling.centroids_per_group() * coupling.channels_per_group()) as u64)
            .ok_or_else(|| Error::InvalidHeader {
                field: "num_groups",
                reason: "centroid count overflows".into(),
            })?;
        let centroids = r.f32s(count, "centroids")?;
        let bitset = r.bytes(num_groups.div_ceil(8), "fallback_flags")?;
        let num_groups = num_groups as usize;
        let fisher_fallback: Vec<bool> = (0..num_groups)
            .map(|g| bitset[g / 8] & (1 << (g % 8)) != 0)
            .collect();
        if !num_groups.is_multiple_of(8) && bitset[num_groups / 8] >> (num_groups % 8) != 0 {
            return Err(Error::InvalidHeader {
                field: "fallback_flags",
                reason: "padding bits set".into(),
            });
        }
        Ok(Self {
            coupling,
            mode,
            num_groups,
            centroids,
            fisher_fallback,
        })
    }

    /// FNV-1a 64 of the CQCB encoding.
    pub fn hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(&self.to_bytes());
        h.finish()
    }

    /// Code of the nearest centroid to `column` in group `g`; ties go to
    /// the lowest code.
    pub fn nearest_code(&self, g: usize, column: &[f32]) -> (u32, f64) {
        nearest_code(self.group(g), column)
    }
}

fn nearest_code(centroids: &[f32], column: &[f32]) -> (u32, f64) {
    let c = column.len();
    let mut best = f64::INFINITY;
    let mut best_j = 0u32;
    for (j, cand) in centroids.chunks_exact(c).enumerate() {
        let mut d = 0.0f64;
        for (&x, &y) in column.iter().zip(cand) {
            let diff = x as f64 - y as f64;
            d += diff * diff;
            if d >= best {
                break;
            }
        }
        if d < best {
            best = d;
            best_j = j as u32;
        }
    }
    (best_j, best)
}

/// Per-group summary of one clustering run.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub shortfall: bool,
    pub fisher_fallback: bool,
}

/// `weights[g * tokens + t]` = sum of squared gradients of group `g`'s
/// channels at token `t`.
pub fn fisher_weights(matrix: &ActivationMatrix, coupling: &Coupling) -> Result<Vec<f64>> {
    let grads = matrix.gradients().ok_or(Error::MissingGradients)?;
    let groups = coupling.groups_for(matrix.channels())?;
    let (c, tokens) = (coupling.channels_per_group(), matrix.tokens());
    let mut weights = vec![0.0f64; groups * tokens];
    for g in 0..groups {
        let out = &mut weights[g * tokens..(g + 1) * tokens];
        for ch in g * c..(g + 1) * c {
            for (w, &x) in out.iter_mut().zip(&grads[ch * tokens..(ch + 1) * tokens]) {
                *w += x as f64 * x as f64;
            }
        }
    }
    Ok(weights)
}

/// Token columns of group `g` as contiguous `c`-dimensional points.
fn group_points(matrix: &ActivationMatrix, g: usize, c: usize) -> Vec<f32> {
    let tokens = matrix.tokens();
    let mut points = vec![0f32; tokens * c];
    for k in 0..c {
        for (t, &v) in matrix.channel(g * c + k).iter().enumerate() {
            points[t * c + k] = v;
        }
    }
    points
}

pub fn learn_codebook(matrix: &ActivationMatrix, config: &CQConfig) -> Result<Codebook> {
    learn_codebook_with_stats(matrix, config).map(|(cb, _)| cb)
}

/// Learns every group's centroids by weighted k-means, in parallel across
/// groups.
pub fn learn_codebook_with_stats(
    matrix: &ActivationMatrix,
    config: &CQConfig,
) -> Result<(Codebook, Vec<GroupStats>)> {
    let coupling = config.coupling;
    let groups = coupling.groups_for(matrix.channels())?;
    let weights = match config.mode {
        LearningMode::Uniform => None,
        LearningMode::Fisher => Some(fisher_weights(matrix, &coupling)?),
    };
    let (c, k, tokens) = (
        coupling.channels_per_group(),
        coupling.centroids_per_group(),
        matrix.tokens(),
    );

    let per_group: Vec<(Vec<f32>, GroupStats)> = (0..groups)
        .into_par_iter()
        .map(|g| {
            let points = group_points(matrix, g, c);
            let mut fallback = false;
            let w = match &weights {
                Some(all) => {
                    let w = all[g * tokens..(g + 1) * tokens].to_vec();
                    if w.iter().any(|&x| x > 0.0) {
                        w
                    } else {
                        fallback = true;
                        vec![1.0; tokens]
                    }
                }
                None => vec![1.0; tokens],
            };
            let set = PointSet::new(c, points, w)?;
            let result = weighted_kmeans(&set, k, config.kmeans_iters, config.group_seed(g))?;
            let centroids = result.centroids.iter().map(|&v| v as f32).collect();
            Ok((
                centroids,
                GroupStats {
                    objective: result.objective,
                    iterations: result.iterations_run,
                    converged: result.converged,
                    shortfall: result.shortfall,
                    fisher_fallback: fallback,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut centroids = Vec::with_capacity(groups * k * c);
    let mut stats = Vec::with_capacity(groups);
    for (cents, s) in per_group {
        centroids.extend(cents);
        stats.push(s);
    }
    let mut codebook = Codebook::from_centroids(coupling, config.mode, groups, centroids)?;
    codebook.fisher_fallback = stats.iter().map(|s| s.fisher_fallback).collect();
    Ok((codebook, stats))
}

/// LSB-first packing of `bits`-wide codes.
pub fn pack_codes(codes: &[u32], bits: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity((codes.len() * bits).div_ceil(8));
    let mut acc: u64 = 0;
    let mut filled = 0;
    let mask = (1u64 << bits) - 1;
    for &code in codes {
        acc |= (code as u64 & mask) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

pub fn unpack_codes(bytes: &[u8], bits: usize, count: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0;
    let mask = (1u64 << bits) - 1;
    let mut bytes = bytes.iter();
    while out.len() < count {
        while filled < bits {
            acc |= (*bytes.next().unwrap_or(&0) as u64) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits;
    }
    out
}

/// Bit-packed codes for every group, plus the metadata needed to decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCache {
    coupling: Coupling,
    num_groups: usize,
    tokens: usize,
    codebook_hash: u64,
    payload: Vec<u8>,
}

impl QuantizedCache {
    pub fn from_codes(
        coupling: Coupling,
        num_groups: usize,
        tokens: usize,
        codebook_hash: u64,
        codes: &[u32],
    ) -> Result<Self> {
        if codes.len() != num_groups * tokens {
            return Err(Error::Shape(format!(
                "{} codes for {num_groups} groups x {tokens} tokens",
                codes.len()
            )));
        }
        let limit = coupling.centroids_per_group() as u32;
        if let Some(bad) = codes.iter().find(|&&c| c >= limit) {
            return Err(Error::Domain(format!(
                "code {bad} exceeds {} bits",
                coupling.bits()
            )));
        }
        let mut payload = Vec::with_capacity(num_groups * coupling.group_payload_len(tokens));
        for group in codes.chunks_exact(tokens.max(1)) {
            payload.extend(pack_codes(group, coupling.bits()));
        }
        Ok(Self {
            coupling,
            num_groups,
            tokens,
            codebook_hash,
            payload,
        })
    }

    pub fn coupling(&self) -> Coupling {
        self.coupling
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn codebook_hash(&self) -> u64 {
        self.codebook_hash
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn payload_bits(&self) -> u64 {
        (self.num_groups * self.tokens * self.coupling.bits()) as u64
    }

    pub fn group_payload(&self, g: usize) -> &[u8] {
        let len = self.coupling.group_payload_len(self.tokens);
        &self.payload[g * len..(g + 1) * len]
    }

    pub fn group_codes(&self, g: usize) -> Vec<u32> {
        unpack_codes(self.group_payload(g), self.coupling.bits(), self.tokens)
    }

    /// All codes, group-major.
    pub fn codes(&self) -> Vec<u32> {
        (0..self.num_groups)
            .flat_map(|g| self.group_codes(g))
            .collect()
    }

    pub fn save<W: Write>(&self, sink: W) -> Result<u64> {
        let mut w = CountingWriter::new(sink);
        w.put(&CQQC_MAGIC)?;
        w.put(&FORMAT_VERSION.to_le_bytes())?;
        w.put(&self.coupling.channels_per_group.to_le_bytes())?;
        w.put(&(self.coupling.bits as u16).to_le_bytes())?;
        w.put(&(self.num_groups as u64).to_le_bytes())?;
        w.put(&(self.tokens as u64).to_le_bytes())?;
        w.put(&self.codebook_hash.to_le_bytes())?;
        w.put(&self.payload)?;
        w.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn load<R: Read>(source: R) -> Result<Self> {
        let mut r = OffsetReader::new(source);
        r.magic(CQQC_MAGIC)?;
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                format: "CQQC",
                version,
            });
        }
        let c = r.u16("c")?;
        let b = r.u16("b")?;
        let coupling = Coupling::new(c as usize, b as usize).map_err(|e| Error::InvalidHeader {
            field: "c/b",
            reason: e.to_string(),
        })?;
        let num_groups = r.u64("num_groups")?;
        let tokens = r.u64("tokens")?;
        if num_groups == 0 || tokens == 0 {
            return Err(Error::InvalidHeader {
                field: if num_groups == 0 {
                    "num_groups"
                } else {
                    "tokens"
                },
                reason: "must be positive".into(),
            });
        }
        let codebook_hash = r.u64("codebook_hash")?;
        let len = tokens
            .checked_mul(b as u64)
            .map(|bits| bits.div_ceil(8))
            .and_then(|per_group| per_group.checked_mul(num_groups))
            .ok_or_else(|| Error::InvalidHeader {
                field: "tokens",
                reason: "payload length overflows".into(),
            })?;
        let payload = r.bytes(len, "payload")?;
        Ok(Self {
            coupling,
            num_groups: num_groups as usize,
            tokens: tokens as usize,
            codebook_hash,
            payload,
        })
    }
}

/// Replaces every group column with the code of its nearest centroid.
pub fn quantize(matrix: &ActivationMatrix, codebook: &Codebook) -> Result<QuantizedCache> {
    if matrix.channels() != codebook.channels() {
        return Err(Error::Shape(format!(
            "matrix has {} channels, codebook covers {}",
            matrix.channels(),
            codebook.channels()
        )));
    }
    let coupling = codebook.coupling;
    let c = coupling.channels_per_group();
    let tokens = matrix.tokens();
    let codes: Vec<u32> = (0..codebook.num_groups)
        .into_par_iter()
        .flat_map_iter(|g| {
            let points = group_points(matrix, g, c);
            let group = codebook.group(g);
            (0..tokens)
                .map(|t| nearest_code(group, &points[t * c..(t + 1) * c]).0)
                .collect::<Vec<_>>()
        })
        .collect();
    QuantizedCache::from_codes(
        coupling,
        codebook.num_groups,
        tokens,
        codebook.hash(),
        &codes,
    )
}

pub fn dequantize(cache: &QuantizedCache, codebook: &Codebook) -> Result<ActivationMatrix> {
    if cache.coupling != codebook.coupling || cache.num_groups != codebook.num_groups {
        return Err(Error::CodecMismatch(format!(
            "cache is {} x {} groups, codebook is {} x {} groups",
            cache.coupling, cache.num_groups, codebook.coupling, codebook.num_groups
        )));
    }
    if cache.codebook_hash != codebook.hash() {
        return Err(Error::CodecMismatch(format!(
            "cache was encoded with codebook {:#018x}, got {:#018x}",
            cache.codebook_hash,
            codebook.hash()
        )));
    }
    let expected = cache.num_groups * cache.coupling.group_payload_len(cache.tokens);
    if cache.payload.len() != expected {
        return Err(Error::CodecMismatch(format!(
            "payload holds {} bytes, expected {expected}",
            cache.payload.len()
        )));
    }
    let c = cache.coupling.channels_per_group();
    let tokens = cache.tokens;
    let mut values = vec![0f32; codebook.channels() * tokens];
    for g in 0..cache.num_groups {
        for (t, code) in cache.group_codes(g).into_iter().enumerate() {
            for (k, &v) in codebook.centroid(g, code as usize).iter().enumerate() {
                values[(g * c + k) * tokens + t] = v;
            }
        }
    }
    ActivationMatrix::new(codebook.channels(), tokens, values)
}

/// Squared Frobenius norm of `original - reconstructed`.
pub fn quantization_error(
    original: &ActivationMatrix,
    reconstructed: &ActivationMatrix,
) -> Result<f64> {
    if !original.shape_eq(reconstructed) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            original.channels(),
            original.tokens(),
            reconstructed.channels(),
            reconstructed.tokens()
        )));
    }
    Ok(original
        .values()
        .iter()
        .zip(reconstructed.values())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum())
}

/// `sum_g sum_t weights[g][t] * ||A_g[:, t] - CQ(A)_g[:, t]||^2` with
/// weights laid out as returned by [`fisher_weights`].
pub fn weighted_quantization_error(
    original: &ActivationMatrix,
    reconstructed: &ActivationMatrix,
    coupling: &Coupling,
    weights: &[f64],
) -> Result<f64> {
    quantization_error(original, reconstructed)?;
    let groups = coupling.groups_for(original.channels())?;
    let (c, tokens) = (coupling.channels_per_group(), original.tokens());
    if weights.len() != groups * tokens {
        return Err(Error::Shape(format!(
            "{} weights for {groups} groups x {tokens} tokens",
            weights.len()
        )));
    }
    let mut per_column = vec![0.0f64; groups * tokens];
    for ch in 0..original.channels() {
        let g = ch / c;
        let out = &mut per_column[g * tokens..(g + 1) * tokens];
        for ((o, &a), &b) in out
            .iter_mut()
            .zip(original.channel(ch))
            .zip(reconstructed.channel(ch))
        {
            let d = a as f64 - b as f64;
            *o += d * d;
        }
    }
    Ok(per_column.iter().zip(weights).map(|(e, w)| e * w).sum())
}

/// Centroid parameters across all layers, keys and values, and KV heads:
/// `layers * 2 * kv_heads * head_channels * 2^b`.
pub fn codebook_param_count(dims: &ModelDims, coupling: &Coupling) -> Result<u64> {
    dims.validate()?;
    coupling.groups_for(dims.head_channels)?;
    Ok(dims.layers as u64
        * 2
        * dims.kv_heads as u64
        * dims.head_channels as u64
        * coupling.centroids_per_group() as u64)
}
