//! Activation matrices, the ACTD dump format, synthetic correlated
//! activations and KV-cache size arithmetic.
//!
//! ACTD layout (all integers little-endian, no padding):
//!
//! ```text
//! "ACTD" | version u16 = 1 | flags u16 (bit0: gradients) | channels u64 | tokens u64
//! values    channels * tokens f32, channel-major
//! gradients same layout, present iff flags bit0
//! ```

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const ACTD_MAGIC: [u8; 4] = *b"ACTD";
pub const ACTD_VERSION: u16 = 1;
pub const ACTD_HEADER_LEN: u64 = 24;
const FLAG_GRADIENTS: u16 = 1;

/// A channels × tokens matrix of key or value activations, stored
/// channel-major, with an optional same-shape gradient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    channels: usize,
    tokens: usize,
    values: Vec<f32>,
    gradients: Option<Vec<f32>>,
}

fn check_payload(name: &str, data: &[f32], channels: usize, tokens: usize) -> Result<()> {
    if data.len() != channels * tokens {
        return Err(Error::Shape(format!(
            "{name} holds {} entries, expected {channels}x{tokens}",
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Shape(format!(
            "{name} entry {i} (channel {}, token {}) is not finite",
            i / tokens,
            i % tokens
        )));
    }
    Ok(())
}

impl ActivationMatrix {
    pub fn new(channels: usize, tokens: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || tokens == 0 {
            return Err(Error::Shape(format!(
                "matrix must be non-empty, got {channels}x{tokens}"
            )));
        }
        check_payload("values", &values, channels, tokens)?;
        Ok(Self {
            channels,
            tokens,
            values,
            gradients: None,
        })
    }

    /// Builds a matrix from `f(channel, token)`.
    pub fn from_fn(
        channels: usize,
        tokens: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(channels * tokens);
        for ch in 0..channels {
            for t in 0..tokens {
                values.push(f(ch, t));
            }
        }
        Self::new(channels, tokens, values)
    }

    pub fn with_gradients(mut self, gradients: Vec<f32>) -> Result<Self> {
        check_payload("gradients", &gradients, self.channels, self.tokens)?;
        self.gradients = Some(gradients);
        Ok(self)
    }

    pub fn without_gradients(mut self) -> Self {
        self.gradients = None;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn gradients(&self) -> Option<&[f32]> {
        self.gradients.as_deref()
    }

    pub fn has_gradients(&self) -> bool {
        self.gradients.is_some()
    }

    /// The token values of one channel.
    pub fn channel(&self, ch: usize) -> &[f32] {
        &self.values[ch * self.tokens..(ch + 1) * self.tokens]
    }

    pub fn gradient_channel(&self, ch: usize) -> Option<&[f32]> {
        self.gradients
            .as_deref()
            .map(|g| &g[ch * self.tokens..(ch + 1) * self.tokens])
    }

    pub fn get(&self, ch: usize, token: usize) -> f32 {
        self.values[ch * self.tokens + token]
    }

    /// One token's activation vector across all channels.
    pub fn column(&self, token: usize) -> Vec<f32> {
        (0..self.channels).map(|ch| self.get(ch, token)).collect()
    }

    /// The first `tokens` tokens of this matrix (gradients included).
    pub fn prefix(&self, tokens: usize) -> Result<Self> {
        if tokens == 0 || tokens > self.tokens {
            return Err(Error::Shape(format!(
                "prefix of {tokens} tokens out of range 1..={}",
                self.tokens
            )));
        }
        let slice = |data: &[f32]| -> Vec<f32> {
            data.chunks_exact(self.tokens)
                .flat_map(|row| row[..tokens].iter().copied())
                .collect()
        };
        Ok(Self {
            channels: self.channels,
            tokens,
            values: slice(&self.values),
            gradients: self.gradients.as_deref().map(slice),
        })
    }

    /// Equality of values and gradients at the bit level.
    pub fn bit_eq(&self, other: &Self) -> bool {
        fn bits(a: &[f32], b: &[f32]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.channels == other.channels
            && self.tokens == other.tokens
            && bits(&self.values, &other.values)
            && match (&self.gradients, &other.gradients) {
                (None, None) => true,
                (Some(a), Some(b)) => bits(a, b),
                _ => false,
            }
    }

    pub fn shape_eq(&self, other: &Self) -> bool {
        self.channels == other.channels && self.tokens == other.tokens
    }
}

/// Tracks the byte offset so write failures can name it.
pub(crate) struct CountingWriter<W> {
    inner: W,
    pub(crate) written: u64,
}

impl<W: Write> CountingWriter<W> {
    pub(crate) fn new(inner: W) -> Self {
        Self { inner, written: 0 }
    }

    pub(crate) fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::Io {
            offset: self.written,
            source,
        })?;
        self.written += bytes.len() as u64;
        Ok(())
    }

    pub(crate) fn put_f32s(&mut self, data: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(data.len().min(1 << 14) * 4);
        for chunk in data.chunks(1 << 14) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            self.put(&buf)?;
        }
        Ok(())
    }

    pub(crate) fn finish(mut self) -> Result<u64> {
        self.inner.flush().map_err(|source| Error::Io {
            offset: self.written,
            source,
        })?;
        Ok(self.written)
    }
}

/// Tracks the byte offset so parse failures can name it.
pub(crate) struct OffsetReader<R> {
    inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn fill(&mut self, buf: &mut [u8], field: &'static str) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        field,
                        offset: self.offset + got as u64,
                    })
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(source) => {
                    return Err(Error::Io {
                        offset: self.offset + got as u64,
                        source,
                    })
                }
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, field)?;
        Ok(buf)
    }

    pub(crate) fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.array::<1>(field)?[0])
    }

    pub(crate) fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(field)?))
    }

    pub(crate) fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(field)?))
    }

    /// Reads `len` bytes in bounded chunks, so a corrupt length field
    /// cannot force a huge up-front allocation.
    pub(crate) fn bytes(&mut self, len: u64, field: &'static str) -> Result<Vec<u8>> {
        const CHUNK: u64 = 1 << 16;
        let mut out = Vec::with_capacity(len.min(CHUNK) as usize);
        let mut remaining = len;
        let mut buf = vec![0u8; CHUNK as usize];
        while remaining > 0 {
            let n = remaining.min(CHUNK) as usize;
            self.fill(&mut buf[..n], field)?;
            out.extend_from_slice(&buf[..n]);
            remaining -= n as u64;
        }
        Ok(out)
    }

    pub(crate) fn f32s(&mut self, count: u64, field: &'static str) -> Result<Vec<f32>> {
        let start = self.offset;
        let len = count.checked_mul(4).ok_or_else(|| Error::InvalidHeader {
            field,
            reason: format!("{count} entries overflow the address space"),
        })?;
        let raw = self.bytes(len, field)?;
        let mut out = Vec::with_capacity(count as usize);
        for (i, b) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    field,
                    offset: start + 4 * i as u64,
                });
            }
            out.push(v);
        }
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.array::<4>("magic")?;
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }
}

/// Writes `matrix` in ACTD format and returns the number of bytes written.
pub fn save_activations<W: Write>(matrix: &ActivationMatrix, sink: W) -> Result<u64> {
    let mut w = CountingWriter::new(sink);
    let flags = if matrix.has_gradients() {
        FLAG_GRADIENTS
    } else {
        0
    };
    w.put(&ACTD_MAGIC)?;
    w.put(&ACTD_VERSION.to_le_bytes())?;
    w.put(&flags.to_le_bytes())?;
    w.put(&(matrix.channels as u64).to_le_bytes())?;
    w.put(&(matrix.tokens as u64).to_le_bytes())?;
    w.put_f32s(&matrix.values)?;
    if let Some(g) = &matrix.gradients {
        w.put_f32s(g)?;
    }
    w.finish()
}

pub fn load_activations<R: Read>(source: R) -> Result<ActivationMatrix> {
    let mut r = OffsetReader::new(source);
    r.magic(ACTD_MAGIC)?;
    let version = r.u16("version")?;
    if version != ACTD_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "ACTD",
            version,
        });
    }
    let flags = r.u16("flags")?;
    if flags & !FLAG_GRADIENTS != 0 {
        return Err(Error::InvalidHeader {
            field: "flags",
            reason: format!("unknown flag bits {flags:#06x}"),
        });
    }
    let channels = r.u64("channels")?;
    let tokens = r.u64("tokens")?;
    if channels == 0 || tokens == 0 {
        return Err(Error::InvalidHeader {
            field: if channels == 0 { "channels" } else { "tokens" },
            reason: "must be positive".into(),
        });
    }
    let count = channels
        .checked_mul(tokens)
        .ok_or_else(|| Error::InvalidHeader {
            field: "tokens",
            reason: format!("{channels}x{tokens} overflows"),
        })?;
    let values = r.f32s(count, "values")?;
    let gradients = if flags & FLAG_GRADIENTS != 0 {
        Some(r.f32s(count, "gradients")?)
    } else {
        None
    };
    Ok(ActivationMatrix {
        channels: channels as usize,
        tokens: tokens as usize,
        values,
        gradients,
    })
}

/// How latent factors are mixed into channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mixing {
    /// Mixing entries drawn once from N(0, 1) and multiplied by the scale.
    #[default]
    Gaussian,
    /// `mixing_scale` times the identity; needs `latent_rank == channels`
    /// and yields mutually independent channels.
    Identity,
}

/// Parameters of a synthetic low-rank activation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub channels: usize,
    pub tokens: usize,
    pub latent_rank: usize,
    pub noise_sigma: f64,
    pub mixing_scale: f64,
    pub mixing: Mixing,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(channels: usize, tokens: usize, latent_rank: usize) -> Self {
        Self {
            channels,
            tokens,
            latent_rank,
            noise_sigma: 0.1,
            mixing_scale: 1.0,
            mixing: Mixing::Gaussian,
            seed: 0,
        }
    }

    pub fn noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn mixing(mut self, mixing: Mixing) -> Self {
        self.mixing = mixing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.tokens == 0 {
            return Err(Error::InvalidSpec(format!(
                "channels ({}) and tokens ({}) must be positive",
                self.channels, self.tokens
            )));
        }
        if self.latent_rank == 0 || self.latent_rank > self.channels {
            return Err(Error::InvalidSpec(format!(
                "latent rank {} must lie in 1..=channels ({})",
                self.latent_rank, self.channels
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "noise sigma {} must be finite and nonnegative",
                self.noise_sigma
            )));
        }
        if !(self.mixing_scale.is_finite() && self.mixing_scale > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "mixing scale {} must be positive",
                self.mixing_scale
            )));
        }
        if self.mixing == Mixing::Identity && self.latent_rank != self.channels {
            return Err(Error::InvalidSpec(format!(
                "identity mixing needs latent rank {} == channels {}",
                self.latent_rank, self.channels
            )));
        }
        Ok(())
    }
}

/// Generates `values[:, j] = M z_j + noise_sigma * e_j`.
///
/// Stream order: the channels × rank mixing matrix (row-major, Gaussian
/// mixing only), then per token the `rank` latent normals followed by the
/// `channels` noise normals. Noise is drawn even when `noise_sigma` is 0.
pub fn synth_correlated(spec: &SynthSpec) -> Result<ActivationMatrix> {
    spec.validate()?;
    let (channels, rank) = (spec.channels, spec.latent_rank);
    let mut stream = Stream::new(spec.seed);
    let mixing: Vec<f64> = match spec.mixing {
        Mixing::Gaussian => (0..channels * rank)
            .map(|_| stream.normal() * spec.mixing_scale)
            .collect(),
        Mixing::Identity => (0..channels * rank)
            .map(|i| {
                if i / rank == i % rank {
                    spec.mixing_scale
                } else {
                    0.0
                }
            })
            .collect(),
    };
    let mut values = vec![0f32; channels * spec.tokens];
    let mut latent = vec![0f64; rank];
    for t in 0..spec.tokens {
        latent.iter_mut().for_each(|z| *z = stream.normal());
        for ch in 0..channels {
            let row = &mixing[ch * rank..(ch + 1) * rank];
            let signal: f64 = row.iter().zip(&latent).map(|(m, z)| m * z).sum();
            let noise = stream.normal() * spec.noise_sigma;
            values[ch * spec.tokens + t] = (signal + noise) as f32;
        }
    }
    ActivationMatrix::new(channels, spec.tokens, values)
}

/// Synthetic gradients concentrated on a subset of "hot" tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSpec {
    pub hot_fraction: f64,
    pub hot_scale: f64,
    pub cold_scale: f64,
    pub seed: u64,
}

impl Default for GradientSpec {
    fn default() -> Self {
        Self {
            hot_fraction: 0.1,
            hot_scale: 1.0,
            cold_scale: 0.01,
            seed: 0,
        }
    }
}

impl GradientSpec {
    /// The `round(hot_fraction * tokens)` hot token indices, ascending,
    /// chosen by a partial Fisher-Yates shuffle.
    pub fn hot_tokens(&self, tokens: usize) -> Result<Vec<usize>> {
        if !(0.0..=1.0).contains(&self.hot_fraction) {
            return Err(Error::InvalidSpec(format!(
                "hot fraction {} must lie in [0, 1]",
                self.hot_fraction
            )));
        }
        let count = (self.hot_fraction * tokens as f64).round() as usize;
        let mut order: Vec<usize> = (0..tokens).collect();
        let mut stream = Stream::new(self.seed);
        for i in 0..count {
            let j = i + (stream.next_u64() % (tokens - i) as u64) as usize;
            order.swap(i, j);
        }
        let mut hot = order[..count].to_vec();
        hot.sort_unstable();
        Ok(hot)
    }
}

/// Attaches gradients `N(0, 1) * scale` where the scale is `hot_scale` on
/// hot tokens and `cold_scale` elsewhere. Normals are drawn channel-major
/// after the hot-token shuffle.
pub fn synth_gradients(matrix: ActivationMatrix, spec: &GradientSpec) -> Result<ActivationMatrix> {
    if !(spec.hot_scale.is_finite() && spec.cold_scale.is_finite())
        || spec.hot_scale < 0.0
        || spec.cold_scale < 0.0
    {
        return Err(Error::InvalidSpec(
            "gradient scales must be finite and nonnegative".into(),
        ));
    }
    let tokens = matrix.tokens();
    let mut is_hot = vec![false; tokens];
    for t in spec.hot_tokens(tokens)? {
        is_hot[t] = true;
    }
    let mut stream = Stream::new(crate::rng::derive_seed(spec.seed, 0));
    let grads = (0..matrix.channels() * tokens)
        .map(|i| {
            let scale = if is_hot[i % tokens] {
                spec.hot_scale
            } else {
                spec.cold_scale
            };
            (stream.normal() * scale) as f32
        })
        .collect();
    matrix.with_gradients(grads)
}

/// Model dimensions that determine KV-cache size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub layers: usize,
    pub kv_heads: usize,
    pub head_channels: usize,
    pub max_context: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.kv_heads == 0
            || self.head_channels == 0
            || self.max_context == 0
        {
            return Err(Error::InvalidSpec(format!(
                "all model dims must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Floating-point numbers cached per token: `layers * 2 * kv_heads * head_channels`.
    pub fn fpn_per_token(&self) -> u128 {
        self.layers as u128 * 2 * self.kv_heads as u128 * self.head_channels as u128
    }
}

/// Bytes needed to cache `tokens` tokens for `batch` sequences at
/// `bits_per_fpn` bits per floating-point number, rounded up.
pub fn kv_cache_bytes(
    dims: &ModelDims,
    batch: usize,
    tokens: usize,
    bits_per_fpn: f64,
) -> Result<u64> {
    dims.validate()?;
    if !(bits_per_fpn.is_finite() && bits_per_fpn > 0.0) {
        return Err(Error::Domain(format!(
            "bits per FPN {bits_per_fpn} must be positive"
        )));
    }
    if tokens > dims.max_context {
        return Err(Error::Domain(format!(
            "{tokens} tokens exceed the maximum context of {}",
            dims.max_context
        )));
    }
    let fpn = batch as u128 * tokens as u128 * dims.fpn_per_token();
    let bits = fpn as f64 * bits_per_fpn;
    if bits >= (1u64 << 53) as f64 {
        return Err(Error::Domain(format!(
            "{fpn} FPN exceed exact size accounting"
        )));
    }
    Ok((bits / 8.0).ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(grad: bool) -> ActivationMatrix {
        let m = ActivationMatrix::new(2, 3, vec![1.0, -2.0, 3.5, 0.25, 1e-7, -0.0]).unwrap();
        if grad {
            m.with_gradients(vec![0.5; 6]).unwrap()
        } else {
            m
        }
    }

    fn to_bytes(m: &ActivationMatrix) -> Vec<u8> {
        let mut buf = Vec::new();
        let n = save_activations(m, &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        buf
    }

    #[test]
    fn saved_sizes() {
        assert_eq!(to_bytes(&sample(false)).len(), 48);
        assert_eq!(to_bytes(&sample(true)).len(), 72);
        let zero = ActivationMatrix::new(1, 1, vec![0.0]).unwrap();
        let bytes = to_bytes(&zero);
        assert_eq!(&bytes[24..], &[0, 0, 0, 0]);
    }

    #[test]
    fn round_trip_bit_exact() {
        for grad in [false, true] {
            let m = sample(grad);
            let back = load_activations(to_bytes(&m).as_slice()).unwrap();
            assert!(back.bit_eq(&m));
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = to_bytes(&sample(false));
        bytes[0] = b'X';
        assert!(matches!(
            load_activations(bytes.as_slice()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = to_bytes(&sample(false));
        bytes[4] = 2;
        assert!(matches!(
            load_activations(bytes.as_slice()),
            Err(Error::UnsupportedVersion { version: 2, .. })
        ));
    }

    #[test]
    fn truncated_payload_names_offset() {
        let bytes = to_bytes(&sample(false));
        let err = load_activations(&bytes[..30]).unwrap_err();
        match err {
            Error::Truncated { field, offset } => {
                assert_eq!(field, "values");
                assert_eq!(offset, 30);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_msg(&bytes[..30]).contains("truncated at offset 30"));
        let err = load_activations(&bytes[..10]).unwrap_err();
        assert!(matches!(
            err,
            Error::Truncated {
                field: "channels",
                offset: 10
            }
        ));
    }

    fn err_msg(bytes: &[u8]) -> String {
        load_activations(bytes).unwrap_err().to_string()
    }

    #[test]
    fn nan_payload_rejected() {
        let mut bytes = to_bytes(&sample(true));
        bytes[24 + 8..24 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            load_activations(bytes.as_slice()),
            Err(Error::NonFinite {
                field: "values",
                offset: 32
            })
        ));
        let mut bytes = to_bytes(&sample(true));
        bytes[48..52].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            load_activations(bytes.as_slice()),
            Err(Error::NonFinite {
                field: "gradients",
                offset: 48
            })
        ));
    }

    #[test]
    fn constructor_rejects_non_finite_and_bad_shape() {
        assert!(ActivationMatrix::new(2, 2, vec![0.0, 1.0, f32::NAN, 0.0]).is_err());
        assert!(ActivationMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ActivationMatrix::new(0, 2, vec![]).is_err());
        assert!(sample(false).with_gradients(vec![0.0; 5]).is_err());
    }

    #[test]
    fn write_failure_reports_offset() {
        struct Limited(usize);
        impl Write for Limited {
            fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
                if self.0 == 0 {
                    return Err(io::Error::other("full"));
                }
                let n = buf.len().min(self.0);
                self.0 -= n;
                Ok(n)
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let err = save_activations(&sample(false), Limited(16)).unwrap_err();
        assert!(matches!(err, Error::Io { offset: 16, .. }), "{err:?}");
    }

    #[test]
    fn rank_one_noiseless_is_collinear() {
        let spec = SynthSpec::new(2, 512, 1).noise(0.0).seed(3);
        let m = synth_correlated(&spec).unwrap();
        let (a, b) = (m.channel(0), m.channel(1));
        let mean = |x: &[f32]| x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        let (ma, mb) = (mean(a), mean(b));
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            cov += (x as f64 - ma) * (y as f64 - mb);
            va += (x as f64 - ma).powi(2);
            vb += (y as f64 - mb).powi(2);
        }
        let r = cov / (va * vb).sqrt();
        assert!((r.abs() - 1.0).abs() < 1e-6, "r = {r}");
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec::new(8, 100, 3).seed(11);
        let a = synth_correlated(&spec).unwrap();
        let b = synth_correlated(&spec).unwrap();
        assert!(a.bit_eq(&b));
        let c = synth_correlated(&spec.clone().seed(12)).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn gradients_concentrate_on_hot_tokens() {
        let m = synth_correlated(&SynthSpec::new(4, 200, 2).seed(1)).unwrap();
        let spec = GradientSpec {
            seed: 5,
            ..GradientSpec::default()
        };
        let hot = spec.hot_tokens(200).unwrap();
        assert_eq!(hot.len(), 20);
        assert!(hot.windows(2).all(|w| w[0] < w[1]));
        let g = synth_gradients(m, &spec).unwrap();
        let grads = g.gradients().unwrap();
        let energy = |t: usize| {
            (0..4)
                .map(|ch| (grads[ch * 200 + t] as f64).powi(2))
                .sum::<f64>()
        };
        let hot_energy: f64 = hot.iter().map(|&t| energy(t)).sum();
        let total: f64 = (0..200).map(energy).sum();
        assert!(hot_energy / total > 0.99);
    }

    #[test]
    fn synth_rejects_bad_rank() {
        let err = synth_correlated(&SynthSpec::new(4, 10, 5)).unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)));
        assert!(err.to_string().contains('5') && err.to_string().contains('4'));
        assert!(synth_correlated(&SynthSpec::new(4, 10, 3).mixing(Mixing::Identity)).is_err());
    }

    const LLAMA: ModelDims = ModelDims {
        layers: 32,
        kv_heads: 32,
        head_channels: 128,
        max_context: 4096,
    };

    #[test]
    fn cache_bytes() {
        assert_eq!(kv_cache_bytes(&LLAMA, 1, 2048, 16.0).unwrap(), 1 << 30);
        assert_eq!(kv_cache_bytes(&LLAMA, 1, 0, 16.0).unwrap(), 0);
        assert_eq!(
            kv_cache_bytes(&LLAMA, 1, 2048, 16.0).unwrap(),
            16 * kv_cache_bytes(&LLAMA, 1, 2048, 1.0).unwrap()
        );
        assert_eq!(kv_cache_bytes(&LLAMA, 3, 17, 1.25).unwrap(), {
            let bits = 3 * 17 * 32 * 2 * 32 * 128 * 5;
            (bits as u64).div_ceil(32)
        });
        assert!(matches!(
            kv_cache_bytes(&LLAMA, 1, 4097, 16.0),
            Err(Error::Domain(_))
        ));
    }
}
