//! Single-head masked attention decoding over exact and quantized caches.
//!
//! Scores are the plain inner products `K^T q`; the customary `1/sqrt(d)`
//! factor is applied only when [`DecodeScenario::scale_scores`] is set.
//! Keys go through the codec before rotary embedding, values directly.
//! Queries are never quantized.

use std::io::{self, Write};

use serde::Serialize;

use crate::actdata::{synth_correlated, ActivationMatrix, SynthSpec};
use crate::baselines::UniformIntCodec;
use crate::cqcodec::{dequantize, quantize, Codebook};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Rotates channel pairs `(2i, 2i + 1)` by `position * base^(-2i / d)`.
pub fn rope_rotate(embedding: &[f32], position: usize, base: f64) -> Result<Vec<f32>> {
    let d = embedding.len();
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "rotary embedding needs an even dimension, got {d}"
        )));
    }
    if !(base.is_finite() && base > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "rotary base {base} must be positive"
        )));
    }
    let mut out = vec![0f32; d];
    for i in 0..d / 2 {
        let theta = base.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = (theta * position as f64).sin_cos();
        let (x, y) = (embedding[2 * i] as f64, embedding[2 * i + 1] as f64);
        out[2 * i] = (x * cos - y * sin) as f32;
        out[2 * i + 1] = (x * sin + y * cos) as f32;
    }
    Ok(out)
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Attention of one query over `t` cached tokens. `keys` and `values` are
/// token-major: token `i` occupies `keys[i * d_k..(i + 1) * d_k]`.
pub fn attention_step(
    query: &[f32],
    keys: &[f32],
    values: &[f32],
    scale_scores: bool,
) -> Result<AttentionOutput> {
    let dk = query.len();
    if dk == 0 || keys.is_empty() || !keys.len().is_multiple_of(dk) {
        return Err(Error::Shape(format!(
            "{} key entries do not form columns of dimension {dk}",
            keys.len()
        )));
    }
    let t = keys.len() / dk;
    if !values.len().is_multiple_of(t) || values.is_empty() {
        return Err(Error::Shape(format!(
            "{} value entries do not match {t} cached tokens",
            values.len()
        )));
    }
    let dv = values.len() / t;
    let scale = if scale_scores {
        1.0 / (dk as f64).sqrt()
    } else {
        1.0
    };
    let scores: Vec<f64> = keys
        .chunks_exact(dk)
        .map(|k| {
            k.iter()
                .zip(query)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                * scale
        })
        .collect();
    let weights = softmax(&scores);
    let mut output = vec![0.0f64; dv];
    for (w, v) in weights.iter().zip(values.chunks_exact(dv)) {
        for (o, &x) in output.iter_mut().zip(v) {
            *o += w * x as f64;
        }
    }
    Ok(AttentionOutput { output, weights })
}

/// How the cached keys or values are stored on the quantized path.
#[derive(Debug, Clone)]
pub enum KvCodec {
    Identity,
    Cq(Codebook),
    UniformInt(UniformIntCodec),
}

impl KvCodec {
    pub fn label(&self) -> String {
        match self {
            KvCodec::Identity => "none".into(),
            KvCodec::Cq(cb) => format!("{}-{}", cb.coupling(), cb.mode()),
            KvCodec::UniformInt(c) => {
                let cfg = c.config();
                let axis = match cfg.axis {
                    crate::baselines::Axis::PerChannel => "channel",
                    crate::baselines::Axis::PerToken => "token",
                };
                match cfg.group_size {
                    Some(g) => format!("INT{}-{axis}-gs{g}", cfg.bits),
                    None => format!("INT{}-{axis}", cfg.bits),
                }
            }
        }
    }

    /// Stores and reloads every token column of `matrix`.
    pub fn round_trip(&self, matrix: &ActivationMatrix) -> Result<ActivationMatrix> {
        match self {
            KvCodec::Identity => Ok(matrix.clone().without_gradients()),
            KvCodec::Cq(cb) => dequantize(&quantize(matrix, cb)?, cb),
            KvCodec::UniformInt(codec) => {
                let mut values = vec![0f32; matrix.values().len()];
                let tokens = matrix.tokens();
                for t in 0..tokens {
                    for (ch, v) in codec
                        .reconstruct_column(&matrix.column(t))?
                        .into_iter()
                        .enumerate()
                    {
                        values[ch * tokens + t] = v;
                    }
                }
                ActivationMatrix::new(matrix.channels(), tokens, values)
            }
        }
    }
}

/// Query, key and value activations (`head_channels x tokens` each) and the
/// codecs used on the quantized path.
#[derive(Debug, Clone)]
pub struct DecodeScenario {
    pub queries: ActivationMatrix,
    pub keys: ActivationMatrix,
    pub values: ActivationMatrix,
    /// Rotary base, or `None` to skip positional rotation.
    pub rope_base: Option<f64>,
    pub scale_scores: bool,
    pub key_codec: KvCodec,
    pub value_codec: KvCodec,
}

impl DecodeScenario {
    pub fn new(
        queries: ActivationMatrix,
        keys: ActivationMatrix,
        values: ActivationMatrix,
    ) -> Result<Self> {
        if !queries.shape_eq(&keys) || !keys.shape_eq(&values) {
            return Err(Error::Shape(format!(
                "queries {}x{}, keys {}x{}, values {}x{} must agree",
                queries.channels(),
                queries.tokens(),
                keys.channels(),
                keys.tokens(),
                values.channels(),
                values.tokens()
            )));
        }
        Ok(Self {
            queries,
            keys,
            values,
            rope_base: None,
            scale_scores: false,
            key_codec: KvCodec::Identity,
            value_codec: KvCodec::Identity,
        })
    }

    pub fn with_rope(mut self, base: f64) -> Self {
        self.rope_base = Some(base);
        self
    }

    pub fn with_codecs(mut self, key: KvCodec, value: KvCodec) -> Self {
        self.key_codec = key;
        self.value_codec = value;
        self
    }

    pub fn head_channels(&self) -> usize {
        self.keys.channels()
    }

    pub fn tokens(&self) -> usize {
        self.keys.tokens()
    }

    /// The same scenario restricted to its first `tokens` tokens.
    pub fn prefix(&self, tokens: usize) -> Result<Self> {
        Ok(Self {
            queries: self.queries.prefix(tokens)?,
            keys: self.keys.prefix(tokens)?,
            values: self.values.prefix(tokens)?,
            ..self.clone()
        })
    }
}

/// Independent query, key and value matrices drawn from `spec`, with seeds
/// derived from `spec.seed`.
pub fn synth_qkv(spec: &SynthSpec) -> Result<[ActivationMatrix; 3]> {
    let draw = |i| synth_correlated(&spec.clone().seed(derive_seed(spec.seed, i)));
    Ok([draw(0)?, draw(1)?, draw(2)?])
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based; step `t` attends over tokens `0..t`.
    pub step: usize,
    pub exact_output: Vec<f64>,
    pub quant_output: Vec<f64>,
    pub exact_norm: f64,
    pub rel_l2_err: f64,
    pub weight_tv_dist: f64,
    /// `|sum(weights) - 1|` on the exact path.
    pub exact_weight_sum_dev: f64,
    pub quant_weight_sum_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeSummary {
    pub key_codec: String,
    pub value_codec: String,
    pub head_channels: usize,
    pub steps: usize,
    pub rope_base: Option<f64>,
    pub scale_scores: bool,
    pub max_rel_l2_err: f64,
    pub mean_rel_l2_err: f64,
    pub max_weight_tv_dist: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeReport {
    pub steps: Vec<StepRecord>,
    pub summary: DecodeSummary,
}

pub const DECODE_CSV_HEADER: &str = "step,exact_out_norm,rel_l2_err,weight_tv_dist";

impl DecodeReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "# key_codec={} value_codec={} scale_scores={} rope_base={}",
            self.summary.key_codec,
            self.summary.value_codec,
            self.summary.scale_scores,
            self.summary
                .rope_base
                .map_or_else(|| "off".to_string(), |b| b.to_string())
        )?;
        writeln!(out, "{DECODE_CSV_HEADER}")?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{:.9e},{:.9e},{:.9e}",
                s.step, s.exact_norm, s.rel_l2_err, s.weight_tv_dist
            )?;
        }
        Ok(())
    }
}

/// Token-major copy of a channel-major matrix, keys optionally rotated.
fn token_major(matrix: &ActivationMatrix, rope: Option<f64>) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(matrix.values().len());
    for t in 0..matrix.tokens() {
        let col = matrix.column(t);
        match rope {
            Some(base) => out.extend(rope_rotate(&col, t, base)?),
            None => out.extend(col),
        }
    }
    Ok(out)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs the exact and quantized decode passes in lockstep over every step.
pub fn run_decode(scenario: &DecodeScenario) -> Result<DecodeReport> {
    let d = scenario.head_channels();
    let tokens = scenario.tokens();
    let rope = scenario.rope_base;

    let key_hat = scenario.key_codec.round_trip(&scenario.keys)?;
    let value_hat = scenario.value_codec.round_trip(&scenario.values)?;
    let exact_k = token_major(&scenario.keys, rope)?;
    let exact_v = token_major(&scenario.values, None)?;
    let quant_k = token_major(&key_hat, rope)?;
    let quant_v = token_major(&value_hat, None)?;

    let mut steps = Vec::with_capacity(tokens);
    for t in 1..=tokens {
        let q_raw = scenario.queries.column(t - 1);
        let q = match rope {
            Some(base) => rope_rotate(&q_raw, t - 1, base)?,
            None => q_raw,
        };
        let step_err = |e: Error| match e {
            Error::Shape(msg) => Error::Shape(format!("step {t}: {msg}")),
            other => other,
        };
        let exact = attention_step(
            &q,
            &exact_k[..t * d],
            &exact_v[..t * d],
            scenario.scale_scores,
        )
        .map_err(step_err)?;
        let quant = attention_step(
            &q,
            &quant_k[..t * d],
            &quant_v[..t * d],
            scenario.scale_scores,
        )
        .map_err(step_err)?;
        let diff: Vec<f64> = exact
            .output
            .iter()
            .zip(&quant.output)
            .map(|(a, b)| a - b)
            .collect();
        let exact_norm = l2(&exact.output);
        let diff_norm = l2(&diff);
        let rel_l2_err = if exact_norm > 0.0 {
            diff_norm / exact_norm
        } else {
            diff_norm
        };
        let weight_tv_dist = 0.5
            * exact
                .weights
                .iter()
                .zip(&quant.weights)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        steps.push(StepRecord {
            step: t,
            exact_norm,
            rel_l2_err,
            weight_tv_dist,
            exact_weight_sum_dev: (exact.weights.iter().sum::<f64>() - 1.0).abs(),
            quant_weight_sum_dev: (quant.weights.iter().sum::<f64>() - 1.0).abs(),
            exact_output: exact.output,
            quant_output: quant.output,
        });
    }

    let max_rel_l2_err = steps.iter().map(|s| s.rel_l2_err).fold(0.0, f64::max);
    let mean_rel_l2_err = steps.iter().map(|s| s.rel_l2_err).sum::<f64>() / steps.len() as f64;
    let max_weight_tv_dist = steps.iter().map(|s| s.weight_tv_dist).fold(0.0, f64::max);
    Ok(DecodeReport {
        summary: DecodeSummary {
            key_codec: scenario.key_codec.label(),
            value_codec: scenario.value_codec.label(),
            head_channels: d,
            steps: tokens,
            rope_base: rope,
            scale_scores: scenario.scale_scores,
            max_rel_l2_err,
            mean_rel_l2_err,
            max_weight_tv_dist,
        },
        steps,
    })
}
