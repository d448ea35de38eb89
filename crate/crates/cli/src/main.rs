//! `cqkv`: generate activations, learn codebooks, quantize caches, measure
//! entropy and simulate attention decode under quantized KV storage.

mod codec_arg;
mod report;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cqkv::attnsim::{run_decode, synth_qkv, DecodeReport, DecodeScenario, KvCodec};
use cqkv::baselines::UniformIntCodec;
use cqkv::cqcodec::{learn_codebook_with_stats, CQCB_MAGIC, CQQC_MAGIC};
use cqkv::infostats::{correlation_matrix, entropy_sweep, write_entropy_csv};
use cqkv::{
    codebook_param_count, dequantize, kv_cache_bytes, load_activations, quantization_error,
    quantize, save_activations, synth_correlated, synth_gradients, ActivationMatrix, CQConfig,
    Codebook, Coupling, Error, ErrorClass, GradientSpec, LearningMode, Mixing, ModelDims,
    QuantizedCache, SynthSpec,
};
use rayon::prelude::*;

use codec_arg::CodecArg;
use report::{Format, Summary};

#[derive(Parser)]
#[command(name = "cqkv", version, about = "Coupled quantization for KV caches")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// How the run summary is printed.
    #[arg(long, global = true, value_enum, default_value = "text")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic correlated activation matrix.
    Gen(GenArgs),
    /// Learn a codebook from an activation dump.
    Calibrate(CalibrateArgs),
    /// Encode an activation dump into a quantized cache.
    Quantize(QuantizeArgs),
    /// Decode a quantized cache back to activations.
    Dequantize(DequantizeArgs),
    /// Entropy sweep and channel correlation reports.
    Stats(StatsArgs),
    /// Compare attention outputs under quantized KV caches.
    Simulate(SimulateArgs),
    /// Centroid parameter and KV cache size arithmetic.
    Size(SizeArgs),
    /// Describe an ACTD, CQCB or CQQC file.
    Info(InfoArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    channels: usize,
    #[arg(long)]
    tokens: usize,
    #[arg(long, default_value_t = 1)]
    rank: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    mixing_scale: f64,
    /// Use the identity as mixing matrix (needs rank == channels).
    #[arg(long)]
    identity_mixing: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also store synthetic gradients concentrated on a subset of tokens.
    #[arg(long)]
    gradients: bool,
    #[arg(long, default_value_t = 0.1)]
    hot_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    hot_scale: f64,
    #[arg(long, default_value_t = 0.01)]
    cold_scale: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct LearnArgs {
    /// Coupling in <c>c<b>b notation, e.g. 4c8b.
    #[arg(long, value_parser = parse_coupling)]
    cq: Coupling,
    /// Weight tokens by squared gradients (dump must carry gradients).
    #[arg(long)]
    fisher: bool,
    #[arg(long, default_value_t = cqkv::cqcodec::DEFAULT_KMEANS_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl LearnArgs {
    fn config(&self) -> CQConfig {
        let mode = if self.fisher {
            LearningMode::Fisher
        } else {
            LearningMode::Uniform
        };
        CQConfig::new(self.cq)
            .mode(mode)
            .iters(self.iters)
            .seed(self.seed)
    }
}

#[derive(Args)]
struct CalibrateArgs {
    input: PathBuf,
    #[command(flatten)]
    learn: LearnArgs,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    input: PathBuf,
    /// Existing codebook; otherwise one is learned with --cq.
    #[arg(long, conflicts_with_all = ["cq", "fisher", "save_codebook"])]
    codebook: Option<PathBuf>,
    #[arg(long, value_parser = parse_coupling, required_unless_present = "codebook")]
    cq: Option<Coupling>,
    #[arg(long)]
    fisher: bool,
    #[arg(long, default_value_t = cqkv::cqcodec::DEFAULT_KMEANS_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to store a codebook learned on the fly.
    #[arg(long)]
    save_codebook: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct DequantizeArgs {
    cache: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    /// Original activations; reports reconstruction error.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    group_sizes: Vec<usize>,
    #[arg(long, default_value_t = cqkv::infostats::DEFAULT_NUM_BINS)]
    bins: usize,
    #[arg(long, default_value_t = 32)]
    channel_limit: usize,
    /// Directory for entropy.csv and correlation.csv.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, requires_all = ["keys", "values"])]
    queries: Option<PathBuf>,
    #[arg(long, requires = "queries")]
    keys: Option<PathBuf>,
    #[arg(long, requires = "queries")]
    values: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long, default_value_t = 1024)]
    tokens: usize,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Seeds synthetic data and codebook learning.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// none, cq:<c>c<b>b[:fisher], int:<bits>[:channel|:token][:gs<N>]; repeatable.
    #[arg(long = "codec", default_value = "none")]
    codecs: Vec<String>,
    /// Rotate queries and keys by position before scoring.
    #[arg(long)]
    rope: bool,
    #[arg(long, default_value_t = cqkv::attnsim::DEFAULT_ROPE_BASE)]
    rope_base: f64,
    /// Divide scores by sqrt(head_dim).
    #[arg(long)]
    scale_scores: bool,
    #[arg(long, default_value_t = cqkv::cqcodec::DEFAULT_KMEANS_ITERS)]
    iters: usize,
    /// Directory for per-codec CSVs and summary.json.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SizeArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    kv_heads: usize,
    #[arg(long)]
    head_dim: usize,
    #[arg(long, value_parser = parse_coupling)]
    cq: Option<Coupling>,
    #[arg(long, requires = "tokens")]
    batch: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    /// Bits per floating-point number (default: from --cq, else 16).
    #[arg(long)]
    bits: Option<f64>,
    /// Longest supported context (default: --tokens).
    #[arg(long)]
    max_context: Option<usize>,
}

#[derive(Args)]
struct InfoArgs {
    file: PathBuf,
}

/// `--cq` takes exactly `<c>c<b>b`.
fn parse_coupling(s: &str) -> std::result::Result<Coupling, Error> {
    if s.starts_with("CQ-") {
        return Err(Error::InvalidConfig(format!(
            "`{s}` is not of the form <c>c<b>b"
        )));
    }
    s.parse()
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write(&mut w)?;
    w.flush()
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<ActivationMatrix> {
    load_activations(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn read_codebook(path: &Path) -> Result<Codebook> {
    Codebook::load(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn mode_name(fisher: bool) -> &'static str {
    if fisher {
        "fisher"
    } else {
        "uniform"
    }
}

fn cmd_gen(a: GenArgs) -> Result<Summary> {
    let mut spec = SynthSpec::new(a.channels, a.tokens, a.rank)
        .noise(a.noise)
        .seed(a.seed);
    spec.mixing_scale = a.mixing_scale;
    if a.identity_mixing {
        spec = spec.mixing(Mixing::Identity);
    }
    let mut m = synth_correlated(&spec)?;
    let mut s = Summary::new("gen")
        .with("output", a.output.display().to_string())
        .with("channels", a.channels)
        .with("tokens", a.tokens)
        .with("rank", a.rank)
        .with("noise", a.noise)
        .with("mixing_scale", a.mixing_scale)
        .with(
            "mixing",
            if a.identity_mixing {
                "identity"
            } else {
                "gaussian"
            },
        )
        .with("seed", a.seed)
        .with("gradients", a.gradients);
    if a.gradients {
        let g = GradientSpec {
            hot_fraction: a.hot_fraction,
            hot_scale: a.hot_scale,
            cold_scale: a.cold_scale,
            seed: a.seed,
        };
        m = synth_gradients(m, &g)?;
        s.push("hot_fraction", a.hot_fraction);
    }
    let mut bytes = 0;
    write_file(&a.output, |w| {
        bytes = save_activations(&m, w)?;
        Ok(())
    })?;
    Ok(s.with("bytes", bytes))
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<Summary> {
    let m = read_matrix(&a.input)?;
    let cfg = a.learn.config();
    let start = Instant::now();
    let (cb, stats) = learn_codebook_with_stats(&m, &cfg)?;
    eprintln!(
        "learned {} groups in {:.2}s",
        stats.len(),
        start.elapsed().as_secs_f64()
    );
    write_file(&a.output, |w| Ok(cb.save(w).map(drop)?))?;

    let objectives: Vec<f64> = stats.iter().map(|g| g.objective).collect();
    let total: f64 = objectives.iter().sum();
    let count = |f: fn(&cqkv::cqcodec::GroupStats) -> bool| stats.iter().filter(|g| f(g)).count();
    Ok(Summary::new("calibrate")
        .with("output", a.output.display().to_string())
        .with("coupling", cfg.coupling.to_string())
        .with("mode", mode_name(a.learn.fisher))
        .with("seed", cfg.seed)
        .with("kmeans_iters", cfg.kmeans_iters)
        .with("groups", cb.num_groups())
        .with("centroids_per_group", cfg.coupling.centroids_per_group())
        .with("bits_per_fpn", cfg.coupling.bits_per_fpn())
        .with("objective_total", total)
        .with(
            "objective_min",
            objectives.iter().copied().fold(f64::INFINITY, f64::min),
        )
        .with(
            "objective_max",
            objectives.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
        .with("objective_mean", total / objectives.len() as f64)
        .with("converged_groups", count(|g| g.converged))
        .with("shortfall_groups", count(|g| g.shortfall))
        .with("fisher_fallback_groups", count(|g| g.fisher_fallback))
        .with("codebook_hash", format!("{:016x}", cb.hash())))
}

fn cmd_quantize(a: QuantizeArgs) -> Result<Summary> {
    let m = read_matrix(&a.input)?;
    let mut s = Summary::new("quantize").with("output", a.output.display().to_string());
    let cb = match (&a.codebook, a.cq) {
        (Some(path), _) => {
            s.push("codebook", path.display().to_string());
            read_codebook(path)?
        }
        (None, Some(coupling)) => {
            let mode = if a.fisher {
                LearningMode::Fisher
            } else {
                LearningMode::Uniform
            };
            let cfg = CQConfig::new(coupling)
                .mode(mode)
                .iters(a.iters)
                .seed(a.seed);
            let cb = cqkv::learn_codebook(&m, &cfg)?;
            s.push("mode", mode_name(a.fisher));
            s.push("seed", a.seed);
            if let Some(path) = &a.save_codebook {
                write_file(path, |w| Ok(cb.save(w).map(drop)?))?;
                s.push("codebook", path.display().to_string());
            }
            cb
        }
        (None, None) => unreachable!("clap requires --codebook or --cq"),
    };
    let q = quantize(&m, &cb)?;
    write_file(&a.output, |w| Ok(q.save(w).map(drop)?))?;
    let bpf = cb.coupling().bits_per_fpn();
    Ok(s.with("coupling", cb.coupling().to_string())
        .with("groups", q.num_groups())
        .with("tokens", q.tokens())
        .with("bits_per_fpn", bpf)
        .with("compression_vs_fp16", 16.0 / bpf)
        .with("payload_bits", q.payload_bits())
        .with("payload_bytes", q.payload().len())
        .with("codebook_hash", format!("{:016x}", cb.hash())))
}

fn cmd_dequantize(a: DequantizeArgs) -> Result<Summary> {
    let q = QuantizedCache::load(open(&a.cache)?)
        .with_context(|| format!("reading {}", a.cache.display()))?;
    let cb = read_codebook(&a.codebook)?;
    let m = dequantize(&q, &cb)?;
    write_file(&a.output, |w| Ok(save_activations(&m, w).map(drop)?))?;
    let mut s = Summary::new("dequantize")
        .with("output", a.output.display().to_string())
        .with("channels", m.channels())
        .with("tokens", m.tokens());
    if let Some(path) = &a.reference {
        let original = read_matrix(path)?;
        let err = quantization_error(&original, &m)?;
        s.push("sq_error", err);
        s.push("mse", err / original.values().len() as f64);
    }
    Ok(s)
}

fn cmd_stats(a: StatsArgs) -> Result<Summary> {
    let m = read_matrix(&a.input)?;
    let reports = entropy_sweep(&m, &a.group_sizes, a.bins)?;
    let corr = correlation_matrix(&m, a.channel_limit)?;
    fs::create_dir_all(&a.output)
        .with_context(|| format!("cannot create {}", a.output.display()))?;
    write_file(&a.output.join("entropy.csv"), |w| {
        Ok(write_entropy_csv(&reports, w)?)
    })?;
    write_file(
        &a.output.join("correlation.csv"),
        |w| Ok(corr.write_csv(w)?),
    )?;

    let rows: Vec<Summary> = reports
        .iter()
        .map(|r| {
            Summary::default()
                .with("group_size", r.group_size)
                .with("groups", r.num_groups())
                .with("joint_mean", r.joint_mean)
                .with("joint_std", r.joint_std)
                .with("sum_marginal_mean", r.sum_marginal_mean)
                .with("sum_marginal_std", r.sum_marginal_std)
                .with("dropped_channels", r.dropped_channels)
        })
        .collect();
    Ok(Summary::new("stats")
        .with("output", a.output.display().to_string())
        .with("bins", a.bins)
        .with("correlation_channels", corr.n)
        .with(
            "degenerate_channels",
            corr.degenerate.iter().filter(|&&d| d).count(),
        )
        .with("entropy", rows))
}

fn build_codec(
    arg: &CodecArg,
    calibration: &ActivationMatrix,
    seed: u64,
    iters: usize,
) -> Result<KvCodec> {
    Ok(match *arg {
        CodecArg::None => KvCodec::Identity,
        CodecArg::Cq(coupling, mode) => {
            let cfg = CQConfig::new(coupling).mode(mode).iters(iters).seed(seed);
            KvCodec::Cq(cqkv::learn_codebook(calibration, &cfg)?)
        }
        CodecArg::Int(cfg) => KvCodec::UniformInt(UniformIntCodec::fit(calibration, cfg)?),
    })
}

fn cmd_simulate(a: SimulateArgs) -> Result<Summary> {
    let codecs = a
        .codecs
        .iter()
        .map(|c| c.parse::<CodecArg>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (q, k, v, source) = match (&a.queries, &a.keys, &a.values) {
        (Some(q), Some(k), Some(v)) => (read_matrix(q)?, read_matrix(k)?, read_matrix(v)?, "files"),
        _ => {
            let spec = SynthSpec::new(a.head_dim, a.tokens, a.rank)
                .noise(a.noise)
                .seed(a.seed);
            let [q, k, v] = synth_qkv(&spec)?;
            (q, k, v, "synthetic")
        }
    };
    let mut base = DecodeScenario::new(q, k, v)?;
    if a.rope {
        base = base.with_rope(a.rope_base);
    }
    base.scale_scores = a.scale_scores;

    let reports: Vec<DecodeReport> = codecs
        .par_iter()
        .map(|c| -> Result<DecodeReport> {
            let key = build_codec(c, &base.keys, a.seed, a.iters)?;
            let value = build_codec(c, &base.values, a.seed, a.iters)?;
            Ok(run_decode(&base.clone().with_codecs(key, value))?)
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(&a.output)
        .with_context(|| format!("cannot create {}", a.output.display()))?;
    let mut files = Vec::new();
    for r in &reports {
        let name = format!("decode_{}.csv", r.summary.key_codec);
        write_file(&a.output.join(&name), |w| Ok(r.write_csv(w)?))?;
        files.push(name);
    }
    let mut ranking: Vec<&DecodeReport> = reports.iter().collect();
    ranking.sort_by(|x, y| {
        x.summary
            .mean_rel_l2_err
            .total_cmp(&y.summary.mean_rel_l2_err)
    });
    let summary = Summary::new("simulate")
        .with("source", source)
        .with("seed", a.seed)
        .with("head_channels", base.head_channels())
        .with("steps", base.tokens())
        .with("rope_base", base.rope_base)
        .with("scale_scores", a.scale_scores)
        .with("kmeans_iters", a.iters)
        .with("reports", files)
        .with(
            "results",
            reports.iter().map(|r| &r.summary).collect::<Vec<_>>(),
        )
        .with(
            "ranking",
            ranking
                .iter()
                .map(|r| r.summary.key_codec.clone())
                .collect::<Vec<_>>(),
        );
    write_file(&a.output.join("summary.json"), |w| {
        writeln!(w, "{}", summary.to_json())?;
        Ok(())
    })?;
    Ok(summary)
}

fn cmd_size(a: SizeArgs) -> Result<Summary> {
    let dims = ModelDims {
        layers: a.layers,
        kv_heads: a.kv_heads,
        head_channels: a.head_dim,
        max_context: a.max_context.or(a.tokens).unwrap_or(usize::MAX),
    };
    dims.validate()?;
    let mut s = Summary::new("size")
        .with("layers", a.layers)
        .with("kv_heads", a.kv_heads)
        .with("head_dim", a.head_dim)
        .with("fpn_per_token", dims.fpn_per_token() as u64);
    if let Some(c) = a.cq {
        let params = codebook_param_count(&dims, &c)?;
        s.push("coupling", c.to_string());
        s.push("centroid_params", params);
        s.push("centroid_bytes_f16", params * 2);
        s.push("centroid_bytes_f32", params * 4);
    }
    if let Some(tokens) = a.tokens {
        let bits = a.bits.or(a.cq.map(|c| c.bits_per_fpn())).unwrap_or(16.0);
        let batch = a.batch.unwrap_or(1);
        s.push("batch", batch);
        s.push("tokens", tokens);
        s.push("bits_per_fpn", bits);
        s.push("cache_bytes", kv_cache_bytes(&dims, batch, tokens, bits)?);
    }
    Ok(s)
}

fn cmd_info(a: InfoArgs) -> Result<Summary> {
    let mut magic = [0u8; 4];
    open(&a.file)?
        .read_exact(&mut magic)
        .map_err(|e| Error::Io {
            offset: 0,
            source: e,
        })
        .with_context(|| format!("reading {}", a.file.display()))?;
    let s = Summary::new("info").with("file", a.file.display().to_string());
    Ok(match magic {
        cqkv::actdata::ACTD_MAGIC => {
            let m = read_matrix(&a.file)?;
            s.with("format", "ACTD")
                .with("channels", m.channels())
                .with("tokens", m.tokens())
                .with("gradients", m.has_gradients())
        }
        CQCB_MAGIC => {
            let cb = read_codebook(&a.file)?;
            s.with("format", "CQCB")
                .with("coupling", cb.coupling().to_string())
                .with("mode", cb.mode().to_string())
                .with("groups", cb.num_groups())
                .with("channels", cb.channels())
                .with("params", cb.param_count())
                .with("storage_bytes_f16", cb.storage_bytes_f16())
                .with("storage_bytes_f32", cb.storage_bytes_f32())
                .with(
                    "fisher_fallback_groups",
                    cb.fisher_fallback().iter().filter(|&&f| f).count(),
                )
                .with("hash", format!("{:016x}", cb.hash()))
        }
        CQQC_MAGIC => {
            let q = QuantizedCache::load(open(&a.file)?)
                .with_context(|| format!("reading {}", a.file.display()))?;
            s.with("format", "CQQC")
                .with("coupling", q.coupling().to_string())
                .with("groups", q.num_groups())
                .with("tokens", q.tokens())
                .with("payload_bytes", q.payload().len())
                .with("codebook_hash", format!("{:016x}", q.codebook_hash()))
        }
        found => {
            return Err(Error::InvalidHeader {
                field: "magic",
                reason: format!("{found:?} is not ACTD, CQCB or CQQC"),
            }
            .into())
        }
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.class() {
                ErrorClass::Io => 3,
                ErrorClass::Format => 4,
                ErrorClass::Shape => 5,
                ErrorClass::MissingGradients => 6,
                ErrorClass::Config => 7,
                ErrorClass::Codec => 8,
                ErrorClass::Domain => 9,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> Result<Summary> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Dequantize(a) => cmd_dequantize(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Size(a) => cmd_size(a),
        Command::Info(a) => cmd_info(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let format = cli.format;
    match run(cli) {
        Ok(summary) => {
            println!("{}", summary.render(format));
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
