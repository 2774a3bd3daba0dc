//! `ternsim` command-line front end.
//!
//! Exit codes: 0 success, 1 engine/oracle divergence, 2 usage, parse or
//! input error.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, ErrorKind, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ternsim::config::TileConfig;
use ternsim::dfp::RoundingMode;
use ternsim::graph::{build_resnet50, build_toy, quantize_model, ExecOptions, NetworkGraph, Simulator};
use ternsim::model::{self, synth_fp_model, synth_tensor};
use ternsim::perf::{self, PerfOptions, CSV_HEADER};
use ternsim::tensor::FpTensor;
use ternsim::validation::{self, Fault};

/// Stdout writes that treat a closed pipe as the reader being done.
fn write_stdout(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() != ErrorKind::BrokenPipe {
            eprintln!("error: writing stdout: {e}");
        }
    }
}

macro_rules! out {
    ($($arg:tt)*) => {
        write_stdout(&format!("{}\n", format_args!($($arg)*)))
    };
}

#[derive(Parser)]
#[command(name = "ternsim", version, about = "Simulator and performance model for a ternary-weight CNN accelerator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize an FP model blob into the accelerator format.
    Quantize {
        model_in: PathBuf,
        /// Tensor file used to pick per-layer activation exponents.
        calibration: PathBuf,
        model_out: PathBuf,
        #[arg(long, default_value_t = 64)]
        block_size: usize,
    },
    /// Run one inference on the simulator.
    Run {
        model: PathBuf,
        input: PathBuf,
        /// Preset name or JSON config file.
        #[arg(long, default_value = "arria10")]
        config: String,
        /// Write the engine trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "round-and-bias")]
        rounding: RoundingMode,
    },
    /// Performance report for a network.
    Perf {
        /// `resnet50`, `toy` or a JSON descriptor.
        network: String,
        #[arg(long, default_value = "arria10")]
        config: String,
        /// Clock in MHz; repeat for a sweep.
        #[arg(long = "freq")]
        freq_mhz: Vec<f64>,
        /// Board power in watts, for TOP/s/W.
        #[arg(long)]
        power: Option<f64>,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        bandwidth: Switch,
        /// Write per-layer CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Randomized engine-vs-oracle equivalence check.
    Validate {
        #[arg(long, default_value_t = 1000)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "arria10")]
        config: String,
        /// Deliberately break the engine to exercise the checker.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Write a random FP model plus input and calibration tensors.
    Synth {
        /// `resnet50`, `toy` or a JSON descriptor.
        network: String,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        input_out: Option<PathBuf>,
        #[arg(long)]
        calibration_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Zero every batch-norm shift so fused biases vanish.
        #[arg(long)]
        zero_bias: bool,
        /// Write an all-zero input tensor.
        #[arg(long)]
        zero_input: bool,
    },
    /// Print a network descriptor as JSON.
    Network {
        #[arg(default_value = "resnet50")]
        name: String,
        /// Channel divisor (1, 2 or 4) for reduced ResNet-50 variants.
        #[arg(long, default_value_t = 1)]
        scale: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    Rounding,
}

/// A run that completed but found engine and oracle disagreeing.
#[derive(Debug)]
struct Diverged;

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("validation failed")
    }
}

impl std::error::Error for Diverged {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Diverged>() => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Quantize { model_in, calibration, model_out, block_size } => {
            quantize(&model_in, &calibration, &model_out, block_size)
        }
        Command::Run { model, input, config, trace, rounding } => run(&model, &input, &config, trace.as_deref(), rounding),
        Command::Perf { network, config, freq_mhz, power, bandwidth, csv } => {
            perf_cmd(&network, &config, &freq_mhz, power, bandwidth == Switch::On, csv.as_deref())
        }
        Command::Validate { layers, seed, config, inject_fault } => validate(layers, seed, &config, inject_fault),
        Command::Synth { network, model_out, input_out, calibration_out, seed, zero_bias, zero_input } => synth(
            &network,
            &model_out,
            input_out.as_deref(),
            calibration_out.as_deref(),
            seed,
            zero_bias,
            zero_input,
        ),
        Command::Network { name, scale, out } => {
            let g = match name.as_str() {
                "resnet50" => build_resnet50(scale)?,
                "toy" => build_toy(),
                other => bail!("unknown network `{other}` (expected resnet50 or toy)"),
            };
            emit(out.as_deref(), &g.to_json())
        }
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            out!("{text}");
            Ok(())
        }
    }
}

fn load_config(spec: &str) -> Result<TileConfig> {
    let cfg = match TileConfig::preset(spec) {
        Ok(c) => c,
        Err(_) if Path::new(spec).exists() => {
            let text = fs::read_to_string(spec).with_context(|| format!("reading config {spec}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {spec}"))?
        }
        Err(e) => bail!("{e}; no config file named `{spec}` either"),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_network(spec: &str) -> Result<NetworkGraph> {
    match spec {
        "resnet50" => Ok(build_resnet50(1)?),
        "toy" => Ok(build_toy()),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading descriptor {path}"))?;
            NetworkGraph::from_json(&text).with_context(|| format!("parsing descriptor {path}"))
        }
    }
}

fn load_tensor(path: &Path) -> Result<FpTensor> {
    let bytes = model::read_file(path).with_context(|| format!("reading tensor {}", path.display()))?;
    model::decode_tensor(&bytes).with_context(|| format!("decoding tensor {}", path.display()))
}

fn quantize(model_in: &Path, calibration: &Path, model_out: &Path, block_size: usize) -> Result<()> {
    if !calibration.exists() {
        bail!("calibration file {} does not exist", calibration.display());
    }
    let bytes = model::read_file(model_in).with_context(|| format!("reading model {}", model_in.display()))?;
    let fp = model::decode_fp_model(&bytes).with_context(|| format!("decoding model {}", model_in.display()))?;
    let calib = load_tensor(calibration)?;
    let q = quantize_model(&fp, &calib, block_size)?;
    let blob = model::encode_quantized(&q);
    fs::write(model_out, &blob).with_context(|| format!("writing {}", model_out.display()))?;
    let manifest = model::quant_manifest(&blob)?;
    out!(
        "quantized {} ({} layers, block size {block_size}) -> {} ({} bytes)",
        q.graph.name,
        manifest.layers.len(),
        model_out.display(),
        blob.len()
    );
    Ok(())
}

fn run(model_path: &Path, input: &Path, config: &str, trace: Option<&Path>, rounding: RoundingMode) -> Result<()> {
    let bytes = model::read_file(model_path).with_context(|| format!("reading model {}", model_path.display()))?;
    let q = model::decode_quantized(&bytes).with_context(|| format!("decoding model {}", model_path.display()))?;
    let x = load_tensor(input)?;
    let cfg = load_config(config)?;
    let opts = ExecOptions { rounding, ..Default::default() };
    let mut sim = Simulator::new(&q.graph, cfg, opts)?;
    if let Some(p) = trace {
        let f = File::create(p).with_context(|| format!("creating trace {}", p.display()))?;
        sim = sim.with_trace(Box::new(BufWriter::new(f)));
    }
    let out = sim.run(&q, &x)?;
    sim.engine_mut().flush_trace()?;

    let mut s = String::new();
    let scores = out.scores();
    let label = if out.probs.is_some() { "probabilities" } else if out.logits.is_some() { "logits" } else { "scores" };
    let shown = out.probs.as_ref().unwrap_or(&scores);
    let _ = writeln!(s, "network {}: {} outputs", q.graph.name, shown.len());
    if let Some((best, v)) = shown.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))) {
        let _ = writeln!(s, "top class {best} ({v:.6})");
    }
    let _ = writeln!(s, "{label}:");
    for (i, v) in shown.iter().enumerate() {
        let _ = writeln!(s, "  {i:4} {v:.6}");
    }
    let _ = writeln!(s, "exponent chain:");
    for (name, e) in &out.exponents {
        let shift = out.shifts.iter().find(|(n, _)| n == name).map(|(_, r)| format!(" shift {r}")).unwrap_or_default();
        let _ = writeln!(s, "  {name:24} exp {e:4}{shift}");
    }
    let _ = writeln!(s, "accumulator overflow events: {}", out.overflow_events);
    write_stdout(&s);
    Ok(())
}

fn perf_cmd(network: &str, config: &str, freqs: &[f64], power: Option<f64>, bandwidth: bool, csv: Option<&Path>) -> Result<()> {
    let g = load_network(network)?;
    let base = load_config(config)?;
    let configs: Vec<TileConfig> = if freqs.is_empty() {
        vec![base]
    } else {
        freqs
            .iter()
            .map(|&mhz| {
                if !(mhz > 0.0) {
                    bail!("frequency must be positive, got {mhz}");
                }
                Ok(base.clone().with_freq_hz((mhz * 1e6).round() as u64))
            })
            .collect::<Result<_>>()?
    };
    let opts = PerfOptions { bandwidth, power_watts: power };
    let mut rows = String::from(CSV_HEADER);
    rows.push('\n');
    for (i, cfg) in configs.iter().enumerate() {
        let r = perf::network_perf(&g, cfg, &opts);
        if i > 0 {
            out!("");
        }
        out!("network           {} ({} accelerator convolutions)", g.name, r.layers.len());
        write_stdout(&r.summary());
        rows.push_str(&r.csv_rows());
    }
    if let Some(p) = csv {
        fs::write(p, rows).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn validate(layers: usize, seed: u64, config: &str, fault: Option<FaultArg>) -> Result<()> {
    let cfg = load_config(config)?;
    let fault = fault.map(|FaultArg::Rounding| Fault::Rounding);
    let report = validation::validate(&cfg, seed, layers, fault)?;
    if let Some(d) = report.divergences.first() {
        out!("FAIL: {} of {} layers diverged (seed {seed})", report.divergences.len(), report.cases);
        out!("first divergence: {d}");
        return Err(Diverged.into());
    }
    out!("PASS: {} layers bit-exact against the oracle (seed {seed})", report.cases);
    Ok(())
}

fn synth(
    network: &str,
    model_out: &Path,
    input_out: Option<&Path>,
    calibration_out: Option<&Path>,
    seed: u64,
    zero_bias: bool,
    zero_input: bool,
) -> Result<()> {
    let g = load_network(network)?;
    let mut fp = synth_fp_model(&g, seed);
    if zero_bias {
        for l in fp.layers.iter_mut().flatten() {
            l.bn.gamma.iter_mut().for_each(|v| *v = 0.0);
            l.bn.mu.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    fs::write(model_out, model::encode_fp_model(&fp)).with_context(|| format!("writing {}", model_out.display()))?;
    let shape = g.nodes[0].shape;
    if let Some(p) = input_out {
        let t = if zero_input { FpTensor::zeros(shape) } else { synth_tensor(shape, seed.wrapping_add(1)) };
        fs::write(p, model::encode_tensor(&t)).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = calibration_out {
        fs::write(p, model::encode_tensor(&synth_tensor(shape, seed.wrapping_add(2))))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    out!("synthesized {} (seed {seed}) -> {}", g.name, model_out.display());
    Ok(())
}
