mod report;

use anyhow::{anyhow, Context, Result};
use bitline::bcarray::{ArrayConfig, ArrayError};
use bitline::mapper::{self, MapError};
use bitline::netmodel::{self, synth, ModelError, Network, Tensor};
use bitline::pipeline::{self, RunReport, SimError};
use bitline::quantopt::{
    self, AgreementEvaluator, ConstantEvaluator, Evaluator, FreezePolicy, MinBitsEvaluator,
    Optimizer, QuantError, QuantState,
};
use clap::{Parser, Subcommand, ValueEnum};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_PLAN: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(
    name = "bitline",
    version,
    about = "Bit-line computing SRAM accelerator simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded synthetic network (and optionally an input tensor).
    Synth {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Fraction of CONV weights forced to zero.
        #[arg(long, default_value_t = 0.5)]
        zero_frac: f64,
        /// Also write a random input tensor in text form.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the quantization flow and write the optimized model.
    Quantize {
        model: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// agreement:N (N seeded calibration inputs), min-bits:K, or constant:V.
        #[arg(long, default_value = "agreement:32")]
        evaluator: String,
        /// Largest accepted accuracy loss relative to the baseline.
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = Freeze::PerSweep)]
        freeze: Freeze,
        /// Write the optimizer trace, one attempt per line.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Simulate one inference on the array and report cycles and energy.
    Simulate {
        model: PathBuf,
        /// Input tensor in text form; a seeded random input when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        array: ArrayArgs,
        #[arg(long)]
        no_verify: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the report as JSON (readable by `report`).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Write the network output tensor in text form.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Render a JSON report, or compare two.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Second report; prints speed-up and energy ratio against the first.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Print the tiling plan of every MAC layer.
    Plan {
        model: PathBuf,
        #[command(flatten)]
        array: ArrayArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Freeze {
    PerSweep,
    Permanent,
}

#[derive(clap::Args)]
struct ArrayArgs {
    #[arg(long)]
    subarrays: Option<usize>,
    #[arg(long)]
    nes: Option<u32>,
    /// Array configuration in TOML or JSON (by extension).
    #[arg(long, env = "BITLINE_ENERGY_CONFIG")]
    energy_config: Option<PathBuf>,
}

/// Error wrapper carrying the process exit code.
#[derive(Debug)]
struct Coded(u8, anyhow::Error);

impl std::fmt::Display for Coded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.1)
    }
}

impl std::error::Error for Coded {}

fn usage(e: anyhow::Error) -> anyhow::Error {
    Coded(EXIT_USAGE, e).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<Coded>() {
            return c.0;
        }
        if let Some(s) = cause.downcast_ref::<SimError>() {
            return match s {
                SimError::Plan { .. } => EXIT_PLAN,
                SimError::Mismatch { .. } => EXIT_VERIFY,
                SimError::Array(_) => EXIT_USAGE,
                SimError::Model(_) => EXIT_MODEL,
            };
        }
        if cause.is::<MapError>() {
            return EXIT_PLAN;
        }
        if cause.is::<ArrayError>() {
            return EXIT_USAGE;
        }
        if cause.is::<ModelError>() || cause.is::<QuantError>() {
            return EXIT_MODEL;
        }
    }
    1
}

fn load_config(args: &ArrayArgs) -> Result<ArrayConfig> {
    let mut cfg = match &args.energy_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let parsed = if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(anyhow::Error::from)
            } else {
                toml::from_str(&text).map_err(anyhow::Error::from)
            };
            parsed
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(usage)?
        }
        None => ArrayConfig::default(),
    };
    if let Some(s) = args.subarrays {
        cfg.subarrays = s;
    }
    if let Some(n) = args.nes {
        cfg.subarray.nes = n;
    }
    cfg.validate().map_err(|e| usage(e.into()))?;
    Ok(cfg)
}

fn load_model(p: &Path) -> Result<Network> {
    netmodel::load_model(p).with_context(|| format!("loading model {}", p.display()))
}

fn load_input(net: &Network, path: Option<&Path>, seed: u64) -> Result<Tensor> {
    let t = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Tensor::from_text(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => synth::input(&mut synth::rng(seed), net.input_shape),
    };
    if t.shape != net.input_shape {
        return Err(ModelError::Shape(format!(
            "input is {:?}, model expects {:?}",
            t.shape, net.input_shape
        ))
        .into());
    }
    Ok(t)
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn evaluator(spec: &str, net: &Network, seed: u64) -> Result<Box<dyn Evaluator>> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let bad = || {
        usage(anyhow!(
            "bad evaluator '{spec}' (expected agreement:N, min-bits:K, or constant:V)"
        ))
    };
    Ok(match kind {
        "agreement" => {
            let n: usize = arg.parse().map_err(|_| bad())?;
            let mut r = synth::rng(seed);
            let inputs = (0..n)
                .map(|_| synth::input(&mut r, net.input_shape))
                .collect();
            Box::new(AgreementEvaluator::new(net, inputs)?)
        }
        "min-bits" => Box::new(MinBitsEvaluator {
            min_bits: arg.parse().map_err(|_| bad())?,
            reject_two_x8: false,
        }),
        "constant" => Box::new(ConstantEvaluator(arg.parse().map_err(|_| bad())?)),
        _ => return Err(bad()),
    })
}

struct Boxed(Box<dyn Evaluator>);

impl Evaluator for Boxed {
    fn evaluate(&mut self, net: &Network, st: &QuantState) -> Result<f64, QuantError> {
        self.0.evaluate(net, st)
    }

    fn refine(&mut self, net: &Network, st: &QuantState) -> Result<(), QuantError> {
        self.0.refine(net, st)
    }
}

fn print_report(r: &RunReport, format: Format) -> Result<String> {
    Ok(match format {
        Format::Text => report::to_text(r),
        Format::Csv => report::to_csv(r)?,
        Format::Json => serde_json::to_string_pretty(r)? + "\n",
    })
}

fn read_report(p: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("malformed report {}", p.display()))
        .map_err(|e| Coded(EXIT_MODEL, e).into())
}

fn run(cli: Cli) -> Result<String> {
    match cli.cmd {
        Cmd::Synth {
            out,
            seed,
            zero_frac,
            input,
        } => {
            if !(0.0..=1.0).contains(&zero_frac) {
                return Err(usage(anyhow!("--zero-frac must be in [0, 1]")));
            }
            let net = synth::toy_network(seed, zero_frac);
            netmodel::save_model(&net, &out)?;
            if let Some(p) = input {
                write_file(
                    &p,
                    &synth::input(&mut synth::rng(seed), net.input_shape).to_text(),
                )?;
            }
            Ok(format!(
                "wrote {} ({} layers)\n",
                out.display(),
                net.layers.len()
            ))
        }
        Cmd::Quantize {
            model,
            out,
            evaluator: spec,
            threshold,
            freeze,
            trace,
            seed,
        } => {
            if !(threshold.is_finite() && threshold >= 0.0) {
                return Err(usage(anyhow!("--threshold must be a non-negative number")));
            }
            let base = load_model(&model)?;
            let eval = Boxed(evaluator(&spec, &base, seed)?);
            let mut opt = Optimizer::new(&base, eval, threshold)?;
            opt.policy = match freeze {
                Freeze::PerSweep => FreezePolicy::PerSweep,
                Freeze::Permanent => FreezePolicy::Permanent,
            };
            let state = opt.run()?;
            let mut net = quantopt::apply_state(&base, &state)?;
            net.quant = Some(state.clone());
            netmodel::save_model(&net, &out)?;
            let lines: String = opt.trace.iter().map(|t| format!("{t}\n")).collect();
            if let Some(p) = trace {
                write_file(&p, &lines)?;
            }
            let bits: Vec<String> = state
                .layers
                .iter()
                .map(|q| format!("{}:{}b/{}", q.layer, q.bo_bits, q.imo_mode))
                .collect();
            Ok(format!(
                "baseline {:.6}, {} attempts, layers {}\nwrote {}\n",
                opt.baseline,
                opt.trace.len() - 1,
                bits.join(" "),
                out.display()
            ))
        }
        Cmd::Simulate {
            model,
            input,
            array,
            no_verify,
            seed,
            out,
            output,
            format,
        } => {
            let cfg = load_config(&array)?;
            let net = load_model(&model)?;
            let x = load_input(&net, input.as_deref(), seed)?;
            let sim = pipeline::simulate(&net, &x, &cfg, !no_verify)?;
            if let Some(p) = out {
                write_file(&p, &(serde_json::to_string_pretty(&sim.report)? + "\n"))?;
            }
            if let Some(p) = output {
                write_file(&p, &sim.output.to_text())?;
            }
            print_report(&sim.report, format)
        }
        Cmd::Report {
            report: path,
            format,
            compare,
        } => {
            let r = read_report(&path)?;
            match compare {
                None => print_report(&r, format),
                Some(other) => {
                    let rows = report::compare(&r, &read_report(&other)?)
                        .map_err(|e| Coded(EXIT_MODEL, e))?;
                    match format {
                        Format::Text => Ok(report::compare_text(&rows)),
                        Format::Csv => report::compare_csv(&rows),
                        Format::Json => Ok(serde_json::to_string_pretty(&rows)? + "\n"),
                    }
                }
            }
        }
        Cmd::Plan { model, array } => {
            let cfg = load_config(&array)?;
            let net = load_model(&model)?;
            let mut s = format!(
                "{:>5} {:<5} {:>6} {:>6} {:>6} {:>9} {:>8} {:>6}\n",
                "layer", "kind", "tiles", "rounds", "passes", "words_in", "halo", "merges"
            );
            for (i, layer) in net.mac_layers() {
                let p = mapper::plan_layer(layer, &cfg).map_err(|source| SimError::Plan {
                    layer: i,
                    kind: layer.kind_name(),
                    source,
                })?;
                s += &format!(
                    "{:>5} {:<5} {:>6} {:>6} {:>6} {:>9} {:>8} {:>6}\n",
                    i,
                    layer.kind_name(),
                    p.tiles.len(),
                    p.rounds,
                    p.passes(),
                    p.transfer_in_words(),
                    p.halo_cells(),
                    p.partial_merges()
                );
            }
            Ok(s)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(text) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let plan: anyhow::Error = SimError::Plan {
            layer: 0,
            kind: "conv",
            source: MapError::PlanMismatch,
        }
        .into();
        assert_eq!(exit_code(&plan), EXIT_PLAN);
        let mismatch: anyhow::Error = SimError::Mismatch {
            layer: 2,
            index: 0,
            got: 0.5,
            expected: 0.25,
        }
        .into();
        assert_eq!(exit_code(&mismatch), EXIT_VERIFY);
        let model: anyhow::Error = ModelError::Malformed("x".into()).into();
        assert_eq!(exit_code(&model.context("loading")), EXIT_MODEL);
        assert_eq!(exit_code(&usage(anyhow!("bad flag"))), EXIT_USAGE);
        let other = anyhow::Error::from(std::io::Error::other("disk"));
        assert_eq!(exit_code(&other), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_evaluator_is_a_usage_error() {
        let net = synth::toy_network(1, 0.5);
        for spec in ["oracle:3", "agreement:x", "constant"] {
            let e = evaluator(spec, &net, 1).err().unwrap();
            assert_eq!(exit_code(&e), EXIT_USAGE, "{spec}");
        }
    }
}
