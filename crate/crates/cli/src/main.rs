use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use multires_core::audio::{read_wav, synth_signal, SignalKind};
use multires_core::cost::{compare_systems, count_params, encoder_cost, system_cost, EncoderArch, FaithfulArch, FusedSystem, FusionKind};
use multires_core::encoder::EncoderConfig;
use multires_core::harness::config::{FusionChoice, RunConfig, Task};
use multires_core::harness::{train_toy_with, ConfigError, HarnessError, System};
use multires_core::resolution::{nominal_resolution, stack_out_len, stack_trace, ConvStackSpec};
use multires_core::UpsampleMode;

#[derive(Parser)]
#[command(name = "multires", version, about = "Multi-resolution speech encoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Aligned human-readable text.
    Text,
    /// One `key=value` record per line.
    Kv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fidelity {
    Toy,
    Faithful,
}

#[derive(Subcommand)]
enum Command {
    /// Frame count of a conv stack for an input length.
    Frames {
        /// Stack such as "(10,5)*1 + (3,2)*4 + (2,2)*2".
        #[arg(long, conflicts_with = "row", required_unless_present = "row")]
        stack: Option<String>,
        /// Reference stack A, B or C.
        #[arg(long)]
        row: Option<char>,
        /// Input length in samples.
        #[arg(long)]
        len: usize,
        #[arg(long, default_value_t = 16000)]
        rate: u32,
        /// Also print the length after every layer.
        #[arg(long)]
        trace: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Parameter census of one encoder.
    Params {
        /// A, B, C, or "large" (faithful only).
        #[arg(long)]
        row: String,
        #[arg(long, value_enum, default_value = "faithful")]
        fidelity: Fidelity,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Parameters, MACs and FLOPs of systems at one input length; the first
    /// system is the baseline.
    Cost {
        /// System: A, B, C, large, or mr-p:A,B,C / mr-p-deconv:... / mr-h:C,B,A.
        #[arg(long = "system", required = true)]
        systems: Vec<String>,
        /// Input length in samples.
        #[arg(long, default_value_t = 16000)]
        len: usize,
        #[arg(long, value_enum, default_value = "faithful")]
        fidelity: Fidelity,
        /// Print the per-component breakdown of every system.
        #[arg(long)]
        breakdown: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Runs the configured system on one input and writes an MRF1 feature dump.
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 16-bit PCM WAV input; defaults to the config's synthetic signal.
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Trains the configured toy task and prints the loss curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Print only every n-th step (the first and last are always shown).
        #[arg(long, default_value_t = 1)]
        every: usize,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Per-encoder layer-weight totals of a parallel fusion, after training
    /// when the config's task trains.
    ReportWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => Self::Config(c.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn usage(field: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("--{field}: {msg}"))
}

fn faithful_or_toy(name: &str, fidelity: Fidelity) -> Result<EncoderArch, Failure> {
    let up = name.trim().to_ascii_uppercase();
    let row = match up.as_str() {
        "A" | "B" | "C" => up.chars().next().expect("one char"),
        "LARGE" if fidelity == Fidelity::Faithful => return Ok(EncoderArch::Faithful(FaithfulArch::large())),
        _ => return Err(usage("row", format!("unknown encoder {name:?} (A, B, C, large)"))),
    };
    Ok(match fidelity {
        Fidelity::Faithful => EncoderArch::Faithful(FaithfulArch::base(row).expect("known row")),
        Fidelity::Toy => EncoderArch::Toy(EncoderConfig::toy_row(row, 0).expect("known row")),
    })
}

fn parse_system(spec: &str, fidelity: Fidelity) -> Result<FusedSystem, Failure> {
    let (fusion, rows) = match spec.split_once(':') {
        None => (FusionKind::None, spec),
        Some(("mr-p", r)) => (FusionKind::Parallel(UpsampleMode::Repeat), r),
        Some(("mr-p-deconv", r)) => (FusionKind::Parallel(UpsampleMode::Deconv), r),
        Some(("mr-h", r)) => (FusionKind::Hierarchical, r),
        Some((kind, _)) => return Err(usage("system", format!("unknown fusion {kind:?} (mr-p, mr-p-deconv, mr-h)"))),
    };
    let encoders = rows.split(',').map(|r| faithful_or_toy(r, fidelity)).collect::<Result<Vec<_>, _>>()?;
    if fusion == FusionKind::None && encoders.len() != 1 {
        return Err(usage("system", format!("{spec:?} lists several encoders without a fusion")));
    }
    Ok(FusedSystem { name: spec.to_string(), encoders, fusion, head_vocab: None })
}

fn frames(stack: Option<String>, row: Option<char>, len: usize, rate: u32, trace: bool, format: Format) -> Result<String, Failure> {
    let spec: ConvStackSpec = match (stack, row) {
        (Some(s), _) => s.parse().map_err(|e| usage("stack", e))?,
        (None, Some(r)) => ConvStackSpec::row(r, 512).ok_or_else(|| usage("row", format!("unknown row {r:?} (A, B, C)")))?,
        (None, None) => return Err(usage("stack", "give --stack or --row")),
    };
    let n = stack_out_len(&spec, len);
    let res = nominal_resolution(&spec, rate);
    let lens = stack_trace(&spec, len);
    Ok(match format {
        Format::Text => {
            let mut out = format!("{n}\n");
            if trace {
                let chain: Vec<String> = std::iter::once(len).chain(lens).map(|v| v.to_string()).collect();
                writeln!(out, "{}", chain.join(" -> ")).ok();
                writeln!(out, "resolution {} samples ({} ms)", res.stride_product, res.nominal_ms()).ok();
            }
            out
        }
        Format::Kv => {
            let mut out = format!("frames={n}\nresolution_samples={}\nresolution_ms={}\n", res.stride_product, res.nominal_ms());
            if trace {
                for (i, l) in lens.iter().enumerate() {
                    writeln!(out, "frames.layer{i}={l}").ok();
                }
            }
            out
        }
    })
}

fn params(row: &str, fidelity: Fidelity, format: Format) -> Result<String, Failure> {
    let arch = faithful_or_toy(row, fidelity)?;
    let report = encoder_cost(&arch, 0).map_err(runtime)?;
    let total = count_params(&arch).map_err(runtime)?;
    Ok(match format {
        Format::Text => {
            let mut out = format!("{total} ({:.1} M)\n", total as f64 / 1e6);
            for (c, cost) in report.breakdown() {
                writeln!(out, "  {:<18} {:>12}", c.key(), cost.params).ok();
            }
            out
        }
        Format::Kv => {
            let mut out = format!("params={total}\nparams_m={:.1}\n", total as f64 / 1e6);
            for (c, cost) in report.breakdown() {
                writeln!(out, "params.{}={}", c.key(), cost.params).ok();
            }
            out
        }
    })
}

fn cost(systems: &[String], len: usize, fidelity: Fidelity, breakdown: bool, format: Format) -> Result<String, Failure> {
    if len == 0 {
        return Err(usage("len", "must be positive"));
    }
    let reports = systems
        .iter()
        .map(|s| system_cost(&parse_system(s, fidelity)?, len).map_err(runtime))
        .collect::<Result<Vec<_>, _>>()?;
    let cmp = compare_systems(&reports, 0).map_err(runtime)?;
    let mut out = String::new();
    match format {
        Format::Text => {
            if breakdown {
                for r in &reports {
                    writeln!(out, "{r}\n").ok();
                }
            }
            writeln!(out, "{cmp}").ok();
        }
        Format::Kv => {
            for (i, (row, r)) in cmp.rows.iter().zip(&reports).enumerate() {
                writeln!(out, "system{i}.name={}", row.name).ok();
                writeln!(out, "system{i}.params={}\nsystem{i}.macs={}\nsystem{i}.flops={}", row.params, row.macs, row.flops).ok();
                writeln!(out, "system{i}.params_ratio={}\nsystem{i}.macs_ratio={}", row.params_ratio, row.macs_ratio).ok();
                if breakdown {
                    for (c, v) in r.breakdown() {
                        writeln!(out, "system{i}.params.{}={}\nsystem{i}.macs.{}={}", c.key(), v.params, c.key(), v.macs).ok();
                    }
                }
            }
            writeln!(out, "input_len={len}").ok();
        }
    }
    Ok(out)
}

fn forward(config: PathBuf, out_path: PathBuf, wav: Option<PathBuf>, format: Format) -> Result<String, Failure> {
    let cfg = RunConfig::load(&config)?;
    let sys = System::build(&cfg)?;
    let wav = wav.or_else(|| cfg.input.wav.as_ref().map(PathBuf::from));
    let audio = match wav {
        Some(p) => read_wav(&p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?,
        None => {
            let kind: SignalKind = cfg.input.signal.parse().map_err(|e: String| Failure::Config(format!("config field `input.signal`: {e}")))?;
            synth_signal(kind, cfg.input.duration_s, cfg.encoders[0].config.sample_rate, cfg.seed).map_err(runtime)?
        }
    };
    let dump = sys.dump(&audio)?;
    dump.write(&out_path).map_err(|e| Failure::Runtime(format!("{}: {e}", out_path.display())))?;
    let (t, d) = dump.features.dims2().expect("dump is 2-D");
    Ok(match format {
        Format::Text => format!(
            "wrote {}: {t} frames x {d} dims at {} samples / {} Hz\n",
            out_path.display(),
            dump.resolution_samples,
            dump.sample_rate
        ),
        Format::Kv => format!(
            "path={}\nframes={t}\ndim={d}\nresolution_samples={}\nsample_rate={}\n",
            out_path.display(),
            dump.resolution_samples,
            dump.sample_rate
        ),
    })
}

fn train(config: PathBuf, every: usize, format: Format) -> Result<String, Failure> {
    let cfg = RunConfig::load(&config)?;
    if cfg.task == Task::Dump {
        return Err(Failure::Config("config field `task`: \"dump\" does not train (ctc-toy, regress-toy)".into()));
    }
    let every = every.max(1);
    let last = cfg.train.steps;
    let report = train_toy_with(&cfg, |step, loss| {
        if step % every == 0 || step == last {
            match format {
                Format::Text => println!("step {step:>5}  loss {loss}"),
                Format::Kv => println!("loss.{step}={loss}"),
            }
        }
    })?;
    let mut out = String::new();
    let steps = report.losses.len() - 1;
    let ratio = report.final_loss() / report.initial_loss();
    match format {
        Format::Text => {
            writeln!(out, "steps {steps}  initial {}  final {}  ratio {ratio}", report.initial_loss(), report.final_loss()).ok();
            if let Some(em) = report.exact_match {
                writeln!(out, "exact match {em}").ok();
            }
            if let Some(w) = &report.weight_report {
                writeln!(out, "{w}").ok();
            }
        }
        Format::Kv => {
            writeln!(out, "steps={steps}\ninitial_loss={}\nfinal_loss={}\nloss_ratio={ratio}", report.initial_loss(), report.final_loss()).ok();
            if let Some(em) = report.exact_match {
                writeln!(out, "exact_match={em}").ok();
            }
            if let Some(w) = &report.weight_report {
                out.push_str(&w.to_records());
            }
        }
    }
    Ok(out)
}

fn report_weights(config: PathBuf, format: Format) -> Result<String, Failure> {
    let cfg = RunConfig::load(&config)?;
    if cfg.fusion != FusionChoice::MrP {
        return Err(Failure::Config("config field `fusion`: weight reports need \"mr-p\"".into()));
    }
    let report = match cfg.task {
        Task::Dump => System::build(&cfg)?.weight_report(),
        _ => train_toy_with(&cfg, |_, _| {})?.weight_report,
    }
    .expect("parallel fusion has weights");
    Ok(match format {
        Format::Text => format!("{report}\n"),
        Format::Kv => report.to_records(),
    })
}

fn run(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::Frames { stack, row, len, rate, trace, format } => frames(stack, row, len, rate, trace, format),
        Command::Params { row, fidelity, format } => params(&row, fidelity, format),
        Command::Cost { systems, len, fidelity, breakdown, format } => cost(&systems, len, fidelity, breakdown, format),
        Command::Forward { config, out, wav, format } => forward(config, out, wav, format),
        Command::Train { config, every, format } => train(config, every, format),
        Command::ReportWeights { config, format } => report_weights(config, format),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
