//! `nasforge` command-line driver.
//!
//! Every failure prints one line, `error: <kind>: <message>`, and exits
//! with a nonzero status.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nasforge_core::cost::{cost_report, TensorShape};
use nasforge_core::data::{DataConfig, SyntheticVideoTask};
use nasforge_core::driver::{self, derive_from_checkpoint, run_search, run_train, RunConfig, TrainConfig};
use nasforge_core::fair::{FairPattern, PatternMode};
use nasforge_core::space::{self, cardinality, preset_autox3d_s, preset_x3d_s, ArchitectureSpec, SearchSpace};
use nasforge_core::tensor::OptimKind;
use nasforge_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "nasforge", version, about = "Fine-grained video architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// FLOPs and parameter breakdown of an architecture.
    Flops(FlopsArgs),
    /// Inspect or export a search space.
    Space {
        #[command(subcommand)]
        action: SpaceAction,
    },
    /// Print a channel-sharing pattern.
    Pattern(PatternArgs),
    /// Run a supernet search on synthetic clips.
    Search(SearchArgs),
    /// Print the most probable architecture stored in a search checkpoint.
    Derive(DeriveArgs),
    /// Train an architecture from scratch on synthetic clips.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// Architecture JSON file, or a preset name (x3d_s, autox3d_s).
    #[arg(long)]
    arch: String,
    /// Space id or JSON file; defaults to the architecture's own space.
    #[arg(long)]
    space: Option<String>,
    /// Input clip as CxTxS or CxTxHxW.
    #[arg(long, default_value = "3x13x160")]
    input: String,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum SpaceAction {
    /// Number of architectures in the space.
    Cardinality {
        #[arg(long, default_value = space::FULL_SPACE_ID)]
        space: String,
        /// Print the count as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Check a space file, and optionally an architecture against it.
    Validate {
        #[arg(long, default_value = space::FULL_SPACE_ID)]
        space: String,
        #[arg(long)]
        arch: Option<String>,
    },
    /// Print the space as versioned JSON.
    Export {
        #[arg(long, default_value = space::FULL_SPACE_ID)]
        space: String,
    },
    /// Print a preset architecture as versioned JSON.
    Preset { name: String },
}

#[derive(Args, Debug)]
struct PatternArgs {
    /// Number of candidate widths.
    #[arg(long)]
    n: usize,
    /// Prefix sharing instead of the balanced pattern.
    #[arg(long)]
    naive: bool,
    /// Print the matrix as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// Full run configuration as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Space id or JSON file.
    #[arg(long, default_value = space::TOY_CHANNEL_SPACE_ID)]
    space: String,
    /// Channel sharing: fair or naive.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<PatternMode>,
    /// Run seed; NASFORGE_SEED takes precedence.
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs that train shared weights with the distribution frozen.
    #[arg(long)]
    warmup: Option<usize>,
    /// Total epochs, warm-up included.
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer steps per epoch.
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Target FLOPs; defaults to the median of sampled architectures.
    #[arg(long)]
    target: Option<u64>,
    /// Weight of the FLOPs hinge.
    #[arg(long)]
    lambda: Option<f64>,
    /// Output directory for the log, checkpoints and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DeriveArgs {
    /// Supernet checkpoint (`.bin` or `.json`) written by `search`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Architecture JSON file or preset name.
    #[arg(long)]
    arch: String,
    /// Space id or JSON file; defaults to the architecture's own space.
    #[arg(long)]
    space: Option<String>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic clips to generate, validation split included.
    #[arg(long, default_value_t = 256)]
    clips: usize,
    /// Standard deviation of the pixel noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// SGD learning rate.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Directory for the trained checkpoint and report.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<PatternMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// `println!` that reports write failures instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed pipe (e.g. `| head`) is not a failure of the command.
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Flops(a) => flops(a),
        Command::Space { action } => space_cmd(action),
        Command::Pattern(a) => pattern(a),
        Command::Search(a) => search(a),
        Command::Derive(a) => {
            out!("{}", derive_from_checkpoint(&a.checkpoint)?.to_json()?);
            Ok(())
        }
        Command::Train(a) => train(a),
    }
}

/// A built-in space id or a path to a space JSON file.
fn load_space(arg: &str) -> Result<SearchSpace> {
    if let Some(s) = SearchSpace::builtin(arg) {
        return Ok(s);
    }
    let path = Path::new(arg);
    if path.exists() {
        return SearchSpace::from_json(&fs::read_to_string(path)?);
    }
    Err(Error::InvalidValue(format!("`{arg}` is neither a built-in space nor a file")))
}

/// A preset name or a path to an architecture JSON file.
fn load_arch(arg: &str) -> Result<ArchitectureSpec> {
    match arg {
        "x3d_s" => Ok(preset_x3d_s()),
        "autox3d_s" => Ok(preset_autox3d_s()),
        _ => ArchitectureSpec::from_json(&fs::read_to_string(arg)?),
    }
}

fn space_for(arch: &ArchitectureSpec, arg: Option<&str>) -> Result<SearchSpace> {
    match arg {
        Some(s) => load_space(s),
        None => SearchSpace::builtin(&arch.space_id).ok_or_else(|| {
            Error::InvalidValue(format!("unknown space `{}`; pass --space", arch.space_id))
        }),
    }
}

fn flops(a: FlopsArgs) -> Result<()> {
    let arch = load_arch(&a.arch)?;
    let space = space_for(&arch, a.space.as_deref())?;
    let input = TensorShape::parse(&a.input)?;
    let report = cost_report(&space, &arch, input)?;
    if a.json {
        out!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    out!("{:<12} {:>16} {:>12}  output", "layer", "flops", "params");
    for l in &report.per_block {
        let s = l.out_shape;
        out!(
            "{:<12} {:>16} {:>12}  {}x{}x{}x{}",
            l.label, l.flops, l.params, s.channels, s.frames, s.height, s.width
        );
    }
    out!("{:<12} {:>16} {:>12}", "total", report.total_flops, report.total_params);
    out!(
        "{:.3} GFLOPs, {:.3} M params",
        report.total_flops as f64 / 1e9,
        report.total_params as f64 / 1e6
    );
    Ok(())
}

fn space_cmd(action: SpaceAction) -> Result<()> {
    match action {
        SpaceAction::Cardinality { space, json } => {
            let s = load_space(&space)?;
            let c = cardinality(&s);
            if json {
                let v = serde_json::json!({ "space": s.id, "count": c.count.to_string(), "log10": c.log10 });
                out!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                out!("{} architectures (log10 = {:.2})", c.count, c.log10);
            }
        }
        SpaceAction::Validate { space, arch } => {
            let s = load_space(&space)?;
            s.validate()?;
            match arch {
                Some(a) => {
                    space::validate_spec(&s, &load_arch(&a)?)?;
                    out!("ok: architecture belongs to space `{}`", s.id);
                }
                None => out!("ok: space `{}` with {} groups", s.id, s.groups.len()),
            }
        }
        SpaceAction::Export { space } => out!("{}", load_space(&space)?.to_json()?),
        SpaceAction::Preset { name } => out!("{}", load_arch(&name)?.to_json()?),
    }
    Ok(())
}

fn pattern(a: PatternArgs) -> Result<()> {
    let mode = if a.naive { PatternMode::Naive } else { PatternMode::Fair };
    let p = FairPattern::new(mode, a.n)?;
    if a.json {
        out!("{}", serde_json::to_string_pretty(&p)?);
    } else {
        out!("{p}");
    }
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => serde_json::from_str::<RunConfig>(&fs::read_to_string(path)?)?,
        None => RunConfig::toy(load_space(&a.space)?),
    };
    if let Some(m) = a.mode {
        cfg.pattern_mode = m;
    }
    if let Some(s) = a.seed {
        cfg.search.seed = s;
    }
    cfg.search.seed = driver::seed_from_env(cfg.search.seed)?;
    if let Some(w) = a.warmup {
        cfg.search.warmup_epochs = w;
    }
    if let Some(e) = a.epochs {
        cfg.search.total_epochs = e;
    }
    if let Some(s) = a.steps_per_epoch {
        cfg.search.steps_per_epoch = s;
    }
    if a.target.is_some() {
        cfg.search.target_flops = a.target;
    }
    if let Some(l) = a.lambda {
        cfg.search.cost_weight = l;
    }
    cfg.out_dir = Some(a.out.clone());
    let out = run_search(&cfg)?;
    let rel = (out.derived_flops as f64 - out.target_flops as f64) / out.target_flops as f64;
    out!("{}", out.arch.to_json()?);
    eprintln!(
        "{} search, seed {}: derived {} FLOPs vs target {} ({:+.1}%), {:.1}s, artifacts in {}",
        cfg.pattern_mode,
        out.seed,
        out.derived_flops,
        out.target_flops,
        100.0 * rel,
        out.elapsed_secs,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let arch = load_arch(&a.arch)?;
    let space = space_for(&arch, a.space.as_deref())?;
    let seed = driver::seed_from_env(a.seed)?;
    let data = DataConfig {
        num_clips: a.clips,
        frames: space.input.t,
        spatial: space.input.s,
        classes: space.head.classes,
        noise: a.noise,
        ..DataConfig::default()
    };
    let task = SyntheticVideoTask::generate(data, seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        optimizer: OptimKind::sgd(a.lr, 0.9, 1e-4),
        seed,
        ..TrainConfig::default()
    };
    let (net, report) = run_train(&space, &arch, &task, &cfg)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        let mut ck = net.to_checkpoint();
        ck.metadata.insert("arch".into(), serde_json::to_value(&arch)?);
        ck.metadata.insert("report".into(), serde_json::to_value(&report)?);
        ck.save(&dir.join("trained"))?;
        fs::write(dir.join("report.json"), &text)?;
    }
    out!("{text}");
    Ok(())
}
