//! The `storyboard` command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors (bad flags,
//! unreadable or invalid config/plan), 2 for runtime failures (transport,
//! numerics, I/O while writing results).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::harness::{compare, run_storyboard, Ablation, HarnessError, RunConfig};
use crate::masks::{
    build_cross_mask, build_intra_mask, describe_frame, plan_masks, AttentionMask, DropoutParams,
    MaskError, TokenGrid,
};
use crate::plan::{
    mock_plan, parse_plan, plan_storyboard, serialize_plan, HttpChatClient, PlanError,
    PlannerConfig, StoryPrompt, API_KEY_ENV,
};

#[derive(Debug, Parser)]
#[command(
    name = "storyboard",
    version,
    about = "Multi-subject storyboard consistency simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plan a storyboard with the mock planner or a chat-completion endpoint.
    Plan(PlanArgs),
    /// Run the toy pipeline from a JSON config.
    Run(RunArgs),
    /// Rasterise a plan and write its attention masks.
    InspectMask(InspectArgs),
    /// Paired A/B comparison of one mechanism over several seeds.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Story prompt text.
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Subjects in the mock plan.
    #[arg(long, default_value_t = 2)]
    subjects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ask a live chat-completion endpoint instead of the mock.
    #[arg(long)]
    live: bool,
    #[arg(long, requires = "live")]
    endpoint: Option<String>,
    #[arg(long, requires = "live")]
    model: Option<String>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Write every layer's attention mask as a PGM image.
    #[arg(long)]
    dump_masks: bool,
    /// Overrides the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 0.9)]
    beta_d: f64,
    /// Apply the dropout bias term.
    #[arg(long)]
    dropout: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    timestep: u32,
    #[arg(long, default_value_t = 0)]
    layer: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    Bounding,
    Merging,
    NegativeWindow,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Bounding => Ablation::Bounding,
            AblationArg::Merging => Ablation::Merging,
            AblationArg::NegativeWindow => Ablation::NegativeWindow,
        }
    }
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    ablate: AblationArg,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Also write the comparison as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if let HarnessError::Plan(p) = e {
            return p.into();
        }
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Transport { .. } | PlanError::Unparseable { .. } => {
                Failure::Runtime(e.to_string())
            }
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<MaskError> for Failure {
    fn from(e: MaskError) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))
}

fn cmd_plan(args: PlanArgs) -> Result<(), Failure> {
    let prompt = StoryPrompt::new(args.prompt, args.frames)?;
    let plan = if args.live {
        let mut config = PlannerConfig::default();
        if let Some(endpoint) = args.endpoint {
            config.endpoint = endpoint;
        }
        if let Some(model) = args.model {
            config.model_name = model;
        }
        if std::env::var_os(API_KEY_ENV).is_none() {
            eprintln!("note: {API_KEY_ENV} is not set; sending requests without a key");
        }
        let client = HttpChatClient::from_env(config.endpoint.clone());
        let outcome = plan_storyboard(&prompt, &config, &client)?;
        eprintln!("planned in {} attempt(s)", outcome.attempts);
        outcome.plan
    } else {
        mock_plan(&prompt, args.subjects, args.seed)?
    };
    let text = serialize_plan(&plan);
    match args.out {
        Some(path) => write_output(&path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut config = RunConfig::load(&args.config)?;
    if args.dump_masks {
        config.dump_masks = true;
    }
    if let Some(dir) = args.out_dir {
        config.out_dir = dir;
    }
    let report = run_storyboard(&config)?;
    println!(
        "wrote {}  mean leakage {:.6}  mean consistency {:.6}  mean pose variance {:.6}",
        config.out_dir.join("report.json").display(),
        report.summary.mean_leakage,
        report.summary.mean_consistency,
        report.summary.mean_pose_variance
    );
    Ok(())
}

fn write_mask(dir: &Path, stem: &str, mask: &AttentionMask) -> Result<(), Failure> {
    let mut pgm = Vec::new();
    mask.write_pgm(&mut pgm).expect("writing to a Vec");
    write_output(&dir.join(format!("{stem}.pgm")), &pgm)?;
    write_output(&dir.join(format!("{stem}.csv")), mask.to_csv().as_bytes())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), Failure> {
    let plan = parse_plan(&read_input(&args.plan)?)?;
    let grid = TokenGrid::new(args.height, args.width, plan.frame_count())?;
    let masks = plan_masks(&plan, &grid)?;
    let dropout = if args.dropout {
        DropoutParams::new(args.beta_d, args.seed, true)?.at(args.timestep, args.layer)
    } else {
        DropoutParams::disabled()
    };
    let cross = build_cross_mask(&masks, &grid, &dropout)?;
    write_mask(&args.out, "cross", &cross)?;
    let mut stdout = std::io::stdout().lock();
    for l in 0..grid.frame_count() {
        let own: Vec<_> = masks.iter().filter(|m| m.frame() == l).cloned().collect();
        let intra = build_intra_mask(&own, &grid, &dropout)?;
        write_mask(&args.out, &format!("intra_f{}", l + 1), &intra)?;
        let _ = writeln!(
            stdout,
            "frame {}\n{}",
            l + 1,
            describe_frame(&masks, &grid, l)
        );
    }
    let _ = writeln!(
        stdout,
        "cross mask {n}x{n}, {} allowed pairs",
        cross.allowed_count(),
        n = cross.size()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), Failure> {
    let config = RunConfig::load(&args.config)?;
    let plan = config.resolve_plan()?;
    let result = compare(&config, &plan, args.ablate.into(), args.seeds)?;
    print!("{}", result.to_table());
    if let Some(path) = args.json {
        let mut text = serde_json::to_string_pretty(&result).expect("comparison serialises");
        text.push('\n');
        write_output(&path, text.as_bytes())?;
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Run(a) => cmd_run(a),
        Command::InspectMask(a) => cmd_inspect(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}
