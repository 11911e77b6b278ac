mod commands;
mod manifest;
mod prompts;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use hybridlm::config::{parse_config, ModelConfig, Profile};

use crate::manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "hybridlm", version, about = "Toy hybrid-attention MoE model: decoding, caching, routing replay and distillation checks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// `key = value` config file; unset keys come from the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Tiny)]
    profile: ProfileArg,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs and the run manifest.
    #[arg(long, global = true, default_value = "hybridlm-out")]
    out_dir: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ProfileArg {
    Tiny,
    Small,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Tiny => Profile::Tiny,
            ProfileArg::Small => Profile::Small,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Greedy vs speculative decode on the bundled prompts.
    Demo(commands::DemoArgs),
    /// Speculative decode statistics per prompt set, as CSV.
    BenchDecode(commands::BenchArgs),
    /// KV-cache footprint of the layout versus an all-global baseline.
    CacheReport(commands::CacheArgs),
    /// Record decode-time routing and replay it in a full forward.
    ReplayCheck(commands::ReplayArgs),
    /// Toy distillation run on tabular policies.
    MopdTrain(commands::MopdArgs),
    /// Run the oracle property suites.
    VerifySuite(commands::VerifyArgs),
    /// Fit accept_length = c·(1 − a·entropy^b) to CSV points.
    FitCurve(commands::FitArgs),
    /// Write a freshly initialized model as a checkpoint.
    Dump(commands::DumpArgs),
    /// Read a checkpoint and print a summary.
    Load(commands::LoadArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Demo(_) => "demo",
            Command::BenchDecode(_) => "bench-decode",
            Command::CacheReport(_) => "cache-report",
            Command::ReplayCheck(_) => "replay-check",
            Command::MopdTrain(_) => "mopd-train",
            Command::VerifySuite(_) => "verify-suite",
            Command::FitCurve(_) => "fit-curve",
            Command::Dump(_) => "dump",
            Command::Load(_) => "load",
        }
    }
}

/// Per-run state handed to every command.
pub struct Ctx {
    pub config: ModelConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub outputs: Vec<PathBuf>,
}

impl Ctx {
    pub fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.clone());
        Ok(path)
    }
}

/// Command result. Errors (bad input, IO) are reported through `anyhow`.
pub enum Status {
    Pass,
    Fail(Vec<String>),
}

const EXIT_FAIL: u8 = 1;
const EXIT_INPUT: u8 = 2;

fn resolve(g: &GlobalArgs) -> anyhow::Result<ModelConfig> {
    let profile = Profile::from(g.profile);
    let mut config = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            parse_config(&text, profile).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ModelConfig::from_profile(profile),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut manifest = RunManifest::begin(cli.command.name(), args, &Profile::from(g.profile).to_string(), g.config.as_deref());

    if let Err(e) = std::fs::create_dir_all(&g.out_dir) {
        eprintln!("error: creating {}: {e}", g.out_dir.display());
        return ExitCode::from(EXIT_INPUT);
    }

    let mut ctx = None;
    let result = resolve(g).and_then(|config| {
        let c = ctx.insert(Ctx {
            seed: config.seed,
            config,
            out_dir: g.out_dir.clone(),
            outputs: Vec::new(),
        });
        commands::run(&cli.command, c)
    });

    let code = match result {
        Ok(Status::Pass) => 0,
        Ok(Status::Fail(reasons)) => {
            for r in &reasons {
                eprintln!("FAILED: {r}");
            }
            EXIT_FAIL
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_INPUT
        }
    };

    let outputs = match &ctx {
        Some(c) => {
            manifest.config = Some(c.config.to_text());
            manifest.seed = Some(c.seed);
            c.outputs.clone()
        }
        None => Vec::new(),
    };
    manifest.finish(&outputs, code);
    if let Err(e) = manifest.write(&g.out_dir) {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_INPUT);
    }
    ExitCode::from(code)
}
