//! Argument parsing and dispatch. Exit codes: 0 ok, 2 config error,
//! 3 pipeline error, 4 transport error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use region_dit_core::prompts::{LlmClientConfig, Transport};
use region_dit_core::regions::Axis;

use crate::commands::{cmd_ablate_depth, cmd_generate, cmd_masks, cmd_prompts};
use crate::config::{LayoutKind, PromptSource, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "region-dit", version, about = "Region-controlled DiT sampling, ablations and prompts")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Use the offline prompt template even if the config selects the LLM.
    #[arg(long, global = true)]
    pub offline: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run prompts, text states and the sampler; write trajectory and report.json.
    Generate,
    /// Sweep the number of injected blocks and record regional influence.
    AblateDepth,
    /// Write one PGM per region mask plus masks.json.
    Masks(MaskArgs),
    /// Print a progressive prompt as JSON.
    Prompts(PromptArgs),
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Number of stripes.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_parser = parse_axis)]
    pub axis: Option<Axis>,
    /// Grid layout rows (implies the grid layout).
    #[arg(long, requires = "cols")]
    pub rows: Option<usize>,
    #[arg(long, requires = "rows")]
    pub cols: Option<usize>,
    /// Latent height.
    #[arg(long)]
    pub height: Option<usize>,
    /// Latent width.
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// User intent; defaults to `prompts.intent`.
    #[arg(long)]
    pub intent: Option<String>,
    /// Number of regions; defaults to the configured layout's count.
    #[arg(short = 'n', long = "regions")]
    pub n: Option<usize>,
    /// Query the LLM endpoint.
    #[arg(long, conflicts_with = "offline")]
    pub llm: bool,
    /// Chat-completions URL; overrides `prompts.llm.endpoint`.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name; overrides `prompts.llm.model`.
    #[arg(long)]
    pub model: Option<String>,
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    match s {
        "height" => Ok(Axis::Height),
        "width" => Ok(Axis::Width),
        _ => Err(format!("expected `height` or `width`, got {s:?}")),
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn llm_config(cfg: &RunConfig, a: &PromptArgs) -> Result<LlmClientConfig, CliError> {
    let mut llm = match (&cfg.prompts.llm, &a.endpoint, &a.model) {
        (Some(c), _, _) => c.clone(),
        (None, Some(e), Some(m)) => LlmClientConfig::new(e.clone(), m.clone()),
        (None, _, _) => {
            return Err(CliError::field(
                "prompts.llm",
                "LLM mode needs [prompts.llm] in the config or --endpoint and --model",
            ))
        }
    };
    if let Some(e) = &a.endpoint {
        llm.endpoint = e.clone();
    }
    if let Some(m) = &a.model {
        llm.model = m.clone();
    }
    llm.validate().map_err(|e| CliError::field("prompts.llm", e))?;
    Ok(llm)
}

/// Execute one invocation; returns what goes to stdout.
pub fn run(cli: &Cli, transport: &dyn Transport) -> Result<String, CliError> {
    let mut cfg = load_config(&cli.global)?;
    let offline = cli.global.offline;
    let pretty = |v: &serde_json::Value| serde_json::to_string_pretty(v).expect("JSON value");
    match &cli.command {
        Command::Generate => {
            let report = cmd_generate(&cfg, offline, transport)?;
            Ok(format!(
                "wrote {} ({} steps)",
                cfg.out_dir.join("report.json").display(),
                report["steps_run"]
            ))
        }
        Command::AblateDepth => {
            cmd_ablate_depth(&cfg, offline, transport)?;
            Ok(format!("wrote {}", cfg.out_dir.join("ablation_summary.json").display()))
        }
        Command::Masks(a) => {
            if let Some(c) = a.count {
                cfg.regions.layout = LayoutKind::Stripes;
                cfg.regions.count = c;
            }
            if let Some(axis) = a.axis {
                cfg.regions.axis = axis;
            }
            if let (Some(r), Some(c)) = (a.rows, a.cols) {
                cfg.regions.layout = LayoutKind::Grid;
                cfg.regions.rows = r;
                cfg.regions.cols = c;
            }
            if let Some(h) = a.height {
                cfg.latent.height = h;
            }
            if let Some(w) = a.width {
                cfg.latent.width = w;
            }
            Ok(pretty(&cmd_masks(&cfg)?))
        }
        Command::Prompts(a) => {
            let intent = a.intent.clone().unwrap_or_else(|| cfg.prompts.intent.clone());
            let n = a.n.unwrap_or_else(|| cfg.regions.count());
            let use_llm = !offline && (a.llm || cfg.prompts.source == PromptSource::Llm);
            let llm = if use_llm { Some(llm_config(&cfg, a)?) } else { None };
            let p = cmd_prompts(&intent, n, llm.as_ref(), transport)?;
            Ok(serde_json::to_string_pretty(&p).expect("prompt serializes"))
        }
    }
}
