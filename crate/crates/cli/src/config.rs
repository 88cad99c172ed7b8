//! TOML run configuration. Every field except `[prompts]` has a default, and
//! the effective config (defaults filled in) is echoed into every report.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use region_dit_core::attention::AttentionMode;
use region_dit_core::dit::{Placement, StackConfig};
use region_dit_core::prompts::LlmClientConfig;
use region_dit_core::regions::{Axis, LatentGrid, RegionLayout, RegionSpec};
use region_dit_core::sampler::{CfgConfig, ScheduleKind, SchedulerConfig};
use region_dit_core::text::EmbeddingDims;
use region_dit_core::RngSeed;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the sampler's initial noise.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub regions: RegionsSection,
    #[serde(default)]
    pub latent: LatentSection,
    #[serde(default)]
    pub stack: StackSection,
    #[serde(default)]
    pub text: TextSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub cfg: CfgSection,
    #[serde(default)]
    pub prompts: PromptsSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LayoutKind {
    #[default]
    Stripes,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionsSection {
    pub layout: LayoutKind,
    pub axis: Axis,
    /// Number of stripes; ignored for the grid layout.
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Default for RegionsSection {
    fn default() -> Self {
        RegionsSection {
            layout: LayoutKind::Stripes,
            axis: Axis::Height,
            count: 2,
            rows: 1,
            cols: 1,
        }
    }
}

impl RegionsSection {
    pub fn layout(&self) -> RegionLayout {
        match self.layout {
            LayoutKind::Stripes => RegionLayout::Stripes(RegionSpec {
                axis: self.axis,
                count: self.count,
            }),
            LayoutKind::Grid => RegionLayout::Grid {
                rows: self.rows,
                cols: self.cols,
            },
        }
    }

    pub fn count(&self) -> usize {
        self.layout().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSection {
    pub height: usize,
    pub width: usize,
}

impl Default for LatentSection {
    fn default() -> Self {
        LatentSection { height: 32, width: 32 }
    }
}

/// Which blocks get region attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InjectedSpec {
    /// `"all"` or `"none"`.
    Keyword(InjectedKeyword),
    /// Explicit block indices.
    Blocks(BTreeSet<usize>),
    /// `{ placement = "deepest-first", count = 13 }`.
    Placed { placement: Placement, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectedKeyword {
    All,
    None,
}

impl InjectedSpec {
    pub fn resolve(&self, num_blocks: usize) -> Result<BTreeSet<usize>, String> {
        match self {
            InjectedSpec::Keyword(InjectedKeyword::All) => Ok((0..num_blocks).collect()),
            InjectedSpec::Keyword(InjectedKeyword::None) => Ok(BTreeSet::new()),
            InjectedSpec::Blocks(b) => match b.iter().find(|&&i| i >= num_blocks) {
                Some(bad) => Err(format!("block {bad} outside 0..{num_blocks}")),
                None => Ok(b.clone()),
            },
            InjectedSpec::Placed { placement, count } => {
                placement.injected(*count, num_blocks).map_err(|e| e.to_string())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackSection {
    pub num_blocks: usize,
    pub injected: InjectedSpec,
    pub mode: AttentionMode,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub weight_scale: f32,
    pub seed: u64,
}

impl Default for StackSection {
    fn default() -> Self {
        let d = StackConfig::default();
        StackSection {
            num_blocks: d.num_blocks,
            injected: InjectedSpec::Keyword(InjectedKeyword::All),
            mode: d.mode,
            d_model: d.d_model,
            heads: d.heads,
            head_dim: d.head_dim,
            weight_scale: d.weight_scale,
            seed: d.seed.0,
        }
    }
}

impl StackSection {
    pub fn to_stack_config(&self) -> Result<StackConfig, CliError> {
        let injected = self
            .injected
            .resolve(self.num_blocks)
            .map_err(|m| CliError::field("stack.injected", m))?;
        Ok(StackConfig {
            num_blocks: self.num_blocks,
            injected,
            mode: self.mode,
            d_model: self.d_model,
            heads: self.heads,
            head_dim: self.head_dim,
            seed: RngSeed(self.seed),
            weight_scale: self.weight_scale,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSection {
    pub d_long: usize,
    pub d_short: usize,
    /// Seeds the synthetic encoder embeddings.
    pub embedding_seed: u64,
    /// Seeds the projection into model space.
    pub projection_seed: u64,
}

impl Default for TextSection {
    fn default() -> Self {
        let d = EmbeddingDims::default();
        TextSection {
            d_long: d.d_long,
            d_short: d.d_short,
            embedding_seed: 1,
            projection_seed: 2,
        }
    }
}

impl TextSection {
    pub fn dims(&self) -> EmbeddingDims {
        EmbeddingDims {
            d_long: self.d_long,
            d_short: self.d_short,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub steps: usize,
    pub sigma_max: f32,
    pub sigma_min: f32,
    pub kind: ScheduleKind,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let d = SchedulerConfig::default();
        SchedulerSection {
            steps: d.steps,
            sigma_max: d.sigma_max,
            sigma_min: d.sigma_min,
            kind: d.kind,
        }
    }
}

impl SchedulerSection {
    pub fn to_config(self) -> SchedulerConfig {
        SchedulerConfig {
            steps: self.steps,
            sigma_max: self.sigma_max,
            sigma_min: self.sigma_min,
            kind: self.kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfgSection {
    pub scale: f32,
    pub denoise: f32,
}

impl Default for CfgSection {
    fn default() -> Self {
        let d = CfgConfig::default();
        CfgSection {
            scale: d.scale,
            denoise: d.denoise,
        }
    }
}

impl CfgSection {
    pub fn to_config(self) -> CfgConfig {
        CfgConfig {
            scale: self.scale,
            denoise: self.denoise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    #[default]
    Offline,
    Llm,
    /// A progressive prompt JSON document at `prompts.file`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptsSection {
    pub source: PromptSource,
    pub intent: String,
    pub file: Option<PathBuf>,
    pub llm: Option<LlmClientConfig>,
}

impl Default for PromptsSection {
    fn default() -> Self {
        PromptsSection {
            source: PromptSource::Offline,
            intent: "a coastal landscape at dusk".into(),
            file: None,
            llm: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    DeepestFirst,
    ShallowestFirst,
    /// Use `ablation.explicit` sets; `k` is the set size.
    Explicit,
}

impl PolicyName {
    pub fn name(self) -> &'static str {
        match self {
            PolicyName::DeepestFirst => "deepest-first",
            PolicyName::ShallowestFirst => "shallowest-first",
            PolicyName::Explicit => "explicit",
        }
    }

    pub fn placement(self) -> Option<Placement> {
        match self {
            PolicyName::DeepestFirst => Some(Placement::DeepestFirst),
            PolicyName::ShallowestFirst => Some(Placement::ShallowestFirst),
            PolicyName::Explicit => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub counts: Vec<usize>,
    pub policies: Vec<PolicyName>,
    pub explicit: Vec<BTreeSet<usize>>,
    /// Stack, probe and perturbation seeds; one sweep per seed. Empty means
    /// the top-level `seed` only.
    pub seeds: Vec<u64>,
    pub probe_timestep: f32,
    pub workers: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            counts: vec![0, 13, 26, 39],
            policies: vec![PolicyName::DeepestFirst, PolicyName::ShallowestFirst],
            explicit: Vec::new(),
            seeds: Vec::new(),
            probe_timestep: 0.5,
            workers: 2,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        // Report line, key and message only; the source snippet could echo secrets.
        let cfg: RunConfig = toml::from_str(text).map_err(|e| match e.span() {
            Some(span) => {
                let (line, key) = locate_key(text, span.start);
                let key = key.map(|k| format!("{k}: ")).unwrap_or_default();
                CliError::Config(format!("line {line}: {key}{}", e.message()))
            }
            None => CliError::Config(e.message().to_string()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn grid(&self) -> Result<LatentGrid, CliError> {
        LatentGrid::new(self.latent.height, self.latent.width)
            .map_err(|e| CliError::field("latent", e.to_string()))
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        if self.ablation.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ablation.seeds.clone()
        }
    }

    /// Cross-field checks. Region counts that do not fit the grid are left
    /// to the region module so its error surfaces unchanged.
    pub fn validate(&self) -> Result<(), CliError> {
        self.grid()?;
        self.stack
            .to_stack_config()?
            .validate()
            .map_err(|e| CliError::field("stack", e.to_string()))?;
        let text = &self.text;
        if text.d_long == 0 || text.d_short == 0 {
            return Err(CliError::field("text", "d_long and d_short must be ≥ 1"));
        }
        if self.scheduler.steps == 0 {
            return Err(CliError::field("scheduler.steps", "must be ≥ 1"));
        }
        if !(self.scheduler.sigma_max > self.scheduler.sigma_min && self.scheduler.sigma_min > 0.0) {
            return Err(CliError::field("scheduler", "need sigma_max > sigma_min > 0"));
        }
        self.cfg
            .to_config()
            .validate()
            .map_err(|e| CliError::field("cfg", e.to_string()))?;
        match self.prompts.source {
            PromptSource::Offline if self.prompts.intent.trim().is_empty() => {
                return Err(CliError::field("prompts.intent", "must not be empty"))
            }
            PromptSource::Llm => {
                let llm = self
                    .prompts
                    .llm
                    .as_ref()
                    .ok_or_else(|| CliError::field("prompts.llm", "required when source = \"llm\""))?;
                llm.validate().map_err(|e| CliError::field("prompts.llm", e.to_string()))?;
            }
            PromptSource::File if self.prompts.file.is_none() => {
                return Err(CliError::field("prompts.file", "required when source = \"file\""))
            }
            _ => {}
        }
        Ok(())
    }

    /// Checks that only matter to the depth sweep.
    pub fn validate_ablation(&self) -> Result<(), CliError> {
        let ab = &self.ablation;
        if ab.workers == 0 {
            return Err(CliError::field("ablation.workers", "must be ≥ 1"));
        }
        if let Some(k) = ab.counts.iter().find(|&&k| k > self.stack.num_blocks) {
            return Err(CliError::field(
                "ablation.counts",
                format!("{k} exceeds stack.num_blocks = {}", self.stack.num_blocks),
            ));
        }
        if ab.policies.contains(&PolicyName::Explicit) {
            if ab.explicit.is_empty() {
                return Err(CliError::field("ablation.explicit", "required by the explicit policy"));
            }
            for set in &ab.explicit {
                if let Some(b) = set.iter().find(|&&b| b >= self.stack.num_blocks) {
                    return Err(CliError::field("ablation.explicit", format!("block {b} out of range")));
                }
            }
        }
        if !(0.0..=1.0).contains(&ab.probe_timestep) {
            return Err(CliError::field("ablation.probe_timestep", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// 1-based line of `offset` and the dotted key assigned on that line, if any.
fn locate_key(text: &str, offset: usize) -> (usize, Option<String>) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line_no = before.matches('\n').count() + 1;
    let line = text.lines().nth(line_no - 1).unwrap_or("");
    let table = before
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let key = line.split_once('=').map(|(k, _)| k.trim().to_string());
    let dotted = match (table, key) {
        (Some(t), Some(k)) => Some(format!("{t}.{k}")),
        (None, Some(k)) => Some(k),
        (_, None) => None,
    };
    (line_no, dotted)
}
