//! Stages shared by the commands: prompts, text states, masks.

use std::path::Path;

use region_dit_core::dit::Conditioning;
use region_dit_core::image::{encode_pnm, ImageBuffer, PnmEncoding};
use region_dit_core::prompts::{generate_prompts, merge_prompts, offline_template, ProgressivePrompt, Transport};
use region_dit_core::regions::{divide_layout, unflatten_mask, LatentGrid, RegionMask};
use region_dit_core::text::{batch_prompt_states, encode_prompt, synthesize_record, ProjectionMlp, PromptSet};
use region_dit_core::RngSeed;
use serde::Serialize;

use crate::config::{PromptSource, RunConfig};
use crate::error::CliError;
use crate::output::{write_atomic, write_json};

/// Where the prompts of a run came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Offline,
    Llm,
    File,
}

impl PromptMode {
    /// LLM replies are not reproducible, so LLM runs are reported as
    /// non-deterministic.
    pub fn deterministic(self) -> bool {
        self != PromptMode::Llm
    }
}

pub fn resolve_prompts(
    cfg: &RunConfig,
    force_offline: bool,
    transport: &dyn Transport,
) -> Result<(ProgressivePrompt, PromptMode), CliError> {
    let n = cfg.regions.count();
    if n == 0 {
        return Err(CliError::pipeline("regions", "region count must be ≥ 1"));
    }
    let source = if force_offline {
        PromptSource::Offline
    } else {
        cfg.prompts.source
    };
    match source {
        PromptSource::Offline => Ok((offline_template(&cfg.prompts.intent, n), PromptMode::Offline)),
        PromptSource::Llm => {
            let llm = cfg
                .prompts
                .llm
                .as_ref()
                .ok_or_else(|| CliError::field("prompts.llm", "required when source = \"llm\""))?;
            Ok((generate_prompts(&cfg.prompts.intent, n, llm, transport)?, PromptMode::Llm))
        }
        PromptSource::File => {
            let path = cfg
                .prompts
                .file
                .as_ref()
                .ok_or_else(|| CliError::field("prompts.file", "required when source = \"file\""))?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::field("prompts.file", format!("{}: {e}", path.display())))?;
            let p: ProgressivePrompt = serde_json::from_str(&text)
                .map_err(|e| CliError::pipeline("prompts", format!("{}: {e}", path.display())))?;
            p.validate(n)
                .map_err(|e| CliError::pipeline("prompts", format!("{}: {e}", path.display())))?;
            Ok((p, PromptMode::File))
        }
    }
}

/// N regional states, the merged state and the negative state.
pub fn build_conditioning(cfg: &RunConfig, prompt: &ProgressivePrompt) -> Result<Conditioning, CliError> {
    let stage = |e: region_dit_core::text::TextError| CliError::pipeline("text-states", e);
    let dims = cfg.text.dims();
    let seed = RngSeed(cfg.text.embedding_seed);
    let record = |t: &str| synthesize_record(t, dims, seed).map_err(stage);
    let positives = prompt
        .region_texts()
        .into_iter()
        .map(record)
        .collect::<Result<Vec<_>, _>>()?;
    let set = PromptSet::new(positives, record(&prompt.negative)?).map_err(stage)?;
    let mlp = ProjectionMlp::seeded(dims, cfg.stack.d_model, RngSeed(cfg.text.projection_seed)).map_err(stage)?;
    let states = batch_prompt_states(&set, &mlp).map_err(stage)?;
    let merged = encode_prompt(&record(&merge_prompts(prompt))?, &mlp).map_err(stage)?;
    Conditioning::from_batch(states, merged).map_err(|e| CliError::pipeline("text-states", e))
}

pub fn build_masks(cfg: &RunConfig) -> Result<(LatentGrid, Vec<RegionMask>), CliError> {
    let grid = cfg.grid()?;
    let masks = divide_layout(cfg.regions.layout(), grid).map_err(|e| CliError::pipeline("regions", e))?;
    Ok((grid, masks))
}

#[derive(Debug, Clone, Serialize)]
pub struct MaskEntry {
    pub index: usize,
    pub file: String,
    pub cells: usize,
}

/// One binary PGM per mask (255 inside) plus `masks.json`.
pub fn write_masks(dir: &Path, grid: LatentGrid, masks: &[RegionMask]) -> Result<Vec<MaskEntry>, CliError> {
    crate::output::ensure_dir(dir)?;
    let mut entries = Vec::with_capacity(masks.len());
    for m in masks {
        let bin = unflatten_mask(m, grid).map_err(|e| CliError::pipeline("regions", e))?;
        let img = ImageBuffer::new(grid.height, grid.width, 1, bin.values.iter().map(|&v| v as f64).collect())
            .map_err(|e| CliError::pipeline("masks", e))?;
        let bytes = encode_pnm(&img, PnmEncoding::Binary, 255).map_err(|e| CliError::pipeline("masks", e))?;
        let file = format!("mask_{:02}.pgm", m.region_index());
        write_atomic(&dir.join(&file), &bytes)?;
        entries.push(MaskEntry {
            index: m.region_index(),
            file,
            cells: m.count_ones(),
        });
    }
    write_json(
        &dir.join("masks.json"),
        &serde_json::json!({
            "grid": grid,
            "count": masks.len(),
            "masks": entries,
        }),
    )?;
    Ok(entries)
}
