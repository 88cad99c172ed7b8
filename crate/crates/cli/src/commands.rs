//! The four subcommands. Each writes under `cfg.out_dir` and returns a
//! JSON summary that is also written to disk.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use region_dit_core::dit::Stack;
use region_dit_core::fixture::write_tensor;
use region_dit_core::metrics::{regional_influence_scores, InfluenceProbe, InfluenceScore};
use region_dit_core::prompts::{
    generate_prompts, merge_prompts, offline_template, LlmClientConfig, ProgressivePrompt, Transport,
};
use region_dit_core::rng::SplitMix64;
use region_dit_core::sampler::sample;
use region_dit_core::tensor::seeded_normal;
use region_dit_core::RngSeed;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{PolicyName, RunConfig};
use crate::error::CliError;
use crate::output::{checksum_file, ensure_dir, write_atomic, write_json};
use crate::pipeline::{build_conditioning, build_masks, resolve_prompts, write_masks};

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn rel(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// prompts → text states → masks → sampler. Writes the trajectory, the
/// final latent, the masks, the prompts and `report.json`.
pub fn cmd_generate(cfg: &RunConfig, force_offline: bool, transport: &dyn Transport) -> Result<Value, CliError> {
    let out = cfg.out_dir.as_path();
    ensure_dir(out)?;
    let mut timings = BTreeMap::new();

    let t = Instant::now();
    let (prompt, mode) = resolve_prompts(cfg, force_offline, transport)?;
    timings.insert("prompts", elapsed_ms(t));

    let t = Instant::now();
    let cond = build_conditioning(cfg, &prompt)?;
    timings.insert("text_states", elapsed_ms(t));

    let t = Instant::now();
    let (grid, masks) = build_masks(cfg)?;
    let mask_entries = write_masks(&out.join("masks"), grid, &masks)?;
    timings.insert("masks", elapsed_ms(t));

    let t = Instant::now();
    let stack = Stack::build(cfg.stack.to_stack_config()?).map_err(|e| CliError::pipeline("stack", e))?;
    timings.insert("stack", elapsed_ms(t));

    let t = Instant::now();
    let result = sample(
        &stack,
        &cond,
        &masks,
        &cfg.scheduler.to_config(),
        &cfg.cfg.to_config(),
        RngSeed(cfg.seed),
    )
    .map_err(|e| CliError::pipeline("sampler", e))?;
    timings.insert("sampler", elapsed_ms(t));

    let t = Instant::now();
    let traj_dir = out.join("trajectory");
    let entries = result.dump(&traj_dir).map_err(|e| CliError::pipeline("output", e))?;
    let final_path = out.join("final_latent.txt");
    write_tensor(&final_path, result.final_latent(), &[("grid", &format!("{} {}", grid.height, grid.width))])
        .map_err(|e| CliError::pipeline("output", e))?;
    let prompts_path = out.join("prompts.json");
    write_json(&prompts_path, &prompt)?;

    let mut checked = vec![final_path, prompts_path, traj_dir.join("trajectory.json")];
    checked.extend(entries.iter().map(|e| traj_dir.join(&e.file)));
    checked.extend(mask_entries.iter().map(|m| out.join("masks").join(&m.file)));
    let mut checksums = BTreeMap::new();
    for p in &checked {
        checksums.insert(rel(p, out), checksum_file(p)?);
    }
    timings.insert("output", elapsed_ms(t));

    let steps: Vec<Value> = entries
        .windows(2)
        .map(|w| {
            json!({
                "step": w[1].step,
                "sigma": w[0].sigma,
                "sigma_next": w[1].sigma,
                "latent": format!("trajectory/{}", w[1].file),
            })
        })
        .collect();
    let report = json!({
        "command": "generate",
        "config": cfg,
        "prompt_mode": mode,
        "deterministic": mode.deterministic(),
        "prompts": prompt,
        "merged_prompt": merge_prompts(&prompt),
        "regions": masks.len(),
        "text_states": cond.regional.len() + 1,
        "initial": {
            "sigma": entries[0].sigma,
            "latent": format!("trajectory/{}", entries[0].file),
        },
        "steps": steps,
        "steps_run": result.steps_run(),
        "timings_ms": timings,
        "checksums": checksums,
    });
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// One PGM per region plus `masks.json`.
pub fn cmd_masks(cfg: &RunConfig) -> Result<Value, CliError> {
    let (grid, masks) = build_masks(cfg)?;
    let dir = cfg.out_dir.as_path();
    let entries = write_masks(dir, grid, &masks)?;
    Ok(json!({"command": "masks", "grid": grid, "layout": cfg.regions.layout(), "masks": entries}))
}

/// Progressive prompt for `intent` with `n` regions, offline or via the LLM.
pub fn cmd_prompts(
    intent: &str,
    n: usize,
    llm: Option<&LlmClientConfig>,
    transport: &dyn Transport,
) -> Result<ProgressivePrompt, CliError> {
    if n == 0 {
        return Err(CliError::field("n", "region count must be ≥ 1"));
    }
    match llm {
        None => Ok(offline_template(intent, n)),
        Some(cfg) => Ok(generate_prompts(intent, n, cfg, transport)?),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub policy: &'static str,
    pub seed: u64,
    pub k: usize,
    pub injected: Vec<usize>,
    pub region: usize,
    pub inside: f64,
    pub outside: f64,
    pub ratio: f64,
}

struct SweepPoint {
    policy: PolicyName,
    seed: u64,
    k: usize,
    injected: BTreeSet<usize>,
}

fn sweep_points(cfg: &RunConfig) -> Result<Vec<SweepPoint>, CliError> {
    let n = cfg.stack.num_blocks;
    let mut points = Vec::new();
    for &policy in &cfg.ablation.policies {
        for seed in cfg.ablation_seeds() {
            match policy.placement() {
                Some(p) => {
                    for &k in &cfg.ablation.counts {
                        let injected = p.injected(k, n).map_err(|e| CliError::field("ablation.counts", e))?;
                        points.push(SweepPoint { policy, seed, k, injected });
                    }
                }
                None => {
                    for set in &cfg.ablation.explicit {
                        points.push(SweepPoint {
                            policy,
                            seed,
                            k: set.len(),
                            injected: set.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(points)
}

/// Seeds of one sweep seed: stack weights, probe latent, perturbations.
fn seed_streams(seed: u64) -> (RngSeed, RngSeed, RngSeed) {
    let mut s = SplitMix64::new(RngSeed(seed));
    (s.fork(), s.fork(), s.fork())
}

fn sweep_csv(rows: &[SweepRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "k", "region", "inside", "outside", "ratio"])
        .map_err(|e| CliError::pipeline("output", e))?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.k.to_string(),
            r.region.to_string(),
            r.inside.to_string(),
            r.outside.to_string(),
            r.ratio.to_string(),
        ])
        .map_err(|e| CliError::pipeline("output", e))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::pipeline("output", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::pipeline("output", e))
}

/// Regional influence for every (policy, seed, k) point. Points run on up
/// to `ablation.workers` threads; each point's JSON is written atomically as
/// soon as it finishes. Writes `ablation_<policy>.csv` and `.json` plus
/// `ablation_summary.json`.
pub fn cmd_ablate_depth(cfg: &RunConfig, force_offline: bool, transport: &dyn Transport) -> Result<Value, CliError> {
    cfg.validate_ablation()?;
    let out = cfg.out_dir.as_path();
    let point_dir = out.join("points");
    ensure_dir(&point_dir)?;
    let started = Instant::now();

    let (prompt, mode) = resolve_prompts(cfg, force_offline, transport)?;
    let cond = build_conditioning(cfg, &prompt)?;
    let (_, masks) = build_masks(cfg)?;
    let base_cfg = cfg.stack.to_stack_config()?;
    let points = sweep_points(cfg)?;

    // Stacks per seed; the injection set only selects attention modes.
    let mut stacks = BTreeMap::new();
    for seed in cfg.ablation_seeds() {
        let (stack_seed, _, _) = seed_streams(seed);
        let stack = Stack::build(region_dit_core::dit::StackConfig {
            seed: stack_seed,
            injected: BTreeSet::new(),
            ..base_cfg.clone()
        })
        .map_err(|e| CliError::pipeline("stack", e))?;
        stacks.insert(seed, stack);
    }

    // Identical (seed, injected set) pairs are scored once.
    type Key = (u64, Vec<usize>);
    let keys: Vec<Key> = points
        .iter()
        .map(|p| (p.seed, p.injected.iter().copied().collect()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let len = masks.len();
    let d = base_cfg.d_model;
    let score = |(seed, injected): &Key| -> Result<Vec<InfluenceScore>, CliError> {
        let (_, probe_seed, perturb_seed) = seed_streams(*seed);
        let stack = stacks[seed]
            .with_injected(injected.iter().copied().collect())
            .map_err(|e| CliError::pipeline("stack", e))?;
        let probe = InfluenceProbe {
            latent: seeded_normal(vec![masks[0].len(), d], probe_seed, 1.0)
                .map_err(|e| CliError::pipeline("ablation", e))?,
            timestep: cfg.ablation.probe_timestep,
        };
        regional_influence_scores(&stack, &masks, &cond, perturb_seed, &probe)
            .map_err(|e| CliError::pipeline("ablation", e))
    };

    let write_point = |i: usize, p: &SweepPoint, scores: &[InfluenceScore]| -> Result<Vec<SweepRow>, CliError> {
        let point_rows: Vec<SweepRow> = scores
            .iter()
            .enumerate()
            .map(|(region, sc)| SweepRow {
                policy: p.policy.name(),
                seed: p.seed,
                k: p.k,
                injected: p.injected.iter().copied().collect(),
                region,
                inside: sc.inside,
                outside: sc.outside,
                ratio: sc.ratio,
            })
            .collect();
        let file = point_dir.join(format!("{}_{:03}_k{:03}_s{}.json", p.policy.name(), i, p.k, p.seed));
        write_json(&file, &point_rows)?;
        Ok(point_rows)
    };

    // Worker pool over unique keys; a point's file is written as soon as
    // its key is scored.
    let slots: Vec<Mutex<Option<Vec<SweepRow>>>> = points.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    let workers = cfg.ablation.workers.min(keys.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if failure.lock().expect("failure").is_some() {
                    break;
                }
                let Some(key) = keys.get(next.fetch_add(1, Ordering::SeqCst)) else { break };
                let result = score(key).and_then(|scores| {
                    for (i, p) in points.iter().enumerate() {
                        if p.seed == key.0 && p.injected.iter().eq(key.1.iter()) {
                            *slots[i].lock().expect("slot") = Some(write_point(i, p, &scores)?);
                        }
                    }
                    Ok(())
                });
                if let Err(e) = result {
                    failure.lock().expect("failure").get_or_insert(e);
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("failure") {
        return Err(e);
    }
    let rows: Vec<SweepRow> = slots
        .into_iter()
        .flat_map(|m| m.into_inner().expect("slot").expect("every point ran"))
        .collect();

    let mut files = BTreeMap::new();
    let mut summary = serde_json::Map::new();
    for &policy in &cfg.ablation.policies {
        let name = policy.name();
        let policy_rows: Vec<SweepRow> = rows.iter().filter(|r| r.policy == name).cloned().collect();
        let csv_path = out.join(format!("ablation_{name}.csv"));
        write_atomic(&csv_path, sweep_csv(&policy_rows)?.as_bytes())?;
        let json_path = out.join(format!("ablation_{name}.json"));
        write_json(&json_path, &policy_rows)?;
        files.insert(name, json!({"csv": rel(&csv_path, out), "json": rel(&json_path, out)}));

        // Mean ratio over regions, per k and seed.
        let mut by_k: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
        for r in &policy_rows {
            *by_k.entry(r.k).or_default().entry(r.seed).or_default() += r.ratio / len as f64;
        }
        summary.insert(name.to_string(), json!(by_k
            .iter()
            .map(|(k, seeds)| (k.to_string(), seeds.iter().map(|(s, v)| (s.to_string(), *v)).collect::<BTreeMap<_, _>>()))
            .collect::<BTreeMap<_, _>>()));
    }
    let report = json!({
        "command": "ablate-depth",
        "config": cfg,
        "prompt_mode": mode,
        "deterministic": mode.deterministic(),
        "regions": len,
        "points": points.len(),
        "scored": keys.len(),
        "files": files,
        "mean_ratio_by_policy_k_seed": summary,
        "elapsed_ms": elapsed_ms(started),
    });
    write_json(&out.join("ablation_summary.json"), &report)?;
    Ok(report)
}
