//! Golden outputs of a small end-to-end pipeline. Regenerate with
//! `REGION_DIT_BLESS=1 cargo test -p region-dit-core --test golden`.

use std::path::PathBuf;

use region_dit_core::attention::AttentionMode;
use region_dit_core::dit::{Conditioning, Stack, StackConfig};
use region_dit_core::fixture::{read_tensor, write_tensor};
use region_dit_core::regions::{divide_regions, Axis, LatentGrid, RegionSpec};
use region_dit_core::sampler::{sample, CfgConfig, SchedulerConfig};
use region_dit_core::tensor::{seeded_normal, Tensor};
use region_dit_core::text::{
    batch_prompt_states, encode_prompt, synthesize_record, EmbeddingDims, ProjectionMlp, PromptSet,
};
use region_dit_core::RngSeed;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn check(name: &str, got: &Tensor) {
    let path = golden_path(name);
    if std::env::var("REGION_DIT_BLESS").as_deref() == Ok("1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        write_tensor(&path, got, &[]).unwrap();
    }
    let want = read_tensor(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(want.shape(), got.shape(), "{name}");
    let diff = want.max_abs_diff(got).unwrap();
    assert!(diff <= 1e-6, "{name}: max abs diff {diff:e}");
}

fn pipeline_stack() -> Stack {
    Stack::build(StackConfig {
        num_blocks: 4,
        injected: [2, 3].into_iter().collect(),
        mode: AttentionMode::RegionOutputMasked,
        d_model: 16,
        heads: 2,
        head_dim: 8,
        seed: RngSeed(20),
        weight_scale: 0.05,
    })
    .unwrap()
}

fn pipeline_conditioning() -> Conditioning {
    let dims = EmbeddingDims::default();
    let seed = RngSeed(5);
    let rec = |t: &str| synthesize_record(t, dims, seed).unwrap();
    let set = PromptSet::new(
        vec![rec("a red barn, weathered wood"), rec("a wheat field, golden light")],
        rec("blurry, low quality"),
    )
    .unwrap();
    let mlp = ProjectionMlp::seeded(dims, 16, RngSeed(6)).unwrap();
    let states = batch_prompt_states(&set, &mlp).unwrap();
    let merged = encode_prompt(&rec("a farm, a red barn, weathered wood, a wheat field, golden light"), &mlp).unwrap();
    Conditioning::from_batch(states, merged).unwrap()
}

#[test]
fn stack_forward_golden() {
    let stack = pipeline_stack();
    let cond = pipeline_conditioning();
    let masks = divide_regions(RegionSpec { axis: Axis::Width, count: 2 }, LatentGrid::new(4, 4).unwrap()).unwrap();
    let latent = seeded_normal(vec![16, 16], RngSeed(7), 1.0).unwrap();
    let out = stack.forward(&latent, 0.75, &cond, &masks).unwrap();
    check("stack_forward.txt", &out);
}

#[test]
fn sampler_final_latent_golden() {
    let stack = pipeline_stack();
    let cond = pipeline_conditioning();
    let masks = divide_regions(RegionSpec { axis: Axis::Height, count: 2 }, LatentGrid::new(4, 4).unwrap()).unwrap();
    let sched = SchedulerConfig {
        steps: 4,
        ..SchedulerConfig::default()
    };
    let out = sample(&stack, &cond, &masks, &sched, &CfgConfig::default(), RngSeed(8)).unwrap();
    assert_eq!(out.steps_run(), 4);
    check("sample_final.txt", out.final_latent());
}

#[test]
fn saved_stack_reproduces_forward() {
    let stack = pipeline_stack();
    let dir = tempfile::tempdir().unwrap();
    stack.save(dir.path()).unwrap();
    let loaded = Stack::load(dir.path()).unwrap();
    let cond = pipeline_conditioning();
    let masks = divide_regions(RegionSpec { axis: Axis::Width, count: 2 }, LatentGrid::new(4, 4).unwrap()).unwrap();
    let latent = seeded_normal(vec![16, 16], RngSeed(7), 1.0).unwrap();
    let a = stack.forward(&latent, 0.75, &cond, &masks).unwrap();
    let b = loaded.forward(&latent, 0.75, &cond, &masks).unwrap();
    assert_eq!(a, b);
}
