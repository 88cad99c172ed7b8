//! Production attention against the f64 brute-force oracles.

mod common;

use common::{max_diff, small_weights, to_mat, to_oracle};
use region_dit_core::attention::{cross_attention, region_attention, AttentionMode};
use region_dit_core::oracle::{
    affine, matmul, oracle_attention, oracle_cross_attention, oracle_literal_bias, oracle_region_literal,
    oracle_region_output_masked, Mat,
};
use region_dit_core::regions::{divide_regions, Axis, LatentGrid, RegionMask, RegionSpec};
use region_dit_core::tensor::{self, seeded_normal, Tensor};
use region_dit_core::RngSeed;

const TOL: f64 = 1e-5;

struct Instance {
    latent: Tensor,
    states: Vec<Tensor>,
    masks: Vec<RegionMask>,
    w: region_dit_core::attention::CrossAttnWeights,
}

/// Seeded instance with L = h·w ≤ 8, a context of ≤ 8 tokens and inner
/// width ≤ 8.
fn instance(seed: u64) -> Instance {
    let shapes = [(2, 4), (2, 3), (1, 8), (2, 2), (3, 2)];
    let (h, wd) = shapes[(seed as usize) % shapes.len()];
    let axis = if seed % 2 == 0 { Axis::Width } else { Axis::Height };
    let axis_len = if axis == Axis::Width { wd } else { h };
    let n = 1 + (seed as usize / 2) % axis_len.min(3);
    let (heads, head_dim) = [(1, 4), (2, 3), (2, 4), (4, 2)][(seed as usize / 3) % 4];
    let d = 5 + (seed as usize % 3);
    let seq = 2 + (seed as usize % 7);
    let latent = seeded_normal(vec![h * wd, d], RngSeed(seed * 31 + 1), 1.0).unwrap();
    let states = (0..n)
        .map(|i| seeded_normal(vec![seq, d], RngSeed(seed * 31 + 2 + i as u64), 1.0).unwrap())
        .collect();
    let masks = divide_regions(RegionSpec { axis, count: n }, LatentGrid::new(h, wd).unwrap()).unwrap();
    Instance {
        latent,
        states,
        masks,
        w: small_weights(d, heads, head_dim, seed + 1000),
    }
}

fn oracle_inputs(inst: &Instance) -> (Mat, Vec<Mat>, Vec<Mat>, Vec<Vec<u8>>) {
    let ow = to_oracle(&inst.w);
    let q = affine(&to_mat(&inst.latent), &ow.q);
    let ks = inst.states.iter().map(|s| affine(&to_mat(s), &ow.k)).collect();
    let vs = inst.states.iter().map(|s| affine(&to_mat(s), &ow.v)).collect();
    let masks = inst.masks.iter().map(|m| m.values().to_vec()).collect();
    (q, ks, vs, masks)
}

#[test]
fn cross_attention_matches_oracle() {
    for seed in 0..24 {
        let inst = instance(seed);
        let got = cross_attention(&inst.latent, &inst.states[0], &inst.w).unwrap();
        let want = oracle_cross_attention(&to_mat(&inst.latent), &to_mat(&inst.states[0]), &to_oracle(&inst.w)).unwrap();
        let diff = max_diff(&want, &got);
        assert!(diff < TOL, "seed {seed}: {diff:e}");
    }
}

#[test]
fn region_modes_match_oracles() {
    for seed in 0..24 {
        let inst = instance(seed);
        let ow = to_oracle(&inst.w);
        let (q, ks, vs, masks) = oracle_inputs(&inst);

        let lit = region_attention(&inst.latent, &inst.masks, &inst.states, &inst.w, AttentionMode::RegionLiteral).unwrap();
        let want = affine(&oracle_region_literal(&q, &ks, &vs, &masks, ow.heads).unwrap(), &ow.o);
        assert!(max_diff(&want, &lit) < TOL, "literal seed {seed}");

        let om = region_attention(&inst.latent, &inst.masks, &inst.states, &inst.w, AttentionMode::RegionOutputMasked).unwrap();
        let want = affine(&oracle_region_output_masked(&q, &ks, &vs, &masks, ow.heads).unwrap(), &ow.o);
        assert!(max_diff(&want, &om) < TOL, "output-masked seed {seed}");
    }
}

#[test]
fn output_masked_matches_per_region_oracle_attention() {
    for seed in 0..8 {
        let inst = instance(seed);
        let ow = to_oracle(&inst.w);
        let (q, ks, vs, _) = oracle_inputs(&inst);
        let got = region_attention(&inst.latent, &inst.masks, &inst.states, &inst.w, AttentionMode::RegionOutputMasked).unwrap();
        for (i, m) in inst.masks.iter().enumerate() {
            let full = affine(&oracle_attention(&q, &ks[i], &vs[i], ow.heads).unwrap(), &ow.o);
            for p in m.cells() {
                let diff = max_diff(&vec![full[p].clone()], &got.gather_rows(&[p]).unwrap());
                assert!(diff < TOL);
            }
        }
    }
}

#[test]
fn literal_bias_law() {
    for seed in 0..12 {
        let inst = instance(seed);
        let (_, _, vs, masks) = oracle_inputs(&inst);
        let lit = region_attention(&inst.latent, &inst.masks, &inst.states, &inst.w, AttentionMode::RegionLiteral).unwrap();
        let om = region_attention(&inst.latent, &inst.masks, &inst.states, &inst.w, AttentionMode::RegionOutputMasked).unwrap();
        let got = tensor::sub(&lit, &om).unwrap();
        let bias = oracle_literal_bias(&vs, &masks).unwrap();
        let want = matmul(&bias, &to_mat(&inst.w.wo));
        let diff = max_diff(&want, &got);
        assert!(diff < TOL, "seed {seed}: {diff:e}");
    }
}

#[test]
fn single_region_literal_is_plain_attention() {
    let inst = instance(4);
    let ow = to_oracle(&inst.w);
    let (q, ks, vs, _) = oracle_inputs(&inst);
    let all = vec![vec![1u8; q.len()]];
    let a = oracle_attention(&q, &ks[0], &vs[0], ow.heads).unwrap();
    let b = oracle_region_literal(&q, &ks[..1], &vs[..1], &all, ow.heads).unwrap();
    assert_eq!(a, b);
}
