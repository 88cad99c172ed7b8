#![allow(dead_code)]

use region_dit_core::attention::CrossAttnWeights;
use region_dit_core::oracle::{Mat, OracleAffine, OracleAttnWeights};
use region_dit_core::rng::NormalStream;
use region_dit_core::tensor::{seeded_normal, Tensor};
use region_dit_core::RngSeed;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    let rows: Vec<Vec<f32>> = m.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn oracle_affine(w: &Tensor, b: &Tensor) -> OracleAffine {
    OracleAffine {
        w: to_mat(w),
        b: b.data().iter().map(|&v| v as f64).collect(),
    }
}

pub fn to_oracle(w: &CrossAttnWeights) -> OracleAttnWeights {
    OracleAttnWeights {
        heads: w.heads,
        q: oracle_affine(&w.wq, &w.bq),
        k: oracle_affine(&w.wk, &w.bk),
        v: oracle_affine(&w.wv, &w.bv),
        o: oracle_affine(&w.wo, &w.bo),
    }
}

/// Small attention weights with non-zero biases.
pub fn small_weights(d: usize, heads: usize, head_dim: usize, seed: u64) -> CrossAttnWeights {
    let mut s = NormalStream::new(RngSeed(seed));
    let mut w = CrossAttnWeights::seeded(d, heads, head_dim, &mut s, 0.5).unwrap();
    let inner = heads * head_dim;
    w.bq = seeded_normal(vec![inner], RngSeed(seed ^ 0x11), 0.1).unwrap();
    w.bk = seeded_normal(vec![inner], RngSeed(seed ^ 0x22), 0.1).unwrap();
    w.bv = seeded_normal(vec![inner], RngSeed(seed ^ 0x33), 0.1).unwrap();
    w.bo = seeded_normal(vec![d], RngSeed(seed ^ 0x44), 0.1).unwrap();
    w
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    let mut m = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            m = m.max((v - b.row(r)[c] as f64).abs());
        }
    }
    m
}
