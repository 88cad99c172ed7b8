//! Cross-attention and Controllable Region-Attention.
//!
//! Region attention reuses one set of projection weights for every region.
//! Queries come from the latent sequence; keys and values come from the text
//! state of each region's prompt. Two fusion modes are provided:
//!
//! * [`AttentionMode::RegionLiteral`]: queries are multiplied by the region
//!   mask, each region attends over the full sequence, and the per-region
//!   features are summed. Zeroed query rows produce uniform attention, so
//!   every position also receives the column mean of the other regions'
//!   values.
//! * [`AttentionMode::RegionOutputMasked`]: each per-region feature is
//!   additionally masked before summing, so position `p` only sees the state
//!   of the region that contains it.
//!
//! In both modes the output projection is applied once, after fusion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::regions::{region_owners, RegionError, RegionMask};
use crate::rng::NormalStream;
use crate::tensor::{self, normal_from_stream, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("{masks} masks but {states} text states")]
    CountMismatch { masks: usize, states: usize },
    #[error("mask length {mask_len} does not match latent length {latent_len}")]
    MaskLength { mask_len: usize, latent_len: usize },
    #[error("{what}: expected width {expected}, got {got}")]
    Width {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid attention weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Partition(#[from] RegionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, AttentionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Standard,
    RegionLiteral,
    #[default]
    RegionOutputMasked,
}

/// Projection weights of one multi-head attention slot. `wq`, `wk`, `wv` are
/// `d_model × heads·head_dim`; `wo` maps back to `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnWeights {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl CrossAttnWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        heads: usize,
        head_dim: usize,
        wq: Tensor,
        bq: Tensor,
        wk: Tensor,
        bk: Tensor,
        wv: Tensor,
        bv: Tensor,
        wo: Tensor,
        bo: Tensor,
    ) -> Result<Self> {
        let w = CrossAttnWeights {
            heads,
            head_dim,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        };
        w.validate()?;
        Ok(w)
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(AttentionError::Weights("heads and head_dim must be ≥ 1".into()));
        }
        let inner = self.inner_dim();
        let d = self.wq.rows();
        let expect = |name: &str, t: &Tensor, shape: &[usize]| {
            if t.shape() != shape {
                Err(AttentionError::Weights(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        expect("wq", &self.wq, &[d, inner])?;
        expect("wk", &self.wk, &[d, inner])?;
        expect("wv", &self.wv, &[d, inner])?;
        expect("wo", &self.wo, &[inner, d])?;
        expect("bq", &self.bq, &[inner])?;
        expect("bk", &self.bk, &[inner])?;
        expect("bv", &self.bv, &[inner])?;
        expect("bo", &self.bo, &[d])
    }

    /// Normal(0, scale²) weights drawn in the order wq, wk, wv, wo; zero biases.
    pub fn seeded(
        d_model: usize,
        heads: usize,
        head_dim: usize,
        stream: &mut NormalStream,
        scale: f32,
    ) -> Result<Self> {
        let inner = heads * head_dim;
        let wq = normal_from_stream(vec![d_model, inner], stream, scale)?;
        let wk = normal_from_stream(vec![d_model, inner], stream, scale)?;
        let wv = normal_from_stream(vec![d_model, inner], stream, scale)?;
        let wo = normal_from_stream(vec![inner, d_model], stream, scale)?;
        Self::new(
            heads,
            head_dim,
            wq,
            Tensor::zeros(vec![inner]),
            wk,
            Tensor::zeros(vec![inner]),
            wv,
            Tensor::zeros(vec![inner]),
            wo,
            Tensor::zeros(vec![d_model]),
        )
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Parameters in serialization order.
    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
        ]
    }
}

fn check_width(what: &'static str, t: &Tensor, expected: usize) -> Result<()> {
    let (_, got) = t.dims2(what)?;
    if got != expected {
        return Err(AttentionError::Width { what, expected, got });
    }
    Ok(())
}

/// Keys and values of one context sequence, `S × inner` each.
struct KeyValues {
    keys_t: Vec<Tensor>,
    values: Vec<Tensor>,
}

fn project_kv(context: &Tensor, w: &CrossAttnWeights) -> Result<KeyValues> {
    check_width("context", context, w.d_model())?;
    let k = tensor::linear(context, &w.wk, &w.bk)?;
    let v = tensor::linear(context, &w.wv, &w.bv)?;
    let mut keys_t = Vec::with_capacity(w.heads);
    let mut values = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        keys_t.push(k.column_block(h * w.head_dim, w.head_dim)?.transpose()?);
        values.push(v.column_block(h * w.head_dim, w.head_dim)?);
    }
    Ok(KeyValues { keys_t, values })
}

/// Scaled dot-product attention for already projected queries
/// (`rows × inner`), heads concatenated, before the output projection.
///
/// Every output row depends only on its own query row.
fn attend(queries: &Tensor, kv: &KeyValues, w: &CrossAttnWeights) -> Result<Tensor> {
    let (rows, inner) = queries.dims2("queries")?;
    let inv_sqrt = (w.head_dim as f32).sqrt().recip();
    let mut out = vec![0.0f32; rows * inner];
    for h in 0..w.heads {
        let q = queries.column_block(h * w.head_dim, w.head_dim)?;
        let scores = tensor::scale(&tensor::matmul(&q, &kv.keys_t[h])?, inv_sqrt)?;
        let probs = tensor::softmax_rows(&scores)?;
        let o = tensor::matmul(&probs, &kv.values[h])?;
        for r in 0..rows {
            out[r * inner + h * w.head_dim..r * inner + (h + 1) * w.head_dim]
                .copy_from_slice(o.row(r));
        }
    }
    Ok(Tensor::new(vec![rows, inner], out)?)
}

fn project_queries(latent: &Tensor, w: &CrossAttnWeights) -> Result<Tensor> {
    check_width("latent", latent, w.d_model())?;
    Ok(tensor::linear(latent, &w.wq, &w.bq)?)
}

fn project_out(features: &Tensor, w: &CrossAttnWeights) -> Result<Tensor> {
    Ok(tensor::linear(features, &w.wo, &w.bo)?)
}

/// Multi-head cross-attention of a latent sequence (`L × d_model`) over a
/// context sequence (`S × d_model`).
pub fn cross_attention(latent: &Tensor, context: &Tensor, w: &CrossAttnWeights) -> Result<Tensor> {
    let q = project_queries(latent, w)?;
    let kv = project_kv(context, w)?;
    project_out(&attend(&q, &kv, w)?, w)
}

/// Self-attention: keys and values come from the latent itself.
pub fn self_attention(latent: &Tensor, w: &CrossAttnWeights) -> Result<Tensor> {
    cross_attention(latent, latent, w)
}

/// Controllable Region-Attention.
///
/// `masks[i]` selects the latent positions conditioned on `states[i]`; the
/// masks must partition the latent sequence. [`AttentionMode::Standard`] is
/// rejected here, use [`cross_attention`] for that.
pub fn region_attention<S: AsRef<Tensor> + Sync>(
    latent: &Tensor,
    masks: &[RegionMask],
    states: &[S],
    w: &CrossAttnWeights,
    mode: AttentionMode,
) -> Result<Tensor> {
    if masks.len() != states.len() {
        return Err(AttentionError::CountMismatch {
            masks: masks.len(),
            states: states.len(),
        });
    }
    let (len, _) = latent.dims2("latent")?;
    if let Some(m) = masks.iter().find(|m| m.len() != len) {
        return Err(AttentionError::MaskLength {
            mask_len: m.len(),
            latent_len: len,
        });
    }
    region_owners(masks, len)?;

    let queries = project_queries(latent, w)?;
    let fused = match mode {
        AttentionMode::Standard => {
            return Err(AttentionError::Weights(
                "region_attention called with Standard mode".into(),
            ))
        }
        AttentionMode::RegionLiteral => fuse_literal(&queries, masks, states, w)?,
        AttentionMode::RegionOutputMasked => fuse_output_masked(&queries, masks, states, w)?,
    };
    project_out(&fused, w)
}

/// Query ⊙ Maskᵢ, attend to state i over all rows, sum fᵢ in region order.
fn fuse_literal<S: AsRef<Tensor> + Sync>(
    queries: &Tensor,
    masks: &[RegionMask],
    states: &[S],
    w: &CrossAttnWeights,
) -> Result<Tensor> {
    let parts: Vec<Result<Tensor>> = par::map_range(masks.len(), |i| {
        let weights: Vec<f32> = masks[i].values().iter().map(|&m| m as f32).collect();
        let masked = queries.scale_rows(&weights)?;
        let kv = project_kv(states[i].as_ref(), w)?;
        attend(&masked, &kv, w)
    });
    let mut parts = parts.into_iter();
    let mut sum = parts.next().expect("at least one region")?;
    for p in parts {
        sum = tensor::add(&sum, &p?)?;
    }
    Ok(sum)
}

/// Σᵢ Maskᵢ ⊙ fᵢ. Rows of fᵢ outside region i are multiplied by zero, so
/// only the in-region rows are computed and scattered into place.
fn fuse_output_masked<S: AsRef<Tensor> + Sync>(
    queries: &Tensor,
    masks: &[RegionMask],
    states: &[S],
    w: &CrossAttnWeights,
) -> Result<Tensor> {
    let (len, inner) = queries.dims2("queries")?;
    let parts: Vec<Result<(Vec<usize>, Tensor)>> = par::map_range(masks.len(), |i| {
        let cells = masks[i].cells();
        let q = queries.gather_rows(&cells)?;
        let kv = project_kv(states[i].as_ref(), w)?;
        Ok((cells, attend(&q, &kv, w)?))
    });
    let mut out = vec![0.0f32; len * inner];
    for part in parts {
        let (cells, f) = part?;
        for (r, &cell) in cells.iter().enumerate() {
            out[cell * inner..(cell + 1) * inner].copy_from_slice(f.row(r));
        }
    }
    Ok(Tensor::new(vec![len, inner], out)?)
}

/// Cross-attention against the global negative prompt. Callers stack its
/// result with the positive branch as `[negative, positive]`.
pub fn negative_path(latent: &Tensor, negative_state: &Tensor, w: &CrossAttnWeights) -> Result<Tensor> {
    cross_attention(latent, negative_state, w)
}

/// `[negative, positive]` along a new leading batch axis (`2 × L × d_model`).
pub fn stack_branches(negative: &Tensor, positive: &Tensor) -> Result<Tensor> {
    Ok(Tensor::stack(&[negative, positive])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::{divide_regions, Axis, LatentGrid, RegionSpec};
    use crate::rng::RngSeed;
    use crate::tensor::seeded_normal;

    fn weights(d: usize, heads: usize, hd: usize, seed: u64) -> CrossAttnWeights {
        let mut s = NormalStream::new(RngSeed(seed));
        let mut w = CrossAttnWeights::seeded(d, heads, hd, &mut s, 0.5).unwrap();
        w.bq = normal_from_stream(vec![heads * hd], &mut s, 0.1).unwrap();
        w.bk = normal_from_stream(vec![heads * hd], &mut s, 0.1).unwrap();
        w.bv = normal_from_stream(vec![heads * hd], &mut s, 0.1).unwrap();
        w.bo = normal_from_stream(vec![d], &mut s, 0.1).unwrap();
        w
    }

    fn identity_weights(d: usize) -> CrossAttnWeights {
        CrossAttnWeights::new(
            1,
            d,
            Tensor::identity(d),
            Tensor::zeros(vec![d]),
            Tensor::identity(d),
            Tensor::zeros(vec![d]),
            Tensor::identity(d),
            Tensor::zeros(vec![d]),
            Tensor::identity(d),
            Tensor::zeros(vec![d]),
        )
        .unwrap()
    }

    fn stripes(h: usize, w: usize, n: usize) -> Vec<RegionMask> {
        divide_regions(
            RegionSpec { axis: Axis::Height, count: n },
            LatentGrid::new(h, w).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn dominant_key_saturates() {
        let w = identity_weights(2);
        let latent = Tensor::from_rows(&[vec![10.0, 0.0]]).unwrap();
        let ctx = Tensor::from_rows(&[vec![10.0, 0.0], vec![0.0, 10.0], vec![-10.0, 0.0]]).unwrap();
        let out = cross_attention(&latent, &ctx, &w).unwrap();
        assert!((out.data()[0] - 10.0).abs() < 1e-3 && out.data()[1].abs() < 1e-3, "{out:?}");
    }

    #[test]
    fn zero_queries_give_column_mean() {
        let w = identity_weights(2);
        let latent = Tensor::zeros(vec![3, 2]);
        let ctx = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]]).unwrap();
        let out = cross_attention(&latent, &ctx, &w).unwrap();
        for r in 0..3 {
            assert!((out.row(r)[0] - 3.0).abs() < 1e-6);
            assert!((out.row(r)[1] - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_region_is_bitwise_standard() {
        let w = weights(8, 2, 4, 1);
        let latent = seeded_normal(vec![6, 8], RngSeed(2), 1.0).unwrap();
        let ctx = seeded_normal(vec![5, 8], RngSeed(3), 1.0).unwrap();
        let masks = stripes(3, 2, 1);
        let base = cross_attention(&latent, &ctx, &w).unwrap();
        for mode in [AttentionMode::RegionLiteral, AttentionMode::RegionOutputMasked] {
            let r = region_attention(&latent, &masks, &[&ctx], &w, mode).unwrap();
            assert_eq!(r, base, "{mode:?}");
        }
    }

    #[test]
    fn output_masked_with_identical_states_equals_standard() {
        let w = weights(8, 2, 4, 4);
        let latent = seeded_normal(vec![12, 8], RngSeed(5), 1.0).unwrap();
        let ctx = seeded_normal(vec![7, 8], RngSeed(6), 1.0).unwrap();
        let base = cross_attention(&latent, &ctx, &w).unwrap();
        for n in [2, 3, 4] {
            let masks = stripes(4, 3, n);
            let states = vec![&ctx; n];
            let r = region_attention(&latent, &masks, &states, &w, AttentionMode::RegionOutputMasked).unwrap();
            assert!(r.max_abs_diff(&base).unwrap() < 1e-5);
        }
    }

    #[test]
    fn locality_of_output_masked() {
        let w = weights(8, 2, 4, 7);
        let latent = seeded_normal(vec![8, 8], RngSeed(8), 1.0).unwrap();
        let masks = stripes(4, 2, 2);
        let a = seeded_normal(vec![5, 8], RngSeed(9), 1.0).unwrap();
        let b = seeded_normal(vec![5, 8], RngSeed(10), 1.0).unwrap();
        let b2 = seeded_normal(vec![5, 8], RngSeed(11), 1.0).unwrap();
        let r1 = region_attention(&latent, &masks, &[&a, &b], &w, AttentionMode::RegionOutputMasked).unwrap();
        let r2 = region_attention(&latent, &masks, &[&a, &b2], &w, AttentionMode::RegionOutputMasked).unwrap();
        for p in 0..8 {
            if masks[1].contains(p) {
                assert_ne!(r1.row(p), r2.row(p));
            } else {
                assert_eq!(r1.row(p), r2.row(p));
            }
        }
    }

    #[test]
    fn literal_mode_leaks_uniform_terms() {
        let w = weights(4, 1, 4, 12);
        let latent = seeded_normal(vec![4, 4], RngSeed(13), 1.0).unwrap();
        let masks = stripes(2, 2, 2);
        let a = seeded_normal(vec![3, 4], RngSeed(14), 1.0).unwrap();
        let b = seeded_normal(vec![3, 4], RngSeed(15), 1.0).unwrap();
        let lit = region_attention(&latent, &masks, &[&a, &b], &w, AttentionMode::RegionLiteral).unwrap();
        let msk = region_attention(&latent, &masks, &[&a, &b], &w, AttentionMode::RegionOutputMasked).unwrap();
        assert!(lit.max_abs_diff(&msk).unwrap() > 1e-3);
    }

    #[test]
    fn permuting_regions_is_harmless() {
        let w = weights(8, 2, 4, 16);
        let latent = seeded_normal(vec![9, 8], RngSeed(17), 1.0).unwrap();
        let masks = stripes(3, 3, 3);
        let s: Vec<Tensor> = (0..3)
            .map(|i| seeded_normal(vec![4, 8], RngSeed(20 + i), 1.0).unwrap())
            .collect();
        for mode in [AttentionMode::RegionLiteral, AttentionMode::RegionOutputMasked] {
            let r = region_attention(&latent, &masks, &s, &w, mode).unwrap();
            let pm = vec![masks[2].clone(), masks[0].clone(), masks[1].clone()];
            let ps = vec![&s[2], &s[0], &s[1]];
            let q = region_attention(&latent, &pm, &ps, &w, mode).unwrap();
            assert!(r.max_abs_diff(&q).unwrap() < 1e-5, "{mode:?}");
        }
    }

    #[test]
    fn precondition_errors() {
        let w = weights(8, 2, 4, 1);
        let latent = seeded_normal(vec![4, 8], RngSeed(2), 1.0).unwrap();
        let ctx = seeded_normal(vec![5, 8], RngSeed(3), 1.0).unwrap();
        let masks = stripes(2, 2, 2);
        assert!(matches!(
            region_attention(&latent, &masks, &[&ctx], &w, AttentionMode::RegionLiteral),
            Err(AttentionError::CountMismatch { masks: 2, states: 1 })
        ));
        let overlap = vec![
            RegionMask::new(0, vec![1, 1, 1, 0]).unwrap(),
            RegionMask::new(1, vec![0, 0, 1, 1]).unwrap(),
        ];
        assert!(matches!(
            region_attention(&latent, &overlap, &[&ctx, &ctx], &w, AttentionMode::RegionOutputMasked),
            Err(AttentionError::Partition(RegionError::NotPartition { cell: 2, .. }))
        ));
        let short = divide_regions(
            RegionSpec { axis: Axis::Width, count: 2 },
            LatentGrid::new(1, 2).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            region_attention(&latent, &short, &[&ctx, &ctx], &w, AttentionMode::RegionOutputMasked),
            Err(AttentionError::MaskLength { .. })
        ));
        let bad_ctx = Tensor::zeros(vec![3, 5]);
        assert!(matches!(
            cross_attention(&latent, &bad_ctx, &w),
            Err(AttentionError::Width { .. })
        ));
    }

    #[test]
    fn negative_branch_stacking() {
        let w = weights(8, 2, 4, 30);
        let latent = seeded_normal(vec![4, 8], RngSeed(31), 1.0).unwrap();
        let neg = seeded_normal(vec![5, 8], RngSeed(32), 1.0).unwrap();
        let n = negative_path(&latent, &neg, &w).unwrap();
        assert_eq!(n, cross_attention(&latent, &neg, &w).unwrap());
        let pos = cross_attention(&latent, &neg, &w).unwrap();
        let both = stack_branches(&n, &pos).unwrap();
        assert_eq!(both.shape(), &[2, 4, 8]);
        assert_eq!(both.index_leading(0).unwrap(), both.index_leading(1).unwrap());
    }
}
