//! Brute-force double-precision reference implementations.
//!
//! These exist only to check the production attention path. They work on
//! plain nested `Vec<f64>` matrices, use scalar loops, and import nothing
//! from the rest of the crate. Inputs are capped at tiny sizes.

use std::fmt;

pub type Mat = Vec<Vec<f64>>;

pub const MAX_ROWS: usize = 8;
pub const MAX_SEQ: usize = 8;
pub const MAX_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleError(pub String);

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "oracle: {}", self.0)
    }
}

impl std::error::Error for OracleError {}

/// Projection weights in oracle form (`w` is `in × out`, `b` has `out`).
#[derive(Debug, Clone)]
pub struct OracleAffine {
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OracleAttnWeights {
    pub heads: usize,
    pub q: OracleAffine,
    pub k: OracleAffine,
    pub v: OracleAffine,
    pub o: OracleAffine,
}

fn cols(m: &Mat) -> usize {
    m.first().map_or(0, Vec::len)
}

fn check_caps(q: &Mat, k: &Mat, v: &Mat) -> Result<(), OracleError> {
    if q.len() > MAX_ROWS || k.len() > MAX_SEQ || cols(q) > MAX_DIM || cols(v) > MAX_DIM {
        return Err(OracleError(format!(
            "size cap exceeded: L={} S={} d={}",
            q.len(),
            k.len(),
            cols(q).max(cols(v))
        )));
    }
    if k.len() != v.len() || cols(q) != cols(k) || cols(v) != cols(q) {
        return Err(OracleError("inconsistent q/k/v shapes".into()));
    }
    Ok(())
}

pub fn affine(x: &Mat, a: &OracleAffine) -> Mat {
    let mut out = Vec::with_capacity(x.len());
    for row in x {
        let mut o = a.b.clone();
        for (j, oj) in o.iter_mut().enumerate() {
            for (i, xi) in row.iter().enumerate() {
                *oj += xi * a.w[i][j];
            }
        }
        out.push(o);
    }
    out
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = cols(b);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

/// Multi-head scaled dot-product attention on projected q (L×d), k, v (S×d).
/// Returns the concatenated head outputs (L×d), before any output projection.
pub fn oracle_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Result<Mat, OracleError> {
    check_caps(q, k, v)?;
    let d = cols(q);
    if heads == 0 || d % heads != 0 {
        return Err(OracleError(format!("{d} columns do not split into {heads} heads")));
    }
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for (p, qrow) in q.iter().enumerate() {
        for h in 0..heads {
            let lo = h * hd;
            let mut logits = Vec::with_capacity(k.len());
            for krow in k {
                let mut dot = 0.0;
                for c in lo..lo + hd {
                    dot += qrow[c] * krow[c];
                }
                logits.push(dot * scale);
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (s, e) in exps.iter().enumerate() {
                for c in lo..lo + hd {
                    out[p][c] += e / z * v[s][c];
                }
            }
        }
    }
    Ok(out)
}

/// Full cross-attention: project, attend, project out.
pub fn oracle_cross_attention(x: &Mat, ctx: &Mat, w: &OracleAttnWeights) -> Result<Mat, OracleError> {
    let q = affine(x, &w.q);
    let k = affine(ctx, &w.k);
    let v = affine(ctx, &w.v);
    Ok(affine(&oracle_attention(&q, &k, &v, w.heads)?, &w.o))
}

/// The literal fusion rule on projected inputs: zero the query rows outside
/// region i, attend to region i's keys/values over every row, sum over i.
/// Returns pre-output-projection features.
pub fn oracle_region_literal(
    q: &Mat,
    ks: &[Mat],
    vs: &[Mat],
    masks: &[Vec<u8>],
    heads: usize,
) -> Result<Mat, OracleError> {
    if ks.len() != masks.len() || vs.len() != masks.len() || masks.is_empty() {
        return Err(OracleError("region count mismatch".into()));
    }
    let d = cols(q);
    let mut sum = vec![vec![0.0; d]; q.len()];
    for i in 0..masks.len() {
        let masked: Mat = q
            .iter()
            .zip(&masks[i])
            .map(|(row, &m)| row.iter().map(|x| x * m as f64).collect())
            .collect();
        let f = oracle_attention(&masked, &ks[i], &vs[i], heads)?;
        for p in 0..q.len() {
            for c in 0..d {
                sum[p][c] += f[p][c];
            }
        }
    }
    Ok(sum)
}

/// Per-position attention against the state of the region that owns the
/// position. Pre-output-projection features.
pub fn oracle_region_output_masked(
    q: &Mat,
    ks: &[Mat],
    vs: &[Mat],
    masks: &[Vec<u8>],
    heads: usize,
) -> Result<Mat, OracleError> {
    let d = cols(q);
    let mut out = vec![vec![0.0; d]; q.len()];
    for p in 0..q.len() {
        let owner = (0..masks.len())
            .find(|&i| masks[i][p] == 1)
            .ok_or_else(|| OracleError(format!("position {p} not covered")))?;
        let row = oracle_attention(&vec![q[p].clone()], &ks[owner], &vs[owner], heads)?;
        out[p] = row[0].clone();
    }
    Ok(out)
}

/// The extra term the literal rule adds at each position: the column mean of
/// every other region's values (uniform attention from a zeroed query).
pub fn oracle_literal_bias(vs: &[Mat], masks: &[Vec<u8>]) -> Result<Mat, OracleError> {
    let len = masks.first().map_or(0, Vec::len);
    let d = vs.first().map_or(0, cols);
    let mut out = vec![vec![0.0; d]; len];
    for (p, row) in out.iter_mut().enumerate() {
        for (i, v) in vs.iter().enumerate() {
            if masks[i][p] == 1 {
                continue;
            }
            for c in 0..d {
                row[c] += v.iter().map(|r| r[c]).sum::<f64>() / v.len() as f64;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_logit() {
        let out = oracle_attention(&vec![vec![0.3]], &vec![vec![2.0]], &vec![vec![5.0]], 1).unwrap();
        assert_eq!(out, vec![vec![5.0]]);
    }

    #[test]
    fn caps_enforced() {
        let big = vec![vec![0.0; 2]; 9];
        let k = vec![vec![0.0; 2]; 2];
        assert!(oracle_attention(&big, &k, &k, 1).is_err());
    }

    #[test]
    fn single_region_literal_equals_attention() {
        let q = vec![vec![0.1, 0.5], vec![-0.3, 0.2], vec![0.9, -1.0]];
        let k = vec![vec![1.0, 0.0], vec![0.5, -0.5]];
        let v = vec![vec![2.0, 1.0], vec![-1.0, 3.0]];
        let a = oracle_attention(&q, &k, &v, 2).unwrap();
        let r = oracle_region_literal(&q, &[k], &[v], &[vec![1, 1, 1]], 2).unwrap();
        assert_eq!(a, r);
    }

    #[test]
    fn worked_two_region_example() {
        // 2x2 latent split into a top and a bottom row, one head, d = 1.
        // Keys are zero, so every softmax is uniform and each region's
        // feature is the mean of its values: region 0 -> 2, region 1 -> 10.
        let q = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let k0 = vec![vec![0.0], vec![0.0]];
        let v0 = vec![vec![1.0], vec![3.0]];
        let v1 = vec![vec![8.0], vec![12.0]];
        let masks = vec![vec![1, 1, 0, 0], vec![0, 0, 1, 1]];
        let lit = oracle_region_literal(&q, &[k0.clone(), k0.clone()], &[v0.clone(), v1.clone()], &masks, 1).unwrap();
        assert_eq!(lit, vec![vec![12.0]; 4]);
        let msk = oracle_region_output_masked(&q, &[k0.clone(), k0], &[v0.clone(), v1.clone()], &masks, 1).unwrap();
        assert_eq!(msk, vec![vec![2.0], vec![2.0], vec![10.0], vec![10.0]]);
        let bias = oracle_literal_bias(&[v0, v1], &masks).unwrap();
        assert_eq!(bias, vec![vec![10.0], vec![10.0], vec![2.0], vec![2.0]]);
    }
}
