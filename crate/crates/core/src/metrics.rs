//! Image metrics and the regional influence score.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::dit::{Conditioning, Stack, StackError};
use crate::image::{ImageBuffer, ImageError};
use crate::par;
use crate::regions::RegionMask;
use crate::rng::RngSeed;
use crate::tensor::{self, Tensor, TensorError};
use crate::text::{TextError, TextState};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Added to the outside term of the influence ratio.
pub const RATIO_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("region {region} out of range for {count} regions")]
    Region { region: usize, count: usize },
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error(transparent)]
    Stack(#[from] StackError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Peak signal-to-noise ratio in dB for unit dynamic range. Identical images
/// give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_dims(b)?;
    let sum: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = sum / a.values().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn window_ssim(a: &ImageBuffer, b: &ImageBuffer, y0: usize, x0: usize, c: usize, win: usize) -> f64 {
    let n = (win * win) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for y in y0..y0 + win {
        for x in x0..x0 + win {
            sa += a.get(y, x, c);
            sb += b.get(y, x, c);
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for y in y0..y0 + win {
        for x in x0..x0 + win {
            let da = a.get(y, x, c) - ma;
            let db = b.get(y, x, c) - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean SSIM over all `window`×`window` positions (stride 1, uniform
/// weights, population statistics), averaged over channels.
pub fn ssim_with_window(a: &ImageBuffer, b: &ImageBuffer, window: usize) -> Result<f64> {
    a.check_same_dims(b)?;
    let (h, w, ch) = a.dims();
    if window == 0 || h < window || w < window {
        return Err(MetricError::TooSmall {
            height: h,
            width: w,
            window,
        });
    }
    let ny = h - window + 1;
    let nx = w - window + 1;
    let row_sums = par::map_range(ny, |y0| {
        let mut s = 0.0;
        for c in 0..ch {
            for x0 in 0..nx {
                s += window_ssim(a, b, y0, x0, c, window);
            }
        }
        s
    });
    Ok(row_sums.iter().sum::<f64>() / (ny * nx * ch) as f64)
}

pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    ssim_with_window(a, b, SSIM_WINDOW)
}

/// Render a metric value for reports; non-finite values become strings.
pub fn metric_json(v: f64) -> Value {
    if v.is_finite() {
        Value::from(v)
    } else if v == f64::INFINITY {
        Value::from("inf")
    } else if v == f64::NEG_INFINITY {
        Value::from("-inf")
    } else {
        Value::from("nan")
    }
}

pub type MetricFn = fn(&ImageBuffer, &ImageBuffer) -> Result<f64>;

/// Named image metrics. PSNR and SSIM are built in; other tools can register
/// their own or append precomputed values to a [`MetricReport`].
#[derive(Clone)]
pub struct MetricRegistry {
    metrics: BTreeMap<String, MetricFn>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        let mut r = MetricRegistry {
            metrics: BTreeMap::new(),
        };
        r.register("psnr", psnr);
        r.register("ssim", ssim);
        r
    }
}

impl MetricRegistry {
    pub fn register(&mut self, name: &str, f: MetricFn) {
        self.metrics.insert(name.to_string(), f);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.metrics.keys().map(String::as_str)
    }

    pub fn compute(&self, name: &str, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
        let f = self
            .metrics
            .get(name)
            .ok_or_else(|| MetricError::UnknownMetric(name.to_string()))?;
        f(a, b)
    }

    pub fn evaluate(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<MetricReport> {
        let mut report = MetricReport::default();
        for (name, f) in &self.metrics {
            report.insert(name, f(a, b)?);
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn insert(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn to_json(&self) -> Value {
        Value::Object(
            self.values
                .iter()
                .map(|(k, &v)| (k.clone(), metric_json(v)))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InfluenceScore {
    pub inside: f64,
    pub outside: f64,
    pub ratio: f64,
}

impl InfluenceScore {
    fn from_parts(inside: f64, outside: f64) -> Self {
        let ratio = if inside == 0.0 && outside == 0.0 {
            0.0
        } else {
            inside / (outside + RATIO_EPS)
        };
        InfluenceScore { inside, outside, ratio }
    }
}

/// Fixed input at which the stack is probed.
#[derive(Debug, Clone)]
pub struct InfluenceProbe {
    pub latent: Tensor,
    pub timestep: f32,
}

/// A state with the same Frobenius norm as `state` pointing in a seeded
/// random direction.
pub fn perturb_state(state: &TextState, seed: RngSeed) -> Result<TextState> {
    let v = state.values();
    let dir = tensor::seeded_normal(v.shape().to_vec(), seed, 1.0)?;
    let target = v.frobenius_norm();
    let norm = dir.frobenius_norm();
    let k = if norm > 0.0 { (target / norm) as f32 } else { 0.0 };
    Ok(TextState::new(tensor::scale(&dir, k)?)?)
}

fn rms(delta: &Tensor, rows: impl Iterator<Item = usize>) -> f64 {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for r in rows {
        for &v in delta.row(r) {
            sum += (v as f64) * (v as f64);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Change of the positive-branch output when regional state `region` is
/// replaced by a perturbed state, split into RMS inside the region and RMS
/// over the remaining rows.
pub fn regional_influence_score(
    stack: &Stack,
    masks: &[RegionMask],
    cond: &Conditioning,
    region: usize,
    seed: RngSeed,
    probe: &InfluenceProbe,
) -> Result<InfluenceScore> {
    if region >= cond.regional.len() || region >= masks.len() {
        return Err(MetricError::Region {
            region,
            count: cond.regional.len().min(masks.len()),
        });
    }
    let mut perturbed = cond.clone();
    perturbed.regional[region] = perturb_state(&cond.regional[region], seed)?;
    let (base, moved) = par::join(
        || stack.forward(&probe.latent, probe.timestep, cond, masks),
        || stack.forward(&probe.latent, probe.timestep, &perturbed, masks),
    );
    let delta = tensor::sub(&moved?, &base?)?;
    let mask = &masks[region];
    let inside = rms(&delta, (0..delta.rows()).filter(|&p| mask.contains(p)));
    let outside = rms(&delta, (0..delta.rows()).filter(|&p| !mask.contains(p)));
    Ok(InfluenceScore::from_parts(inside, outside))
}

/// [`regional_influence_score`] for every region, sharing one unperturbed
/// forward pass. Region `j` is perturbed with `seed` forked `j + 1` times.
pub fn regional_influence_scores(
    stack: &Stack,
    masks: &[RegionMask],
    cond: &Conditioning,
    seed: RngSeed,
    probe: &InfluenceProbe,
) -> Result<Vec<InfluenceScore>> {
    if cond.regional.len() != masks.len() {
        return Err(MetricError::Region {
            region: masks.len(),
            count: cond.regional.len(),
        });
    }
    let base = stack.forward(&probe.latent, probe.timestep, cond, masks)?;
    let mut seeds = crate::rng::SplitMix64::new(seed);
    let region_seeds: Vec<RngSeed> = (0..masks.len()).map(|_| seeds.fork()).collect();
    let scores = par::map_range(masks.len(), |j| -> Result<InfluenceScore> {
        let mut perturbed = cond.clone();
        perturbed.regional[j] = perturb_state(&cond.regional[j], region_seeds[j])?;
        let moved = stack.forward(&probe.latent, probe.timestep, &perturbed, masks)?;
        let delta = tensor::sub(&moved, &base)?;
        let inside = rms(&delta, (0..delta.rows()).filter(|&p| masks[j].contains(p)));
        let outside = rms(&delta, (0..delta.rows()).filter(|&p| !masks[j].contains(p)));
        Ok(InfluenceScore::from_parts(inside, outside))
    });
    scores.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::StackConfig;
    use crate::regions::{divide_regions, Axis, LatentGrid, RegionSpec};
    use crate::attention::AttentionMode;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut rng = crate::rng::SplitMix64::new(RngSeed(seed));
        let values = (0..h * w * c).map(|_| rng.next_open01()).collect();
        ImageBuffer::new(h, w, c, values).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(4, 4, 1, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let zero = ImageBuffer::filled(4, 4, 3, 0.0).unwrap();
        let one = ImageBuffer::filled(4, 4, 3, 1.0).unwrap();
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
        assert_eq!(metric_json(f64::INFINITY), Value::from("inf"));
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let a = img(5, 7, 3, 2);
        let b = img(5, 7, 3, 3);
        let n = a.values().len() as f64;
        let mse: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        let direct = -10.0 * mse.log10();
        assert!((psnr(&a, &b).unwrap() - direct).abs() < 1e-6);
    }

    #[test]
    fn psnr_dimension_mismatch() {
        assert!(matches!(
            psnr(&img(2, 2, 1, 0), &img(2, 3, 1, 0)),
            Err(MetricError::Image(ImageError::Mismatch { .. }))
        ));
    }

    #[test]
    fn ssim_identity_and_window_guard() {
        let a = img(10, 9, 3, 4);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(matches!(ssim(&img(7, 9, 1, 0), &img(7, 9, 1, 0)), Err(MetricError::TooSmall { .. })));
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        for (ma, mb) in [(0.2, 0.7), (0.0, 1.0), (0.5, 0.5), (0.9, 0.1)] {
            let a = ImageBuffer::filled(9, 11, 1, ma).unwrap();
            let b = ImageBuffer::filled(9, 11, 1, mb).unwrap();
            let closed = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
            assert!((ssim(&a, &b).unwrap() - closed).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_checkerboard_vs_negation() {
        // Each 8x8 window of a 0/1 checkerboard has mean 1/2 and variance
        // 1/4; the negation has covariance -1/4 with it.
        let a = ImageBuffer::from_fn(8, 8, 1, |y, x, _| ((y + x) % 2) as f64).unwrap();
        let b = a.negated();
        let lum = (2.0 * 0.25 + SSIM_C1) / (0.5 + SSIM_C1);
        let cs = (-0.5 + SSIM_C2) / (0.5 + SSIM_C2);
        assert!((ssim(&a, &b).unwrap() - lum * cs).abs() < 1e-12);
    }

    #[test]
    fn registry_reports() {
        let reg = MetricRegistry::default();
        assert_eq!(reg.names().collect::<Vec<_>>(), ["psnr", "ssim"]);
        let a = img(8, 8, 1, 5);
        let mut report = reg.evaluate(&a, &a).unwrap();
        report.insert("lpips", 0.25);
        let j = report.to_json();
        assert_eq!(j["psnr"], "inf");
        assert_eq!(j["ssim"], 1.0);
        assert_eq!(j["lpips"], 0.25);
        assert!(matches!(reg.compute("fid", &a, &a), Err(MetricError::UnknownMetric(_))));
    }

    proptest! {
        #[test]
        fn psnr_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = img(3, 4, 1, s1);
            let b = img(3, 4, 1, s2);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }

        #[test]
        fn ssim_self_is_one(seed in any::<u64>(), c in prop::sample::select(vec![1usize, 3])) {
            let a = img(8, 9, c, seed);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    fn tiny_setup(num_blocks: usize, injected: &[usize]) -> (Stack, Vec<RegionMask>, Conditioning, InfluenceProbe) {
        let cfg = StackConfig {
            num_blocks,
            injected: injected.iter().copied().collect(),
            mode: AttentionMode::RegionOutputMasked,
            d_model: 16,
            heads: 2,
            head_dim: 8,
            seed: RngSeed(3),
            weight_scale: 0.2,
        };
        let stack = Stack::build(cfg).unwrap();
        let grid = LatentGrid::new(4, 4).unwrap();
        let masks = divide_regions(RegionSpec { axis: Axis::Height, count: 2 }, grid).unwrap();
        let state = |s| TextState::new(tensor::seeded_normal(vec![crate::text::STATE_LEN, 16], RngSeed(s), 1.0).unwrap()).unwrap();
        let cond = Conditioning::new(vec![state(10), state(11)], state(12), state(13)).unwrap();
        let probe = InfluenceProbe {
            latent: tensor::seeded_normal(vec![16, 16], RngSeed(99), 1.0).unwrap(),
            timestep: 0.5,
        };
        (stack, masks, cond, probe)
    }

    #[test]
    fn no_injection_scores_zero() {
        let (stack, masks, cond, probe) = tiny_setup(3, &[]);
        let s = regional_influence_score(&stack, &masks, &cond, 0, RngSeed(1), &probe).unwrap();
        assert_eq!(s, InfluenceScore { inside: 0.0, outside: 0.0, ratio: 0.0 });
    }

    #[test]
    fn last_block_injection_is_local() {
        let (stack, masks, cond, probe) = tiny_setup(3, &[2]);
        for j in 0..2 {
            let s = regional_influence_score(&stack, &masks, &cond, j, RngSeed(7), &probe).unwrap();
            assert!(s.inside > 0.0);
            assert_eq!(s.outside, 0.0);
        }
    }

    #[test]
    fn perturbation_keeps_norm() {
        let (_, _, cond, _) = tiny_setup(1, &[]);
        let p = perturb_state(&cond.regional[0], RngSeed(4)).unwrap();
        let (a, b) = (cond.regional[0].values().frobenius_norm(), p.values().frobenius_norm());
        assert!((a - b).abs() / a < 1e-5);
        assert!(p.values().max_abs_diff(cond.regional[0].values()).unwrap() > 0.0);
    }

    #[test]
    fn batched_scores_agree_with_single() {
        let (stack, masks, cond, probe) = tiny_setup(3, &[0, 1, 2]);
        let all = regional_influence_scores(&stack, &masks, &cond, RngSeed(9), &probe).unwrap();
        let mut seeds = crate::rng::SplitMix64::new(RngSeed(9));
        for (j, s) in all.iter().enumerate() {
            let single = regional_influence_score(&stack, &masks, &cond, j, seeds.fork(), &probe).unwrap();
            assert_eq!(*s, single);
            assert!(s.ratio > 0.0);
        }
    }

    #[test]
    fn region_out_of_range() {
        let (stack, masks, cond, probe) = tiny_setup(1, &[]);
        assert!(matches!(
            regional_influence_score(&stack, &masks, &cond, 2, RngSeed(0), &probe),
            Err(MetricError::Region { .. })
        ));
    }
}
