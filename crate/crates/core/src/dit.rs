//! A simplified DiT stack whose cross-attention slots can be switched, block
//! by block, between standard cross-attention and region attention.
//!
//! Block layout (pre-norm, residual around each sublayer):
//!
//! ```text
//! x = x + SelfAttn(mod₁(LN₁(x)))
//! x = x + CrossAttn(mod₂(LN₂(x)), text)
//! x = x + FFN(mod₃(LN₃(x)))            FFN: d → 4d → d with GELU
//! ```
//!
//! `modₖ(h) = h ⊙ (1 + scaleₖ) + shiftₖ`, where the six vectors come from
//! one affine map of a 16-dim sinusoidal timestep embedding.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, AttentionError, AttentionMode, CrossAttnWeights};
use crate::fixture::{self, FixtureError};
use crate::regions::RegionMask;
use crate::rng::{NormalStream, RngSeed, SplitMix64};
use crate::tensor::{self, normal_from_stream, Tensor, TensorError, LAYER_NORM_EPS};
use crate::text::TextState;

pub const TIME_EMBED_DIM: usize = 16;
pub const DEFAULT_NUM_BLOCKS: usize = 39;

#[derive(Debug, Error)]
pub enum StackError {
    #[error("invalid stack config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("block {index}: {source}")]
    Block {
        index: usize,
        #[source]
        source: AttentionError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, StackError>;

/// Which blocks get region attention when `k` of them are injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    DeepestFirst,
    ShallowestFirst,
}

impl Placement {
    pub fn injected(self, k: usize, num_blocks: usize) -> Result<BTreeSet<usize>> {
        if k > num_blocks {
            return Err(StackError::Config(format!(
                "cannot inject {k} of {num_blocks} blocks"
            )));
        }
        Ok(match self {
            Placement::DeepestFirst => (num_blocks - k..num_blocks).collect(),
            Placement::ShallowestFirst => (0..k).collect(),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::DeepestFirst => "deepest-first",
            Placement::ShallowestFirst => "shallowest-first",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub num_blocks: usize,
    pub injected: BTreeSet<usize>,
    pub mode: AttentionMode,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub seed: RngSeed,
    pub weight_scale: f32,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            num_blocks: DEFAULT_NUM_BLOCKS,
            injected: (0..DEFAULT_NUM_BLOCKS).collect(),
            mode: AttentionMode::RegionOutputMasked,
            d_model: 64,
            heads: 4,
            head_dim: 16,
            seed: RngSeed(0),
            weight_scale: 0.02,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(StackError::Config("num_blocks must be ≥ 1".into()));
        }
        if let Some(&bad) = self.injected.iter().find(|&&i| i >= self.num_blocks) {
            return Err(StackError::Config(format!(
                "injected block {bad} outside 0..{}",
                self.num_blocks
            )));
        }
        if !self.injected.is_empty() && self.mode == AttentionMode::Standard {
            return Err(StackError::Config(
                "injected blocks need a region mode, not `standard`".into(),
            ));
        }
        if self.d_model == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(StackError::Config("d_model, heads and head_dim must be ≥ 1".into()));
        }
        if !(self.weight_scale > 0.0 && self.weight_scale.is_finite()) {
            return Err(StackError::Config("weight_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Text conditioning for one denoising call.
///
/// `regional[i]` conditions region `i` in injected blocks; `merged` is the
/// single state of all positive prompts merged into one instruction, used by
/// standard blocks; `negative` drives the unconditional branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub regional: Vec<TextState>,
    pub merged: TextState,
    pub negative: TextState,
}

impl Conditioning {
    pub fn new(regional: Vec<TextState>, merged: TextState, negative: TextState) -> Result<Self> {
        if regional.is_empty() {
            return Err(StackError::Input("no regional states".into()));
        }
        let d = merged.d_model();
        if regional.iter().chain([&negative]).any(|s| s.d_model() != d) {
            return Err(StackError::Input("text states disagree on d_model".into()));
        }
        Ok(Conditioning {
            regional,
            merged,
            negative,
        })
    }

    /// From a batch of N+1 states (positives then negative) plus the merged state.
    pub fn from_batch(mut states: Vec<TextState>, merged: TextState) -> Result<Self> {
        if states.len() < 2 {
            return Err(StackError::Input(format!(
                "expected N+1 ≥ 2 states, got {}",
                states.len()
            )));
        }
        let negative = states.pop().expect("len ≥ 2");
        Self::new(states, merged, negative)
    }

    pub fn d_model(&self) -> usize {
        self.merged.d_model()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn unit(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::filled(vec![d], 1.0).expect("finite"),
            bias: Tensor::zeros(vec![d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiTBlock {
    pub self_attn: CrossAttnWeights,
    pub cross_attn: CrossAttnWeights,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
    pub norms: [LayerNormParams; 3],
    pub time_w: Tensor,
    pub time_b: Tensor,
}

/// What the cross-attention slot of a block attends to.
enum CrossInput<'a> {
    Standard(&'a TextState),
    Region {
        masks: &'a [RegionMask],
        states: &'a [TextState],
        mode: AttentionMode,
    },
}

impl DiTBlock {
    fn seeded(cfg: &StackConfig, seed: RngSeed) -> Result<Self> {
        let d = cfg.d_model;
        let s = cfg.weight_scale;
        let mut st = NormalStream::new(seed);
        let self_attn = CrossAttnWeights::seeded(d, cfg.heads, cfg.head_dim, &mut st, s)?;
        let cross_attn = CrossAttnWeights::seeded(d, cfg.heads, cfg.head_dim, &mut st, s)?;
        let ff1_w = normal_from_stream(vec![d, 4 * d], &mut st, s)?;
        let ff2_w = normal_from_stream(vec![4 * d, d], &mut st, s)?;
        let time_w = normal_from_stream(vec![TIME_EMBED_DIM, 6 * d], &mut st, s)?;
        Ok(DiTBlock {
            self_attn,
            cross_attn,
            ff1_w,
            ff1_b: Tensor::zeros(vec![4 * d]),
            ff2_w,
            ff2_b: Tensor::zeros(vec![d]),
            norms: [
                LayerNormParams::unit(d),
                LayerNormParams::unit(d),
                LayerNormParams::unit(d),
            ],
            time_w,
            time_b: Tensor::zeros(vec![6 * d]),
        })
    }

    /// Parameters in dump order.
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = Vec::with_capacity(29);
        v.extend(self.self_attn.tensors());
        v.extend(self.cross_attn.tensors());
        v.extend([&self.ff1_w, &self.ff1_b, &self.ff2_w, &self.ff2_b]);
        for n in &self.norms {
            v.extend([&n.gain, &n.bias]);
        }
        v.extend([&self.time_w, &self.time_b]);
        v
    }

    fn param_shapes(cfg: &StackConfig) -> Vec<Vec<usize>> {
        let d = cfg.d_model;
        let inner = cfg.heads * cfg.head_dim;
        let attn = [
            vec![d, inner],
            vec![inner],
            vec![d, inner],
            vec![inner],
            vec![d, inner],
            vec![inner],
            vec![inner, d],
            vec![d],
        ];
        let mut shapes: Vec<Vec<usize>> = attn.iter().chain(attn.iter()).cloned().collect();
        shapes.extend([vec![d, 4 * d], vec![4 * d], vec![4 * d, d], vec![d]]);
        for _ in 0..3 {
            shapes.extend([vec![d], vec![d]]);
        }
        shapes.extend([vec![TIME_EMBED_DIM, 6 * d], vec![6 * d]]);
        shapes
    }

    fn from_flat(cfg: &StackConfig, flat: &[f32]) -> Result<Self> {
        let shapes = Self::param_shapes(cfg);
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(StackError::Input(format!(
                "block dump holds {} values, config needs {total}",
                flat.len()
            )));
        }
        let mut off = 0;
        let mut parts = Vec::with_capacity(shapes.len());
        for s in shapes {
            let n: usize = s.iter().product();
            parts.push(Tensor::new(s, flat[off..off + n].to_vec())?);
            off += n;
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().expect("shape list length");
        let attn = |next: &mut dyn FnMut() -> Tensor| {
            let (wq, bq, wk, bk, wv, bv, wo, bo) =
                (next(), next(), next(), next(), next(), next(), next(), next());
            CrossAttnWeights::new(cfg.heads, cfg.head_dim, wq, bq, wk, bk, wv, bv, wo, bo)
        };
        let self_attn = attn(&mut next)?;
        let cross_attn = attn(&mut next)?;
        let (ff1_w, ff1_b, ff2_w, ff2_b) = (next(), next(), next(), next());
        let mut norm = || LayerNormParams {
            gain: next(),
            bias: next(),
        };
        let norms = [norm(), norm(), norm()];
        let (time_w, time_b) = (next(), next());
        Ok(DiTBlock {
            self_attn,
            cross_attn,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
            norms,
            time_w,
            time_b,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, cross: &CrossInput<'_>) -> std::result::Result<Tensor, AttentionError> {
        let d = x.cols();
        let modv = tensor::linear(temb, &self.time_w, &self.time_b)?;
        let m = modv.data();
        let chunk = |k: usize| &m[k * d..(k + 1) * d];

        let h = self.normed(x, 0, chunk(0), chunk(1))?;
        let x = tensor::add(x, &attention::self_attention(&h, &self.self_attn)?)?;

        let h = self.normed(&x, 1, chunk(2), chunk(3))?;
        let c = match cross {
            CrossInput::Standard(state) => attention::cross_attention(&h, state.values(), &self.cross_attn)?,
            CrossInput::Region { masks, states, mode } => {
                attention::region_attention(&h, masks, states, &self.cross_attn, *mode)?
            }
        };
        let x = tensor::add(&x, &c)?;

        let h = self.normed(&x, 2, chunk(4), chunk(5))?;
        let f = tensor::gelu(&tensor::linear(&h, &self.ff1_w, &self.ff1_b)?)?;
        let f = tensor::linear(&f, &self.ff2_w, &self.ff2_b)?;
        Ok(tensor::add(&x, &f)?)
    }

    fn normed(&self, x: &Tensor, k: usize, scale: &[f32], shift: &[f32]) -> std::result::Result<Tensor, TensorError> {
        let n = &self.norms[k];
        let h = tensor::layer_norm(x, &n.gain, &n.bias, LAYER_NORM_EPS)?;
        let d = scale.len();
        let data: Vec<f32> = h
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (1.0 + scale[i % d]) + shift[i % d])
            .collect();
        Tensor::new(h.shape().to_vec(), data)
    }
}

/// Sinusoidal embedding of a (sigma-valued) timestep: cosines then sines of
/// `1000·t·10000^(-i/8)`, `i = 0..8`.
pub fn timestep_embedding(t: f32) -> Result<Tensor> {
    let half = TIME_EMBED_DIM / 2;
    let mut out = vec![0.0f32; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t as f64 * freq;
        out[i] = arg.cos() as f32;
        out[half + i] = arg.sin() as f32;
    }
    Ok(Tensor::new(vec![1, TIME_EMBED_DIM], out)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: StackConfig,
    blocks: Vec<String>,
}

/// An immutable, shareable stack of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    config: StackConfig,
    blocks: Vec<DiTBlock>,
}

impl Stack {
    /// Build a stack with independently seeded blocks. Block weights depend
    /// only on the seed and the block index, never on the injection set.
    pub fn build(config: StackConfig) -> Result<Self> {
        config.validate()?;
        let mut seeds = SplitMix64::new(config.seed);
        let blocks = (0..config.num_blocks)
            .map(|_| DiTBlock::seeded(&config, seeds.fork()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Stack { config, blocks })
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[DiTBlock] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn injected_count(&self) -> usize {
        self.config.injected.len()
    }

    pub fn is_injected(&self, block: usize) -> bool {
        self.config.injected.contains(&block)
    }

    /// Attention mode used by the positive branch of `block`.
    pub fn block_mode(&self, block: usize) -> Option<AttentionMode> {
        (block < self.blocks.len()).then(|| {
            if self.is_injected(block) {
                self.config.mode
            } else {
                AttentionMode::Standard
            }
        })
    }

    /// The same weights with a different injection set.
    pub fn with_injected(&self, injected: BTreeSet<usize>) -> Result<Self> {
        let config = StackConfig {
            injected,
            ..self.config.clone()
        };
        config.validate()?;
        Ok(Stack {
            config,
            blocks: self.blocks.clone(),
        })
    }

    fn check_latent(&self, latent: &Tensor) -> Result<()> {
        let (_, d) = latent.dims2("latent")?;
        if d != self.config.d_model {
            return Err(StackError::Input(format!(
                "latent width {d} does not match d_model {}",
                self.config.d_model
            )));
        }
        Ok(())
    }

    /// Positive branch: region attention in injected blocks, standard
    /// cross-attention on the merged state elsewhere.
    pub fn forward(&self, latent: &Tensor, timestep: f32, cond: &Conditioning, masks: &[RegionMask]) -> Result<Tensor> {
        self.check_latent(latent)?;
        let temb = timestep_embedding(timestep)?;
        let mut x = latent.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let cross = if self.is_injected(i) {
                CrossInput::Region {
                    masks,
                    states: &cond.regional,
                    mode: self.config.mode,
                }
            } else {
                CrossInput::Standard(&cond.merged)
            };
            x = block
                .forward(&x, &temb, &cross)
                .map_err(|source| StackError::Block { index: i, source })?;
        }
        Ok(x)
    }

    /// Negative branch: standard cross-attention on the negative state in
    /// every block.
    pub fn forward_negative(&self, latent: &Tensor, timestep: f32, negative: &TextState) -> Result<Tensor> {
        self.check_latent(latent)?;
        let temb = timestep_embedding(timestep)?;
        let mut x = latent.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block
                .forward(&x, &temb, &CrossInput::Standard(negative))
                .map_err(|source| StackError::Block { index: i, source })?;
        }
        Ok(x)
    }

    /// Write `manifest.json` plus one fixture file per block.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| StackError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut names = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let name = format!("block_{i:03}.txt");
            let flat: Vec<f32> = b.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
            let t = Tensor::new(vec![flat.len()], flat)?;
            fixture::write_tensor(dir.join(&name), &t, &[("block", &i.to_string())])?;
            names.push(name);
        }
        let manifest = Manifest {
            config: self.config.clone(),
            blocks: names,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|source| StackError::Io { path, source })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|source| StackError::Io { path, source })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.config.validate()?;
        if manifest.blocks.len() != manifest.config.num_blocks {
            return Err(StackError::Input(format!(
                "manifest lists {} blocks, config says {}",
                manifest.blocks.len(),
                manifest.config.num_blocks
            )));
        }
        let blocks = manifest
            .blocks
            .iter()
            .map(|name| {
                let t = fixture::read_tensor(dir.join(name))?;
                DiTBlock::from_flat(&manifest.config, t.data())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Stack {
            config: manifest.config,
            blocks,
        })
    }
}
