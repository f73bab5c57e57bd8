//! Incremental decoding with cached keys/values and classifier-free guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BlockCache;
use crate::engram::ConvState;
use crate::error::{config_err, Error, Result};
use crate::model::{EngramModel, ForwardOptions};
use crate::numerics::kernels;
use crate::numerics::Real;
use crate::rng;
use crate::tokens::TokenGrid;

/// Decoding state of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCache<T> {
    pub blocks: Vec<BlockCache<T>>,
    /// Convolution history per layer (`None` where there is no module).
    pub conv: Vec<Option<ConvState<T>>>,
    /// Every token consumed so far, global ids.
    pub tokens: Vec<u32>,
}

impl<T: Real> KVCache<T> {
    pub fn new(model: &EngramModel<T>) -> Self {
        let layers = model.backbone().num_layers;
        KVCache {
            blocks: vec![BlockCache::default(); layers],
            conv: (0..layers)
                .map(|l| model.config().engram_at(l).map(|_| ConvState::default()))
                .collect(),
            tokens: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Consume one token and return next-token logits.
///
/// `opts.hash_tokens`, when set, supplies the tokens read by context
/// extraction in place of the consumed ones.
pub fn step<T: Real>(model: &EngramModel<T>, cache: &mut KVCache<T>, token: u32, opts: &ForwardOptions) -> Result<Vec<T>> {
    let b = model.backbone();
    let pos = cache.tokens.len();
    if pos >= b.seq_len() {
        return Err(Error::OutOfRange {
            what: "decode position",
            value: pos,
            limit: b.seq_len(),
        });
    }
    if token as usize >= b.vocab_total() {
        return Err(Error::OutOfRange {
            what: "token id",
            value: token as usize,
            limit: b.vocab_total(),
        });
    }
    cache.tokens.push(token);
    let p = b.prefix_len();
    let d = b.hidden;
    let params = &model.params;
    let mut x = params.tok_emb.row(token as usize).to_vec();
    for l in 0..b.num_layers {
        if let (Some(ep), Some(ec)) = (&params.engram[l], model.config().engram_at(l)) {
            if !opts.bypass_engram && pos >= p {
                let tokens = opts.hash_tokens.unwrap_or(&cache.tokens);
                let idx = model.bucket_indices(l, tokens, pos - p, 1, model.collapsed(l, opts))?;
                let mut e = Vec::with_capacity(ec.d_mem());
                for (table, rows) in ep.tables.iter().zip(&idx) {
                    e.extend_from_slice(table.row(rows[0]));
                }
                let state = cache.conv[l].as_mut().expect("state exists for every module");
                x = ep.fuse_step(&x, &e, opts.gate_clamp.or(ec.gate_clamp), state);
            }
        }
        params.layers[l].step(b, model.rope(), &mut x, &mut cache.blocks[l]);
    }
    let mut xn = vec![T::zero(); d];
    kernels::rms_norm_row(&x, params.final_norm.data(), d, &mut xn, &mut [T::zero()]);
    Ok(kernels::matmul(&xn, params.lm_head.data(), 1, d, b.vocab_total()))
}

/// Guidance scale at image step `t` of `total`: a cosine-power ramp from 1 to
/// `cfg_max`.
pub fn cfg_schedule(t: usize, total: usize, cfg_max: f64, alpha: f64) -> f64 {
    if total < 2 {
        return cfg_max;
    }
    let u = t.min(total - 1) as f64 / (total - 1) as f64;
    let ramp = 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
    1.0 + (cfg_max - 1.0) * ramp.max(0.0).powf(alpha)
}

fn default_temperature() -> f64 {
    1.0
}

fn default_cfg_max() -> f64 {
    16.0
}

fn default_cfg_alpha() -> f64 {
    1.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default = "default_cfg_max")]
    pub cfg_max: f64,
    #[serde(default = "default_cfg_alpha")]
    pub cfg_alpha: f64,
    #[serde(default)]
    pub gate_clamp: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            top_k: None,
            cfg_max: 16.0,
            cfg_alpha: 1.8,
            gate_clamp: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return config_err(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.cfg_max >= 1.0) || !self.cfg_alpha.is_finite() || self.cfg_alpha <= 0.0 {
            return config_err("cfg_max must be >= 1 and cfg_alpha positive");
        }
        if self.top_k == Some(0) {
            return config_err("top_k must be positive");
        }
        if let Some(c) = self.gate_clamp {
            if !(0.0..=1.0).contains(&c) {
                return config_err(format!("gate_clamp {c} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Guided logits `null + scale * (cond - null)`; a unit scale returns the
/// conditional logits unchanged.
pub fn guide<T: Real>(cond: &[T], null: &[T], scale: f64) -> Vec<f64> {
    if scale == 1.0 {
        return cond.iter().map(|v| v.as_f64()).collect();
    }
    cond.iter()
        .zip(null)
        .map(|(&c, &n)| {
            let (c, n) = (c.as_f64(), n.as_f64());
            n + scale * (c - n)
        })
        .collect()
}

/// Draw from `softmax(logits / temperature)` restricted to the `top_k`
/// largest entries.
pub fn draw(logits: &[f64], temperature: f64, top_k: Option<usize>, rng: &mut rng::StreamRng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    if let Some(k) = top_k {
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(k.max(1));
    }
    let max = order.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    *order.last().expect("non-empty vocabulary")
}

/// Generate one grid for `class_id`. Sampling is restricted to image tokens;
/// `index` selects an independent random stream under the sampler seed.
pub fn sample<T: Real>(model: &EngramModel<T>, class_id: usize, sampler: &SamplerConfig, index: u64) -> Result<TokenGrid> {
    sampler.validate()?;
    let b = model.backbone();
    if class_id >= b.num_classes {
        return Err(Error::OutOfRange {
            what: "class id",
            value: class_id,
            limit: b.num_classes,
        });
    }
    let opts = ForwardOptions {
        gate_clamp: sampler.gate_clamp,
        ..ForwardOptions::default()
    };
    let total = b.grid_cells();
    let guided = sampler.cfg_max != 1.0;
    let mut rng = rng::stream(sampler.seed, "sample", &[class_id as u64, index]);

    let mut cond = KVCache::new(model);
    let mut null = KVCache::new(model);
    let mut lc = Vec::new();
    let mut ln = Vec::new();
    for (&tc, &tn) in b.prefix_tokens(Some(class_id)).iter().zip(&b.prefix_tokens(None)) {
        lc = step(model, &mut cond, tc, &opts)?;
        if guided {
            ln = step(model, &mut null, tn, &opts)?;
        }
    }
    let mut cells = Vec::with_capacity(total);
    for t in 0..total {
        let image = &lc[..b.image_vocab];
        let logits = if guided {
            guide(image, &ln[..b.image_vocab], cfg_schedule(t, total, sampler.cfg_max, sampler.cfg_alpha))
        } else {
            image.iter().map(|v| v.as_f64()).collect()
        };
        let tok = draw(&logits, sampler.temperature, sampler.top_k, &mut rng) as u32;
        cells.push(tok);
        if t + 1 < total {
            lc = step(model, &mut cond, tok, &opts)?;
            if guided {
                ln = step(model, &mut null, tok, &opts)?;
            }
        }
    }
    TokenGrid::new(b.grid_height, b.grid_width, b.image_vocab, b.prefix_layout(), class_id, cells)
}
