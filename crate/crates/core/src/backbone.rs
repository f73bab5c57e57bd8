//! Causal transformer over flattened grid sequences.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::kernels::{self, RopeAngles};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::tokens::PrefixLayout;

pub const ROPE_BASE: f64 = 10_000.0;

fn default_rope_base() -> f64 {
    ROPE_BASE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ffn_inner: usize,
    /// Image vocabulary size `V`.
    pub image_vocab: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub aux_tokens: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

/// SwiGLU width: `8d/3` rounded to the nearest multiple of 64 (at least 64).
pub fn swiglu_inner(hidden: usize) -> usize {
    let raw = 8.0 * hidden as f64 / 3.0;
    (((raw / 64.0).round() as usize).max(1)) * 64
}

impl BackboneConfig {
    /// 24 layers, width 768, 16 heads over a 16x16 grid of a 4096-token
    /// codebook with 1000 classes.
    pub fn ar_b() -> Self {
        BackboneConfig {
            num_layers: 24,
            hidden: 768,
            num_heads: 16,
            ffn_inner: swiglu_inner(768),
            image_vocab: 4096,
            num_classes: 1000,
            aux_tokens: 16,
            grid_height: 16,
            grid_width: 16,
            rope_base: ROPE_BASE,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads.max(1)
    }

    pub fn prefix_layout(&self) -> PrefixLayout {
        PrefixLayout {
            num_classes: self.num_classes,
            aux_tokens: self.aux_tokens,
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_layout().len()
    }

    pub fn grid_cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// Full sequence capacity `P + H*W`.
    pub fn seq_len(&self) -> usize {
        self.prefix_len() + self.grid_cells()
    }

    /// Image tokens, prefix tokens, and the sentinel.
    pub fn vocab_total(&self) -> usize {
        self.image_vocab + self.prefix_layout().vocab_size() + 1
    }

    pub fn sentinel(&self) -> u32 {
        (self.vocab_total() - 1) as u32
    }

    /// Global id of a local prefix id.
    pub fn prefix_token(&self, local: u32) -> u32 {
        self.image_vocab as u32 + local
    }

    /// Global-id prefix for a class, or the null class.
    pub fn prefix_tokens(&self, class_id: Option<usize>) -> Vec<u32> {
        self.prefix_layout()
            .prefix(class_id)
            .into_iter()
            .map(|p| self.prefix_token(p))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.num_heads == 0 || self.ffn_inner == 0 {
            return config_err("layers, width, heads and ffn width must be positive");
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return config_err(format!("hidden {} not divisible by {} heads", self.hidden, self.num_heads));
        }
        if !self.head_dim().is_multiple_of(4) {
            return config_err(format!(
                "head_dim {} must be a multiple of 4 so each grid axis gets whole rotary pairs",
                self.head_dim()
            ));
        }
        if self.image_vocab == 0 || self.num_classes == 0 || self.grid_cells() == 0 {
            return config_err("vocabulary, classes and grid must be non-empty");
        }
        if !(self.rope_base > 1.0) {
            return config_err("rope_base must exceed 1");
        }
        Ok(())
    }

    /// Rotation angles (one per interleaved pair) for a sequence position.
    ///
    /// Prefix positions rotate every pair by `p * base^(-2i/hd)`. Image
    /// positions rotate the first half of the pairs by the row index and the
    /// second half by the column index, each at `base^(-4i/hd)`.
    pub fn rope2d(&self, position: usize) -> Result<Vec<f64>> {
        let hd = self.head_dim();
        let p = self.prefix_len();
        if position >= self.seq_len() {
            return Err(Error::OutOfRange {
                what: "rope position",
                value: position,
                limit: self.seq_len(),
            });
        }
        if position < p {
            return Ok((0..hd / 2)
                .map(|i| position as f64 * self.rope_base.powf(-2.0 * i as f64 / hd as f64))
                .collect());
        }
        let idx = position - p;
        let (row, col) = (idx / self.grid_width, idx % self.grid_width);
        let quarter = hd / 4;
        let freq = |i: usize| self.rope_base.powf(-4.0 * i as f64 / hd as f64);
        Ok((0..quarter)
            .map(|i| row as f64 * freq(i))
            .chain((0..quarter).map(|i| col as f64 * freq(i)))
            .collect())
    }

    pub fn rope_table<T: Real>(&self) -> Result<RopeAngles<T>> {
        let rows = (0..self.seq_len()).map(|p| self.rope2d(p)).collect::<Result<Vec<_>>>()?;
        Ok(RopeAngles::from_angles(&rows))
    }

    /// Closed-form backbone parameter count: embeddings, blocks, final norm
    /// and the untied head.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        let per_layer = 4 * d * d + 3 * d * self.ffn_inner + 2 * d + 2 * self.head_dim();
        2 * self.vocab_total() * d + self.num_layers * per_layer + d
    }
}

/// Weights of one transformer block. Matrices are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub attn_norm: P,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub q_norm: P,
    pub k_norm: P,
    pub ffn_norm: P,
    pub w_gate: P,
    pub w_up: P,
    pub w_down: P,
}

impl BlockParams<Var> {
    /// Attention and feed-forward sublayers over the whole sequence.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        cfg: &BackboneConfig,
        rope: &Arc<RopeAngles<T>>,
        x: Var,
    ) -> Result<Var> {
        let d = cfg.hidden;
        let hd = cfg.head_dim();
        let xn = tape.rms_norm(x, self.attn_norm, d)?;
        let q = tape.matmul(xn, self.wq)?;
        let k = tape.matmul(xn, self.wk)?;
        let v = tape.matmul(xn, self.wv)?;
        let q = tape.rms_norm(q, self.q_norm, hd)?;
        let k = tape.rms_norm(k, self.k_norm, hd)?;
        let q = tape.rope(q, rope, hd, 0)?;
        let k = tape.rope(k, rope, hd, 0)?;
        let a = tape.causal_attention(q, k, v, cfg.num_heads)?;
        let o = tape.matmul(a, self.wo)?;
        let x = tape.add(x, o)?;

        let xn = tape.rms_norm(x, self.ffn_norm, d)?;
        let gate = tape.matmul(xn, self.w_gate)?;
        let up = tape.matmul(xn, self.w_up)?;
        let gate = tape.silu(gate);
        let h = tape.mul(gate, up)?;
        let o = tape.matmul(h, self.w_down)?;
        tape.add(x, o)
    }
}

/// Cached keys (post-norm, post-rotary) and values of one block, one row of
/// width `d` per consumed position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockCache<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

impl<T: Real> BlockCache<T> {
    pub fn len(&self, d: usize) -> usize {
        self.keys.len() / d
    }
}

fn norm_row<T: Real>(x: &[T], scale: &[T], group: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); x.len() / group];
    kernels::rms_norm_row(x, scale, group, &mut out, &mut inv);
    out
}

impl<T: Real> BlockParams<Tensor<T>> {
    /// One block applied to the newest position, appending to `cache`.
    pub fn step(&self, cfg: &BackboneConfig, rope: &RopeAngles<T>, x: &mut [T], cache: &mut BlockCache<T>) {
        let d = cfg.hidden;
        let hd = cfg.head_dim();
        let pos = cache.len(d);
        let xn = norm_row(x, self.attn_norm.data(), d);
        let q = kernels::matmul(&xn, self.wq.data(), 1, d, d);
        let k = kernels::matmul(&xn, self.wk.data(), 1, d, d);
        let v = kernels::matmul(&xn, self.wv.data(), 1, d, d);
        let mut q = norm_row(&q, self.q_norm.data(), hd);
        let mut k = norm_row(&k, self.k_norm.data(), hd);
        rope.apply(&mut q, hd, pos, false);
        rope.apply(&mut k, hd, pos, false);
        cache.keys.extend_from_slice(&k);
        cache.values.extend_from_slice(&v);
        let mut probs = vec![T::zero(); cfg.num_heads * (pos + 1)];
        let mut a = vec![T::zero(); d];
        kernels::attention_row(&q, &cache.keys, &cache.values, pos, cfg.num_heads, &mut probs, &mut a);
        let o = kernels::matmul(&a, self.wo.data(), 1, d, d);
        x.iter_mut().zip(&o).for_each(|(xi, &oi)| *xi += oi);

        let f = cfg.ffn_inner;
        let xn = norm_row(x, self.ffn_norm.data(), d);
        let gate = kernels::matmul(&xn, self.w_gate.data(), 1, d, f);
        let up = kernels::matmul(&xn, self.w_up.data(), 1, d, f);
        let h: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
        let o = kernels::matmul(&h, self.w_down.data(), 1, f, d);
        x.iter_mut().zip(&o).for_each(|(xi, &oi)| *xi += oi);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            num_layers: 2,
            hidden: 16,
            num_heads: 2,
            ffn_inner: 48,
            image_vocab: 32,
            num_classes: 4,
            aux_tokens: 0,
            grid_height: 4,
            grid_width: 4,
            rope_base: ROPE_BASE,
        }
    }

    #[test]
    fn swiglu_width() {
        assert_eq!(swiglu_inner(768), 2048);
        assert_eq!(swiglu_inner(64), 192);
    }

    #[test]
    fn vocabulary_layout() {
        let c = small();
        assert_eq!(c.prefix_len(), 1);
        assert_eq!(c.vocab_total(), 32 + 5 + 1);
        assert_eq!(c.sentinel(), 37);
        assert_eq!(c.prefix_tokens(None), vec![36]);
        assert_eq!(c.prefix_tokens(Some(2)), vec![34]);
    }

    #[test]
    fn validation() {
        assert!(small().validate().is_ok());
        let mut c = small();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 8; // head_dim 2
        assert!(c.validate().is_err());
    }

    #[test]
    fn rope_origin_is_identity_on_image() {
        let c = small();
        let a = c.rope2d(c.prefix_len()).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
        assert!(c.rope2d(c.seq_len()).is_err());
    }

    #[test]
    fn rope_uses_row_then_col() {
        let c = small();
        // row 1, col 2
        let a = c.rope2d(c.prefix_len() + 6).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a[0], 1.0);
        assert_eq!(a[2], 2.0);
        assert!((a[1] - ROPE_BASE.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn reference_config_size() {
        let c = BackboneConfig::ar_b();
        c.validate().unwrap();
        let n = c.param_count() as f64;
        assert!((n / 177e6 - 1.0).abs() < 0.03, "{n}");
    }
}
