//! Hash-addressed conditional memory fused into the residual stream.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::hashing::{BankSpec, BankVariant, TableMode};
use crate::numerics::kernels;
use crate::numerics::{Real, Tape, Tensor, Var};

pub const CONV_TAPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngramModuleConfig {
    pub layer_index: usize,
    pub banks: Vec<BankSpec>,
    pub num_heads: usize,
    pub d_head: usize,
    pub table_size: usize,
    #[serde(default)]
    pub gate_clamp: Option<f64>,
    pub layerscale_init: f64,
    #[serde(default = "default_mode")]
    pub table_mode: TableMode,
}

fn default_mode() -> TableMode {
    TableMode::Learned
}

impl EngramModuleConfig {
    pub fn new(layer_index: usize, variant: BankVariant, num_heads: usize, d_head: usize, table_size: usize) -> Self {
        EngramModuleConfig {
            layer_index,
            banks: variant.banks(),
            num_heads,
            d_head,
            table_size,
            gate_clamp: None,
            layerscale_init: 1e-4,
            table_mode: TableMode::Learned,
        }
    }

    /// Modules at layers 0, 6, 12 and 18 with four heads of width 64 over
    /// 36715-row tables.
    pub fn reference_placement(variant: BankVariant) -> Vec<Self> {
        [0, 6, 12, 18]
            .into_iter()
            .map(|l| Self::new(l, variant, 4, 64, 36_715))
            .collect()
    }

    /// Width of the concatenated retrieval.
    pub fn d_mem(&self) -> usize {
        self.banks.len() * self.num_heads * self.d_head
    }

    pub fn num_tables(&self) -> usize {
        self.banks.len() * self.num_heads
    }

    pub fn uses_mlp(&self, hidden: usize) -> bool {
        self.d_mem() > hidden
    }

    /// Table rows across all banks and heads.
    pub fn memory_params(&self) -> usize {
        self.num_tables() * self.table_size * self.d_head
    }

    /// Projection, convolution, LayerScale and norm parameters.
    pub fn glue_params(&self, hidden: usize) -> usize {
        let d = hidden;
        let dm = self.d_mem();
        let w_v = if self.uses_mlp(d) { dm * d + d * d } else { dm * d };
        dm * d + w_v + CONV_TAPS * d + d + 3 * d
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.layer_index >= num_layers {
            return config_err(format!("engram layer {} beyond {num_layers} layers", self.layer_index));
        }
        if self.banks.is_empty() || self.num_heads == 0 || self.d_head == 0 || self.table_size == 0 {
            return config_err("engram module needs banks, heads, width and table rows");
        }
        for b in &self.banks {
            b.validate()?;
        }
        if self.banks.windows(2).any(|w| w[0].bank_id >= w[1].bank_id) {
            return config_err("banks must be listed in increasing bank_id order");
        }
        if let Some(c) = self.gate_clamp {
            if !(0.0..=1.0).contains(&c) {
                return config_err(format!("gate_clamp {c} outside [0, 1]"));
            }
        }
        if !self.layerscale_init.is_finite() {
            return config_err("layerscale_init must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValueProj<P> {
    Linear(P),
    /// `d_mem -> d -> d` with SiLU between.
    Mlp(P, P),
}

/// Parameters of one module. Tables are ordered bank-major: `tables[b * H + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EngramParams<P> {
    pub tables: Vec<P>,
    pub w_k: P,
    pub w_v: ValueProj<P>,
    /// `[d, CONV_TAPS]`; tap `CONV_TAPS - 1` multiplies the current position.
    pub conv: P,
    pub layerscale: P,
    pub norm_h: P,
    pub norm_key: P,
    pub norm_value: P,
}

fn gate_scale<T: Real>(d: usize) -> T {
    T::one() / T::from_f64(d as f64).sqrt()
}

impl EngramParams<Var> {
    fn value_proj<T: Real>(&self, tape: &mut Tape<T>, e: Var) -> Result<Var> {
        match &self.w_v {
            ValueProj::Linear(w) => tape.matmul(e, *w),
            ValueProj::Mlp(w1, w2) => {
                let h = tape.matmul(e, *w1)?;
                let h = tape.silu(h);
                tape.matmul(h, *w2)
            }
        }
    }

    /// Gates `[n, 1]` for hiddens `h [n, d]` and retrievals `e [n, d_mem]`.
    pub fn gate<T: Real>(&self, tape: &mut Tape<T>, h: Var, e: Var) -> Result<Var> {
        let d = tape.value(h).cols();
        let hn = tape.rms_norm(h, self.norm_h, d)?;
        let k = tape.matmul(e, self.w_k)?;
        let kn = tape.rms_norm(k, self.norm_key, d)?;
        let s = tape.row_dot(hn, kn)?;
        let s = tape.scale(s, gate_scale(d));
        Ok(tape.sigmoid(s))
    }

    /// Fuse retrievals into the image-position hiddens. A clamp replaces the
    /// gate at both places it is applied.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>, h: Var, e: Var, clamp: Option<f64>) -> Result<Var> {
        let (n, d) = (tape.value(h).rows(), tape.value(h).cols());
        if tape.value(e).rows() != n {
            return Err(Error::Shape {
                op: "engram fuse",
                lhs: tape.value(h).shape().to_vec(),
                rhs: tape.value(e).shape().to_vec(),
            });
        }
        let g = match clamp {
            Some(_) => None,
            None => Some(self.gate(tape, h, e)?),
        };
        let gated = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
            match (g, clamp) {
                (Some(g), _) => tape.mul_col(x, g),
                (None, Some(c)) => Ok(tape.scale(x, T::from_f64(c))),
                (None, None) => unreachable!("gate or clamp is always set"),
            }
        };
        let vb = self.value_proj(tape, e)?;
        let vt = gated(tape, vb)?;
        let vn = tape.rms_norm(vt, self.norm_value, d)?;
        let c = tape.causal_conv(vn, self.conv)?;
        let c = tape.silu(c);
        let v = tape.add(vb, c)?;
        let v = tape.mul_row(v, self.layerscale)?;
        let upd = gated(tape, v)?;
        tape.add(h, upd)
    }
}

/// Normalized gated values of the last `CONV_TAPS - 1` positions, oldest
/// first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvState<T> {
    pub history: Vec<Vec<T>>,
}

impl<T: Real> EngramParams<Tensor<T>> {
    pub fn d(&self) -> usize {
        self.layerscale.numel()
    }

    /// Value projection of one retrieved memory row.
    pub fn value_row(&self, e: &[T]) -> Vec<T> {
        let d = self.d();
        match &self.w_v {
            ValueProj::Linear(w) => kernels::matmul(e, w.data(), 1, e.len(), d),
            ValueProj::Mlp(w1, w2) => {
                let mid = w1.shape()[1];
                let h: Vec<T> = kernels::matmul(e, w1.data(), 1, e.len(), mid)
                    .into_iter()
                    .map(kernels::silu)
                    .collect();
                kernels::matmul(&h, w2.data(), 1, mid, d)
            }
        }
    }

    /// Gate for a single position.
    pub fn gate(&self, h: &[T], e: &[T]) -> T {
        let d = self.d();
        let mut inv = [T::zero()];
        let mut hn = vec![T::zero(); d];
        kernels::rms_norm_row(h, self.norm_h.data(), d, &mut hn, &mut inv);
        let k = kernels::matmul(e, self.w_k.data(), 1, e.len(), d);
        let mut kn = vec![T::zero(); d];
        kernels::rms_norm_row(&k, self.norm_key.data(), d, &mut kn, &mut inv);
        let s: T = hn.iter().zip(&kn).map(|(&p, &q)| p * q).sum();
        kernels::sigmoid(s * gate_scale(d))
    }

    /// Fuse one new position, advancing the convolution history.
    pub fn fuse_step(&self, h: &[T], e: &[T], clamp: Option<f64>, state: &mut ConvState<T>) -> Vec<T> {
        let d = self.d();
        let g = match clamp {
            Some(c) => T::from_f64(c),
            None => self.gate(h, e),
        };
        let vb = self.value_row(e);
        let vt: Vec<T> = vb.iter().map(|&v| v * g).collect();
        let mut vn = vec![T::zero(); d];
        kernels::rms_norm_row(&vt, self.norm_value.data(), d, &mut vn, &mut [T::zero()]);

        let missing = CONV_TAPS - 1 - state.history.len();
        let mut window: Vec<Option<&[T]>> = vec![None; missing];
        window.extend(state.history.iter().map(|r| Some(r.as_slice())));
        window.push(Some(&vn));
        let mut c = vec![T::zero(); d];
        kernels::causal_conv_row(self.conv.data(), CONV_TAPS, &window, &mut c);

        let out = h
            .iter()
            .zip(&vb)
            .zip(&c)
            .zip(self.layerscale.data())
            .map(|(((&hi, &v), &ci), &s)| hi + ((v + kernels::silu(ci)) * s) * g)
            .collect();
        state.history.push(vn);
        if state.history.len() > CONV_TAPS - 1 {
            state.history.remove(0);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::BankVariant;

    #[test]
    fn sizes() {
        let c = EngramModuleConfig::new(0, BankVariant::Seq1d, 4, 8, 101);
        assert_eq!(c.d_mem(), 64);
        assert_eq!(c.memory_params(), 2 * 4 * 101 * 8);
        assert!(!c.uses_mlp(64));
        assert!(c.uses_mlp(32));
        assert_eq!(c.glue_params(64), 64 * 64 * 2 + 8 * 64);
        assert_eq!(c.glue_params(32), 64 * 32 * 2 + 32 * 32 + 8 * 32);
    }

    #[test]
    fn validation() {
        let mut c = EngramModuleConfig::new(1, BankVariant::Spatial2d, 2, 8, 11);
        assert!(c.validate(2).is_ok());
        assert!(c.validate(1).is_err());
        c.gate_clamp = Some(1.5);
        assert!(c.validate(2).is_err());
        c.gate_clamp = None;
        c.banks.swap(0, 1);
        assert!(c.validate(2).is_err());
    }
}
