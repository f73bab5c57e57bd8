//! Backbone plus engram modules: parameter layout, initialization and the
//! full-sequence forward pass.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BlockParams};
use crate::engram::{EngramModuleConfig, EngramParams, ValueProj, CONV_TAPS};
use crate::error::{config_err, Error, Result};
use crate::hashing::{hash_ngram, ContextView, HashHead, TableMode};
use crate::numerics::kernels::RopeAngles;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::rng;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub engram: Vec<EngramModuleConfig>,
    /// Root of every hash head seed.
    pub hash_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let mut seen = BTreeSet::new();
        for e in &self.engram {
            e.validate(self.backbone.num_layers)?;
            if !seen.insert(e.layer_index) {
                return config_err(format!("two engram modules at layer {}", e.layer_index));
            }
        }
        Ok(())
    }

    pub fn engram_at(&self, layer: usize) -> Option<&EngramModuleConfig> {
        self.engram.iter().find(|e| e.layer_index == layer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Matrix,
    Norm,
    Conv,
    LayerScale,
    Table,
}

impl ParamKind {
    /// Whether decoupled weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Matrix | ParamKind::Conv)
    }
}

/// Identity of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamId {
    pub name: String,
    pub kind: ParamKind,
    pub layer: Option<usize>,
}

impl ParamId {
    fn new(name: String, kind: ParamKind, layer: Option<usize>) -> Self {
        ParamId { name, kind, layer }
    }
}

/// Every parameter of the model, generic over the stored item (tensors,
/// tape variables, optimizer moments, shapes).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub tok_emb: P,
    pub layers: Vec<BlockParams<P>>,
    /// One entry per layer.
    pub engram: Vec<Option<EngramParams<P>>>,
    pub final_norm: P,
    pub lm_head: P,
}

fn block_names(i: usize) -> [(String, ParamKind); 11] {
    use ParamKind::*;
    [
        (format!("layer{i}.attn.norm"), Norm),
        (format!("layer{i}.attn.wq"), Matrix),
        (format!("layer{i}.attn.wk"), Matrix),
        (format!("layer{i}.attn.wv"), Matrix),
        (format!("layer{i}.attn.wo"), Matrix),
        (format!("layer{i}.attn.q_norm"), Norm),
        (format!("layer{i}.attn.k_norm"), Norm),
        (format!("layer{i}.ffn.norm"), Norm),
        (format!("layer{i}.ffn.w_gate"), Matrix),
        (format!("layer{i}.ffn.w_up"), Matrix),
        (format!("layer{i}.ffn.w_down"), Matrix),
    ]
}

fn table_name(layer: usize, bank_id: usize, head: usize) -> String {
    format!("layer{layer}.engram.table.b{bank_id}.h{head}")
}

impl<P> ModelParams<P> {
    /// Apply `f` to every parameter in a fixed order, producing a parallel
    /// structure. `bank_ids[l]` lists the bank ids of layer `l`'s module.
    fn map_impl<'a, Q>(&'a self, bank_ids: &[Vec<usize>], f: &mut impl FnMut(&ParamId, &'a P) -> Q) -> ModelParams<Q> {
        use ParamKind::*;
        let tok_emb = f(&ParamId::new("tok_emb".into(), Embedding, None), &self.tok_emb);
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut engram = Vec::with_capacity(self.engram.len());
        for (i, (l, e)) in self.layers.iter().zip(&self.engram).enumerate() {
            let n = block_names(i);
            let mut g = |k: usize, p: &'a P| f(&ParamId::new(n[k].0.clone(), n[k].1, Some(i)), p);
            layers.push(BlockParams {
                attn_norm: g(0, &l.attn_norm),
                wq: g(1, &l.wq),
                wk: g(2, &l.wk),
                wv: g(3, &l.wv),
                wo: g(4, &l.wo),
                q_norm: g(5, &l.q_norm),
                k_norm: g(6, &l.k_norm),
                ffn_norm: g(7, &l.ffn_norm),
                w_gate: g(8, &l.w_gate),
                w_up: g(9, &l.w_up),
                w_down: g(10, &l.w_down),
            });
            engram.push(e.as_ref().map(|e| {
                let ids = &bank_ids[i];
                let heads = e.tables.len() / ids.len().max(1);
                let tables = e
                    .tables
                    .iter()
                    .enumerate()
                    .map(|(t, p)| f(&ParamId::new(table_name(i, ids[t / heads], t % heads), Table, Some(i)), p))
                    .collect();
                let mut g = |s: &str, kind: ParamKind, p: &'a P| f(&ParamId::new(format!("layer{i}.engram.{s}"), kind, Some(i)), p);
                EngramParams {
                    tables,
                    w_k: g("w_k", Matrix, &e.w_k),
                    w_v: match &e.w_v {
                        ValueProj::Linear(w) => ValueProj::Linear(g("w_v", Matrix, w)),
                        ValueProj::Mlp(a, b) => ValueProj::Mlp(g("w_v1", Matrix, a), g("w_v2", Matrix, b)),
                    },
                    conv: g("conv", Conv, &e.conv),
                    layerscale: g("layerscale", LayerScale, &e.layerscale),
                    norm_h: g("norm_h", Norm, &e.norm_h),
                    norm_key: g("norm_key", Norm, &e.norm_key),
                    norm_value: g("norm_value", Norm, &e.norm_value),
                }
            }));
        }
        let final_norm = f(&ParamId::new("final_norm".into(), Norm, None), &self.final_norm);
        let lm_head = f(&ParamId::new("lm_head".into(), Matrix, None), &self.lm_head);
        ModelParams {
            tok_emb,
            layers,
            engram,
            final_norm,
            lm_head,
        }
    }

    /// All leaves in traversal order, as mutable references.
    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = vec![&mut self.tok_emb];
        for (l, e) in self.layers.iter_mut().zip(self.engram.iter_mut()) {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.q_norm,
                &mut l.k_norm,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
            if let Some(e) = e {
                out.extend(e.tables.iter_mut());
                out.push(&mut e.w_k);
                match &mut e.w_v {
                    ValueProj::Linear(w) => out.push(w),
                    ValueProj::Mlp(a, b) => out.extend([a, b]),
                }
                out.extend([
                    &mut e.conv,
                    &mut e.layerscale,
                    &mut e.norm_h,
                    &mut e.norm_key,
                    &mut e.norm_value,
                ]);
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// All leaves in traversal order.
    pub fn leaves(&self) -> Vec<&P> {
        let bank_ids = self.placeholder_bank_ids();
        let mut out = Vec::new();
        self.map_impl(&bank_ids, &mut |_, p| out.push(p));
        out
    }

    fn placeholder_bank_ids(&self) -> Vec<Vec<usize>> {
        self.engram
            .iter()
            .map(|e| e.as_ref().map_or(Vec::new(), |e| (0..e.tables.len()).collect()))
            .collect()
    }

    /// Rebuild a structure of the same layout from leaves in traversal order.
    pub fn from_leaves<Q>(&self, leaves: Vec<Q>) -> Result<ModelParams<Q>> {
        let expected = self.leaves().len();
        if leaves.len() != expected {
            return Err(Error::Shape {
                op: "from_leaves",
                lhs: vec![expected],
                rhs: vec![leaves.len()],
            });
        }
        let bank_ids = self.placeholder_bank_ids();
        let mut it = leaves.into_iter();
        Ok(self.map_impl(&bank_ids, &mut |_, _| it.next().expect("counted")))
    }
}

impl<P> ModelParams<P> {
    /// Parameter identities in traversal order for a given configuration.
    pub fn ids(&self, config: &ModelConfig) -> Vec<ParamId> {
        let bank_ids = bank_ids(config);
        let mut out = Vec::new();
        self.map_impl(&bank_ids, &mut |id, _| out.push(id.clone()));
        out
    }

    pub fn map<'a, Q>(&'a self, config: &ModelConfig, f: &mut impl FnMut(&ParamId, &'a P) -> Q) -> ModelParams<Q> {
        self.map_impl(&bank_ids(config), f)
    }
}

fn bank_ids(config: &ModelConfig) -> Vec<Vec<usize>> {
    (0..config.backbone.num_layers)
        .map(|l| {
            config
                .engram_at(l)
                .map_or(Vec::new(), |e| e.banks.iter().map(|b| b.bank_id).collect())
        })
        .collect()
}

/// Shape of every parameter for a configuration.
pub fn param_shapes(config: &ModelConfig) -> ModelParams<Vec<usize>> {
    let b = &config.backbone;
    let (d, f, v, hd) = (b.hidden, b.ffn_inner, b.vocab_total(), b.head_dim());
    let layers = (0..b.num_layers)
        .map(|_| BlockParams {
            attn_norm: vec![d],
            wq: vec![d, d],
            wk: vec![d, d],
            wv: vec![d, d],
            wo: vec![d, d],
            q_norm: vec![hd],
            k_norm: vec![hd],
            ffn_norm: vec![d],
            w_gate: vec![d, f],
            w_up: vec![d, f],
            w_down: vec![f, d],
        })
        .collect();
    let engram = (0..b.num_layers)
        .map(|l| {
            config.engram_at(l).map(|e| {
                let dm = e.d_mem();
                EngramParams {
                    tables: vec![vec![e.table_size, e.d_head]; e.num_tables()],
                    w_k: vec![dm, d],
                    w_v: if e.uses_mlp(d) {
                        ValueProj::Mlp(vec![dm, d], vec![d, d])
                    } else {
                        ValueProj::Linear(vec![dm, d])
                    },
                    conv: vec![d, CONV_TAPS],
                    layerscale: vec![d],
                    norm_h: vec![d],
                    norm_key: vec![d],
                    norm_value: vec![d],
                }
            })
        })
        .collect();
    ModelParams {
        tok_emb: vec![v, d],
        layers,
        engram,
        final_norm: vec![d],
        lm_head: vec![d, v],
    }
}

/// Draw a fresh table from the standard normal, keyed by its name.
fn noise_table(config: &ModelConfig, id: &ParamId) -> bool {
    let e = config.engram_at(id.layer.expect("tables have a layer")).expect("module");
    matches!(e.table_mode, TableMode::FrozenNoise | TableMode::RandomizedAtProbe)
}

pub fn standard_normal_table<T: Real>(shape: &[usize], seed: u64, name: &str) -> Tensor<T> {
    let mut r = rng::stream(seed, name, &[]);
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| T::from_f64(rng::standard_normal(&mut r))).collect())
        .expect("shape matches")
}

/// Per-call forward overrides.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Replaces every gate of every module (both places it is applied).
    pub gate_clamp: Option<f64>,
    /// Skip the engram modules entirely.
    pub bypass_engram: bool,
    /// Address row 0 of every table.
    pub collapse_buckets: bool,
    /// Tokens used for context extraction instead of the fed sequence; the
    /// backbone still attends over the fed sequence.
    pub hash_tokens: Option<&'a [u32]>,
}

pub struct EngramModel<T> {
    config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
    /// Per layer: hash heads per bank.
    heads: Vec<Option<Vec<Vec<HashHead>>>>,
    rope: Arc<RopeAngles<T>>,
}

impl<T: Real> Clone for EngramModel<T> {
    fn clone(&self) -> Self {
        EngramModel {
            config: self.config.clone(),
            params: self.params.clone(),
            heads: self.heads.clone(),
            rope: Arc::clone(&self.rope),
        }
    }
}

impl<T: Real> EngramModel<T> {
    /// Wrap existing parameters, checking them against the configuration.
    pub fn new(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        let ids = shapes.ids(&config);
        let want = shapes.leaves();
        let have = params.leaves();
        if want.len() != have.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((id, w), h) in ids.iter().zip(want).zip(have) {
            if h.shape() != w.as_slice() {
                return Err(Error::Shape {
                    op: "parameter",
                    lhs: w.clone(),
                    rhs: h.shape().to_vec(),
                });
            }
            if !h.all_finite() {
                return Err(Error::NonFinite(id.name.clone()));
            }
        }
        let heads = (0..config.backbone.num_layers)
            .map(|l| {
                config.engram_at(l).map(|e| {
                    e.banks
                        .iter()
                        .map(|b| {
                            (0..e.num_heads)
                                .map(|k| HashHead::derive(config.hash_seed, l, b.bank_id, k, e.table_size))
                                .collect()
                        })
                        .collect()
                })
            })
            .collect();
        let rope = Arc::new(config.backbone.rope_table()?);
        Ok(EngramModel {
            config,
            params,
            heads,
            rope,
        })
    }

    /// Fresh initialization: truncated-normal projections (residual outputs
    /// scaled by `1/sqrt(2L)`), unit norms, zero convolution taps, constant
    /// LayerScale. Learned tables start like embeddings; frozen-noise and
    /// probe-randomized tables are standard normal.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        let resid = 1.0 / (2.0 * config.backbone.num_layers as f64).sqrt();
        let params = shapes.map(&config, &mut |id, shape| {
            let n: usize = shape.iter().product();
            match id.kind {
                ParamKind::Table if !noise_table(&config, id) => {
                    let mut r = rng::stream(seed, &id.name, &[]);
                    let data = (0..n).map(|_| T::from_f64(rng::truncated_normal(&mut r, INIT_STD))).collect();
                    Tensor::from_vec(shape.clone(), data).expect("shape")
                }
                ParamKind::Embedding | ParamKind::Matrix => {
                    let std = if id.name.ends_with(".wo") || id.name.ends_with(".w_down") {
                        INIT_STD * resid
                    } else {
                        INIT_STD
                    };
                    let mut r = rng::stream(seed, &id.name, &[]);
                    let data = (0..n).map(|_| T::from_f64(rng::truncated_normal(&mut r, std))).collect();
                    Tensor::from_vec(shape.clone(), data).expect("shape")
                }
                ParamKind::Norm => Tensor::full(shape, T::one()),
                ParamKind::Conv => Tensor::zeros(shape),
                ParamKind::LayerScale => {
                    let e = config.engram_at(id.layer.expect("engram params have a layer")).expect("module");
                    Tensor::full(shape, T::from_f64(e.layerscale_init))
                }
                ParamKind::Table => standard_normal_table(shape, seed, &id.name),
            }
        });
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.config.backbone
    }

    pub fn rope(&self) -> &Arc<RopeAngles<T>> {
        &self.rope
    }

    pub fn hash_heads(&self, layer: usize) -> Option<&[Vec<HashHead>]> {
        self.heads.get(layer).and_then(|h| h.as_deref())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.ids(&self.config)
    }

    pub fn num_params(&self) -> usize {
        self.params.leaves().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> EngramModel<U> {
        let params = self.params.map(&self.config, &mut |_, t| t.cast::<U>());
        EngramModel::new(self.config.clone(), params).expect("same configuration")
    }

    /// Replace every table with a fresh standard-normal draw.
    pub fn randomize_tables(&mut self, seed: u64) {
        let ids = self.param_ids();
        for (id, t) in ids.iter().zip(self.params.leaves_mut()) {
            if id.kind == ParamKind::Table {
                *t = standard_normal_table(t.shape(), seed, &id.name);
            }
        }
    }

    /// Effective table mode of a layer's module under the given options.
    pub(crate) fn collapsed(&self, layer: usize, opts: &ForwardOptions) -> bool {
        opts.collapse_buckets
            || self
                .config
                .engram_at(layer)
                .is_some_and(|e| e.table_mode == TableMode::BucketCollapsed)
    }

    /// Row addressed by every table for cells `first..first + count`, read
    /// from `tokens` (a global-id sequence covering at least those cells).
    /// Output is indexed `[table][cell]`.
    pub fn bucket_indices(
        &self,
        layer: usize,
        tokens: &[u32],
        first: usize,
        count: usize,
        collapse: bool,
    ) -> Result<Vec<Vec<usize>>> {
        let b = &self.config.backbone;
        let e = self
            .config
            .engram_at(layer)
            .ok_or_else(|| Error::Config(format!("no engram module at layer {layer}")))?;
        let heads = self.heads[layer].as_ref().expect("heads built for every module");
        let p = b.prefix_len();
        if tokens.len() < p + first + count {
            return Err(Error::OutOfRange {
                what: "hash token sequence",
                value: p + first + count,
                limit: tokens.len(),
            });
        }
        let view = ContextView::from_sequence(tokens, p, b.grid_height, b.grid_width, b.sentinel());
        let mut out = vec![vec![0usize; count]; e.num_tables()];
        if collapse {
            return Ok(out);
        }
        let mut ctx = Vec::new();
        for (bi, bank) in e.banks.iter().enumerate() {
            for c in 0..count {
                let cell = first + c;
                view.context(cell / b.grid_width, cell % b.grid_width, bank, &mut ctx)?;
                for (k, head) in heads[bi].iter().enumerate() {
                    out[bi * e.num_heads + k][c] = hash_ngram(&ctx, head);
                }
            }
        }
        Ok(out)
    }

    fn check_tokens(&self, seq: &[u32]) -> Result<()> {
        let b = &self.config.backbone;
        if seq.is_empty() || seq.len() > b.seq_len() {
            return Err(Error::OutOfRange {
                what: "sequence length",
                value: seq.len(),
                limit: b.seq_len(),
            });
        }
        if let Some(&t) = seq.iter().find(|&&t| t as usize >= b.vocab_total()) {
            return Err(Error::OutOfRange {
                what: "token id",
                value: t as usize,
                limit: b.vocab_total(),
            });
        }
        Ok(())
    }

    /// Logits `[len, vocab_total]` for a global-id sequence.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelParams<Var>,
        seq: &[u32],
        opts: &ForwardOptions,
    ) -> Result<Var> {
        self.check_tokens(seq)?;
        let b = &self.config.backbone;
        let p = b.prefix_len();
        let n = seq.len();
        let ids: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
        let mut x = tape.gather(vars.tok_emb, &ids)?;
        for (l, block) in vars.layers.iter().enumerate() {
            if let (Some(ev), Some(ec)) = (&vars.engram[l], self.config.engram_at(l)) {
                if !opts.bypass_engram && n > p {
                    let tokens = opts.hash_tokens.unwrap_or(seq);
                    let idx = self.bucket_indices(l, tokens, 0, n - p, self.collapsed(l, opts))?;
                    let parts = ev
                        .tables
                        .iter()
                        .zip(&idx)
                        .map(|(&t, rows)| tape.gather(t, rows))
                        .collect::<Result<Vec<_>>>()?;
                    let e = tape.concat_cols(&parts)?;
                    let h = tape.slice_rows(x, p, n)?;
                    let clamp = opts.gate_clamp.or(ec.gate_clamp);
                    let fused = ev.fuse(tape, h, e, clamp)?;
                    x = if p > 0 {
                        let pre = tape.slice_rows(x, 0, p)?;
                        tape.concat_rows(&[pre, fused])?
                    } else {
                        fused
                    };
                }
            }
            x = block.forward(tape, b, &self.rope, x)?;
        }
        let x = tape.rms_norm(x, vars.final_norm, b.hidden)?;
        tape.matmul(x, vars.lm_head)
    }

    /// Place every parameter on the tape.
    pub fn leaves_on(&self, tape: &mut Tape<T>, trainable: impl Fn(&ParamId) -> bool) -> ModelParams<Var> {
        self.params
            .map(&self.config, &mut |id, t| tape.leaf(t.clone(), trainable(id)))
    }

    /// Logits for a sequence without gradients.
    pub fn logits(&self, seq: &[u32], opts: &ForwardOptions) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.leaves_on(&mut tape, |_| false);
        let out = self.forward_tape(&mut tape, &vars, seq, opts)?;
        Ok(tape.value(out).clone())
    }

    /// Mean cross-entropy over the image tokens of a full sequence
    /// `prefix ++ cells`, predicting each cell from everything before it.
    pub fn loss_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelParams<Var>,
        seq: &[u32],
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let b = &self.config.backbone;
        let p = b.prefix_len();
        if seq.len() != b.seq_len() {
            return Err(Error::Shape {
                op: "loss sequence",
                lhs: vec![b.seq_len()],
                rhs: vec![seq.len()],
            });
        }
        let logits = self.forward_tape(tape, vars, &seq[..seq.len() - 1], opts)?;
        let rows = tape.slice_rows(logits, p - 1, seq.len() - 1)?;
        let targets: Vec<usize> = seq[p..].iter().map(|&t| t as usize).collect();
        tape.cross_entropy(rows, &targets)
    }

    pub fn loss(&self, seq: &[u32], opts: &ForwardOptions) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.leaves_on(&mut tape, |_| false);
        let out = self.loss_tape(&mut tape, &vars, seq, opts)?;
        Ok(tape.value(out).data()[0].as_f64())
    }
}
