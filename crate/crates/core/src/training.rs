//! Parameter accounting, table-size solving, AdamW and the training loop.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::engram::EngramModuleConfig;
use crate::error::{config_err, Error, Result};
use crate::hashing::{next_prime_at_least, BankVariant, TableMode};
use crate::model::{EngramModel, ForwardOptions, ModelConfig, ModelParams, ParamId, ParamKind};
use crate::numerics::{Real, Tape, Tensor};
use crate::rng;
use crate::tokens::{raster_flatten, TokenGrid};
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub backbone_params: usize,
    pub memory_params: usize,
    /// Key/value projections, convolution, LayerScale and module norms.
    pub engram_glue_params: usize,
    pub total: usize,
    pub rho: f64,
    /// Backbone share if the glue were counted as backbone.
    pub rho_glue_as_backbone: f64,
}

pub fn count_params(backbone: &BackboneConfig, engram: &[EngramModuleConfig]) -> ParamReport {
    let backbone_params = backbone.param_count();
    let memory_params = engram.iter().map(EngramModuleConfig::memory_params).sum();
    let engram_glue_params = engram.iter().map(|e| e.glue_params(backbone.hidden)).sum();
    let total = backbone_params + memory_params + engram_glue_params;
    ParamReport {
        backbone_params,
        memory_params,
        engram_glue_params,
        total,
        rho: backbone_params as f64 / total as f64,
        rho_glue_as_backbone: (backbone_params + engram_glue_params) as f64 / total as f64,
    }
}

/// Upper bound on solved table sizes.
pub const MAX_TABLE_SIZE: usize = 1 << 40;

/// Smallest prime table size for which `count_params(..).rho <= target_rho`
/// when `num_layers` copies of `template` are attached.
pub fn solve_table_size(
    target_rho: f64,
    backbone: &BackboneConfig,
    template: &EngramModuleConfig,
    num_layers: usize,
) -> Result<usize> {
    if !(target_rho > 0.0 && target_rho < 1.0) {
        return Err(Error::Domain(format!("target rho {target_rho} outside (0, 1)")));
    }
    if num_layers == 0 {
        return config_err("at least one engram layer is needed to lower rho");
    }
    let b = backbone.param_count() as f64;
    let glue = (num_layers * template.glue_params(backbone.hidden)) as f64;
    let per_row = (num_layers * template.num_tables() * template.d_head) as f64;
    let needed = b / target_rho - b - glue;
    let m = if needed <= 0.0 { 2.0 } else { (needed / per_row).ceil().max(2.0) };
    if m > MAX_TABLE_SIZE as f64 {
        return Err(Error::Domain(format!("target rho {target_rho} needs more than {MAX_TABLE_SIZE} rows")));
    }
    let mut m = next_prime_at_least(m as u64)? as usize;
    // Guard against rounding in the closed form.
    let rho_at = |m: usize| {
        let mut e = template.clone();
        e.table_size = m;
        count_params(backbone, &vec![e; num_layers]).rho
    };
    while rho_at(m) > target_rho {
        m = next_prime_at_least(m as u64 + 1)? as usize;
    }
    Ok(m)
}

/// The backbone ratios of the scaling sweep.
pub const RHO_TARGETS: [f64; 7] = [0.17, 0.32, 0.41, 0.51, 0.63, 0.76, 0.90];

fn d_lr() -> f64 {
    4e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.96
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.03
}
fn d_warmup() -> f64 {
    0.02
}
fn d_clip() -> f64 {
    1.0
}
fn d_dropout() -> f64 {
    0.1
}
fn d_log() -> usize {
    50
}
fn d_eval() -> usize {
    64
}
fn d_mode() -> TableMode {
    TableMode::Learned
}
fn d_banks() -> BankVariant {
    BankVariant::Seq1d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_mode")]
    pub table_mode: TableMode,
    #[serde(default = "d_banks")]
    pub banks_variant: BankVariant,
    /// Probability of replacing the class token with the null token.
    #[serde(default = "d_dropout")]
    pub class_dropout: f64,
    #[serde(default = "d_log")]
    pub log_interval: usize,
    /// Training sequences scored for the final train CE.
    #[serde(default = "d_eval")]
    pub eval_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_wd(),
            warmup_fraction: d_warmup(),
            grad_clip: d_clip(),
            batch_size: 8,
            total_steps: 1000,
            seed: 0,
            table_mode: d_mode(),
            banks_variant: d_banks(),
            class_dropout: d_dropout(),
            log_interval: d_log(),
            eval_sequences: d_eval(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config_err("lr must be positive and betas in [0, 1)");
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return config_err("batch_size and log_interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.class_dropout) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return config_err("class_dropout and warmup_fraction must lie in [0, 1]");
        }
        if !matches!(self.table_mode, TableMode::Learned | TableMode::FrozenNoise) {
            return config_err("training uses learned or frozen_noise tables");
        }
        Ok(())
    }

    /// Set every module's banks and table mode to this condition.
    pub fn apply_to(&self, config: &mut ModelConfig) {
        for e in &mut config.engram {
            e.banks = self.banks_variant.banks();
            e.table_mode = self.table_mode;
        }
    }

    pub fn warmup_steps(&self) -> usize {
        if self.total_steps == 0 {
            0
        } else {
            ((self.warmup_fraction * self.total_steps as f64).ceil() as usize).clamp(1, self.total_steps)
        }
    }

    /// Linear warmup then cosine decay to zero; `step` counts from 0.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            return self.lr * (step + 1) as f64 / w as f64;
        }
        let span = (self.total_steps - w).max(1) as f64;
        let progress = ((step - w) as f64 / span).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One decoupled-decay Adam update of a flat parameter.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: usize,
    lr: f64,
    cfg: &TrainConfig,
    decay: bool,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let shrink = if decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
    for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let gf = gi.as_f64();
        let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
        let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
        *mi = T::from_f64(mf);
        *vi = T::from_f64(vf);
        let step = lr * (mf / c1) / ((vf / c2).sqrt() + cfg.eps);
        *pi = T::from_f64(pi.as_f64() * shrink - step);
    }
}

/// First and second moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: usize,
    pub m: ModelParams<Tensor<T>>,
    pub v: ModelParams<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &EngramModel<T>) -> Self {
        let zeros = model.params.map(model.config(), &mut |_, t| Tensor::zeros(t.shape()));
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Whether a parameter receives gradients and updates.
pub fn is_trainable(config: &ModelConfig, id: &ParamId) -> bool {
    if id.kind != ParamKind::Table {
        return true;
    }
    let mode = id
        .layer
        .and_then(|l| config.engram_at(l))
        .map_or(TableMode::Learned, |e| e.table_mode);
    mode == TableMode::Learned
}

/// Global-id training sequence for a grid, checked against the model.
pub fn grid_sequence(backbone: &BackboneConfig, grid: &TokenGrid) -> Result<Vec<u32>> {
    if grid.height != backbone.grid_height
        || grid.width != backbone.grid_width
        || grid.vocab_size != backbone.image_vocab
        || grid.num_classes != backbone.num_classes
        || grid.prefix.len() != backbone.prefix_len()
    {
        return config_err(format!(
            "grid {}x{} (V={}, classes={}, prefix={}) does not match the model",
            grid.height,
            grid.width,
            grid.vocab_size,
            grid.num_classes,
            grid.prefix.len()
        ));
    }
    Ok(raster_flatten(grid))
}

/// Loss and per-parameter gradients (traversal order) for one sequence.
pub fn loss_and_grads<T: Real>(
    model: &EngramModel<T>,
    seq: &[u32],
    opts: &ForwardOptions,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let cfg = model.config();
    let vars = model.leaves_on(&mut tape, |id| is_trainable(cfg, id));
    let loss = model.loss_tape(&mut tape, &vars, seq, opts)?;
    let value = tape.value(loss).data()[0].as_f64();
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.leaves().into_iter().map(|&v| grads.take(v)).collect()))
}

/// Mean teacher-forced image-token CE over grids.
pub fn evaluate_ce<T: Real>(model: &EngramModel<T>, grids: &[TokenGrid], opts: &ForwardOptions) -> Result<f64> {
    if grids.is_empty() {
        return config_err("evaluation set is empty");
    }
    let losses = grids
        .par_iter()
        .map(|g| model.loss(&grid_sequence(model.backbone(), g)?, opts))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub train_ce: f64,
    pub val_ce: Option<f64>,
}

pub struct TrainOutcome<T> {
    pub model: EngramModel<T>,
    pub optimizer: AdamState<T>,
    pub curve: Vec<CurvePoint>,
    pub final_train_ce: f64,
}

/// Optimize `model` on `corpus`, reporting each logged point to `on_log`.
pub fn train_model<T: Real>(
    mut model: EngramModel<T>,
    corpus: &[TokenGrid],
    val: &[TokenGrid],
    cfg: &TrainConfig,
    on_log: &mut dyn FnMut(&CurvePoint),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return config_err("training corpus is empty");
    }
    let backbone = model.backbone().clone();
    let seqs = corpus
        .iter()
        .map(|g| grid_sequence(&backbone, g))
        .collect::<Result<Vec<_>>>()?;
    let null = backbone.prefix_tokens(None)[0];
    let ids = model.param_ids();
    let trainable: Vec<bool> = ids.iter().map(|id| is_trainable(model.config(), id)).collect();
    let mut opt = AdamState::new(&model);
    let mut curve = Vec::new();
    let opts = ForwardOptions::default();

    for step in 0..cfg.total_steps {
        let mut r = rng::stream(cfg.seed, "batch", &[step as u64]);
        let batch: Vec<Vec<u32>> = (0..cfg.batch_size)
            .map(|_| {
                let mut s = seqs[r.random_range(0..seqs.len())].clone();
                if r.random::<f64>() < cfg.class_dropout {
                    s[0] = null;
                }
                s
            })
            .collect();
        let results = batch
            .par_iter()
            .map(|s| loss_and_grads(&model, s, &opts))
            .collect::<Result<Vec<_>>>()?;

        let inv = 1.0 / cfg.batch_size as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; ids.len()];
        for (l, gs) in results {
            loss += l;
            for (acc, g) in grads.iter_mut().zip(gs) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let norm = grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt() * inv;
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: norm });
        }
        let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let scale = T::from_f64(inv * clip);

        let lr = cfg.lr_at(step);
        opt.step += 1;
        let t = opt.step;
        let params = model.params.leaves_mut();
        let ms = opt.m.leaves_mut();
        let vs = opt.v.leaves_mut();
        for (i, (((p, m), v), g)) in params.into_iter().zip(ms).zip(vs).zip(grads).enumerate() {
            if !trainable[i] {
                continue;
            }
            let mut g = g.unwrap_or_else(|| Tensor::zeros(p.shape()));
            g.scale(scale);
            adamw_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), t, lr, cfg, ids[i].kind.decays());
        }

        let last = step + 1 == cfg.total_steps;
        if step % cfg.log_interval == 0 || last {
            let val_ce = if val.is_empty() { None } else { Some(evaluate_ce(&model, val, &opts)?) };
            let point = CurvePoint {
                step,
                lr,
                train_ce: loss,
                val_ce,
            };
            on_log(&point);
            curve.push(point);
        }
    }

    let n = cfg.eval_sequences.clamp(1, corpus.len());
    let final_train_ce = evaluate_ce(&model, &corpus[..n], &opts)?;
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        curve,
        final_train_ce,
    })
}

/// Build the model for a condition and train it from initialization.
pub fn train<T: Real>(
    corpus: &[TokenGrid],
    val: &[TokenGrid],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    on_log: &mut dyn FnMut(&CurvePoint),
) -> Result<TrainOutcome<T>> {
    let mut mc = model_config.clone();
    cfg.apply_to(&mut mc);
    let model = EngramModel::init(mc, cfg.seed)?;
    train_model(model, corpus, val, cfg, on_log)
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,lr,train_ce,val_ce")?;
    for p in curve {
        let val = p.val_ce.map_or(String::new(), |v| format!("{v:.6}"));
        writeln!(f, "{},{:.6e},{:.6},{}", p.step, p.lr, p.train_ce, val)?;
    }
    f.flush()?;
    Ok(())
}

/// One point of the backbone-ratio sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub target_rho: f64,
    pub table_size: usize,
    pub report: ParamReport,
    pub final_ce: Option<f64>,
}

/// Solve a table size per target and attach it to every module of `base`.
pub fn sweep_configs(targets: &[f64], base: &ModelConfig) -> Result<Vec<(f64, ModelConfig)>> {
    let template = base
        .engram
        .first()
        .ok_or_else(|| Error::Config("the sweep needs at least one engram module".into()))?;
    targets
        .iter()
        .map(|&target| {
            let m = solve_table_size(target, &base.backbone, template, base.engram.len())?;
            let mut c = base.clone();
            for e in &mut c.engram {
                e.table_size = m;
            }
            Ok((target, c))
        })
        .collect()
}
