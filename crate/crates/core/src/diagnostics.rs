//! Probes: stratified patch Jaccard, donor probe, gate-clamp sweep.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{EngramModel, ForwardOptions};
use crate::numerics::{Real, Tensor};
use crate::rng;
use crate::tokens::{pair_similarity, TokenGrid};
use crate::training::{evaluate_ce, grid_sequence};

/// The five patch shapes `(rows, cols)` of the n-gram analysis.
pub const PATCH_SHAPES: [(usize, usize); 5] = [(1, 2), (2, 1), (1, 3), (3, 1), (2, 2)];

fn check_shape(g: &TokenGrid, shape: (usize, usize)) -> Result<()> {
    let (pr, pc) = shape;
    if pr == 0 || pc == 0 || pr > g.height || pc > g.width {
        return Err(Error::Domain(format!(
            "patch {pr}x{pc} does not fit a {}x{} grid",
            g.height, g.width
        )));
    }
    Ok(())
}

fn patches(g: &TokenGrid, (pr, pc): (usize, usize)) -> impl Iterator<Item = impl Iterator<Item = u32> + '_> + '_ {
    (0..=g.height - pr).flat_map(move |r| {
        (0..=g.width - pc).map(move |c| (0..pr).flat_map(move |i| (0..pc).map(move |j| g.cell(r + i, c + j))))
    })
}

/// `sum min(count) / sum max(count)` over two sorted key lists.
fn merge_counts<K: Ord>(a: &[K], b: &[K]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut inter, mut union) = (0usize, 0usize);
    while i < a.len() || j < b.len() {
        let ord = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) => x.cmp(y),
            (Some(_), None) => std::cmp::Ordering::Less,
            _ => std::cmp::Ordering::Greater,
        };
        let key = if ord == std::cmp::Ordering::Greater { &b[j] } else { &a[i] };
        let mut ca = 0;
        while i < a.len() && a[i] == *key {
            ca += 1;
            i += 1;
        }
        let mut cb = 0;
        while j < b.len() && b[j] == *key {
            cb += 1;
            j += 1;
        }
        inter += ca.min(cb);
        union += ca.max(cb);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Multiset Jaccard of the overlapping `(rows, cols)` patches of two grids.
pub fn jaccard(a: &TokenGrid, b: &TokenGrid, shape: (usize, usize)) -> Result<f64> {
    check_shape(a, shape)?;
    check_shape(b, shape)?;
    let max_id = a.cells.iter().chain(&b.cells).copied().max().unwrap_or(0);
    let bits = (32 - max_id.leading_zeros()).max(1) as usize;
    let len = shape.0 * shape.1;
    if bits * len <= 64 {
        let keys = |g: &TokenGrid| {
            let mut k: Vec<u64> = patches(g, shape)
                .map(|p| p.fold(0u64, |acc, t| (acc << bits) | u64::from(t)))
                .collect();
            k.sort_unstable();
            k
        };
        Ok(merge_counts(&keys(a), &keys(b)))
    } else {
        let keys = |g: &TokenGrid| {
            let mut k: Vec<Vec<u32>> = patches(g, shape).map(Iterator::collect).collect();
            k.sort_unstable();
            k
        };
        Ok(merge_counts(&keys(a), &keys(b)))
    }
}

/// Reference multiset Jaccard by explicit counting.
pub fn jaccard_bruteforce(a: &TokenGrid, b: &TokenGrid, shape: (usize, usize)) -> Result<f64> {
    check_shape(a, shape)?;
    check_shape(b, shape)?;
    let count = |g: &TokenGrid| {
        let mut m: HashMap<Vec<u32>, usize> = HashMap::new();
        for p in patches(g, shape) {
            *m.entry(p.collect()).or_default() += 1;
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    let mut inter = 0;
    let mut union = 0;
    for (k, &x) in &ca {
        let y = cb.get(k).copied().unwrap_or(0);
        inter += x.min(y);
        union += x.max(y);
    }
    union += cb.iter().filter(|(k, _)| !ca.contains_key(*k)).map(|(_, &y)| y).sum::<usize>();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardCell {
    pub pairs: usize,
    /// `None` for a bin without pairs.
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardShapeRow {
    pub shape: (usize, usize),
    pub bins: Vec<JaccardCell>,
    pub random: JaccardCell,
}

impl JaccardShapeRow {
    /// Highest non-empty similarity bin.
    pub fn top_bin(&self) -> Option<&JaccardCell> {
        self.bins.iter().rev().find(|c| c.pairs > 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    /// `[lo, hi)` edges of each bin; the last bin includes its upper edge.
    pub bin_edges: Vec<(f64, f64)>,
    pub max_pairs_per_bin: usize,
    pub seed: u64,
    pub corpus_size: usize,
    pub shapes: Vec<JaccardShapeRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifyConfig {
    pub shapes: Vec<(usize, usize)>,
    pub num_bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub max_pairs_per_bin: usize,
    pub seed: u64,
}

impl Default for StratifyConfig {
    fn default() -> Self {
        StratifyConfig {
            shapes: PATCH_SHAPES.to_vec(),
            num_bins: 10,
            lo: 0.5,
            hi: 1.0,
            max_pairs_per_bin: 500,
            seed: 0,
        }
    }
}

/// Pairs examined before giving up on filling every bin.
const MAX_PAIR_DRAWS: usize = 2_000_000;

pub fn stratified_jaccard(corpus: &[TokenGrid], cfg: &StratifyConfig) -> Result<JaccardReport> {
    let n = corpus.len();
    if n < 2 {
        return config_err("stratified Jaccard needs at least two grids");
    }
    if cfg.num_bins == 0 || !(cfg.hi > cfg.lo) {
        return config_err("need at least one bin over a non-empty range");
    }
    let width = (cfg.hi - cfg.lo) / cfg.num_bins as f64;
    let bin_of = |s: f64| -> Option<usize> {
        if s < cfg.lo || s > cfg.hi {
            return None;
        }
        Some((((s - cfg.lo) / width).floor() as usize).min(cfg.num_bins - 1))
    };

    let mut r = rng::stream(cfg.seed, "jaccard-pairs", &[]);
    let total_pairs = n * (n - 1) / 2;
    let candidates: Vec<(usize, usize)> = if total_pairs <= MAX_PAIR_DRAWS {
        let mut all: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        all.shuffle(&mut r);
        all
    } else {
        (0..MAX_PAIR_DRAWS)
            .map(|_| {
                let i = r.random_range(0..n);
                let j = (i + 1 + r.random_range(0..n - 1)) % n;
                (i.min(j), i.max(j))
            })
            .collect()
    };
    let mut binned: Vec<Vec<(usize, usize)>> = vec![Vec::new(); cfg.num_bins];
    let mut open = cfg.num_bins;
    for (i, j) in candidates {
        if open == 0 {
            break;
        }
        if let Some(b) = bin_of(pair_similarity(&corpus[i], &corpus[j])?) {
            if binned[b].len() < cfg.max_pairs_per_bin {
                binned[b].push((i, j));
                if binned[b].len() == cfg.max_pairs_per_bin {
                    open -= 1;
                }
            }
        }
    }
    let mut rb = rng::stream(cfg.seed, "jaccard-random", &[]);
    let baseline: Vec<(usize, usize)> = (0..cfg.max_pairs_per_bin.min(total_pairs.max(1)))
        .map(|_| {
            let i = rb.random_range(0..n);
            let j = (i + 1 + rb.random_range(0..n - 1)) % n;
            (i, j)
        })
        .collect();

    let mean_over = |pairs: &[(usize, usize)], shape| -> Result<JaccardCell> {
        if pairs.is_empty() {
            return Ok(JaccardCell { pairs: 0, mean: None });
        }
        let js = pairs
            .par_iter()
            .map(|&(i, j)| jaccard(&corpus[i], &corpus[j], shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(JaccardCell {
            pairs: js.len(),
            mean: Some(js.iter().sum::<f64>() / js.len() as f64),
        })
    };
    let shapes = cfg
        .shapes
        .iter()
        .map(|&shape| {
            Ok(JaccardShapeRow {
                shape,
                bins: binned.iter().map(|p| mean_over(p, shape)).collect::<Result<_>>()?,
                random: mean_over(&baseline, shape)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(JaccardReport {
        bin_edges: (0..cfg.num_bins)
            .map(|b| (cfg.lo + b as f64 * width, cfg.lo + (b + 1) as f64 * width))
            .collect(),
        max_pairs_per_bin: cfg.max_pairs_per_bin,
        seed: cfg.seed,
        corpus_size: n,
        shapes,
    })
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl JaccardReport {
    /// One row per shape and bin, then one baseline row per shape.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("shape,bin_lo,bin_hi,pairs,mean_jaccard\n");
        for row in &self.shapes {
            let name = format!("{}x{}", row.shape.0, row.shape.1);
            for (c, (lo, hi)) in row.bins.iter().zip(&self.bin_edges) {
                let _ = writeln!(s, "{name},{lo:.2},{hi:.2},{},{}", c.pairs, opt_num(c.mean));
            }
            let _ = writeln!(s, "{name},random,random,{},{}", row.random.pairs, opt_num(row.random.mean));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorCondition {
    /// The reference's own tokens; the baseline every other row is compared to.
    Real,
    /// The reference itself supplied as an explicit donor.
    Identity,
    Matched,
    Adversarial,
    Random,
    Uniform,
    Randomized,
}

impl DonorCondition {
    pub const REPORTED: [DonorCondition; 6] = [
        DonorCondition::Real,
        DonorCondition::Matched,
        DonorCondition::Adversarial,
        DonorCondition::Random,
        DonorCondition::Uniform,
        DonorCondition::Randomized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DonorCondition::Real => "real",
            DonorCondition::Identity => "identity",
            DonorCondition::Matched => "matched",
            DonorCondition::Adversarial => "adversarial",
            DonorCondition::Random => "random",
            DonorCondition::Uniform => "uniform",
            DonorCondition::Randomized => "randomized",
        }
    }
}

impl std::str::FromStr for DonorCondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DonorCondition::REPORTED
            .iter()
            .chain(&[DonorCondition::Identity])
            .find(|c| c.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown donor condition {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DonorRow {
    pub condition: DonorCondition,
    /// Mean 1-based rank of the real top-1 token under the donor distribution.
    pub mean_rank: f64,
    /// Mean `KL(P_real || P_donor)` in nats.
    pub kl_from_real: f64,
    pub top5_overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DonorProbeReport {
    pub sequences: usize,
    pub positions_per_sequence: usize,
    pub seed: u64,
    pub gate_clamp: Option<f64>,
    pub rows: Vec<DonorRow>,
}

impl DonorProbeReport {
    pub fn row(&self, c: DonorCondition) -> Option<&DonorRow> {
        self.rows.iter().find(|r| r.condition == c)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,mean_rank,kl_from_real,top5_overlap,sequences,positions\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.9},{:.6},{},{}",
                r.condition.name(),
                r.mean_rank,
                r.kl_from_real,
                r.top5_overlap,
                self.sequences,
                self.positions_per_sequence
            );
        }
        s
    }
}

pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax of one logit row in 64-bit.
pub fn softmax64<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `KL(p || q)` with both distributions floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(PROB_FLOOR), b.max(PROB_FLOOR));
            a * (a / b).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Rank, KL and top-5 overlap of one donor distribution against the real one.
pub fn compare_distributions(real: &[f64], donor: &[f64]) -> (f64, f64, f64) {
    let top = argmax(real);
    let rank = 1 + donor.iter().filter(|&&q| q > donor[top]).count();
    let (tr, td) = (top_k(real, 5), top_k(donor, 5));
    let overlap = tr.iter().filter(|i| td.contains(i)).count() as f64 / tr.len().max(1) as f64;
    (rank as f64, kl_divergence(real, donor), overlap)
}

/// Image-position rows `P..S` of the logits for a full sequence.
fn image_rows<T: Real>(logits: &Tensor<T>, prefix: usize) -> Vec<Vec<f64>> {
    (prefix..logits.rows()).map(|i| softmax64(logits.row(i))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DonorProbeConfig {
    pub conditions: Vec<DonorCondition>,
    pub seed: u64,
    #[serde(default)]
    pub gate_clamp: Option<f64>,
}

impl Default for DonorProbeConfig {
    fn default() -> Self {
        DonorProbeConfig {
            conditions: DonorCondition::REPORTED.to_vec(),
            seed: 0,
            gate_clamp: None,
        }
    }
}

/// Probability distributions at every image position of a reference under
/// normal operation. This is a plain forward pass.
pub fn real_distributions<T: Real>(model: &EngramModel<T>, reference: &TokenGrid, gate_clamp: Option<f64>) -> Result<Vec<Vec<f64>>> {
    let seq = grid_sequence(model.backbone(), reference)?;
    let opts = ForwardOptions {
        gate_clamp,
        ..ForwardOptions::default()
    };
    Ok(image_rows(&model.logits(&seq, &opts)?, model.backbone().prefix_len()))
}

/// Teacher-forced donor probe: only the tokens read by context extraction
/// change; attention always sees the reference.
pub fn donor_probe<T: Real>(
    model: &EngramModel<T>,
    references: &[TokenGrid],
    donor_pool: &[TokenGrid],
    cfg: &DonorProbeConfig,
) -> Result<DonorProbeReport> {
    if model.config().engram.is_empty() {
        return config_err("donor probe needs a model with engram modules");
    }
    if references.is_empty() {
        return config_err("donor probe needs at least one reference");
    }
    let b = model.backbone().clone();
    let nc = b.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for (i, g) in donor_pool.iter().enumerate() {
        grid_sequence(&b, g)?;
        by_class[g.class_id].push(i);
    }
    let randomized = cfg.conditions.contains(&DonorCondition::Randomized).then(|| {
        let mut m = model.clone();
        m.randomize_tables(rng::derive_seed(cfg.seed, &[rng::fnv1a(b"randomized")]));
        m
    });
    let per_ref = |ri: usize| -> Result<Vec<(f64, f64, f64)>> {
        let reference = &references[ri];
        let seq = grid_sequence(&b, reference)?;
        let real = real_distributions(model, reference, cfg.gate_clamp)?;
        let mut sums = Vec::with_capacity(cfg.conditions.len());
        for (ci, &cond) in cfg.conditions.iter().enumerate() {
            let mut r = rng::stream(cfg.seed, "donor", &[ri as u64, ci as u64]);
            let pick = |class: usize, r: &mut rng::StreamRng| -> Result<Vec<u32>> {
                let pool = &by_class[class];
                let others: Vec<usize> = pool
                    .iter()
                    .copied()
                    .filter(|&i| donor_pool[i].cells != reference.cells)
                    .collect();
                let choices = if others.is_empty() { pool } else { &others };
                if choices.is_empty() {
                    return config_err(format!("donor pool has no grid of class {class}"));
                }
                grid_sequence(&b, &donor_pool[choices[r.random_range(0..choices.len())]])
            };
            let mut opts = ForwardOptions {
                gate_clamp: cfg.gate_clamp,
                ..ForwardOptions::default()
            };
            let donor_tokens;
            let mut target = model;
            match cond {
                DonorCondition::Real => {}
                DonorCondition::Identity => {
                    donor_tokens = seq.clone();
                    opts.hash_tokens = Some(&donor_tokens);
                }
                DonorCondition::Matched | DonorCondition::Adversarial | DonorCondition::Random => {
                    let class = match cond {
                        DonorCondition::Matched => reference.class_id,
                        DonorCondition::Adversarial => (reference.class_id + nc / 2) % nc,
                        _ => r.random_range(0..nc),
                    };
                    donor_tokens = pick(class, &mut r)?;
                    opts.hash_tokens = Some(&donor_tokens);
                }
                DonorCondition::Uniform => opts.collapse_buckets = true,
                DonorCondition::Randomized => target = randomized.as_ref().expect("built when requested"),
            }
            let donor = image_rows(&target.logits(&seq, &opts)?, b.prefix_len());
            let mut acc = (0.0, 0.0, 0.0);
            for (p, q) in real.iter().zip(&donor) {
                let (rank, kl, ov) = compare_distributions(p, q);
                acc.0 += rank;
                acc.1 += kl;
                acc.2 += ov;
            }
            let n = real.len() as f64;
            sums.push((acc.0 / n, acc.1 / n, acc.2 / n));
        }
        Ok(sums)
    };
    let all = (0..references.len())
        .into_par_iter()
        .map(per_ref)
        .collect::<Result<Vec<_>>>()?;
    let n = references.len() as f64;
    let rows = cfg
        .conditions
        .iter()
        .enumerate()
        .map(|(ci, &condition)| {
            let (mut rank, mut kl, mut ov) = (0.0, 0.0, 0.0);
            for r in &all {
                rank += r[ci].0;
                kl += r[ci].1;
                ov += r[ci].2;
            }
            DonorRow {
                condition,
                mean_rank: rank / n,
                kl_from_real: kl / n,
                top5_overlap: ov / n,
            }
        })
        .collect();
    Ok(DonorProbeReport {
        sequences: references.len(),
        positions_per_sequence: b.grid_cells(),
        seed: cfg.seed,
        gate_clamp: cfg.gate_clamp,
        rows,
    })
}

/// Clamp values of the sweep; `None` is the learned gate.
pub const SWEEP_CLAMPS: [Option<f64>; 7] = [
    Some(0.0),
    Some(0.10),
    Some(0.25),
    Some(0.50),
    Some(0.75),
    Some(1.0),
    None,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClampRow {
    /// `None` for the learned gate.
    pub clamp: Option<f64>,
    pub ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateClampReport {
    pub sequences: usize,
    pub rows: Vec<ClampRow>,
}

impl GateClampReport {
    pub fn ce_at(&self, clamp: Option<f64>) -> Option<f64> {
        self.rows.iter().find(|r| r.clamp == clamp).map(|r| r.ce)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("clamp,ce\n");
        for r in &self.rows {
            let c = r.clamp.map_or("learned".to_string(), |c| format!("{c:.2}"));
            let _ = writeln!(s, "{c},{:.6}", r.ce);
        }
        s
    }
}

/// Teacher-forced image-token CE with every gate clamped to each value.
pub fn gate_clamp_sweep<T: Real>(model: &EngramModel<T>, eval_set: &[TokenGrid], clamps: &[Option<f64>]) -> Result<GateClampReport> {
    for c in clamps.iter().flatten() {
        if !(0.0..=1.0).contains(c) {
            return config_err(format!("clamp {c} outside [0, 1]"));
        }
    }
    let rows = clamps
        .iter()
        .map(|&clamp| {
            let opts = ForwardOptions {
                gate_clamp: clamp,
                ..ForwardOptions::default()
            };
            Ok(ClampRow {
                clamp,
                ce: evaluate_ce(model, eval_set, &opts)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(GateClampReport {
        sequences: eval_set.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::PrefixLayout;

    fn grid(h: usize, w: usize, cells: Vec<u32>) -> TokenGrid {
        let layout = PrefixLayout {
            num_classes: 2,
            aux_tokens: 0,
        };
        TokenGrid::new(h, w, 16, layout, 0, cells).unwrap()
    }

    #[test]
    fn worked_example() {
        let a = grid(2, 2, vec![1, 2, 1, 2]);
        let b = grid(2, 2, vec![1, 2, 3, 4]);
        assert!((jaccard(&a, &b, (1, 2)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&a, &a, (2, 2)).unwrap(), 1.0);
        let c = grid(2, 2, vec![5, 6, 7, 8]);
        assert_eq!(jaccard(&a, &c, (1, 2)).unwrap(), 0.0);
        assert!(jaccard(&a, &b, (3, 1)).is_err());
        assert!(jaccard(&a, &b, (0, 1)).is_err());
    }

    #[test]
    fn kl_properties() {
        let p = vec![0.7, 0.2, 0.1, 0.0];
        assert!(kl_divergence(&p, &p) < 1e-12);
        let q = vec![0.25; 4];
        assert!(kl_divergence(&p, &q) > 0.0);
        let (rank, _, ov) = compare_distributions(&p, &p);
        assert_eq!(rank, 1.0);
        assert_eq!(ov, 1.0);
        let rev = vec![0.0, 0.1, 0.2, 0.7];
        assert_eq!(compare_distributions(&p, &rev).0, 4.0);
    }

    #[test]
    fn single_pair_report() {
        let spec = crate::tokens::CorpusSpec::default();
        let a = spec.generate(0).unwrap();
        let b = spec.generate(spec.num_classes as u64).unwrap();
        let s = pair_similarity(&a, &b).unwrap();
        assert!(s >= 0.5);
        let cfg = StratifyConfig {
            shapes: vec![(1, 2)],
            ..StratifyConfig::default()
        };
        let r = stratified_jaccard(&[a.clone(), b.clone()], &cfg).unwrap();
        let row = &r.shapes[0];
        assert_eq!(row.bins.iter().map(|c| c.pairs).sum::<usize>(), 1);
        let bin = (((s - 0.5) / 0.05).floor() as usize).min(9);
        assert_eq!(row.bins[bin].pairs, 1);
        assert_eq!(row.bins[bin].mean, Some(jaccard(&a, &b, (1, 2)).unwrap()));
        assert_eq!(row.bins.iter().filter(|c| c.mean.is_none()).count(), 9);
    }
}
