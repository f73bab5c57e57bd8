//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use engram_ar::backbone::BackboneConfig;
use engram_ar::config::ExperimentConfig;
use engram_ar::diagnostics::{
    donor_probe, gate_clamp_sweep, jaccard, jaccard_bruteforce, stratified_jaccard, DonorCondition, DonorProbeConfig,
    StratifyConfig, PATCH_SHAPES, SWEEP_CLAMPS,
};
use engram_ar::engram::EngramModuleConfig;
use engram_ar::hashing::{hash_ngram, BankVariant, HashHead, TableMode};
use engram_ar::inference::{step, KVCache};
use engram_ar::model::{EngramModel, ForwardOptions, ParamKind};
use engram_ar::numerics::gradcheck::grad_check;
use engram_ar::numerics::{Tape, Tensor, Var};
use engram_ar::rng;
use engram_ar::tokens::{generate_range, CorpusSpec, PrefixLayout, TokenGrid};
use engram_ar::training::{count_params, loss_and_grads, sweep_configs, train_model, TrainOutcome, RHO_TARGETS};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::{max_abs_diff, perturbed, random_sequence, tiny};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn toy() -> ExperimentConfig {
    ExperimentConfig::toy()
}

struct Trained {
    outcome: TrainOutcome<f32>,
    tables_before: Vec<Tensor<f32>>,
    seconds: f64,
}

fn tables_of(model: &EngramModel<f32>) -> Vec<Tensor<f32>> {
    model
        .param_ids()
        .iter()
        .zip(model.params.leaves())
        .filter(|(id, _)| id.kind == ParamKind::Table)
        .map(|(_, t)| t.clone())
        .collect()
}

fn train_toy(mode: TableMode) -> Trained {
    let cfg = toy();
    let mut tc = cfg.train.clone();
    tc.table_mode = mode;
    let mut mc = cfg.model.clone();
    tc.apply_to(&mut mc);
    let corpus = cfg.train_split().unwrap();
    let model = EngramModel::<f32>::init(mc, tc.seed).unwrap();
    let tables_before = tables_of(&model);
    let t0 = Instant::now();
    let outcome = train_model(model, &corpus, &[], &tc, &mut |_| {}).unwrap();
    Trained {
        outcome,
        tables_before,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

static LEARNED: OnceLock<Trained> = OnceLock::new();
static FROZEN: OnceLock<Trained> = OnceLock::new();

fn learned() -> &'static Trained {
    LEARNED.get_or_init(|| train_toy(TableMode::Learned))
}

fn frozen() -> &'static Trained {
    FROZEN.get_or_init(|| train_toy(TableMode::FrozenNoise))
}

fn gradient_correctness() -> Verdict {
    let t0 = Instant::now();
    let model = perturbed::<f64>(tiny(BankVariant::Seq1d), 5);
    let b = model.backbone().clone();
    let mut r = rng::stream(5, "gradcheck", &[]);
    let seq = random_sequence(&b, &mut r);
    let ids = model.param_ids();
    let params: Vec<Tensor<f64>> = model.params.leaves().into_iter().cloned().collect();
    let rows = model.bucket_indices(1, &seq, 0, b.grid_cells() - 1, false).unwrap();

    let mut coords = Vec::new();
    let mut table = 0;
    for (t, (id, p)) in ids.iter().zip(&params).enumerate() {
        if id.kind == ParamKind::Table {
            let d_head = p.cols();
            let used: BTreeSet<usize> = rows[table].iter().copied().collect();
            let unused = (0..p.rows()).find(|row| !used.contains(row)).unwrap();
            for (i, &row) in used.iter().take(6).enumerate() {
                coords.push((t, row * d_head + i % d_head));
            }
            coords.push((t, unused * d_head));
            table += 1;
        } else {
            for _ in 0..6 {
                coords.push((t, r.random_range(0..p.numel())));
            }
        }
    }
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let mp = model.params.from_leaves(vars.to_vec())?;
        model.loss_tape(tape, &mp, &seq, &ForwardOptions::default())
    };
    let report = grad_check(f, &params, 1e-3, Some(&coords)).unwrap();
    let families: BTreeSet<String> = coords
        .iter()
        .map(|&(t, _)| {
            let n = &ids[t].name;
            if n.contains(".engram.") {
                n.split(".engram.").nth(1).unwrap().split('.').next().unwrap().trim_end_matches(char::is_numeric).to_string()
            } else {
                "backbone".to_string()
            }
        })
        .collect();
    let need = ["table", "w_k", "w_v", "conv", "layerscale", "backbone"];
    let spans = need.iter().all(|f| families.contains(*f));
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        report.max_rel_error <= 1e-4 && report.checked >= 200 && spans && secs < 60.0,
        format!(
            "max rel err {:.2e} over {} coords, families {:?}, {:.1}s",
            report.max_rel_error, report.checked, families, secs
        ),
    )
}

fn gradient_routing() -> Verdict {
    let model = perturbed::<f64>(tiny(BankVariant::Seq1d), 9);
    let b = model.backbone().clone();
    let ids = model.param_ids();
    let structural = ids.len() == model.params.leaves().len()
        && ids.iter().all(|id| !id.name.contains("hash") && !id.name.contains("seed"));
    let mut r = rng::stream(9, "routing", &[]);
    let mut addressed: Vec<BTreeSet<usize>> = Vec::new();
    let mut sums: Vec<Option<Tensor<f64>>> = vec![None; ids.len()];
    for _ in 0..4 {
        let seq = random_sequence(&b, &mut r);
        let rows = model.bucket_indices(1, &seq, 0, b.grid_cells() - 1, false).unwrap();
        if addressed.is_empty() {
            addressed = vec![BTreeSet::new(); rows.len()];
        }
        for (set, rs) in addressed.iter_mut().zip(&rows) {
            set.extend(rs.iter().copied());
        }
        let (_, grads) = loss_and_grads(&model, &seq, &ForwardOptions::default()).unwrap();
        for (acc, g) in sums.iter_mut().zip(grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.add_assign(&g),
                    None => *acc = Some(g),
                }
            }
        }
    }
    let mut rows_ok = true;
    let mut table = 0;
    let mut glue_reached = BTreeSet::new();
    for (id, g) in ids.iter().zip(&sums) {
        let g = g.as_ref().expect("every parameter receives a gradient");
        if id.kind == ParamKind::Table {
            for row in 0..g.rows() {
                let nonzero = g.row(row).iter().any(|&x| x != 0.0);
                if nonzero != addressed[table].contains(&row) {
                    rows_ok = false;
                }
            }
            table += 1;
        } else if id.name.contains(".engram.") && g.data().iter().any(|&x| x != 0.0) {
            glue_reached.insert(id.name.clone());
        }
    }
    let glue_total = ids.iter().filter(|id| id.name.contains(".engram.") && id.kind != ParamKind::Table).count();
    verdict(
        structural && rows_ok && glue_reached.len() == glue_total,
        format!(
            "no hash parameters on the tape: {structural}; table rows nonzero exactly where addressed: {rows_ok}; {}/{} module tensors reached",
            glue_reached.len(),
            glue_total
        ),
    )
}

fn clamp_zero_exactness() -> Verdict {
    let mut mismatches = 0;
    let mut cases = 0;
    for variant in [BankVariant::Seq1d, BankVariant::Spatial2d] {
        for i in 0..50u64 {
            let model = perturbed::<f32>(tiny(variant), 1000 + i);
            let mut r = rng::stream(i, "clamp0", &[]);
            let seq = random_sequence(model.backbone(), &mut r);
            let clamped = model
                .logits(
                    &seq,
                    &ForwardOptions {
                        gate_clamp: Some(0.0),
                        ..Default::default()
                    },
                )
                .unwrap();
            let bypass = model
                .logits(
                    &seq,
                    &ForwardOptions {
                        bypass_engram: true,
                        ..Default::default()
                    },
                )
                .unwrap();
            let same = clamped.data().iter().zip(bypass.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                mismatches += 1;
            }
            cases += 1;
        }
    }
    verdict(mismatches == 0, format!("{cases} cases, {mismatches} with any differing bit"))
}

fn incremental_equivalence() -> Verdict {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut runs = 0;
    for i in 0..100u64 {
        let variant = if i % 2 == 0 { BankVariant::Seq1d } else { BankVariant::Spatial2d };
        let model = perturbed::<f32>(tiny(variant), 2000 + i);
        let mut r = rng::stream(i, "incremental", &[]);
        let seq = random_sequence(model.backbone(), &mut r);
        for clamp in [None, Some(0.35)] {
            let opts = ForwardOptions {
                gate_clamp: clamp,
                ..Default::default()
            };
            let full = model.logits(&seq, &opts).unwrap();
            let mut cache = KVCache::new(&model);
            for (t, &tok) in seq.iter().enumerate() {
                let row = step(&model, &mut cache, tok, &opts).unwrap();
                worst = worst.max(max_abs_diff(&row, full.row(t)));
            }
            runs += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-5 && secs < 120.0,
        format!("max |delta| {worst:.2e} over {runs} decodes (f32, both variants, learned and clamped gates), {secs:.1}s"),
    )
}

fn hash_quality() -> Verdict {
    let m = 997usize;
    let n = 1_000_000usize;
    let vocab = 4096u32;
    let mut r = rng::stream(77, "chi2", &[]);
    let contexts: Vec<[u32; 2]> = (0..n).map(|_| [r.random_range(0..vocab), r.random_range(0..vocab)]).collect();
    let dist = ChiSquared::new((m - 1) as f64).unwrap();
    let mut min_p = 1.0f64;
    for k in 0..8 {
        let head = HashHead::derive(3, 0, 0, k, m);
        let mut counts = vec![0u64; m];
        for c in &contexts {
            counts[hash_ngram(c, &head)] += 1;
        }
        let e = n as f64 / m as f64;
        let stat: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        min_p = min_p.min(dist.sf(stat));
    }

    let big = 1usize << 16;
    let trials = 100_000;
    let mut min_rate = 1.0f64;
    for k in 0..8 {
        let head = HashHead::derive(3, 0, 1, k, big);
        let mut changed = 0;
        for _ in 0..trials {
            let mut c = [r.random_range(0..vocab), r.random_range(0..vocab), r.random_range(0..vocab)];
            let before = hash_ngram(&c, &head);
            let pos = r.random_range(0..3);
            let old = c[pos];
            while c[pos] == old {
                c[pos] = r.random_range(0..vocab);
            }
            if hash_ngram(&c, &head) != before {
                changed += 1;
            }
        }
        min_rate = min_rate.min(changed as f64 / trials as f64);
    }
    verdict(
        min_p > 1e-6 && min_rate >= 0.45,
        format!("min chi-square p {min_p:.3e} over 8 heads (M=997, 1e6 contexts); min avalanche rate {:.2}% at M=2^16", 100.0 * min_rate),
    )
}

fn jaccard_oracle() -> Verdict {
    let layout = PrefixLayout {
        num_classes: 1,
        aux_tokens: 0,
    };
    let mut r = rng::stream(8, "jaccard", &[]);
    let mut mismatches = 0;
    for i in 0..200 {
        let vocab = [2u32, 3, 5, 64][i % 4];
        let grid = |r: &mut rng::StreamRng| {
            let cells = (0..256).map(|_| r.random_range(0..vocab)).collect();
            TokenGrid::new(16, 16, vocab as usize, layout, 0, cells).unwrap()
        };
        let (a, b) = (grid(&mut r), grid(&mut r));
        for shape in PATCH_SHAPES {
            if jaccard(&a, &b, shape).unwrap() != jaccard_bruteforce(&a, &b, shape).unwrap() {
                mismatches += 1;
            }
        }
    }

    let report = |noise: f64| {
        let spec = CorpusSpec {
            noise_rate: noise,
            ..CorpusSpec::default()
        };
        let corpus = generate_range(&spec, 0, 256).unwrap();
        stratified_jaccard(&corpus, &StratifyConfig::default()).unwrap()
    };
    let clean = report(0.0);
    let noisy = report(1.0);
    let mut clean_ok = true;
    let mut noisy_ok = true;
    let mut worst_gap = 0.0f64;
    let mut smallest_lift = f64::INFINITY;
    for row in &clean.shapes {
        let (top, base) = (row.top_bin().and_then(|c| c.mean), row.random.mean);
        match (top, base) {
            (Some(t), Some(b)) if t > b => smallest_lift = smallest_lift.min(t - b),
            _ => clean_ok = false,
        }
    }
    for row in &noisy.shapes {
        match (row.top_bin().and_then(|c| c.mean), row.random.mean) {
            (Some(t), Some(b)) => {
                worst_gap = worst_gap.max((t - b).abs());
                noisy_ok &= (t - b).abs() <= 0.02;
            }
            _ => noisy_ok = false,
        }
    }
    verdict(
        mismatches == 0 && clean_ok && noisy_ok,
        format!(
            "{mismatches} fast/brute mismatches over 200 pairs x 5 shapes; clean corpus top-bin lift >= {smallest_lift:.3}; noise=1 max |top - baseline| {worst_gap:.4}"
        ),
    )
}

fn parameter_accounting() -> Verdict {
    let ar_b = BackboneConfig::ar_b();
    let total = ar_b.param_count() as f64;
    let rel = (total - 177e6).abs() / 177e6;
    let base = toy().model;
    let points = sweep_configs(&RHO_TARGETS, &base).unwrap();
    let mut worst = 0.0f64;
    for (target, mc) in &points {
        let rho = count_params(&mc.backbone, &mc.engram).rho;
        worst = worst.max((rho - target).abs());
    }
    let with_memory = count_params(&ar_b, &EngramModuleConfig::reference_placement(BankVariant::Seq1d));
    verdict(
        rel <= 0.03 && points.len() == 7 && worst <= 0.01,
        format!(
            "AR-B backbone {:.2}M ({:+.2}% vs 177M; {:.1}M with the reference memory); 7 rho targets, max |rho - target| {worst:.4}",
            total / 1e6,
            100.0 * (total - 177e6) / 177e6,
            with_memory.total as f64 / 1e6
        ),
    )
}

fn desk_training() -> Verdict {
    let target = 0.5 * 64f64.ln();
    let l = learned();
    let f = frozen();
    let tables_after = tables_of(&f.outcome.model);
    let bit_identical = tables_after.len() == f.tables_before.len()
        && tables_after.iter().zip(&f.tables_before).all(|(a, b)| {
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let secs = l.seconds + f.seconds;
    verdict(
        l.outcome.final_train_ce < target && f.outcome.final_train_ce < target && bit_identical && secs <= 1800.0,
        format!(
            "train CE learned {:.4}, frozen_noise {:.4} (target < {target:.4}); frozen tables bit-identical: {bit_identical}; {secs:.0}s",
            l.outcome.final_train_ce, f.outcome.final_train_ce
        ),
    )
}

fn donor_ordering() -> Verdict {
    let cfg = toy();
    let model = &learned().outcome.model;
    let eval = cfg.eval_split().unwrap();
    let pool = cfg.train_split().unwrap();
    let mut conditions = DonorCondition::REPORTED.to_vec();
    conditions.push(DonorCondition::Identity);
    let probe = DonorProbeConfig {
        conditions,
        ..cfg.probe.donor.clone()
    };
    let report = donor_probe(model, &eval[..cfg.probe.references], &pool, &probe).unwrap();
    let row = |c| report.row(c).unwrap().clone();
    let kl = |c| row(c).kl_from_real;
    let (m, a, rd, u, rz) = (
        kl(DonorCondition::Matched),
        kl(DonorCondition::Adversarial),
        kl(DonorCondition::Random),
        kl(DonorCondition::Uniform),
        kl(DonorCondition::Randomized),
    );
    let id = row(DonorCondition::Identity);
    let ordering = rz > u && u > m.max(a).max(rd);
    let close = (m - a).abs() < 0.25 * u;
    let identity = id.kl_from_real < 1e-9 && id.mean_rank == 1.0 && id.top5_overlap == 1.0;
    verdict(
        ordering && close && identity,
        format!(
            "KL randomized {rz:.3}, uniform {u:.3}, matched {m:.3}, adversarial {a:.3}, random {rd:.3}; ordering {ordering}; |matched - adversarial| {:.3} vs 0.25*uniform {:.3}: {close}; identity kl {:.1e} rank {} top5 {}",
            (m - a).abs(),
            0.25 * u,
            id.kl_from_real,
            id.mean_rank,
            id.top5_overlap
        ),
    )
}

fn clamp_sweep() -> Verdict {
    let cfg = toy();
    let model = &learned().outcome.model;
    let report = gate_clamp_sweep(model, &cfg.eval_split().unwrap(), &SWEEP_CLAMPS).unwrap();
    let ce = |c| report.ce_at(c).unwrap();
    let (zero, learned_ce, quarter, one) = (ce(Some(0.0)), ce(None), ce(Some(0.25)), ce(Some(1.0)));
    let ratio = zero / learned_ce;
    verdict(
        ratio >= 2.0 && one >= quarter,
        format!(
            "CE clamp0 {zero:.4}, learned {learned_ce:.4} (ratio {ratio:.3}, need >= 2); clamp1 {one:.4} vs clamp0.25 {quarter:.4}"
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_engram-ar");
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let commands: [&[&str]; 8] = [
        &["gen-data"],
        &["params", "--target-rho", "0.5"],
        &["train", "--steps", "40"],
        &["sample", "--per-class", "1"],
        &["probe-donor"],
        &["probe-gate-clamp"],
        &["analyze-jaccard"],
        &["sweep-rho", "--steps", "0"],
    ];
    let run_all = || {
        for c in commands {
            let status = Command::new(bin)
                .args(c)
                .arg("--seed")
                .arg("5")
                .arg("--out")
                .arg(&out)
                .env("ENGRAM_AR_THREADS", "2")
                .output()
                .unwrap();
            assert!(status.status.success(), "{c:?}: {}", String::from_utf8_lossy(&status.stderr));
        }
        let snap = snapshot(&out);
        std::fs::remove_dir_all(&out).unwrap();
        snap
    };
    let first = run_all();
    let second = run_all();
    let differing: Vec<&String> = first.keys().filter(|k| second.get(*k) != first.get(*k)).collect();
    let has_ckpt = first.keys().any(|k| k.ends_with("tensors.bin"));
    verdict(
        first.len() == second.len() && differing.is_empty() && has_ckpt,
        format!("{} artifacts from 8 commands compared, {} differ", first.len(), differing.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("gradient correctness", gradient_correctness),
        ("gradient routing", gradient_routing),
        ("gate-clamp-zero exactness", clamp_zero_exactness),
        ("incremental/full equivalence", incremental_equivalence),
        ("hash quality", hash_quality),
        ("jaccard oracle equivalence", jaccard_oracle),
        ("parameter accounting", parameter_accounting),
        ("desk-scale training", desk_training),
        ("donor-probe ordering", donor_ordering),
        ("gate-clamp sweep shape", clamp_sweep),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let v = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {} failed", ran - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
