mod common;

use engram_ar::diagnostics::{
    donor_probe, gate_clamp_sweep, jaccard, jaccard_bruteforce, stratified_jaccard, DonorCondition, DonorProbeConfig,
    StratifyConfig, PATCH_SHAPES, SWEEP_CLAMPS,
};
use engram_ar::hashing::BankVariant;
use engram_ar::tokens::{generate_range, CorpusSpec, PrefixLayout, TokenGrid};
use proptest::prelude::*;

use common::{perturbed, tiny};

fn tiny_spec() -> CorpusSpec {
    CorpusSpec {
        num_classes: 4,
        grid_height: 4,
        grid_width: 4,
        vocab_size: 32,
        motif_shapes: vec![(2, 2)],
        ..CorpusSpec::default()
    }
}

fn grid(cells: Vec<u32>, side: usize, vocab: usize) -> TokenGrid {
    let layout = PrefixLayout {
        num_classes: 1,
        aux_tokens: 0,
    };
    TokenGrid::new(side, side, vocab, layout, 0, cells).unwrap()
}

#[test]
fn identity_donor_matches_real() {
    let model = perturbed::<f32>(tiny(BankVariant::Spatial2d), 3);
    let data = generate_range(&tiny_spec(), 0, 24).unwrap();
    let cfg = DonorProbeConfig {
        conditions: vec![DonorCondition::Real, DonorCondition::Identity, DonorCondition::Randomized],
        ..DonorProbeConfig::default()
    };
    let report = donor_probe(&model, &data[..4], &data, &cfg).unwrap();
    let id = report.row(DonorCondition::Identity).unwrap();
    assert!(id.kl_from_real < 1e-9);
    assert_eq!(id.mean_rank, 1.0);
    assert_eq!(id.top5_overlap, 1.0);
    assert!(report.row(DonorCondition::Randomized).unwrap().kl_from_real > 0.0);
    assert_eq!(report.positions_per_sequence, 16);
}

#[test]
fn donor_probe_is_deterministic() {
    let model = perturbed::<f32>(tiny(BankVariant::Seq1d), 4);
    let data = generate_range(&tiny_spec(), 0, 24).unwrap();
    let cfg = DonorProbeConfig::default();
    let a = donor_probe(&model, &data[..3], &data, &cfg).unwrap();
    let b = donor_probe(&model, &data[..3], &data, &cfg).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.rows.len(), DonorCondition::REPORTED.len());
}

#[test]
fn clamp_sweep_covers_every_clamp() {
    let model = perturbed::<f32>(tiny(BankVariant::Seq1d), 5);
    let data = generate_range(&tiny_spec(), 100, 8).unwrap();
    let report = gate_clamp_sweep(&model, &data, &SWEEP_CLAMPS).unwrap();
    assert_eq!(report.rows.len(), SWEEP_CLAMPS.len());
    assert!(report.rows.iter().all(|r| r.ce.is_finite() && r.ce > 0.0));
    assert!(report.ce_at(None).is_some());
    assert!(gate_clamp_sweep(&model, &data, &[Some(1.5)]).is_err());
}

#[test]
fn stratified_report_shape_and_empty_bins() {
    let data = generate_range(&CorpusSpec::default(), 0, 48).unwrap();
    let cfg = StratifyConfig {
        max_pairs_per_bin: 20,
        ..StratifyConfig::default()
    };
    let report = stratified_jaccard(&data, &cfg).unwrap();
    assert_eq!(report.shapes.len(), PATCH_SHAPES.len());
    for row in &report.shapes {
        assert_eq!(row.bins.len(), 10);
        for c in &row.bins {
            assert!(c.pairs <= 20);
            assert_eq!(c.pairs == 0, c.mean.is_none());
        }
    }
    assert!(report.to_csv().lines().count() > 50);
    assert!(stratified_jaccard(&data[..1], &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fast_jaccard_matches_bruteforce(
        a in prop::collection::vec(0u32..4, 36),
        b in prop::collection::vec(0u32..4, 36),
        s in 0usize..5,
    ) {
        let (ga, gb) = (grid(a, 6, 4), grid(b, 6, 4));
        let shape = PATCH_SHAPES[s];
        let fast = jaccard(&ga, &gb, shape).unwrap();
        prop_assert_eq!(fast, jaccard_bruteforce(&ga, &gb, shape).unwrap());
        prop_assert_eq!(fast, jaccard(&gb, &ga, shape).unwrap());
        prop_assert!((0.0..=1.0).contains(&fast));
        prop_assert_eq!(jaccard(&ga, &ga, shape).unwrap(), 1.0);
    }

    #[test]
    fn wide_ids_use_the_fallback_path(cells in prop::collection::vec(0u32..70_000, 16)) {
        let g = grid(cells.clone(), 4, 70_000);
        let mut other = cells;
        other.reverse();
        let h = grid(other, 4, 70_000);
        for shape in PATCH_SHAPES {
            prop_assert_eq!(jaccard(&g, &h, shape).unwrap(), jaccard_bruteforce(&g, &h, shape).unwrap());
        }
    }
}
