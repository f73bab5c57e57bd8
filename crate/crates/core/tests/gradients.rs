mod common;

use engram_ar::hashing::BankVariant;
use engram_ar::model::{EngramModel, ForwardOptions};
use engram_ar::numerics::{Tape, Tensor};
use engram_ar::rng;
use engram_ar::training::loss_and_grads;

use common::{perturbed, random_sequence, tiny};

fn loss_at(model: &EngramModel<f64>, params: &[Tensor<f64>], seq: &[u32], opts: &ForwardOptions) -> f64 {
    let mut tape = Tape::new();
    let leaves = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let vars = model.params.from_leaves(leaves).unwrap();
    let out = model.loss_tape(&mut tape, &vars, seq, opts).unwrap();
    tape.value(out).data()[0]
}

/// Every coordinate against a Richardson-extrapolated central difference
/// built from steps 1e-3 and 5e-4, which cancels the second-order error.
fn check_all(variant: BankVariant, opts: &ForwardOptions, seed: u64) {
    let model = perturbed::<f64>(tiny(variant), seed);
    let mut r = rng::stream(seed, "richardson", &[]);
    let seq = random_sequence(model.backbone(), &mut r);
    let (_, grads) = loss_and_grads(&model, &seq, opts).unwrap();
    let ids = model.param_ids();
    let mut work: Vec<Tensor<f64>> = model.params.leaves().into_iter().cloned().collect();
    let mut worst = (0.0, String::new());
    for t in 0..work.len() {
        for e in 0..work[t].numel() {
            let orig = work[t].data()[e];
            let mut central = |h: f64| {
                work[t].data_mut()[e] = orig + h;
                let plus = loss_at(&model, &work, &seq, opts);
                work[t].data_mut()[e] = orig - h;
                let minus = loss_at(&model, &work, &seq, opts);
                work[t].data_mut()[e] = orig;
                (plus - minus) / (2.0 * h)
            };
            let (coarse, fine) = (central(1e-3), central(5e-4));
            let fd = (4.0 * fine - coarse) / 3.0;
            let ad = grads[t].as_ref().map_or(0.0, |g| g.data()[e]);
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            if rel > worst.0 {
                worst = (rel, format!("{}[{e}] ad {ad:e} fd {fd:e}", ids[t].name));
            }
        }
    }
    assert!(worst.0 <= 1e-4, "{variant:?}: {:.2e} at {}", worst.0, worst.1);
}

#[test]
fn every_coordinate_seq1d() {
    check_all(BankVariant::Seq1d, &ForwardOptions::default(), 41);
}

#[test]
fn every_coordinate_spatial2d() {
    check_all(BankVariant::Spatial2d, &ForwardOptions::default(), 42);
}

#[test]
fn every_coordinate_with_clamped_gate() {
    let opts = ForwardOptions {
        gate_clamp: Some(0.4),
        ..Default::default()
    };
    check_all(BankVariant::Seq1d, &opts, 43);
}

#[test]
fn clamped_gate_cuts_key_gradients() {
    let model = perturbed::<f64>(tiny(BankVariant::Seq1d), 44);
    let mut r = rng::stream(44, "clamp", &[]);
    let seq = random_sequence(model.backbone(), &mut r);
    let opts = ForwardOptions {
        gate_clamp: Some(0.4),
        ..Default::default()
    };
    let (_, grads) = loss_and_grads(&model, &seq, &opts).unwrap();
    for (id, g) in model.param_ids().iter().zip(&grads) {
        let zero = g.as_ref().is_none_or(|g| g.data().iter().all(|&x| x == 0.0));
        if id.name.ends_with("engram.w_k") || id.name.ends_with("engram.norm_h") || id.name.ends_with("engram.norm_key") {
            assert!(zero, "{} still receives gradient through a clamped gate", id.name);
        }
        if id.name.ends_with("engram.w_v0") || id.name.ends_with("engram.layerscale") {
            assert!(!zero, "{}", id.name);
        }
    }
}
