#![allow(dead_code)]

use engram_ar::backbone::BackboneConfig;
use engram_ar::engram::EngramModuleConfig;
use engram_ar::hashing::BankVariant;
use engram_ar::model::{EngramModel, ModelConfig, ParamKind};
use engram_ar::numerics::Real;
use engram_ar::rng;
use rand::Rng;

/// L=2, d=16, 2 heads, 32 image tokens, 4x4 grid, one module at layer 1
/// (H=2, M=101, d_head=8).
pub fn tiny(variant: BankVariant) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            num_layers: 2,
            hidden: 16,
            num_heads: 2,
            ffn_inner: 48,
            image_vocab: 32,
            num_classes: 4,
            aux_tokens: 0,
            grid_height: 4,
            grid_width: 4,
            rope_base: 10_000.0,
        },
        engram: vec![EngramModuleConfig::new(1, variant, 2, 8, 101)],
        hash_seed: 11,
    }
}

/// Initialization plus noise on every tensor, so norms, convolution taps and
/// LayerScale are all far from their trivial starting values.
pub fn perturbed<T: Real>(config: ModelConfig, seed: u64) -> EngramModel<T> {
    perturbed_by(config, seed, 0.3)
}

pub fn perturbed_by<T: Real>(config: ModelConfig, seed: u64, spread: f64) -> EngramModel<T> {
    let mut m = EngramModel::<T>::init(config, seed).unwrap();
    let ids = m.param_ids();
    for (id, t) in ids.iter().zip(m.params.leaves_mut()) {
        let mut r = rng::stream(seed, "perturb", &[rng::fnv1a(id.name.as_bytes())]);
        let (base, std) = match id.kind {
            ParamKind::Norm => (None, 0.2),
            ParamKind::LayerScale => (Some(0.5), 0.2),
            ParamKind::Conv => (Some(0.0), 0.3),
            ParamKind::Table => (None, 0.5),
            _ => (None, spread),
        };
        for x in t.data_mut() {
            let v = base.unwrap_or(x.as_f64()) + std * rng::standard_normal(&mut r);
            *x = T::from_f64(v);
        }
    }
    m
}

/// Full-length global-id sequence `prefix ++ cells` with random image cells.
pub fn random_sequence(b: &BackboneConfig, r: &mut impl Rng) -> Vec<u32> {
    let class = r.random_range(0..b.num_classes);
    let mut seq = b.prefix_tokens(Some(class));
    seq.extend((0..b.grid_cells()).map(|_| r.random_range(0..b.image_vocab as u32)));
    seq
}

pub fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
