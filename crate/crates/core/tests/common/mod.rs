#![allow(dead_code)]

use mixer::model::{CellKind, ModelConfig, ModelParams};
use mixer::numkern::{seeded_rng, TensorSet};

pub fn model(cell: CellKind, vocab: usize, hidden: usize, scale: f64, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        cell,
        vocab,
        hidden,
        window: 3,
        max_source: 8,
    };
    ModelParams::random(cfg, scale, &mut seeded_rng(seed)).unwrap()
}

/// Bit patterns of every parameter, for exact comparisons that also
/// distinguish `0.0` from `-0.0`.
pub fn bits<T: TensorSet + ?Sized>(t: &T) -> Vec<u64> {
    t.tensors()
        .iter()
        .flat_map(|(_, m)| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
