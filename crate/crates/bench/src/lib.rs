//! Shared fixtures for the benchmarks.

use icp_attack::data::{
    generate_shape, make_pair, LocalizationPair, Profile, ShapeKind, DEFAULT_DENSITY,
};

/// A 2048-point shapenet-profile pair on an L-shaped outline.
pub fn fixture_pair(seed: u64) -> LocalizationPair {
    let map = generate_shape(ShapeKind::LShape, DEFAULT_DENSITY, seed).expect("shape");
    make_pair(&map, Profile::Shapenet, seed).expect("pair")
}
