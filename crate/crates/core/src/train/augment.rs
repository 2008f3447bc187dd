use rand::Rng;

use crate::patch::Dihedral;

/// Uniformly drawn flip/rotation of a square patch.
pub fn augment(pixels: &[f64], side: usize, rng: &mut impl Rng) -> Vec<f64> {
    random_dihedral(rng).apply(pixels, side)
}

pub fn random_dihedral(rng: &mut impl Rng) -> Dihedral {
    Dihedral::from_index(rng.random_range(0..8))
}
