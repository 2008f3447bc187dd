use serde::{Deserialize, Serialize};

use crate::transformer::{affine_grid, sample_replicate, AffineParams};

/// Where a patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub sequence: usize,
    pub group: usize,
    pub index: usize,
}

/// Square grayscale patch, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub pixels: Vec<f64>,
    pub provenance: Provenance,
}

impl Patch {
    pub fn new(side: usize, pixels: Vec<f64>, provenance: Provenance) -> Self {
        assert_eq!(pixels.len(), side * side, "patch pixel count");
        Self { side, pixels, provenance }
    }

    pub fn normalized(&self) -> Patch {
        Patch {
            pixels: normalize_input(&self.pixels),
            ..self.clone()
        }
    }

    pub fn resized(&self, side: usize) -> Patch {
        Patch {
            side,
            pixels: resize_bilinear(&self.pixels, self.side, side),
            provenance: self.provenance,
        }
    }
}

/// Zero mean, unit population standard deviation. Constant input maps to zeros.
pub fn normalize_input(pixels: &[f64]) -> Vec<f64> {
    let n = pixels.len() as f64;
    let mean = pixels.iter().sum::<f64>() / n;
    let var = pixels.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= f64::EPSILON * mean.abs().max(1.0) {
        return vec![0.0; pixels.len()];
    }
    pixels.iter().map(|p| (p - mean) / std).collect()
}

/// Bilinear resize of a square image with corner pixels aligned.
///
/// This is the identity transform of the spatial transformer, so a patch
/// resized here and a patch sampled at identity theta agree exactly.
pub fn resize_bilinear(pixels: &[f64], in_side: usize, out_side: usize) -> Vec<f64> {
    if in_side == out_side {
        return pixels.to_vec();
    }
    sample_replicate(pixels, in_side, &affine_grid(&AffineParams::IDENTITY, out_side))
}

/// One element of the symmetry group of the square: `rotations` quarter
/// turns counter-clockwise, preceded by a horizontal flip when `flip`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub flip: bool,
    pub rotations: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, rotations: 0 };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(Dihedral::from_index)
    }

    pub fn from_index(i: u8) -> Dihedral {
        Dihedral {
            flip: i >= 4,
            rotations: i % 4,
        }
    }

    pub fn index(&self) -> u8 {
        self.rotations % 4 + if self.flip { 4 } else { 0 }
    }

    pub fn apply(&self, pixels: &[f64], side: usize) -> Vec<f64> {
        let mut cur: Vec<f64> = if self.flip {
            (0..side * side).map(|i| pixels[(i / side) * side + side - 1 - i % side]).collect()
        } else {
            pixels.to_vec()
        };
        for _ in 0..self.rotations % 4 {
            cur = rotate90(&cur, side);
        }
        cur
    }
}

/// Counter-clockwise quarter turn.
pub fn rotate90(pixels: &[f64], side: usize) -> Vec<f64> {
    // out[r][c] = in[c][side-1-r]
    (0..side * side).map(|i| pixels[(i % side) * side + side - 1 - i / side]).collect()
}
