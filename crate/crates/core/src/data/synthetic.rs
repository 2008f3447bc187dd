//! Procedural patch groups for desk-scale experiments.
//!
//! Each group owns a smooth random texture (a sum of oriented sinusoids,
//! optionally blended with a texture shared by its whole sequence). Its views
//! are that texture under a small random affine warp, a random gain and
//! offset, and independent pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{quantize, DatasetBuilder, PatchDataset, Split};
use crate::transformer::{affine_grid, sample_replicate, AffineParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    /// Number of sinusoids summed per texture.
    pub components: usize,
    /// Highest spatial frequency, in cycles per patch width.
    pub max_frequency: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            components: 6,
            max_frequency: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_sequences: usize,
    pub groups_per_sequence: usize,
    pub group_size: usize,
    pub side: usize,
    pub texture: TextureSpec,
    /// Weight of the per-sequence texture in every group texture, in `[0, 1)`.
    /// Higher values make groups of one sequence look alike.
    pub sequence_mix: f64,
    /// Bound on the entries of the affine perturbation, in normalized units.
    pub warp: f64,
    /// Relative gain and offset jitter.
    pub photometric: f64,
    /// Standard deviation of the pixel noise, in gray levels.
    pub noise: f64,
    /// The last `test_sequences` sequences are tagged as test data, the
    /// `val_sequences` before them as validation data.
    pub val_sequences: usize,
    pub test_sequences: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_sequences: 4,
            groups_per_sequence: 16,
            group_size: 4,
            side: 32,
            texture: TextureSpec::default(),
            sequence_mix: 0.0,
            warp: 0.05,
            photometric: 0.1,
            noise: 8.0,
            val_sequences: 0,
            test_sequences: 0,
            seed: 0,
        }
    }
}

struct Texture(Vec<[f64; 4]>);

impl Texture {
    fn random(spec: &TextureSpec, rng: &mut impl Rng) -> Texture {
        Texture(
            (0..spec.components)
                .map(|_| {
                    let angle = rng.random_range(0.0..std::f64::consts::PI);
                    let freq = rng.random_range(0.5..spec.max_frequency.max(0.5 + 1e-9)) * std::f64::consts::PI;
                    [freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0)]
                })
                .collect(),
        )
    }

    /// Value at normalized coordinates, roughly in `[-1, 1]`.
    fn eval(&self, x: f64, y: f64) -> f64 {
        let norm: f64 = self.0.iter().map(|c| c[3]).sum::<f64>().max(1e-12);
        self.0.iter().map(|c| c[3] * (c[0] * x + c[1] * y + c[2]).sin()).sum::<f64>() / norm * 2.0
    }
}

fn render(side: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let step = 2.0 / (side - 1) as f64;
    (0..side * side)
        .map(|i| f(-1.0 + (i % side) as f64 * step, -1.0 + (i / side) as f64 * step))
        .collect()
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<PatchDataset> {
    if cfg.group_size < 2 {
        return Err(Error::Config("synthetic group_size must be at least 2".into()));
    }
    if cfg.side < 2 || cfg.num_sequences == 0 || cfg.groups_per_sequence == 0 {
        return Err(Error::Config("synthetic dataset needs side >= 2 and at least one sequence and group".into()));
    }
    if !(0.0..1.0).contains(&cfg.sequence_mix) || cfg.warp < 0.0 || cfg.photometric < 0.0 || cfg.noise < 0.0 {
        return Err(Error::Config("synthetic jitter parameters out of range".into()));
    }
    if cfg.val_sequences + cfg.test_sequences > cfg.num_sequences {
        return Err(Error::Config("more held-out sequences than sequences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut b = DatasetBuilder::new(cfg.side);
    let first_val = cfg.num_sequences - cfg.val_sequences - cfg.test_sequences;
    let first_test = cfg.num_sequences - cfg.test_sequences;
    for s in 0..cfg.num_sequences {
        let split = if s >= first_test {
            Split::Test
        } else if s >= first_val {
            Split::Val
        } else {
            Split::Train
        };
        let seq = b.add_sequence(format!("syn_{s:03}"), None);
        let shared = Texture::random(&cfg.texture, &mut rng);
        for _ in 0..cfg.groups_per_sequence {
            let group = b.add_group(seq, split);
            let own = Texture::random(&cfg.texture, &mut rng);
            let mix = cfg.sequence_mix;
            let base = render(cfg.side, |x, y| mix * shared.eval(x, y) + (1.0 - mix) * own.eval(x, y));
            for _ in 0..cfg.group_size {
                let mut view = if cfg.warp > 0.0 {
                    let w = cfg.warp;
                    let mut t = AffineParams::IDENTITY;
                    for v in &mut t.0 {
                        *v += rng.random_range(-w..=w);
                    }
                    sample_replicate(&base, cfg.side, &affine_grid(&t, cfg.side))
                } else {
                    base.clone()
                };
                let (gain, offset) = if cfg.photometric > 0.0 {
                    let p = cfg.photometric;
                    (1.0 + rng.random_range(-p..=p), rng.random_range(-p..=p))
                } else {
                    (1.0, 0.0)
                };
                for v in &mut view {
                    *v = 128.0 + 48.0 * (gain * *v + offset);
                    if cfg.noise > 0.0 {
                        *v += noise.sample(&mut rng);
                    }
                }
                let pixels: Vec<u8> = view.into_iter().map(quantize).collect();
                b.add_patch(group, &pixels, None);
            }
        }
    }
    b.build()
}
