//! Affine spatial transformer with replicate boundary handling.
//!
//! Normalized coordinates span `[-1, 1]` over the full image, with `-1` and
//! `+1` at the centers of the first and last pixels. The transform maps an
//! output lattice point `(x, y)` to `theta * (x, y, 1)` in input space.
//! Samples that fall outside the image read the nearest boundary pixel.

use serde::{Deserialize, Serialize};

use crate::model::layers::LayerSpec;

/// 2x3 row-major affine transform from output to input normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams(pub [f64; 6]);

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let t = &self.0;
        (t[0] * x + t[1] * y + t[2], t[3] * x + t[4] * y + t[5])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StConfig {
    pub input_size: usize,
    pub output_size: usize,
    /// Learning-rate multiplier for the transform-predicting network.
    pub localization_lr_scale: f64,
}

impl Default for StConfig {
    fn default() -> Self {
        Self {
            input_size: 42,
            output_size: 32,
            localization_lr_scale: 0.01,
        }
    }
}

/// The regular `side x side` lattice over `[-1, 1]^2`, row-major.
fn lattice(side: usize) -> impl Iterator<Item = (f64, f64)> {
    let step = if side > 1 { 2.0 / (side - 1) as f64 } else { 0.0 };
    (0..side * side).map(move |i| {
        let (r, c) = (i / side, i % side);
        (-1.0 + c as f64 * step, -1.0 + r as f64 * step)
    })
}

/// Input-space sampling coordinates for every output pixel.
pub fn affine_grid(theta: &AffineParams, out_size: usize) -> Vec<(f64, f64)> {
    lattice(out_size).map(|(x, y)| theta.apply(x, y)).collect()
}

/// Pixel coordinate of a normalized coordinate, clamped to the image, plus
/// whether clamping was active.
fn to_pixel(v: f64, side: usize) -> (f64, bool) {
    let max = (side - 1) as f64;
    let p = (v + 1.0) * 0.5 * max;
    if p < 0.0 {
        (0.0, true)
    } else if p > max {
        (max, true)
    } else {
        (p, false)
    }
}

/// Bilinear cell: lower index and fractional offset, always with a valid upper neighbor.
fn cell(p: f64, side: usize) -> (usize, f64) {
    if side == 1 {
        return (0, 0.0);
    }
    let i = (p.floor() as usize).min(side - 2);
    (i, p - i as f64)
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
    clamped_x: bool,
    clamped_y: bool,
}

fn tap(x: f64, y: f64, side: usize) -> Tap {
    let (px, clamped_x) = to_pixel(x, side);
    let (py, clamped_y) = to_pixel(y, side);
    let (x0, fx) = cell(px, side);
    let (y0, fy) = cell(py, side);
    Tap {
        x0,
        y0,
        fx,
        fy,
        clamped_x,
        clamped_y,
    }
}

fn neighbors(t: &Tap, side: usize) -> [(usize, f64); 4] {
    let x1 = (t.x0 + 1).min(side - 1);
    let y1 = (t.y0 + 1).min(side - 1);
    [
        (t.y0 * side + t.x0, (1.0 - t.fx) * (1.0 - t.fy)),
        (t.y0 * side + x1, t.fx * (1.0 - t.fy)),
        (y1 * side + t.x0, (1.0 - t.fx) * t.fy),
        (y1 * side + x1, t.fx * t.fy),
    ]
}

/// Bilinear resampling of a square `in_side` image at `grid` with
/// replicate padding.
pub fn sample_replicate(image: &[f64], in_side: usize, grid: &[(f64, f64)]) -> Vec<f64> {
    debug_assert_eq!(image.len(), in_side * in_side);
    grid.iter()
        .map(|&(x, y)| {
            let t = tap(x, y, in_side);
            let [a, b, c, d] = neighbors(&t, in_side).map(|(i, _)| image[i]);
            // Lerp form so that equal neighbors reproduce their value exactly.
            let top = a + t.fx * (b - a);
            let bottom = c + t.fx * (d - c);
            top + t.fy * (bottom - top)
        })
        .collect()
}

/// Gradients of a scalar loss with respect to the input image and the six
/// transform entries, given `upstream = dL/d(output)`.
pub fn sample_backward(image: &[f64], in_side: usize, theta: &AffineParams, out_size: usize, upstream: &[f64]) -> (Vec<f64>, AffineParams) {
    let mut grad_image = vec![0.0; image.len()];
    let mut grad_theta = [0.0; 6];
    let half_extent = 0.5 * (in_side - 1) as f64;
    for ((bx, by), &g) in lattice(out_size).zip(upstream) {
        if g == 0.0 {
            continue;
        }
        let (x, y) = theta.apply(bx, by);
        let t = tap(x, y, in_side);
        let nb = neighbors(&t, in_side);
        for &(i, w) in &nb {
            grad_image[i] += g * w;
        }
        let [a, b, c, d] = nb.map(|(i, _)| image[i]);
        // d(out)/d(pixel coordinate), zero along clamped axes.
        let dpx = if t.clamped_x { 0.0 } else { (1.0 - t.fy) * (b - a) + t.fy * (d - c) };
        let dpy = if t.clamped_y { 0.0 } else { (1.0 - t.fx) * (c - a) + t.fx * (d - b) };
        let gx = g * dpx * half_extent;
        let gy = g * dpy * half_extent;
        grad_theta[0] += gx * bx;
        grad_theta[1] += gx * by;
        grad_theta[2] += gx;
        grad_theta[3] += gy * bx;
        grad_theta[4] += gy * by;
        grad_theta[5] += gy;
    }
    (grad_image, AffineParams(grad_theta))
}

/// Three strided convolutions followed by a six-output affine layer.
pub fn localization_layers(input_size: usize) -> Vec<LayerSpec> {
    let c1 = LayerSpec::Conv {
        in_ch: 1,
        out_ch: 4,
        kernel: 5,
        stride: 2,
        in_side: input_size,
    };
    let c2 = LayerSpec::Conv {
        in_ch: 4,
        out_ch: 8,
        kernel: 3,
        stride: 2,
        in_side: c1.out_side(),
    };
    let c3 = LayerSpec::Conv {
        in_ch: 8,
        out_ch: 8,
        kernel: 3,
        stride: 2,
        in_side: c2.out_side(),
    };
    let flat = 8 * c3.out_side() * c3.out_side();
    vec![
        c1,
        LayerSpec::Relu,
        c2,
        LayerSpec::Relu,
        c3,
        LayerSpec::Relu,
        LayerSpec::Affine { inputs: flat, outputs: 6 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_image(side: usize, rng: &mut impl Rng) -> Vec<f64> {
        let (a, b, c) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..3.0));
        (0..side * side)
            .map(|i| {
                let (r, col) = ((i / side) as f64 / side as f64, (i % side) as f64 / side as f64);
                (a * col * 3.0 + c).sin() + (b * r * 4.0).cos() + 0.3 * col * r
            })
            .collect()
    }

    #[test]
    fn identity_grid_is_the_lattice() {
        let g = affine_grid(&AffineParams::IDENTITY, 32);
        assert_eq!(g.len(), 1024);
        assert_eq!(g[0], (-1.0, -1.0));
        assert_eq!(g[31], (1.0, -1.0));
        assert_eq!(g[1023], (1.0, 1.0));
        assert!((g[1].0 - (-1.0 + 2.0 / 31.0)).abs() < 1e-15);
    }

    #[test]
    fn translation_shifts_x() {
        let id = affine_grid(&AffineParams::IDENTITY, 8);
        let g = affine_grid(&AffineParams([1.0, 0.0, 0.5, 0.0, 1.0, 0.0]), 8);
        for (a, b) in id.iter().zip(&g) {
            assert!((b.0 - a.0 - 0.5).abs() < 1e-15);
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn rotation_by_ninety_degrees() {
        // (x, y) -> (-y, x)
        let rot = AffineParams([0.0, -1.0, 0.0, 1.0, 0.0, 0.0]);
        let id = affine_grid(&AffineParams::IDENTITY, 5);
        let g = affine_grid(&rot, 5);
        for (a, b) in id.iter().zip(&g) {
            assert_eq!(*b, (-a.1, a.0));
        }
    }

    #[test]
    fn identity_on_equal_sizes_copies_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = smooth_image(9, &mut rng);
        let out = sample_replicate(&img, 9, &affine_grid(&AffineParams::IDENTITY, 9));
        for (a, b) in img.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_stays_constant_under_zoom_out() {
        let img = vec![0.7; 42 * 42];
        for theta in [AffineParams::IDENTITY, AffineParams([2.0, 0.0, 0.0, 0.0, 2.0, 0.0])] {
            let out = sample_replicate(&img, 42, &affine_grid(&theta, 32));
            assert!(out.iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn far_top_left_reads_the_corner() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = smooth_image(42, &mut rng);
        let theta = AffineParams([0.1, 0.0, -5.0, 0.0, 0.1, -5.0]);
        let out = sample_replicate(&img, 42, &affine_grid(&theta, 32));
        assert!(out.iter().all(|&v| v == img[0]));
    }

    #[test]
    fn outputs_stay_within_image_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let img: Vec<f64> = (0..42 * 42).map(|_| rng.random_range(-3.0..5.0)).collect();
            let theta = AffineParams(std::array::from_fn(|_| rng.random_range(-3.0..3.0)));
            let (lo, hi) = img.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            for v in sample_replicate(&img, 42, &affine_grid(&theta, 32)) {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    fn probe_loss(img: &[f64], theta: &AffineParams, probe: &[f64]) -> f64 {
        sample_replicate(img, 42, &affine_grid(theta, 32)).iter().zip(probe).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn theta_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let img = smooth_image(42, &mut rng);
            let probe: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
            let theta = AffineParams([
                rng.random_range(0.7..1.1),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(0.7..1.1),
                rng.random_range(-0.2..0.2),
            ]);
            let (_, gt) = sample_backward(&img, 42, &theta, 32, &probe);
            let eps = 1e-7;
            let mut fd = [0.0; 6];
            for k in 0..6 {
                let mut up = theta;
                up.0[k] += eps;
                let mut down = theta;
                down.0[k] -= eps;
                fd[k] = (probe_loss(&img, &up, &probe) - probe_loss(&img, &down, &probe)) / (2.0 * eps);
            }
            let diff = fd.iter().zip(&gt.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff / scale < 1e-4, "{fd:?} vs {:?}", gt.0);
        }
    }

    #[test]
    fn image_gradient_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = smooth_image(42, &mut rng);
        let probe: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let theta = AffineParams([1.3, 0.2, 0.1, -0.1, 0.9, 0.3]);
        let (gi, _) = sample_backward(&img, 42, &theta, 32, &probe);
        // Sampling is linear in the image, so L(img) = <grad, img>.
        let direct = probe_loss(&img, &theta, &probe);
        let via_grad: f64 = gi.iter().zip(&img).map(|(a, b)| a * b).sum();
        assert!((direct - via_grad).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs_have_zero_gradients() {
        let flat = vec![2.0; 42 * 42];
        let probe = vec![1.0; 1024];
        let theta = AffineParams([0.8, 0.1, 0.0, 0.0, 0.9, 0.1]);
        let (_, gt) = sample_backward(&flat, 42, &theta, 32, &probe);
        assert!(gt.0.iter().all(|v| v.abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = smooth_image(42, &mut rng);
        let (gi, gt) = sample_backward(&img, 42, &theta, 32, &vec![0.0; 1024]);
        assert!(gi.iter().all(|&v| v == 0.0));
        assert!(gt.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clamped_axes_carry_no_spatial_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = smooth_image(42, &mut rng);
        // Entire grid left of the image: x is clamped, y is not.
        let theta = AffineParams([0.1, 0.0, -3.0, 0.0, 0.8, 0.0]);
        let (_, gt) = sample_backward(&img, 42, &theta, 32, &vec![1.0; 1024]);
        assert_eq!(&gt.0[..3], &[0.0, 0.0, 0.0]);
        assert!(gt.0[3..].iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn localization_stack_shapes() {
        let specs = localization_layers(42);
        let net = crate::model::layers::Net::new(&specs, 0);
        assert_eq!(net.input_len(), 42 * 42);
        assert_eq!(net.output_len(), 6);
        assert_eq!(specs.iter().filter(|s| matches!(s, LayerSpec::Conv { .. })).count(), 3);
    }
}
