//! Finite-difference checks of every analytic gradient in the crate.
//!
//! Error is measured per case as `max|fd - an| / max(max|fd|, max|an|, 1e-8)`
//! and the worst case is reported. The floor keeps exact plateaus, where
//! both gradients are zero up to roundoff, from reading as total failure.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::head::tanh_backward;
use crate::model::{Architecture, DescriptorModel, Head, ModelSpec};
use crate::relax::{ap_loss_batch, ap_loss_from_activations, histogram_ap, histogram_ap_grad, BinningConfig, DistanceHistogram, GroupLabels};
use crate::transformer::{affine_grid, sample_backward, sample_replicate, AffineParams, StConfig};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Random batches per loss check.
    pub loss_batches: usize,
    pub histograms: usize,
    /// Name of a check whose analytic gradient is deliberately scaled by 1%.
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            loss_batches: 50,
            histograms: 200,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub cases: usize,
    /// Coordinates skipped because a kink sat within every step size tried.
    pub excluded: usize,
    pub passed: bool,
    pub seconds: f64,
}

pub struct GradCheck {
    pub name: &'static str,
    pub tolerance: f64,
    run: fn(&GradCheckConfig, &mut Probe) -> Result<()>,
}

/// Accumulates the worst relative error and applies the corruption hook.
struct Probe {
    corrupt: bool,
    worst: f64,
    cases: usize,
    excluded: usize,
}

impl Probe {
    /// Coordinates without a finite-difference estimate are left out.
    fn compare(&mut self, analytic: Vec<f64>, fd: &[Option<f64>]) {
        let scale = if self.corrupt { 1.01 } else { 1.0 };
        let (an, fd): (Vec<f64>, Vec<f64>) = analytic.iter().zip(fd).filter_map(|(&a, f)| f.map(|f| (a * scale, f))).unzip();
        self.excluded += analytic.len() - an.len();
        self.worst = self.worst.max(rel_err(&an, &fd));
        self.cases += 1;
    }
}

const SCALE_FLOOR: f64 = 1e-8;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(SCALE_FLOOR, f64::max);
    diff / scale
}

fn central(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Central difference whose step shrinks while the one-sided slopes
/// disagree, which means a kink of a piecewise-smooth function lies inside
/// `[x - eps, x + eps]`. `None` if no step clears the kink.
fn kink_safe(f: impl Fn(f64) -> f64, x: f64) -> Option<f64> {
    let mid = f(x);
    for eps in [1e-6, 1e-7, 1e-8, 1e-9] {
        let (up, down) = (f(x + eps), f(x - eps));
        let (fwd, bwd) = ((up - mid) / eps, (mid - down) / eps);
        if (fwd - bwd).abs() <= 1e-4 * fwd.abs().max(bwd.abs()) + 1e-15 / eps {
            return Some((up - down) / (2.0 * eps));
        }
    }
    None
}

pub fn registry() -> Vec<GradCheck> {
    vec![
        GradCheck { name: "histogram_ap", tolerance: 1e-5, run: check_histogram },
        GradCheck { name: "ap_loss.euclidean", tolerance: 1e-4, run: check_loss_euclidean },
        GradCheck { name: "ap_loss.hamming", tolerance: 1e-4, run: check_loss_hamming },
        GradCheck { name: "model.linear", tolerance: 1e-4, run: |c, p| check_model(c, p, Architecture::Linear, false) },
        GradCheck { name: "model.mlp2", tolerance: 1e-4, run: |c, p| check_model(c, p, Architecture::Mlp2 { hidden: 6 }, false) },
        GradCheck { name: "model.small_conv", tolerance: 1e-4, run: |c, p| check_model(c, p, Architecture::SmallConv, false) },
        GradCheck { name: "model.linear_st", tolerance: 1e-4, run: |c, p| check_model(c, p, Architecture::Linear, true) },
        GradCheck { name: "transformer.theta", tolerance: 1e-4, run: check_theta },
    ]
}

pub fn run_check(check: &GradCheck, cfg: &GradCheckConfig) -> Result<CheckResult> {
    let start = Instant::now();
    let mut probe = Probe {
        corrupt: cfg.corrupt.as_deref() == Some(check.name),
        worst: 0.0,
        cases: 0,
        excluded: 0,
    };
    (check.run)(cfg, &mut probe)?;
    Ok(CheckResult {
        name: check.name.to_string(),
        max_rel_err: probe.worst,
        tolerance: check.tolerance,
        cases: probe.cases,
        excluded: probe.excluded,
        passed: probe.worst.is_finite() && probe.worst <= check.tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    registry().iter().map(|c| run_check(c, cfg)).collect()
}

fn check_histogram(cfg: &GradCheckConfig, probe: &mut Probe) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = 1e-6;
    for _ in 0..cfg.histograms {
        let len = rng.random_range(1..=12);
        let pos: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..3.0)).collect();
        let neg: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..6.0)).collect();
        let g = histogram_ap_grad(&DistanceHistogram::new(pos.clone(), neg.clone())?)?;
        let mut analytic = g.pos;
        analytic.extend(g.neg);
        let mut fd = Vec::with_capacity(2 * len);
        for side in 0..2 {
            for k in 0..len {
                fd.push(Some(central(
                    |v| {
                        let (mut p, mut n) = (pos.clone(), neg.clone());
                        if side == 0 {
                            p[k] = v;
                        } else {
                            n[k] = v;
                        }
                        histogram_ap(&DistanceHistogram::new(p, n).unwrap()).unwrap()
                    },
                    if side == 0 { pos[k] } else { neg[k] },
                    eps,
                )));
            }
        }
        probe.compare(analytic, &fd);
    }
    Ok(())
}

/// Labels for `m` rows in groups of two to four, no singletons.
fn group_labels(m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels = Vec::with_capacity(m);
    let mut g = 0;
    while labels.len() < m {
        let left = m - labels.len();
        let n = if left <= 4 { left } else { rng.random_range(2..=4.min(left - 2)) };
        labels.extend(std::iter::repeat_n(g, n));
        g += 1;
    }
    labels
}

fn loss_fd(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Vec<Option<f64>> {
    let mut fd = Vec::with_capacity(x.len());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            fd.push(kink_safe(
                |v| {
                    let mut y = x.clone();
                    y[[i, j]] = v;
                    f(&y)
                },
                x[[i, j]],
            ));
        }
    }
    fd
}

/// Euclidean loss differentiated through L2 normalization of raw activations.
fn check_loss_euclidean(cfg: &GradCheckConfig, probe: &mut Probe) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE0C1);
    for _ in 0..cfg.loss_batches {
        let m = rng.random_range(4..=32);
        let d = rng.random_range(2..=8);
        let bins = BinningConfig::euclidean(rng.random_range(3..=10))?;
        let labels = group_labels(m, &mut rng);
        let x = Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0..1.0));
        let sup = GroupLabels(&labels);
        let an = ap_loss_from_activations(x.view(), &sup, &bins)?.grad_embeddings;
        let fd = loss_fd(&x, |y| ap_loss_from_activations(y.view(), &sup, &bins).unwrap().loss);
        probe.compare(an.into_iter().collect(), &fd);
    }
    Ok(())
}

/// Hamming loss on tanh codes, differentiated with respect to pre-activations.
fn check_loss_hamming(cfg: &GradCheckConfig, probe: &mut Probe) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4A11);
    for _ in 0..cfg.loss_batches {
        let m = rng.random_range(4..=32);
        let d = rng.random_range(2..=8);
        let bins = BinningConfig::hamming(d)?;
        let labels = group_labels(m, &mut rng);
        let x = Array2::from_shape_fn((m, d), |_| rng.random_range(-1.5..1.5));
        let sup = GroupLabels(&labels);
        let codes = x.mapv(f64::tanh);
        let g = ap_loss_batch(codes.view(), &sup, &bins)?.grad_embeddings;
        let an = tanh_backward(codes.view(), g.view());
        let fd = loss_fd(&x, |y| ap_loss_batch(y.mapv(f64::tanh).view(), &sup, &bins).unwrap().loss);
        probe.compare(an.into_iter().collect(), &fd);
    }
    Ok(())
}

fn smooth_batch(rows: usize, side: usize, rng: &mut impl Rng) -> Array2<f64> {
    // Bilinear sampling and ReLU are piecewise linear; smooth inputs keep
    // their kinks out of finite-difference reach.
    let shapes: Vec<(f64, f64)> = (0..rows).map(|_| (rng.random_range(0.0..6.0), rng.random_range(0.1..0.4))).collect();
    Array2::from_shape_fn((rows, side * side), |(k, i)| {
        let (r, c) = ((i / side) as f64, (i % side) as f64);
        let (phase, freq) = shapes[k];
        (r * freq + phase).sin() + (c * 0.2 + r * 0.1 - phase).cos()
    })
}

/// Parameter gradient of the batch AP loss through the full model, for
/// both heads. Up to ~300 parameters are sampled per model plus the last 40.
fn check_model(cfg: &GradCheckConfig, probe: &mut Probe, arch: Architecture, st: bool) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x30DE);
    for head in [Head::UnitNorm, Head::TanhCode] {
        let dim = 4;
        let mut spec = ModelSpec::new(arch, dim, head);
        if st {
            spec = spec.with_st(StConfig::default());
        }
        let mut model = DescriptorModel::new(spec, cfg.seed)?;
        if st {
            // Zoom in and jitter off the identity. At the identity the outer
            // ring of taps sits on the image border, where clamping puts a
            // full-size kink within finite-difference reach.
            let segs: Vec<_> = model.segments().iter().filter(|s| s.name.starts_with("st.")).cloned().collect();
            let theta_bias = segs.last().expect("localization segments").clone();
            model.update_params(|p| {
                for s in &segs {
                    let r = if s.name.ends_with("weight") { 0.002 } else { 0.01 };
                    p[s.offset..s.offset + s.len].iter_mut().for_each(|v| *v += rng.random_range(-r..r));
                }
                p[theta_bias.offset] -= 0.2;
                p[theta_bias.offset + 4] -= 0.2;
            });
        }
        let bins = match head {
            Head::UnitNorm => BinningConfig::euclidean(10)?,
            Head::TanhCode => BinningConfig::hamming(dim)?,
        };
        let labels = [0, 0, 1, 1, 2, 2];
        let sup = GroupLabels(&labels);
        let x = smooth_batch(labels.len(), spec.input_side(), &mut rng);
        let loss = |m: &DescriptorModel| -> f64 {
            let (f, _) = m.forward(x.view()).unwrap();
            ap_loss_batch(f.view(), &sup, &bins).unwrap().loss
        };
        let (f, cache) = model.forward(x.view())?;
        let g = ap_loss_batch(f.view(), &sup, &bins)?.grad_embeddings;
        let grad = model.backward(&cache, g.view())?;

        let n = grad.len();
        let stride = (n / 300).max(1);
        let picks: Vec<usize> = (0..n).step_by(stride).chain(n.saturating_sub(40)..n).collect();
        let work = std::cell::RefCell::new(model.clone());
        let fd: Vec<Option<f64>> = picks
            .iter()
            .map(|&i| {
                let at = |v: f64| {
                    work.borrow_mut().update_params(|p| p[i] = v);
                    loss(&work.borrow())
                };
                let base = model.params()[i];
                let d = kink_safe(at, base);
                work.borrow_mut().update_params(|p| p[i] = base);
                d
            })
            .collect();
        probe.compare(picks.iter().map(|&i| grad[i]).collect(), &fd);
    }
    Ok(())
}

fn check_theta(cfg: &GradCheckConfig, probe: &mut Probe) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7E7A);
    let (side, out) = (42, 32);
    for _ in 0..20 {
        let img = smooth_batch(1, side, &mut rng).into_raw_vec_and_offset().0;
        let upstream: Vec<f64> = (0..out * out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let theta = AffineParams([
            rng.random_range(0.7..1.1),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.7..1.1),
            rng.random_range(-0.2..0.2),
        ]);
        let value = |t: &AffineParams| -> f64 { sample_replicate(&img, side, &affine_grid(t, out)).iter().zip(&upstream).map(|(a, b)| a * b).sum() };
        let (_, gt) = sample_backward(&img, side, &theta, out, &upstream);
        let fd: Vec<Option<f64>> = (0..6)
            .map(|k| {
                kink_safe(
                    |v| {
                        let mut t = theta;
                        t.0[k] = v;
                        value(&t)
                    },
                    theta.0[k],
                )
            })
            .collect();
        probe.compare(gt.0.to_vec(), &fd);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradCheckConfig {
        GradCheckConfig {
            loss_batches: 8,
            histograms: 40,
            ..GradCheckConfig::default()
        }
    }

    #[test]
    fn every_check_passes() {
        for r in run_all(&quick()).unwrap() {
            assert!(r.passed, "{r:?}");
            assert!(r.cases > 0);
        }
    }

    #[test]
    fn corrupted_gradient_fails_only_its_check() {
        let cfg = GradCheckConfig {
            corrupt: Some("ap_loss.hamming".into()),
            ..quick()
        };
        for r in run_all(&cfg).unwrap() {
            assert_eq!(r.passed, r.name != "ap_loss.hamming", "{r:?}");
        }
    }

    #[test]
    fn groups_have_no_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for m in 4..40 {
            let l = group_labels(m, &mut rng);
            assert_eq!(l.len(), m);
            for g in 0..=*l.last().unwrap() {
                assert!(l.iter().filter(|&&x| x == g).count() >= 2);
            }
        }
    }
}
