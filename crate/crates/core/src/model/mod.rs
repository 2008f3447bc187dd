//! Patch to descriptor mappings with explicit forward and backward passes.

pub mod checkpoint;
pub mod head;
pub mod layers;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::patch::Patch;
use crate::transformer::{affine_grid, localization_layers, sample_backward, sample_replicate, AffineParams, StConfig};
use crate::{Error, Result};
use layers::{LayerSpec, Net};

/// Side of the square patch seen by the descriptor trunk.
pub const PATCH_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    Linear,
    /// Two affine layers with a tanh hidden layer.
    Mlp2 { hidden: usize },
    /// Two strided convolutions with ReLU, then an affine layer.
    SmallConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// `F = F0 / ||F0||`, compared with Euclidean distance.
    UnitNorm,
    /// `F = tanh(f)`, binarized by sign at evaluation time.
    TanhCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub dim: usize,
    pub head: Head,
    pub st: Option<StConfig>,
}

impl ModelSpec {
    pub fn new(arch: Architecture, dim: usize, head: Head) -> Self {
        Self { arch, dim, head, st: None }
    }

    pub fn with_st(mut self, st: StConfig) -> Self {
        self.st = Some(st);
        self
    }

    /// Side of the patches the model consumes.
    pub fn input_side(&self) -> usize {
        self.st.map_or(PATCH_SIDE, |st| st.input_size)
    }

    fn trunk_side(&self) -> usize {
        self.st.map_or(PATCH_SIDE, |st| st.output_size)
    }

    fn trunk_layers(&self) -> Vec<LayerSpec> {
        let inputs = self.trunk_side() * self.trunk_side();
        let d = self.dim;
        match self.arch {
            Architecture::Linear => vec![LayerSpec::Affine { inputs, outputs: d }],
            Architecture::Mlp2 { hidden } => vec![
                LayerSpec::Affine { inputs, outputs: hidden },
                LayerSpec::Tanh,
                LayerSpec::Affine { inputs: hidden, outputs: d },
            ],
            Architecture::SmallConv => {
                let c1 = LayerSpec::Conv {
                    in_ch: 1,
                    out_ch: 8,
                    kernel: 5,
                    stride: 2,
                    in_side: self.trunk_side(),
                };
                let c2 = LayerSpec::Conv {
                    in_ch: 8,
                    out_ch: 16,
                    kernel: 3,
                    stride: 2,
                    in_side: c1.out_side(),
                };
                let flat = 16 * c2.out_side() * c2.out_side();
                vec![c1, LayerSpec::Relu, c2, LayerSpec::Relu, LayerSpec::Affine { inputs: flat, outputs: d }]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("model.dim must be positive".into()));
        }
        if let Architecture::Mlp2 { hidden: 0 } = self.arch {
            return Err(Error::Config("model.hidden must be positive".into()));
        }
        if let Some(st) = self.st {
            if st.input_size < 19 || st.output_size < 13 || !(st.localization_lr_scale > 0.0) {
                return Err(Error::Config(format!("unsupported transformer sizes {}->{}", st.input_size, st.output_size)));
            }
        }
        Ok(())
    }
}

/// A named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub lr_scale: f64,
}

#[derive(Debug, Clone)]
pub struct DescriptorModel {
    spec: ModelSpec,
    seed: u64,
    params: Vec<f64>,
    segments: Vec<Segment>,
    trunk: Net,
    loc: Option<Net>,
    generation: u64,
}

/// Intermediates of one forward call, consumed by [`DescriptorModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    input: Option<Array2<f64>>,
    thetas: Vec<AffineParams>,
    loc_inputs: Vec<Array2<f64>>,
    trunk_inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
    norms: Option<ndarray::Array1<f64>>,
}

impl ForwardCache {
    /// Transform predicted for each item (identity when no transformer).
    pub fn thetas(&self) -> &[AffineParams] {
        &self.thetas
    }
}

fn segments_for(net: &Net, prefix: &str, lr_scale: f64) -> Vec<Segment> {
    let mut out = Vec::new();
    for (i, (spec, offset)) in net.layers().enumerate() {
        let (w, b) = spec.param_shape();
        if w == 0 {
            continue;
        }
        out.push(Segment {
            name: format!("{prefix}.{i}.weight"),
            offset,
            len: w,
            lr_scale,
        });
        out.push(Segment {
            name: format!("{prefix}.{i}.bias"),
            offset: offset + w,
            len: b,
            lr_scale,
        });
    }
    out
}

impl DescriptorModel {
    /// Fresh model with seeded fan-in scaled initialization. A transformer,
    /// if present, starts out predicting the identity.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(spec, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.trunk.init(&mut model.params, &mut rng);
        if let Some(loc) = &model.loc {
            loc.init(&mut model.params, &mut rng);
            let (last, offset) = loc.layers().last().expect("localization layers");
            let (w, b) = last.param_shape();
            model.params[offset..offset + w].iter_mut().for_each(|p| *p = 0.0);
            model.params[offset + w..offset + w + b].copy_from_slice(&AffineParams::IDENTITY.0);
        }
        Ok(model)
    }

    /// All-zero parameters with the layout of `spec`.
    pub fn zeroed(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let trunk = Net::new(&spec.trunk_layers(), 0);
        let mut segments = segments_for(&trunk, "trunk", 1.0);
        let loc = spec.st.map(|st| {
            let net = Net::new(&localization_layers(st.input_size), trunk.param_len());
            segments.extend(segments_for(&net, "st.loc", st.localization_lr_scale));
            net
        });
        let len = trunk.param_len() + loc.as_ref().map_or(0, Net::param_len);
        Ok(Self {
            spec,
            seed,
            params: vec![0.0; len],
            segments,
            trunk,
            loc,
            generation: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Learning-rate multiplier of every parameter.
    pub fn lr_scales(&self) -> Vec<f64> {
        let mut out = vec![1.0; self.params.len()];
        for s in &self.segments {
            out[s.offset..s.offset + s.len].iter_mut().for_each(|v| *v = s.lr_scale);
        }
        out
    }

    /// Mutates parameters. Caches from earlier forward calls become stale.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.params);
        self.generation += 1;
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        self.update_params(|p| p.copy_from_slice(params));
        Ok(())
    }

    /// `batch` holds one normalized `input_side^2` patch per row.
    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        let side = self.spec.input_side();
        if batch.ncols() != side * side {
            return Err(Error::Shape(format!("model expects {side}x{side} patches, got rows of {}", batch.ncols())));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input pixel".into()));
        }
        let (trunk_in, thetas, loc_inputs, input) = match (&self.loc, self.spec.st) {
            (Some(loc), Some(st)) => {
                let (raw, loc_inputs) = loc.forward(&self.params, batch.to_owned());
                let thetas: Vec<AffineParams> = raw.rows().into_iter().map(|r| AffineParams(std::array::from_fn(|k| r[k]))).collect();
                if thetas.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Numeric("non-finite transform prediction".into()));
                }
                let mut sampled = Array2::zeros((batch.nrows(), st.output_size * st.output_size));
                for ((row, theta), mut dst) in batch.rows().into_iter().zip(&thetas).zip(sampled.rows_mut()) {
                    let img = row.to_vec();
                    let out = sample_replicate(&img, side, &affine_grid(theta, st.output_size));
                    dst.iter_mut().zip(out).for_each(|(d, v)| *d = v);
                }
                (sampled, thetas, loc_inputs, Some(batch.to_owned()))
            }
            _ => (batch.to_owned(), vec![AffineParams::IDENTITY; batch.nrows()], Vec::new(), None),
        };
        let (pre, trunk_inputs) = self.trunk.forward(&self.params, trunk_in);
        if pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite descriptor activation".into()));
        }
        let (output, norms) = match self.spec.head {
            Head::UnitNorm => {
                let (u, n) = head::l2_normalize_rows(pre.view());
                // finite activations can still overflow the squared norm
                if n.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("descriptor norm overflowed".into()));
                }
                (u, Some(n))
            }
            Head::TanhCode => (pre.mapv(f64::tanh), None),
        };
        let cache = ForwardCache {
            generation: self.generation,
            input,
            thetas,
            loc_inputs,
            trunk_inputs,
            output: output.clone(),
            norms,
        };
        Ok((output, cache))
    }

    /// Gradient of the loss with respect to every parameter, given
    /// `dL/dF` for the embeddings produced by the matching forward call.
    pub fn backward(&self, cache: &ForwardCache, grad_embeddings: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if cache.generation != self.generation {
            return Err(Error::Contract("forward cache is stale: parameters changed since it was produced".into()));
        }
        if grad_embeddings.dim() != cache.output.dim() {
            return Err(Error::Shape(format!("gradient shape {:?} does not match embeddings {:?}", grad_embeddings.dim(), cache.output.dim())));
        }
        let grad_pre = match (self.spec.head, &cache.norms) {
            (Head::UnitNorm, Some(norms)) => head::l2_normalize_backward(cache.output.view(), norms, grad_embeddings),
            _ => head::tanh_backward(cache.output.view(), grad_embeddings),
        };
        let mut grad = vec![0.0; self.params.len()];
        let grad_trunk_in = self.trunk.backward(&self.params, &cache.trunk_inputs, grad_pre, &mut grad);
        if let (Some(loc), Some(st), Some(input)) = (&self.loc, self.spec.st, &cache.input) {
            let side = st.input_size;
            let mut grad_theta = Array2::zeros((input.nrows(), 6));
            for (i, (row, up)) in input.rows().into_iter().zip(grad_trunk_in.rows()).enumerate() {
                let (_, gt) = sample_backward(&row.to_vec(), side, &cache.thetas[i], st.output_size, &up.to_vec());
                grad_theta.row_mut(i).iter_mut().zip(gt.0).for_each(|(d, v)| *d = v);
            }
            loc.backward(&self.params, &cache.loc_inputs, grad_theta, &mut grad);
        }
        Ok(grad)
    }

    /// Normalizes, stacks and embeds patches in chunks.
    pub fn embed(&self, patches: &[&Patch]) -> Result<Array2<f64>> {
        let side = self.spec.input_side();
        let mut out = Array2::zeros((patches.len(), self.spec.dim));
        for (chunk, mut dst) in patches.chunks(256).zip(out.axis_chunks_iter_mut(Axis(0), 256)) {
            let batch = stack_normalized(chunk, side)?;
            let (emb, _) = self.forward(batch.view())?;
            dst.assign(&emb);
        }
        Ok(out)
    }
}

/// Row-stacks normalized patches, checking their size.
pub fn stack_normalized(patches: &[&Patch], side: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((patches.len(), side * side));
    for (p, mut row) in patches.iter().zip(out.rows_mut()) {
        if p.side != side {
            return Err(Error::Shape(format!("patch is {}x{}, model expects {side}x{side}", p.side, p.side)));
        }
        row.iter_mut().zip(crate::patch::normalize_input(&p.pixels)).for_each(|(d, v)| *d = v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{resize_bilinear, Provenance};
    use rand::Rng;

    fn batch(rows: usize, side: usize, seed: u64) -> Array2<f64> {
        // Smooth images: bilinear sampling is piecewise linear between pixels,
        // so noisy inputs put kinks within finite-difference reach.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<(f64, f64)> = (0..rows).map(|_| (rng.random_range(0.0..6.0), rng.random_range(0.1..0.4))).collect();
        Array2::from_shape_fn((rows, side * side), |(k, i)| {
            let (r, c) = ((i / side) as f64, (i % side) as f64);
            let (phase, freq) = phases[k];
            (r * freq + phase).sin() + (c * 0.2 + r * 0.1 - phase).cos()
        })
    }

    fn probe_loss(model: &DescriptorModel, x: &Array2<f64>, probe: &Array2<f64>) -> f64 {
        (&model.forward(x.view()).unwrap().0 * probe).sum()
    }

    fn fd_check(spec: ModelSpec, perturb_loc: bool) {
        let mut model = DescriptorModel::new(spec, 5).unwrap();
        if perturb_loc {
            // Move off the identity so bilinear taps avoid lattice points.
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let segs: Vec<Segment> = model.segments().iter().filter(|s| s.name.starts_with("st.")).cloned().collect();
            model.update_params(|p| {
                for s in segs {
                    for v in &mut p[s.offset..s.offset + s.len] {
                        *v += rng.random_range(-0.01..0.01);
                    }
                }
            });
        }
        let x = batch(3, spec.input_side(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe = Array2::from_shape_fn((3, spec.dim), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = model.forward(x.view()).unwrap();
        let grad = model.backward(&cache, probe.view()).unwrap();

        let n = model.params().len();
        let stride = (n / 300).max(1);
        let eps = 1e-6;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in (0..n).step_by(stride).chain(n.saturating_sub(40)..n) {
            let base = model.params()[i];
            let mut m = model.clone();
            m.update_params(|p| p[i] = base + eps);
            let up = probe_loss(&m, &x, &probe);
            m.update_params(|p| p[i] = base - eps);
            let fd = (up - probe_loss(&m, &x, &probe)) / (2.0 * eps);
            num = num.max((fd - grad[i]).abs());
            den = den.max(fd.abs()).max(grad[i].abs());
        }
        assert!(num / den <= 1e-4, "{spec:?}: rel err {}", num / den);
    }

    #[test]
    fn parameter_gradients_all_architectures_and_heads() {
        for arch in [Architecture::Linear, Architecture::Mlp2 { hidden: 6 }, Architecture::SmallConv] {
            for head in [Head::UnitNorm, Head::TanhCode] {
                fd_check(ModelSpec::new(arch, 4, head), false);
            }
        }
    }

    #[test]
    fn parameter_gradients_with_transformer() {
        fd_check(ModelSpec::new(Architecture::Linear, 4, Head::UnitNorm).with_st(StConfig::default()), true);
        fd_check(ModelSpec::new(Architecture::Mlp2 { hidden: 5 }, 3, Head::TanhCode).with_st(StConfig::default()), true);
    }

    #[test]
    fn head_contracts() {
        let x = batch(5, 32, 1);
        let m = DescriptorModel::new(ModelSpec::new(Architecture::SmallConv, 8, Head::UnitNorm), 1).unwrap();
        let (f, _) = m.forward(x.view()).unwrap();
        for r in f.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
        }
        let m = DescriptorModel::new(ModelSpec::new(Architecture::Mlp2 { hidden: 16 }, 8, Head::TanhCode), 1).unwrap();
        let (f, _) = m.forward(x.view()).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn linear_projection_fixture() {
        let spec = ModelSpec::new(Architecture::Linear, 3, Head::UnitNorm);
        let mut m = DescriptorModel::zeroed(spec, 0).unwrap();
        // Rows of W pick pixels 0, 1 and 2, scaled by 2.
        m.update_params(|p| {
            for k in 0..3 {
                p[k * 1024 + k] = 2.0;
            }
        });
        let mut x = Array2::zeros((1, 1024));
        x[[0, 0]] = 3.0;
        x[[0, 1]] = 0.0;
        x[[0, 2]] = 4.0;
        let (f, _) = m.forward(x.view()).unwrap();
        assert!((f[[0, 0]] - 0.6).abs() < 1e-12 && f[[0, 1]] == 0.0 && (f[[0, 2]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = DescriptorModel::new(ModelSpec::new(Architecture::SmallConv, 4, Head::TanhCode).with_st(StConfig::default()), 2).unwrap();
        let x = batch(2, 42, 4);
        let (_, cache) = m.forward(x.view()).unwrap();
        let g = m.backward(&cache, Array2::zeros((2, 4)).view()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = DescriptorModel::new(ModelSpec::new(Architecture::Linear, 2, Head::UnitNorm), 2).unwrap();
        let x = batch(2, 32, 4);
        let (_, cache) = m.forward(x.view()).unwrap();
        m.update_params(|p| p[0] += 1.0);
        assert!(matches!(m.backward(&cache, Array2::zeros((2, 2)).view()), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ModelSpec::new(Architecture::SmallConv, 6, Head::UnitNorm);
        let a = DescriptorModel::new(spec, 9).unwrap();
        let b = DescriptorModel::new(spec, 9).unwrap();
        assert_eq!(a.params(), b.params());
        let x = batch(4, 32, 8);
        assert_eq!(a.forward(x.view()).unwrap().0, b.forward(x.view()).unwrap().0);
    }

    #[test]
    fn identity_transformer_matches_resampled_plain_forward() {
        let plain = DescriptorModel::new(ModelSpec::new(Architecture::Mlp2 { hidden: 8 }, 6, Head::UnitNorm), 4).unwrap();
        let with_st = DescriptorModel::new(plain.spec().with_st(StConfig::default()), 4).unwrap();
        assert_eq!(&with_st.params()[..plain.params().len()], plain.params());
        let x = batch(3, 42, 6);
        let mut resampled = Array2::zeros((3, 1024));
        for (src, mut dst) in x.rows().into_iter().zip(resampled.rows_mut()) {
            dst.iter_mut().zip(resize_bilinear(&src.to_vec(), 42, 32)).for_each(|(d, v)| *d = v);
        }
        let (a, _) = with_st.forward(x.view()).unwrap();
        let (b, _) = plain.forward(resampled.view()).unwrap();
        assert!((&a - &b).iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn segments_cover_parameters() {
        let m = DescriptorModel::new(ModelSpec::new(Architecture::SmallConv, 4, Head::UnitNorm).with_st(StConfig::default()), 1).unwrap();
        let total: usize = m.segments().iter().map(|s| s.len).sum();
        assert_eq!(total, m.params().len());
        assert!(m.segment("trunk.0.weight").is_some());
        let scales = m.lr_scales();
        let loc = m.segment("st.loc.6.bias").unwrap();
        assert_eq!(&m.params()[loc.offset..loc.offset + 6], &AffineParams::IDENTITY.0);
        assert!(scales[loc.offset] == 0.01 && scales[0] == 1.0);
    }

    #[test]
    fn embed_rejects_wrong_size() {
        let m = DescriptorModel::new(ModelSpec::new(Architecture::Linear, 2, Head::UnitNorm), 1).unwrap();
        let p = Patch::new(16, vec![0.0; 256], Provenance { sequence: 0, group: 0, index: 0 });
        assert!(matches!(m.embed(&[&p]), Err(Error::Shape(_))));
    }
}
