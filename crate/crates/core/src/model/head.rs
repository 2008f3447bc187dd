use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

/// Floor on `||F0||` in the normalization layer.
pub const MIN_NORM: f64 = 1e-8;

/// Returns the row-normalized matrix and the (clamped) row norms.
pub fn l2_normalize_rows(x: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(MIN_NORM));
    let mut out = x.to_owned();
    for (mut row, &n) in out.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row /= n;
    }
    (out, norms)
}

/// `dL/dF0 = (g - F (F . g)) / ||F0||` row by row.
pub fn l2_normalize_backward(unit: ArrayView2<'_, f64>, norms: &Array1<f64>, grad: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = grad.to_owned();
    for ((mut g, f), &n) in out.axis_iter_mut(Axis(0)).zip(unit.axis_iter(Axis(0))).zip(norms.iter()) {
        let along = f.dot(&g);
        Zip::from(&mut g).and(&f).for_each(|gi, &fi| *gi = (*gi - fi * along) / n);
    }
    out
}

pub fn tanh_backward(codes: ArrayView2<'_, f64>, grad: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = grad.to_owned();
    Zip::from(&mut out).and(&codes).for_each(|g, &c| *g *= 1.0 - c * c);
    out
}

/// Elementwise sign with `sign(0) = +1`.
pub fn binarize(codes: ArrayView2<'_, f64>) -> Array2<f64> {
    codes.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}
