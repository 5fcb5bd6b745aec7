//! Layer primitives with explicit forward and backward passes.
//!
//! Tensors follow the `(batch, tokens, features)` layout; linears store
//! their weight as `(out, in)` so the forward map is `y = x W^T + b`.

use ndarray::{s, Array2, Array3, Array4};

use super::params::{LayerNorm, Linear};
use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Cached normalization intermediates needed by the backward pass.
pub(crate) struct LnCache<F: Scalar> {
    pub xhat: Array3<F>,
    pub inv_std: Array2<F>,
}

pub(crate) fn layer_norm_forward<F: Scalar>(
    ln: &LayerNorm<F>,
    x: &Array3<F>,
) -> (Array3<F>, LnCache<F>) {
    let (b, t, h) = x.dim();
    let hf = F::cast(h as f64);
    let eps = F::cast(LN_EPS);
    let mut y = Array3::zeros((b, t, h));
    let mut xhat = Array3::zeros((b, t, h));
    let mut inv_std = Array2::zeros((b, t));
    for bi in 0..b {
        for ti in 0..t {
            let row = x.slice(s![bi, ti, ..]);
            let mean = row.sum() / hf;
            let mut var = F::zero();
            for &v in row.iter() {
                let d = v - mean;
                var += d * d;
            }
            var /= hf;
            let is = F::one() / (var + eps).sqrt();
            inv_std[[bi, ti]] = is;
            for k in 0..h {
                let xh = (row[k] - mean) * is;
                xhat[[bi, ti, k]] = xh;
                y[[bi, ti, k]] = ln.weight[k] * xh + ln.bias[k];
            }
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns dx and accumulates dweight/dbias into `grad`.
pub(crate) fn layer_norm_backward<F: Scalar>(
    ln: &LayerNorm<F>,
    cache: &LnCache<F>,
    dy: &Array3<F>,
    grad: &mut LayerNorm<F>,
) -> Array3<F> {
    let (b, t, h) = dy.dim();
    let hf = F::cast(h as f64);
    let mut dx = Array3::zeros((b, t, h));
    let mut dxhat = vec![F::zero(); h];
    for bi in 0..b {
        for ti in 0..t {
            let dyr = dy.slice(s![bi, ti, ..]);
            let xh = cache.xhat.slice(s![bi, ti, ..]);
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for k in 0..h {
                grad.weight[k] += dyr[k] * xh[k];
                grad.bias[k] += dyr[k];
                let d = dyr[k] * ln.weight[k];
                dxhat[k] = d;
                sum_dxhat += d;
                sum_dxhat_xhat += d * xh[k];
            }
            let is = cache.inv_std[[bi, ti]];
            let m1 = sum_dxhat / hf;
            let m2 = sum_dxhat_xhat / hf;
            for k in 0..h {
                dx[[bi, ti, k]] = is * (dxhat[k] - m1 - xh[k] * m2);
            }
        }
    }
    dx
}

pub(crate) fn linear3_forward<F: Scalar>(lin: &Linear<F>, x: &Array3<F>) -> Array3<F> {
    let (b, t, n) = x.dim();
    let xf = x
        .view()
        .into_shape_with_order((b * t, n))
        .expect("standard layout");
    let yf = xf.dot(&lin.weight.t()) + &lin.bias;
    yf.into_shape_with_order((b, t, lin.out_features()))
        .expect("standard layout")
}

/// Returns dx and accumulates weight/bias gradients into `grad`.
pub(crate) fn linear3_backward<F: Scalar>(
    lin: &Linear<F>,
    x: &Array3<F>,
    dy: &Array3<F>,
    grad: &mut Linear<F>,
) -> Array3<F> {
    let (b, t, n) = x.dim();
    let out = lin.out_features();
    let xf = x
        .view()
        .into_shape_with_order((b * t, n))
        .expect("standard layout");
    let dyf = dy
        .view()
        .into_shape_with_order((b * t, out))
        .expect("standard layout");
    grad.weight += &dyf.t().dot(&xf);
    grad.bias += &dyf.sum_axis(ndarray::Axis(0));
    let dxf = dyf.dot(&lin.weight);
    dxf.into_shape_with_order((b, t, n)).expect("standard layout")
}

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::cast(GELU_C);
    let a = F::cast(GELU_A);
    let u = c * (x + a * x * x * x);
    F::cast(0.5) * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c = F::cast(GELU_C);
    let a = F::cast(GELU_A);
    let half = F::cast(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = F::one() - th * th;
    half * (F::one() + th) + half * x * sech2 * c * (F::one() + F::cast(3.0) * a * x * x)
}

/// Row-wise stabilized softmax, in place.
pub(crate) fn softmax_rows_inplace<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Flatten images into per-patch rows. A patch at grid cell `(gy, gx)`
/// flattens channel-major: index `c*p*p + py*p + px`.
pub(crate) fn patchify<F: Scalar>(pixels: &Array4<F>, p: usize) -> Array3<F> {
    let (b, c, s, _) = pixels.dim();
    let g = s / p;
    let mut out = Array3::zeros((b, g * g, c * p * p));
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                let patch = gy * g + gx;
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            out[[bi, patch, ci * p * p + py * p + px]] =
                                pixels[[bi, ci, gy * p + py, gx * p + px]];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{Array, Array1};

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_relative_eq!(gelu_derivative(x), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array::from_shape_fn((2, 3, 8), |(b, t, k)| (b + t * 2 + k) as f64 * 0.3 - 1.0);
        let ln = LayerNorm {
            weight: Array1::ones(8),
            bias: Array1::zeros(8),
        };
        let (y, _) = layer_norm_forward(&ln, &x);
        for bi in 0..2 {
            for ti in 0..3 {
                let row = y.slice(s![bi, ti, ..]);
                let mean: f64 = row.sum() / 8.0;
                assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn patchify_geometry() {
        let mut pixels = Array4::<f64>::zeros((1, 3, 4, 4));
        pixels[[0, 1, 2, 3]] = 5.0;
        let patches = patchify(&pixels, 2);
        assert_eq!(patches.dim(), (1, 4, 12));
        // channel 1, local (py=0, px=1) of grid cell (1, 1)
        assert_eq!(patches[[0, 3, 4 + 1]], 5.0);
    }
}
