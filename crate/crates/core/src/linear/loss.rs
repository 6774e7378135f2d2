//! C-scaled regularized objectives `½‖w‖² + C·Σ loss` with analytic
//! gradients. Parameters are flat: weights row-major, then intercepts.
//! Intercepts are never penalized.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Smooth objective over a flat parameter vector.
pub trait Objective {
    fn num_params(&self) -> usize;

    /// Returns the objective value and writes the gradient into `grad`.
    fn value_grad(&self, params: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, params: &[f64]) -> f64 {
        let mut g = vec![0.0; self.num_params()];
        self.value_grad(params, &mut g)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn margins(x: ArrayView2<f64>, w: ArrayView1<f64>, b: f64) -> Array1<f64> {
    x.dot(&w) + b
}

fn split_wb(params: &[f64], d: usize) -> (ArrayView1<'_, f64>, f64) {
    (ArrayView1::from(&params[..d]), params[d])
}

/// Binary logistic regression; `y` holds ±1.
pub struct BinaryLogistic<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView1<'a, f64>,
    pub c: f64,
}

impl Objective for BinaryLogistic<'_> {
    fn num_params(&self) -> usize {
        self.x.ncols() + 1
    }

    fn value_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.x.ncols();
        let (w, b) = split_wb(params, d);
        let z = margins(self.x, w, b);
        let mut loss = 0.0;
        // coef_i = dloss/dz_i
        let coef: Array1<f64> = z
            .iter()
            .zip(self.y)
            .map(|(&zi, &yi)| {
                loss += softplus(-yi * zi);
                -yi * sigmoid(-yi * zi) * self.c
            })
            .collect();
        let gw = self.x.t().dot(&coef);
        for j in 0..d {
            grad[j] = w[j] + gw[j];
        }
        grad[d] = coef.sum();
        0.5 * w.dot(&w) + self.c * loss
    }
}

/// Multinomial (softmax cross-entropy) logistic regression over K classes.
/// `classes[i]` is the class index of row i.
pub struct Multinomial<'a> {
    pub x: ArrayView2<'a, f64>,
    pub classes: &'a [usize],
    pub k: usize,
    pub c: f64,
}

impl Multinomial<'_> {
    pub fn unpack(&self, params: &[f64]) -> (Array2<f64>, Array1<f64>) {
        let d = self.x.ncols();
        let w = Array2::from_shape_vec((self.k, d), params[..self.k * d].to_vec()).unwrap();
        let b = Array1::from(params[self.k * d..].to_vec());
        (w, b)
    }
}

/// Row-wise softmax in place; returns log-sum-exp per row.
pub fn softmax_rows(z: &mut Array2<f64>) -> Array1<f64> {
    let mut lse = Array1::zeros(z.nrows());
    for (mut row, out) in z.axis_iter_mut(Axis(0)).zip(lse.iter_mut()) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
        *out = max + sum.ln();
    }
    lse
}

impl Objective for Multinomial<'_> {
    fn num_params(&self) -> usize {
        self.k * (self.x.ncols() + 1)
    }

    fn value_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.x.ncols();
        let (w, b) = self.unpack(params);
        let mut z = self.x.dot(&w.t()) + &b;
        let mut loss = 0.0;
        for (i, &cls) in self.classes.iter().enumerate() {
            loss -= z[[i, cls]];
        }
        let lse = softmax_rows(&mut z);
        loss += lse.sum();
        // z now holds probabilities; turn into C·(p - onehot)
        for (i, &cls) in self.classes.iter().enumerate() {
            z[[i, cls]] -= 1.0;
        }
        z.mapv_inplace(|v| v * self.c);
        let gw = z.t().dot(&self.x);
        let gb = z.sum_axis(Axis(0));
        for k in 0..self.k {
            for j in 0..d {
                grad[k * d + j] = w[[k, j]] + gw[[k, j]];
            }
            grad[self.k * d + k] = gb[k];
        }
        0.5 * w.iter().map(|v| v * v).sum::<f64>() + self.c * loss
    }
}

/// Squared-hinge linear SVM primal; `y` holds ±1.
pub struct SquaredHinge<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView1<'a, f64>,
    pub c: f64,
}

impl Objective for SquaredHinge<'_> {
    fn num_params(&self) -> usize {
        self.x.ncols() + 1
    }

    fn value_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.x.ncols();
        let (w, b) = split_wb(params, d);
        let z = margins(self.x, w, b);
        let mut loss = 0.0;
        let coef: Array1<f64> = z
            .iter()
            .zip(self.y)
            .map(|(&zi, &yi)| {
                let slack = (1.0 - yi * zi).max(0.0);
                loss += slack * slack;
                -2.0 * self.c * yi * slack
            })
            .collect();
        let gw = self.x.t().dot(&coef);
        for j in 0..d {
            grad[j] = w[j] + gw[j];
        }
        grad[d] = coef.sum();
        0.5 * w.dot(&w) + self.c * loss
    }
}

/// Hinge-loss SVM primal value (non-smooth, no gradient).
pub fn hinge_primal(x: ArrayView2<f64>, y: ArrayView1<f64>, w: ArrayView1<f64>, b: f64, c: f64) -> f64 {
    let z = margins(x, w, b);
    let loss: f64 = z.iter().zip(y).map(|(&zi, &yi)| (1.0 - yi * zi).max(0.0)).sum();
    0.5 * w.dot(&w) + c * loss
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_scalar_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(1000.0).is_finite());
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((sigmoid(-745.0)).is_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut z = ndarray::array![[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]];
        let lse = softmax_rows(&mut z);
        for row in z.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((z[[1, 0]] - 1.0 / 3.0).abs() < 1e-15);
        assert!((lse[1] - (1000.0 + 3f64.ln())).abs() < 1e-9);
    }
}
