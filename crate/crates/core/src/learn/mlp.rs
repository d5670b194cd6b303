//! Single-hidden-layer MLP (ReLU, sigmoid output) trained with Adam on
//! logistic loss. Features are z-scored with training statistics stored in
//! the model. Parameters live in one flat vector `[w1 | b1 | w2 | b2]`,
//! which keeps the optimizer, serialization and finite-difference gradient
//! checks straightforward.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::sigmoid;
use crate::seeding::{rng_for, Domain};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Early stop: no training-loss improvement beyond `tol` for `patience`
    /// consecutive epochs.
    pub tol: f64,
    pub patience: usize,
    pub seed: u64,
    /// Test hook: start from all-zero weights instead of Glorot init.
    pub zero_init: bool,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams {
            hidden: 250,
            max_epochs: 500,
            batch_size: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            tol: 1e-4,
            patience: 10,
            seed: 0,
            zero_init: false,
        }
    }
}

/// Per-column z-score transform fitted on training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            mean.push(mu);
            std.push(if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, std }
    }

    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    pub n_features: usize,
    pub hidden: usize,
    /// `[w1 (d*h, row-major) | b1 (h) | w2 (h) | b2 (1)]`
    pub params_flat: Vec<f64>,
    pub standardizer: Standardizer,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub config: MlpParams,
}

fn n_params(d: usize, h: usize) -> usize {
    d * h + h + h + 1
}

fn views(flat: &[f64], d: usize, h: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>, ArrayView1<'_, f64>, f64) {
    let w1 = ArrayView2::from_shape((d, h), &flat[0..d * h]).expect("w1 shape");
    let b1 = ArrayView1::from(&flat[d * h..d * h + h]);
    let w2 = ArrayView1::from(&flat[d * h + h..d * h + 2 * h]);
    let b2 = flat[d * h + 2 * h];
    (w1, b1, w2, b2)
}

fn forward(flat: &[f64], d: usize, h: usize, x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let (w1, b1, w2, b2) = views(flat, d, h);
    let z1 = x.dot(&w1) + &b1;
    let a1 = z1.mapv(|v| v.max(0.0));
    let s = a1.dot(&w2) + b2;
    let p = s.mapv(sigmoid);
    (z1, p)
}

fn bce(y: &[u8], p: &Array1<f64>) -> f64 {
    let n = y.len() as f64;
    y.iter()
        .zip(p.iter())
        .map(|(&yi, &pi)| {
            let pi = pi.clamp(1e-12, 1.0 - 1e-12);
            if yi == 1 {
                -pi.ln()
            } else {
                -(1.0 - pi).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// Mean logistic loss and its gradient w.r.t. every parameter, on
/// already-standardized inputs. Exposed for the finite-difference check.
pub fn loss_and_grad(
    flat: &[f64],
    d: usize,
    h: usize,
    x_std: &Array2<f64>,
    y: &[u8],
) -> (f64, Vec<f64>) {
    let b = x_std.nrows();
    let (z1, p) = forward(flat, d, h, x_std);
    let a1 = z1.mapv(|v| v.max(0.0));
    let loss = bce(y, &p);

    let y_f: Array1<f64> = y.iter().map(|&v| v as f64).collect();
    let ds = (&p - &y_f) / b as f64;

    let (_, _, w2, _) = views(flat, d, h);
    let g_w2 = a1.t().dot(&ds);
    let g_b2 = ds.sum();
    let da1 = ds.clone().insert_axis(Axis(1)).dot(&w2.clone().insert_axis(Axis(0)));
    let mask = z1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let dz1 = &da1 * &mask;
    let g_w1 = x_std.t().dot(&dz1);
    let g_b1 = dz1.sum_axis(Axis(0));

    let mut grad = Vec::with_capacity(n_params(d, h));
    grad.extend(g_w1.iter());
    grad.extend(g_b1.iter());
    grad.extend(g_w2.iter());
    grad.push(g_b2);
    (loss, grad)
}

/// Train the MLP. Deterministic per seed; mini-batch Adam with early stop.
pub fn fit_mlp(x: &Array2<f64>, y: &[u8], params: &MlpParams) -> Result<MlpModel> {
    let (n, d) = (x.nrows(), x.ncols());
    if n == 0 || d == 0 {
        return Err(Error::Data("empty training data".into()));
    }
    if y.len() != n {
        return Err(Error::Data(format!("label length {} does not match {n} rows", y.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }
    if params.hidden == 0 {
        return Err(Error::Config("hidden size must be positive".into()));
    }
    let h = params.hidden;

    let standardizer = Standardizer::fit(x);
    let x_std = standardizer.transform(x);

    let mut rng = rng_for(params.seed, Domain::Mlp, 0);
    let mut flat = vec![0.0; n_params(d, h)];
    if !params.zero_init {
        let bound1 = (6.0 / (d + h) as f64).sqrt();
        for v in flat[0..d * h].iter_mut() {
            *v = rng.random_range(-bound1..bound1);
        }
        let bound2 = (6.0 / (h + 1) as f64).sqrt();
        for v in flat[d * h + h..d * h + 2 * h].iter_mut() {
            *v = rng.random_range(-bound2..bound2);
        }
    }

    let batch = params.batch_size.clamp(1, n);
    let mut adam_m = vec![0.0; flat.len()];
    let mut adam_v = vec![0.0; flat.len()];
    let mut t_step = 0u32;

    let mut order: Vec<usize> = (0..n).collect();
    let mut best_loss = f64::INFINITY;
    let mut stale_epochs = 0usize;
    let mut epochs_run = 0usize;
    let mut final_loss = {
        let (_, p) = forward(&flat, d, h, &x_std);
        bce(y, &p)
    };

    for _ in 0..params.max_epochs {
        epochs_run += 1;
        // Fisher-Yates with the model RNG keeps epochs reproducible.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let xb = Array2::from_shape_fn((chunk.len(), d), |(i, j)| x_std[(chunk[i], j)]);
            let yb: Vec<u8> = chunk.iter().map(|&i| y[i]).collect();
            let (_, grad) = loss_and_grad(&flat, d, h, &xb, &yb);

            t_step += 1;
            let bc1 = 1.0 - params.beta1.powi(t_step as i32);
            let bc2 = 1.0 - params.beta2.powi(t_step as i32);
            for k in 0..flat.len() {
                adam_m[k] = params.beta1 * adam_m[k] + (1.0 - params.beta1) * grad[k];
                adam_v[k] = params.beta2 * adam_v[k] + (1.0 - params.beta2) * grad[k] * grad[k];
                let m_hat = adam_m[k] / bc1;
                let v_hat = adam_v[k] / bc2;
                flat[k] -= params.learning_rate * m_hat / (v_hat.sqrt() + params.adam_eps);
            }
        }

        let (_, p) = forward(&flat, d, h, &x_std);
        final_loss = bce(y, &p);
        if final_loss < best_loss - params.tol {
            best_loss = final_loss;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= params.patience {
                break;
            }
        }
    }

    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Computation("MLP training produced non-finite weights".into()));
    }

    Ok(MlpModel {
        n_features: d,
        hidden: h,
        params_flat: flat,
        standardizer,
        epochs_run,
        final_train_loss: final_loss,
        config: params.clone(),
    })
}

impl MlpModel {
    pub fn predict_proba(&self, x: &Array2<f64>) -> Vec<f64> {
        let x_std = self.standardizer.transform(x);
        let (_, p) = forward(&self.params_flat, self.n_features, self.hidden, &x_std);
        p.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn and_data() -> (Array2<f64>, Vec<u8>) {
        (arr2(&[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]), vec![0, 0, 0, 1])
    }

    #[test]
    fn zero_init_zero_epochs_predicts_half() {
        let (x, y) = and_data();
        let m = fit_mlp(
            &x,
            &y,
            &MlpParams { zero_init: true, max_epochs: 0, ..Default::default() },
        )
        .unwrap();
        for p in m.predict_proba(&x) {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn and_function_is_learned() {
        let (x, y) = and_data();
        let m = fit_mlp(&x, &y, &MlpParams { seed: 1, ..Default::default() }).unwrap();
        let p = m.predict_proba(&x);
        for (pi, yi) in p.iter().zip(&y) {
            assert_eq!((*pi >= 0.5) as u8, *yi, "probs {p:?}");
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let (x, y) = and_data();
        let params = MlpParams { seed: 7, max_epochs: 30, ..Default::default() };
        let a = fit_mlp(&x, &y, &params).unwrap();
        let b = fit_mlp(&x, &y, &params).unwrap();
        assert_eq!(a.params_flat, b.params_flat);
        assert_eq!(a.epochs_run, b.epochs_run);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = arr2(&[
            [0.3, -1.2, 0.8],
            [-0.7, 0.4, 1.5],
            [1.1, 0.9, -0.3],
            [-0.2, -0.5, 0.6],
            [0.8, 1.3, -1.1],
        ]);
        let y = vec![1u8, 0, 1, 0, 1];
        let (d, h) = (3, 8);
        let mut rng = rng_for(3, Domain::Mlp, 9);
        let mut flat = vec![0.0; n_params(d, h)];
        for v in flat.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let (_, grad) = loss_and_grad(&flat, d, h, &x, &y);
        let eps = 1e-6;
        for k in 0..flat.len() {
            let mut plus = flat.clone();
            plus[k] += eps;
            let mut minus = flat.clone();
            minus[k] -= eps;
            let (lp, _) = loss_and_grad(&plus, d, h, &x, &y);
            let (lm, _) = loss_and_grad(&minus, d, h, &x, &y);
            let fd = (lp - lm) / (2.0 * eps);
            let denom = grad[k].abs().max(fd.abs()).max(1e-8);
            let rel = (grad[k] - fd).abs() / denom;
            assert!(rel <= 1e-4, "param {k}: analytic {} vs fd {fd}, rel {rel}", grad[k]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (x, y) = and_data();
        assert!(fit_mlp(&x, &y[..3].to_vec(), &MlpParams::default()).is_err());
        let bad = arr2(&[[f64::NAN, 1.0]]);
        assert!(fit_mlp(&bad, &[1], &MlpParams::default()).is_err());
    }
}
