//! Channel normalization with learnable affine parameters.
//!
//! Training normalizes each sample by its own spatial statistics, so batch
//! composition never couples samples: gradients for an effective batch are
//! identical under any micro-batch factorization. Running averages of the
//! per-sample statistics are kept for inference, where they are frozen.

use ndarray::{Array1, Array2};

use super::Tensor;

#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
}

impl ChannelNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
        }
    }

    /// Returns `(y, mean, var, inv_std)` with statistics per (sample, channel).
    pub fn forward_train(&self, x: &Tensor) -> (Tensor, Array2<f32>, Array2<f32>, Array2<f32>) {
        let (n, c, h, w) = x.dim();
        let m = (h * w) as f64;
        let mut y = Tensor::zeros((n, c, h, w));
        let mut mean = Array2::zeros((n, c));
        let mut var = Array2::zeros((n, c));
        let mut inv_std = Array2::zeros((n, c));
        let xs = x.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let plane = &xs[base..base + h * w];
                let mu = plane.iter().map(|&v| v as f64).sum::<f64>() / m;
                let v = plane
                    .iter()
                    .map(|&p| {
                        let d = p as f64 - mu;
                        d * d
                    })
                    .sum::<f64>()
                    / m;
                let inv = 1.0 / (v + self.eps as f64).sqrt();
                mean[(img, ch)] = mu as f32;
                var[(img, ch)] = v as f32;
                inv_std[(img, ch)] = inv as f32;
                let (g, b) = (self.gamma[ch] as f64, self.beta[ch] as f64);
                for (o, &p) in ys[base..base + h * w].iter_mut().zip(plane) {
                    *o = ((p as f64 - mu) * inv * g + b) as f32;
                }
            }
        }
        (y, mean, var, inv_std)
    }

    /// Inference path: frozen running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        let mut y = Tensor::zeros((n, c, h, w));
        let xs = x.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let inv = 1.0 / (self.running_var[ch] + self.eps).sqrt();
                let (mu, g, b) = (self.running_mean[ch], self.gamma[ch], self.beta[ch]);
                for (o, &p) in ys[base..base + h * w].iter_mut().zip(&xs[base..base + h * w]) {
                    *o = (p - mu) * inv * g + b;
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        mean: &Array2<f32>,
        inv_std: &Array2<f32>,
        dgamma: &mut Array1<f32>,
        dbeta: &mut Array1<f32>,
    ) -> Tensor {
        let (n, c, h, w) = x.dim();
        let m = (h * w) as f64;
        let mut dx = Tensor::zeros((n, c, h, w));
        let xs = x.as_slice().expect("standard layout");
        let ds = dy.as_slice().expect("standard layout");
        let os = dx.as_slice_mut().expect("standard layout");
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let mu = mean[(img, ch)] as f64;
                let inv = inv_std[(img, ch)] as f64;
                let g = self.gamma[ch] as f64;
                let mut sum_dy = 0.0f64;
                let mut sum_dy_xhat = 0.0f64;
                for i in base..base + h * w {
                    let xhat = (xs[i] as f64 - mu) * inv;
                    let d = ds[i] as f64;
                    sum_dy += d;
                    sum_dy_xhat += d * xhat;
                }
                dgamma[ch] += sum_dy_xhat as f32;
                dbeta[ch] += sum_dy as f32;
                // dL/dx = gamma * inv/m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
                let k = g * inv / m;
                for i in base..base + h * w {
                    let xhat = (xs[i] as f64 - mu) * inv;
                    os[i] = (k * (m * ds[i] as f64 - sum_dy - xhat * sum_dy_xhat)) as f32;
                }
            }
        }
        dx
    }
}
