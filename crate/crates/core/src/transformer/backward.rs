use rayon::prelude::*;

use super::forward::{axpy, dot, gelu_grad, SeqCache};
use super::{LinearIdx, Model};
use crate::dynamics::Tokenized;
use crate::error::{Error, Result};

/// Loss and its gradient with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Accumulate `dW += dyᵀx`, `db += Σdy` and optionally `dx += dy·W`.
fn linear_back(
    params: &[f64],
    grad: &mut [f64],
    li: LinearIdx,
    x: &[f64],
    dy: &[f64],
    rows: usize,
    mut dx: Option<&mut [f64]>,
) {
    let w = &params[li.w..li.w + li.out * li.inp];
    for r in 0..rows {
        let xr = &x[r * li.inp..(r + 1) * li.inp];
        let dyr = &dy[r * li.out..(r + 1) * li.out];
        for (o, &d) in dyr.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[li.b + o] += d;
            axpy(&mut grad[li.w + o * li.inp..li.w + (o + 1) * li.inp], d, xr);
            if let Some(dx) = dx.as_deref_mut() {
                axpy(&mut dx[r * li.inp..(r + 1) * li.inp], d, &w[o * li.inp..(o + 1) * li.inp]);
            }
        }
    }
}

impl Model {
    /// Backpropagate `dy` (`len × token_dim`, gradient of the loss with
    /// respect to the readout) through a cached forward pass.
    pub(crate) fn backward_seq(&self, tokens: &[f64], len: usize, cache: &SeqCache, dy: &[f64], grad: &mut [f64]) {
        let p = &self.params;
        let h = self.config.hidden;
        let lay = &self.layout;
        let scale = 1.0 / (h as f64).sqrt();

        let mut dh = vec![0.0; len * h];
        linear_back(p, grad, lay.readout, &cache.h_final, dy, len, Some(&mut dh));

        for (li, c) in lay.layers.iter().zip(&cache.layers).rev() {
            // h_out = r + m, m = W2·gelu(u) + b2, u = W1·r + b1
            let mut dr = dh.clone();
            let mut dg = vec![0.0; len * li.mlp_in.out];
            linear_back(p, grad, li.mlp_out, &c.g, &dh, len, Some(&mut dg));
            let du: Vec<f64> = dg.iter().zip(&c.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            linear_back(p, grad, li.mlp_in, &c.r, &du, len, Some(&mut dr));

            // r = h_in + a, a = Wo·z + bo
            let mut dz = vec![0.0; len * h];
            linear_back(p, grad, li.o, &c.z, &dr, len, Some(&mut dz));
            let mut dq = vec![0.0; len * h];
            let mut dk = vec![0.0; len * h];
            let mut dv = vec![0.0; len * h];
            let mut dp = vec![0.0; len];
            for i in 0..len {
                let dzi = &dz[i * h..(i + 1) * h];
                let row = &c.probs[i * len..i * len + i + 1];
                let mut weighted = 0.0;
                for (j, pj) in row.iter().enumerate() {
                    dp[j] = dot(dzi, &c.v[j * h..(j + 1) * h]);
                    weighted += pj * dp[j];
                    axpy(&mut dv[j * h..(j + 1) * h], *pj, dzi);
                }
                let qi = &c.q[i * h..(i + 1) * h];
                for (j, pj) in row.iter().enumerate() {
                    let ds = pj * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    axpy(&mut dq[i * h..(i + 1) * h], ds, &c.k[j * h..(j + 1) * h]);
                    axpy(&mut dk[j * h..(j + 1) * h], ds, qi);
                }
            }
            let mut dh_in = dr;
            linear_back(p, grad, li.q, &c.h_in, &dq, len, Some(&mut dh_in));
            linear_back(p, grad, li.k, &c.h_in, &dk, len, Some(&mut dh_in));
            linear_back(p, grad, li.v, &c.h_in, &dv, len, Some(&mut dh_in));
            dh = dh_in;
        }

        linear_back(p, grad, lay.embed, tokens, &dh, len, None);
        axpy(&mut grad[lay.pos..lay.pos + len * h], 1.0, &dh);
    }

    /// Masked MSE and its gradient for one series, scaled by `weight`
    /// (the loss is `weight · Σ err²`).
    fn series_gradient(&self, tok: &Tokenized, series: usize, len: usize, weight: f64) -> (f64, Vec<f64>) {
        let d = tok.token_dim;
        let tokens = tok.series(series);
        let mut cache = SeqCache::default();
        let y = self.forward_seq(tokens, len, &mut |_, _| {}, Some(&mut cache));
        let mut dy = vec![0.0; len * d];
        let mut sq = 0.0;
        for (t, &m) in tok.mask.iter().enumerate().take(len) {
            if !m {
                continue;
            }
            let target = tok.target(series, t);
            for k in 0..d {
                let err = y[t * d + k] - target[k];
                sq += err * err;
                dy[t * d + k] = 2.0 * weight * err;
            }
        }
        let mut grad = vec![0.0; self.layout.total];
        self.backward_seq(tokens, len, &cache, &dy, &mut grad);
        (weight * sq, grad)
    }
}

/// Mean squared error over the masked positions of the series in `idx`,
/// with its exact gradient.
pub fn batch_gradient(model: &Model, tok: &Tokenized, idx: &[usize]) -> Result<Gradient> {
    batch_gradient_scaled(model, tok, idx, 1.0)
}

/// As [`batch_gradient`] for the loss multiplied by `scale`.
pub fn batch_gradient_scaled(model: &Model, tok: &Tokenized, idx: &[usize], scale: f64) -> Result<Gradient> {
    let n_mask = tok.mask.iter().filter(|m| **m).count();
    if n_mask == 0 || idx.is_empty() {
        return Err(Error::usage("empty batch or loss mask"));
    }
    if tok.seq_len > model.config.max_seq_len || tok.token_dim != model.config.token_dim {
        return Err(Error::usage("batch does not fit the model"));
    }
    let len = tok.input_len();
    let weight = scale / (idx.len() * n_mask * tok.token_dim) as f64;
    // Per-series results are reduced in index order so the sum does not
    // depend on the thread count.
    let parts: Vec<(f64, Vec<f64>)> = idx
        .par_iter()
        .map(|&s| model.series_gradient(tok, s, len, weight))
        .collect();
    let mut grad = vec![0.0; model.layout.total];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        axpy(&mut grad, 1.0, &g);
    }
    Ok(Gradient { loss, grad })
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::dynamics::{generate_linreg, tokenize, LinregConfig};

    #[test]
    fn unused_positional_rows_have_zero_gradient() {
        let tok = tokenize(&generate_linreg(&LinregConfig::train(4, 3), 2).unwrap());
        let model = Model::init(ModelConfig::new(1, 4, 1, 20, 1)).unwrap();
        let g = batch_gradient(&model, &tok, &[0, 1, 2, 3]).unwrap();
        let pos = model.layout.tensors.iter().find(|t| t.name == "pos").unwrap();
        let used = tok.input_len() * 4;
        let rows = &g.grad[pos.offset..pos.offset + pos.len()];
        assert!(rows[..used].iter().any(|v| *v != 0.0));
        assert!(rows[used..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let tok = tokenize(&generate_linreg(&LinregConfig::train(3, 4), 5).unwrap());
        let model = Model::init(ModelConfig::new(2, 4, 1, 8, 2)).unwrap();
        let g1 = batch_gradient(&model, &tok, &[0, 1, 2]).unwrap();
        let g2 = batch_gradient_scaled(&model, &tok, &[0, 1, 2], 2.0).unwrap();
        assert_eq!(g2.loss, 2.0 * g1.loss);
        for (a, b) in g1.grad.iter().zip(&g2.grad) {
            assert_eq!(*b, 2.0 * a);
        }
    }
}
