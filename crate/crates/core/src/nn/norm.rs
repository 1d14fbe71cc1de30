//! Layer normalization over the channel axis (axis 1) of a rank >= 2 tensor.
//! Works for both NCHW maps and N x C x T token stacks; a T x C token matrix
//! normalizes per row (axis 1 is C there as well).

use crate::error::{Error, Result};
use crate::tensor::{debug_check_finite, Element, Tape, Tensor};

#[derive(Clone)]
pub struct LayerNorm<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<E: Element> LayerNorm<E> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(vec![dim], E::ONE).requires_grad(),
            beta: Tensor::zeros(vec![dim]).requires_grad(),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    pub fn param_count(&self) -> u64 {
        (self.gamma.numel() + self.beta.numel()) as u64
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        layer_norm(tape, x, &self.gamma, &self.beta, self.eps)
    }
}

/// Normalize over axis 1: per position, mean 0 / variance 1 across channels,
/// then the affine transform.
pub fn layer_norm<E: Element>(
    tape: &mut Tape<E>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::invalid("layer_norm", format!("rank must be >= 2, got {:?}", s)));
    }
    let c = s[1];
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::invalid(
            "layer_norm",
            format!("normalized dim {} does not match channel extent {c}", gamma.numel()),
        ));
    }
    let b = s[0];
    let m: usize = s[2..].iter().product();
    let eps = E::from_f64(eps);
    let inv_c = E::ONE / E::from_f64(c as f64);

    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![E::ZERO; xd.len()];
    // Saved statistics for backward: one (mean, inv_std) pair per position.
    let mut means = vec![E::ZERO; b * m];
    let mut invs = vec![E::ZERO; b * m];

    for bi in 0..b {
        let base = bi * c * m;
        let mean = &mut means[bi * m..(bi + 1) * m];
        for ci in 0..c {
            let row = &xd[base + ci * m..base + (ci + 1) * m];
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in mean.iter_mut() {
            *v *= inv_c;
        }
        let inv = &mut invs[bi * m..(bi + 1) * m];
        for ci in 0..c {
            let row = &xd[base + ci * m..base + (ci + 1) * m];
            for ((acc, &mu), &v) in inv.iter_mut().zip(mean.iter()).zip(row) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        for v in inv.iter_mut() {
            *v = E::ONE / (*v * inv_c + eps).sqrt();
        }
        for ci in 0..c {
            let row = &xd[base + ci * m..base + (ci + 1) * m];
            let orow = &mut out[base + ci * m..base + (ci + 1) * m];
            let (g, be) = (gd[ci], bd[ci]);
            for ((o, &v), (&mu, &iv)) in
                orow.iter_mut().zip(row).zip(mean.iter().zip(inv.iter()))
            {
                *o = (v - mu) * iv * g + be;
            }
        }
    }
    debug_check_finite("layer_norm", &out);
    let mut out = Tensor::from_vec(s.to_vec(), out)?;

    let (sx, sg, sb) = (x.sink(), gamma.sink(), beta.sink());
    let x_data = x.data_arc();
    let g_data = gamma.data_arc();
    tape.record_op(&[x, gamma, beta], &mut out, |id| {
        Box::new(move |flow| {
            let Some(d) = flow.take(id) else { return };
            let mut dx = vec![E::ZERO; x_data.len()];
            let mut dg = vec![E::ZERO; c];
            let mut dbeta = vec![E::ZERO; c];
            let mut s1 = vec![E::ZERO; m];
            let mut s2 = vec![E::ZERO; m];
            for bi in 0..b {
                let base = bi * c * m;
                let mean = &means[bi * m..(bi + 1) * m];
                let inv = &invs[bi * m..(bi + 1) * m];
                s1.iter_mut().for_each(|v| *v = E::ZERO);
                s2.iter_mut().for_each(|v| *v = E::ZERO);
                for ci in 0..c {
                    let xrow = &x_data[base + ci * m..base + (ci + 1) * m];
                    let drow = &d[base + ci * m..base + (ci + 1) * m];
                    let g = g_data[ci];
                    let (mut dgc, mut dbc) = (E::ZERO, E::ZERO);
                    for j in 0..m {
                        let xhat = (xrow[j] - mean[j]) * inv[j];
                        let dyg = drow[j] * g;
                        s1[j] += dyg;
                        s2[j] += dyg * xhat;
                        dgc += drow[j] * xhat;
                        dbc += drow[j];
                    }
                    dg[ci] += dgc;
                    dbeta[ci] += dbc;
                }
                for ci in 0..c {
                    let xrow = &x_data[base + ci * m..base + (ci + 1) * m];
                    let drow = &d[base + ci * m..base + (ci + 1) * m];
                    let dxrow = &mut dx[base + ci * m..base + (ci + 1) * m];
                    let g = g_data[ci];
                    for j in 0..m {
                        let xhat = (xrow[j] - mean[j]) * inv[j];
                        dxrow[j] = inv[j] * (drow[j] * g - (s1[j] + xhat * s2[j]) * inv_c);
                    }
                }
            }
            flow.add(&sx, dx);
            flow.add(&sg, dg);
            flow.add(&sb, dbeta);
        })
    });
    Ok(out)
}
