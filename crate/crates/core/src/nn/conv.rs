//! 2-D convolution over NCHW tensors. Supported group counts are 1 (dense,
//! including the 1x1 pointwise case) and C (depthwise); that is all the
//! architecture uses.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{debug_check_finite, kernels, Element, Tape, Tensor};

/// Convolution parameters plus the owned weight/bias tensors.
#[derive(Clone)]
pub struct Conv2d<E: Element> {
    pub weight: Tensor<E>, // (out, in/groups, k, k)
    pub bias: Option<Tensor<E>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<E: Element> Conv2d<E> {
    pub fn new(
        weight: Tensor<E>,
        bias: Option<Tensor<E>>,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if stride < 1 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if kernel_size < 1 {
            return Err(Error::invalid("conv2d", "kernel size must be >= 1"));
        }
        if groups != 1 && !(groups == in_channels && groups == out_channels) {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "groups must be 1 or C (depthwise): groups={groups}, in={in_channels}, out={out_channels}"
                ),
            ));
        }
        let expect_w = vec![out_channels, in_channels / groups, kernel_size, kernel_size];
        if weight.shape() != expect_w.as_slice() {
            return Err(Error::shape("conv2d weight", weight.shape(), &expect_w));
        }
        if let Some(b) = &bias {
            if b.shape() != [out_channels] {
                return Err(Error::shape("conv2d bias", b.shape(), &[out_channels]));
            }
        }
        Ok(Conv2d { weight, bias, in_channels, out_channels, kernel_size, stride, padding, groups })
    }

    /// Same-size padding for odd kernels; errors on even kernels.
    pub fn same_padding(kernel_size: usize) -> Result<usize> {
        if kernel_size % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("same-size padding requires an odd kernel, got {kernel_size}"),
            ));
        }
        Ok((kernel_size - 1) / 2)
    }

    /// Fresh conv with truncated-normal weights and zero bias.
    pub fn init<R: rand::Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = super::trunc_normal::<E, R>(
            rng,
            vec![out_channels, in_channels / groups, kernel_size, kernel_size],
            0.02,
        )
        .requires_grad();
        let bias = with_bias.then(|| Tensor::zeros(vec![out_channels]).requires_grad());
        Conv2d::new(weight, bias, in_channels, out_channels, kernel_size, stride, padding, groups)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1
    }

    pub fn param_count(&self) -> u64 {
        self.weight.numel() as u64 + self.bias.as_ref().map_or(0, |b| b.numel() as u64)
    }

    /// Output spatial extents for the given input extents.
    pub fn out_extents(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel_size;
        let p = self.padding;
        let s = self.stride;
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    /// MACs for a forward pass at the given input extents.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_extents(h, w);
        (oh * ow * self.out_channels * (self.in_channels / self.groups)) as u64
            * (self.kernel_size * self.kernel_size) as u64
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv2d(tape, x, self)
    }
}

/// Convolution forward with tape recording.
pub fn conv2d<E: Element>(tape: &mut Tape<E>, x: &Tensor<E>, p: &Conv2d<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("conv2d", format!("expected NCHW input, got {:?}", s)));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c != p.in_channels {
        return Err(Error::invalid(
            "conv2d",
            format!("input has {c} channels, layer expects {}", p.in_channels),
        ));
    }
    if h + 2 * p.padding < p.kernel_size || w + 2 * p.padding < p.kernel_size {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "spatial extents {h}x{w} smaller than kernel reach {} after padding {}",
                p.kernel_size, p.padding
            ),
        ));
    }
    let (oh, ow) = p.out_extents(h, w);

    let data = if p.is_depthwise() {
        depthwise_forward(x.data(), p, n, h, w, oh, ow)
    } else {
        dense_forward(x.data(), p, n, h, w, oh, ow)
    };
    debug_check_finite("conv2d", &data);
    let mut out = Tensor::from_vec(vec![n, p.out_channels, oh, ow], data)?;

    let mut inputs = vec![x, &p.weight];
    if let Some(b) = &p.bias {
        inputs.push(b);
    }
    let sx = x.sink();
    let sw = p.weight.sink();
    let sb = p.bias.as_ref().map(|b| b.sink());
    let x_data = x.data_arc();
    let w_data = p.weight.data_arc();
    let cfg = ConvDims {
        n,
        c_in: p.in_channels,
        c_out: p.out_channels,
        h,
        w,
        oh,
        ow,
        k: p.kernel_size,
        stride: p.stride,
        padding: p.padding,
        depthwise: p.is_depthwise(),
    };
    tape.record_op(&inputs, &mut out, |id| {
        Box::new(move |flow| {
            let Some(d) = flow.take(id) else { return };
            let (dx, dw, db) = conv_backward(&d, &x_data, &w_data, &cfg);
            flow.add(&sx, dx);
            flow.add(&sw, dw);
            if let Some(sb) = sb {
                flow.add(&sb, db);
            }
        })
    });
    Ok(out)
}

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    padding: usize,
    depthwise: bool,
}

fn dense_forward<E: Element>(
    x: &[E],
    p: &Conv2d<E>,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let (c_in, c_out, k) = (p.in_channels, p.out_channels, p.kernel_size);
    let wdat = p.weight.data();
    let plane_in = h * w;
    let plane_out = oh * ow;
    let mut out = vec![E::ZERO; n * c_out * plane_out];

    if k == 1 && p.stride == 1 && p.padding == 0 {
        // Pointwise: a per-pixel matrix multiply.
        for ni in 0..n {
            let xin = &x[ni * c_in * plane_in..(ni + 1) * c_in * plane_in];
            let y = kernels::matmul_nn(wdat, xin, c_out, c_in, plane_in);
            out[ni * c_out * plane_out..(ni + 1) * c_out * plane_out].copy_from_slice(&y);
        }
    } else {
        // im2col per image, then one matmul against (c_out, c_in*k*k).
        let cols_rows = c_in * k * k;
        for ni in 0..n {
            let xin = &x[ni * c_in * plane_in..(ni + 1) * c_in * plane_in];
            let cols = im2col(xin, c_in, h, w, k, p.stride, p.padding, oh, ow);
            let y = kernels::matmul_nn(wdat, &cols, c_out, cols_rows, plane_out);
            out[ni * c_out * plane_out..(ni + 1) * c_out * plane_out].copy_from_slice(&y);
        }
    }
    if let Some(b) = &p.bias {
        add_bias(&mut out, b.data(), n, c_out, plane_out);
    }
    out
}

fn depthwise_forward<E: Element>(
    x: &[E],
    p: &Conv2d<E>,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let c = p.in_channels;
    let k = p.kernel_size;
    let (stride, padding) = (p.stride, p.padding);
    let wdat = p.weight.data();
    let plane_in = h * w;
    let plane_out = oh * ow;
    let mut out = vec![E::ZERO; n * c * plane_out];

    let run_plane = |idx: usize, plane: &mut [E]| {
        let (ni, ci) = (idx / c, idx % c);
        let xin = &x[(ni * c + ci) * plane_in..(ni * c + ci + 1) * plane_in];
        let wk = &wdat[ci * k * k..(ci + 1) * k * k];
        for oy in 0..oh {
            let row = &mut plane[oy * ow..(oy + 1) * ow];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let xrow = &xin[iy as usize * w..(iy as usize + 1) * w];
                for kx in 0..k {
                    let coeff = wk[ky * k + kx];
                    let off = kx as isize - padding as isize;
                    for (ox, o) in row.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize + off;
                        if ix >= 0 && ix < w as isize {
                            *o += coeff * xrow[ix as usize];
                        }
                    }
                }
            }
        }
    };
    if n * c * plane_out * k * k >= (1 << 17) {
        out.par_chunks_mut(plane_out).enumerate().for_each(|(i, pl)| run_plane(i, pl));
    } else {
        for (i, pl) in out.chunks_mut(plane_out).enumerate() {
            run_plane(i, pl);
        }
    }
    if let Some(b) = &p.bias {
        add_bias(&mut out, b.data(), n, c, plane_out);
    }
    out
}

fn add_bias<E: Element>(out: &mut [E], bias: &[E], n: usize, c: usize, plane: usize) {
    for ni in 0..n {
        for (ci, &b) in bias.iter().enumerate().take(c) {
            for v in &mut out[(ni * c + ci) * plane..(ni * c + ci + 1) * plane] {
                *v += b;
            }
        }
    }
}

fn im2col<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let plane_out = oh * ow;
    let mut cols = vec![E::ZERO; c * k * k * plane_out];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * plane_out
                    ..((ci * k + ky) * k + kx + 1) * plane_out];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * ow + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<E: Element>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    let plane_out = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * plane_out
                    ..((ci * k + ky) * k + kx + 1) * plane_out];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out[(ci * h + iy as usize) * w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns (d_input, d_weight, d_bias).
fn conv_backward<E: Element>(
    d: &[E],
    x: &[E],
    wdat: &[E],
    cfg: &ConvDims,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let ConvDims { n, c_in, c_out, h, w, oh, ow, k, stride, padding, depthwise } = *cfg;
    let plane_in = h * w;
    let plane_out = oh * ow;
    let mut dx = vec![E::ZERO; n * c_in * plane_in];
    let mut dw = vec![E::ZERO; wdat.len()];
    let mut db = vec![E::ZERO; c_out];

    for ni in 0..n {
        for ci in 0..c_out {
            let drow = &d[(ni * c_out + ci) * plane_out..(ni * c_out + ci + 1) * plane_out];
            let mut acc = E::ZERO;
            for &g in drow {
                acc += g;
            }
            db[ci] += acc;
        }
    }

    if depthwise {
        let c = c_in;
        for ni in 0..n {
            for ci in 0..c {
                let dplane = &d[(ni * c + ci) * plane_out..(ni * c + ci + 1) * plane_out];
                let xplane = &x[(ni * c + ci) * plane_in..(ni * c + ci + 1) * plane_in];
                let dxplane = &mut dx[(ni * c + ci) * plane_in..(ni * c + ci + 1) * plane_in];
                let wk = &wdat[ci * k * k..(ci + 1) * k * k];
                let dwk = &mut dw[ci * k * k..(ci + 1) * k * k];
                for oy in 0..oh {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let g = dplane[oy * ow + ox];
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    let xi = iy * w + ix as usize;
                                    dxplane[xi] += wk[ky * k + kx] * g;
                                    dwk[ky * k + kx] += xplane[xi] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    } else if k == 1 && stride == 1 && padding == 0 {
        for ni in 0..n {
            let dn = &d[ni * c_out * plane_out..(ni + 1) * c_out * plane_out];
            let xn = &x[ni * c_in * plane_in..(ni + 1) * c_in * plane_in];
            // dW += dOut . X^T ; dX = W^T . dOut
            let dwn = kernels::matmul_nt(dn, xn, c_out, plane_out, c_in);
            for (a, b) in dw.iter_mut().zip(&dwn) {
                *a += *b;
            }
            let dxn = kernels::matmul_tn(wdat, dn, c_in, c_out, plane_in);
            dx[ni * c_in * plane_in..(ni + 1) * c_in * plane_in].copy_from_slice(&dxn);
        }
    } else {
        let cols_rows = c_in * k * k;
        for ni in 0..n {
            let dn = &d[ni * c_out * plane_out..(ni + 1) * c_out * plane_out];
            let xn = &x[ni * c_in * plane_in..(ni + 1) * c_in * plane_in];
            let cols = im2col(xn, c_in, h, w, k, stride, padding, oh, ow);
            let dwn = kernels::matmul_nt(dn, &cols, c_out, plane_out, cols_rows);
            for (a, b) in dw.iter_mut().zip(&dwn) {
                *a += *b;
            }
            let dcols = kernels::matmul_tn(wdat, dn, cols_rows, c_out, plane_out);
            col2im_add(
                &dcols,
                c_in,
                h,
                w,
                k,
                stride,
                padding,
                oh,
                ow,
                &mut dx[ni * c_in * plane_in..(ni + 1) * c_in * plane_in],
            );
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sum, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pointwise_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c: Conv2d<f32> = Conv2d::init(&mut rng, 24, 32, 1, 1, 0, 1, true).unwrap();
        assert_eq!(c.param_count(), 24 * 32 + 32);
    }

    #[test]
    fn depthwise_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c: Conv2d<f32> = Conv2d::init(&mut rng, 64, 64, 5, 1, 2, 64, true).unwrap();
        assert_eq!(c.param_count(), 64 * 25 + 64);
    }

    #[test]
    fn depthwise_stride2_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c: Conv2d<f64> = Conv2d::init(&mut rng, 8, 8, 3, 2, 1, 8, true).unwrap();
        let x = Tensor::zeros(vec![1, 8, 14, 14]);
        let mut tape = Tape::inactive();
        let y = c.forward(&mut tape, &x).unwrap();
        assert_eq!(y.shape(), &[1, 8, 7, 7]);
    }

    #[test]
    fn even_kernel_same_padding_is_an_error() {
        assert!(Conv2d::<f32>::same_padding(4).is_err());
        assert_eq!(Conv2d::<f32>::same_padding(9).unwrap(), 4);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c: Conv2d<f64> = Conv2d::init(&mut rng, 8, 8, 3, 1, 1, 8, true).unwrap();
        let x = Tensor::zeros(vec![1, 4, 8, 8]);
        let mut tape = Tape::inactive();
        assert!(c.forward(&mut tape, &x).is_err());
    }

    #[test]
    fn invalid_group_count_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(Conv2d::<f32>::init(&mut rng, 8, 8, 3, 1, 1, 2, true).is_err());
    }

    /// 1x1 conv with groups=1 equals a per-pixel matrix multiply.
    #[test]
    fn pointwise_equals_per_pixel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv: Conv2d<f32> = Conv2d::init(&mut rng, 5, 7, 1, 1, 0, 1, true).unwrap();
        let x: Tensor<f32> = super::super::trunc_normal(&mut rng, vec![2, 5, 4, 3], 1.0);
        let mut tape = Tape::inactive();
        let y = conv.forward(&mut tape, &x).unwrap();

        let wd = conv.weight.data();
        let bd = conv.bias.as_ref().unwrap().data();
        let mut max_diff = 0.0f32;
        for n in 0..2 {
            for py in 0..4 {
                for px in 0..3 {
                    for co in 0..7 {
                        let mut acc = bd[co];
                        for ci in 0..5 {
                            acc += wd[co * 5 + ci] * x.data()[((n * 5 + ci) * 4 + py) * 3 + px];
                        }
                        let got = y.data()[((n * 7 + co) * 4 + py) * 3 + px];
                        max_diff = max_diff.max((acc - got).abs());
                    }
                }
            }
        }
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn stride1_same_padding_preserves_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [1usize, 3, 5, 9] {
            let pad = Conv2d::<f32>::same_padding(k).unwrap();
            let c: Conv2d<f32> = Conv2d::init(&mut rng, 4, 4, k, 1, pad, 4, true).unwrap();
            let x = Tensor::zeros(vec![1, 4, 10, 11]);
            let mut tape = Tape::inactive();
            let y = c.forward(&mut tape, &x).unwrap();
            assert_eq!(y.shape(), &[1, 4, 10, 11]);
        }
    }

    #[test]
    fn dense_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv: Conv2d<f64> = Conv2d::init(&mut rng, 2, 3, 3, 2, 1, 1, true).unwrap();
        let x: Tensor<f64> =
            super::super::trunc_normal(&mut rng, vec![1, 2, 5, 5], 1.0).requires_grad();

        let mut tape = Tape::new();
        let y = conv.forward(&mut tape, &x).unwrap();
        let loss = sum(&mut tape, &y).unwrap();
        tape.backward(&loss).unwrap();
        let gx = x.grad().unwrap();
        let gw = conv.weight.grad().unwrap();

        let eval = |xt: &Tensor<f64>, ct: &Conv2d<f64>| -> f64 {
            let mut t = Tape::inactive();
            ct.forward(&mut t, xt).unwrap().data().iter().sum()
        };
        let eps = 1e-5;
        for i in 0..x.numel() {
            let mut dp = x.data().to_vec();
            dp[i] += eps;
            let mut dm = x.data().to_vec();
            dm[i] -= eps;
            let fp = eval(&Tensor::from_vec(x.shape().to_vec(), dp).unwrap(), &conv);
            let fm = eval(&Tensor::from_vec(x.shape().to_vec(), dm).unwrap(), &conv);
            let fd = (fp - fm) / (2.0 * eps);
            assert!((gx[i] - fd).abs() < 1e-7, "dx[{i}]: ad={} fd={}", gx[i], fd);
        }
        for i in 0..conv.weight.numel() {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.weight.data_mut()[i] += eps;
            cm.weight.data_mut()[i] -= eps;
            let fd = (eval(&x, &cp) - eval(&x, &cm)) / (2.0 * eps);
            assert!((gw[i] - fd).abs() < 1e-7, "dw[{i}]: ad={} fd={}", gw[i], fd);
        }
    }

    #[test]
    fn depthwise_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let conv: Conv2d<f64> = Conv2d::init(&mut rng, 3, 3, 5, 1, 2, 3, true).unwrap();
        let x: Tensor<f64> =
            super::super::trunc_normal(&mut rng, vec![2, 3, 6, 6], 1.0).requires_grad();

        let mut tape = Tape::new();
        let y = conv.forward(&mut tape, &x).unwrap();
        let loss = sum(&mut tape, &y).unwrap();
        tape.backward(&loss).unwrap();
        let gx = x.grad().unwrap();

        let eval = |xt: &Tensor<f64>| -> f64 {
            let mut t = Tape::inactive();
            conv.forward(&mut t, xt).unwrap().data().iter().sum()
        };
        let eps = 1e-5;
        for i in (0..x.numel()).step_by(7) {
            let mut dp = x.data().to_vec();
            dp[i] += eps;
            let mut dm = x.data().to_vec();
            dm[i] -= eps;
            let fd = (eval(&Tensor::from_vec(x.shape().to_vec(), dp).unwrap())
                - eval(&Tensor::from_vec(x.shape().to_vec(), dm).unwrap()))
                / (2.0 * eps);
            assert!((gx[i] - fd).abs() < 1e-7, "dx[{i}]: ad={} fd={}", gx[i], fd);
        }
    }
}
