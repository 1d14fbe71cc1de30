//! Bilinear resize over NCHW maps, align-corners disabled. Same-size calls
//! pass values through bit-exact.

use crate::error::{Error, Result};
use crate::tensor::{debug_check_finite, Element, Tape, Tensor};

/// Per-axis sampling table: (low index, high index, high weight).
fn axis_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_resize<E: Element>(
    tape: &mut Tape<E>,
    x: &Tensor<E>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("bilinear_resize", format!("expected NCHW, got {:?}", s)));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output extents must be >= 1"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);

    if out_h == h && out_w == w {
        // Identity: reshaping keeps tracking and is bitwise.
        return x.reshaped(s.to_vec());
    }

    let ys = axis_table(h, out_h);
    let xs = axis_table(w, out_w);
    let planes = n * c;
    let plane_in = h * w;
    let plane_out = out_h * out_w;
    let xd = x.data();
    let mut data = vec![E::ZERO; planes * plane_out];
    for p in 0..planes {
        let src = &xd[p * plane_in..(p + 1) * plane_in];
        let dst = &mut data[p * plane_out..(p + 1) * plane_out];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let (wy0, wy1) = (E::from_f64(1.0 - wy), E::from_f64(wy));
            let r0 = &src[y0 * w..y0 * w + w];
            let r1 = &src[y1 * w..y1 * w + w];
            let out_row = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (o, &(x0, x1, wx)) in out_row.iter_mut().zip(xs.iter()) {
                let (wx0, wx1) = (E::from_f64(1.0 - wx), E::from_f64(wx));
                *o = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    debug_check_finite("bilinear_resize", &data);
    let mut out = Tensor::from_vec(vec![n, c, out_h, out_w], data)?;

    let sx = x.sink();
    tape.record_op(&[x], &mut out, |id| {
        Box::new(move |flow| {
            let Some(d) = flow.take(id) else { return };
            let mut dx = vec![E::ZERO; planes * plane_in];
            for p in 0..planes {
                let g = &d[p * plane_out..(p + 1) * plane_out];
                let dst = &mut dx[p * plane_in..(p + 1) * plane_in];
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    let (wy0, wy1) = (E::from_f64(1.0 - wy), E::from_f64(wy));
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let gv = g[oy * out_w + ox];
                        let (wx0, wx1) = (E::from_f64(1.0 - wx), E::from_f64(wx));
                        dst[y0 * w + x0] += wy0 * wx0 * gv;
                        dst[y0 * w + x1] += wy0 * wx1 * gv;
                        dst[y1 * w + x0] += wy1 * wx0 * gv;
                        dst[y1 * w + x1] += wy1 * wx1 * gv;
                    }
                }
            }
            flow.add(&sx, dx);
        })
    });
    Ok(out)
}
