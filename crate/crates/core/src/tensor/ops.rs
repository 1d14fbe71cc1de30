//! Primitive differentiable ops: elementwise math, matmul, concat/split and
//! reductions. Layer-level ops (conv, norm, resize, wkv) live next to their
//! modules; everything routes gradients through the same tape machinery.

use super::tape::Tape;
use super::{debug_check_finite, kernels, Element, Tensor};
use crate::error::{Error, Result};

fn check_same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add<E: Element>(tape: &mut Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape("add", a, b)?;
    let data: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    debug_check_finite("add", &data);
    let mut out = Tensor::from_vec(a.shape().to_vec(), data)?;
    let (sa, sb) = (a.sink(), b.sink());
    tape.record_op(&[a, b], &mut out, |id| {
        Box::new(move |flow| {
            if let Some(d) = flow.take(id) {
                flow.add(&sa, d.clone());
                flow.add(&sb, d);
            }
        })
    });
    Ok(out)
}

/// Elementwise product of two same-shape tensors.
pub fn mul<E: Element>(tape: &mut Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape("mul", a, b)?;
    let data: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    debug_check_finite("mul", &data);
    let mut out = Tensor::from_vec(a.shape().to_vec(), data)?;
    let (sa, sb) = (a.sink(), b.sink());
    let (da, db) = (a.data_arc(), b.data_arc());
    tape.record_op(&[a, b], &mut out, |id| {
        Box::new(move |flow| {
            if let Some(d) = flow.take(id) {
                flow.add(&sa, d.iter().zip(db.iter()).map(|(&g, &y)| g * y).collect());
                flow.add(&sb, d.iter().zip(da.iter()).map(|(&g, &x)| g * x).collect());
            }
        })
    });
    Ok(out)
}

/// Multiply every element by a constant.
pub fn scale<E: Element>(tape: &mut Tape<E>, a: &Tensor<E>, c: E) -> Result<Tensor<E>> {
    let data: Vec<E> = a.data().iter().map(|&x| x * c).collect();
    debug_check_finite("scale", &data);
    let mut out = Tensor::from_vec(a.shape().to_vec(), data)?;
    let sa = a.sink();
    tape.record_op(&[a], &mut out, |id| {
        Box::new(move |flow| {
            if let Some(d) = flow.take(id) {
                flow.add(&sa, d.into_iter().map(|g| g * c).collect());
            }
        })
    });
    Ok(out)
}

/// Full reduction to a scalar, fixed sequential order.
pub fn sum<E: Element>(tape: &mut Tape<E>, a: &Tensor<E>) -> Result<Tensor<E>> {
    let total: E = a.data().iter().copied().sum();
    let mut out = Tensor::scalar(total);
    let sa = a.sink();
    let n = a.numel();
    tape.record_op(&[a], &mut out, |id| {
        Box::new(move |flow| {
            if let Some(d) = flow.take(id) {
                flow.add(&sa, vec![d[0]; n]);
            }
        })
    });
    Ok(out)
}

macro_rules! unary_op {
    ($name:ident, $doc:literal, $fwd:expr, $bwd:expr) => {
        #[doc = $doc]
        pub fn $name<E: Element>(tape: &mut Tape<E>, a: &Tensor<E>) -> Result<Tensor<E>> {
            let fwd = $fwd;
            let data: Vec<E> = a.data().iter().map(|&x| fwd(x)).collect();
            debug_check_finite(stringify!($name), &data);
            let mut out = Tensor::from_vec(a.shape().to_vec(), data)?;
            let sa = a.sink();
            let saved = a.data_arc();
            tape.record_op(&[a], &mut out, |id| {
                Box::new(move |flow| {
                    if let Some(d) = flow.take(id) {
                        let bwd = $bwd;
                        flow.add(
                            &sa,
                            d.iter().zip(saved.iter()).map(|(&g, &x)| g * bwd(x)).collect(),
                        );
                    }
                })
            });
            Ok(out)
        }
    };
}

#[inline(always)]
pub(crate) fn sigmoid_scalar<E: Element>(x: E) -> E {
    // Evaluate on the side that keeps exp() bounded.
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline(always)]
pub(crate) fn gelu_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::ONE + u.tanh())
}

#[inline(always)]
fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * a * x * x)
}

unary_op!(
    sigmoid,
    "Logistic sigmoid.",
    |x: E| sigmoid_scalar(x),
    |x: E| {
        let s = sigmoid_scalar(x);
        s * (E::ONE - s)
    }
);

unary_op!(
    relu,
    "Rectified linear unit.",
    |x: E| if x > E::ZERO { x } else { E::ZERO },
    |x: E| if x > E::ZERO { E::ONE } else { E::ZERO }
);

unary_op!(gelu, "GELU (tanh form).", |x: E| gelu_scalar(x), |x: E| gelu_grad_scalar(x));

unary_op!(exp, "Elementwise exponential.", |x: E| x.exp(), |x: E| x.exp());

/// 2-D matrix product: (m,k) . (k,n) -> (m,n).
pub fn matmul<E: Element>(tape: &mut Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let data = kernels::matmul_nn(a.data(), b.data(), m, k, n);
    debug_check_finite("matmul", &data);
    let mut out = Tensor::from_vec(vec![m, n], data)?;
    let (sa, sb) = (a.sink(), b.sink());
    let (da, db) = (a.data_arc(), b.data_arc());
    tape.record_op(&[a, b], &mut out, |id| {
        Box::new(move |flow| {
            if let Some(d) = flow.take(id) {
                // dA = dOut . B^T ; dB = A^T . dOut
                flow.add(&sa, kernels::matmul_nt(&d, &db, m, n, k));
                flow.add(&sb, kernels::matmul_tn(&da, &d, k, m, n));
            }
        })
    });
    Ok(out)
}

fn axis_split_dims(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, inner)
}

/// Concatenate tensors along `axis`; all other extents must match.
pub fn concat<E: Element>(
    tape: &mut Tape<E>,
    axis: usize,
    parts: &[&Tensor<E>],
) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat", "no inputs"));
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(Error::invalid("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    let mut axis_total = 0;
    for p in parts {
        if p.shape().len() != rank {
            return Err(Error::shape("concat", parts[0].shape(), p.shape()));
        }
        for (d, (&x, &y)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
            if d != axis && x != y {
                return Err(Error::shape("concat", parts[0].shape(), p.shape()));
            }
        }
        axis_total += p.shape()[axis];
    }
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = axis_total;
    let (outer, inner) = axis_split_dims(&out_shape, axis);

    let mut data = vec![E::ZERO; outer * axis_total * inner];
    let mut offset = 0;
    for p in parts {
        let pa = p.shape()[axis];
        let run = pa * inner;
        for o in 0..outer {
            let src = &p.data()[o * run..(o + 1) * run];
            let dst_start = o * axis_total * inner + offset * inner;
            data[dst_start..dst_start + run].copy_from_slice(src);
        }
        offset += pa;
    }
    let mut out = Tensor::from_vec(out_shape, data)?;

    let sinks: Vec<_> = parts.iter().map(|p| p.sink()).collect();
    let axis_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    tape.record_op(parts, &mut out, |id| {
        Box::new(move |flow| {
            if let Some(d) = flow.take(id) {
                let mut offset = 0;
                for (sink, &pa) in sinks.iter().zip(&axis_sizes) {
                    let run = pa * inner;
                    let mut grad = vec![E::ZERO; outer * run];
                    for o in 0..outer {
                        let src_start = o * axis_total * inner + offset * inner;
                        grad[o * run..(o + 1) * run]
                            .copy_from_slice(&d[src_start..src_start + run]);
                    }
                    flow.add(sink, grad);
                    offset += pa;
                }
            }
        })
    });
    Ok(out)
}

/// Split along `axis` into chunks of the given sizes (must sum to the extent).
/// Round-trips `concat` exactly.
pub fn split<E: Element>(
    tape: &mut Tape<E>,
    axis: usize,
    sizes: &[usize],
    t: &Tensor<E>,
) -> Result<Vec<Tensor<E>>> {
    let rank = t.shape().len();
    if axis >= rank {
        return Err(Error::invalid("split", format!("axis {axis} out of range for rank {rank}")));
    }
    let axis_total = t.shape()[axis];
    if sizes.iter().sum::<usize>() != axis_total || sizes.iter().any(|&s| s == 0) {
        return Err(Error::invalid(
            "split",
            format!("sizes {:?} do not partition extent {}", sizes, axis_total),
        ));
    }
    let (outer, inner) = axis_split_dims(t.shape(), axis);

    let mut outs = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &sz in sizes {
        let run = sz * inner;
        let mut data = vec![E::ZERO; outer * run];
        for o in 0..outer {
            let src_start = o * axis_total * inner + offset * inner;
            data[o * run..(o + 1) * run].copy_from_slice(&t.data()[src_start..src_start + run]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = sz;
        outs.push(Tensor::from_vec(shape, data)?);
        offset += sz;
    }

    if tape.is_recording() && t.tracked() {
        let ids: Vec<_> = outs
            .iter_mut()
            .map(|o| {
                let id = tape.fresh_node();
                o.node = Some(id);
                id
            })
            .collect();
        let st = t.sink();
        let sizes = sizes.to_vec();
        let lens: Vec<usize> = outs.iter().map(|o| o.numel()).collect();
        let total = t.numel();
        tape.push(Box::new(move |flow| {
            let mut grad = vec![E::ZERO; total];
            let mut any = false;
            let mut offset = 0;
            for ((&id, &sz), &len) in ids.iter().zip(&sizes).zip(&lens) {
                if let Some(d) = flow.take(id) {
                    any = true;
                    let run = sz * inner;
                    for o in 0..outer {
                        let dst_start = o * axis_total * inner + offset * inner;
                        grad[dst_start..dst_start + run].copy_from_slice(&d[o * run..(o + 1) * run]);
                    }
                } else {
                    let _ = len;
                }
                offset += sz;
            }
            if any {
                flow.add(&st, grad);
            }
        }));
    }
    Ok(outs)
}

/// Shape change over the same data. Gradients flow through unchanged, so this
/// needs no tape record: the node id (or leaf slot) is carried over.
pub fn reshape<E: Element>(t: &Tensor<E>, shape: Vec<usize>) -> Result<Tensor<E>> {
    t.reshaped(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::inactive();
        let x = t64(&[1], &[0.0]);
        assert_eq!(sigmoid(&mut tape, &x).unwrap().item(), 0.5);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x*x), x = [1,2,3] -> grad [2,4,6]
        let mut tape = Tape::new();
        let x = t64(&[3], &[1.0, 2.0, 3.0]).requires_grad();
        let sq = mul(&mut tape, &x, &x).unwrap();
        let loss = sum(&mut tape, &sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let x = t64(&[4], &[0.0; 4]).requires_grad();
        let s = sigmoid(&mut tape, &x).unwrap();
        let loss = sum(&mut tape, &s).unwrap();
        tape.backward(&loss).unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_axis0_shapes() {
        let mut tape = Tape::<f64>::inactive();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 3]);
        let c = concat(&mut tape, 0, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[6, 3]);
    }

    #[test]
    fn concat_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::inactive();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = concat(&mut tape, 0, &[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn split_round_trips_concat() {
        let mut tape = Tape::<f64>::inactive();
        let data: Vec<f64> = (0..18).map(|i| i as f64).collect();
        let t = t64(&[6, 3], &data);
        let parts = split(&mut tape, 0, &[2, 4], &t).unwrap();
        assert_eq!(parts[0].shape(), &[2, 3]);
        assert_eq!(parts[1].shape(), &[4, 3]);
        let joined = concat(&mut tape, 0, &[&parts[0], &parts[1]]).unwrap();
        assert_eq!(joined.data(), t.data());
    }

    #[test]
    fn split_concat_round_trip_axis1() {
        let mut tape = Tape::<f64>::inactive();
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
        let t = t64(&[2, 6, 2], &data);
        let parts = split(&mut tape, 1, &[1, 2, 3], &t).unwrap();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let joined = concat(&mut tape, 1, &refs).unwrap();
        assert_eq!(joined.data(), t.data());
        assert_eq!(joined.shape(), t.shape());
    }

    #[test]
    fn concat_split_gradients_route_to_sources() {
        let mut tape = Tape::new();
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).requires_grad();
        let b = t64(&[1, 2], &[5.0, 6.0]).requires_grad();
        let c = concat(&mut tape, 0, &[&a, &b]).unwrap();
        let parts = split(&mut tape, 0, &[1, 2], &c).unwrap();
        // loss = sum(parts[1] * parts[1]); parts[1] covers rows 1,2 of c = [3,4,5,6]
        let sq = mul(&mut tape, &parts[1], &parts[1]).unwrap();
        let loss = sum(&mut tape, &sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 0.0, 6.0, 8.0]);
        assert_eq!(b.grad().unwrap(), vec![10.0, 12.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut tape = Tape::<f64>::inactive();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matmul(&mut tape, &a, &b).is_err());
    }

    #[test]
    fn matmul_gradients() {
        // loss = sum(A.B); dA = 1 . B^T, dB = A^T . 1
        let mut tape = Tape::new();
        let a = t64(&[1, 2], &[1.0, 2.0]).requires_grad();
        let b = t64(&[2, 1], &[3.0, 4.0]).requires_grad();
        let c = matmul(&mut tape, &a, &b).unwrap();
        assert_eq!(c.item(), 11.0);
        let loss = sum(&mut tape, &c).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn reshape_preserves_tracking() {
        let mut tape = Tape::new();
        let x = t64(&[2, 3], &[1.0; 6]).requires_grad();
        let y = mul(&mut tape, &x, &x).unwrap();
        let flat = reshape(&y, vec![6]).unwrap();
        let loss = sum(&mut tape, &flat).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 6]);
    }
}
