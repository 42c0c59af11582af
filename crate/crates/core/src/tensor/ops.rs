use super::linalg::{gemm, MatMut, MatRef};
use super::{strides_of, Real, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

fn broadcast_len<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
        Ok(b.len())
    } else {
        shape_err(format!("{sb:?} does not broadcast over the trailing dimensions of {sa:?}"))
    }
}

/// `a op b`, with `b` optionally broadcast over the trailing dimensions of `a`.
pub fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    let nb = broadcast_len(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    let data = ad.chunks(nb).flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y))).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Gradients of `elementwise` with respect to `a` and `b`; the `b` gradient is
/// summed over broadcast copies.
pub fn elementwise_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: BinaryOp,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let nb = broadcast_len(a, b)?;
    if upstream.shape() != a.shape() {
        return shape_err(format!("upstream {:?} vs output {:?}", upstream.shape(), a.shape()));
    }
    let (ad, bd, ud) = (a.data(), b.data(), upstream.data());
    let mut ga = vec![T::zero(); ad.len()];
    let mut gb = vec![T::zero(); nb];
    for (i, (&u, g)) in ud.iter().zip(ga.iter_mut()).enumerate() {
        let j = i % nb;
        let (da, db) = match op {
            BinaryOp::Add => (u, u),
            BinaryOp::Sub => (u, -u),
            BinaryOp::Mul => (u * bd[j], u * ad[i]),
        };
        *g = da;
        gb[j] = gb[j] + db;
    }
    Ok((Tensor::from_vec(a.shape(), ga)?, Tensor::from_vec(b.shape(), gb)?))
}

fn dims2<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [m, n] => Ok((m, n)),
        _ => shape_err(format!("expected a matrix, got {:?}", t.shape())),
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a)?;
    let (k2, n) = dims2(b)?;
    if k != k2 {
        return shape_err(format!("matmul inner dimensions {k} and {k2} differ"));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), MatRef::new(a.data(), 0, m, k), MatRef::new(b.data(), 0, k, n), T::zero(), MatMut::new(&mut out, 0, m, n));
    Tensor::from_vec(&[m, n], out)
}

/// `(upstream · bᵀ, aᵀ · upstream)`.
pub fn matmul_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = dims2(a)?;
    let (k2, n) = dims2(b)?;
    if k != k2 || upstream.shape() != [m, n] {
        return shape_err(format!("matmul backward shapes {:?} {:?} {:?}", a.shape(), b.shape(), upstream.shape()));
    }
    let mut da = vec![T::zero(); m * k];
    let mut db = vec![T::zero(); k * n];
    let u = MatRef::new(upstream.data(), 0, m, n);
    gemm(T::one(), u, MatRef::new(b.data(), 0, k, n).t(), T::zero(), MatMut::new(&mut da, 0, m, k));
    gemm(T::one(), MatRef::new(a.data(), 0, m, k).t(), u, T::zero(), MatMut::new(&mut db, 0, k, n));
    Ok((Tensor::from_vec(&[m, k], da)?, Tensor::from_vec(&[k, n], db)?))
}

/// In-place max-subtracted softmax over each contiguous row of `width` elements.
pub fn softmax_rows_inplace<T: Real>(buf: &mut [T], width: usize) {
    for row in buf.chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

/// Index helper for "all lanes along `axis`": (outer, axis length, inner stride).
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(format!("axis {axis} out of range for {shape:?}"));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let mut out = x.data().to_vec();
    if inner == 1 {
        softmax_rows_inplace(&mut out, len);
    } else {
        let mut lane = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (k, v) in lane.iter_mut().enumerate() {
                    *v = out[base + k * inner];
                }
                softmax_rows_inplace(&mut lane, len);
                for (k, v) in lane.iter().enumerate() {
                    out[base + k * inner] = *v;
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Gradient of softmax given its output `y`: `y ⊙ (u − Σ u⊙y)` along `axis`.
pub fn softmax_backward<T: Real>(y: &Tensor<T>, upstream: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if y.shape() != upstream.shape() {
        return shape_err(format!("softmax backward {:?} vs {:?}", y.shape(), upstream.shape()));
    }
    let (outer, len, inner) = axis_layout(y.shape(), axis)?;
    let (yd, ud) = (y.data(), upstream.data());
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |k: usize| base + k * inner;
            let s = (0..len).fold(T::zero(), |acc, k| acc + ud[idx(k)] * yd[idx(k)]);
            for k in 0..len {
                dx[idx(k)] = yd[idx(k)] * (ud[idx(k)] - s);
            }
        }
    }
    Tensor::from_vec(y.shape(), dx)
}

/// Permutes dimensions: output dimension `i` is input dimension `perm[i]`.
pub fn transpose<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return shape_err(format!("{perm:?} is not a permutation of {rank} axes"));
    }
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let src = x.data();
    let mut out = Vec::with_capacity(n);
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        // odometer increment over the output index
        for d in (0..rank).rev() {
            index[d] += 1;
            offset += gather[d];
            if index[d] < out_shape[d] {
                break;
            }
            offset -= gather[d] * out_shape[d];
            index[d] = 0;
        }
    }
    debug_assert_eq!(strides_of(&out_shape).len(), rank);
    Tensor::from_vec(&out_shape, out)
}

/// Adjoint of [`transpose`]: applies the inverse permutation to `upstream`.
pub fn transpose_backward<T: Real>(upstream: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        if p >= perm.len() {
            return shape_err(format!("{perm:?} is not a permutation"));
        }
        inverse[p] = i;
    }
    transpose(upstream, &inverse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn add_and_identity() {
        let a = t(&[2], &[1., 2.]);
        let b = t(&[2], &[3., 4.]);
        assert_eq!(elementwise(&a, &b, BinaryOp::Add).unwrap().data(), &[4., 6.]);
        let z = Tensor::zeros(&[2]).unwrap();
        assert_eq!(elementwise(&a, &z, BinaryOp::Add).unwrap(), a);
    }

    #[test]
    fn broadcast_over_trailing_dims() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3], &[10., 20., 30.]);
        let y = elementwise(&a, &b, BinaryOp::Sub).unwrap();
        assert_eq!(y.data(), &[-9., -18., -27., -6., -15., -24.]);
        let (_, gb) = elementwise_backward(&a, &b, BinaryOp::Sub, &Tensor::new(&[2, 3], Fill::Ones).unwrap()).unwrap();
        assert_eq!(gb.data(), &[-2., -2., -2.]);
        assert!(elementwise(&a, &t(&[2], &[1., 1.]), BinaryOp::Add).is_err());
    }

    #[test]
    fn mul_backward_by_product_rule() {
        let mut a = t(&[1], &[2.]);
        let mut b = t(&[1], &[3.]);
        let (ga, gb) = elementwise_backward(&a, &b, BinaryOp::Mul, &t(&[1], &[1.])).unwrap();
        a.accumulate_grad(&ga).unwrap();
        b.accumulate_grad(&gb).unwrap();
        assert_eq!(a.grad().unwrap(), &[3.]);
        assert_eq!(b.grad().unwrap(), &[2.]);
    }

    #[test]
    fn matmul_examples() {
        let i2 = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&i2, &m).unwrap(), m);
        assert_eq!(matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap().data(), &[11.]);
        assert!(matmul(&m, &t(&[3, 1], &[1., 1., 1.])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&t(&[3], &[0., 0., 0.]), 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&t(&[2], &[1000., 0.]), 0).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-15 && y.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = t(&[2, 3], &[1., 5., 2., 3., 0., 4.]);
        let y = softmax(&x, 0).unwrap();
        for c in 0..3 {
            assert!((y.data()[c] + y.data()[3 + c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_shapes_and_adjoint() {
        let x = Tensor::<f64>::new(&[1, 2, 3], Fill::Uniform { lo: -1., hi: 1., seed: 1 }).unwrap();
        let y = transpose(&x, &[2, 1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2, 1]);
        let u = Tensor::<f64>::new(&[3, 2, 1], Fill::Uniform { lo: -1., hi: 1., seed: 2 }).unwrap();
        let back = transpose_backward(&u, &[2, 1, 0]).unwrap();
        assert_eq!(back.shape(), x.shape());
        // <T x, u> == <x, T* u>
        assert!((y.dot(&u).unwrap() - x.dot(&back).unwrap()).abs() < 1e-15);
        let m = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(transpose(&m, &[1, 0]).unwrap().data(), &[1., 4., 2., 5., 3., 6.]);
        assert!(transpose(&m, &[0, 0]).is_err());
    }
}
