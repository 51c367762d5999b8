//! Dense loops behind the tape operations. Row-major throughout.

use super::tensor::Scalar;

/// `out[n×q] += a[n×p] · b[p×q]`
pub(crate) fn matmul_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], n: usize, p: usize, q: usize) {
    for i in 0..n {
        let out_row = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == F::zero() {
                continue;
            }
            let b_row = &b[k * q..(k + 1) * q];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// `da[n×p] += dc[n×q] · b[p×q]ᵀ`
pub(crate) fn matmul_grad_a<F: Scalar>(dc: &[F], b: &[F], da: &mut [F], n: usize, p: usize, q: usize) {
    for i in 0..n {
        let dc_row = &dc[i * q..(i + 1) * q];
        for k in 0..p {
            let b_row = &b[k * q..(k + 1) * q];
            let mut s = F::zero();
            for (&x, &y) in dc_row.iter().zip(b_row) {
                s = s + x * y;
            }
            da[i * p + k] = da[i * p + k] + s;
        }
    }
}

/// `db[p×q] += a[n×p]ᵀ · dc[n×q]`
pub(crate) fn matmul_grad_b<F: Scalar>(a: &[F], dc: &[F], db: &mut [F], n: usize, p: usize, q: usize) {
    for i in 0..n {
        let dc_row = &dc[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == F::zero() {
                continue;
            }
            let db_row = &mut db[k * q..(k + 1) * q];
            for (d, &g) in db_row.iter_mut().zip(dc_row) {
                *d = *d + aik * g;
            }
        }
    }
}

/// Valid 1-D convolution over time. `x: [t×din]`, `w: [k×din×dout]`.
pub(crate) fn conv1d<F: Scalar>(x: &[F], w: &[F], bias: &[F], t: usize, din: usize, k: usize, dout: usize) -> Vec<F> {
    let steps = t + 1 - k;
    let mut out = Vec::with_capacity(steps * dout);
    for _ in 0..steps {
        out.extend_from_slice(bias);
    }
    for s in 0..steps {
        let out_row = &mut out[s * dout..(s + 1) * dout];
        for j in 0..k {
            let x_row = &x[(s + j) * din..(s + j + 1) * din];
            for (c, &xv) in x_row.iter().enumerate() {
                if xv == F::zero() {
                    continue;
                }
                let w_row = &w[(j * din + c) * dout..(j * din + c + 1) * dout];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o = *o + xv * wv;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    g: &[F],
    t: usize,
    din: usize,
    k: usize,
    dout: usize,
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
    mut db: Option<&mut [F]>,
) {
    let steps = t + 1 - k;
    for s in 0..steps {
        let g_row = &g[s * dout..(s + 1) * dout];
        if let Some(db) = db.as_deref_mut() {
            for (d, &gv) in db.iter_mut().zip(g_row) {
                *d = *d + gv;
            }
        }
        for j in 0..k {
            for c in 0..din {
                let widx = (j * din + c) * dout;
                let xi = (s + j) * din + c;
                if let Some(dx) = dx.as_deref_mut() {
                    let w_row = &w[widx..widx + dout];
                    let mut acc = F::zero();
                    for (&wv, &gv) in w_row.iter().zip(g_row) {
                        acc = acc + wv * gv;
                    }
                    dx[xi] = dx[xi] + acc;
                }
                if let Some(dw) = dw.as_deref_mut() {
                    let xv = x[xi];
                    if xv != F::zero() {
                        for (d, &gv) in dw[widx..widx + dout].iter_mut().zip(g_row) {
                            *d = *d + xv * gv;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln σ(x)`, stable for large |x|.
#[inline]
pub(crate) fn log_sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] · [5; 6] = [17; 39]
        let mut out = vec![0.0f64; 2];
        matmul_acc(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], &mut out, 2, 2, 1);
        assert_eq!(out, vec![17.0, 39.0]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0f64) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0f64).is_finite());
        assert!((log_sigmoid(800.0f64)).abs() < 1e-300);
        assert!((sigmoid(-800.0f64)) >= 0.0);
    }
}
