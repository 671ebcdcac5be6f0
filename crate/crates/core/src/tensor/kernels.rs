//! Row-major dense kernels. All loops run in a fixed order so results are
//! bitwise reproducible for equal inputs.

use super::Element;

const LANES: usize = 8;

/// Dot product with eight independent accumulators (vectorizes well).
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..LANES {
            acc[j] = acc[j] + x[j] * y[j];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    s01 + s23 + tail
}

/// `y += a * x`
#[inline]
pub fn axpy<T: Element>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// `out[n×m] = x[n×k] · w[m×k]ᵀ`
pub fn linear_fwd<T: Element>(x: &[T], w: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let oi = &mut out[i * m..(i + 1) * m];
        for (j, o) in oi.iter_mut().enumerate() {
            *o = dot(xi, &w[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `dx[n×k] += dy[n×m] · w[m×k]`
pub fn linear_bwd_x<T: Element>(dx: &mut [T], dy: &[T], w: &[T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let dxi = &mut dx[i * k..(i + 1) * k];
        for j in 0..m {
            let g = dy[i * m + j];
            if g != T::zero() {
                axpy(dxi, g, &w[j * k..(j + 1) * k]);
            }
        }
    }
}

/// `dw[m×k] += dy[n×m]ᵀ · x[n×k]`
pub fn linear_bwd_w<T: Element>(dw: &mut [T], dy: &[T], x: &[T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        for j in 0..m {
            let g = dy[i * m + j];
            if g != T::zero() {
                axpy(&mut dw[j * k..(j + 1) * k], g, xi);
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul_fwd<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let oi = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(oi, aip, &b[p * n..(p + 1) * n]);
            }
        }
    }
    out
}

/// `da[m×k] += dout[m×n] · b[k×n]ᵀ`
pub fn matmul_bwd_a<T: Element>(da: &mut [T], dout: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] = da[i * k + p] + dot(gi, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `db[k×n] += a[m×k]ᵀ · dout[m×n]`
pub fn matmul_bwd_b<T: Element>(db: &mut [T], dout: &[T], a: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(&mut db[p * n..(p + 1) * n], aip, gi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_on_odd_lengths() {
        for len in [1usize, 7, 8, 9, 23] {
            let a: Vec<f64> = (0..len).map(|i| i as f64 * 0.5 - 3.0).collect();
            let b: Vec<f64> = (0..len).map(|i| 1.0 / (i as f64 + 1.0)).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_equals_matmul_with_transpose() {
        let (n, k, m) = (3, 5, 4);
        let x: Vec<f64> = (0..n * k).map(|i| (i as f64).sin()).collect();
        let w: Vec<f64> = (0..m * k).map(|i| (i as f64).cos()).collect();
        let mut wt = vec![0.0; k * m];
        for j in 0..m {
            for p in 0..k {
                wt[p * m + j] = w[j * k + p];
            }
        }
        let a = linear_fwd(&x, &w, n, k, m);
        let b = matmul_fwd(&x, &wt, n, k, m);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
