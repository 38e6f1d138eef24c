//! 1-D convolution over time-major signals via an im2col matrix product.

use super::scalar::{gemm, Scalar};
use super::tape::{Tensor, Var};
use super::ShapeError;

pub(crate) struct ConvCache<T> {
    pub inputs: (Var, Var, Var),
    stride: usize,
    padding: usize,
    l_in: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    l_out: usize,
    /// im2col matrix `[l_out, c_in·k]`; `None` for pointwise convolutions,
    /// where it would equal the input.
    cols: Option<Vec<T>>,
}

impl<T> ConvCache<T> {
    fn pointwise(&self) -> bool {
        self.cols.is_none()
    }
}

pub(crate) fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: usize,
    inputs: (Var, Var, Var),
) -> Result<(Tensor<T>, ConvCache<T>), ShapeError> {
    let err = || ShapeError::new("conv1d", &x.shape, &w.shape);
    let [l_in, c_in] = x.shape[..] else {
        return Err(err());
    };
    let [c_out, wc, k] = w.shape[..] else {
        return Err(err());
    };
    if wc != c_in || k == 0 || stride == 0 || l_in + 2 * padding < k {
        return Err(err());
    }
    if b.shape != [c_out] {
        return Err(ShapeError::new("conv1d", &w.shape, &b.shape));
    }
    let l_out = (l_in + 2 * padding - k) / stride + 1;
    let ck = c_in * k;
    let pointwise = k == 1 && stride == 1 && padding == 0;
    let cols = (!pointwise).then(|| {
        let mut cols = vec![T::zero(); l_out * ck];
        for t in 0..l_out {
            let row = &mut cols[t * ck..(t + 1) * ck];
            for kk in 0..k {
                let pos = (t * stride + kk) as isize - padding as isize;
                if pos < 0 || pos as usize >= l_in {
                    continue;
                }
                let xrow = &x.data[pos as usize * c_in..(pos as usize + 1) * c_in];
                for (ci, &v) in xrow.iter().enumerate() {
                    row[ci * k + kk] = v;
                }
            }
        }
        cols
    });
    let mut out = vec![T::zero(); l_out * c_out];
    for row in out.chunks_mut(c_out) {
        row.copy_from_slice(&b.data);
    }
    let a = cols.as_deref().unwrap_or(&x.data);
    gemm(false, true, l_out, ck, c_out, a, &w.data, T::one(), &mut out);
    let cache = ConvCache {
        inputs,
        stride,
        padding,
        l_in,
        c_in,
        c_out,
        k,
        l_out,
        cols,
    };
    Ok((
        Tensor {
            shape: vec![l_out, c_out],
            data: out,
        },
        cache,
    ))
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv1d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (l_out, c_out, c_in, k) = (cache.l_out, cache.c_out, cache.c_in, cache.k);
    let ck = c_in * k;
    let mut db = vec![T::zero(); c_out];
    for row in g.chunks(c_out) {
        for (o, &v) in db.iter_mut().zip(row) {
            *o += v;
        }
    }
    let a = cache.cols.as_deref().unwrap_or(&x.data);
    let mut dw = vec![T::zero(); c_out * ck];
    gemm(true, false, c_out, l_out, ck, g, a, T::zero(), &mut dw);
    let mut dcols = vec![T::zero(); l_out * ck];
    gemm(false, false, l_out, c_out, ck, g, &w.data, T::zero(), &mut dcols);
    if cache.pointwise() {
        return (dcols, dw, db);
    }
    let mut dx = vec![T::zero(); cache.l_in * c_in];
    for t in 0..l_out {
        let row = &dcols[t * ck..(t + 1) * ck];
        for kk in 0..k {
            let pos = (t * cache.stride + kk) as isize - cache.padding as isize;
            if pos < 0 || pos as usize >= cache.l_in {
                continue;
            }
            let xrow = &mut dx[pos as usize * c_in..(pos as usize + 1) * c_in];
            for (ci, o) in xrow.iter_mut().enumerate() {
                *o += row[ci * k + kk];
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
#[allow(clippy::too_many_arguments)]
mod tests {
    use crate::autodiff::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Sliding dot product written directly from the definition.
    fn oracle(
        x: &[f64],
        l: usize,
        c_in: usize,
        w: &[f64],
        c_out: usize,
        k: usize,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let l_out = (l + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; l_out * c_out];
        for t in 0..l_out {
            for co in 0..c_out {
                let mut acc = b[co];
                for ci in 0..c_in {
                    for kk in 0..k {
                        let pos = (t * stride + kk) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += w[(co * c_in + ci) * k + kk] * x[pos as usize * c_in + ci];
                        }
                    }
                }
                out[t * c_out + co] = acc;
            }
        }
        out
    }

    fn run(
        x: &[f64],
        l: usize,
        c_in: usize,
        w: &[f64],
        c_out: usize,
        k: usize,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[l, c_in], x.to_vec()).unwrap());
        let wv = tape.constant(Tensor::new(&[c_out, c_in, k], w.to_vec()).unwrap());
        let bv = tape.constant(Tensor::new(&[c_out], b.to_vec()).unwrap());
        let y = tape.conv1d(xv, wv, bv, stride, pad).unwrap();
        tape.value(y).data.clone()
    }

    #[test]
    fn length8_kernel3_matches_sliding_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_vec(&mut rng, 8);
        let w = rand_vec(&mut rng, 3);
        let got = run(&x, 8, 1, &w, 1, 3, &[0.0], 1, 0);
        let want = oracle(&x, 8, 1, &w, 1, 3, &[0.0], 1, 0);
        assert_eq!(got.len(), 6);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_padded_multichannel_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(l, c_in, c_out, k, s, p) in &[(13, 2, 3, 4, 2, 1), (9, 3, 2, 1, 1, 0), (16, 1, 4, 16, 8, 0)] {
            let x = rand_vec(&mut rng, l * c_in);
            let w = rand_vec(&mut rng, c_out * c_in * k);
            let b = rand_vec(&mut rng, c_out);
            let got = run(&x, l, c_in, &w, c_out, k, &b, s, p);
            let want = oracle(&x, l, c_in, &w, c_out, k, &b, s, p);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for &(l, c_in, c_out, k, s, p) in &[(7, 2, 3, 3, 2, 1), (5, 3, 2, 1, 1, 0)] {
            let x = rand_vec(&mut rng, l * c_in);
            let w = rand_vec(&mut rng, c_out * c_in * k);
            let b = rand_vec(&mut rng, c_out);
            let l_out = (l + 2 * p - k) / s + 1;
            let coef = rand_vec(&mut rng, l_out * c_out);
            let f = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
                run(x, l, c_in, w, c_out, k, b, s, p)
                    .iter()
                    .zip(&coef)
                    .map(|(a, c)| a * c)
                    .sum()
            };
            let mut tape = Tape::new();
            let xv = tape.param(Tensor::new(&[l, c_in], x.clone()).unwrap());
            let wv = tape.param(Tensor::new(&[c_out, c_in, k], w.clone()).unwrap());
            let bv = tape.param(Tensor::new(&[c_out], b.clone()).unwrap());
            let y = tape.conv1d(xv, wv, bv, s, p).unwrap();
            let cv = tape.constant(Tensor::new(&[l_out, c_out], coef.clone()).unwrap());
            let m = tape.mul(y, cv).unwrap();
            let loss = tape.sum(m);
            let g = tape.backward(loss).unwrap();
            let h = 1e-6;
            let check = |which: usize, grad: &[f64]| {
                for kk in 0..grad.len() {
                    let (mut a, mut bb, mut c) = (x.clone(), w.clone(), b.clone());
                    let (mut a2, mut b2, mut c2) = (x.clone(), w.clone(), b.clone());
                    match which {
                        0 => {
                            a[kk] += h;
                            a2[kk] -= h;
                        }
                        1 => {
                            bb[kk] += h;
                            b2[kk] -= h;
                        }
                        _ => {
                            c[kk] += h;
                            c2[kk] -= h;
                        }
                    }
                    let num = (f(&a, &bb, &c) - f(&a2, &b2, &c2)) / (2.0 * h);
                    assert!((num - grad[kk]).abs() < 1e-7, "{num} vs {}", grad[kk]);
                }
            };
            check(0, g.get(xv).unwrap());
            check(1, g.get(wv).unwrap());
            check(2, g.get(bv).unwrap());
        }
    }

    #[test]
    fn too_short_input_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 1]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(tape.conv1d(x, w, b, 1, 0).is_err());
    }
}
