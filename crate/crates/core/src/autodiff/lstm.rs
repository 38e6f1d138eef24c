//! Fused LSTM sequence kernel with a hand-written backward pass, and the
//! single-step cell composed from tape primitives.

use super::scalar::{gemm, Scalar};
use super::tape::{Tape, Tensor, Var};
use super::ShapeError;

/// Tape handles of one LSTM layer's weights. Gate order is (i, f, g, o)
/// along the `4·hidden` axis; both bias vectors are trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

pub(crate) struct LstmCache<T> {
    pub params: LstmParams,
    pub x: Var,
    steps: usize,
    batch: usize,
    input: usize,
    hidden: usize,
    /// Activated gates `[S, N, 4H]`.
    gates: Vec<T>,
    /// Cell states `[S, N, H]`.
    cells: Vec<T>,
}

pub(crate) struct LstmGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw_ih: Vec<T>,
    pub dw_hh: Vec<T>,
    /// Shared by both bias vectors.
    pub db: Vec<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn lstm_forward<T: Scalar>(
    x: &Tensor<T>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    b_ih: &Tensor<T>,
    b_hh: &Tensor<T>,
    params: LstmParams,
    xvar: Var,
) -> Result<(Tensor<T>, LstmCache<T>), ShapeError> {
    let [s, n, i] = x.shape[..] else {
        return Err(ShapeError::new("lstm", &x.shape, &w_ih.shape));
    };
    let [g4, wi] = w_ih.shape[..] else {
        return Err(ShapeError::new("lstm", &x.shape, &w_ih.shape));
    };
    if wi != i || g4 % 4 != 0 || g4 == 0 {
        return Err(ShapeError::new("lstm", &x.shape, &w_ih.shape));
    }
    let h = g4 / 4;
    if w_hh.shape != [g4, h] {
        return Err(ShapeError::new("lstm", &w_ih.shape, &w_hh.shape));
    }
    if b_ih.shape != [g4] || b_hh.shape != [g4] {
        return Err(ShapeError::new("lstm", &b_ih.shape, &b_hh.shape));
    }

    // Input projections for all steps at once, biases folded in.
    let mut gates = vec![T::zero(); s * n * g4];
    for row in gates.chunks_mut(g4) {
        for ((o, &a), &b) in row.iter_mut().zip(&b_ih.data).zip(&b_hh.data) {
            *o = a + b;
        }
    }
    gemm(false, true, s * n, i, g4, &x.data, &w_ih.data, T::one(), &mut gates);

    let mut hs = vec![T::zero(); s * n * h];
    let mut cells = vec![T::zero(); s * n * h];
    for t in 0..s {
        let gt = &mut gates[t * n * g4..(t + 1) * n * g4];
        if t > 0 {
            let hp = &hs[(t - 1) * n * h..t * n * h];
            gemm(false, true, n, h, g4, hp, &w_hh.data, T::one(), gt);
        }
        for b in 0..n {
            let row = &mut gt[b * g4..(b + 1) * g4];
            let c_idx = (t * n + b) * h;
            for k in 0..h {
                let ig = sigmoid(row[k]);
                let fg = sigmoid(row[h + k]);
                let gg = row[2 * h + k].tanh();
                let og = sigmoid(row[3 * h + k]);
                row[k] = ig;
                row[h + k] = fg;
                row[2 * h + k] = gg;
                row[3 * h + k] = og;
                let c_prev = if t > 0 { cells[c_idx - n * h + k] } else { T::zero() };
                let c = fg * c_prev + ig * gg;
                cells[c_idx + k] = c;
                hs[c_idx + k] = og * c.tanh();
            }
        }
    }
    let out = Tensor {
        shape: vec![s, n, h],
        data: hs,
    };
    let cache = LstmCache {
        params,
        x: xvar,
        steps: s,
        batch: n,
        input: i,
        hidden: h,
        gates,
        cells,
    };
    Ok((out, cache))
}

/// Back-propagation through time. `hs` is the forward output and `dh` the
/// gradient with respect to it.
pub(crate) fn lstm_backward<T: Scalar>(
    cache: &LstmCache<T>,
    x: &[T],
    hs: &[T],
    w_ih: &[T],
    w_hh: &[T],
    dh: &[T],
    needs_dx: bool,
) -> LstmGrads<T> {
    let (s, n, i, h) = (cache.steps, cache.batch, cache.input, cache.hidden);
    let g4 = 4 * h;
    let mut da = vec![T::zero(); s * n * g4];
    let mut dh_next = vec![T::zero(); n * h];
    let mut dc_next = vec![T::zero(); n * h];
    for t in (0..s).rev() {
        for b in 0..n {
            let gi = (t * n + b) * g4;
            let ci = (t * n + b) * h;
            for k in 0..h {
                let ig = cache.gates[gi + k];
                let fg = cache.gates[gi + h + k];
                let gg = cache.gates[gi + 2 * h + k];
                let og = cache.gates[gi + 3 * h + k];
                let c = cache.cells[ci + k];
                let tc = c.tanh();
                let dht = dh[ci + k] + dh_next[b * h + k];
                let d_o = dht * tc;
                let dc = dht * og * (T::one() - tc * tc) + dc_next[b * h + k];
                let c_prev = if t > 0 { cache.cells[ci - n * h + k] } else { T::zero() };
                let row = &mut da[gi..gi + g4];
                row[k] = dc * gg * ig * (T::one() - ig);
                row[h + k] = dc * c_prev * fg * (T::one() - fg);
                row[2 * h + k] = dc * ig * (T::one() - gg * gg);
                row[3 * h + k] = d_o * og * (T::one() - og);
                dc_next[b * h + k] = dc * fg;
            }
        }
        if t > 0 {
            let dat = &da[t * n * g4..(t + 1) * n * g4];
            gemm(false, false, n, g4, h, dat, w_hh, T::zero(), &mut dh_next);
        }
    }

    let mut dw_ih = vec![T::zero(); g4 * i];
    gemm(true, false, g4, s * n, i, &da, x, T::zero(), &mut dw_ih);
    let mut dw_hh = vec![T::zero(); g4 * h];
    if s > 1 {
        gemm(
            true,
            false,
            g4,
            (s - 1) * n,
            h,
            &da[n * g4..],
            &hs[..(s - 1) * n * h],
            T::zero(),
            &mut dw_hh,
        );
    }
    let mut db = vec![T::zero(); g4];
    for row in da.chunks(g4) {
        for (o, &v) in db.iter_mut().zip(row) {
            *o += v;
        }
    }
    let dx = needs_dx.then(|| {
        let mut dx = vec![T::zero(); s * n * i];
        gemm(false, false, s * n, g4, i, &da, w_ih, T::zero(), &mut dx);
        dx
    });
    LstmGrads {
        dx,
        dw_ih,
        dw_hh,
        db,
    }
}

/// One LSTM step built from tape primitives: `x[N, in]`, `h_prev[N, hid]`,
/// `c_prev[N, hid]` to `(h, c)`.
pub fn lstm_cell<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmParams,
) -> Result<(Var, Var), ShapeError> {
    let hid = tape.shape(p.w_hh)[1];
    let zx = tape.matmul_bt(x, p.w_ih)?;
    let zx = tape.add_row(zx, p.b_ih)?;
    let zh = tape.matmul_bt(h_prev, p.w_hh)?;
    let zh = tape.add_row(zh, p.b_hh)?;
    let z = tape.add(zx, zh)?;
    let zi = tape.slice_cols(z, 0, hid)?;
    let zf = tape.slice_cols(z, hid, hid)?;
    let zg = tape.slice_cols(z, 2 * hid, hid)?;
    let zo = tape.slice_cols(z, 3 * hid, hid)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}
