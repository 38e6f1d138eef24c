//! Named parameter storage, ADAM and global-norm gradient clipping.

use super::scalar::Scalar;
use super::tape::{Gradients, Tape, Tensor, Var};
use super::ShapeError;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// An ordered collection of named parameter arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.push(Param {
            name: name.into(),
            value,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.params[i].value)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `tape` as a trainable leaf, in order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect()
    }

    /// Gradients for `vars` (as returned by [`ParamSet::bind`]), zero-filled
    /// for parameters that did not reach the loss.
    pub fn collect_grads(&self, grads: &Gradients<T>, vars: &[Var]) -> Vec<Vec<T>> {
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| grads.get_or_zeros(v, p.value.numel()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Tensor {
                        shape: p.value.shape.clone(),
                        data: p.value.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    },
                })
                .collect(),
        }
    }
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`. Returns the applied scale (1 when no clipping happened).
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            let v = g.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = T::from_f64(scale);
    grads.iter_mut().flatten().for_each(|g| *g *= s);
    scale
}

/// ADAM optimizer state with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros = || {
            params
                .params
                .iter()
                .map(|p| vec![T::zero(); p.value.numel()])
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of `params` with `grads` (one array per parameter).
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) -> Result<(), ShapeError> {
        let sizes: Vec<usize> = params.params.iter().map(|p| p.value.numel()).collect();
        let state: Vec<usize> = self.m.iter().map(Vec::len).collect();
        if state != sizes {
            return Err(ShapeError::new("adam state (uninitialized?)", &sizes, &state));
        }
        let got: Vec<usize> = grads.iter().map(Vec::len).collect();
        if got != sizes {
            return Err(ShapeError::new("adam gradients", &sizes, &got));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (((p, g), m), v) in params
            .params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gk), mk), vk) in p.value.data.iter_mut().zip(g).zip(m).zip(v) {
                *mk = b1 * *mk + (one - b1) * gk;
                *vk = b2 * *vk + (one - b2) * gk * gk;
                let mhat = *mk / bc1;
                let vhat = *vk / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: Vec<f64>) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let n = values.len();
        ps.push("p", Tensor::new(&[n], values).unwrap());
        ps
    }

    fn norm(grads: &[Vec<f64>]) -> f64 {
        grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    #[test]
    fn clip_below_threshold_is_noop() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 1.0);
        assert_eq!(g, vec![vec![3.0], vec![4.0]]);
    }

    #[test]
    fn clip_above_threshold_hits_max_norm() {
        let mut g = vec![vec![12.0], vec![16.0]];
        let s = clip_grad_norm(&mut g, 10.0);
        assert!((s - 0.5).abs() < 1e-15);
        assert!((norm(&g) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn clip_zero_grads() {
        let mut g = vec![vec![0.0; 4]];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 1.0);
        assert_eq!(g, vec![vec![0.0; 4]]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = one_param(vec![0.5, -0.25, 2.0]);
        let mut st = AdamState::new(&ps, 1e-3);
        st.update(&mut ps, &[vec![1.0; 3]]).unwrap();
        // m̂ = 1, v̂ = 1, so each element moves by lr / (1 + eps).
        let step = 1e-3 / (1.0 + 1e-8);
        for (w, w0) in ps.params[0].value.data.iter().zip([0.5, -0.25, 2.0]) {
            assert!((w0 - w - step).abs() < 1e-15);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut ps = one_param(vec![1.0, 2.0]);
        let mut st = AdamState::new(&ps, 1e-3);
        st.update(&mut ps, &[vec![1.0, 1.0]]).unwrap();
        let before = ps.clone();
        let m_before = st.m.clone();
        st.update(&mut ps, &[vec![0.0, 0.0]]).unwrap();
        // Zero gradient: m decays but m̂ stays nonzero, so compare against
        // the closed form rather than expecting no movement from history.
        let fresh_p = one_param(vec![1.0, 2.0]);
        let mut fresh_ps = fresh_p.clone();
        let mut fresh = AdamState::new(&fresh_p, 1e-3);
        fresh.update(&mut fresh_ps, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(fresh_ps, fresh_p);
        assert!(st.m[0][0] < m_before[0][0]);
        assert_ne!(ps, before);
    }

    #[test]
    fn adam_two_steps_match_scalar_recurrence() {
        let g = 0.37;
        let lr = 1e-3;
        let mut ps = one_param(vec![0.8]);
        let mut st = AdamState::new(&ps, lr);
        st.update(&mut ps, &[vec![g]]).unwrap();
        st.update(&mut ps, &[vec![g]]).unwrap();

        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((ps.params[0].value.data[0] - p).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_uninitialized_state() {
        let mut ps = one_param(vec![1.0]);
        let mut st = AdamState::<f64>::new(&ParamSet::new(), 1e-3);
        assert!(st.update(&mut ps, &[vec![1.0]]).is_err());
    }
}
