use crate::graph::Gradients;
use crate::param::Param;
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam over a fixed, ordered parameter list.
///
/// Moments are stored positionally, so every call to [`Adam::step`] must pass the
/// parameters in the same order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState<T>,
}

/// Serializable optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            state: AdamState {
                step: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched but
    /// still advance the shared step counter.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, grads: &Gradients<T>) {
        if self.state.m.is_empty() {
            self.state.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.state.v = self.state.m.clone();
        }
        assert_eq!(
            self.state.m.len(),
            params.len(),
            "Adam: parameter list changed between steps"
        );
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = T::lit(self.lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        for ((p, m), v) in params
            .into_iter()
            .zip(self.state.m.iter_mut())
            .zip(self.state.v.iter_mut())
        {
            let Some(g) = grads.param(p) else { continue };
            assert_eq!(g.shape(), p.value.shape(), "Adam: gradient shape for {}", p.name());
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *w -= step_size * *mi / ((*vi).sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}
