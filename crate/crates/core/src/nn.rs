//! Small building blocks shared by the trainable components.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffmath::{DiffError, Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("std is positive");
        for v in t.data_mut() {
            *v = dist.sample(rng);
        }
    }
    t
}

/// Fully connected layer `x·W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub(crate) fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = store.insert(format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], std));
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let w = g.param(self.w)?;
        let b = g.param(self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}
