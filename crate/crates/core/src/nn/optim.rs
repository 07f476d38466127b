use serde::{Deserialize, Serialize};

use crate::nn::params::{ParamGrads, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f64,
}

impl OptimizerConfig {
    pub const fn sgd(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
        }
    }

    pub const fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.9,
        }
    }
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD with heavy-ball momentum, or Adam.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore<T>) -> Self {
        Self {
            cfg,
            first: vec![None; params.len()],
            second: vec![None; params.len()],
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        self.steps += 1;
        let lr = self.cfg.lr;
        let mom = self.cfg.momentum;
        let t = self.steps as i32;
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = params.get_mut(id);
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    let v = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let m = T::lit(mom);
                    let step = T::lit(lr);
                    for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = m * *vv + gv;
                        *pv -= step * *vv;
                    }
                }
                OptimizerKind::Adam => {
                    let m1 = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let m2 = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let c1 = 1.0 - mom.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    let (b1, b2) = (T::lit(mom), T::lit(ADAM_BETA2));
                    let (one_b1, one_b2) = (T::lit(1.0 - mom), T::lit(1.0 - ADAM_BETA2));
                    let step = T::lit(lr / c1);
                    let (inv_c2, eps) = (T::lit(1.0 / c2), T::lit(ADAM_EPS));
                    for (((pv, a), b), &gv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m1.data_mut())
                        .zip(m2.data_mut())
                        .zip(g.data())
                    {
                        *a = b1 * *a + one_b1 * gv;
                        *b = b2 * *b + one_b2 * gv * gv;
                        *pv -= step * *a / ((*b * inv_c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamId;

    fn quadratic_grads(store: &ParamStore<f64>, id: ParamId) -> ParamGrads<f64> {
        // d/dx (x - 3)^2
        let x = store.get(id).item();
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::scalar(2.0 * (x - 3.0)));
        g
    }

    #[test]
    fn sgd_momentum_first_steps() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.0));
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.9), &store);
        let g = quadratic_grads(&store, id);
        opt.step(&mut store, &g);
        // v = -6, x = 0.6
        assert!((store.get(id).item() - 0.6).abs() < 1e-12);
        let g = quadratic_grads(&store, id);
        opt.step(&mut store, &g);
        // v = 0.9 * -6 + -4.8 = -10.2, x = 0.6 + 1.02
        assert!((store.get(id).item() - 1.62).abs() < 1e-12);
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        for cfg in [OptimizerConfig::sgd(0.05, 0.9), OptimizerConfig::adam(0.1)] {
            let mut store = ParamStore::new();
            let id = store.add("x", Tensor::scalar(-2.0));
            let mut opt = Optimizer::new(cfg, &store);
            for _ in 0..500 {
                let g = quadratic_grads(&store, id);
                opt.step(&mut store, &g);
            }
            assert!((store.get(id).item() - 3.0).abs() < 1e-3, "{cfg:?}");
        }
    }
}
