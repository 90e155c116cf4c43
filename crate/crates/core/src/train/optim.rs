use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Learning rate, momentum and weight decay of the SGD update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Velocities for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocities: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        OptimizerState {
            velocities: params.into_iter().map(|t| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::zeros_like(store.iter().map(|(_, t)| t))
    }

    /// One Nesterov step over `params`, in the order the state was built:
    ///
    /// ```text
    /// g <- g + weight_decay * theta
    /// v <- momentum * v + g
    /// theta <- theta - lr * (g + momentum * v)
    /// ```
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        cfg: &SgdConfig,
    ) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.velocities.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer holds {} velocities for {} parameters and {} gradients",
                self.velocities.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((theta, g), v) in params.iter().zip(grads).zip(&self.velocities) {
            if theta.shape() != g.shape() || theta.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_nesterov_step",
                    lhs: theta.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        for ((theta, g), v) in params.into_iter().zip(grads).zip(&mut self.velocities) {
            for ((t, &gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let gi = gi + wd * *t;
                *vi = mu * *vi + gi;
                *t -= lr * (gi + mu * *vi);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Nesterov SGD over every entry of `params`; `grads` follow store order.
pub fn sgd_nesterov_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &SgdConfig,
) -> Result<()> {
    state.step(params.iter_mut().map(|(_, t)| t), grads, cfg)
}
