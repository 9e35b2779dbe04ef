use serde::{Deserialize, Serialize};

use crate::error::{CrdError, Result};
use crate::tinyformer::ops::Scalar;
use crate::tinyformer::params::ModelParams;
use crate::tinyformer::tokenizer::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
#[derive(Default)]
pub enum Optimizer {
    #[default]
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}


impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Mean per-token loss of `batch` and its gradient.
///
/// The objective is the summed next-token NLL of every sequence divided by the
/// number of predicted tokens in the batch.
pub fn batch_loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[TokenSeq],
) -> Result<(T, ModelParams<T>)> {
    if batch.is_empty() {
        return Err(CrdError::Empty("training batch".into()));
    }
    let predicted: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if predicted == 0 {
        return Err(CrdError::Empty("batch has no next-token targets".into()));
    }
    let scale = T::lit(1.0 / predicted as f64);
    let mut grads = ModelParams::zeros(&params.config);
    let mut total = T::zero();
    for seq in batch {
        total = total + params.accumulate_grad(seq, scale, &mut grads)?;
    }
    Ok((total * scale, grads))
}

/// One plain SGD step. Returns the pre-update mean per-token loss.
pub fn train_step<T: Scalar>(params: &mut ModelParams<T>, batch: &[TokenSeq], learning_rate: f64) -> Result<T> {
    let mut trainer = Trainer::new(params, Optimizer::Sgd);
    trainer.step(params, batch, learning_rate)
}

/// Optimizer state carried across steps.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    optimizer: Optimizer,
    /// Clip the global gradient norm to this value when set.
    pub clip_norm: Option<f64>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(params: &ModelParams<T>, optimizer: Optimizer) -> Self {
        let zeros = || -> Vec<Vec<T>> {
            params
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect()
        };
        let (m, v) = match optimizer {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Momentum { .. } => (zeros(), Vec::new()),
            Optimizer::Adam { .. } => (zeros(), zeros()),
        };
        Self {
            optimizer,
            clip_norm: None,
            m,
            v,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, batch: &[TokenSeq], learning_rate: f64) -> Result<T> {
        let (loss, grads) = batch_loss_and_grad(params, batch)?;
        if !loss.is_finite() {
            return Err(CrdError::Divergence { step: self.steps });
        }
        let mut grads = grads.tensors().into_iter().cloned().collect::<Vec<_>>();
        if let Some(max) = self.clip_norm {
            let norm = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|x| x.as_f64() * x.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let s = T::lit(max / norm);
                grads.iter_mut().flatten().for_each(|x| *x = *x * s);
            }
        }
        self.steps += 1;
        let lr = T::lit(learning_rate);
        match self.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(&grads) {
                    for (pv, &gv) in p.iter_mut().zip(g) {
                        *pv = *pv - lr * gv;
                    }
                }
            }
            Optimizer::Momentum { beta } => {
                let beta = T::lit(beta);
                for ((p, g), m) in params.tensors_mut().into_iter().zip(&grads).zip(&mut self.m) {
                    for ((pv, &gv), mv) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mv = beta * *mv + gv;
                        *pv = *pv - lr * *mv;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = T::lit(1.0 - beta1.powi(self.steps as i32));
                let c2 = T::lit(1.0 - beta2.powi(self.steps as i32));
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let one = T::one();
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(&grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    for (((pv, &gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = b1 * *mv + (one - b1) * gv;
                        *vv = b2 * *vv + (one - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(loss)
    }
}
