use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_gradients, LossConfig, TrainingPair};
use super::TrainError;
use crate::visual::{EncoderParams, ParamGroup};

/// Minibatch SGD settings. Defaults are the fine-tuning schedule used for
/// the full-scale models: base LR 0.5e-4, 10x for new parameters, momentum
/// 0.9, weight decay 1e-4, LR x0.1 every 5000 iterations, batches of 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub new_param_lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub lr_step_iters: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.5e-4,
            new_param_lr_multiplier: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_gamma: 0.1,
            lr_step_iters: 5000,
            batch_size: 100,
            max_iters: 10_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be non-negative");
        }
        if !(self.new_param_lr_multiplier >= 0.0 && self.new_param_lr_multiplier.is_finite()) {
            return bad("new_param_lr_multiplier must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return bad("lr_gamma must be positive");
        }
        if self.lr_step_iters == 0 || self.batch_size == 0 || self.max_iters == 0 {
            return bad("lr_step_iters, batch_size and max_iters must be positive");
        }
        Ok(())
    }

    /// Base-group learning rate at iteration `iter` (0-based).
    pub fn lr_at(&self, iter: usize) -> f64 {
        let drops = (iter / self.lr_step_iters) as i32;
        self.base_lr * self.lr_gamma.powi(drops)
    }

    fn group_lr(&self, iter: usize, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Base => self.lr_at(iter),
            ParamGroup::New => self.lr_at(iter) * self.new_param_lr_multiplier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub trace: Vec<TraceRow>,
}

/// Epoch-shuffled minibatch gradient descent with classical momentum and L2
/// weight decay:
///
/// ```text
/// v <- mu * v - lr * (g + lambda * theta)
/// theta <- theta + v
/// ```
///
/// The trace records each batch's loss before its update.
pub fn train(
    params: EncoderParams,
    pairs: &[TrainingPair],
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome, TrainError> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    params.validate()?;
    let mut params = params;
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut trace = Vec::with_capacity(train_cfg.max_iters);

    for iter in 0..train_cfg.max_iters {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + train_cfg.batch_size).min(order.len());
        let batch: Vec<&TrainingPair> = order[cursor..end].iter().map(|&i| &pairs[i]).collect();
        cursor = end;

        let (loss, grads) = loss_gradients(&params, &batch, loss_cfg)?;
        if !loss.is_finite() {
            return Err(TrainError::Divergence { iter });
        }
        trace.push(TraceRow {
            iter,
            loss,
            lr: train_cfg.lr_at(iter),
        });

        let mu = train_cfg.momentum;
        let decay = train_cfg.weight_decay;
        for (((theta, group), (vel, _)), (g, _)) in params
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grads.tensors())
        {
            let lr = train_cfg.group_lr(iter, group);
            for ((t, v), gi) in theta.iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = mu * *v - lr * (gi + decay * *t);
                *t += *v;
            }
        }
    }
    if params
        .tensors()
        .iter()
        .any(|(t, _)| t.iter().any(|x| !x.is_finite()))
    {
        return Err(TrainError::Divergence {
            iter: train_cfg.max_iters,
        });
    }
    Ok(TrainOutcome { params, trace })
}

/// Writes the loss trace as CSV with header `iter,loss,lr`.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fact::FactOrder;
    use crate::lang::FactEmbedding;
    use crate::visual::{init_params, EncoderSpec};

    fn toy_pairs() -> Vec<TrainingPair> {
        (0..12)
            .map(|i| {
                let x = i as f64 / 12.0;
                TrainingPair {
                    features: vec![x, 1.0 - x, 0.5],
                    target: FactEmbedding::new(
                        vec![x, -x],
                        vec![1.0 - x, 0.2],
                        vec![0.3, x],
                        FactOrder::ALL[i % 3].mask(),
                    ),
                }
            })
            .collect()
    }

    #[test]
    fn defaults_match_reference_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.base_lr, 0.5e-4);
        assert_eq!(c.new_param_lr_multiplier, 10.0);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.lr_gamma, 0.1);
        assert_eq!(c.lr_step_iters, 5000);
        assert_eq!(c.batch_size, 100);
        assert!((c.lr_at(5000) - 0.5e-5).abs() < 1e-20);
        assert_eq!(c.lr_at(4999), 0.5e-4);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let spec = EncoderSpec::model2(3, vec![4], vec![3], vec![3], 2);
        let p = init_params(&spec, 1).unwrap();
        let cfg = TrainConfig {
            base_lr: 0.0,
            batch_size: 5,
            max_iters: 20,
            ..TrainConfig::default()
        };
        let out = train(p.clone(), &toy_pairs(), &cfg, &LossConfig::default()).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.trace.len(), 20);
    }

    #[test]
    fn weight_decay_step_with_zero_gradient() {
        // Zero-loss data: targets equal the current outputs, so g = 0 and one
        // step gives theta * (1 - lr * lambda) for each group.
        let spec = EncoderSpec::model1(3, vec![4], 2);
        let p = init_params(&spec, 2).unwrap();
        let pairs: Vec<_> = toy_pairs()
            .into_iter()
            .map(|mut pair| {
                pair.target =
                    crate::visual::encode_visual(&p, &pair.features, pair.target.mask()).unwrap();
                pair
            })
            .collect();
        let cfg = TrainConfig {
            base_lr: 0.01,
            new_param_lr_multiplier: 10.0,
            weight_decay: 0.5,
            max_iters: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(p.clone(), &pairs, &cfg, &LossConfig::default()).unwrap();
        assert_eq!(out.trace[0].loss, 0.0);
        for ((before, group), (after, _)) in p.tensors().into_iter().zip(out.params.tensors()) {
            let lr = match group {
                ParamGroup::Base => 0.01,
                ParamGroup::New => 0.1,
            };
            for (b, a) in before.iter().zip(after) {
                assert!((a - b * (1.0 - lr * 0.5)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn deterministic_trace() {
        let spec = EncoderSpec::model1(3, vec![5], 2);
        let cfg = TrainConfig {
            base_lr: 0.01,
            batch_size: 5,
            max_iters: 30,
            seed: 7,
            ..TrainConfig::default()
        };
        let run = || {
            train(
                init_params(&spec, 3).unwrap(),
                &toy_pairs(),
                &cfg,
                &LossConfig::default(),
            )
            .unwrap()
            .trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let spec = EncoderSpec::model1(3, vec![], 2);
        let cfg = TrainConfig {
            base_lr: 1e6,
            momentum: 0.0,
            batch_size: 12,
            max_iters: 200,
            ..TrainConfig::default()
        };
        let r = train(
            init_params(&spec, 3).unwrap(),
            &toy_pairs(),
            &cfg,
            &LossConfig::default(),
        );
        assert!(matches!(r, Err(TrainError::Divergence { .. })));
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace_csv(
            &[TraceRow {
                iter: 0,
                loss: 1.5,
                lr: 0.1,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iter,loss,lr\n0,1.5,0.1\n");
    }

    #[test]
    fn empty_train_set() {
        let spec = EncoderSpec::model1(3, vec![], 2);
        assert!(matches!(
            train(
                init_params(&spec, 0).unwrap(),
                &[],
                &TrainConfig::default(),
                &LossConfig::default()
            ),
            Err(TrainError::EmptyTrainSet)
        ));
    }
}
