use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::fact::Slot;
use crate::lang::FactEmbedding;
use crate::linalg::{squared_distance, ShapeError};
use crate::visual::EncoderParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    SquaredEuclidean,
    /// `sqrt(|a - b|^2 + epsilon^2)`.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub distance: DistanceKind,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            distance: DistanceKind::SquaredEuclidean,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epsilon > 0.0 && self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig("epsilon must be positive".into()))
        }
    }

    /// Slot distance `D(a, b)`.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq = squared_distance(a, b);
        match self.distance {
            DistanceKind::SquaredEuclidean => sq,
            DistanceKind::Euclidean => (sq + self.epsilon * self.epsilon).sqrt(),
        }
    }

    /// `dD(v, l) / dv`, scaled by `scale`.
    fn distance_grad(&self, v: &[f64], l: &[f64], scale: f64) -> Vec<f64> {
        let factor = match self.distance {
            DistanceKind::SquaredEuclidean => 2.0,
            DistanceKind::Euclidean => 1.0 / self.distance(v, l),
        };
        v.iter()
            .zip(l)
            .map(|(a, b)| scale * factor * (a - b))
            .collect()
    }
}

/// A training pair with its language target precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub features: Vec<f64>,
    pub target: FactEmbedding,
}

fn check_dims(v: &FactEmbedding, l: &FactEmbedding) -> Result<(), TrainError> {
    let (dv, dl) = (v.dims(), l.dims());
    for i in 0..3 {
        ShapeError::check("loss slot width", dl[i], dv[i])?;
    }
    Ok(())
}

/// Mask-weighted sum of slot distances. Wildcard slots contribute nothing.
pub fn wildcard_loss(
    v: &FactEmbedding,
    l: &FactEmbedding,
    cfg: &LossConfig,
) -> Result<f64, TrainError> {
    if v.mask() != l.mask() {
        return Err(TrainError::MaskMismatch {
            visual: v.mask(),
            language: l.mask(),
        });
    }
    check_dims(v, l)?;
    let mask = l.mask();
    Ok(Slot::ALL
        .into_iter()
        .filter(|s| mask.is_active(*s))
        .map(|s| cfg.distance(v.slot(s), l.slot(s)))
        .sum())
}

/// Mean batch loss and its exact gradient with respect to every encoder
/// parameter.
pub fn loss_gradients(
    params: &EncoderParams,
    batch: &[&TrainingPair],
    cfg: &LossConfig,
) -> Result<(f64, EncoderParams), TrainError> {
    let mut grads = params.zeros_like();
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    params.validate()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for pair in batch {
        let cache = params.forward(&pair.features)?;
        let target = &pair.target;
        let mask = target.mask();
        let [s, p, o] = cache.v.clone();
        let v = FactEmbedding::new(s, p, o, mask);
        total += wildcard_loss(&v, target, cfg)?;
        let dv: [Vec<f64>; 3] = std::array::from_fn(|i| {
            let slot = Slot::ALL[i];
            if mask.is_active(slot) {
                cfg.distance_grad(&cache.v[i], target.slot(slot), scale)
            } else {
                vec![0.0; cache.v[i].len()]
            }
        });
        params.backward(&cache, &dv, &mut grads);
    }
    Ok((total * scale, grads))
}

/// Mean batch loss without gradients.
pub fn batch_loss(
    params: &EncoderParams,
    batch: &[&TrainingPair],
    cfg: &LossConfig,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for pair in batch {
        let v = crate::visual::encode_visual(params, &pair.features, pair.target.mask())?;
        total += wildcard_loss(&v, &pair.target, cfg)?;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fact::{FactOrder, WildcardMask};
    use crate::visual::{init_params, EncoderSpec};

    fn emb(s: &[f64], p: &[f64], o: &[f64], mask: WildcardMask) -> FactEmbedding {
        FactEmbedding::new(s.to_vec(), p.to_vec(), o.to_vec(), mask)
    }

    #[test]
    fn identical_views_have_zero_loss() {
        let e = emb(&[1., 2.], &[3., 4.], &[5., 6.], WildcardMask::FULL);
        assert_eq!(wildcard_loss(&e, &e, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn squared_hand_case() {
        let v = emb(&[1., 0.], &[0.5, 0.5], &[2., 1.], WildcardMask::FULL);
        let l = emb(&[0., 1.], &[0.5, 0.5], &[2., 1.], WildcardMask::FULL);
        assert_eq!(wildcard_loss(&v, &l, &LossConfig::default()).unwrap(), 2.0);
        let euclid = LossConfig {
            distance: DistanceKind::Euclidean,
            epsilon: 1e-6,
        };
        let d = wildcard_loss(&v, &l, &euclid).unwrap();
        assert!((d - (2.0f64.sqrt() + 2e-6)).abs() < 1e-9);
    }

    #[test]
    fn second_order_ignores_object_slot() {
        let m = FactOrder::Second.mask();
        let l = emb(&[1., 0.], &[0., 1.], &[0., 0.], m);
        let v1 = emb(&[0.9, 0.1], &[0.2, 0.8], &[100., -3.], m);
        let v2 = emb(&[0.9, 0.1], &[0.2, 0.8], &[-7., 42.], m);
        let cfg = LossConfig::default();
        assert_eq!(
            wildcard_loss(&v1, &l, &cfg).unwrap(),
            wildcard_loss(&v2, &l, &cfg).unwrap()
        );
    }

    #[test]
    fn mask_mismatch() {
        let a = emb(&[1.], &[1.], &[1.], WildcardMask::FULL);
        let b = emb(&[1.], &[1.], &[1.], FactOrder::First.mask());
        assert!(matches!(
            wildcard_loss(&a, &b, &LossConfig::default()),
            Err(TrainError::MaskMismatch { .. })
        ));
    }

    #[test]
    fn first_order_batch_leaves_p_o_projections_untouched() {
        let spec = EncoderSpec::model1(3, vec![4], 2);
        let params = init_params(&spec, 4).unwrap();
        let m = FactOrder::First.mask();
        let pairs: Vec<_> = (0..5)
            .map(|i| TrainingPair {
                features: vec![i as f64 * 0.3, 1.0, -0.5],
                target: emb(&[0.2, -0.1 * i as f64], &[0.; 2], &[0.; 2], m),
            })
            .collect();
        let refs: Vec<_> = pairs.iter().collect();
        let (loss, g) = loss_gradients(&params, &refs, &LossConfig::default()).unwrap();
        assert!(loss > 0.0);
        assert!(g.proj_p.as_slice().iter().all(|x| *x == 0.0));
        assert!(g.proj_o.as_slice().iter().all(|x| *x == 0.0));
        assert!(g.proj_s.as_slice().iter().any(|x| *x != 0.0));
        let direct = batch_loss(&params, &refs, &LossConfig::default()).unwrap();
        assert!((direct - loss).abs() < 1e-12);
    }
}
