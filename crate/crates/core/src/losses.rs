//! Appearance, structure and identity losses and their weighted sum.
//!
//! Every loss returns a differentiable scalar tensor. Norms are plain
//! Frobenius/Euclidean norms with no normalization by token count.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ClsToken, SelfSimMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Structure weight.
    pub alpha: f64,
    /// Identity weight.
    pub beta: f64,
}

impl LossWeights {
    pub const SPLICE: LossWeights = LossWeights { alpha: 0.1, beta: 0.1 };
    pub const SPLICENET: LossWeights = LossWeights { alpha: 2.0, beta: 0.1 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub app: f64,
    pub structure: f64,
    pub identity: f64,
}

impl LossReport {
    pub fn from_components(app: f64, structure: f64, identity: f64, weights: LossWeights) -> Self {
        Self {
            total: app + weights.alpha * structure + weights.beta * identity,
            app,
            structure,
            identity,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.app.is_finite() && self.structure.is_finite() && self.identity.is_finite()
    }

    /// Name and value of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("appearance", self.app),
            ("structure", self.structure),
            ("identity", self.identity),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

/// Differentiable objective plus its host-side breakdown.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Tensor,
    pub report: LossReport,
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `||a - b||_2` over all elements. Returns an exact zero (with zero
/// gradient) when the inputs coincide.
pub fn frobenius_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cannot compare tensors of shape {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let sq = (a - b)?.sqr()?.sum_all()?;
    if scalar(&sq)? == 0.0 {
        return Ok(sq);
    }
    Ok(sq.sqrt()?)
}

pub fn appearance_loss(cls_out: &ClsToken, cls_target: &ClsToken) -> Result<Tensor> {
    if cls_out.dim() != cls_target.dim() {
        return Err(Error::Shape(format!(
            "[CLS] dimensions differ: {} vs {}",
            cls_out.dim(),
            cls_target.dim()
        )));
    }
    frobenius_distance(&cls_out.vector, &cls_target.vector)
}

pub fn structure_loss(sim_out: &SelfSimMatrix, sim_source: &SelfSimMatrix) -> Result<Tensor> {
    if sim_out.matrix.dims() != sim_source.matrix.dims() {
        return Err(Error::Shape(format!(
            "self-similarity shapes differ ({:?} vs {:?}); output and structure resolutions disagree",
            sim_out.matrix.dims(),
            sim_source.matrix.dims()
        )));
    }
    frobenius_distance(&sim_out.matrix, &sim_source.matrix)
}

pub fn identity_loss_keys(keys_target: &Tensor, keys_generated: &Tensor) -> Result<Tensor> {
    frobenius_distance(keys_generated, keys_target)
}

pub fn combine(app: Tensor, structure: Tensor, identity: Tensor, weights: LossWeights) -> Result<Objective> {
    weights.validate()?;
    let report = LossReport::from_components(scalar(&app)?, scalar(&structure)?, scalar(&identity)?, weights);
    let total = ((app + (structure * weights.alpha)?)? + (identity * weights.beta)?)?;
    Ok(Objective { total, report })
}

/// Appearance + alpha * structure + beta * identity (keys form).
#[allow(clippy::too_many_arguments)]
pub fn splice_objective(
    cls_out: &ClsToken,
    cls_target: &ClsToken,
    sim_out: &SelfSimMatrix,
    sim_source: &SelfSimMatrix,
    keys_target: &Tensor,
    keys_of_generated_target: &Tensor,
    weights: LossWeights,
) -> Result<Objective> {
    let app = appearance_loss(cls_out, cls_target)?;
    let structure = structure_loss(sim_out, sim_source)?;
    let identity = identity_loss_keys(keys_target, keys_of_generated_target)?;
    combine(app, structure, identity, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn token(v: &[f32]) -> ClsToken {
        ClsToken::from_vec(v, 12, &Device::Cpu, DType::F64).unwrap()
    }

    #[test]
    fn appearance_of_opposite_units_is_two() {
        let l = appearance_loss(&token(&[1.0, 0.0, 0.0]), &token(&[-1.0, 0.0, 0.0])).unwrap();
        assert!((scalar(&l).unwrap() - 2.0).abs() < 1e-12);
        let z = appearance_loss(&token(&[0.3, 0.1]), &token(&[0.3, 0.1])).unwrap();
        assert_eq!(scalar(&z).unwrap(), 0.0);
    }

    #[test]
    fn appearance_dimension_mismatch() {
        assert!(matches!(
            appearance_loss(&token(&[1.0, 0.0]), &token(&[1.0, 0.0, 0.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn structure_identity_vs_ones() {
        let dev = Device::Cpu;
        let a = SelfSimMatrix::from_matrix(Tensor::eye(3, DType::F64, &dev).unwrap()).unwrap();
        let b = SelfSimMatrix::from_matrix(Tensor::ones((3, 3), DType::F64, &dev).unwrap()).unwrap();
        let l = scalar(&structure_loss(&a, &b).unwrap()).unwrap();
        assert!((l - 6f64.sqrt()).abs() < 1e-12);
        let c = SelfSimMatrix::from_matrix(Tensor::eye(4, DType::F64, &dev).unwrap()).unwrap();
        assert!(matches!(structure_loss(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_keys_plus_ones() {
        let dev = Device::Cpu;
        let k = Tensor::randn(0f64, 1.0, (5, 7), &dev).unwrap();
        let l = identity_loss_keys(&k, &(&k + 1.0).unwrap()).unwrap();
        assert!((scalar(&l).unwrap() - 35f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn zero_distance_has_zero_gradient() {
        let v = candle_core::Var::new(&[1.0f64, 2.0], &Device::Cpu).unwrap();
        let l = frobenius_distance(v.as_tensor(), &v.as_tensor().detach()).unwrap();
        let g = l.backward().unwrap();
        let gv = g.get(v.as_tensor()).map(|t| t.to_vec1::<f64>().unwrap());
        assert!(gv.map_or(true, |g| g.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn weighted_totals() {
        let r = LossReport::from_components(2.0, 10.0, 10.0, LossWeights::SPLICE);
        assert!((r.total - 4.0).abs() < 1e-12);
        let r = LossReport::from_components(1.0, 1.0, 1.0, LossWeights::SPLICENET);
        assert!((r.total - 3.1).abs() < 1e-12);
        assert!(LossWeights { alpha: -1.0, beta: 0.0 }.validate().is_err());
    }
}
