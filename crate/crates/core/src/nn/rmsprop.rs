use serde::{Deserialize, Serialize};

use super::params::{GradientBuffer, ParameterSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            decay: 0.97,
            eps: 1e-6,
        }
    }
}

/// `ms <- decay * ms + (1 - decay) * g^2; p <- p - lr * g / sqrt(ms + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    mean_square: Vec<f64>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &ParameterSet) -> Self {
        Self {
            config,
            mean_square: vec![0.0; params.flat().len()],
        }
    }

    pub fn mean_square(&self) -> &[f64] {
        &self.mean_square
    }

    /// Rejects the whole step (leaving parameters and state untouched) when
    /// any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradientBuffer) -> Result<()> {
        if grads.layout() != params.layout() || self.mean_square.len() != params.flat().len() {
            return Err(Error::Usage("optimizer, parameter and gradient layouts differ".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let RmsPropConfig { lr, decay, eps } = self.config;
        for ((p, &g), ms) in params
            .flat_mut()
            .iter_mut()
            .zip(grads.flat())
            .zip(self.mean_square.iter_mut())
        {
            *ms = decay * *ms + (1.0 - decay) * g * g;
            *p -= lr * g / (*ms + eps).sqrt();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Layout, ParamSpec};

    fn scalar() -> ParameterSet {
        ParameterSet::zeros(Layout::new(vec![ParamSpec::weight("w", 1, 1)]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar();
        p.flat_mut()[0] = 0.25;
        let mut opt = RmsProp::new(RmsPropConfig::default(), &p);
        let g = GradientBuffer::zeros_like(&p);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.flat()[0], 0.25);
    }

    #[test]
    fn two_unit_gradient_steps() {
        let mut p = scalar();
        let mut opt = RmsProp::new(RmsPropConfig::default(), &p);
        let mut g = GradientBuffer::zeros_like(&p);
        g.flat_mut()[0] = 1.0;
        opt.step(&mut p, &g).unwrap();
        assert!((opt.mean_square()[0] - 0.03).abs() < 1e-15);
        // -0.001 / sqrt(0.030001)
        assert!((p.flat()[0] + 0.005_773_406_469_256_952).abs() < 1e-15, "{}", p.flat()[0]);
        opt.step(&mut p, &g).unwrap();
        // 0.97 * 0.03 + 0.03
        assert!((opt.mean_square()[0] - 0.0591).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = scalar();
        let mut opt = RmsProp::new(RmsPropConfig::default(), &p);
        let mut g = GradientBuffer::zeros_like(&p);
        g.flat_mut()[0] = f64::NAN;
        assert!(matches!(opt.step(&mut p, &g), Err(Error::NonFinite(_))));
        assert_eq!(p.flat()[0], 0.0);
        assert_eq!(opt.mean_square()[0], 0.0);
    }
}
