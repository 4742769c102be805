use crate::error::{Error, Result};
use crate::tensor::serialize::LayerWeights;
use crate::tensor::ParamGrad;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

/// SGD with momentum (`v ← μv + g + λw`, `w ← w − η v`) or Adam with L2 weight
/// decay. Decay applies to conv and dense weights only, never to biases or
/// batch-norm parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config("momentum must be in [0,1) and weight_decay >= 0".into()));
        }
        Ok(Optimizer { kind, momentum, weight_decay, first: Vec::new(), second: Vec::new(), steps: 0 })
    }

    pub fn step(&mut self, params: &mut [LayerWeights], grads: &[Option<ParamGrad>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidShape(format!("{} gradients for {} parameter records", grads.len(), params.len())));
        }
        if self.first.len() != 2 * params.len() {
            self.first = vec![Vec::new(); 2 * params.len()];
            self.second = vec![Vec::new(); 2 * params.len()];
        }
        self.steps += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let slots: [(&mut Vec<f64>, Option<&Vec<f64>>, bool); 2] = match (p, g) {
                (LayerWeights::Conv(p), Some(ParamGrad::Conv { weights, bias })) => {
                    [(&mut p.weights, Some(weights), true), (&mut p.bias, Some(bias), false)]
                }
                (LayerWeights::Dense(p), Some(ParamGrad::Dense { weights, bias })) => {
                    [(&mut p.weights, Some(weights), true), (&mut p.bias, Some(bias), false)]
                }
                (LayerWeights::BatchNorm(p), Some(ParamGrad::BatchNorm { gamma, beta })) => {
                    [(&mut p.gamma, Some(gamma), false), (&mut p.beta, Some(beta), false)]
                }
                (LayerWeights::Conv(p), None) => [(&mut p.weights, None, true), (&mut p.bias, None, false)],
                (LayerWeights::Dense(p), None) => [(&mut p.weights, None, true), (&mut p.bias, None, false)],
                (LayerWeights::BatchNorm(p), None) => [(&mut p.gamma, None, false), (&mut p.beta, None, false)],
                (w, Some(_)) => {
                    return Err(Error::InvalidShape(format!("record {i}: gradient kind does not match {}", w.kind_name())));
                }
            };
            for (j, (w, g, decays)) in slots.into_iter().enumerate() {
                if let Some(g) = g {
                    if g.len() != w.len() {
                        return Err(Error::InvalidShape(format!("record {i}: gradient length {} != {}", g.len(), w.len())));
                    }
                }
                let wd = if decays { self.weight_decay } else { 0.0 };
                if g.is_none() && wd == 0.0 {
                    continue;
                }
                self.update(2 * i + j, w, g.map(|v| v.as_slice()), wd, lr);
            }
        }
        Ok(())
    }

    fn update(&mut self, slot: usize, w: &mut [f64], g: Option<&[f64]>, wd: f64, lr: f64) {
        let m = &mut self.first[slot];
        if m.len() != w.len() {
            *m = vec![0.0; w.len()];
        }
        let grad = |k: usize, w: f64| g.map_or(0.0, |g| g[k]) + wd * w;
        match self.kind {
            OptimizerKind::Sgd => {
                for k in 0..w.len() {
                    m[k] = self.momentum * m[k] + grad(k, w[k]);
                    w[k] -= lr * m[k];
                }
            }
            OptimizerKind::Adam => {
                let v = &mut self.second[slot];
                if v.len() != w.len() {
                    *v = vec![0.0; w.len()];
                }
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for k in 0..w.len() {
                    let gk = grad(k, w[k]);
                    m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                    v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                    w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPSILON);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{BatchNormParams, DenseParams};

    fn records() -> Vec<LayerWeights> {
        vec![
            LayerWeights::Dense(DenseParams::new(2, 2, vec![1.0, -2.0, 0.5, 3.0], vec![0.25, -0.75]).unwrap()),
            LayerWeights::BatchNorm(BatchNormParams::identity(2, 1e-5)),
        ]
    }

    #[test]
    fn weight_decay_shrinks_exactly() {
        let mut params = records();
        let before = params.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.9, 0.25).unwrap();
        opt.step(&mut params, &[None, None], 0.5).unwrap();
        let (LayerWeights::Dense(a), LayerWeights::Dense(b)) = (&params[0], &before[0]) else { unreachable!() };
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert_eq!(*x, y * (1.0 - 0.5 * 0.25));
        }
        assert_eq!(a.bias, b.bias);
        assert_eq!(params[1], before[1]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut params = records();
        let g = ParamGrad::Dense { weights: vec![1.0; 4], bias: vec![0.0; 2] };
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, 0.0).unwrap();
        opt.step(&mut params, &[Some(g.clone()), None], 0.1).unwrap();
        opt.step(&mut params, &[Some(g), None], 0.1).unwrap();
        let LayerWeights::Dense(d) = &params[0] else { unreachable!() };
        // steps of 0.1·1 then 0.1·1.5
        assert!((d.weights[0] - (1.0 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut params = records();
        let g = ParamGrad::Dense { weights: vec![3.0, -0.01, 100.0, -2.0], bias: vec![0.0; 2] };
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, 0.0).unwrap();
        opt.step(&mut params, &[Some(g), None], 0.01).unwrap();
        let LayerWeights::Dense(d) = &params[0] else { unreachable!() };
        let expected = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01, 3.0 + 0.01];
        for (w, e) in d.weights.iter().zip(expected) {
            assert!((w - e).abs() < 1e-6, "{w} vs {e}");
        }
        assert!(Optimizer::new(OptimizerKind::Sgd, 1.0, 0.0).is_err());
    }
}
