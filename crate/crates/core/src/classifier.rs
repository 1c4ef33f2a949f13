//! Classifiers over `[0,1]^d` inputs: linear, Bayes-optimal for a [`GmmWorld`], and neural.

use crate::data::GmmWorld;
use crate::error::{contract, Result};
use crate::data::Sample;
use crate::error::Error;
use crate::nn::{cross_entropy, dot, sgd_step, Activation, ModelParams, ParamGrads, Sgd};
use crate::rng::{phase, substream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    /// Logits `W x + b`; `weights` holds one row per class.
    Linear { weights: Vec<Vec<f64>>, bias: Vec<f64> },
    /// Log prior plus Gaussian log-likelihood under the world (boundary clamping ignored).
    Bayes(GmmWorld),
    Neural(ModelParams),
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl Classifier {
    pub fn linear(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != bias.len() {
            return contract("linear classifier needs one bias per weight row");
        }
        let d = weights[0].len();
        if weights.iter().any(|r| r.len() != d) {
            return contract("linear classifier rows differ in width");
        }
        Ok(Classifier::Linear { weights, bias })
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Classifier::Linear { bias, .. } => bias.len(),
            Classifier::Bayes(w) => w.num_classes(),
            Classifier::Neural(p) => p.output_dim(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Classifier::Linear { weights, .. } => weights[0].len(),
            Classifier::Bayes(w) => w.dim(),
            Classifier::Neural(p) => p.input_dim(),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "contract violation: classifier input width");
        match self {
            Classifier::Linear { weights, bias } => weights.iter().zip(bias).map(|(w, b)| dot(w, x) + b).collect(),
            Classifier::Bayes(world) => {
                let var = world.gamma * world.gamma;
                let norm = -0.5 * world.dim() as f64 * (2.0 * PI * var).ln();
                world
                    .means
                    .iter()
                    .zip(&world.priors)
                    .map(|(mu, p)| {
                        let sq: f64 = x.iter().zip(mu).map(|(a, m)| (a - m) * (a - m)).sum();
                        p.ln() + norm - 0.5 * sq / var
                    })
                    .collect()
            }
            Classifier::Neural(p) => p.forward(x),
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// `J^T upstream` where `J` is the Jacobian of the logits at `x`.
    pub fn logits_vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        assert_eq!(upstream.len(), self.num_classes(), "contract violation: upstream width");
        match self {
            Classifier::Linear { weights, .. } => {
                let mut g = vec![0.0; x.len()];
                for (row, u) in weights.iter().zip(upstream) {
                    for (gi, w) in g.iter_mut().zip(row) {
                        *gi += u * w;
                    }
                }
                g
            }
            Classifier::Bayes(world) => {
                // d logit_c / dx = -(x - mu_c) / gamma^2
                let inv_var = 1.0 / (world.gamma * world.gamma);
                let mut g = vec![0.0; x.len()];
                for (mu, u) in world.means.iter().zip(upstream) {
                    for ((gi, xi), m) in g.iter_mut().zip(x).zip(mu) {
                        *gi -= u * (xi - m) * inv_var;
                    }
                }
                g
            }
            Classifier::Neural(p) => p.backward_accumulate(x, upstream, 1.0, None),
        }
    }

    /// Exact input gradient of the cross-entropy of `logits(x)` against `label`.
    pub fn input_gradient(&self, x: &[f64], label: usize) -> Result<Vec<f64>> {
        let (_, g) = cross_entropy(&self.logits(x), label)?;
        Ok(self.logits_vjp(x, &g))
    }

    /// Loss, input gradient and (for neural classifiers) the parameter gradient
    /// accumulated into `acc` with weight `scale`.
    pub fn loss_and_grads(
        &self,
        x: &[f64],
        label: usize,
        scale: f64,
        acc: Option<&mut ParamGrads>,
    ) -> Result<(f64, Vec<f64>)> {
        let (loss, g) = cross_entropy(&self.logits(x), label)?;
        let input_grad = match self {
            Classifier::Neural(p) => p.backward_accumulate(x, &g, scale, acc),
            _ => self.logits_vjp(x, &g),
        };
        Ok((loss, input_grad))
    }

    pub fn accuracy(&self, samples: &[crate::data::Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        samples.iter().filter(|s| self.predict(&s.features) == s.label).count() as f64 / samples.len() as f64
    }
}

/// Minibatch SGD settings for fitting a neural classifier on clean data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { hidden: 64, steps: 2000, lr: 0.05, momentum: 0.9, batch: 32, seed: 0 }
    }
}

/// One-hidden-layer tanh classifier trained with cross-entropy on `samples`.
pub fn fit_neural_classifier(samples: &[Sample], num_classes: usize, cfg: &FitConfig) -> Result<Classifier> {
    if samples.is_empty() {
        return Err(Error::Data("cannot fit a classifier on an empty dataset".into()));
    }
    if cfg.batch == 0 || cfg.hidden == 0 {
        return Err(Error::Config("classifier batch and hidden width must be positive".into()));
    }
    let d = samples[0].features.len();
    let mut rng = substream(cfg.seed, &[phase::INIT]);
    let mut params =
        ModelParams::xavier(&[d, cfg.hidden, num_classes], &[Activation::Tanh, Activation::Identity], &mut rng);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, params.num_params())?;
    let scale = 1.0 / cfg.batch as f64;
    for step in 0..cfg.steps {
        let mut rng = substream(cfg.seed, &[phase::TRAIN, step as u64]);
        let mut grads = ParamGrads::zeros_like(&params);
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let s = &samples[rng.gen_range(0..samples.len())];
            let (loss, g) = cross_entropy(&params.forward(&s.features), s.label)?;
            params.backward_accumulate(&s.features, &g, scale, Some(&mut grads));
            total += loss;
        }
        if !total.is_finite() {
            return Err(Error::Training(format!("classifier loss diverged at step {step}")));
        }
        sgd_step(&mut params, &grads, &mut opt)?;
    }
    Ok(Classifier::Neural(params))
}
