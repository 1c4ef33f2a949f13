//! l2 PGD against smoothed denoise-and-classify pipelines (SmoothAdv-style
//! gradient averaging) and the empirical clean/robust accuracy protocol.

use crate::data::Sample;
use crate::error::{domain, Result};
use crate::rng::{fill_normal, phase, substream};
use crate::smoothing::{predict, BaseClassifier, DenoisedClassifier, Outcome, SmoothingConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l2 budget in `[0,1]` input space.
    pub epsilon: f64,
    pub steps: usize,
    pub m_test: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(epsilon: f64, steps: usize, m_test: usize, seed: u64) -> Result<Self> {
        if !(epsilon >= 0.0) || steps < 1 || m_test < 1 {
            return domain(format!("invalid attack config eps={epsilon} steps={steps} m_test={m_test}"));
        }
        Ok(Self { epsilon, steps, m_test, seed })
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { epsilon: 0.5, steps: 100, m_test: 32, seed: 0 }
    }
}

/// PGD step size `(4/3) * epsilon / steps`.
pub fn pgd_step_size(epsilon: f64, steps: usize) -> f64 {
    4.0 / 3.0 * epsilon / steps as f64
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projects `x_adv` onto the l2 ball of radius `epsilon` around `x`.
pub fn project_l2(x_adv: &[f64], x: &[f64], epsilon: f64) -> Vec<f64> {
    let delta: Vec<f64> = x_adv.iter().zip(x).map(|(a, b)| a - b).collect();
    let norm = l2_norm(&delta);
    let scale = if norm > epsilon { epsilon / norm } else { 1.0 };
    x.iter().zip(&delta).map(|(xi, d)| xi + d * scale).collect()
}

/// Anything that exposes a cross-entropy loss and its input gradient.
pub trait DifferentiablePipeline: BaseClassifier {
    fn loss_and_input_grad(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)>;
}

impl DifferentiablePipeline for DenoisedClassifier<'_> {
    fn loss_and_input_grad(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        DenoisedClassifier::loss_and_input_grad(self, x, label)
    }
}

impl DifferentiablePipeline for crate::classifier::Classifier {
    fn loss_and_input_grad(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        self.loss_and_grads(x, label, 1.0, None)
    }
}

/// `(1/m) sum_i grad_x CE(pipeline(x + delta_i), y)` with `delta_i ~ N(0, sigma^2 I)`
/// drawn from `substream(seed, keys ++ [i])`.
pub fn smoothadv_grad(
    pipeline: &dyn DifferentiablePipeline,
    x: &[f64],
    label: usize,
    sigma: f64,
    m: usize,
    seed: u64,
    keys: &[u64],
) -> Result<Vec<f64>> {
    let mut total = vec![0.0; x.len()];
    let mut noisy = vec![0.0; x.len()];
    let mut path = keys.to_vec();
    path.push(0);
    for i in 0..m {
        *path.last_mut().unwrap() = i as u64;
        let mut rng = substream(seed, &path);
        fill_normal(&mut rng, sigma, &mut noisy);
        for (n, xi) in noisy.iter_mut().zip(x) {
            *n += xi;
        }
        let (_, g) = pipeline.loss_and_input_grad(&noisy, label)?;
        for (t, gi) in total.iter_mut().zip(g) {
            *t += gi;
        }
    }
    let inv = 1.0 / m as f64;
    Ok(total.into_iter().map(|v| v * inv).collect())
}

/// Normalized-gradient l2 PGD with fresh noise every step. Steps whose
/// averaged gradient is exactly zero leave the iterate unchanged.
pub fn pgd_l2(
    pipeline: &dyn DifferentiablePipeline,
    x: &[f64],
    label: usize,
    atk: &AttackConfig,
    sigma: f64,
    example: u64,
) -> Result<Vec<f64>> {
    let mut x_adv = x.to_vec();
    if atk.epsilon == 0.0 {
        return Ok(x_adv);
    }
    let step = pgd_step_size(atk.epsilon, atk.steps);
    for s in 0..atk.steps {
        let g = smoothadv_grad(pipeline, &x_adv, label, sigma, atk.m_test, atk.seed, &[phase::ATTACK, example, s as u64])?;
        let norm = l2_norm(&g);
        if !(norm > 0.0) || !norm.is_finite() {
            continue;
        }
        let moved: Vec<f64> = x_adv.iter().zip(&g).map(|(a, gi)| a + step * gi / norm).collect();
        x_adv = project_l2(&moved, x, atk.epsilon).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    }
    Ok(x_adv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialResult {
    pub epsilon: f64,
    pub outcome: Outcome,
    pub perturbation_norm: f64,
}

/// Per-example result of the empirical evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub label: usize,
    pub clean_outcome: Outcome,
    /// Base-classifier prediction on the clean input, used when Predict abstains.
    pub fallback: Option<usize>,
    pub clean_correct: bool,
    pub adversarial: Vec<AdversarialResult>,
    pub certified_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustAccuracy {
    pub epsilon: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub clean_accuracy: f64,
    pub robust_accuracy: Vec<RobustAccuracy>,
    pub abstain_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub smoothing: SmoothingConfig,
    /// Number of draws for Predict.
    pub n_predict: u64,
    pub epsilons: Vec<f64>,
    pub steps: usize,
    pub m_test: usize,
    pub seed: u64,
}

/// Clean accuracy with abstain fallback and robust accuracy under PGD for every budget.
///
/// Clean: Predict correct, or Predict abstains and the base classifier on the
/// un-noised input is correct. Robust: Predict on the adversarial input
/// returns the true label; abstaining there counts as an attack success.
pub fn evaluate_example(
    pipeline: &dyn DifferentiablePipeline,
    sample: &Sample,
    index: usize,
    settings: &EvalSettings,
) -> Result<EvalRecord> {
    let cfg = &settings.smoothing;
    let clean = predict(pipeline, &sample.features, settings.n_predict, cfg, settings.seed, index as u64, phase::PREDICT)?;
    let fallback = match clean.outcome {
        Outcome::Abstain => Some(pipeline.classify(&sample.features)),
        Outcome::Class(_) => None,
    };
    let clean_correct = clean.outcome.is(sample.label) || fallback == Some(sample.label);
    let mut adversarial = Vec::with_capacity(settings.epsilons.len());
    for &epsilon in &settings.epsilons {
        let atk = AttackConfig::new(epsilon, settings.steps, settings.m_test, settings.seed)?;
        let x_adv = pgd_l2(pipeline, &sample.features, sample.label, &atk, cfg.sigma, index as u64)?;
        let norm = l2_norm(&x_adv.iter().zip(&sample.features).map(|(a, b)| a - b).collect::<Vec<_>>());
        // Same noise draws as the clean Predict, so a zero budget reproduces it exactly.
        let adv = predict(pipeline, &x_adv, settings.n_predict, cfg, settings.seed, index as u64, phase::PREDICT)?;
        adversarial.push(AdversarialResult { epsilon, outcome: adv.outcome, perturbation_norm: norm });
    }
    Ok(EvalRecord {
        index,
        label: sample.label,
        clean_outcome: clean.outcome,
        fallback,
        clean_correct,
        adversarial,
        certified_radius: None,
    })
}

pub fn empirical_eval(
    pipeline: &dyn DifferentiablePipeline,
    samples: &[Sample],
    settings: &EvalSettings,
) -> Result<(Vec<EvalRecord>, EvalMetrics)> {
    let records = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| evaluate_example(pipeline, s, i, settings))
        .collect::<Result<Vec<_>>>()?;
    let metrics = aggregate_eval(&records, &settings.epsilons);
    Ok((records, metrics))
}

pub fn aggregate_eval(records: &[EvalRecord], epsilons: &[f64]) -> EvalMetrics {
    let n = records.len().max(1) as f64;
    let clean_accuracy = records.iter().filter(|r| r.clean_correct).count() as f64 / n;
    let abstain_rate = records.iter().filter(|r| r.clean_outcome == Outcome::Abstain).count() as f64 / n;
    let robust_accuracy = epsilons
        .iter()
        .enumerate()
        .map(|(e, &epsilon)| RobustAccuracy {
            epsilon,
            accuracy: records.iter().filter(|r| r.adversarial[e].outcome.is(r.label)).count() as f64 / n,
        })
        .collect();
    EvalMetrics { clean_accuracy, robust_accuracy, abstain_rate }
}
