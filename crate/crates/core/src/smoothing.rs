//! Randomized smoothing: Monte-Carlo prediction and certification of the
//! majority vote of a base classifier under isotropic Gaussian noise.
//!
//! Noise is drawn in `[0,1]` input space. When the base classifier is a
//! denoise-and-classify pipeline, the pipeline itself rescales to model space
//! and doubles the noise level it hands to the denoiser.

use crate::classifier::{argmax, Classifier};
use crate::data::{denormalize, normalize};
use crate::denoiser::{Conditioning, DenoiseStep, Denoiser};
use crate::error::{domain, Result};
use crate::nn::dot;
use crate::rng::{fill_normal, phase, substream};
use crate::schedule::{effective_sigma, CorrectionFactor, NoiseSchedule};
use crate::stats::{binom_p_value_two_sided, clopper_pearson_lower, normal_cdf, normal_quantile, Probability, Significance};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A hard-label classifier evaluated on (possibly noisy) inputs.
pub trait BaseClassifier: Sync {
    fn num_classes(&self) -> usize;
    fn classify(&self, x: &[f64]) -> usize;
}

impl BaseClassifier for Classifier {
    fn num_classes(&self) -> usize {
        Classifier::num_classes(self)
    }

    fn classify(&self, x: &[f64]) -> usize {
        self.predict(x)
    }
}

/// Denoise-and-classify: normalize, one-step denoise at the doubled noise
/// level, map back to `[0,1]`, clamp, classify.
pub struct DenoisedClassifier<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub classifier: &'a Classifier,
    pub step: DenoiseStep,
}

impl<'a> DenoisedClassifier<'a> {
    /// `sigma` is the smoothing noise level in `[0,1]` input space.
    pub fn new(
        denoiser: &'a dyn Denoiser,
        classifier: &'a Classifier,
        schedule: &NoiseSchedule,
        sigma: f64,
        k: CorrectionFactor,
        cond: Conditioning,
    ) -> Result<Self> {
        let step = DenoiseStep::new(schedule, effective_sigma(sigma)?, k, cond)?;
        Ok(Self { denoiser, classifier, step })
    }

    /// The clamped `[0,1]` image handed to the classifier.
    pub fn denoised(&self, x_noisy: &[f64]) -> Vec<f64> {
        let out = self.step.apply(self.denoiser, &normalize(x_noisy));
        denormalize(&out).into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
    }

    /// Cross-entropy of the pipeline against `label` and its gradient with respect to `x_noisy`.
    pub fn loss_and_input_grad(&self, x_noisy: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        let y = normalize(x_noisy);
        let den = self.step.apply(self.denoiser, &y);
        let pre: Vec<f64> = denormalize(&den);
        let z: Vec<f64> = pre.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let (loss, g_z) = self.classifier.loss_and_grads(&z, label, 1.0, None)?;
        // clamp passes gradient only strictly inside the box; denormalize halves it.
        let g_den: Vec<f64> =
            g_z.iter().zip(&pre).map(|(g, p)| if *p > 0.0 && *p < 1.0 { 0.5 * g } else { 0.0 }).collect();
        let g_y = self.step.vjp(self.denoiser, &y, &g_den);
        Ok((loss, g_y.into_iter().map(|g| 2.0 * g).collect()))
    }
}

impl BaseClassifier for DenoisedClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    fn classify(&self, x: &[f64]) -> usize {
        self.classifier.predict(&self.denoised(x))
    }
}

/// Identifies the substream family of one Monte-Carlo batch:
/// draw `i` uses `substream(seed, [example, phase, i])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
    pub example: u64,
    pub phase: u64,
}

/// Counts of base predictions over `m` noisy copies of `x`. The result does
/// not depend on `batch` or on the number of worker threads.
pub fn sample_under_noise(
    base: &dyn BaseClassifier,
    x: &[f64],
    m: u64,
    sigma: f64,
    stream: NoiseStream,
    batch: usize,
) -> Vec<u64> {
    let k = base.num_classes();
    let batch = batch.max(1) as u64;
    let chunks = m.div_ceil(batch);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut counts = vec![0u64; k];
            let mut noisy = vec![0.0; x.len()];
            for i in c * batch..((c + 1) * batch).min(m) {
                let mut rng = substream(stream.seed, &[stream.example, stream.phase, i]);
                fill_normal(&mut rng, sigma, &mut noisy);
                for (n, xi) in noisy.iter_mut().zip(x) {
                    *n += xi;
                }
                counts[base.classify(&noisy)] += 1;
            }
            counts
        })
        .reduce(
            || vec![0u64; k],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    /// Noise level in `[0,1]` input space.
    pub sigma: f64,
    pub n0: u64,
    pub n: u64,
    pub alpha: Significance,
    pub batch: usize,
}

impl SmoothingConfig {
    pub fn new(sigma: f64, n0: u64, n: u64, alpha: f64, batch: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return domain(format!("smoothing sigma must be positive, got {sigma}"));
        }
        if n0 < 1 || n < n0 {
            return domain(format!("need 1 <= n0 <= n, got n0={n0} n={n}"));
        }
        Ok(Self { sigma, n0, n, alpha: Significance::new(alpha)?, batch: batch.max(1) })
    }
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self::new(0.25, 100, 10_000, 0.001, 1000).unwrap()
    }
}

/// Serialized as the class index or the string `"abstain"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Class(usize),
    Abstain,
}

impl Serialize for Outcome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Outcome::Class(c) => s.serialize_u64(*c as u64),
            Outcome::Abstain => s.serialize_str("abstain"),
        }
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|c| Outcome::Class(c as usize))
                .ok_or_else(|| serde::de::Error::custom("class index must be a non-negative integer")),
            serde_json::Value::String(s) if s == "abstain" => Ok(Outcome::Abstain),
            other => Err(serde::de::Error::custom(format!("invalid outcome {other}"))),
        }
    }
}

impl Outcome {
    pub fn class(self) -> Option<usize> {
        match self {
            Outcome::Class(c) => Some(c),
            Outcome::Abstain => None,
        }
    }

    pub fn is(self, label: usize) -> bool {
        self == Outcome::Class(label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOutcome {
    pub outcome: Outcome,
    pub n_a: u64,
    pub n_b: u64,
    pub p_value: Probability,
}

/// Largest and second-largest counts; the top index breaks ties toward the lowest class.
fn top_two(counts: &[u64]) -> (usize, u64, u64) {
    let top = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let runner_up = counts.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, &c)| c).max().unwrap_or(0);
    (top, counts[top], runner_up)
}

/// Abstaining prediction from a count table: the top class is returned only
/// when the binomial test of top versus runner-up rejects at `alpha`.
pub fn predict_from_counts(counts: &[u64], alpha: Significance) -> Result<PredictOutcome> {
    let (top, n_a, n_b) = top_two(counts);
    let p_value = binom_p_value_two_sided(n_a, n_b)?;
    let outcome = if p_value.get() <= alpha.get() { Outcome::Class(top) } else { Outcome::Abstain };
    Ok(PredictOutcome { outcome, n_a, n_b, p_value })
}

/// Monte-Carlo prediction with `n` draws.
pub fn predict(
    base: &dyn BaseClassifier,
    x: &[f64],
    n: u64,
    cfg: &SmoothingConfig,
    seed: u64,
    example: u64,
    phase_tag: u64,
) -> Result<PredictOutcome> {
    let stream = NoiseStream { seed, example, phase: phase_tag };
    let counts = sample_under_noise(base, x, n, cfg.sigma, stream, cfg.batch);
    predict_from_counts(&counts, cfg.alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub outcome: Outcome,
    pub pa_lower: Probability,
    pub radius: f64,
    pub counts_selection: Vec<u64>,
    pub counts_estimation: Vec<u64>,
}

/// Certificate from selection and estimation counts.
pub fn certificate_from_counts(
    counts_selection: Vec<u64>,
    counts_estimation: Vec<u64>,
    sigma: f64,
    alpha: Significance,
) -> Result<Certificate> {
    let (top, _, _) = top_two(&counts_selection);
    let n: u64 = counts_estimation.iter().sum();
    let pa_lower = clopper_pearson_lower(counts_estimation[top], n, alpha)?;
    let (outcome, radius) = if pa_lower.get() > 0.5 {
        (Outcome::Class(top), certified_radius(sigma, pa_lower.get())?)
    } else {
        (Outcome::Abstain, 0.0)
    };
    Ok(Certificate { outcome, pa_lower, radius, counts_selection, counts_estimation })
}

/// Selection with `n0` draws, estimation with `n` fresh draws from a disjoint substream.
pub fn certify(
    base: &dyn BaseClassifier,
    x: &[f64],
    cfg: &SmoothingConfig,
    seed: u64,
    example: u64,
) -> Result<Certificate> {
    let sel = sample_under_noise(
        base,
        x,
        cfg.n0,
        cfg.sigma,
        NoiseStream { seed, example, phase: phase::SELECTION },
        cfg.batch,
    );
    let est = sample_under_noise(
        base,
        x,
        cfg.n,
        cfg.sigma,
        NoiseStream { seed, example, phase: phase::ESTIMATION },
        cfg.batch,
    );
    certificate_from_counts(sel, est, cfg.sigma, cfg.alpha)
}

/// `sigma * Phi^{-1}(p)` for `p > 1/2`, zero otherwise.
pub fn certified_radius(sigma: f64, pa_lower: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return domain(format!("sigma must be positive, got {sigma}"));
    }
    let p = Probability::new(pa_lower)?.get();
    if p <= 0.5 {
        Ok(0.0)
    } else if p == 1.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(sigma * normal_quantile(p)?)
    }
}

/// Exact probability that a binary linear rule `w.x + b > 0` fires under
/// `N(0, sigma^2 I)` noise: `Phi((w.x + b) / (sigma ||w||))`.
pub fn analytic_linear_pa(w: &[f64], b: f64, x: &[f64], sigma: f64) -> Result<Probability> {
    let norm = dot(w, w).sqrt();
    if !(norm > 0.0) {
        return domain("linear oracle needs a non-zero weight vector");
    }
    if !(sigma > 0.0) {
        return domain(format!("sigma must be positive, got {sigma}"));
    }
    normal_cdf((dot(w, x) + b) / (sigma * norm))
}

/// The two-class rule behind [`analytic_linear_pa`]: class 1 iff `w.x + b > 0`.
pub fn linear_threshold_classifier(w: &[f64], b: f64) -> Classifier {
    Classifier::Linear { weights: vec![vec![0.0; w.len()], w.to_vec()], bias: vec![0.0, b] }
}
