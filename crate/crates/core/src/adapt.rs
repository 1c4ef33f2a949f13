//! Self-adaptation: reference-set synthesis, classifier-guided
//! personalization of a neural denoiser, classifier fine-tuning on denoised
//! samples, and pretraining of the stand-in super-resolution denoiser.

use crate::classifier::Classifier;
use crate::data::{denormalize, normalize, GmmWorld, Sample};
use crate::denoiser::{forward_diffuse, Conditioning, Denoiser, EpsQuery, NeuralDenoiser, NeuralDenoiserGrads};
use crate::error::{contract, Error, Result};
use crate::nn::{cross_entropy, ParamGrads, Sgd};
use crate::rng::{fill_normal, phase, substream};
use crate::schedule::{corrected_timestep, CorrectionFactor, NoiseSchedule};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// A few generated samples per class, in `[-1,1]` model space.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub items: Vec<(Vec<f64>, usize)>,
    pub shots_per_class: usize,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Draws `shots` samples of every listed class from the class-conditional world.
pub fn synthesize_reference_set(world: &GmmWorld, classes: &[usize], shots: usize, seed: u64) -> Result<ReferenceSet> {
    if shots == 0 {
        return contract("reference set needs at least one shot per class");
    }
    let mut items = Vec::with_capacity(classes.len() * shots);
    for &c in classes {
        if c >= world.num_classes() {
            return contract(format!("unknown class {c} for a world with {} classes", world.num_classes()));
        }
        for s in 0..shots {
            let mut rng = substream(seed, &[phase::REFERENCE, c as u64, s as u64]);
            items.push((normalize(&world.sample_class(c, &mut rng)), c));
        }
    }
    Ok(ReferenceSet { items, shots_per_class: shots })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    /// Personalize the denoiser, then fine-tune the classifier.
    Staged,
    /// Update both in the same loop.
    Joint,
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptMode::Staged => "staged",
            AdaptMode::Joint => "joint",
        })
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "staged" => Ok(AdaptMode::Staged),
            "joint" => Ok(AdaptMode::Joint),
            other => Err(Error::Config(format!("unknown adaptation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lambda: f64,
    pub steps: usize,
    pub lr_denoiser: f64,
    pub lr_classifier: f64,
    pub momentum: f64,
    pub batch: usize,
    pub mode: AdaptMode,
    pub k: CorrectionFactor,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            steps: 500,
            lr_denoiser: 1e-2,
            lr_classifier: 1e-2,
            momentum: 0.9,
            batch: 32,
            mode: AdaptMode::Staged,
            k: CorrectionFactor::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.batch == 0 {
            return Err(Error::Config("adaptation batch must be positive".into()));
        }
        if !(self.lr_denoiser > 0.0) || !(self.lr_classifier > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One diffusion training example: clean `x_g`, its class, a timestep and the noise.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub x_g: &'a [f64],
    pub class: usize,
    pub t: usize,
    pub noise: &'a [f64],
}

/// Self-conditioned query at timestep `t`: `x_bar = x_t`, `t' = k t`.
fn self_conditioned<'a>(x_t: &'a [f64], t: usize, cond: Conditioning, k: CorrectionFactor, steps: usize) -> EpsQuery<'a> {
    EpsQuery { x_t, t, cond, x_bar: x_t, t_prime: corrected_timestep(t, k, steps) }
}

/// `||noise - eps(x_t, t, cond | x_t, k t)||^2`.
pub fn loss_diff(
    denoiser: &dyn Denoiser,
    item: &TrainItem<'_>,
    cond: Conditioning,
    k: CorrectionFactor,
    schedule: &NoiseSchedule,
) -> f64 {
    let x_t = forward_diffuse(item.x_g, item.t, item.noise, schedule);
    let eps = denoiser.eps(&self_conditioned(&x_t, item.t, cond, k, schedule.steps()));
    eps.iter().zip(item.noise).map(|(e, n)| (n - e) * (n - e)).sum()
}

/// [`loss_diff`] plus `scale * d loss / d theta` accumulated into `acc`.
pub fn loss_diff_backward(
    denoiser: &NeuralDenoiser,
    item: &TrainItem<'_>,
    cond: Conditioning,
    k: CorrectionFactor,
    schedule: &NoiseSchedule,
    scale: f64,
    acc: &mut NeuralDenoiserGrads,
) -> f64 {
    let x_t = forward_diffuse(item.x_g, item.t, item.noise, schedule);
    let q = self_conditioned(&x_t, item.t, cond, k, schedule.steps());
    let eps = denoiser.eps(&q);
    let upstream: Vec<f64> = eps.iter().zip(item.noise).map(|(e, n)| 2.0 * (e - n)).collect();
    denoiser.eps_backward(&q, &upstream, scale, Some(acc));
    eps.iter().zip(item.noise).map(|(e, n)| (n - e) * (n - e)).sum()
}

/// `x_tilde = x_t / sqrt(a_t) - sigma_t * eps_hat` in model space, with `sigma_t`
/// the noise-to-signal ratio at the sampled `t`.
pub fn denoised_reference(
    denoiser: &dyn Denoiser,
    item: &TrainItem<'_>,
    cond: Conditioning,
    k: CorrectionFactor,
    schedule: &NoiseSchedule,
) -> Vec<f64> {
    let x_t = forward_diffuse(item.x_g, item.t, item.noise, schedule);
    let eps = denoiser.eps(&self_conditioned(&x_t, item.t, cond, k, schedule.steps()));
    let inv = 1.0 / schedule.alpha_bar(item.t).sqrt();
    let sigma = schedule.sigma_at(item.t);
    x_t.iter().zip(&eps).map(|(x, e)| inv * x - sigma * e).collect()
}

fn classifier_input(x_tilde: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pre = denormalize(x_tilde);
    let z = pre.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    (pre, z)
}

/// Cross-entropy of the classifier on the denoised reference sample, which
/// is mapped back to `[0,1]` and clamped first.
pub fn loss_clf(
    denoiser: &dyn Denoiser,
    classifier: &Classifier,
    item: &TrainItem<'_>,
    cond: Conditioning,
    k: CorrectionFactor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let (_, z) = classifier_input(&denoised_reference(denoiser, item, cond, k, schedule));
    Ok(cross_entropy(&classifier.logits(&z), item.class)?.0)
}

/// [`loss_clf`] with optional gradient accumulation into the denoiser
/// (`den_acc`) and the classifier parameters (`clf_acc`), both weighted by `scale`.
#[allow(clippy::too_many_arguments)]
pub fn loss_clf_backward(
    denoiser: &NeuralDenoiser,
    classifier: &Classifier,
    item: &TrainItem<'_>,
    cond: Conditioning,
    k: CorrectionFactor,
    schedule: &NoiseSchedule,
    scale: f64,
    den_acc: Option<&mut NeuralDenoiserGrads>,
    clf_acc: Option<&mut ParamGrads>,
) -> Result<f64> {
    let x_t = forward_diffuse(item.x_g, item.t, item.noise, schedule);
    let q = self_conditioned(&x_t, item.t, cond, k, schedule.steps());
    let eps = denoiser.eps(&q);
    let inv = 1.0 / schedule.alpha_bar(item.t).sqrt();
    let sigma = schedule.sigma_at(item.t);
    let x_tilde: Vec<f64> = x_t.iter().zip(&eps).map(|(x, e)| inv * x - sigma * e).collect();
    let (pre, z) = classifier_input(&x_tilde);
    let (loss, g_z) = classifier.loss_and_grads(&z, item.class, scale, clf_acc)?;
    if let Some(acc) = den_acc {
        let g_eps: Vec<f64> = g_z
            .iter()
            .zip(&pre)
            .map(|(g, p)| if *p > 0.0 && *p < 1.0 { -sigma * 0.5 * g } else { 0.0 })
            .collect();
        denoiser.eps_backward(&q, &g_eps, scale, Some(acc));
    }
    Ok(loss)
}

/// Mean losses over one minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_diff: f64,
    pub l_clf: f64,
}

/// Gradient of `mean(L_diff) + lambda * mean(L_clf)` over `batch` with
/// respect to the denoiser. The classifier is read only.
pub fn personalization_gradient(
    denoiser: &NeuralDenoiser,
    classifier: &Classifier,
    batch: &[TrainItem<'_>],
    lambda: f64,
    k: CorrectionFactor,
    schedule: &NoiseSchedule,
) -> Result<(NeuralDenoiserGrads, LossParts)> {
    let mut grads = denoiser.zero_grads();
    let w = 1.0 / batch.len() as f64;
    let mut parts = LossParts::default();
    let cond = Conditioning::Adaptation;
    for item in batch {
        parts.l_diff += w * loss_diff_backward(denoiser, item, cond, k, schedule, w, &mut grads);
        let l = if lambda > 0.0 {
            loss_clf_backward(denoiser, classifier, item, cond, k, schedule, lambda * w, Some(&mut grads), None)?
        } else {
            loss_clf(denoiser, classifier, item, cond, k, schedule)?
        };
        parts.l_clf += w * l;
    }
    Ok((grads, parts))
}

/// One row of a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: String,
    pub step: usize,
    pub l_diff: f64,
    pub l_clf: f64,
    pub total: f64,
}

pub fn write_training_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["stage", "step", "L_diff", "L_clf", "total"]).map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.write_record([r.stage.clone(), r.step.to_string(), r.l_diff.to_string(), r.l_clf.to_string(), r.total.to_string()])
            .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Draws the minibatch of step `step`: item indices, timesteps in `1..=T` and noise.
fn draw_batch(
    refset: &ReferenceSet,
    batch: usize,
    steps_t: usize,
    seed: u64,
    keys: &[u64],
) -> Vec<(usize, usize, Vec<f64>)> {
    let mut rng = substream(seed, keys);
    let d = refset.items[0].0.len();
    (0..batch)
        .map(|_| {
            let i = rng.gen_range(0..refset.len());
            let t = rng.gen_range(1..=steps_t);
            let mut noise = vec![0.0; d];
            fill_normal(&mut rng, 1.0, &mut noise);
            (i, t, noise)
        })
        .collect()
}

fn items<'a>(refset: &'a ReferenceSet, drawn: &'a [(usize, usize, Vec<f64>)]) -> Vec<TrainItem<'a>> {
    drawn
        .iter()
        .map(|(i, t, noise)| TrainItem { x_g: &refset.items[*i].0, class: refset.items[*i].1, t: *t, noise })
        .collect()
}

fn check_finite(stage: &str, step: usize, parts: &LossParts) -> Result<()> {
    if parts.l_diff.is_finite() && parts.l_clf.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("{stage} loss became non-finite at step {step}")))
    }
}

fn neural_params(classifier: &mut Classifier) -> Result<&mut crate::nn::ModelParams> {
    match classifier {
        Classifier::Neural(p) => Ok(p),
        _ => Err(Error::Config("classifier fine-tuning needs a neural classifier".into())),
    }
}

const STAGE_PERSONALIZE: u64 = 1;
const STAGE_FINETUNE: u64 = 2;
const STAGE_JOINT: u64 = 3;

/// Minimizes `L_diff + lambda * L_clf` over the denoiser (network and
/// adaptation token) with the classifier frozen.
pub fn personalize(
    denoiser: &mut NeuralDenoiser,
    classifier: &Classifier,
    refset: &ReferenceSet,
    cfg: &AdaptConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if refset.is_empty() {
        return contract("reference set is empty");
    }
    let mut opt = Sgd::new(cfg.lr_denoiser, cfg.momentum, denoiser.num_params())?;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let drawn = draw_batch(refset, cfg.batch, schedule.steps(), cfg.seed, &[phase::TRAIN, STAGE_PERSONALIZE, step as u64]);
        let batch = items(refset, &drawn);
        let (grads, parts) = personalization_gradient(denoiser, classifier, &batch, cfg.lambda, cfg.k, schedule)?;
        check_finite("personalization", step, &parts)?;
        let mut flat = denoiser.to_flat();
        opt.step(&mut flat, &grads.to_flat())?;
        denoiser.set_flat(&flat);
        log.push(LogRow {
            stage: "personalize".into(),
            step,
            l_diff: parts.l_diff,
            l_clf: parts.l_clf,
            total: parts.l_diff + cfg.lambda * parts.l_clf,
        });
    }
    Ok(log)
}

/// Minimizes `L_clf` over the classifier with the denoiser frozen.
pub fn finetune_classifier(
    denoiser: &NeuralDenoiser,
    classifier: &mut Classifier,
    refset: &ReferenceSet,
    cfg: &AdaptConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if refset.is_empty() {
        return contract("reference set is empty");
    }
    let n = neural_params(classifier)?.num_params();
    let mut opt = Sgd::new(cfg.lr_classifier, cfg.momentum, n)?;
    let mut log = Vec::with_capacity(cfg.steps);
    let cond = Conditioning::Adaptation;
    for step in 0..cfg.steps {
        let drawn = draw_batch(refset, cfg.batch, schedule.steps(), cfg.seed, &[phase::TRAIN, STAGE_FINETUNE, step as u64]);
        let batch = items(refset, &drawn);
        let w = 1.0 / batch.len() as f64;
        let mut grads = ParamGrads::zeros_like(neural_params(classifier)?);
        let mut l_clf = 0.0;
        for item in &batch {
            l_clf += w * loss_clf_backward(denoiser, classifier, item, cond, cfg.k, schedule, w, None, Some(&mut grads))?;
        }
        let parts = LossParts { l_diff: 0.0, l_clf };
        check_finite("fine-tuning", step, &parts)?;
        crate::nn::sgd_step(neural_params(classifier)?, &grads, &mut opt)?;
        log.push(LogRow { stage: "finetune".into(), step, l_diff: 0.0, l_clf, total: l_clf });
    }
    Ok(log)
}

/// Joint loop: the denoiser follows `L_diff + lambda * L_clf`, the classifier
/// follows `L_clf`, both on the same minibatch.
fn joint(
    denoiser: &mut NeuralDenoiser,
    classifier: &mut Classifier,
    refset: &ReferenceSet,
    cfg: &AdaptConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<LogRow>> {
    let mut opt_d = Sgd::new(cfg.lr_denoiser, cfg.momentum, denoiser.num_params())?;
    let mut opt_c = Sgd::new(cfg.lr_classifier, cfg.momentum, neural_params(classifier)?.num_params())?;
    let cond = Conditioning::Adaptation;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let drawn = draw_batch(refset, cfg.batch, schedule.steps(), cfg.seed, &[phase::TRAIN, STAGE_JOINT, step as u64]);
        let batch = items(refset, &drawn);
        let w = 1.0 / batch.len() as f64;
        let mut g_den = denoiser.zero_grads();
        let mut g_clf = ParamGrads::zeros_like(neural_params(classifier)?);
        let mut parts = LossParts::default();
        for item in &batch {
            parts.l_diff += w * loss_diff_backward(denoiser, item, cond, cfg.k, schedule, w, &mut g_den);
            // Classifier gradient of L_clf at weight w; denoiser gradient at weight lambda * w.
            let mut tmp = denoiser.zero_grads();
            parts.l_clf += w * loss_clf_backward(denoiser, classifier, item, cond, cfg.k, schedule, w, Some(&mut tmp), Some(&mut g_clf))?;
            g_den.add_scaled(&tmp, cfg.lambda);
        }
        check_finite("joint adaptation", step, &parts)?;
        let mut flat = denoiser.to_flat();
        opt_d.step(&mut flat, &g_den.to_flat())?;
        denoiser.set_flat(&flat);
        crate::nn::sgd_step(neural_params(classifier)?, &g_clf, &mut opt_c)?;
        log.push(LogRow {
            stage: "joint".into(),
            step,
            l_diff: parts.l_diff,
            l_clf: parts.l_clf,
            total: parts.l_diff + cfg.lambda * parts.l_clf,
        });
    }
    Ok(log)
}

/// Staged: personalize then fine-tune. Joint: simultaneous updates.
pub fn run_adaptation(
    denoiser: &mut NeuralDenoiser,
    classifier: &mut Classifier,
    refset: &ReferenceSet,
    cfg: &AdaptConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if refset.is_empty() {
        return contract("reference set is empty");
    }
    match cfg.mode {
        AdaptMode::Staged => {
            let mut log = personalize(denoiser, classifier, refset, cfg, schedule)?;
            log.extend(finetune_classifier(denoiser, classifier, refset, cfg, schedule)?);
            Ok(log)
        }
        AdaptMode::Joint => joint(denoiser, classifier, refset, cfg, schedule),
    }
}

/// Settings for training the stand-in pretrained denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Probability of training an example with the empty prompt instead of its class.
    pub empty_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 10000, lr: 5e-3, momentum: 0.9, batch: 32, empty_prob: 0.5, seed: 0 }
    }
}

/// Three-tap moving average along the coordinate axis with edge replication;
/// plays the part of the low-resolution image.
pub fn blur(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let l = x[i.saturating_sub(1)];
            let r = x[(i + 1).min(n - 1)];
            0.25 * l + 0.5 * x[i] + 0.25 * r
        })
        .collect()
}

/// Trains `denoiser` on clean `[0,1]` samples with the noise-prediction loss.
/// The conditioning image is a blurred copy noised at an independent
/// timestep, so at inference (where it is the noisy input itself) the
/// network sees a mismatched conditioning signal. Afterwards the adaptation
/// token starts as a copy of the empty-prompt token.
pub fn pretrain_denoiser(
    denoiser: &mut NeuralDenoiser,
    samples: &[Sample],
    cfg: &PretrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<LogRow>> {
    if samples.is_empty() {
        return Err(Error::Data("cannot pretrain on an empty dataset".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("pretraining batch must be positive".into()));
    }
    let data: Vec<(Vec<f64>, Vec<f64>, usize)> = samples
        .iter()
        .map(|s| {
            let x = normalize(&s.features);
            let b = blur(&x);
            (x, b, s.label)
        })
        .collect();
    let d = denoiser.spec.dim;
    let steps_t = schedule.steps();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, denoiser.num_params())?;
    let mut log = Vec::with_capacity(cfg.steps);
    let w = 1.0 / cfg.batch as f64;
    for step in 0..cfg.steps {
        let mut rng = substream(cfg.seed, &[phase::TRAIN, step as u64]);
        let mut grads = denoiser.zero_grads();
        let mut loss = 0.0;
        let mut noise = vec![0.0; d];
        let mut noise_bar = vec![0.0; d];
        for _ in 0..cfg.batch {
            let (x, b, label) = &data[rng.gen_range(0..data.len())];
            let t = rng.gen_range(1..=steps_t);
            let t_prime = rng.gen_range(0..=steps_t);
            fill_normal(&mut rng, 1.0, &mut noise);
            fill_normal(&mut rng, 1.0, &mut noise_bar);
            let cond = if rng.gen::<f64>() < cfg.empty_prob { Conditioning::Empty } else { Conditioning::Class(*label) };
            let x_t = forward_diffuse(x, t, &noise, schedule);
            let x_bar = forward_diffuse(b, t_prime, &noise_bar, schedule);
            let q = EpsQuery { x_t: &x_t, t, cond, x_bar: &x_bar, t_prime };
            let eps = denoiser.eps(&q);
            let upstream: Vec<f64> = eps.iter().zip(&noise).map(|(e, n)| 2.0 * (e - n)).collect();
            denoiser.eps_backward(&q, &upstream, w, Some(&mut grads));
            loss += w * eps.iter().zip(&noise).map(|(e, n)| (e - n) * (e - n)).sum::<f64>();
        }
        if !loss.is_finite() {
            return Err(Error::Training(format!("pretraining loss became non-finite at step {step}")));
        }
        let mut flat = denoiser.to_flat();
        opt.step(&mut flat, &grads.to_flat())?;
        denoiser.set_flat(&flat);
        log.push(LogRow { stage: "pretrain".into(), step, l_diff: loss, l_clf: 0.0, total: loss });
    }
    let empty = denoiser.tokens[0].clone();
    let last = denoiser.tokens.len() - 1;
    denoiser.tokens[last] = empty;
    Ok(log)
}
