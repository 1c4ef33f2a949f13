//! Noise estimators `eps(x_t, t, cond | x_bar, t')` and single-step denoising.
//!
//! Every denoiser works in `[-1,1]` model space. A denoiser predicts the noise
//! that was mixed into `x_t` at timestep `t`, optionally looking at a second,
//! separately noised conditioning image `x_bar` at timestep `t'`. For
//! denoised smoothing both inputs are the same rescaled noisy image and only
//! the conditioning timestep differs (`t' = k * t_hat`).

use crate::error::{contract, domain, Error, Result};
use crate::nn::{Activation, ModelParams, ParamGrads};
use crate::schedule::{corrected_timestep, sigma_to_timestep, CorrectionFactor, NoiseSchedule, ScheduleKind};
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Conditioning signal; stands in for the text prompt of a text-to-image model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Conditioning {
    /// Unconditional prompt.
    Empty,
    Class(usize),
    /// The fresh identifier learned during personalization.
    Adaptation,
}

/// Arguments of a single noise-estimator call.
#[derive(Debug, Clone, Copy)]
pub struct EpsQuery<'a> {
    pub x_t: &'a [f64],
    pub t: usize,
    pub cond: Conditioning,
    pub x_bar: &'a [f64],
    pub t_prime: usize,
}

pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn eps(&self, q: &EpsQuery<'_>) -> Vec<f64>;

    /// Vector-Jacobian products of [`Denoiser::eps`] with respect to `x_t` and `x_bar`.
    fn eps_vjp(&self, q: &EpsQuery<'_>, upstream: &[f64]) -> (Vec<f64>, Vec<f64>);
}

/// `sqrt(alpha_bar_t) * x + sqrt(1 - alpha_bar_t) * noise`.
pub fn forward_diffuse(x: &[f64], t: usize, noise: &[f64], schedule: &NoiseSchedule) -> Vec<f64> {
    assert_eq!(x.len(), noise.len(), "contract violation: noise width");
    let a = schedule.alpha_bar(t);
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    x.iter().zip(noise).map(|(xi, ei)| s * xi + n * ei).collect()
}

/// Calls the estimator through the checked entry point.
pub fn eps_estimate(denoiser: &dyn Denoiser, q: &EpsQuery<'_>) -> Result<Vec<f64>> {
    if q.x_t.len() != q.x_bar.len() || q.x_t.len() != denoiser.dim() {
        return contract(format!(
            "eps inputs have widths {} and {}, denoiser expects {}",
            q.x_t.len(),
            q.x_bar.len(),
            denoiser.dim()
        ));
    }
    Ok(denoiser.eps(q))
}

/// Precomputed timesteps for one-step denoising at a fixed noise level:
/// `x_tilde = x_hat - sigma * eps(sqrt(a) x_hat, t_hat, cond | sqrt(a) x_hat, k t_hat)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseStep {
    pub sigma: f64,
    pub t_hat: usize,
    pub t_prime: usize,
    pub sqrt_alpha: f64,
    pub cond: Conditioning,
}

impl DenoiseStep {
    pub fn new(schedule: &NoiseSchedule, sigma: f64, k: CorrectionFactor, cond: Conditioning) -> Result<Self> {
        if !(sigma > 0.0) {
            return domain(format!("denoising needs sigma > 0, got {sigma}"));
        }
        let m = sigma_to_timestep(schedule, sigma)?;
        Ok(Self {
            sigma,
            t_hat: m.t_hat,
            t_prime: corrected_timestep(m.t_hat, k, schedule.steps()),
            sqrt_alpha: m.alpha_bar_t.sqrt(),
            cond,
        })
    }

    fn scaled(&self, x_hat: &[f64]) -> Vec<f64> {
        x_hat.iter().map(|v| self.sqrt_alpha * v).collect()
    }

    pub fn apply(&self, denoiser: &dyn Denoiser, x_hat: &[f64]) -> Vec<f64> {
        let x_t = self.scaled(x_hat);
        let q = EpsQuery { x_t: &x_t, t: self.t_hat, cond: self.cond, x_bar: &x_t, t_prime: self.t_prime };
        let eps = denoiser.eps(&q);
        x_hat.iter().zip(&eps).map(|(x, e)| x - self.sigma * e).collect()
    }

    /// Gradient of `<upstream, apply(x_hat)>` with respect to `x_hat`.
    pub fn vjp(&self, denoiser: &dyn Denoiser, x_hat: &[f64], upstream: &[f64]) -> Vec<f64> {
        let x_t = self.scaled(x_hat);
        let q = EpsQuery { x_t: &x_t, t: self.t_hat, cond: self.cond, x_bar: &x_t, t_prime: self.t_prime };
        let (g_xt, g_bar) = denoiser.eps_vjp(&q, upstream);
        let c = self.sigma * self.sqrt_alpha;
        upstream.iter().zip(g_xt.iter().zip(&g_bar)).map(|(u, (a, b))| u - c * (a + b)).collect()
    }
}

/// One-step denoising of `x_hat` (model space) at noise level `sigma`. No clamping.
pub fn denoise_one_step(
    denoiser: &dyn Denoiser,
    x_hat: &[f64],
    sigma: f64,
    schedule: &NoiseSchedule,
    k: CorrectionFactor,
    cond: Conditioning,
) -> Result<Vec<f64>> {
    if x_hat.len() != denoiser.dim() {
        return contract("input width does not match denoiser");
    }
    Ok(DenoiseStep::new(schedule, sigma, k, cond)?.apply(denoiser, x_hat))
}

/// Predicts zero noise, so one-step denoising returns its input.
#[derive(Debug, Clone, Copy)]
pub struct IdentityDenoiser {
    pub dim: usize,
}

impl Denoiser for IdentityDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eps(&self, q: &EpsQuery<'_>) -> Vec<f64> {
        vec![0.0; q.x_t.len()]
    }

    fn eps_vjp(&self, q: &EpsQuery<'_>, _upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; q.x_t.len()], vec![0.0; q.x_bar.len()])
    }
}

/// Posterior mean of `x ~ N(mu, gamma^2 I)` observed as `x_hat = x + N(0, sigma^2 I)`.
pub fn gmm_posterior_mean(mu: &[f64], gamma: f64, sigma: f64, x_hat: &[f64]) -> Result<Vec<f64>> {
    if !(gamma > 0.0) || !(sigma > 0.0) {
        return domain(format!("posterior mean needs gamma, sigma > 0 (got {gamma}, {sigma})"));
    }
    if mu.len() != x_hat.len() {
        return contract("mean and observation widths differ");
    }
    let (g2, s2) = (gamma * gamma, sigma * sigma);
    Ok(x_hat.iter().zip(mu).map(|(x, m)| (g2 * x + s2 * m) / (g2 + s2)).collect())
}

/// Isotropic Gaussian mixture with a shared component scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub gamma: f64,
    pub log_priors: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(means: Vec<Vec<f64>>, gamma: f64, priors: &[f64]) -> Result<Self> {
        if means.is_empty() || means.len() != priors.len() {
            return contract("mixture needs one prior per component");
        }
        if !(gamma > 0.0) {
            return domain("mixture scale must be positive");
        }
        Ok(Self { means, gamma, log_priors: priors.iter().map(|p| p.ln()).collect() })
    }

    /// The world's class-conditional mixture expressed in `[-1,1]` model space.
    pub fn from_world(world: &crate::data::GmmWorld) -> Self {
        let means = world.means.iter().map(|m| crate::data::normalize(m)).collect();
        Self::new(means, 2.0 * world.gamma, &world.priors).expect("valid world")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn responsibilities(&self, sigma: f64, x_hat: &[f64]) -> Vec<f64> {
        let s2 = self.gamma * self.gamma + sigma * sigma;
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.log_priors)
            .map(|(mu, lp)| {
                let sq: f64 = x_hat.iter().zip(mu).map(|(x, m)| (x - m) * (x - m)).sum();
                lp - 0.5 * sq / s2
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }

    /// `E[x | x_hat]`: responsibility-weighted per-component posterior means.
    pub fn posterior_mean(&self, sigma: f64, x_hat: &[f64]) -> Vec<f64> {
        let (g2, s2) = (self.gamma * self.gamma, sigma * sigma);
        let shrink = g2 / (g2 + s2);
        let r = self.responsibilities(sigma, x_hat);
        let mut out: Vec<f64> = x_hat.iter().map(|x| shrink * x).collect();
        for (mu, rc) in self.means.iter().zip(&r) {
            let w = rc * (1.0 - shrink);
            for (o, m) in out.iter_mut().zip(mu) {
                *o += w * m;
            }
        }
        out
    }

    /// `J^T upstream` for the Jacobian of [`GaussianMixture::posterior_mean`].
    pub fn posterior_mean_vjp(&self, sigma: f64, x_hat: &[f64], upstream: &[f64]) -> Vec<f64> {
        let (g2, s2) = (self.gamma * self.gamma, sigma * sigma);
        let var = g2 + s2;
        let shrink = g2 / var;
        let r = self.responsibilities(sigma, x_hat);
        // m_c = shrink * x + (1 - shrink) mu_c, d r_c / dx = r_c (s_c - sum_j r_j s_j),
        // with score s_c = -(x - mu_c) / var.
        let proj: Vec<f64> = self
            .means
            .iter()
            .map(|mu| x_hat.iter().zip(mu).zip(upstream).map(|((x, m), u)| u * (shrink * x + (1.0 - shrink) * m)).sum())
            .collect();
        let mean_proj: f64 = r.iter().zip(&proj).map(|(a, b)| a * b).sum();
        let mut out: Vec<f64> = upstream.iter().map(|u| shrink * u).collect();
        for ((mu, rc), pc) in self.means.iter().zip(&r).zip(&proj) {
            let w = rc * (pc - mean_proj) / var;
            for ((o, x), m) in out.iter_mut().zip(x_hat).zip(mu) {
                *o -= w * (x - m);
            }
        }
        out
    }
}

/// Exact MMSE denoiser for a known Gaussian mixture, phrased as a noise
/// estimator: at timestep `t` it reads the noise level `sigma_t` off the
/// schedule and returns `(x_hat - E[x | x_hat]) / sigma_t` with `x_hat = x_t / sqrt(alpha_bar_t)`.
/// Ignores `x_bar`, `t'` and the conditioning.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    pub mixture: GaussianMixture,
    pub schedule: NoiseSchedule,
}

impl AnalyticDenoiser {
    pub fn new(mixture: GaussianMixture, schedule: NoiseSchedule) -> Self {
        Self { mixture, schedule }
    }
}

impl Denoiser for AnalyticDenoiser {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn eps(&self, q: &EpsQuery<'_>) -> Vec<f64> {
        let sigma_t = self.schedule.sigma_at(q.t);
        if sigma_t == 0.0 {
            return vec![0.0; q.x_t.len()];
        }
        let inv = 1.0 / self.schedule.alpha_bar(q.t).sqrt();
        let x_hat: Vec<f64> = q.x_t.iter().map(|v| v * inv).collect();
        let pm = self.mixture.posterior_mean(sigma_t, &x_hat);
        x_hat.iter().zip(&pm).map(|(x, m)| (x - m) / sigma_t).collect()
    }

    fn eps_vjp(&self, q: &EpsQuery<'_>, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let sigma_t = self.schedule.sigma_at(q.t);
        let zeros = vec![0.0; q.x_bar.len()];
        if sigma_t == 0.0 {
            return (vec![0.0; q.x_t.len()], zeros);
        }
        let inv = 1.0 / self.schedule.alpha_bar(q.t).sqrt();
        let x_hat: Vec<f64> = q.x_t.iter().map(|v| v * inv).collect();
        let jt = self.mixture.posterior_mean_vjp(sigma_t, &x_hat, upstream);
        let c = inv / sigma_t;
        (upstream.iter().zip(&jt).map(|(u, j)| c * (u - j)).collect(), zeros)
    }
}

pub const TIME_EMBED_DIM: usize = 16;

/// Sinusoidal features of `t / T` with geometrically spaced frequencies.
pub fn time_embedding(t: usize, steps: usize) -> [f64; TIME_EMBED_DIM] {
    let s = t as f64 / steps as f64;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..TIME_EMBED_DIM / 2 {
        let freq = std::f64::consts::FRAC_PI_2 * 1.6_f64.powi(i as i32);
        out[2 * i] = (freq * s).sin();
        out[2 * i + 1] = (freq * s).cos();
    }
    out
}

/// Architecture of a [`NeuralDenoiser`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeuralDenoiserSpec {
    pub dim: usize,
    pub num_classes: usize,
    pub token_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub steps: usize,
}

/// Trainable self-conditioned noise estimator: an MLP over
/// `[x_t, x_bar, emb(t), emb(t'), token]` where `token` is a learned row of an
/// embedding table (empty prompt, one row per class, adaptation identifier).
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralDenoiser {
    pub spec: NeuralDenoiserSpec,
    pub net: ModelParams,
    /// Rows: empty, classes `0..K`, adaptation.
    pub tokens: Vec<Vec<f64>>,
}

/// Gradient buffers of a [`NeuralDenoiser`].
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralDenoiserGrads {
    pub net: ParamGrads,
    pub tokens: Vec<Vec<f64>>,
}

impl NeuralDenoiserGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.net.to_flat();
        for row in &self.tokens {
            out.extend_from_slice(row);
        }
        out
    }

    pub fn add_scaled(&mut self, other: &NeuralDenoiserGrads, factor: f64) {
        self.net.add_scaled(&other.net, factor);
        for (a, b) in self.tokens.iter_mut().zip(&other.tokens) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.net.scale(factor);
        self.tokens.iter_mut().flatten().for_each(|v| *v *= factor);
    }
}

impl NeuralDenoiser {
    pub fn new<R: Rng + ?Sized>(spec: NeuralDenoiserSpec, rng: &mut R) -> Self {
        let input = 2 * spec.dim + 2 * TIME_EMBED_DIM + spec.token_dim;
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(spec.hidden).take(spec.depth));
        dims.push(spec.dim);
        let mut acts = vec![Activation::Tanh; spec.depth];
        acts.push(Activation::Identity);
        let net = ModelParams::xavier(&dims, &acts, rng);
        let tokens = (0..spec.num_classes + 2)
            .map(|_| (0..spec.token_dim).map(|_| rng.gen_range(-0.1..0.1)).collect())
            .collect();
        Self { spec, net, tokens }
    }

    fn token_row(&self, cond: Conditioning) -> usize {
        match cond {
            Conditioning::Empty => 0,
            Conditioning::Class(c) => {
                assert!(c < self.spec.num_classes, "contract violation: unknown class token {c}");
                1 + c
            }
            Conditioning::Adaptation => self.spec.num_classes + 1,
        }
    }

    fn input_vector(&self, q: &EpsQuery<'_>) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.net.input_dim());
        v.extend_from_slice(q.x_t);
        v.extend_from_slice(q.x_bar);
        v.extend_from_slice(&time_embedding(q.t, self.spec.steps));
        v.extend_from_slice(&time_embedding(q.t_prime, self.spec.steps));
        v.extend_from_slice(&self.tokens[self.token_row(q.cond)]);
        v
    }

    pub fn zero_grads(&self) -> NeuralDenoiserGrads {
        NeuralDenoiserGrads {
            net: ParamGrads::zeros_like(&self.net),
            tokens: vec![vec![0.0; self.spec.token_dim]; self.tokens.len()],
        }
    }

    /// Accumulates `scale * d<upstream, eps>/d(params)` and returns the
    /// input-side gradients `(d/dx_t, d/dx_bar)` (unscaled).
    pub fn eps_backward(
        &self,
        q: &EpsQuery<'_>,
        upstream: &[f64],
        scale: f64,
        acc: Option<&mut NeuralDenoiserGrads>,
    ) -> (Vec<f64>, Vec<f64>) {
        let input = self.input_vector(q);
        let d = self.spec.dim;
        let (g_in, token_acc) = match acc {
            Some(acc) => {
                let g = self.net.backward_accumulate(&input, upstream, scale, Some(&mut acc.net));
                (g, Some(&mut acc.tokens))
            }
            None => (self.net.backward_accumulate(&input, upstream, scale, None), None),
        };
        if let Some(tokens) = token_acc {
            let row = &mut tokens[self.token_row(q.cond)];
            for (r, g) in row.iter_mut().zip(&g_in[2 * d + 2 * TIME_EMBED_DIM..]) {
                *r += scale * g;
            }
        }
        (g_in[..d].to_vec(), g_in[d..2 * d].to_vec())
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + self.tokens.len() * self.spec.token_dim
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.net.to_flat();
        for row in &self.tokens {
            out.extend_from_slice(row);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.net.num_params();
        self.net.set_flat(&flat[..n]);
        for (row, chunk) in self.tokens.iter_mut().zip(flat[n..].chunks_exact(self.spec.token_dim)) {
            row.copy_from_slice(chunk);
        }
    }

    /// Writes `<path>` in the network checkpoint format and `<path>.meta`
    /// with architecture, schedule settings and the token table.
    pub fn save(&self, path: &Path, schedule_kind: ScheduleKind, k: CorrectionFactor) -> Result<()> {
        let file = std::fs::File::create(path)?;
        crate::nn::write_checkpoint(&self.net, std::io::BufWriter::new(file))?;
        let mut meta = String::new();
        let s = &self.spec;
        writeln!(meta, "schedule.kind = {schedule_kind}").unwrap();
        writeln!(meta, "schedule.T = {}", s.steps).unwrap();
        writeln!(meta, "denoiser.k = {}", k.get()).unwrap();
        writeln!(meta, "denoiser.dim = {}", s.dim).unwrap();
        writeln!(meta, "denoiser.classes = {}", s.num_classes).unwrap();
        writeln!(meta, "denoiser.token_dim = {}", s.token_dim).unwrap();
        writeln!(meta, "denoiser.time_embed_dim = {TIME_EMBED_DIM}").unwrap();
        writeln!(meta, "denoiser.hidden = {}", s.hidden).unwrap();
        writeln!(meta, "denoiser.depth = {}", s.depth).unwrap();
        for (i, row) in self.tokens.iter().enumerate() {
            let joined: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(meta, "token.{i} = {}", joined.join(",")).unwrap();
        }
        std::fs::write(meta_path(path), meta)?;
        Ok(())
    }

    /// Inverse of [`NeuralDenoiser::save`]; also returns the recorded schedule kind and `k`.
    pub fn load(path: &Path) -> Result<(Self, ScheduleKind, CorrectionFactor)> {
        let net = crate::nn::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let map = crate::data::parse_kv(&std::fs::read_to_string(meta_path(path))?)?;
        let get = |k: &str| {
            map.get(k).cloned().ok_or_else(|| Error::Data(format!("denoiser metadata lacks '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Data(format!("metadata '{k}' is not an integer")))
        };
        let spec = NeuralDenoiserSpec {
            dim: num("denoiser.dim")?,
            num_classes: num("denoiser.classes")?,
            token_dim: num("denoiser.token_dim")?,
            hidden: num("denoiser.hidden")?,
            depth: num("denoiser.depth")?,
            steps: num("schedule.T")?,
        };
        let kind: ScheduleKind = get("schedule.kind")?.parse()?;
        let k = CorrectionFactor::new(
            get("denoiser.k")?.parse().map_err(|_| Error::Data("metadata 'denoiser.k' is not a number".into()))?,
        )?;
        let mut tokens = Vec::with_capacity(spec.num_classes + 2);
        for i in 0..spec.num_classes + 2 {
            let row = get(&format!("token.{i}"))?
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Data(format!("bad token value '{v}'"))))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != spec.token_dim {
                return Err(Error::Data(format!("token row {i} has width {}", row.len())));
            }
            tokens.push(row);
        }
        if net.input_dim() != 2 * spec.dim + 2 * TIME_EMBED_DIM + spec.token_dim || net.output_dim() != spec.dim {
            return Err(Error::Data("checkpoint shape disagrees with metadata".into()));
        }
        Ok((Self { spec, net, tokens }, kind, k))
    }
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}

impl Denoiser for NeuralDenoiser {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn eps(&self, q: &EpsQuery<'_>) -> Vec<f64> {
        self.net.forward(&self.input_vector(q))
    }

    fn eps_vjp(&self, q: &EpsQuery<'_>, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.eps_backward(q, upstream, 1.0, None)
    }
}
