//! Experiment harness behind the `certismooth` binary.

pub mod config;
pub mod report;

use crate::adapt::{pretrain_denoiser, run_adaptation, synthesize_reference_set, write_training_log, AdaptConfig, PretrainConfig};
use crate::attack::{empirical_eval, EvalSettings};
use crate::classifier::{fit_neural_classifier, Classifier, FitConfig};
use crate::data::{load_csv_dataset, make_gmm_world, normalize, sample_dataset, Dataset, GmmWorld, Sample, Split};
use crate::denoiser::{
    AnalyticDenoiser, Conditioning, DenoiseStep, Denoiser, GaussianMixture, IdentityDenoiser, NeuralDenoiser,
    NeuralDenoiserSpec,
};
use crate::error::{Error, Result};
use crate::nn::{read_checkpoint, write_checkpoint};
use crate::rng::{normal_vec, phase, substream};
use crate::schedule::{effective_sigma, CorrectionFactor, NoiseSchedule, ScheduleKind};
use crate::smoothing::{certify, BaseClassifier, DenoisedClassifier, SmoothingConfig};
use config::RunConfig;
use rayon::prelude::*;
use report::*;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Certify,
    Attack,
    Adapt,
    AblateK,
    PretrainDenoiser,
    Recompute,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Certify => "certify",
            Command::Attack => "attack",
            Command::Adapt => "adapt",
            Command::AblateK => "ablate-k",
            Command::PretrainDenoiser => "pretrain-denoiser",
            Command::Recompute => "recompute",
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Domain(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::Training(_) => 4,
        Error::Contract(_) => 1,
    }
}

/// Runs `command` on a worker pool of `runtime.workers` threads and returns the written output path.
pub fn run(command: Command, cfg: &RunConfig) -> Result<PathBuf> {
    let workers: usize = cfg.get("runtime.workers")?;
    if workers == 0 {
        return Err(Error::Config("runtime.workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match command {
        Command::Certify => run_certify(cfg),
        Command::Attack => run_attack(cfg),
        Command::Adapt => run_adapt(cfg),
        Command::AblateK => run_ablate_k(cfg),
        Command::PretrainDenoiser => run_pretrain_denoiser(cfg),
        Command::Recompute => run_recompute(cfg),
    })
}

fn provenance(command: Command, cfg: &RunConfig) -> Provenance {
    Provenance { command: command.name().into(), version: VERSION.into(), seed: cfg.seed(), config: cfg.echo() }
}

fn output(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.path("run.output").map(Path::to_path_buf).ok_or_else(|| Error::Config("run.output is empty".into()))
}

/// Everything needed to build a denoise-and-classify pipeline.
pub struct Setup {
    pub world: Option<GmmWorld>,
    pub eval: Dataset,
    pub schedule: NoiseSchedule,
    pub classifier: Classifier,
    pub denoiser: Box<dyn Denoiser>,
    pub neural: Option<NeuralDenoiser>,
    pub smoothing: SmoothingConfig,
    pub k: CorrectionFactor,
    pub cond: Conditioning,
}

impl Setup {
    pub fn pipeline(&self) -> Result<DenoisedClassifier<'_>> {
        self.pipeline_with(self.denoiser.as_ref(), &self.classifier, self.k)
    }

    pub fn pipeline_with<'a>(
        &self,
        denoiser: &'a dyn Denoiser,
        classifier: &'a Classifier,
        k: CorrectionFactor,
    ) -> Result<DenoisedClassifier<'a>> {
        DenoisedClassifier::new(denoiser, classifier, &self.schedule, self.smoothing.sigma, k, self.cond)
    }
}

pub fn load_world(cfg: &RunConfig) -> Result<GmmWorld> {
    if let Some(path) = cfg.path("world.file") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read world {}: {e}", path.display())))?;
        return GmmWorld::from_kv(&text);
    }
    make_gmm_world(cfg.get("world.k")?, cfg.get("world.d")?, cfg.get("world.gamma")?, cfg.get("world.seed")?)
}

pub fn smoothing_config(cfg: &RunConfig) -> Result<SmoothingConfig> {
    SmoothingConfig::new(
        cfg.get("smoothing.sigma")?,
        cfg.get("smoothing.n0")?,
        cfg.get("smoothing.n")?,
        cfg.get("smoothing.alpha")?,
        cfg.get("smoothing.batch")?,
    )
    .map_err(|e| Error::Config(e.to_string()))
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    let kind: ScheduleKind = cfg.get::<String>("schedule.kind")?.parse()?;
    NoiseSchedule::build(kind, cfg.get("schedule.T")?).map_err(|e| Error::Config(e.to_string()))
}

fn parse_cond(s: &str) -> Result<Conditioning> {
    match s {
        "empty" => Ok(Conditioning::Empty),
        "adaptation" => Ok(Conditioning::Adaptation),
        other => other
            .strip_prefix("class:")
            .and_then(|c| c.parse().ok())
            .map(Conditioning::Class)
            .ok_or_else(|| Error::Config(format!("unknown denoiser.cond '{other}'"))),
    }
}

fn train_data(cfg: &RunConfig, world: &GmmWorld) -> Result<Dataset> {
    Ok(sample_dataset(world, cfg.get("data.train_per_class")?, cfg.seed(), Split::Train))
}

pub fn load_classifier(cfg: &RunConfig, world: Option<&GmmWorld>, num_classes: usize) -> Result<Classifier> {
    match cfg.raw("classifier.kind") {
        "bayes" => world
            .map(|w| Classifier::Bayes(w.clone()))
            .ok_or_else(|| Error::Config("the bayes classifier needs a gmm world".into())),
        "neural" => {
            if let Some(path) = cfg.path("classifier.checkpoint") {
                let file = std::fs::File::open(path)
                    .map_err(|e| Error::Data(format!("missing classifier checkpoint {}: {e}", path.display())))?;
                return Ok(Classifier::Neural(read_checkpoint(std::io::BufReader::new(file))?));
            }
            let world = world.ok_or_else(|| Error::Config("training a classifier needs a gmm world or a checkpoint".into()))?;
            let fit = FitConfig {
                hidden: cfg.get("classifier.hidden")?,
                steps: cfg.get("classifier.steps")?,
                lr: cfg.get("classifier.lr")?,
                momentum: 0.9,
                batch: cfg.get("classifier.batch")?,
                seed: cfg.seed(),
            };
            fit_neural_classifier(&train_data(cfg, world)?.samples, num_classes, &fit)
        }
        other => Err(Error::Config(format!("unknown classifier.kind '{other}'"))),
    }
}

pub fn load_neural_denoiser(cfg: &RunConfig) -> Result<NeuralDenoiser> {
    let path = cfg
        .path("denoiser.checkpoint")
        .ok_or_else(|| Error::Config("denoiser.kind = neural needs denoiser.checkpoint".into()))?;
    if !path.exists() {
        return Err(Error::Data(format!("missing denoiser checkpoint {}", path.display())));
    }
    Ok(NeuralDenoiser::load(path)?.0)
}

pub fn build_setup(cfg: &RunConfig) -> Result<Setup> {
    let schedule = schedule(cfg)?;
    let smoothing = smoothing_config(cfg)?;
    let k = CorrectionFactor::new(cfg.get("denoiser.k")?).map_err(|e| Error::Config(e.to_string()))?;
    let cond = parse_cond(cfg.raw("denoiser.cond"))?;
    let (world, eval) = match cfg.raw("data.source") {
        "gmm" => {
            let world = load_world(cfg)?;
            let eval = sample_dataset(&world, cfg.get("data.eval_per_class")?, cfg.seed(), Split::Eval);
            (Some(world), eval)
        }
        "csv" => {
            let path = cfg.path("data.csv").ok_or_else(|| Error::Config("data.source = csv needs data.csv".into()))?;
            let world = if cfg.path("world.file").is_some() { Some(load_world(cfg)?) } else { None };
            (world, load_csv_dataset(path)?)
        }
        other => return Err(Error::Config(format!("unknown data.source '{other}'"))),
    };
    if eval.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let dim = eval.dim();
    let num_classes = match &world {
        Some(w) => w.num_classes(),
        None => eval.samples.iter().map(|s| s.label).max().unwrap_or(0) + 1,
    };
    let classifier = load_classifier(cfg, world.as_ref(), num_classes)?;
    if classifier.dim() != dim {
        return Err(Error::Config(format!("classifier expects width {}, data has {dim}", classifier.dim())));
    }
    let mut neural = None;
    let denoiser: Box<dyn Denoiser> = match cfg.raw("denoiser.kind") {
        "analytic" => {
            let w = world.as_ref().ok_or_else(|| Error::Config("the analytic denoiser needs a gmm world".into()))?;
            Box::new(AnalyticDenoiser::new(GaussianMixture::from_world(w), schedule.clone()))
        }
        "identity" => Box::new(IdentityDenoiser { dim }),
        "neural" => {
            let n = load_neural_denoiser(cfg)?;
            if n.spec.dim != dim || n.spec.steps != schedule.steps() {
                return Err(Error::Config("denoiser checkpoint does not match data width or schedule length".into()));
            }
            neural = Some(n.clone());
            Box::new(n)
        }
        other => return Err(Error::Config(format!("unknown denoiser.kind '{other}'"))),
    };
    Ok(Setup { world, eval, schedule, classifier, denoiser, neural, smoothing, k, cond })
}

/// Certifies every sample; records come back in index order.
pub fn certify_all(base: &dyn BaseClassifier, samples: &[Sample], smoothing: &SmoothingConfig, seed: u64) -> Result<Vec<CertificateRecord>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let c = certify(base, &s.features, smoothing, seed, i as u64)?;
            Ok(CertificateRecord {
                index: i,
                label: s.label,
                outcome: c.outcome,
                pa_lower: c.pa_lower.get(),
                radius: c.radius,
                n0: smoothing.n0,
                n: smoothing.n,
                alpha: smoothing.alpha.get(),
                sigma: smoothing.sigma,
                seed,
            })
        })
        .collect()
}

fn run_certify(cfg: &RunConfig) -> Result<PathBuf> {
    let setup = build_setup(cfg)?;
    let epsilons = cfg.list("certify.epsilons")?;
    let records = certify_all(&setup.pipeline()?, &setup.eval.samples, &setup.smoothing, cfg.seed())?;
    let aggregates = aggregate_certificates(&records, &epsilons);
    let report = CertifyReport { provenance: provenance(Command::Certify, cfg), epsilons: epsilons.clone(), records, aggregates };
    let out = output(cfg)?;
    write_json(&out, &report)?;
    let (header, rows) = certify_table("sigma", &[(setup.smoothing.sigma.to_string(), &report.aggregates)], &epsilons);
    write_csv(&csv_path(&out), &header, &rows)?;
    Ok(out)
}

fn run_attack(cfg: &RunConfig) -> Result<PathBuf> {
    let setup = build_setup(cfg)?;
    let epsilons = cfg.list("attack.epsilons")?;
    if epsilons.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::Config("attack budgets must be nonnegative".into()));
    }
    let settings = EvalSettings {
        smoothing: setup.smoothing,
        n_predict: cfg.get("smoothing.n_predict")?,
        epsilons: epsilons.clone(),
        steps: cfg.get("attack.steps")?,
        m_test: cfg.get("attack.m_test")?,
        seed: cfg.seed(),
    };
    let pipeline = setup.pipeline()?;
    let (mut records, metrics) = empirical_eval(&pipeline, &setup.eval.samples, &settings)?;
    let certified_accuracy = if cfg.get::<bool>("attack.certify")? {
        let certs = certify_all(&pipeline, &setup.eval.samples, &setup.smoothing, cfg.seed())?;
        for (r, c) in records.iter_mut().zip(&certs) {
            r.certified_radius = Some(if c.correct() { c.radius } else { 0.0 });
        }
        Some(epsilons.iter().map(|&epsilon| CertifiedAccuracy { epsilon, accuracy: certified_accuracy_at(&certs, epsilon) }).collect())
    } else {
        None
    };
    let max_perturbation_excess = records
        .iter()
        .flat_map(|r| r.adversarial.iter().map(|a| a.perturbation_norm - a.epsilon))
        .fold(f64::NEG_INFINITY, f64::max);
    if max_perturbation_excess > 1e-9 {
        return Err(Error::Contract(format!("adversarial example exceeds its budget by {max_perturbation_excess}")));
    }
    let summary = AttackSummary {
        provenance: provenance(Command::Attack, cfg),
        epsilons: epsilons.clone(),
        metrics,
        certified_accuracy,
        max_perturbation_excess,
    };
    let out = output(cfg)?;
    write_attack_jsonl(&out, &records, &summary)?;
    let header = vec!["epsilon".to_string(), "clean_accuracy".into(), "robust_accuracy".into(), "certified_accuracy".into()];
    let rows = summary
        .metrics
        .robust_accuracy
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let cert = summary.certified_accuracy.as_ref().map_or(String::new(), |c| c[i].accuracy.to_string());
            vec![r.epsilon.to_string(), summary.metrics.clean_accuracy.to_string(), r.accuracy.to_string(), cert]
        })
        .collect::<Vec<_>>();
    write_csv(&csv_path(&out), &header, &rows)?;
    Ok(out)
}

fn run_ablate_k(cfg: &RunConfig) -> Result<PathBuf> {
    let setup = build_setup(cfg)?;
    let epsilons = cfg.list("certify.epsilons")?;
    let grid = cfg.list("ablate.k")?;
    if grid.is_empty() {
        return Err(Error::Config("ablate.k is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &k in &grid {
        let k = CorrectionFactor::new(k).map_err(|e| Error::Config(e.to_string()))?;
        let pipeline = setup.pipeline_with(setup.denoiser.as_ref(), &setup.classifier, k)?;
        let records = certify_all(&pipeline, &setup.eval.samples, &setup.smoothing, cfg.seed())?;
        rows.push(AblationRow {
            k: k.get(),
            t_hat: pipeline.step.t_hat,
            t_prime: pipeline.step.t_prime,
            aggregates: aggregate_certificates(&records, &epsilons),
        });
    }
    let report = AblationReport { provenance: provenance(Command::AblateK, cfg), epsilons: epsilons.clone(), rows };
    let out = output(cfg)?;
    write_json(&out, &report)?;
    let keyed: Vec<(String, &CertifyAggregates)> = report.rows.iter().map(|r| (r.k.to_string(), &r.aggregates)).collect();
    let (header, rows) = certify_table("k", &keyed, &epsilons);
    write_csv(&csv_path(&out), &header, &rows)?;
    Ok(out)
}

fn adapt_config(cfg: &RunConfig, k: CorrectionFactor) -> Result<AdaptConfig> {
    let a = AdaptConfig {
        lambda: cfg.get("adapt.lambda")?,
        steps: cfg.get("adapt.steps")?,
        lr_denoiser: cfg.get("adapt.lr_denoiser")?,
        lr_classifier: cfg.get("adapt.lr_classifier")?,
        momentum: cfg.get("adapt.momentum")?,
        batch: cfg.get("adapt.batch")?,
        mode: cfg.get::<String>("adapt.mode")?.parse()?,
        k,
        seed: cfg.seed(),
    };
    a.validate()?;
    Ok(a)
}

fn run_adapt(cfg: &RunConfig) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    // Adapted denoisers are always queried through the adaptation token.
    cfg.set("denoiser.cond", "adaptation")?;
    let setup = build_setup(&cfg)?;
    let world = setup.world.as_ref().ok_or_else(|| Error::Config("adaptation needs a gmm world for the reference set".into()))?;
    let mut denoiser = setup.neural.clone().ok_or_else(|| Error::Config("adaptation needs denoiser.kind = neural".into()))?;
    let mut classifier = setup.classifier.clone();
    let acfg = adapt_config(&cfg, setup.k)?;
    let epsilons = cfg.list("certify.epsilons")?;
    let classes: Vec<usize> = (0..world.num_classes()).collect();
    let refset = synthesize_reference_set(world, &classes, cfg.get("adapt.shots")?, cfg.seed())?;

    let evaluate = |d: &NeuralDenoiser, c: &Classifier| -> Result<CertifyAggregates> {
        let pipeline = setup.pipeline_with(d, c, setup.k)?;
        Ok(aggregate_certificates(&certify_all(&pipeline, &setup.eval.samples, &setup.smoothing, cfg.seed())?, &epsilons))
    };
    let baseline = evaluate(&denoiser, &classifier)?;
    let base_acr = baseline.acr;
    let mut rows = vec![AdaptRow { stage: "baseline".into(), aggregates: baseline, acr_delta: 0.0 }];
    let mut log = Vec::new();
    match acfg.mode {
        crate::adapt::AdaptMode::Staged => {
            log.extend(crate::adapt::personalize(&mut denoiser, &classifier, &refset, &acfg, &setup.schedule)?);
            let agg = evaluate(&denoiser, &classifier)?;
            rows.push(AdaptRow { stage: "adapt-denoiser".into(), acr_delta: agg.acr - base_acr, aggregates: agg });
            if matches!(classifier, Classifier::Neural(_)) {
                log.extend(crate::adapt::finetune_classifier(&denoiser, &mut classifier, &refset, &acfg, &setup.schedule)?);
                let agg = evaluate(&denoiser, &classifier)?;
                rows.push(AdaptRow { stage: "adapt-both".into(), acr_delta: agg.acr - base_acr, aggregates: agg });
            }
        }
        crate::adapt::AdaptMode::Joint => {
            log.extend(run_adaptation(&mut denoiser, &mut classifier, &refset, &acfg, &setup.schedule)?);
            let agg = evaluate(&denoiser, &classifier)?;
            rows.push(AdaptRow { stage: "joint".into(), acr_delta: agg.acr - base_acr, aggregates: agg });
        }
    }
    if let Some(path) = cfg.path("adapt.output_denoiser") {
        denoiser.save(path, cfg.get::<String>("schedule.kind")?.parse()?, setup.k)?;
    }
    if let (Some(path), Classifier::Neural(p)) = (cfg.path("adapt.output_classifier"), &classifier) {
        write_checkpoint(p, std::io::BufWriter::new(std::fs::File::create(path)?))?;
    }
    if let Some(path) = cfg.path("adapt.log") {
        write_training_log(path, &log)?;
    }
    let report = AdaptReport {
        provenance: provenance(Command::Adapt, &cfg),
        epsilons: epsilons.clone(),
        reference_set_size: refset.len(),
        rows,
    };
    let out = output(&cfg)?;
    write_json(&out, &report)?;
    let keyed: Vec<(String, &CertifyAggregates)> = report.rows.iter().map(|r| (r.stage.clone(), &r.aggregates)).collect();
    let (header, rows) = certify_table("stage", &keyed, &epsilons);
    write_csv(&csv_path(&out), &header, &rows)?;
    Ok(out)
}

/// Held-out one-step denoising MSE in model space at smoothing level `sigma`.
pub fn denoising_mse(
    denoiser: &dyn Denoiser,
    samples: &[Sample],
    sigma: f64,
    schedule: &NoiseSchedule,
    k: CorrectionFactor,
    cond: Conditioning,
    seed: u64,
) -> Result<f64> {
    let eff = effective_sigma(sigma)?;
    let step = DenoiseStep::new(schedule, eff, k, cond)?;
    let total: f64 = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let x = normalize(&s.features);
            let noise = normal_vec(&mut substream(seed, &[phase::DATA, 99, i as u64]), eff, x.len());
            let noisy: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + b).collect();
            step.apply(denoiser, &noisy).iter().zip(&x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total / samples.len().max(1) as f64)
}

fn run_pretrain_denoiser(cfg: &RunConfig) -> Result<PathBuf> {
    let schedule = schedule(cfg)?;
    let k = CorrectionFactor::new(cfg.get("denoiser.k")?).map_err(|e| Error::Config(e.to_string()))?;
    let target = load_world(cfg)?;
    let source = match cfg.raw("pretrain.world_seed") {
        "" => target.clone(),
        s => {
            let seed: u64 = s.parse().map_err(|_| Error::Config(format!("cannot parse pretrain.world_seed = '{s}'")))?;
            make_gmm_world(target.num_classes(), target.dim(), target.gamma, seed)?
        }
    };
    let spec = NeuralDenoiserSpec {
        dim: target.dim(),
        num_classes: target.num_classes(),
        token_dim: cfg.get("pretrain.token_dim")?,
        hidden: cfg.get("pretrain.hidden")?,
        depth: cfg.get("pretrain.depth")?,
        steps: schedule.steps(),
    };
    let pcfg = PretrainConfig {
        steps: cfg.get("pretrain.steps")?,
        lr: cfg.get("pretrain.lr")?,
        momentum: cfg.get("pretrain.momentum")?,
        batch: cfg.get("pretrain.batch")?,
        empty_prob: cfg.get("pretrain.empty_prob")?,
        seed: cfg.seed(),
    };
    let mut denoiser = NeuralDenoiser::new(spec, &mut substream(cfg.seed(), &[phase::INIT]));
    let log = pretrain_denoiser(&mut denoiser, &train_data(cfg, &source)?.samples, &pcfg, &schedule)?;
    let ckpt = cfg.path("pretrain.output").ok_or_else(|| Error::Config("pretrain.output is empty".into()))?;
    denoiser.save(ckpt, cfg.get::<String>("schedule.kind")?.parse()?, k)?;
    if let Some(path) = cfg.path("pretrain.log") {
        write_training_log(path, &log)?;
    }
    let held = sample_dataset(&target, cfg.get("data.eval_per_class")?, cfg.seed(), Split::Eval);
    let analytic = AnalyticDenoiser::new(GaussianMixture::from_world(&target), schedule.clone());
    let identity = IdentityDenoiser { dim: target.dim() };
    let mut mse = Vec::new();
    for sigma in [0.25, 0.5] {
        let m = |d: &dyn Denoiser| denoising_mse(d, &held.samples, sigma, &schedule, k, Conditioning::Empty, cfg.seed());
        mse.push(DenoiseMse { sigma, neural: m(&denoiser)?, identity: m(&identity)?, analytic: m(&analytic)? });
    }
    let report = PretrainReport {
        provenance: provenance(Command::PretrainDenoiser, cfg),
        checkpoint: ckpt.display().to_string(),
        final_loss: log.last().map_or(f64::NAN, |r| r.total),
        mse,
    };
    let out = output(cfg)?;
    write_json(&out, &report)?;
    Ok(out)
}

fn run_recompute(cfg: &RunConfig) -> Result<PathBuf> {
    let input = cfg.path("recompute.input").ok_or_else(|| Error::Config("recompute.input is empty".into()))?;
    let text = std::fs::read_to_string(input).map_err(|e| Error::Data(format!("cannot read {}: {e}", input.display())))?;
    match serde_json::from_str::<CertifyReport>(&text) {
        Ok(report) => verify_certify_report(&report)?,
        Err(_) => {
            let (records, summary) = read_attack_jsonl(&text)?;
            verify_attack_report(&records, &summary)?;
        }
    }
    Ok(input.to_path_buf())
}
