//! Synthetic Gaussian-mixture worlds, datasets and the `[0,1] <-> [-1,1]` normalization.

use crate::error::{domain, Error, Result};
use crate::rng::{fill_normal, phase, substream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Class-conditional isotropic Gaussian world in `[0,1]^d` input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmWorld {
    pub means: Vec<Vec<f64>>,
    pub gamma: f64,
    pub priors: Vec<f64>,
}

const MEAN_LO: f64 = 0.2;
const MEAN_HI: f64 = 0.8;
const REJECTION_BUDGET: usize = 1000;

pub fn make_gmm_world(classes: usize, dim: usize, gamma: f64, seed: u64) -> Result<GmmWorld> {
    if classes < 2 || dim < 1 {
        return domain(format!("world needs K >= 2 and d >= 1, got K={classes} d={dim}"));
    }
    if !(gamma > 0.0) {
        return domain(format!("gamma must be positive, got {gamma}"));
    }
    let min_dist = 4.0 * gamma;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut accepted = None;
        for attempt in 0..REJECTION_BUDGET {
            let mut rng = substream(seed, &[phase::WORLD, c as u64, attempt as u64]);
            let cand: Vec<f64> = (0..dim).map(|_| rng.gen_range(MEAN_LO..MEAN_HI)).collect();
            if means.iter().all(|m| l2_distance(m, &cand) >= min_dist) {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(m) => means.push(m),
            None => {
                return Err(Error::Config(format!(
                    "could not place {classes} means {min_dist} apart in [0.2,0.8]^{dim}; gamma too large"
                )))
            }
        }
    }
    Ok(GmmWorld { means, gamma, priors: vec![1.0 / classes as f64; classes] })
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl GmmWorld {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                best = best.min(l2_distance(&self.means[i], &self.means[j]));
            }
        }
        best
    }

    /// One clamped draw `clamp(mu_c + gamma * z, 0, 1)`.
    pub fn sample_class<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        let mut z = vec![0.0; self.dim()];
        fill_normal(rng, self.gamma, &mut z);
        self.means[class].iter().zip(z).map(|(m, e)| (m + e).clamp(0.0, 1.0)).collect()
    }

    /// Plain-text `key = value` description; floats use round-trip formatting.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "world.k = {}", self.num_classes()).unwrap();
        writeln!(out, "world.d = {}", self.dim()).unwrap();
        writeln!(out, "world.gamma = {}", self.gamma).unwrap();
        writeln!(out, "world.min_pairwise_distance = {}", self.min_pairwise_distance()).unwrap();
        for (c, p) in self.priors.iter().enumerate() {
            writeln!(out, "world.prior.{c} = {p}").unwrap();
        }
        for (c, m) in self.means.iter().enumerate() {
            let joined: Vec<String> = m.iter().map(|v| v.to_string()).collect();
            writeln!(out, "world.mean.{c} = {}", joined.join(",")).unwrap();
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Data(format!("world file lacks '{k}'")));
        let parse_f = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Data(format!("bad number '{s}': {e}")));
        let k: usize = get("world.k")?.parse().map_err(|_| Error::Data("bad world.k".into()))?;
        let gamma = parse_f(get("world.gamma")?)?;
        let mut means = Vec::with_capacity(k);
        let mut priors = Vec::with_capacity(k);
        for c in 0..k {
            priors.push(parse_f(get(&format!("world.prior.{c}"))?)?);
            means.push(get(&format!("world.mean.{c}"))?.split(',').map(parse_f).collect::<Result<Vec<_>>>()?);
        }
        let world = GmmWorld { means, gamma, priors };
        let total: f64 = world.priors.iter().sum();
        if (total - 1.0).abs() > 1e-12 || world.means.iter().any(|m| m.len() != world.dim()) {
            return Err(Error::Data("inconsistent world description".into()));
        }
        Ok(world)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }
}

/// `n_per_class` draws per class, interleaved by class so every prefix is balanced.
pub fn sample_dataset(world: &GmmWorld, n_per_class: usize, seed: u64, split: Split) -> Dataset {
    let k = world.num_classes();
    let samples = (0..n_per_class * k)
        .map(|j| {
            let label = j % k;
            let mut rng = substream(seed, &[phase::DATA, split as u64, j as u64]);
            Sample { features: world.sample_class(label, &mut rng), label }
        })
        .collect();
    Dataset { samples, split }
}

/// `[0,1] -> [-1,1]`: mean 0.5, std 0.5 per coordinate.
pub fn normalize(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 2.0 * v - 1.0).collect()
}

pub fn denormalize(y: &[f64]) -> Vec<f64> {
    y.iter().map(|v| (v + 1.0) * 0.5).collect()
}

/// Reads `label,f1,...,fd` rows without a header.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path).map_err(|e| {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Data(format!("cannot open {}: {io}", path.display())),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        }
    })?;
    let mut samples = Vec::new();
    let mut dim = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("csv: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(Error::Data(format!("line {line}: need a label and at least one feature")));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: label '{}' is not a class index", &record[0])))?;
        let features = record
            .iter()
            .skip(1)
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| Error::Data(format!("line {line}: feature '{f}' is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(bad) = features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("line {line}: feature {bad} outside [0, 1]")));
        }
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(Error::Data(format!("line {line}: {} features, expected {d}", features.len())))
            }
            _ => {}
        }
        samples.push(Sample { features, label });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Ok(Dataset { samples, split: Split::Eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn world_spacing_and_determinism() {
        let w = make_gmm_world(2, 2, 0.05, 1).unwrap();
        assert!(w.min_pairwise_distance() >= 0.2);
        assert_eq!(w, make_gmm_world(2, 2, 0.05, 1).unwrap());
        assert!((w.priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let big = make_gmm_world(10, 256, 0.1, 3).unwrap();
        assert!(big.min_pairwise_distance() >= 0.4);
        assert!(big.means.iter().flatten().all(|v| (0.2..0.8).contains(v)));
    }

    #[test]
    fn impossible_world_is_config_error() {
        assert!(matches!(make_gmm_world(5, 1, 0.2, 0), Err(Error::Config(_))));
        assert!(make_gmm_world(1, 4, 0.1, 0).is_err());
        assert!(make_gmm_world(2, 4, 0.0, 0).is_err());
    }

    #[test]
    fn samples_concentrate_on_means() {
        let mut w = make_gmm_world(3, 5, 0.05, 2).unwrap();
        let n = 400;
        let ds = sample_dataset(&w, n, 9, Split::Eval);
        assert_eq!(ds, sample_dataset(&w, n, 9, Split::Eval));
        for c in 0..3 {
            let members: Vec<&Sample> = ds.samples.iter().filter(|s| s.label == c).collect();
            assert_eq!(members.len(), n);
            for j in 0..5 {
                let mean = members.iter().map(|s| s.features[j]).sum::<f64>() / n as f64;
                assert!((mean - w.means[c][j]).abs() < 3.0 * w.gamma / (n as f64).sqrt());
            }
        }
        w.gamma = 1e-12;
        let ds = sample_dataset(&w, 2, 1, Split::Train);
        for s in &ds.samples {
            assert!(l2_distance(&s.features, &w.means[s.label]) < 1e-9);
        }
    }

    #[test]
    fn normalization_endpoints_and_round_trip() {
        assert_eq!(normalize(&[0.5, 0.0, 1.0]), vec![0.0, -1.0, 1.0]);
        let mut rng = substream(0, &[]);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            for (a, b) in denormalize(&normalize(&x)).iter().zip(&x) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn world_kv_round_trip() {
        let w = make_gmm_world(3, 4, 0.07, 11).unwrap();
        assert_eq!(GmmWorld::from_kv(&w.to_kv()).unwrap(), w);
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_loading() {
        let f = write_tmp("1,0.5,0.5\n0,0.1,0.9\n");
        let ds = load_csv_dataset(f.path()).unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 2));
        assert_eq!(ds.samples[0].label, 1);

        let f = write_tmp("");
        assert!(matches!(load_csv_dataset(f.path()), Err(Error::Data(_))));

        let f = write_tmp("0,0.2,0.3\n1,1.5,0.1\n");
        let err = load_csv_dataset(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("1.5"), "{err}");

        let f = write_tmp("0,0.2,abc\n");
        assert!(load_csv_dataset(f.path()).unwrap_err().to_string().contains("line 1"));
    }
}
