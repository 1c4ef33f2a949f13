//! JSON reports and the aggregates derived from per-example records.

use crate::attack::{aggregate_eval, EvalMetrics, EvalRecord};
use crate::error::{Error, Result};
use crate::smoothing::Outcome;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One certified test point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub index: usize,
    pub label: usize,
    pub outcome: Outcome,
    #[serde(rename = "pA_lower")]
    pub pa_lower: f64,
    pub radius: f64,
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl CertificateRecord {
    pub fn correct(&self) -> bool {
        self.outcome.is(self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedAccuracy {
    pub epsilon: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyAggregates {
    pub certified_accuracy: Vec<CertifiedAccuracy>,
    pub acr: f64,
    /// Fraction certified with the correct class at any radius.
    pub clean_accuracy: f64,
    pub abstain_rate: f64,
    pub count: usize,
}

/// Certified accuracy at `epsilon`: correct and `radius > epsilon`.
pub fn certified_accuracy_at(records: &[CertificateRecord], epsilon: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hit = records.iter().filter(|r| r.correct() && r.radius > epsilon).count();
    hit as f64 / records.len() as f64
}

/// Average certified radius, counting wrong or abstaining points as zero.
pub fn average_certified_radius(records: &[CertificateRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.correct()).map(|r| r.radius).sum::<f64>() / records.len() as f64
}

pub fn aggregate_certificates(records: &[CertificateRecord], epsilons: &[f64]) -> CertifyAggregates {
    let n = records.len().max(1) as f64;
    CertifyAggregates {
        certified_accuracy: epsilons
            .iter()
            .map(|&epsilon| CertifiedAccuracy { epsilon, accuracy: certified_accuracy_at(records, epsilon) })
            .collect(),
        acr: average_certified_radius(records),
        clean_accuracy: records.iter().filter(|r| r.correct()).count() as f64 / n,
        abstain_rate: records.iter().filter(|r| r.outcome == Outcome::Abstain).count() as f64 / n,
        count: records.len(),
    }
}

/// Provenance block shared by every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub provenance: Provenance,
    pub epsilons: Vec<f64>,
    pub records: Vec<CertificateRecord>,
    pub aggregates: CertifyAggregates,
}

/// Summary line closing an attack JSONL report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub provenance: Provenance,
    pub epsilons: Vec<f64>,
    pub metrics: EvalMetrics,
    /// Certified accuracy at each attack budget, when certificates were computed.
    pub certified_accuracy: Option<Vec<CertifiedAccuracy>>,
    pub max_perturbation_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: f64,
    pub t_hat: usize,
    pub t_prime: usize,
    pub aggregates: CertifyAggregates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub provenance: Provenance,
    pub epsilons: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRow {
    /// `baseline`, `adapt-denoiser`, `adapt-both` or `joint`.
    pub stage: String,
    pub aggregates: CertifyAggregates,
    pub acr_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub provenance: Provenance,
    pub epsilons: Vec<f64>,
    pub reference_set_size: usize,
    pub rows: Vec<AdaptRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub provenance: Provenance,
    pub checkpoint: String,
    pub final_loss: f64,
    /// Held-out one-step denoising MSE per sigma: `(sigma, neural, identity, analytic)`.
    pub mse: Vec<DenoiseMse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseMse {
    pub sigma: f64,
    pub neural: f64,
    pub identity: f64,
    pub analytic: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// One record per line, then the summary object.
pub fn write_attack_jsonl(path: &Path, records: &[EvalRecord], summary: &AttackSummary) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut out, &serde_json::json!({ "summary": summary }))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_attack_jsonl(text: &str) -> Result<(Vec<EvalRecord>, AttackSummary)> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let (last, body) = lines.split_last().ok_or_else(|| Error::Data("attack report is empty".into()))?;
    let records = body
        .iter()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("line {}: {e}", i + 1))))
        .collect::<Result<Vec<EvalRecord>>>()?;
    #[derive(Deserialize)]
    struct Wrapper {
        summary: AttackSummary,
    }
    let w: Wrapper = serde_json::from_str(last).map_err(|e| Error::Data(format!("summary line: {e}")))?;
    Ok((records, w.summary))
}

/// Rewrites `<path>` with a `.csv` extension.
pub fn csv_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("csv")
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(header).map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Header and rows of a certified-accuracy table keyed by `label`.
pub fn certify_table(label: &str, rows: &[(String, &CertifyAggregates)], epsilons: &[f64]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec![label.to_string(), "acr".into(), "abstain_rate".into()];
    header.extend(epsilons.iter().map(|e| format!("certified_accuracy@{e}")));
    let body = rows
        .iter()
        .map(|(key, agg)| {
            let mut row = vec![key.clone(), agg.acr.to_string(), agg.abstain_rate.to_string()];
            row.extend(agg.certified_accuracy.iter().map(|c| c.accuracy.to_string()));
            row
        })
        .collect();
    (header, body)
}

/// Recomputes the aggregates of a certify report and checks they match.
pub fn verify_certify_report(report: &CertifyReport) -> Result<()> {
    let again = aggregate_certificates(&report.records, &report.epsilons);
    if again != report.aggregates {
        return Err(Error::Data("stored aggregates differ from the ones recomputed from records".into()));
    }
    Ok(())
}

pub fn verify_attack_report(records: &[EvalRecord], summary: &AttackSummary) -> Result<()> {
    let again = aggregate_eval(records, &summary.epsilons);
    if again != summary.metrics {
        return Err(Error::Data("stored attack metrics differ from the ones recomputed from records".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(label: usize, outcome: Outcome, radius: f64) -> CertificateRecord {
        CertificateRecord { index: 0, label, outcome, pa_lower: 0.9, radius, n0: 100, n: 1000, alpha: 0.001, sigma: 0.25, seed: 0 }
    }

    #[test]
    fn aggregates_follow_definitions() {
        let records = vec![
            rec(0, Outcome::Class(0), 0.6),
            rec(1, Outcome::Class(1), 0.3),
            rec(2, Outcome::Class(0), 0.9),
            rec(3, Outcome::Abstain, 0.0),
        ];
        let eps = [0.0, 0.25, 0.5, 0.75];
        let agg = aggregate_certificates(&records, &eps);
        let acc: Vec<f64> = agg.certified_accuracy.iter().map(|c| c.accuracy).collect();
        assert_eq!(acc, vec![0.5, 0.5, 0.25, 0.0]);
        assert!((agg.acr - 0.9 / 4.0).abs() < 1e-15);
        assert_eq!(agg.abstain_rate, 0.25);
        assert!(acc.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn tampered_report_fails_verification() {
        let records = vec![rec(0, Outcome::Class(0), 0.6)];
        let mut report = CertifyReport {
            provenance: Provenance { command: "certify".into(), version: VERSION.into(), seed: 0, config: BTreeMap::new() },
            epsilons: vec![0.0, 0.5],
            aggregates: aggregate_certificates(&records, &[0.0, 0.5]),
            records,
        };
        verify_certify_report(&report).unwrap();
        report.aggregates.acr += 0.1;
        assert!(matches!(verify_certify_report(&report), Err(Error::Data(_))));
    }

    #[test]
    fn record_field_names() {
        let v = serde_json::to_value(rec(1, Outcome::Abstain, 0.0)).unwrap();
        for key in ["index", "label", "outcome", "pA_lower", "radius", "n0", "n", "alpha", "sigma", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["outcome"], "abstain");
    }
}
