//! Experiment reports: one row per defense, one column per attack plus the
//! clean (`natural`) and worst-case (`ensemble`) columns.
//!
//! Ensemble cells are always recomputed from the per-sample outcomes stored
//! in each row. Timings are kept in the metadata but left out of
//! [`ExperimentReport::content_hash`].

use std::path::Path;

use resonance::archive::write_atomic;
use resonance::attacks::worst_case_ensemble;
use resonance::stereo::{error_reduced, StereoMetrics};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Stereo,
}

/// Outcome of one defense on one input set, per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcomes {
    /// Whether each sample was classified correctly.
    Correct(Vec<bool>),
    /// Disparity metrics of each stereo pair.
    Dense(Vec<StereoMetrics>),
}

impl Outcomes {
    pub fn len(&self) -> usize {
        match self {
            Outcomes::Correct(v) => v.len(),
            Outcomes::Dense(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accuracy, or the per-pair mean of each metric.
    pub fn score(&self) -> Result<Score> {
        match self {
            Outcomes::Correct(v) => {
                if v.is_empty() {
                    return Err(Error::Integrity("empty outcome column".into()));
                }
                Ok(Score::Accuracy(v.iter().filter(|&&c| c).count() as f64 / v.len() as f64))
            }
            Outcomes::Dense(v) => Ok(Score::Dense(mean_metrics(v)?)),
        }
    }
}

fn mean_metrics(v: &[StereoMetrics]) -> Result<StereoMetrics> {
    if v.is_empty() {
        return Err(Error::Integrity("empty outcome column".into()));
    }
    let n = v.len() as f64;
    Ok(StereoMetrics {
        mae: v.iter().map(|m| m.mae).sum::<f64>() / n,
        rmse: v.iter().map(|m| m.rmse).sum::<f64>() / n,
        d1: v.iter().map(|m| m.d1).sum::<f64>() / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    Accuracy(f64),
    Dense(StereoMetrics),
}

impl Score {
    pub fn accuracy(&self) -> Option<f64> {
        match *self {
            Score::Accuracy(a) => Some(a),
            Score::Dense(_) => None,
        }
    }

    pub fn dense(&self) -> Option<StereoMetrics> {
        match *self {
            Score::Dense(m) => Some(m),
            Score::Accuracy(_) => None,
        }
    }
}

/// Worst case over attack columns, per sample: correct only if correct
/// under every attack, or the largest error of each metric.
pub fn ensemble_score(columns: &[Outcomes]) -> Result<Option<Score>> {
    let Some(first) = columns.first() else {
        return Ok(None);
    };
    let n = first.len();
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::Integrity("attack columns cover different sample counts".into()));
    }
    match first {
        Outcomes::Correct(_) => {
            let rows = (0..n)
                .map(|i| {
                    columns
                        .iter()
                        .map(|c| match c {
                            Outcomes::Correct(v) => Ok(v[i]),
                            Outcomes::Dense(_) => Err(Error::Integrity("mixed outcome kinds".into())),
                        })
                        .collect::<Result<Vec<bool>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(Score::Accuracy(worst_case_ensemble(&rows)?)))
        }
        Outcomes::Dense(_) => {
            let worst = (0..n)
                .map(|i| {
                    let mut w = StereoMetrics {
                        mae: 0.0,
                        rmse: 0.0,
                        d1: 0.0,
                    };
                    for c in columns {
                        let Outcomes::Dense(v) = c else {
                            return Err(Error::Integrity("mixed outcome kinds".into()));
                        };
                        w.mae = w.mae.max(v[i].mae);
                        w.rmse = w.rmse.max(v[i].rmse);
                        w.d1 = w.d1.max(v[i].d1);
                    }
                    Ok(w)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(Score::Dense(mean_metrics(&worst)?)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub defense: String,
    pub natural: Score,
    /// Aligned with [`ExperimentReport::attacks`].
    pub attacks: Vec<Score>,
    pub ensemble: Option<Score>,
    /// Per-sample outcomes: the clean set first, then one per attack.
    pub outcomes: Vec<Outcomes>,
}

impl ReportRow {
    /// Builds a row from per-sample outcomes (clean first).
    pub fn from_outcomes(defense: String, outcomes: Vec<Outcomes>) -> Result<Self> {
        let (clean, attacked) = outcomes
            .split_first()
            .ok_or_else(|| Error::Integrity("row without a clean column".into()))?;
        Ok(Self {
            defense,
            natural: clean.score()?,
            attacks: attacked.iter().map(Outcomes::score).collect::<Result<_>>()?,
            ensemble: ensemble_score(attacked)?,
            outcomes,
        })
    }
}

/// Relative error reduction of a defense against the undefended row, per
/// metric, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReducedRow {
    pub defense: String,
    pub natural: StereoMetrics,
    pub attacks: Vec<StereoMetrics>,
    pub ensemble: Option<StereoMetrics>,
}

fn reduced(undefended: &StereoMetrics, defended: &StereoMetrics) -> StereoMetrics {
    StereoMetrics {
        mae: error_reduced(undefended.mae, defended.mae),
        rmse: error_reduced(undefended.rmse, defended.rmse),
        d1: error_reduced(undefended.d1, defended.d1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
    /// Attack steps per sample, when the stage is an attack.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub samples: Option<usize>,
}

impl Timing {
    /// Wall time per attack step and sample.
    pub fn per_step(&self) -> Option<f64> {
        Some(self.seconds / (self.steps? * self.samples?) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub sample_count: usize,
    /// SHA-256 of the canonical JSON form of the configuration.
    pub config_hash: String,
    pub timings: Vec<Timing>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: Task,
    pub attacks: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Present for stereo reports only.
    pub error_reduced: Vec<ErrorReducedRow>,
    pub meta: ReportMeta,
}

impl ExperimentReport {
    /// Assembles a report, deriving error-reduced rows for dense tasks from
    /// the first (undefended) row.
    pub fn new(task: Task, attacks: Vec<String>, rows: Vec<ReportRow>, meta: ReportMeta) -> Result<Self> {
        let error_reduced = match task {
            Task::Classification => Vec::new(),
            Task::Stereo => {
                let base = rows.first().ok_or_else(|| Error::Integrity("report without rows".into()))?;
                let dense = |s: &Score| s.dense().ok_or_else(|| Error::Integrity("stereo row holds accuracies".into()));
                let b_nat = dense(&base.natural)?;
                let b_att = base.attacks.iter().map(dense).collect::<Result<Vec<_>>>()?;
                let b_ens = base.ensemble.as_ref().map(dense).transpose()?;
                rows.iter()
                    .skip(1)
                    .map(|r| {
                        Ok(ErrorReducedRow {
                            defense: r.defense.clone(),
                            natural: reduced(&b_nat, &dense(&r.natural)?),
                            attacks: r
                                .attacks
                                .iter()
                                .zip(&b_att)
                                .map(|(s, b)| Ok(reduced(b, &dense(s)?)))
                                .collect::<Result<_>>()?,
                            ensemble: match (&r.ensemble, &b_ens) {
                                (Some(s), Some(b)) => Some(reduced(b, &dense(s)?)),
                                _ => None,
                            },
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(Self {
            task,
            attacks,
            rows,
            error_reduced,
            meta,
        })
    }

    pub fn row(&self, defense: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.defense == defense)
    }

    pub fn attack_index(&self, attack: &str) -> Option<usize> {
        self.attacks.iter().position(|a| a == attack)
    }

    /// SHA-256 over everything except timings.
    pub fn content_hash(&self) -> String {
        let mut stripped = self.clone();
        stripped.meta.timings.clear();
        let bytes = serde_json::to_vec(&stripped).expect("reports always serialize");
        hex(&Sha256::digest(&bytes))
    }

    /// Checks the structural invariants every report must satisfy. Returns
    /// a description of the first violation.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Integrity(m));
        for row in &self.rows {
            if row.attacks.len() != self.attacks.len() || row.outcomes.len() != self.attacks.len() + 1 {
                return fail(format!("row {} does not match the attack columns", row.defense));
            }
            let recomputed = ReportRow::from_outcomes(row.defense.clone(), row.outcomes.clone())?;
            if &recomputed != row {
                return fail(format!("row {} disagrees with its per-sample outcomes", row.defense));
            }
            match (self.task, &row.ensemble) {
                (Task::Classification, Some(Score::Accuracy(e))) => {
                    let min = row.attacks.iter().filter_map(Score::accuracy).fold(f64::INFINITY, f64::min);
                    if *e > min {
                        return fail(format!("row {}: ensemble {e} above the weakest attack {min}", row.defense));
                    }
                }
                (Task::Stereo, Some(Score::Dense(e))) => {
                    let max = row.attacks.iter().filter_map(|s| s.dense()).fold(0.0_f64, |m, s| m.max(s.mae));
                    if e.mae < max {
                        return fail(format!("row {}: ensemble mae {} below the strongest attack {max}", row.defense, e.mae));
                    }
                }
                (_, None) if self.attacks.is_empty() => {}
                _ => return fail(format!("row {} has a malformed ensemble cell", row.defense)),
            }
            for o in &row.outcomes {
                if let Outcomes::Dense(v) = o {
                    if let Some(m) = v.iter().find(|m| m.rmse < m.mae - 1e-12) {
                        return fail(format!("row {}: rmse {} below mae {}", row.defense, m.rmse, m.mae));
                    }
                }
            }
        }
        if (self.task == Task::Classification) != self.error_reduced.is_empty() && self.rows.len() > 1 {
            return fail("error-reduced rows belong to dense reports only".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The table as CSV. Classification rows hold accuracies; stereo rows
    /// are split per metric (`<defense>/mae`, ...) and followed by
    /// `<defense>/error_reduced_<metric>` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["defense".to_string(), "natural".to_string()];
        header.extend(self.attacks.iter().cloned());
        header.push("ensemble".into());
        w.write_record(&header)?;
        let fmt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        for row in &self.rows {
            match self.task {
                Task::Classification => {
                    let mut rec = vec![row.defense.clone(), fmt(row.natural.accuracy())];
                    rec.extend(row.attacks.iter().map(|s| fmt(s.accuracy())));
                    rec.push(fmt(row.ensemble.as_ref().and_then(Score::accuracy)));
                    w.write_record(&rec)?;
                }
                Task::Stereo => {
                    for (name, pick) in METRICS {
                        let get = |s: &Score| s.dense().map(pick);
                        let mut rec = vec![format!("{}/{name}", row.defense), fmt(get(&row.natural))];
                        rec.extend(row.attacks.iter().map(|s| fmt(get(s))));
                        rec.push(fmt(row.ensemble.as_ref().and_then(get)));
                        w.write_record(&rec)?;
                    }
                }
            }
        }
        for row in &self.error_reduced {
            for (name, pick) in METRICS {
                let mut rec = vec![format!("{}/error_reduced_{name}", row.defense), fmt(Some(pick(row.natural)))];
                rec.extend(row.attacks.iter().map(|m| fmt(Some(pick(*m)))));
                rec.push(fmt(row.ensemble.map(pick)));
                w.write_record(&rec)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Integrity(e.to_string()))
    }

    /// Writes CSV for a `.csv` path and JSON otherwise, atomically.
    pub fn emit(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => self.to_csv()?,
            _ => self.to_json()?,
        };
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

type MetricPick = fn(StereoMetrics) -> f64;

const METRICS: [(&str, MetricPick); 3] = [("mae", |m| m.mae), ("rmse", |m| m.rmse), ("d1", |m| m.d1)];

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ReportMeta {
        ReportMeta {
            seed: 1,
            sample_count: 3,
            config_hash: "abc".into(),
            timings: vec![Timing {
                stage: "attack".into(),
                seconds: 1.5,
                steps: Some(20),
                samples: Some(3),
            }],
        }
    }

    fn fixture() -> ExperimentReport {
        let c = |v: &[bool]| Outcomes::Correct(v.to_vec());
        let rows = vec![
            ReportRow::from_outcomes(
                "none".into(),
                vec![c(&[true, true, true]), c(&[true, true, false]), c(&[true, false, true])],
            )
            .unwrap(),
            ReportRow::from_outcomes(
                "sr_d1@block2".into(),
                vec![c(&[true, true, true]), c(&[true, true, true]), c(&[false, true, true])],
            )
            .unwrap(),
        ];
        ExperimentReport::new(Task::Classification, vec!["fgsm".into(), "pgd20".into()], rows, meta()).unwrap()
    }

    #[test]
    fn ensemble_from_flags() {
        let r = fixture();
        assert_eq!(r.rows[0].ensemble, Some(Score::Accuracy(1.0 / 3.0)));
        r.check_invariants().unwrap();
    }

    #[test]
    fn csv_header_and_hash() {
        let r = fixture();
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), "defense,natural,fgsm,pgd20,ensemble");
        let mut r2 = r.clone();
        r2.meta.timings[0].seconds = 99.0;
        assert_eq!(r.content_hash(), r2.content_hash());
        r2.meta.seed = 2;
        assert_ne!(r.content_hash(), r2.content_hash());
    }

    #[test]
    fn tampered_row_detected() {
        let mut r = fixture();
        r.rows[0].ensemble = Some(Score::Accuracy(0.9));
        assert!(r.check_invariants().is_err());
    }
}
