//! Per-round measurements, run summaries and run comparisons.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::UncertaintyRecord;

pub const CSV_HEADER: &str = "round,accuracy,uploads_images,uploads_bytes,params_bytes,mean_alpha";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub accuracy: f64,
    pub uploads_images: u64,
    pub uploads_bytes: u64,
    pub params_bytes_exchanged: u64,
    pub selected_edges: Vec<usize>,
    /// Mean uncertainty over every image scored this round.
    pub mean_alpha: f64,
    /// Images held by the clients that took part this round; the
    /// denominator of the upload ratio.
    pub candidate_images: u64,
}

impl RoundMetrics {
    pub fn upload_ratio(&self) -> f64 {
        if self.candidate_images == 0 {
            0.0
        } else {
            self.uploads_images as f64 / self.candidate_images as f64
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.round,
            self.accuracy,
            self.uploads_images,
            self.uploads_bytes,
            self.params_bytes_exchanged,
            self.mean_alpha
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_id: usize,
    pub record: UncertaintyRecord,
}

/// Collects the rounds of one run, optionally streaming them as CSV.
pub struct MetricsSink {
    rounds: Vec<RoundMetrics>,
    uncertainty: Vec<RoundRecord>,
    csv: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for MetricsSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricsSink")
            .field("rounds", &self.rounds.len())
            .field("uncertainty", &self.uncertainty.len())
            .field("csv", &self.csv.is_some())
            .finish()
    }
}

impl Default for MetricsSink {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl MetricsSink {
    pub fn in_memory() -> Self {
        Self {
            rounds: Vec::new(),
            uncertainty: Vec::new(),
            csv: None,
        }
    }

    /// Writes the CSV header immediately and one flushed row per round.
    pub fn with_csv(mut writer: Box<dyn Write + Send>) -> Result<Self> {
        writeln!(writer, "{CSV_HEADER}")?;
        writer.flush()?;
        Ok(Self {
            rounds: Vec::new(),
            uncertainty: Vec::new(),
            csv: Some(writer),
        })
    }

    pub fn record_round(&mut self, m: RoundMetrics) -> Result<()> {
        if let Some(last) = self.rounds.last() {
            if m.round <= last.round {
                return Err(Error::invalid(format!(
                    "round {} recorded after round {}",
                    m.round, last.round
                )));
            }
        }
        if let Some(w) = self.csv.as_mut() {
            writeln!(w, "{}", m.csv_row())?;
            w.flush()?;
        }
        self.rounds.push(m);
        Ok(())
    }

    pub fn record_uncertainty(
        &mut self,
        round: usize,
        client_id: usize,
        records: impl IntoIterator<Item = UncertaintyRecord>,
    ) {
        self.uncertainty.extend(records.into_iter().map(|record| RoundRecord {
            round,
            client_id,
            record,
        }));
    }

    pub fn rounds(&self) -> &[RoundMetrics] {
        &self.rounds
    }

    pub fn uncertainty(&self) -> &[RoundRecord] {
        &self.uncertainty
    }

    pub fn into_rounds(self) -> Vec<RoundMetrics> {
        self.rounds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub target: f64,
    /// 0 for a run with no rounds.
    pub best_accuracy: f64,
    pub best_round: Option<usize>,
    /// First round whose accuracy reaches `target`; `None` if never reached.
    pub rounds_to_target: Option<usize>,
    pub rounds_executed: usize,
    pub total_uploaded_images: u64,
    pub total_candidate_images: u64,
    pub total_upload_ratio: f64,
}

pub fn summarize(rounds: &[RoundMetrics], target: f64) -> RunSummary {
    let mut best_accuracy = 0.0;
    let mut best_round = None;
    for m in rounds {
        if best_round.is_none() || m.accuracy > best_accuracy {
            best_accuracy = m.accuracy;
            best_round = Some(m.round);
        }
    }
    let rounds_to_target = rounds.iter().find(|m| m.accuracy >= target).map(|m| m.round);
    let total_uploaded_images: u64 = rounds.iter().map(|m| m.uploads_images).sum();
    let total_candidate_images: u64 = rounds.iter().map(|m| m.candidate_images).sum();
    let total_upload_ratio = if total_candidate_images == 0 {
        0.0
    } else {
        total_uploaded_images as f64 / total_candidate_images as f64
    };
    RunSummary {
        target,
        best_accuracy,
        best_round,
        rounds_to_target,
        rounds_executed: rounds.len(),
        total_uploaded_images,
        total_candidate_images,
        total_upload_ratio,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}({:.4})", self.mean, self.std)
    }
}

/// Statistics over several seeds of the same configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub runs: usize,
    pub target: f64,
    pub best_accuracy: Option<MeanStd>,
    /// Over the runs that reached the target only.
    pub rounds_to_target: Option<MeanStd>,
    pub reached: usize,
    /// Rounds-to-target with unreached runs censored at their round count.
    pub median_rounds: Option<f64>,
    pub upload_ratio: Option<MeanStd>,
}

pub fn aggregate_seeds(summaries: &[RunSummary]) -> SeedAggregate {
    let target = summaries.first().map_or(0.0, |s| s.target);
    let best: Vec<f64> = summaries.iter().map(|s| s.best_accuracy).collect();
    let reached: Vec<f64> = summaries
        .iter()
        .filter_map(|s| s.rounds_to_target.map(|r| r as f64))
        .collect();
    let ratio: Vec<f64> = summaries.iter().map(|s| s.total_upload_ratio).collect();
    SeedAggregate {
        runs: summaries.len(),
        target,
        best_accuracy: MeanStd::of(&best),
        rounds_to_target: MeanStd::of(&reached),
        reached: reached.len(),
        median_rounds: median(&censored_rounds(summaries)),
        upload_ratio: MeanStd::of(&ratio),
    }
}

fn censored_rounds(summaries: &[RunSummary]) -> Vec<f64> {
    summaries
        .iter()
        .map(|s| s.rounds_to_target.unwrap_or(s.rounds_executed) as f64)
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

/// How far a round reduction computed from censored medians can be trusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionBound {
    /// Every run on both sides reached the target.
    Exact,
    /// Only baseline runs missed the target; the true reduction is at least this.
    LowerBound,
    /// Only candidate runs missed the target; the true reduction is at most this.
    UpperBound,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub target: f64,
    pub candidate: SeedAggregate,
    pub baseline: SeedAggregate,
    pub candidate_not_reached: usize,
    pub baseline_not_reached: usize,
    /// `1 - median_candidate / median_baseline`.
    pub round_reduction: Option<f64>,
    pub reduction_bound: ReductionBound,
}

/// Compares candidate runs `a` against baseline runs `b`.
pub fn compare_runs(a: &[RunSummary], b: &[RunSummary]) -> Result<Comparison> {
    let targets: Vec<f64> = a.iter().chain(b).map(|s| s.target).collect();
    let target = targets.first().copied().unwrap_or(0.0);
    if targets.iter().any(|&t| t != target) {
        return Err(Error::invalid("compared runs use different target accuracies"));
    }
    let candidate = aggregate_seeds(a);
    let baseline = aggregate_seeds(b);
    let candidate_not_reached = a.len() - candidate.reached;
    let baseline_not_reached = b.len() - baseline.reached;
    let round_reduction = match (candidate.median_rounds, baseline.median_rounds) {
        (Some(ma), Some(mb)) if ma == mb => Some(0.0),
        (Some(ma), Some(mb)) if mb > 0.0 => Some(1.0 - ma / mb),
        _ => None,
    };
    let reduction_bound = match (candidate_not_reached > 0, baseline_not_reached > 0) {
        (false, false) => ReductionBound::Exact,
        (false, true) => ReductionBound::LowerBound,
        (true, false) => ReductionBound::UpperBound,
        (true, true) => ReductionBound::Indeterminate,
    };
    Ok(Comparison {
        target,
        candidate,
        baseline,
        candidate_not_reached,
        baseline_not_reached,
        round_reduction,
        reduction_bound,
    })
}
