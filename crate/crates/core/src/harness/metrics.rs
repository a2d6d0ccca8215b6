use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Per-episode record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub phase: String,
    pub epoch: usize,
    pub episode: usize,
    pub steps: usize,
    #[serde(rename = "return")]
    pub return_: f64,
    /// Σ costs / Σ steps.
    pub cost_rate: f64,
    pub shield_trigger_rate: f64,
    pub safe_set_empty_rate: f64,
    pub acp_miss_rate: f64,
    /// Mean of the finite radii used by the shield; `None` if there were none.
    pub mean_gamma: Option<f64>,
    pub wall_clock_seconds: f64,
}

/// Per-epoch aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub total_steps: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_cost_rate: f64,
    pub mean_episode_cost: f64,
    pub shield_trigger_rate: f64,
    pub lambda: f64,
    pub policy_kl: f64,
    pub clip_fraction: f64,
    pub policy_epochs: usize,
    pub loss_v_r: f64,
    pub loss_v_c: f64,
    /// Only on the safety-regularized path.
    pub loss_q_c: Option<f64>,
    pub mean_q_safe: Option<f64>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Header {
        format: String,
        version: u32,
        seed: u64,
        config: String,
    },
    Episode(EpisodeMetrics),
    Epoch(EpochMetrics),
}

impl MetricsRecord {
    /// Copy with every timing field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        match &mut r {
            Self::Episode(e) => e.wall_clock_seconds = 0.0,
            Self::Epoch(e) => e.wall_clock_seconds = 0.0,
            Self::Header { .. } => {}
        }
        r
    }

    /// Copy with timing and safety-regularizer-only fields cleared: what the
    /// plain Lagrangian and the `α = 0` regularized paths must agree on.
    pub fn base_fields(&self) -> Self {
        let mut r = self.without_timing();
        match &mut r {
            Self::Epoch(e) => {
                e.loss_q_c = None;
                e.mean_q_safe = None;
            }
            Self::Header { config, .. } => config.clear(),
            Self::Episode(_) => {}
        }
        r
    }
}

/// Line-delimited JSON sink.
pub struct MetricsWriter {
    out: Option<Box<dyn Write>>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsWriter {
    /// Keeps records in memory only.
    pub fn memory() -> Self {
        Self {
            out: None,
            records: Vec::new(),
        }
    }

    pub fn to_writer(out: Box<dyn Write>) -> Self {
        Self {
            out: Some(out),
            records: Vec::new(),
        }
    }

    pub fn emit(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            out.flush()?;
        }
        Ok(())
    }
}

/// Parses a metrics file back into records.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
