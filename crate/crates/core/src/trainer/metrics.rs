//! Line-delimited JSON metrics stream: one config header record, one
//! record per SFT epoch, and one record per RL step.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::TrainError;

/// Per-step training metrics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub loss_contrast: f64,
    pub mean_terminal_reward: f64,
    pub frac_correct: f64,
    pub frac_extractable: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricsRecord {
    Config { config: serde_json::Value },
    SftEpoch { epoch: usize, mean_loss: f64 },
    SftEval { accuracy: f64 },
    RlStep(StepMetrics),
}

pub struct MetricsWriter<W: Write> {
    sink: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(sink: W) -> Self {
        Self { sink }
    }

    pub fn record(&mut self, record: &MetricsRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(record)
            .map_err(|e| TrainError::BadConfig(format!("metrics serialization: {e}")))?;
        writeln!(self.sink, "{line}")?;
        Ok(())
    }

    /// Echoes the fully resolved configuration as the header record.
    pub fn config<T: Serialize>(&mut self, config: &T) -> Result<(), TrainError> {
        let value = serde_json::to_value(config)
            .map_err(|e| TrainError::BadConfig(format!("config serialization: {e}")))?;
        self.record(&MetricsRecord::Config { config: value })
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.sink.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

/// Parses a metrics stream back into records, skipping blank lines.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>, TrainError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| TrainError::BadConfig(format!("metrics line {l:?}: {e}")))
        })
        .collect()
}
