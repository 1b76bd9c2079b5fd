use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ledger::{AllocationLedger, PeakBytes};

/// Metrics of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// `2n` for a zeroth-order step with `n` probes; 1 (one forward plus one
    /// backward) for a derivative step.
    pub loss_evaluations: usize,
    pub elapsed_ms: f64,
    /// Ledger high-water marks observed during the step.
    pub peak: PeakBytes,
}

/// Opens a ledger window and a monotonic clock for one step.
pub(crate) struct StepTimer<'a> {
    ledger: &'a AllocationLedger,
    start: Instant,
}

impl<'a> StepTimer<'a> {
    pub(crate) fn start(ledger: &'a AllocationLedger) -> Self {
        ledger.begin_window();
        Self { ledger, start: Instant::now() }
    }

    pub(crate) fn finish(self, step: usize, loss: f64, loss_evaluations: usize) -> StepRecord {
        let elapsed = self.start.elapsed();
        StepRecord {
            step,
            loss,
            loss_evaluations,
            elapsed_ms: elapsed.as_micros() as f64 / 1000.0,
            peak: self.ledger.window_peaks(),
        }
    }
}
