//! Per-iteration metrics emission.
//!
//! The engine reports one [`IterRecord`] per inference iteration through a
//! [`MetricsSink`]; the CLI's CSV writer and the test suites both implement
//! this trait. [`NullSink`] discards everything for callers that only want
//! the final posterior.

/// One row of the training/inference metrics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    /// 0-based iteration index within the current batch/run.
    pub iteration: usize,
    /// Total graph energy Σ_j E_j(x₀) + prior energy at the current
    /// linearization points.
    pub energy: f64,
    /// Largest absolute change of any belief mean during this iteration.
    pub max_belief_delta: f64,
    /// Wall-clock milliseconds spent on this iteration.
    pub wall_ms: f64,
}

/// Receiver for engine progress.
pub trait MetricsSink {
    /// A new batch (outer unit of work) begins; `batch_index` is 0-based.
    fn batch_start(&mut self, batch_index: usize) {
        let _ = batch_index;
    }
    /// One inference iteration finished.
    fn iteration(&mut self, record: IterRecord);
}

/// Discards all metrics.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn iteration(&mut self, _record: IterRecord) {}
}

/// Buffers all records in memory; used by tests and by callers that
/// post-process the trace (e.g. convergence plots).
#[derive(Debug, Default, Clone)]
pub struct VecSink {
    /// `(batch_index, record)` in emission order.
    pub records: Vec<(usize, IterRecord)>,
    batch: usize,
}

impl MetricsSink for VecSink {
    fn batch_start(&mut self, batch_index: usize) {
        self.batch = batch_index;
    }
    fn iteration(&mut self, record: IterRecord) {
        self.records.push((self.batch, record));
    }
}
