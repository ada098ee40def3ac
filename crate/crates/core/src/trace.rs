//! Run traces: per-event rows, model snapshots, and CSV output.
//!
//! Synchronous engines log a row at every aggregation boundary plus a start
//! row and a final row; the event-driven engine logs one row per completion
//! event. The CSV schema is
//!
//! ```text
//! k,wall_clock_s,global_loss,test_acc,max_cluster_deviation,event
//! ```
//!
//! with three extra columns for event-driven runs:
//!
//! ```text
//! ...,trigger_cluster,max_gap,theta_bar
//! ```
//!
//! Numbers are written with the shortest representation that round-trips;
//! absent optionals are empty cells.

use crate::numerics::DenseMatrix;
use std::io::Write;

/// What produced a trace row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Initial state before any iteration.
    Start,
    /// Intra-cluster aggregation boundary.
    Intra,
    /// Inter-cluster aggregation (gossip or cloud) boundary.
    Inter,
    /// Completion event of one cluster in the event-driven engine.
    Async,
    /// Final state after the closing consensus phase.
    Final,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Start => "start",
            EventKind::Intra => "intra",
            EventKind::Inter => "inter",
            EventKind::Async => "async",
            EventKind::Final => "final",
        }
    }
}

/// One logged point of a run.
#[derive(Debug, Clone)]
pub struct TraceRow {
    /// Iteration count (synchronous) or event index (event-driven).
    pub k: usize,
    /// Simulated seconds elapsed.
    pub wall_clock_s: f64,
    /// Training loss of the weighted global model.
    pub global_loss: f64,
    /// Accuracy on the held-out set, when one was supplied.
    pub test_acc: Option<f64>,
    /// Largest pairwise distance between cluster models.
    pub max_cluster_deviation: f64,
    pub event: EventKind,
    /// Cluster whose completion triggered the event (event-driven only).
    pub trigger_cluster: Option<usize>,
    /// Largest iteration gap in the trigger's neighborhood (event-driven only).
    pub max_gap: Option<usize>,
    /// Data-weighted mean local-update count at the event (event-driven only).
    pub theta_bar: Option<f64>,
}

impl TraceRow {
    /// A synchronous-engine row (no event-driven columns).
    pub fn sync(
        k: usize,
        wall_clock_s: f64,
        global_loss: f64,
        test_acc: Option<f64>,
        max_cluster_deviation: f64,
        event: EventKind,
    ) -> Self {
        TraceRow {
            k,
            wall_clock_s,
            global_loss,
            test_acc,
            max_cluster_deviation,
            event,
            trigger_cluster: None,
            max_gap: None,
            theta_bar: None,
        }
    }
}

/// Complete record of one run.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    /// Consensus global model at the end of the run.
    pub final_params: Vec<f64>,
    /// Per-iteration client-model snapshots (iteration 0 first), recorded
    /// only when the run was configured to keep them. Event-driven runs
    /// snapshot the cluster models after each event instead.
    pub model_snapshots: Vec<DenseMatrix>,
    /// Total simulated run time in seconds.
    pub total_time_s: f64,
    /// Largest iteration gap observed across all clusters at any event
    /// (event-driven runs only).
    pub peak_gap: Option<usize>,
}

impl RunTrace {
    /// Final logged training loss.
    pub fn final_loss(&self) -> f64 {
        self.rows.last().map(|r| r.global_loss).unwrap_or(f64::NAN)
    }

    /// Final logged held-out accuracy, if accuracy was evaluated.
    pub fn final_acc(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.test_acc)
    }

    /// Earliest simulated time at which the logged loss reached `target`,
    /// if it ever did.
    pub fn time_to_target(&self, target: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.global_loss <= target)
            .map(|r| r.wall_clock_s)
    }

    /// Writes the trace as CSV. `event_driven` switches to the wider schema
    /// with trigger/gap/update columns.
    pub fn write_csv<W: Write>(&self, out: &mut W, event_driven: bool) -> std::io::Result<()> {
        if event_driven {
            writeln!(
                out,
                "k,wall_clock_s,global_loss,test_acc,max_cluster_deviation,event,trigger_cluster,max_gap,theta_bar"
            )?;
        } else {
            writeln!(out, "k,wall_clock_s,global_loss,test_acc,max_cluster_deviation,event")?;
        }
        for row in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{}",
                row.k,
                row.wall_clock_s,
                row.global_loss,
                opt_cell(row.test_acc),
                row.max_cluster_deviation,
                row.event.as_str()
            )?;
            if event_driven {
                write!(
                    out,
                    ",{},{},{}",
                    opt_usize_cell(row.trigger_cluster),
                    opt_usize_cell(row.max_gap),
                    opt_cell(row.theta_bar)
                )?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_usize_cell(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
