//! Four-stage collaborative annotation protocol as an event-sourced state
//! machine: seed training and champion choice, review rounds over model
//! proposals, six-way proposal selection, and final verification sampling.

mod engine;
mod sim;
mod state;
mod store;

pub use engine::Workflow;
pub use sim::{simulate, SimConfig};
pub use state::{
    apply, replay, Decision, Event, EventRecord, ItemStatus, NewItem, ProposalRef, Progress, RetrainJob, ReviewItem,
    Stage, Stage3Choice, StatusStamp, WorkflowConfig, WorkflowState,
};
pub use store::{Clock, DirMaskStore, EventLog, ManualClock, MaskStore, MemoryMaskStore, Snapshot, SystemClock};

use crate::error::{Error, Result};

/// Index of the highest score; ties go to the lower index.
pub fn argmax_first(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Usage("no candidates to select from".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(Error::Usage(format!("score {i} is NaN")));
        }
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}
