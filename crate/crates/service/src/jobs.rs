//! Background job queue: one worker thread, jobs run strictly one at a time.

use std::collections::BTreeMap;
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Train,
    Infer,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub kind: JobKind,
    pub state: JobState,
    /// Fraction complete in [0, 1].
    pub progress: f64,
    pub result: Option<String>,
    pub error: Option<String>,
}

/// Handle a running job uses to report progress.
#[derive(Clone)]
pub struct Progress {
    id: u64,
    table: Arc<Mutex<BTreeMap<u64, JobStatus>>>,
}

impl Progress {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn set(&self, fraction: f64) {
        if let Some(job) = self.table.lock().expect("job table poisoned").get_mut(&self.id) {
            job.progress = fraction.clamp(0.0, 1.0);
        }
    }
}

type Work = Box<dyn FnOnce(&Progress) -> anyhow::Result<String> + Send>;

pub struct JobQueue {
    table: Arc<Mutex<BTreeMap<u64, JobStatus>>>,
    next_id: Mutex<u64>,
    tx: Mutex<Sender<(u64, Work)>>,
}

impl Default for JobQueue {
    fn default() -> Self {
        Self::new()
    }
}

impl JobQueue {
    pub fn new() -> Self {
        let table: Arc<Mutex<BTreeMap<u64, JobStatus>>> = Arc::default();
        let (tx, rx) = channel::<(u64, Work)>();
        let worker_table = Arc::clone(&table);
        thread::spawn(move || {
            for (id, work) in rx {
                set_state(&worker_table, id, JobState::Running, None, None);
                let progress = Progress { id, table: Arc::clone(&worker_table) };
                let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| work(&progress)));
                match outcome {
                    Ok(Ok(result)) => {
                        progress.set(1.0);
                        set_state(&worker_table, id, JobState::Done, Some(result), None);
                    }
                    Ok(Err(e)) => set_state(&worker_table, id, JobState::Failed, None, Some(format!("{e:#}"))),
                    Err(_) => set_state(&worker_table, id, JobState::Failed, None, Some("job panicked".into())),
                }
            }
        });
        Self { table, next_id: Mutex::new(1), tx: Mutex::new(tx) }
    }

    pub fn submit(&self, kind: JobKind, work: impl FnOnce(&Progress) -> anyhow::Result<String> + Send + 'static) -> JobStatus {
        let id = {
            let mut next = self.next_id.lock().expect("job counter poisoned");
            let id = *next;
            *next += 1;
            id
        };
        let status = JobStatus { id, kind, state: JobState::Queued, progress: 0.0, result: None, error: None };
        self.table.lock().expect("job table poisoned").insert(id, status.clone());
        if self.tx.lock().expect("job sender poisoned").send((id, Box::new(work))).is_err() {
            set_state(&self.table, id, JobState::Failed, None, Some("job worker is gone".into()));
        }
        status
    }

    pub fn get(&self, id: u64) -> Option<JobStatus> {
        self.table.lock().expect("job table poisoned").get(&id).cloned()
    }

    pub fn all(&self) -> Vec<JobStatus> {
        self.table.lock().expect("job table poisoned").values().cloned().collect()
    }
}

fn set_state(
    table: &Mutex<BTreeMap<u64, JobStatus>>,
    id: u64,
    state: JobState,
    result: Option<String>,
    error: Option<String>,
) {
    if let Some(job) = table.lock().expect("job table poisoned").get_mut(&id) {
        job.state = state;
        job.result = result.or(job.result.take());
        job.error = error.or(job.error.take());
    }
}
