use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use super::state::{
    apply, Decision, Event, EventRecord, ItemStatus, NewItem, ProposalRef, RetrainJob, ReviewItem, Stage, Stage3Choice,
    WorkflowConfig, WorkflowState,
};
use super::store::{Clock, EventLog, MaskStore, Snapshot};
use super::argmax_first;
use crate::error::{Error, Result};
use crate::io::Class;
use crate::mask::BinaryMask;
use crate::rng::stream;

/// Single-writer workflow engine. Every mutation is one appended event;
/// the state is always the fold of the log.
pub struct Workflow {
    state: WorkflowState,
    log: Vec<EventRecord>,
    sink: Option<EventLog>,
    store: Box<dyn MaskStore>,
    clock: Box<dyn Clock>,
}

impl std::fmt::Debug for Workflow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workflow").field("stage", &self.state.stage).field("events", &self.log.len()).finish()
    }
}

impl Workflow {
    /// Fresh engine with an in-memory log.
    pub fn new(config: WorkflowConfig, store: Box<dyn MaskStore>, clock: Box<dyn Clock>) -> Self {
        Self { state: WorkflowState::new(config), log: Vec::new(), sink: None, store, clock }
    }

    /// Engine backed by a log file; existing events are replayed.
    pub fn open(
        config: WorkflowConfig,
        log_path: impl AsRef<Path>,
        store: Box<dyn MaskStore>,
        clock: Box<dyn Clock>,
    ) -> Result<Self> {
        let (sink, records) = EventLog::open(log_path)?;
        let mut wf = Self::new(config, store, clock);
        for rec in &records {
            apply(&mut wf.state, rec)?;
        }
        wf.log = records;
        wf.sink = Some(sink);
        Ok(wf)
    }

    /// Restores from a snapshot plus the log records that follow it.
    pub fn from_snapshot(
        snapshot: Snapshot,
        log_path: impl AsRef<Path>,
        store: Box<dyn MaskStore>,
        clock: Box<dyn Clock>,
    ) -> Result<Self> {
        let (sink, records) = EventLog::open(log_path)?;
        let mut state = snapshot.state;
        let start = state.last_seq;
        for rec in records.iter().filter(|r| r.seq > start) {
            apply(&mut state, rec)?;
        }
        Ok(Self { state, log: records, sink: Some(sink), store, clock })
    }

    pub fn state(&self) -> &WorkflowState {
        &self.state
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.log
    }

    pub fn store(&self) -> &dyn MaskStore {
        self.store.as_ref()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { state: self.state.clone() }
    }

    pub fn item(&self, id: &str) -> Result<&ReviewItem> {
        self.state.item(id)
    }

    pub fn mask(&self, key: &str) -> Result<BinaryMask> {
        self.store.get(key)
    }

    fn next_seq(&self) -> u64 {
        self.state.last_seq + 1
    }

    fn commit(&mut self, event: Event) -> Result<u64> {
        let rec = EventRecord { seq: self.next_seq(), at_ms: self.clock.now_ms(), event };
        apply(&mut self.state, &rec)?;
        if let Some(sink) = &mut self.sink {
            sink.append(&rec)?;
        }
        let seq = rec.seq;
        self.log.push(rec);
        Ok(seq)
    }

    fn require_stage(&self, op: &str, stage: Stage) -> Result<()> {
        if self.state.stage != stage {
            return Err(Error::state(format!("{op} is not allowed in stage {:?}", self.state.stage)));
        }
        Ok(())
    }

    pub fn add_items(&mut self, items: Vec<NewItem>) -> Result<()> {
        self.commit(Event::ItemsAdded { items }).map(drop)
    }

    /// Records masks that exist before any review (public seed sets).
    pub fn register_seed_masks(&mut self, ids: Vec<String>) -> Result<()> {
        self.commit(Event::SeedMasksRegistered { ids }).map(drop)
    }

    pub fn register_candidate(&mut self, model: impl Into<String>) -> Result<()> {
        self.commit(Event::CandidateRegistered { model: model.into() }).map(drop)
    }

    /// Picks the Stage I champion by mean validation DSC; ties go to the
    /// earlier-registered candidate.
    pub fn stage1_select(&mut self, dsc: &[(String, f64)]) -> Result<String> {
        self.require_stage("stage I selection", Stage::I)?;
        if self.state.candidates.is_empty() {
            return Err(Error::Usage("no candidates registered".into()));
        }
        let by_name: BTreeMap<&str, f64> = dsc.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let scores = self
            .state
            .candidates
            .iter()
            .map(|c| by_name.get(c.as_str()).copied().ok_or_else(|| Error::Usage(format!("no score for `{c}`"))))
            .collect::<Result<Vec<f64>>>()?;
        let model = self.state.candidates[argmax_first(&scores)?].clone();
        self.commit(Event::ChampionSelected { model: model.clone(), scores })?;
        Ok(model)
    }

    pub fn advance_stage(&mut self) -> Result<Stage> {
        let to = self.state.stage.next().ok_or_else(|| Error::state("already in the final stage"))?;
        self.commit(Event::StageAdvanced { to })?;
        Ok(to)
    }

    /// Draws the next Stage II round and attaches a model proposal to each
    /// item. An empty result means the pool or the budget is exhausted.
    pub fn next_batch(&mut self, mut propose: impl FnMut(&ReviewItem) -> Result<BinaryMask>) -> Result<Vec<String>> {
        self.require_stage("next_batch", Stage::II)?;
        if self.state.batch_open {
            return Err(Error::State { message: "previous round not finalized".into(), ids: self.state.batch.clone() });
        }
        let cfg = &self.state.config;
        let mut pool: Vec<String> = self.state.pool().iter().map(|it| it.id.clone()).collect();
        let n = cfg.batch_size.min(pool.len()).min(cfg.stage2_budget.saturating_sub(self.state.stage2_drawn));
        if n == 0 {
            return Ok(Vec::new());
        }
        let round = self.state.round;
        pool.shuffle(&mut stream(cfg.seed, &[0x62_6174_6368, round as u64]));
        pool.truncate(n);
        let proposals = self.propose_all(&pool, round, &mut propose)?;
        self.commit(Event::BatchStarted { round, proposals, rerouted: false })?;
        Ok(pool)
    }

    fn propose_all(
        &mut self,
        ids: &[String],
        round: u32,
        propose: &mut impl FnMut(&ReviewItem) -> Result<BinaryMask>,
    ) -> Result<Vec<ProposalRef>> {
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let mask = propose(self.state.item(id)?)?;
            let key = format!("{id}/r{round}-proposal");
            self.store.put(&key, &mask)?;
            out.push(ProposalRef { id: id.clone(), mask: key });
        }
        Ok(out)
    }

    pub fn submit_decision(
        &mut self,
        id: &str,
        decision: Decision,
        edited: Option<&BinaryMask>,
        reviewer: &str,
    ) -> Result<&ReviewItem> {
        // Cheap guards first so a rejected decision never writes a mask.
        let item = self.state.item(id)?;
        if item.status.is_terminal() {
            return Err(Error::state(format!("item `{id}` is already {}", item.status.as_str())));
        }
        let mask = match edited {
            Some(m) => {
                let key = format!("{id}/{:06}-edit", self.next_seq());
                self.check_dims(id, m)?;
                self.store.put(&key, m)?;
                Some(key)
            }
            None => None,
        };
        self.commit(Event::DecisionSubmitted { id: id.into(), decision, reviewer: reviewer.into(), mask })?;
        self.state.item(id)
    }

    fn check_dims(&self, id: &str, m: &BinaryMask) -> Result<()> {
        let item = self.state.item(id)?;
        if let Some(reference) = item.mask.as_ref().or(item.proposals.first()) {
            if let Ok(r) = self.store.get(reference) {
                if r.dims() != m.dims() {
                    return Err(Error::dim("mask", format!("edited mask {:?} vs proposal {:?}", m.dims(), r.dims())));
                }
            }
        }
        Ok(())
    }

    /// True when `decision` (with `edited`) repeats what finished the item.
    pub fn is_duplicate_decision(&self, id: &str, decision: Decision, edited: Option<&BinaryMask>) -> bool {
        let Ok(item) = self.state.item(id) else { return false };
        if !item.status.is_terminal() || item.last_decision != Some(decision) {
            return false;
        }
        match (edited, decision) {
            (None, Decision::Accept | Decision::Exclude | Decision::Unsure) => true,
            (Some(m), Decision::Reject) => {
                item.final_mask.as_ref().and_then(|k| self.store.get(k).ok()).is_some_and(|stored| &stored == m)
            }
            _ => false,
        }
    }

    pub fn md_resolve(&mut self, id: &str, note: &str, adjusted: &BinaryMask, reviewer: &str) -> Result<&ReviewItem> {
        let item = self.state.item(id)?;
        if item.status != ItemStatus::UnsurePendingMd {
            return Err(Error::state(format!("item `{id}` is {}, not awaiting MD review", item.status.as_str())));
        }
        self.check_dims(id, adjusted)?;
        let key = format!("{id}/{:06}-md", self.next_seq());
        self.store.put(&key, adjusted)?;
        self.commit(Event::MdResolved { id: id.into(), note: note.into(), mask: key, reviewer: reviewer.into() })?;
        self.state.item(id)
    }

    /// Closes the open round and emits a retraining job over the repository.
    pub fn finalize_round(&mut self) -> Result<RetrainJob> {
        let job = RetrainJob {
            round: self.state.round,
            model: self.state.champion.clone(),
            dataset: self.state.repository.iter().cloned().collect(),
            fine_tune: self.state.config.fine_tune,
        };
        self.commit(Event::RoundFinalized { job: job.clone() })?;
        Ok(job)
    }

    pub fn stage3_register(&mut self, models: Vec<String>) -> Result<()> {
        self.commit(Event::Stage3ModelsRegistered { models }).map(drop)
    }

    /// Attaches one proposal per registered model (in registry order) to each
    /// listed item. Returns the number of masks stored.
    pub fn stage3_propose(
        &mut self,
        ids: &[String],
        mut propose: impl FnMut(&ReviewItem, usize) -> Result<BinaryMask>,
    ) -> Result<usize> {
        self.require_stage("stage III proposals", Stage::III)?;
        let n_models = self.state.stage3_models.len();
        if n_models != self.state.config.stage3_models {
            return Err(Error::Config(format!(
                "stage III needs exactly {} registered models, have {n_models}",
                self.state.config.stage3_models
            )));
        }
        let mut unique = std::collections::BTreeSet::new();
        for id in ids {
            let item = self.state.item(id)?;
            if item.status != ItemStatus::Pending || item.round.is_some() || !unique.insert(id.as_str()) {
                return Err(Error::state(format!("item `{id}` is not unannotated")));
            }
        }
        let mut stored = 0;
        for id in ids {
            let mut masks = Vec::with_capacity(n_models);
            for m in 0..n_models {
                let mask = propose(self.state.item(id)?, m)?;
                let key = format!("{id}/s3-m{}", m + 1);
                self.store.put(&key, &mask)?;
                masks.push(key);
            }
            stored += masks.len();
            self.commit(Event::Stage3Proposed { id: id.clone(), masks })?;
        }
        Ok(stored)
    }

    pub fn stage3_select(&mut self, id: &str, choice: Stage3Choice, reviewer: &str) -> Result<&ReviewItem> {
        self.commit(Event::Stage3Selected { id: id.into(), choice, reviewer: reviewer.into() })?;
        self.state.item(id)
    }

    /// Most-selected Stage III model; ties go to the lower registry index.
    pub fn stage3_champion(&mut self) -> Result<String> {
        self.require_stage("stage III champion", Stage::III)?;
        if self.state.stage3_selections == 0 {
            return Err(Error::Usage("no stage III selections recorded".into()));
        }
        let scores: Vec<f64> = self.state.tallies.iter().map(|&t| t as f64).collect();
        let model = self.state.stage3_models[argmax_first(&scores)?].clone();
        self.commit(Event::ChampionSelected { model: model.clone(), scores })?;
        Ok(model)
    }

    /// Sends denied Stage III items back through one manual review round
    /// with proposals from the current champion. Each item is re-routed once.
    pub fn reroute_denied(&mut self, mut propose: impl FnMut(&ReviewItem) -> Result<BinaryMask>) -> Result<Vec<String>> {
        self.require_stage("re-routing denied items", Stage::III)?;
        if self.state.batch_open {
            return Err(Error::State { message: "previous round not finalized".into(), ids: self.state.batch.clone() });
        }
        let ids: Vec<String> = self
            .state
            .items
            .values()
            .filter(|it| it.status == ItemStatus::Denied && !it.rerouted)
            .map(|it| it.id.clone())
            .collect();
        if ids.is_empty() {
            return Ok(ids);
        }
        let round = self.state.round;
        let proposals = self.propose_all(&ids, round, &mut propose)?;
        self.commit(Event::BatchStarted { round, proposals, rerouted: true })?;
        Ok(ids)
    }

    /// Class-stratified seeded draw of `round(verify_fraction · N)` finished
    /// items for MD verification, apportioned by largest remainder.
    pub fn stage4_sample(&mut self) -> Result<Vec<String>> {
        self.require_stage("verification sampling", Stage::IV)?;
        let missing = self.state.missing_from_repository();
        if !missing.is_empty() {
            return Err(Error::State {
                message: format!("repository incomplete: {} items missing", missing.len()),
                ids: missing.iter().map(|s| s.to_string()).collect(),
            });
        }
        let mut by_class: BTreeMap<Class, Vec<String>> = BTreeMap::new();
        for it in self.state.items.values().filter(|it| it.status.has_final_mask()) {
            by_class.entry(it.class).or_default().push(it.id.clone());
        }
        let counts: Vec<usize> = by_class.values().map(Vec::len).collect();
        let quotas = largest_remainder(&counts, self.state.config.verify_fraction);
        let mut ids = Vec::new();
        for ((class, mut members), q) in by_class.into_iter().zip(quotas) {
            members.shuffle(&mut stream(self.state.config.seed, &[0x7665_7269_6679, class as u64]));
            ids.extend(members.into_iter().take(q));
        }
        self.commit(Event::VerificationSampled { ids: ids.clone() })?;
        Ok(ids)
    }

    pub fn md_verify(&mut self, id: &str, reviewer: &str, note: Option<&str>) -> Result<&ReviewItem> {
        self.commit(Event::Verified { id: id.into(), reviewer: reviewer.into(), note: note.map(str::to_string) })?;
        self.state.item(id)
    }
}

/// Splits `round(fraction · Σcounts)` across groups proportionally; leftover
/// units go to the largest fractional parts, earlier groups first on ties.
pub(crate) fn largest_remainder(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| fraction * c as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut left = target.saturating_sub(quotas.iter().sum());
    for &i in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if quotas[i] < counts[i] {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}
