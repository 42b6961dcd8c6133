use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::argmax_first;
use crate::error::{Error, Result};
use crate::io::Class;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
    IV,
}

impl Stage {
    pub fn next(self) -> Option<Stage> {
        match self {
            Stage::I => Some(Stage::II),
            Stage::II => Some(Stage::III),
            Stage::III => Some(Stage::IV),
            Stage::IV => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Accepted,
    RejectedPendingEdit,
    Modified,
    UnsurePendingMd,
    Excluded,
    Denied,
    Verified,
}

impl ItemStatus {
    pub const ALL: [ItemStatus; 8] = [
        ItemStatus::Pending,
        ItemStatus::Accepted,
        ItemStatus::RejectedPendingEdit,
        ItemStatus::Modified,
        ItemStatus::UnsurePendingMd,
        ItemStatus::Excluded,
        ItemStatus::Denied,
        ItemStatus::Verified,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, ItemStatus::Accepted | ItemStatus::Modified | ItemStatus::Excluded | ItemStatus::Verified)
    }

    /// Statuses whose items hold a final mask in the repository.
    pub fn has_final_mask(self) -> bool {
        matches!(self, ItemStatus::Accepted | ItemStatus::Modified | ItemStatus::Verified)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ItemStatus::Pending => "pending",
            ItemStatus::Accepted => "accepted",
            ItemStatus::RejectedPendingEdit => "rejected_pending_edit",
            ItemStatus::Modified => "modified",
            ItemStatus::UnsurePendingMd => "unsure_pending_md",
            ItemStatus::Excluded => "excluded",
            ItemStatus::Denied => "denied",
            ItemStatus::Verified => "verified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
    Unsure,
    Exclude,
}

/// Stage III verdict: a 1-based model index or a denial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage3Choice {
    Model(u8),
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusStamp {
    pub seq: u64,
    pub at_ms: u64,
    pub status: ItemStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub class: Class,
    pub image: String,
    pub status: ItemStatus,
    /// Review round the item was last batched in.
    pub round: Option<u32>,
    /// Model-proposed mask under review.
    pub mask: Option<String>,
    /// Stage III proposals in model registry order.
    pub proposals: Vec<String>,
    pub final_mask: Option<String>,
    pub reviewer: Option<String>,
    pub md_note: Option<String>,
    pub last_decision: Option<Decision>,
    pub selected_model: Option<u8>,
    /// Set once a denied item has been sent back for manual review.
    pub rerouted: bool,
    /// Drawn into the final verification sample and awaiting sign-off.
    pub verify_pending: bool,
    pub history: Vec<StatusStamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewItem {
    pub id: String,
    pub class: Class,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalRef {
    pub id: String,
    pub mask: String,
}

/// Training request emitted when a review round closes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrainJob {
    pub round: u32,
    pub model: Option<String>,
    /// Every id in the mask repository, seeds included, sorted.
    pub dataset: Vec<String>,
    /// Continue from the current weights rather than reinitializing.
    pub fine_tune: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkflowConfig {
    pub batch_size: usize,
    /// Total number of items drawn into Stage II review rounds.
    pub stage2_budget: usize,
    pub stage3_models: usize,
    pub verify_fraction: f64,
    pub fine_tune: bool,
    pub seed: u64,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self { batch_size: 500, stage2_budget: 3000, stage3_models: 6, verify_fraction: 0.2, fine_tune: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    ItemsAdded { items: Vec<NewItem> },
    SeedMasksRegistered { ids: Vec<String> },
    CandidateRegistered { model: String },
    ChampionSelected { model: String, scores: Vec<f64> },
    StageAdvanced { to: Stage },
    BatchStarted { round: u32, proposals: Vec<ProposalRef>, rerouted: bool },
    DecisionSubmitted { id: String, decision: Decision, reviewer: String, mask: Option<String> },
    MdResolved { id: String, note: String, mask: String, reviewer: String },
    RoundFinalized { job: RetrainJob },
    Stage3ModelsRegistered { models: Vec<String> },
    Stage3Proposed { id: String, masks: Vec<String> },
    Stage3Selected { id: String, choice: Stage3Choice, reviewer: String },
    VerificationSampled { ids: Vec<String> },
    Verified { id: String, reviewer: String, note: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub at_ms: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub config: WorkflowConfig,
    pub stage: Stage,
    pub items: BTreeMap<String, ReviewItem>,
    /// Ids with a final mask: external seed masks plus finished items.
    pub repository: BTreeSet<String>,
    pub seed_ids: BTreeSet<String>,
    pub round: u32,
    pub batch: Vec<String>,
    pub batch_open: bool,
    /// Items drawn into Stage II rounds so far.
    pub stage2_drawn: usize,
    /// Stage I candidate registry.
    pub candidates: Vec<String>,
    /// Stage III model registry.
    pub stage3_models: Vec<String>,
    pub tallies: Vec<u64>,
    pub stage3_selections: u64,
    pub champion: Option<String>,
    pub jobs: Vec<RetrainJob>,
    pub verification: Vec<String>,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub round: u32,
    pub champion: Option<String>,
    pub counts: BTreeMap<ItemStatus, usize>,
    pub repository_size: usize,
    pub queue_size: usize,
    pub batch_open: bool,
    pub stage3_models: Vec<String>,
    pub tallies: Vec<u64>,
    pub verification_size: usize,
    pub jobs: usize,
    pub last_seq: u64,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b"_.-".contains(&b)) && id != "." && id != ".."
}

impl WorkflowState {
    pub fn new(config: WorkflowConfig) -> Self {
        Self {
            config,
            stage: Stage::I,
            items: BTreeMap::new(),
            repository: BTreeSet::new(),
            seed_ids: BTreeSet::new(),
            round: 0,
            batch: Vec::new(),
            batch_open: false,
            stage2_drawn: 0,
            candidates: Vec::new(),
            stage3_models: Vec::new(),
            tallies: Vec::new(),
            stage3_selections: 0,
            champion: None,
            jobs: Vec::new(),
            verification: Vec::new(),
            last_seq: 0,
        }
    }

    pub fn item(&self, id: &str) -> Result<&ReviewItem> {
        self.items.get(id).ok_or_else(|| Error::NotFound(format!("item `{id}`")))
    }

    fn item_mut(&mut self, id: &str) -> Result<&mut ReviewItem> {
        self.items.get_mut(id).ok_or_else(|| Error::NotFound(format!("item `{id}`")))
    }

    fn require_stage(&self, op: &str, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(Error::state(format!("{op} is not allowed in stage {:?}", self.stage)))
        }
    }

    fn in_open_batch(&self, item: &ReviewItem) -> bool {
        self.batch_open && item.round == Some(self.round) && self.batch.iter().any(|b| b == &item.id)
    }

    /// Items awaiting a human decision: the open batch first, then Stage III
    /// items with proposals and no verdict.
    pub fn queue(&self) -> Vec<&ReviewItem> {
        let mut out: Vec<&ReviewItem> = Vec::new();
        if self.batch_open {
            out.extend(self.batch.iter().filter_map(|id| self.items.get(id)).filter(|it| !it.status.is_terminal()));
        }
        if self.stage == Stage::III {
            out.extend(self.items.values().filter(|it| {
                it.status == ItemStatus::Pending && !it.proposals.is_empty() && !it.rerouted && !self.in_open_batch(it)
            }));
        }
        out
    }

    pub fn counts(&self) -> BTreeMap<ItemStatus, usize> {
        let mut counts: BTreeMap<ItemStatus, usize> = ItemStatus::ALL.iter().map(|&s| (s, 0)).collect();
        for it in self.items.values() {
            *counts.entry(it.status).or_default() += 1;
        }
        counts
    }

    pub fn progress(&self) -> Progress {
        Progress {
            stage: self.stage,
            round: self.round,
            champion: self.champion.clone(),
            counts: self.counts(),
            repository_size: self.repository.len(),
            queue_size: self.queue().len(),
            batch_open: self.batch_open,
            stage3_models: self.stage3_models.clone(),
            tallies: self.tallies.clone(),
            verification_size: self.verification.len(),
            jobs: self.jobs.len(),
            last_seq: self.last_seq,
        }
    }

    /// Unbatched pending items that have never been reviewed.
    pub fn pool(&self) -> Vec<&ReviewItem> {
        self.items
            .values()
            .filter(|it| it.status == ItemStatus::Pending && it.round.is_none() && it.proposals.is_empty())
            .collect()
    }

    /// Dataset items still lacking a final mask (excluded items aside).
    pub fn missing_from_repository(&self) -> Vec<&str> {
        self.items
            .values()
            .filter(|it| it.status != ItemStatus::Excluded && !self.repository.contains(&it.id))
            .map(|it| it.id.as_str())
            .collect()
    }

    /// Structural invariants; holds after every successfully applied event.
    pub fn check_invariants(&self) -> Result<()> {
        for id in &self.repository {
            if self.seed_ids.contains(id) {
                continue;
            }
            match self.items.get(id) {
                Some(it) if it.status.has_final_mask() && it.final_mask.is_some() => {}
                _ => return Err(Error::state(format!("repository entry `{id}` lacks a finished item"))),
            }
        }
        for it in self.items.values() {
            if it.status.has_final_mask() != self.repository.contains(&it.id) {
                return Err(Error::state(format!("item `{}` ({}) disagrees with repository", it.id, it.status.as_str())));
            }
        }
        if self.tallies.iter().sum::<u64>() != self.stage3_selections {
            return Err(Error::state("stage III tallies do not sum to the selection count"));
        }
        if self.batch_open && self.batch.is_empty() {
            return Err(Error::state("open batch is empty"));
        }
        Ok(())
    }

    fn stamp(item: &mut ReviewItem, rec: &EventRecord, status: ItemStatus) {
        item.status = status;
        item.history.push(StatusStamp { seq: rec.seq, at_ms: rec.at_ms, status });
    }

    fn finish(&mut self, id: &str, rec: &EventRecord, status: ItemStatus, mask: String) {
        let item = self.items.get_mut(id).expect("checked by caller");
        item.final_mask = Some(mask);
        Self::stamp(item, rec, status);
        self.repository.insert(id.to_string());
    }
}

/// Applies one event. All preconditions are checked before anything is
/// mutated, so a rejected event leaves the state untouched.
pub fn apply(state: &mut WorkflowState, rec: &EventRecord) -> Result<()> {
    if rec.seq != state.last_seq + 1 {
        return Err(Error::state(format!("event sequence {} does not follow {}", rec.seq, state.last_seq)));
    }
    apply_event(state, rec)?;
    state.last_seq = rec.seq;
    Ok(())
}

fn apply_event(s: &mut WorkflowState, rec: &EventRecord) -> Result<()> {
    match &rec.event {
        Event::ItemsAdded { items } => {
            s.require_stage("adding items", &[Stage::I])?;
            let mut fresh = BTreeSet::new();
            for it in items {
                if !valid_id(&it.id) {
                    return Err(Error::Usage(format!("invalid item id `{}`", it.id)));
                }
                if s.items.contains_key(&it.id) || s.seed_ids.contains(&it.id) || !fresh.insert(it.id.as_str()) {
                    return Err(Error::state(format!("item `{}` already exists", it.id)));
                }
            }
            for it in items {
                s.items.insert(
                    it.id.clone(),
                    ReviewItem {
                        id: it.id.clone(),
                        class: it.class,
                        image: it.image.clone(),
                        status: ItemStatus::Pending,
                        round: None,
                        mask: None,
                        proposals: Vec::new(),
                        final_mask: None,
                        reviewer: None,
                        md_note: None,
                        last_decision: None,
                        selected_model: None,
                        rerouted: false,
                        verify_pending: false,
                        history: vec![StatusStamp { seq: rec.seq, at_ms: rec.at_ms, status: ItemStatus::Pending }],
                    },
                );
            }
        }
        Event::SeedMasksRegistered { ids } => {
            s.require_stage("registering seed masks", &[Stage::I])?;
            let mut fresh = BTreeSet::new();
            for id in ids {
                if !valid_id(id) {
                    return Err(Error::Usage(format!("invalid seed id `{id}`")));
                }
                if s.items.contains_key(id) || s.repository.contains(id) || !fresh.insert(id.as_str()) {
                    return Err(Error::state(format!("seed id `{id}` already exists")));
                }
            }
            for id in ids {
                s.seed_ids.insert(id.clone());
                s.repository.insert(id.clone());
            }
        }
        Event::CandidateRegistered { model } => {
            s.require_stage("registering candidates", &[Stage::I])?;
            if s.candidates.contains(model) {
                return Err(Error::state(format!("candidate `{model}` already registered")));
            }
            s.candidates.push(model.clone());
        }
        Event::ChampionSelected { model, scores } => match s.stage {
            Stage::I => {
                if scores.len() != s.candidates.len() {
                    return Err(Error::Usage(format!(
                        "{} scores for {} registered candidates",
                        scores.len(),
                        s.candidates.len()
                    )));
                }
                let best = argmax_first(scores)?;
                if &s.candidates[best] != model {
                    return Err(Error::state(format!("`{model}` is not the best-scoring candidate")));
                }
                s.champion = Some(model.clone());
            }
            Stage::III => {
                if s.stage3_selections == 0 {
                    return Err(Error::Usage("no stage III selections recorded".into()));
                }
                let tallies: Vec<f64> = s.tallies.iter().map(|&t| t as f64).collect();
                let best = argmax_first(&tallies)?;
                if &s.stage3_models[best] != model || scores != &tallies {
                    return Err(Error::state(format!("`{model}` is not the most selected model")));
                }
                s.champion = Some(model.clone());
            }
            other => return Err(Error::state(format!("champion selection is not allowed in stage {other:?}"))),
        },
        Event::StageAdvanced { to } => {
            if s.stage.next() != Some(*to) {
                return Err(Error::state(format!("cannot move from stage {:?} to {to:?}", s.stage)));
            }
            match s.stage {
                Stage::I if s.champion.is_none() => {
                    return Err(Error::state("stage I has no champion yet"));
                }
                _ if s.batch_open => {
                    return Err(Error::State { message: "a review round is still open".into(), ids: s.batch.clone() });
                }
                Stage::III => {
                    let open: Vec<String> =
                        s.items.values().filter(|it| !it.status.is_terminal()).map(|it| it.id.clone()).collect();
                    if !open.is_empty() {
                        return Err(Error::State { message: "items are not finished".into(), ids: open });
                    }
                }
                _ => {}
            }
            s.stage = *to;
        }
        Event::BatchStarted { round, proposals, rerouted } => {
            s.require_stage("starting a review round", if *rerouted { &[Stage::III] } else { &[Stage::II] })?;
            if s.batch_open {
                return Err(Error::State { message: "previous round not finalized".into(), ids: s.batch.clone() });
            }
            if *round != s.round {
                return Err(Error::state(format!("round {round} does not match current round {}", s.round)));
            }
            if proposals.is_empty() {
                return Err(Error::Usage("empty batch".into()));
            }
            let mut seen = BTreeSet::new();
            for p in proposals {
                let it = s.item(&p.id)?;
                let eligible = if *rerouted {
                    it.status == ItemStatus::Denied && !it.rerouted
                } else {
                    it.status == ItemStatus::Pending && it.round.is_none() && it.proposals.is_empty()
                };
                if !eligible || !seen.insert(p.id.as_str()) {
                    return Err(Error::state(format!("item `{}` cannot join this round", p.id)));
                }
            }
            if !*rerouted && s.stage2_drawn + proposals.len() > s.config.stage2_budget {
                return Err(Error::state("batch exceeds the stage II budget"));
            }
            for p in proposals {
                let it = s.items.get_mut(&p.id).expect("checked");
                it.round = Some(*round);
                it.mask = Some(p.mask.clone());
                if *rerouted {
                    it.rerouted = true;
                    WorkflowState::stamp(it, rec, ItemStatus::Pending);
                }
            }
            if !*rerouted {
                s.stage2_drawn += proposals.len();
            }
            s.batch = proposals.iter().map(|p| p.id.clone()).collect();
            s.batch_open = true;
        }
        Event::DecisionSubmitted { id, decision, reviewer, mask } => {
            let it = s.item(id)?;
            if it.status.is_terminal() {
                return Err(Error::state(format!("item `{id}` is already {}", it.status.as_str())));
            }
            if !s.in_open_batch(it) {
                return Err(Error::state(format!("item `{id}` is not in the open review round")));
            }
            let next = match (it.status, decision, mask) {
                (ItemStatus::Pending, Decision::Accept, None) => ItemStatus::Accepted,
                (ItemStatus::Pending, Decision::Reject, None) => ItemStatus::RejectedPendingEdit,
                (ItemStatus::Pending | ItemStatus::RejectedPendingEdit, Decision::Reject, Some(_)) => ItemStatus::Modified,
                (ItemStatus::Pending, Decision::Unsure, None) => ItemStatus::UnsurePendingMd,
                (ItemStatus::Pending | ItemStatus::RejectedPendingEdit, Decision::Exclude, None) => ItemStatus::Excluded,
                (ItemStatus::RejectedPendingEdit, Decision::Reject, None) => {
                    return Err(Error::state(format!("item `{id}` needs an edited mask to finish the rejection")))
                }
                (ItemStatus::Pending, Decision::Accept | Decision::Unsure | Decision::Exclude, Some(_)) => {
                    return Err(Error::Usage("only a reject decision carries an edited mask".into()))
                }
                (st, d, _) => {
                    return Err(Error::state(format!("decision {d:?} is not allowed on a {} item", st.as_str())))
                }
            };
            let final_mask = match next {
                ItemStatus::Accepted => {
                    Some(it.mask.clone().ok_or_else(|| Error::state(format!("item `{id}` has no proposal")))?)
                }
                ItemStatus::Modified => mask.clone(),
                _ => None,
            };
            let item = s.item_mut(id)?;
            item.reviewer = Some(reviewer.clone());
            item.last_decision = Some(*decision);
            match final_mask {
                Some(m) => s.finish(id, rec, next, m),
                None => WorkflowState::stamp(s.item_mut(id)?, rec, next),
            }
        }
        Event::MdResolved { id, note, mask, reviewer } => {
            let it = s.item(id)?;
            if it.status != ItemStatus::UnsurePendingMd {
                return Err(Error::state(format!("item `{id}` is {}, not awaiting MD review", it.status.as_str())));
            }
            let item = s.item_mut(id)?;
            item.md_note = Some(note.clone());
            item.reviewer = Some(reviewer.clone());
            s.finish(id, rec, ItemStatus::Modified, mask.clone());
        }
        Event::RoundFinalized { job } => {
            s.require_stage("finalizing a round", &[Stage::II, Stage::III])?;
            if !s.batch_open {
                return Err(Error::state("no review round is open"));
            }
            let open: Vec<String> = s
                .batch
                .iter()
                .filter(|id| s.items.get(*id).is_some_and(|it| !it.status.is_terminal()))
                .cloned()
                .collect();
            if !open.is_empty() {
                return Err(Error::State { message: "round has unfinished items".into(), ids: open });
            }
            let expected = RetrainJob {
                round: s.round,
                model: s.champion.clone(),
                dataset: s.repository.iter().cloned().collect(),
                fine_tune: s.config.fine_tune,
            };
            if job != &expected {
                return Err(Error::state("retrain job does not match the repository"));
            }
            s.jobs.push(expected);
            s.round += 1;
            s.batch.clear();
            s.batch_open = false;
        }
        Event::Stage3ModelsRegistered { models } => {
            s.require_stage("registering stage III models", &[Stage::III])?;
            if models.len() != s.config.stage3_models {
                return Err(Error::Config(format!(
                    "stage III needs exactly {} models, got {}",
                    s.config.stage3_models,
                    models.len()
                )));
            }
            if !s.stage3_models.is_empty() {
                return Err(Error::state("stage III models are already registered"));
            }
            s.tallies = vec![0; models.len()];
            s.stage3_models = models.clone();
        }
        Event::Stage3Proposed { id, masks } => {
            s.require_stage("stage III proposals", &[Stage::III])?;
            if s.stage3_models.is_empty() {
                return Err(Error::state("no stage III models registered"));
            }
            if masks.len() != s.stage3_models.len() {
                return Err(Error::Config(format!("{} proposals for {} models", masks.len(), s.stage3_models.len())));
            }
            let it = s.item(id)?;
            if it.status != ItemStatus::Pending || it.round.is_some() {
                return Err(Error::state(format!("item `{id}` is not unannotated")));
            }
            s.item_mut(id)?.proposals = masks.clone();
        }
        Event::Stage3Selected { id, choice, reviewer } => {
            s.require_stage("stage III selection", &[Stage::III])?;
            let it = s.item(id)?;
            if it.status != ItemStatus::Pending || it.proposals.is_empty() || it.rerouted || it.round.is_some() {
                return Err(Error::state(format!("item `{id}` has no open stage III proposals")));
            }
            match *choice {
                Stage3Choice::Model(k) => {
                    let idx = k as usize;
                    if idx == 0 || idx > it.proposals.len() {
                        return Err(Error::Usage(format!("model index {k} outside 1..={}", it.proposals.len())));
                    }
                    let m = it.proposals[idx - 1].clone();
                    let item = s.item_mut(id)?;
                    item.reviewer = Some(reviewer.clone());
                    item.selected_model = Some(k);
                    s.finish(id, rec, ItemStatus::Accepted, m);
                    s.tallies[idx - 1] += 1;
                    s.stage3_selections += 1;
                }
                Stage3Choice::Deny => {
                    let item = s.item_mut(id)?;
                    item.reviewer = Some(reviewer.clone());
                    WorkflowState::stamp(item, rec, ItemStatus::Denied);
                }
            }
        }
        Event::VerificationSampled { ids } => {
            s.require_stage("verification sampling", &[Stage::IV])?;
            if !s.verification.is_empty() {
                return Err(Error::state("verification sample already drawn"));
            }
            let missing = s.missing_from_repository();
            if !missing.is_empty() {
                return Err(Error::State {
                    message: format!("repository incomplete: {} items missing", missing.len()),
                    ids: missing.iter().map(|m| m.to_string()).collect(),
                });
            }
            let mut seen = BTreeSet::new();
            for id in ids {
                let it = s.item(id)?;
                if !it.status.has_final_mask() || !seen.insert(id.as_str()) {
                    return Err(Error::state(format!("item `{id}` cannot be sampled for verification")));
                }
            }
            for id in ids {
                s.item_mut(id)?.verify_pending = true;
            }
            s.verification = ids.clone();
        }
        Event::Verified { id, reviewer, note } => {
            s.require_stage("verification", &[Stage::IV])?;
            let it = s.item(id)?;
            if !it.verify_pending || !matches!(it.status, ItemStatus::Accepted | ItemStatus::Modified) {
                return Err(Error::state(format!("item `{id}` is not awaiting verification")));
            }
            let item = s.item_mut(id)?;
            item.verify_pending = false;
            item.reviewer = Some(reviewer.clone());
            if note.is_some() {
                item.md_note = note.clone();
            }
            WorkflowState::stamp(item, rec, ItemStatus::Verified);
        }
    }
    Ok(())
}

/// Rebuilds state from scratch by applying `events` in order.
pub fn replay<'a>(config: WorkflowConfig, events: impl IntoIterator<Item = &'a EventRecord>) -> Result<WorkflowState> {
    let mut state = WorkflowState::new(config);
    for rec in events {
        apply(&mut state, rec)?;
    }
    Ok(state)
}
