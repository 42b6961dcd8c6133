//! Scripted reviewers that drive a workflow through all four stages with
//! seeded random decisions. Used for demos, fuzzing and replay checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::engine::Workflow;
use super::state::{Decision, NewItem, Stage, Stage3Choice};
use crate::error::Result;
use crate::io::Class;
use crate::mask::BinaryMask;
use crate::rng::stream;

/// Decision mix of the simulated reviewers. Probabilities are drawn in
/// order accept, reject, unsure; the remainder excludes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub items: usize,
    pub seeds: usize,
    pub mask_size: usize,
    pub p_accept: f64,
    pub p_reject: f64,
    pub p_unsure: f64,
    /// Chance that a rejection carries its edit in the same request.
    pub p_one_shot_edit: f64,
    /// Chance of denying all six Stage III proposals.
    pub p_deny: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            items: 60,
            seeds: 4,
            mask_size: 8,
            p_accept: 0.6,
            p_reject: 0.2,
            p_unsure: 0.1,
            p_one_shot_edit: 0.5,
            p_deny: 0.1,
            seed: 0,
        }
    }
}

fn random_mask(rng: &mut ChaCha8Rng, size: usize) -> BinaryMask {
    BinaryMask::from_fn(size, size, |_, _| rng.random_bool(0.5))
}

fn review(wf: &mut Workflow, ids: &[String], sim: &SimConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    for (n, id) in ids.iter().enumerate() {
        let reviewer = format!("reviewer-{}", n % 3);
        let u: f64 = rng.random();
        if u < sim.p_accept {
            wf.submit_decision(id, Decision::Accept, None, &reviewer)?;
        } else if u < sim.p_accept + sim.p_reject {
            let edit = random_mask(rng, sim.mask_size);
            if !rng.random_bool(sim.p_one_shot_edit) {
                wf.submit_decision(id, Decision::Reject, None, &reviewer)?;
            }
            wf.submit_decision(id, Decision::Reject, Some(&edit), &reviewer)?;
        } else if u < sim.p_accept + sim.p_reject + sim.p_unsure {
            wf.submit_decision(id, Decision::Unsure, None, &reviewer)?;
            let adjusted = random_mask(rng, sim.mask_size);
            wf.md_resolve(id, "boundary adjusted at the costophrenic angle", &adjusted, "md-0")?;
        } else {
            wf.submit_decision(id, Decision::Exclude, None, &reviewer)?;
        }
    }
    Ok(())
}

/// Runs the whole protocol on a fresh engine: `items` dataset entries plus
/// `seeds` pre-existing masks, Stage II rounds up to the configured budget,
/// six-way selection for the rest with one re-route of denied items, and
/// verification of the Stage IV sample.
pub fn simulate(wf: &mut Workflow, sim: &SimConfig) -> Result<()> {
    let mut rng = stream(sim.seed, &[0x73_696d]);
    let size = sim.mask_size;

    wf.add_items(
        (0..sim.items)
            .map(|i| NewItem {
                id: format!("cxr-{i:05}"),
                class: Class::ALL[i % 3],
                image: format!("images/cxr-{i:05}.pgm"),
            })
            .collect(),
    )?;
    if sim.seeds > 0 {
        wf.register_seed_masks((0..sim.seeds).map(|i| format!("seed-{i:04}")).collect())?;
    }
    let candidates = ["unet", "unetpp", "fpn"];
    for c in candidates {
        wf.register_candidate(c)?;
    }
    let scores: Vec<(String, f64)> =
        candidates.iter().map(|c| (c.to_string(), rng.random_range(0.90..0.99))).collect();
    wf.stage1_select(&scores)?;
    wf.advance_stage()?;

    loop {
        let ids = wf.next_batch(|_| Ok(BinaryMask::from_fn(size, size, |r, c| (r + c) % 3 != 0)))?;
        if ids.is_empty() {
            break;
        }
        review(wf, &ids, sim, &mut rng)?;
        wf.finalize_round()?;
    }
    wf.advance_stage()?;

    let n_models = wf.state().config.stage3_models;
    wf.stage3_register((1..=n_models).map(|k| format!("net-{k}")).collect())?;
    let rest: Vec<String> = wf.state().pool().iter().map(|it| it.id.clone()).collect();
    wf.stage3_propose(&rest, |_, m| Ok(BinaryMask::from_fn(size, size, |r, c| !(r * size + c + m).is_multiple_of(4))))?;
    for id in &rest {
        let choice = if rng.random_bool(sim.p_deny) {
            Stage3Choice::Deny
        } else {
            Stage3Choice::Model(rng.random_range(1..=n_models) as u8)
        };
        wf.stage3_select(id, choice, "reviewer-s3")?;
    }
    if wf.state().stage3_selections > 0 {
        wf.stage3_champion()?;
    }
    let denied = wf.reroute_denied(|_| Ok(BinaryMask::ones(size, size)))?;
    if !denied.is_empty() {
        review(wf, &denied, sim, &mut rng)?;
        wf.finalize_round()?;
    }
    wf.advance_stage()?;
    debug_assert_eq!(wf.state().stage, Stage::IV);

    for id in wf.stage4_sample()? {
        let note = rng.random_bool(0.2).then_some("minor boundary touch-up");
        wf.md_verify(&id, "md-1", note)?;
    }
    Ok(())
}
