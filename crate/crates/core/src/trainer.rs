//! Synchronous training rounds for the sheaf-coupled algorithms and the
//! Local and DSGD baselines.
//!
//! One round reads a frozen snapshot of round `r` and produces round `r+1`:
//!
//! 1. every client takes one backward pass on its batch,
//! 2. encoders and attention vectors take a local gradient step,
//! 3. encoders are gossiped with the modality's mixing matrix,
//! 4. heads take a step on loss plus sheaf neighbour term (read at `ω^r`),
//! 5. restriction maps take a step using the new heads `ω^{r+1}`.
//!
//! Per-client work runs on the rayon pool; all cross-client sums iterate
//! clients in ascending order, so the result does not depend on the number
//! of worker threads.

use std::time::Instant;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::graph::{self, ClientGraph, MixingMatrix, ModalityGroup};
use crate::metrics::{self, ObjectiveEval, RoundRecord, RunLog};
use crate::model::{Batch, ClientModel, Fusion, ModelDims};
use crate::rng::{self, stream};
use crate::sheaf::{SheafParams, SheafState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    SheafDmfl,
    SheafDmflAtt,
    Local,
    Dsgd,
}

impl Algorithm {
    pub fn uses_sheaf(self) -> bool {
        matches!(self, Algorithm::SheafDmfl | Algorithm::SheafDmflAtt)
    }

    /// Whether encoders of a modality are gossiped (and hence tied in the
    /// averaged parameter vector).
    pub fn gossips_encoders(self) -> bool {
        !matches!(self, Algorithm::Local)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SheafDmfl => "sheaf_dmfl",
            Algorithm::SheafDmflAtt => "sheaf_dmfl_att",
            Algorithm::Local => "local",
            Algorithm::Dsgd => "dsgd",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

/// Training hyper-parameters. Unset step sizes take the smoothness-based
/// defaults computed by [`Trainer::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub alpha: Option<f64>,
    pub eta_phi: Option<f64>,
    pub eta_beta: Option<f64>,
    pub eta_p: Option<f64>,
    pub lambda: f64,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// DSGD only: also average heads inside groups of identical modality sets.
    pub dsgd_head_gossip: bool,
    /// Multiplier applied to the Gauss–Newton curvature estimate.
    pub smoothness_safety: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::SheafDmflAtt,
            rounds: 100,
            alpha: None,
            eta_phi: None,
            eta_beta: None,
            eta_p: None,
            lambda: 0.1,
            batch_size: 0,
            shuffle_seed: 0,
            dsgd_head_gossip: true,
            smoothness_safety: 2.0,
        }
    }
}

/// Resolved step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub alpha: f64,
    pub eta_beta: f64,
    /// Per modality id.
    pub eta_phi: Vec<f64>,
    pub eta_p: f64,
}

/// Constants used by the convergence checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// Smoothness estimate `L̂` (safety factor included).
    pub smoothness: f64,
    /// Head-norm bound `D̂_ω`.
    pub head_bound: f64,
    /// Encoder-norm bound per modality.
    pub encoder_bound: Vec<f64>,
    /// Attention-norm bound; zero initial attention gives no scale, so this
    /// is `10·(1 + max initial norm)`.
    pub attention_bound: f64,
}

/// Static part of a federation: graph, data and mixing matrices.
#[derive(Debug, Clone)]
pub struct Federation {
    pub graph: ClientGraph,
    pub dims: ModelDims,
    pub datasets: Vec<ClientDataset>,
    pub train: Vec<Batch>,
    pub test: Vec<Batch>,
    /// Per modality id; `None` when no client holds the modality.
    pub mixing: Vec<Option<MixingMatrix>>,
    pub groups: Vec<ModalityGroup>,
}

impl Federation {
    /// Validates per-modality connectivity and builds mixing matrices.
    pub fn new(graph: ClientGraph, dims: ModelDims, datasets: Vec<ClientDataset>) -> Result<Self> {
        if datasets.len() != graph.n_clients() {
            return Err(Error::Config(format!("{} datasets for {} clients", datasets.len(), graph.n_clients())));
        }
        if dims.input_dims.len() < graph.n_modalities() || dims.embed_dims.len() < graph.n_modalities() {
            return Err(Error::Config("model dimensions missing for some modality".into()));
        }
        let mixing = graph::modality_mixing(&graph)?;
        let train = datasets.iter().map(ClientDataset::train).collect();
        let test = datasets.iter().map(ClientDataset::test).collect();
        let groups = graph.modality_groups();
        Ok(Self { graph, dims, datasets, train, test, mixing, groups })
    }

    pub fn n_clients(&self) -> usize {
        self.graph.n_clients()
    }

    /// Members of modality `k`'s gossip group.
    pub fn modality_members(&self, k: usize) -> &[usize] {
        self.mixing[k].as_ref().map_or(&[], |w| &w.members)
    }

    /// Mixing matrices over each modality group, used for DSGD head gossip.
    pub fn group_mixing(&self) -> Result<Vec<MixingMatrix>> {
        self.groups
            .iter()
            .map(|g| {
                let comps = self.graph.components(&g.members);
                if comps.len() > 1 {
                    return Err(Error::Config(format!(
                        "group {} is disconnected ({comps:?}); DSGD head gossip needs connected groups",
                        g.label()
                    )));
                }
                let (members, edges) = self.graph.induced(&g.members);
                Ok(MixingMatrix::metropolis(&members, &edges))
            })
            .collect()
    }
}

/// Mutable per-round state. `models[i]` holds client `i`'s model slots: one
/// multimodal model for the sheaf and Local algorithms, one unimodal model
/// per available modality for DSGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationState {
    pub models: Vec<Vec<ClientModel>>,
    pub sheaf: Option<SheafState>,
    pub round: usize,
}

impl FederationState {
    /// Current heads of every client's first slot.
    pub fn heads(&self) -> Vec<Array1<f64>> {
        self.models.iter().map(|slots| slots[0].head.to_vector()).collect()
    }

    /// Slot of client `i` that carries modality `k`.
    pub fn slot_with(&self, i: usize, k: usize) -> Option<usize> {
        self.models[i].iter().position(|m| m.position(k).is_some())
    }

    pub fn encoder(&self, i: usize, k: usize) -> Option<&crate::model::Encoder> {
        self.slot_with(i, k).and_then(|s| self.models[i][s].encoder(k))
    }

    pub fn max_head_norm(&self) -> f64 {
        self.models.iter().flatten().map(|m| m.head_sq_norm().sqrt()).fold(0.0, f64::max)
    }
}

/// Builds the round-0 state.
pub fn initial_state(
    fed: &Federation,
    algorithm: Algorithm,
    fusion_for_local: Fusion,
    sheaf_params: &SheafParams,
    model_seed: u64,
) -> Result<FederationState> {
    let fusion = match algorithm {
        Algorithm::SheafDmfl => Fusion::Concat,
        Algorithm::SheafDmflAtt => Fusion::Attention,
        Algorithm::Local => fusion_for_local,
        Algorithm::Dsgd => Fusion::Concat,
    };
    let models = (0..fed.n_clients())
        .map(|i| {
            let mods = fed.graph.modalities(i);
            if algorithm == Algorithm::Dsgd {
                mods.iter()
                    .map(|&k| ClientModel::init(&[k], &fed.dims, fusion, model_seed, i))
                    .collect::<Result<Vec<_>>>()
            } else {
                Ok(vec![ClientModel::init(mods, &fed.dims, fusion, model_seed, i)?])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let sheaf = if algorithm.uses_sheaf() {
        let head_dims: Vec<usize> = models.iter().map(|s| s[0].head.dim()).collect();
        Some(SheafState::init(&fed.graph, &head_dims, sheaf_params)?)
    } else {
        None
    };
    Ok(FederationState { models, sheaf, round: 0 })
}

/// Scalars exchanged during one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTally {
    /// Restriction-map projections: two exchanges per ordered incidence.
    pub sheaf: u64,
    /// Intermediate encoder parameters sent to modality neighbours.
    pub encoder: u64,
    /// DSGD head parameters sent to group neighbours.
    pub head: u64,
}

impl CommTally {
    pub fn total(&self) -> u64 {
        self.sheaf + self.encoder + self.head
    }
}

/// Diagnostics from one [`Trainer::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub mean_loss: f64,
    pub comm: CommTally,
    /// Largest deviation from the averaged-encoder identity
    /// `φ̄^{r+1} − φ̄^r = −η_φ ḡ^r`, over modalities and coordinates.
    pub lemma1_error: f64,
}

pub struct Trainer<'a> {
    pub fed: &'a Federation,
    pub cfg: TrainConfig,
    pub steps: StepSizes,
    pub theory: TheoryConstants,
    group_mixing: Vec<MixingMatrix>,
}

/// Closed-form per-round communication count.
pub fn comm_per_round(fed: &Federation, algorithm: Algorithm, state: &FederationState, head_gossip: bool) -> CommTally {
    let mut tally = CommTally::default();
    if algorithm == Algorithm::Local {
        return tally;
    }
    if let Some(sheaf) = &state.sheaf {
        tally.sheaf = sheaf.edge_dims().iter().map(|&d| 4 * d as u64).sum();
    }
    for k in 0..fed.graph.n_modalities() {
        let members = fed.modality_members(k);
        if members.is_empty() {
            continue;
        }
        let size = state.encoder(members[0], k).map_or(0, |e| e.n_params() as u64);
        let (_, edges) = fed.graph.induced(members);
        tally.encoder += 2 * edges.len() as u64 * size;
    }
    if algorithm == Algorithm::Dsgd && head_gossip {
        for g in &fed.groups {
            let (_, edges) = fed.graph.induced(&g.members);
            let head: u64 = state.models[g.members[0]].iter().map(|m| m.head.dim() as u64).sum();
            tally.head += 2 * edges.len() as u64 * head;
        }
    }
    tally
}

impl<'a> Trainer<'a> {
    /// Resolves step sizes against the initial state. Unset values use
    /// `α = η_β = 1/L̂`, `η_φ = |V_k|/L̂` and `η_P = 1/(λ D̂_ω²)`.
    /// Also writes `λ` and `η_P` into the state's sheaf.
    pub fn new(fed: &'a Federation, cfg: TrainConfig, init: &mut FederationState) -> Result<Self> {
        if cfg.rounds == 0 {
            return Err(Error::Config("train.rounds must be at least 1".into()));
        }
        if !(cfg.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda = {} must be ≥ 0", cfg.lambda)));
        }
        let group_mixing =
            if cfg.algorithm == Algorithm::Dsgd && cfg.dsgd_head_gossip { fed.group_mixing()? } else { Vec::new() };
        let theory = metrics::theory_constants(fed, &cfg, init)?;
        let inv = 1.0 / theory.smoothness;
        let eta_phi = (0..fed.graph.n_modalities())
            .map(|k| {
                cfg.eta_phi.unwrap_or_else(|| {
                    let n = if cfg.algorithm.gossips_encoders() { fed.modality_members(k).len().max(1) } else { 1 };
                    n as f64 * inv
                })
            })
            .collect();
        let eta_p = cfg.eta_p.unwrap_or(if cfg.lambda > 0.0 {
            1.0 / (cfg.lambda * theory.head_bound * theory.head_bound)
        } else {
            0.0
        });
        let steps =
            StepSizes { alpha: cfg.alpha.unwrap_or(inv), eta_beta: cfg.eta_beta.unwrap_or(inv), eta_phi, eta_p };
        for (name, v) in [("alpha", steps.alpha), ("eta_beta", steps.eta_beta), ("eta_p", steps.eta_p)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("step size {name} = {v} is invalid")));
            }
        }
        let t = Self { fed, cfg, steps, theory, group_mixing };
        t.attach(init);
        Ok(t)
    }

    /// Copies the coupling strength and map step size into the sheaf.
    pub fn attach(&self, state: &mut FederationState) {
        if let Some(sheaf) = state.sheaf.as_mut() {
            sheaf.lambda = self.cfg.lambda;
            sheaf.eta = self.steps.eta_p;
        }
    }

    /// Resumes with known step sizes and constants (from a checkpoint).
    pub fn with_steps(
        fed: &'a Federation,
        cfg: TrainConfig,
        steps: StepSizes,
        theory: TheoryConstants,
        state: &mut FederationState,
    ) -> Result<Self> {
        let group_mixing =
            if cfg.algorithm == Algorithm::Dsgd && cfg.dsgd_head_gossip { fed.group_mixing()? } else { Vec::new() };
        let t = Self { fed, cfg, steps, theory, group_mixing };
        t.attach(state);
        Ok(t)
    }

    /// Batch of client `i` for `round`: the full training split, or the
    /// first `batch_size` samples of a per-round seeded shuffle.
    pub fn batch(&self, i: usize, round: usize) -> Batch {
        let train = &self.fed.train[i];
        if self.cfg.batch_size == 0 || self.cfg.batch_size >= train.len() {
            return train.clone();
        }
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng::rng_for(self.cfg.shuffle_seed, &[stream::SHUFFLE, round as u64, i as u64]));
        idx.truncate(self.cfg.batch_size);
        train.select(&idx)
    }

    /// Loss and gradients of every slot of every client on this round's batch.
    pub fn gradients(&self, state: &FederationState) -> Result<Vec<Vec<(f64, ClientModel)>>> {
        (0..self.fed.n_clients())
            .into_par_iter()
            .map(|i| {
                let batch = self.batch(i, state.round);
                state.models[i].iter().map(|m| m.loss_and_grads(&batch)).collect()
            })
            .collect()
    }

    /// Local step on encoders and attention vectors; heads untouched.
    pub fn local_step(&self, state: &FederationState, grads: &[Vec<(f64, ClientModel)>]) -> FederationState {
        let mut next = state.clone();
        for (slots, gs) in next.models.iter_mut().zip(grads) {
            for (m, (_, g)) in slots.iter_mut().zip(gs) {
                for ((enc, genc), &k) in m.encoders.iter_mut().zip(&g.encoders).zip(&g.modalities) {
                    enc.scaled_add(-self.steps.eta_phi[k], genc);
                }
                if let (Some(bs), Some(gb)) = (m.attention.as_mut(), g.attention.as_ref()) {
                    for (b, d) in bs.iter_mut().zip(gb) {
                        b.scaled_add(-self.steps.eta_beta, d);
                    }
                }
            }
        }
        next
    }

    /// Replaces every encoder by the mixing-weighted combination of its
    /// modality neighbours' (and its own) encoders.
    pub fn gossip_encoders(&self, state: &FederationState) -> FederationState {
        let mut next = state.clone();
        if !self.cfg.algorithm.gossips_encoders() {
            return next;
        }
        for (k, w) in self.fed.mixing.iter().enumerate() {
            let Some(w) = w else { continue };
            let flat: Vec<Vec<f64>> =
                w.members.iter().map(|&j| state.encoder(j, k).expect("member holds modality").flatten()).collect();
            for &i in &w.members {
                let mut mixed = vec![0.0; flat[0].len()];
                for (j, wij) in w.row(i) {
                    let src = &flat[w.index_of(j).expect("member")];
                    for (m, s) in mixed.iter_mut().zip(src) {
                        *m += wij * s;
                    }
                }
                let slot = next.slot_with(i, k).expect("member holds modality");
                next.models[i][slot].encoder_mut(k).expect("encoder").assign_flat(&mixed);
            }
        }
        next
    }

    /// Head step. Sheaf algorithms add `λ Σ_j P_ijᵀ(P_ij ω_i − P_ji ω_j)`
    /// evaluated at the round-`r` heads and maps; DSGD optionally averages
    /// heads inside modality groups afterwards.
    pub fn update_heads(
        &self,
        prev: &FederationState,
        next: &mut FederationState,
        grads: &[Vec<(f64, ClientModel)>],
    ) -> Result<()> {
        let alpha = self.steps.alpha;
        let neighbour = match (&prev.sheaf, self.cfg.algorithm.uses_sheaf() && self.cfg.lambda != 0.0) {
            (Some(sheaf), true) => Some(sheaf.gradients(&prev.heads())?),
            _ => None,
        };
        for i in 0..self.fed.n_clients() {
            for (s, (_, g)) in grads[i].iter().enumerate() {
                let mut d = g.head.to_vector();
                if let Some(nb) = &neighbour {
                    d += &nb[i];
                }
                let w = prev.models[i][s].head.to_vector() - &(d * alpha);
                if w.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("head of client {i}")));
                }
                next.models[i][s].head.set_vector(w.view())?;
            }
        }
        if self.cfg.algorithm == Algorithm::Dsgd && self.cfg.dsgd_head_gossip {
            for w in &self.group_mixing {
                let n_slots = next.models[w.members[0]].len();
                for s in 0..n_slots {
                    let heads: Vec<Array1<f64>> =
                        w.members.iter().map(|&j| next.models[j][s].head.to_vector()).collect();
                    for &i in &w.members {
                        let mut mixed = Array1::<f64>::zeros(heads[0].len());
                        for (j, wij) in w.row(i) {
                            mixed.scaled_add(wij, &heads[w.index_of(j).expect("member")]);
                        }
                        next.models[i][s].head.set_vector(mixed.view())?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Restriction-map step using the new heads.
    pub fn exchange_and_update_maps(&self, next: &mut FederationState) -> Result<()> {
        let heads = next.heads();
        if let Some(sheaf) = next.sheaf.as_mut() {
            sheaf.update_maps(&heads)?;
        }
        Ok(())
    }

    /// One synchronous round.
    pub fn step(&self, state: &FederationState) -> Result<(FederationState, StepStats)> {
        let grads = self.gradients(state)?;
        let half = self.local_step(state, &grads);
        let mut next = self.gossip_encoders(&half);
        self.update_heads(state, &mut next, &grads)?;
        if self.cfg.algorithm.uses_sheaf() {
            self.exchange_and_update_maps(&mut next)?;
        }
        for (i, slots) in next.models.iter().enumerate() {
            if slots.iter().any(|m| !m.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of client {i}")));
            }
        }
        next.round = state.round + 1;

        let lemma1_error = self.lemma1_error(state, &next, &grads);
        let n_losses: usize = grads.iter().map(Vec::len).sum();
        let mean_loss = grads.iter().flatten().map(|(l, _)| l).sum::<f64>() / n_losses as f64;
        let comm = comm_per_round(self.fed, self.cfg.algorithm, state, self.cfg.dsgd_head_gossip);
        Ok((next, StepStats { mean_loss, comm, lemma1_error }))
    }

    fn lemma1_error(&self, prev: &FederationState, next: &FederationState, grads: &[Vec<(f64, ClientModel)>]) -> f64 {
        if !self.cfg.algorithm.gossips_encoders() {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for (k, w) in self.fed.mixing.iter().enumerate() {
            let Some(w) = w else { continue };
            let n = w.members.len() as f64;
            let mean = |f: &dyn Fn(usize) -> Vec<f64>| -> Vec<f64> {
                let mut acc: Vec<f64> = Vec::new();
                for &i in &w.members {
                    let v = f(i);
                    if acc.is_empty() {
                        acc = vec![0.0; v.len()];
                    }
                    for (a, x) in acc.iter_mut().zip(v) {
                        *a += x;
                    }
                }
                acc.into_iter().map(|a| a / n).collect()
            };
            let before = mean(&|i| prev.encoder(i, k).expect("member").flatten());
            let after = mean(&|i| next.encoder(i, k).expect("member").flatten());
            let g = mean(&|i| {
                let s = prev.slot_with(i, k).expect("member");
                grads[i][s].1.encoder(k).expect("encoder grad").flatten()
            });
            for ((a, b), gg) in after.iter().zip(&before).zip(&g) {
                worst = worst.max(((a - b) + self.steps.eta_phi[k] * gg).abs());
            }
        }
        worst
    }

    /// Runs the remaining rounds, advancing `state` in place and appending
    /// to `log`. The hook sees every new state and the rows so far (used for
    /// checkpointing). On failure `state` and `log` hold the last completed
    /// round.
    pub fn run<H>(&self, state: &mut FederationState, log: &mut RunLog, mut hook: H) -> Result<()>
    where
        H: FnMut(&FederationState, &RunLog) -> Result<()>,
    {
        let mut eval: ObjectiveEval = metrics::evaluate_objective(self.fed, &self.cfg, state)?;
        while state.round < self.cfg.rounds {
            let started = Instant::now();
            let (next, stats) = self.step(state)?;
            let next_eval = metrics::evaluate_objective(self.fed, &self.cfg, &next)?;
            if !next_eval.psi.is_finite() {
                return Err(Error::NonFinite(format!("objective after round {}", state.round)));
            }
            let acc = metrics::evaluate(self.fed, &next)?;
            let record: RoundRecord = metrics::round_record(self, state, &next, &eval, &next_eval, &stats, &acc);
            log.push(record, started.elapsed().as_secs_f64());
            *state = next;
            eval = next_eval;
            hook(state, log)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenerateOptions, LatentTaskModel, LatentTaskSpec};
    use crate::sheaf::InitScheme;

    pub(crate) fn small_federation(sets: Vec<Vec<usize>>, edges: &[(usize, usize)]) -> Federation {
        let n = sets.len();
        let graph = ClientGraph::new(n, edges, &sets).unwrap();
        let spec = LatentTaskSpec { latent_dim: 4, n_classes: 3, modality_dims: vec![3, 3], noise_std: 0.2, seed: 1 };
        let model = LatentTaskModel::generate(&spec).unwrap();
        let data = generate(
            &model,
            &graph,
            &GenerateOptions { n_per_client: 30, heterogeneity: 0.3, split_frac: 0.7, seed: 2 },
        )
        .unwrap();
        let dims = ModelDims { input_dims: vec![3, 3], hidden: 4, embed_dims: vec![2, 2], n_classes: 3 };
        Federation::new(graph, dims, data).unwrap()
    }

    fn sheaf_params() -> SheafParams {
        SheafParams { gamma: 0.5, lambda: 0.5, eta: 0.01, init: InitScheme::Random, sigma2: 0.5, seed: 4 }
    }

    fn config(algorithm: Algorithm) -> TrainConfig {
        TrainConfig {
            algorithm,
            rounds: 3,
            alpha: Some(0.1),
            eta_phi: Some(0.1),
            eta_beta: Some(0.1),
            eta_p: Some(0.01),
            lambda: 0.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_leave_encoders() {
        let fed = small_federation(vec![vec![0, 1], vec![0, 1]], &[(0, 1)]);
        let mut state = initial_state(&fed, Algorithm::SheafDmflAtt, Fusion::Attention, &sheaf_params(), 3).unwrap();
        let mut cfg = config(Algorithm::SheafDmflAtt);
        cfg.eta_phi = Some(0.0);
        cfg.eta_beta = Some(0.0);
        let t = Trainer::new(&fed, cfg, &mut state).unwrap();
        let g = t.gradients(&state).unwrap();
        assert_eq!(t.local_step(&state, &g), state);
    }

    #[test]
    fn two_member_gossip_averages() {
        let fed = small_federation(vec![vec![0], vec![0]], &[(0, 1)]);
        let mut state = initial_state(&fed, Algorithm::SheafDmfl, Fusion::Concat, &sheaf_params(), 3).unwrap();
        let a = state.models[0][0].encoders[0].flatten();
        let b: Vec<f64> = a.iter().enumerate().map(|(n, x)| x + n as f64).collect();
        state.models[1][0].encoders[0].assign_flat(&b);
        let t = Trainer::new(&fed, config(Algorithm::SheafDmfl), &mut state).unwrap();
        let next = t.gossip_encoders(&state);
        for i in 0..2 {
            let got = next.models[i][0].encoders[0].flatten();
            for ((g, x), y) in got.iter().zip(&a).zip(&b) {
                assert_eq!(*g, 0.5 * x + 0.5 * y);
            }
        }
    }

    #[test]
    fn gossip_fixed_point_and_local_no_comm() {
        let fed = small_federation(vec![vec![0], vec![0, 1], vec![1]], &[(0, 1), (1, 2)]);
        let mut state = initial_state(&fed, Algorithm::SheafDmfl, Fusion::Concat, &sheaf_params(), 3).unwrap();
        let t = Trainer::new(&fed, config(Algorithm::SheafDmfl), &mut state).unwrap();
        // identical initial encoders per modality are a fixed point
        assert_eq!(t.gossip_encoders(&state), state);

        let mut local = initial_state(&fed, Algorithm::Local, Fusion::Concat, &sheaf_params(), 3).unwrap();
        let tl = Trainer::new(&fed, config(Algorithm::Local), &mut local).unwrap();
        let (_, stats) = tl.step(&local).unwrap();
        assert_eq!(stats.comm.total(), 0);
    }

    #[test]
    fn scalar_head_update_example() {
        // One edge, 1-dim heads, P = 1 on both sides, ω = (1, 0), no loss
        // gradient, α = 0.1, λ = 1: ω_0 → 0.9.
        let fed = small_federation(vec![vec![0], vec![0]], &[(0, 1)]);
        let mut state = initial_state(&fed, Algorithm::SheafDmfl, Fusion::Concat, &sheaf_params(), 3).unwrap();
        let g = ClientGraph::new(2, &[(0, 1)], &[vec![0], vec![0]]).unwrap();
        let p = SheafParams { gamma: 1.0, lambda: 1.0, eta: 0.0, init: InitScheme::Identity, sigma2: 1.0, seed: 0 };
        state.sheaf = Some(SheafState::init(&g, &[1, 1], &p).unwrap());
        for (i, v) in [1.0, 0.0].into_iter().enumerate() {
            state.models[i][0].head = crate::model::Head { w: ndarray::Array2::zeros((1, 0)), b: ndarray::array![v] };
        }
        let mut cfg = config(Algorithm::SheafDmfl);
        cfg.lambda = 1.0;
        cfg.alpha = Some(0.1);
        let t = Trainer::with_steps(
            &fed,
            cfg,
            StepSizes { alpha: 0.1, eta_beta: 0.0, eta_phi: vec![0.0, 0.0], eta_p: 0.0 },
            TheoryConstants { smoothness: 1.0, head_bound: 1.0, encoder_bound: vec![], attention_bound: 1.0 },
            &mut state,
        )
        .unwrap();
        let mut grads: Vec<Vec<(f64, ClientModel)>> =
            state.models.iter().map(|s| vec![(0.0, s[0].zeros_like())]).collect();
        for g in &mut grads {
            g[0].1.head.b[0] = 0.0;
        }
        let mut next = state.clone();
        t.update_heads(&state, &mut next, &grads).unwrap();
        assert!((next.models[0][0].head.b[0] - 0.9).abs() < 1e-15);
        assert!((next.models[1][0].head.b[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_matches_plain_step() {
        let fed = small_federation(vec![vec![0], vec![0]], &[(0, 1)]);
        let mut state = initial_state(&fed, Algorithm::SheafDmfl, Fusion::Concat, &sheaf_params(), 3).unwrap();
        let mut cfg = config(Algorithm::SheafDmfl);
        cfg.lambda = 0.0;
        let t = Trainer::new(&fed, cfg, &mut state).unwrap();
        let grads = t.gradients(&state).unwrap();
        let mut next = state.clone();
        t.update_heads(&state, &mut next, &grads).unwrap();
        for i in 0..2 {
            let want = state.models[i][0].head.to_vector() - &(grads[i][0].1.head.to_vector() * 0.1);
            assert_eq!(next.models[i][0].head.to_vector(), want);
        }
    }

    #[test]
    fn lemma1_identity_holds_each_step() {
        let fed = small_federation(vec![vec![0], vec![0, 1], vec![1], vec![0, 1]], &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        let mut state = initial_state(&fed, Algorithm::SheafDmflAtt, Fusion::Attention, &sheaf_params(), 9).unwrap();
        let t = Trainer::new(&fed, config(Algorithm::SheafDmflAtt), &mut state).unwrap();
        let mut s = state;
        for _ in 0..5 {
            let (n, stats) = t.step(&s).unwrap();
            assert!(stats.lemma1_error < 1e-12, "{}", stats.lemma1_error);
            s = n;
        }
    }

    #[test]
    fn comm_tally_closed_form() {
        let fed = small_federation(vec![vec![0], vec![0, 1], vec![1]], &[(0, 1), (1, 2)]);
        let mut state = initial_state(&fed, Algorithm::SheafDmfl, Fusion::Concat, &sheaf_params(), 3).unwrap();
        let t = Trainer::new(&fed, config(Algorithm::SheafDmfl), &mut state).unwrap();
        let (_, stats) = t.step(&state).unwrap();
        let sheaf = state.sheaf.as_ref().unwrap();
        let expect_sheaf: u64 = sheaf.edge_dims().iter().map(|&d| 4 * d as u64).sum();
        assert_eq!(stats.comm.sheaf, expect_sheaf);
        // each modality subgraph has exactly one edge
        let enc = state.models[0][0].encoders[0].n_params() as u64;
        assert_eq!(stats.comm.encoder, 2 * enc + 2 * enc);
    }
}
