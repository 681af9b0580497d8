//! Global objective, gradient blocks, accuracies and the convergence checks.
//!
//! The objective and all theory quantities are evaluated at the averaged
//! parameter vector `θ̃`, where every encoder of a gossiped modality is
//! replaced by the modality mean. Accuracies use the deployed per-client
//! parameters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ClientModel;
use crate::rng;
use crate::sheaf::SheafState;
use crate::trainer::{Algorithm, Federation, FederationState, StepStats, TheoryConstants, TrainConfig, Trainer};

/// Squared gradient norms of `Ψ` at `θ̃`, block by block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradBlocks {
    /// Heads: loss gradient plus sheaf neighbour term.
    pub omega: f64,
    pub beta: f64,
    /// Per modality id. Gossiped modalities use the gradient with respect to
    /// the shared averaged encoder; for Local it is the sum over clients.
    pub phi: Vec<f64>,
    pub maps: f64,
}

impl GradBlocks {
    pub fn total(&self) -> f64 {
        self.omega + self.beta + self.phi.iter().sum::<f64>() + self.maps
    }
}

/// Full-batch evaluation of `Ψ` and its gradient at `θ̃`.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub psi: f64,
    /// `Σ_i f_i(θ̃_i)`.
    pub f: f64,
    pub quadratic: f64,
    /// Loss gradients per client and slot at `θ̃`.
    pub grads: Vec<Vec<ClientModel>>,
    pub blocks: GradBlocks,
}

/// Replaces every gossiped encoder by its modality mean (ascending client
/// order). Local keeps per-client encoders.
pub fn tilde_models(fed: &Federation, algorithm: Algorithm, state: &FederationState) -> Vec<Vec<ClientModel>> {
    let mut models = state.models.clone();
    if !algorithm.gossips_encoders() {
        return models;
    }
    for k in 0..fed.graph.n_modalities() {
        let members = fed.modality_members(k);
        if members.is_empty() {
            continue;
        }
        let mut mean = state.encoder(members[0], k).expect("member").clone();
        for &i in &members[1..] {
            mean.scaled_add(1.0, state.encoder(i, k).expect("member"));
        }
        let inv = 1.0 / members.len() as f64;
        let flat: Vec<f64> = mean.flatten().into_iter().map(|x| x * inv).collect();
        for &i in members {
            let s = state.slot_with(i, k).expect("member");
            models[i][s].encoder_mut(k).expect("encoder").assign_flat(&flat);
        }
    }
    models
}

fn heads_of(models: &[Vec<ClientModel>]) -> Vec<Array1<f64>> {
    models.iter().map(|s| s[0].head.to_vector()).collect()
}

/// `Ψ` and its block gradients for explicit models (already averaged) and maps.
pub fn objective_at(
    fed: &Federation,
    algorithm: Algorithm,
    lambda: f64,
    models: &[Vec<ClientModel>],
    sheaf: Option<&SheafState>,
) -> Result<ObjectiveEval> {
    let per_client: Vec<Vec<(f64, ClientModel)>> = (0..fed.n_clients())
        .into_par_iter()
        .map(|i| models[i].iter().map(|m| m.loss_and_grads(&fed.train[i])).collect())
        .collect::<Result<_>>()?;
    let f: f64 = per_client.iter().flatten().map(|(l, _)| *l).sum();
    let heads = heads_of(models);
    let coupled = sheaf.filter(|_| algorithm.uses_sheaf());
    let (quadratic, neighbour) = match coupled {
        Some(sh) => (sh.quadratic(&heads)?, Some(sh.gradients(&heads)?)),
        None => (0.0, None),
    };
    let psi = f + 0.5 * lambda * quadratic;
    let grads: Vec<Vec<ClientModel>> =
        per_client.into_iter().map(|s| s.into_iter().map(|(_, g)| g).collect()).collect();

    let mut omega = 0.0;
    let mut beta = 0.0;
    for (i, slots) in grads.iter().enumerate() {
        for (s, g) in slots.iter().enumerate() {
            let mut d = g.head.to_vector();
            if let (Some(nb), 0) = (&neighbour, s) {
                if lambda != 0.0 {
                    d += &nb[i];
                }
            }
            omega += d.dot(&d);
            beta += g.attention_sq_norm();
        }
    }
    let n_mod = fed.graph.n_modalities();
    let mut phi = vec![0.0; n_mod];
    for (k, slot) in phi.iter_mut().enumerate() {
        let members = fed.modality_members(k);
        if members.is_empty() {
            continue;
        }
        let enc_grad = |i: usize| -> Vec<f64> {
            let s = models[i].iter().position(|m| m.position(k).is_some()).expect("member");
            grads[i][s].encoder(k).expect("encoder").flatten()
        };
        if algorithm.gossips_encoders() {
            let mut sum = enc_grad(members[0]);
            for &i in &members[1..] {
                for (a, b) in sum.iter_mut().zip(enc_grad(i)) {
                    *a += b;
                }
            }
            *slot = sum.iter().map(|x| x * x).sum();
        } else {
            *slot = members.iter().map(|&i| enc_grad(i).iter().map(|x| x * x).sum::<f64>()).sum();
        }
    }
    let maps = match coupled {
        Some(sh) if lambda != 0.0 => sh.map_gradient_sq_norm(&heads)?,
        _ => 0.0,
    };
    Ok(ObjectiveEval { psi, f, quadratic, grads, blocks: GradBlocks { omega, beta, phi, maps } })
}

/// Full-batch `Ψ` and gradient blocks at `θ̃` of `state`.
pub fn evaluate_objective(fed: &Federation, cfg: &TrainConfig, state: &FederationState) -> Result<ObjectiveEval> {
    let models = tilde_models(fed, cfg.algorithm, state);
    objective_at(fed, cfg.algorithm, cfg.lambda, &models, state.sheaf.as_ref())
}

/// Coordinates of the averaged parameter space: one copy of each gossiped
/// encoder, then every client's own parameters, then (optionally) the maps.
#[derive(Debug, Clone)]
pub struct TiedLayout {
    algorithm: Algorithm,
    template: Vec<Vec<ClientModel>>,
    sheaf: Option<SheafState>,
    tied: Vec<Option<Vec<usize>>>,
    /// Coordinate ranges: encoders, attention, heads, maps.
    pub encoder_coords: Vec<std::ops::Range<usize>>,
    pub attention_coords: Vec<std::ops::Range<usize>>,
    pub head_coords: Vec<std::ops::Range<usize>>,
    pub map_coords: Option<std::ops::Range<usize>>,
    len: usize,
}

impl TiedLayout {
    /// `models` must already be averaged (see [`tilde_models`]).
    pub fn new(
        fed: &Federation,
        algorithm: Algorithm,
        models: &[Vec<ClientModel>],
        sheaf: Option<&SheafState>,
        with_maps: bool,
    ) -> Self {
        let tied: Vec<Option<Vec<usize>>> = (0..fed.graph.n_modalities())
            .map(|k| {
                let m = fed.modality_members(k);
                (algorithm.gossips_encoders() && !m.is_empty()).then(|| m.to_vec())
            })
            .collect();
        let mut layout = Self {
            algorithm,
            template: models.to_vec(),
            sheaf: sheaf.cloned(),
            tied,
            encoder_coords: Vec::new(),
            attention_coords: Vec::new(),
            head_coords: Vec::new(),
            map_coords: None,
            len: 0,
        };
        let mut at = 0;
        for k in 0..layout.tied.len() {
            if let Some(members) = &layout.tied[k] {
                let n = layout.enc(models, members[0], k).n_params();
                layout.encoder_coords.push(at..at + n);
                at += n;
            }
        }
        for slots in models {
            for m in slots {
                for (e, &k) in m.encoders.iter().zip(&m.modalities) {
                    if layout.tied[k].is_none() {
                        layout.encoder_coords.push(at..at + e.n_params());
                        at += e.n_params();
                    }
                }
                let na = m.attention.iter().flatten().map(|b| b.len()).sum::<usize>();
                if na > 0 {
                    layout.attention_coords.push(at..at + na);
                    at += na;
                }
                layout.head_coords.push(at..at + m.head.dim());
                at += m.head.dim();
            }
        }
        if with_maps && algorithm.uses_sheaf() {
            if let Some(sh) = sheaf {
                layout.map_coords = Some(at..at + sh.n_map_params());
                at += sh.n_map_params();
            }
        }
        layout.len = at;
        layout
    }

    fn enc<'m>(&self, models: &'m [Vec<ClientModel>], i: usize, k: usize) -> &'m crate::model::Encoder {
        models[i].iter().find_map(|m| m.encoder(k)).expect("member holds modality")
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn walk<F: FnMut(&ClientModel, usize, usize)>(&self, models: &[Vec<ClientModel>], mut f: F) {
        for (i, slots) in models.iter().enumerate() {
            for (s, m) in slots.iter().enumerate() {
                f(m, i, s);
            }
        }
    }

    /// Flattens per-client values (parameters or tangents). Tied encoders
    /// are read from the first member.
    pub fn gather(&self, models: &[Vec<ClientModel>], sheaf: Option<&SheafState>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len);
        for (k, t) in self.tied.iter().enumerate() {
            if let Some(members) = t {
                out.extend(self.enc(models, members[0], k).flatten());
            }
        }
        self.walk(models, |m, _, _| {
            for (e, &k) in m.encoders.iter().zip(&m.modalities) {
                if self.tied[k].is_none() {
                    out.extend(e.flatten());
                }
            }
            for b in m.attention.iter().flatten() {
                out.extend(b.iter().copied());
            }
            out.extend(m.head.to_vector());
        });
        if self.map_coords.is_some() {
            out.extend(sheaf.expect("maps in layout").flatten());
        }
        out
    }

    /// Flattens per-client gradients; tied encoder gradients are summed over
    /// members in ascending client order.
    pub fn gather_grads(&self, grads: &[Vec<ClientModel>], map_grads: Option<&[f64]>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len);
        for (k, t) in self.tied.iter().enumerate() {
            if let Some(members) = t {
                let mut sum = self.enc(grads, members[0], k).flatten();
                for &i in &members[1..] {
                    for (a, b) in sum.iter_mut().zip(self.enc(grads, i, k).flatten()) {
                        *a += b;
                    }
                }
                out.extend(sum);
            }
        }
        self.walk(grads, |m, _, _| {
            for (e, &k) in m.encoders.iter().zip(&m.modalities) {
                if self.tied[k].is_none() {
                    out.extend(e.flatten());
                }
            }
            for b in m.attention.iter().flatten() {
                out.extend(b.iter().copied());
            }
            out.extend(m.head.to_vector());
        });
        if self.map_coords.is_some() {
            out.extend_from_slice(map_grads.expect("map gradients"));
        }
        out
    }

    /// Inverse of [`gather`](Self::gather): copies tied encoders into every member.
    pub fn scatter(&self, flat: &[f64]) -> Result<(Vec<Vec<ClientModel>>, Option<SheafState>)> {
        if flat.len() != self.len {
            return Err(Error::DimensionMismatch(format!("{} values for {} coordinates", flat.len(), self.len)));
        }
        let mut models = self.template.clone();
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &flat[at..at + n];
            at += n;
            s
        };
        for (k, t) in self.tied.iter().enumerate() {
            if let Some(members) = t {
                let n = self.enc(&self.template, members[0], k).n_params();
                let vals = take(n);
                for &i in members {
                    let m = models[i].iter_mut().find(|m| m.position(k).is_some()).expect("member");
                    m.encoder_mut(k).expect("encoder").assign_flat(vals);
                }
            }
        }
        for slots in models.iter_mut() {
            for m in slots.iter_mut() {
                let mods = m.modalities.clone();
                for (p, &k) in mods.iter().enumerate() {
                    if self.tied[k].is_none() {
                        let n = m.encoders[p].n_params();
                        m.encoders[p].assign_flat(take(n));
                    }
                }
                if let Some(bs) = m.attention.as_mut() {
                    for b in bs.iter_mut() {
                        let n = b.len();
                        b.assign(&ArrayView1::from(take(n)));
                    }
                }
                let n = m.head.dim();
                m.head.set_vector(ArrayView1::from(take(n)))?;
            }
        }
        let sheaf = match (&self.sheaf, &self.map_coords) {
            (Some(sh), Some(r)) => {
                let mut sh = sh.clone();
                sh.unflatten(take(r.len()))?;
                Some(sh)
            }
            (sh, _) => sh.clone(),
        };
        Ok((models, sheaf))
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }
}

/// Flat `∇Ψ` at the averaged parameters (maps last), matching
/// [`TiedLayout::gather`].
pub fn flat_gradient(
    fed: &Federation,
    lambda: f64,
    layout: &TiedLayout,
    eval: &ObjectiveEval,
    models: &[Vec<ClientModel>],
    sheaf: Option<&SheafState>,
) -> Result<Vec<f64>> {
    let mut grads = eval.grads.clone();
    if let (Some(sh), true) = (sheaf, layout.algorithm.uses_sheaf() && lambda != 0.0) {
        let nb = sh.gradients(&heads_of(models))?;
        for (i, slots) in grads.iter_mut().enumerate() {
            let v = slots[0].head.to_vector() + &nb[i];
            slots[0].head.set_vector(v.view())?;
        }
    }
    let map_flat = match (sheaf, &layout.map_coords) {
        (Some(sh), Some(_)) => {
            let mg = if lambda != 0.0 { sh.map_gradients(&heads_of(models))? } else { Vec::new() };
            let mut out = Vec::with_capacity(sh.n_map_params());
            for e in 0..sh.edges().len() {
                match mg.get(e) {
                    Some((a, b)) => out.extend(a.iter().chain(b.iter()).copied()),
                    None => {
                        let (a, b) = sh.edge_maps(e);
                        out.extend(std::iter::repeat_n(0.0, a.len() + b.len()));
                    }
                }
            }
            Some(out)
        }
        _ => None,
    };
    let _ = fed;
    Ok(layout.gather_grads(&grads, map_flat.as_deref()))
}

/// `Ψ` as a function of the flat averaged parameters.
pub fn psi_flat(fed: &Federation, lambda: f64, layout: &TiedLayout, flat: &[f64]) -> Result<f64> {
    let (models, sheaf) = layout.scatter(flat)?;
    let mut f = 0.0;
    for (i, slots) in models.iter().enumerate() {
        for m in slots {
            f += m.loss(&fed.train[i])?;
        }
    }
    let q = match (&sheaf, layout.algorithm.uses_sheaf()) {
        (Some(sh), true) => sh.quadratic(&heads_of(&models))?,
        _ => 0.0,
    };
    Ok(f + 0.5 * lambda * q)
}

/// Gauss–Newton spectral norm of `Ψ` over the averaged parameters, by
/// `iterations` power steps. Jacobian–vector products use central
/// differences of the logits; the sheaf term contributes `λ L_F` exactly.
pub fn gauss_newton_norm(
    fed: &Federation,
    algorithm: Algorithm,
    lambda: f64,
    models: &[Vec<ClientModel>],
    sheaf: Option<&SheafState>,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    let layout = TiedLayout::new(fed, algorithm, models, sheaf, false);
    let base_fwd: Vec<Vec<crate::model::Forward>> = (0..fed.n_clients())
        .into_par_iter()
        .map(|i| models[i].iter().map(|m| m.forward(&fed.train[i])).collect())
        .collect::<Result<_>>()?;
    let coupled = sheaf.filter(|_| algorithm.uses_sheaf() && lambda != 0.0);
    let eps = 1e-6;
    let mut failure: Option<Error> = None;
    let apply = |v: ArrayView1<f64>| -> Array1<f64> {
        let run = || -> Result<Array1<f64>> {
            let v = v.to_vec();
            let (tangent, _) = layout.scatter(&v)?;
            let grads: Vec<Vec<ClientModel>> = (0..fed.n_clients())
                .into_par_iter()
                .map(|i| {
                    models[i]
                        .iter()
                        .zip(&tangent[i])
                        .zip(&base_fwd[i])
                        .map(|((m, t), fwd)| {
                            let batch = &fed.train[i];
                            let mut plus = m.clone();
                            plus.scaled_add(eps, t);
                            let mut minus = m.clone();
                            minus.scaled_add(-eps, t);
                            let u = (plus.forward(batch)?.logits - minus.forward(batch)?.logits) / (2.0 * eps);
                            let hu = softmax_hessian_apply(&fwd.logits, &u) / batch.len() as f64;
                            m.backward(batch, fwd, hu.view())
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
            let mut grads = grads;
            if let Some(sh) = coupled {
                let nb = sh.gradients(&heads_of(&tangent))?;
                for (i, slots) in grads.iter_mut().enumerate() {
                    let w = slots[0].head.to_vector() + &nb[i];
                    slots[0].head.set_vector(w.view())?;
                }
            }
            Ok(Array1::from(layout.gather_grads(&grads, None)))
        };
        match run() {
            Ok(x) => x,
            Err(e) => {
                failure.get_or_insert(e);
                Array1::zeros(v.len())
            }
        }
    };
    let mut g = rng::rng_for(seed, &[rng::stream::SMOOTHNESS]);
    let start: Array1<f64> = (0..layout.len()).map(|_| g.random::<f64>() - 0.5).collect();
    let est = linalg::rayleigh_power(apply, start, iterations);
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(est)
}

/// Row-wise `(diag(p) − p pᵀ) u` with `p = softmax(logits)`.
fn softmax_hessian_apply(logits: &Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(u.raw_dim());
    for ((z, ur), mut o) in logits.axis_iter(Axis(0)).zip(u.axis_iter(Axis(0))).zip(out.axis_iter_mut(Axis(0))) {
        let p = crate::model::softmax(z);
        let pu = p.dot(&ur);
        for c in 0..p.len() {
            o[c] = p[c] * (ur[c] - pu);
        }
    }
    out
}

/// Smoothness estimate and norm bounds at the initial averaged parameters.
pub fn theory_constants(fed: &Federation, cfg: &TrainConfig, init: &FederationState) -> Result<TheoryConstants> {
    let models = tilde_models(fed, cfg.algorithm, init);
    let gn = gauss_newton_norm(fed, cfg.algorithm, cfg.lambda, &models, init.sheaf.as_ref(), 50, 0)?;
    if !(gn.is_finite() && gn > 0.0) {
        return Err(Error::NonFinite(format!("smoothness estimate {gn}")));
    }
    let head_bound = 10.0 * init.max_head_norm();
    let encoder_bound = (0..fed.graph.n_modalities())
        .map(|k| {
            fed.modality_members(k)
                .iter()
                .filter_map(|&i| init.encoder(i, k))
                .map(|e| e.sq_norm().sqrt())
                .fold(0.0, f64::max)
                * 10.0
        })
        .collect();
    let att = init.models.iter().flatten().map(|m| m.attention_sq_norm().sqrt()).fold(0.0, f64::max);
    Ok(TheoryConstants {
        smoothness: cfg.smoothness_safety * gn,
        head_bound,
        encoder_bound,
        attention_bound: 10.0 * (1.0 + att),
    })
}

/// Train and test accuracy at the deployed parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Per client, per model slot.
    pub client_train: Vec<Vec<f64>>,
    pub client_test: Vec<Vec<f64>>,
    /// Per modality group: mean over members, max over unimodal slots.
    pub group_train: Vec<f64>,
    pub group_test: Vec<f64>,
}

pub fn evaluate(fed: &Federation, state: &FederationState) -> Result<Accuracy> {
    let per: Vec<(Vec<f64>, Vec<f64>)> = (0..fed.n_clients())
        .into_par_iter()
        .map(|i| {
            let tr = state.models[i].iter().map(|m| m.accuracy(&fed.train[i])).collect::<Result<Vec<_>>>()?;
            let te = state.models[i].iter().map(|m| m.accuracy(&fed.test[i])).collect::<Result<Vec<_>>>()?;
            Ok((tr, te))
        })
        .collect::<Result<_>>()?;
    let (client_train, client_test): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    let group = |acc: &[Vec<f64>]| -> Vec<f64> {
        fed.groups
            .iter()
            .map(|g| {
                let n_slots = acc[g.members[0]].len();
                (0..n_slots)
                    .map(|s| g.members.iter().map(|&i| acc[i][s]).sum::<f64>() / g.members.len() as f64)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    };
    Ok(Accuracy { group_train: group(&client_train), group_test: group(&client_test), client_train, client_test })
}

/// One row of the run log, describing round `r → r+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `Ψ` at round `r`, and after the step.
    pub psi: f64,
    pub psi_next: f64,
    pub f_tilde: f64,
    pub sheaf_quadratic: f64,
    pub batch_loss: f64,
    /// Squared gradient norms of `Ψ` at round `r`.
    pub grad: GradBlocks,
    pub lemma1_error: Option<f64>,
    pub lemma2_residual: Option<f64>,
    /// Same inequality with the averaged-encoder coefficient `η_φ/|V_k|`.
    pub lemma2_residual_avg: Option<f64>,
    pub max_head_norm: f64,
    pub comm_sheaf: u64,
    pub comm_encoder: u64,
    pub comm_head: u64,
    /// Group accuracies after the step.
    pub train_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
}

/// Builds the log row for round `prev.round`.
pub fn round_record(
    trainer: &Trainer<'_>,
    prev: &FederationState,
    next: &FederationState,
    eval: &ObjectiveEval,
    next_eval: &ObjectiveEval,
    stats: &StepStats,
    acc: &Accuracy,
) -> RoundRecord {
    let algo = trainer.cfg.algorithm;
    let (l2, l2avg) = if algo.uses_sheaf() {
        (
            Some(lemma2_residual(trainer, prev, next, eval, next_eval, false)),
            Some(lemma2_residual(trainer, prev, next, eval, next_eval, true)),
        )
    } else {
        (None, None)
    };
    RoundRecord {
        round: prev.round,
        psi: eval.psi,
        psi_next: next_eval.psi,
        f_tilde: eval.f,
        sheaf_quadratic: eval.quadratic,
        batch_loss: stats.mean_loss,
        grad: eval.blocks.clone(),
        lemma1_error: algo.gossips_encoders().then_some(stats.lemma1_error),
        lemma2_residual: l2,
        lemma2_residual_avg: l2avg,
        max_head_norm: next.max_head_norm(),
        comm_sheaf: stats.comm.sheaf,
        comm_encoder: stats.comm.encoder,
        comm_head: stats.comm.head,
        train_acc: acc.group_train.clone(),
        test_acc: acc.group_test.clone(),
    }
}

/// `RHS − LHS` of the one-round descent inequality for `f` at `θ̃`:
///
/// `f(θ̃^{r+1}) ≤ f(θ̃^r) − η_β(1 − Lη_β/2)‖∇_β f‖² − Σ_k c_k(1 − Lη_φ/(2|V_k|))‖∇_φ̄_k f‖²
///   + Σ_i ∇_ω f_iᵀ Δω_i + (L/2)‖Δω‖²`
///
/// with `c_k = η_φ|V_k|²`, or `c_k = η_φ/|V_k|` when `averaged` is set.
pub fn lemma2_residual(
    trainer: &Trainer<'_>,
    prev: &FederationState,
    next: &FederationState,
    eval: &ObjectiveEval,
    next_eval: &ObjectiveEval,
    averaged: bool,
) -> f64 {
    let l = trainer.theory.smoothness;
    let s = &trainer.steps;
    let mut rhs = eval.f;
    let beta_sq: f64 = eval.grads.iter().flatten().map(ClientModel::attention_sq_norm).sum();
    rhs -= s.eta_beta * (1.0 - l * s.eta_beta / 2.0) * beta_sq;
    for (k, phi_sq) in eval.blocks.phi.iter().enumerate() {
        let v = trainer.fed.modality_members(k).len() as f64;
        if v == 0.0 {
            continue;
        }
        let eta = s.eta_phi[k];
        let c = if averaged { eta / v } else { eta * v * v };
        rhs -= c * (1.0 - l * eta / (2.0 * v)) * phi_sq;
    }
    let mut dsq = 0.0;
    for (i, slots) in eval.grads.iter().enumerate() {
        for (slot, g) in slots.iter().enumerate() {
            let d = next.models[i][slot].head.to_vector() - prev.models[i][slot].head.to_vector();
            rhs += g.head.to_vector().dot(&d);
            dsq += d.dot(&d);
        }
    }
    rhs += 0.5 * l * dsq;
    rhs - next_eval.f
}

/// Both sides of the averaged-gradient bound `(1/R) Σ ‖∇Ψ^r‖² ≤ Ψ⁰/(ρR)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub rounds: usize,
    pub lhs: f64,
    pub psi0: f64,
    pub psi_star: f64,
    /// `ρ` with map term `η(1 − ηλD̂²/2)`.
    pub rho: f64,
    /// `ρ` with map term `η(1 − ηλND̂²/2)`.
    pub rho_scaled: f64,
    pub rhs: Option<f64>,
    pub rhs_scaled: Option<f64>,
    pub margin: Option<f64>,
    pub margin_scaled: Option<f64>,
    pub holds: bool,
    pub holds_scaled: bool,
}

/// Evaluates the bound from a completed log. Terms for absent blocks
/// (attention under concat fusion, maps when `λ = 0`) are left out of `ρ`.
/// Returns `None` for algorithms without the sheaf coupling.
pub fn theorem1_check(trainer: &Trainer<'_>, log: &RunLog) -> Option<TheoremCheck> {
    let algo = trainer.cfg.algorithm;
    if !algo.uses_sheaf() || log.rows.is_empty() {
        return None;
    }
    let l = trainer.theory.smoothness;
    let s = &trainer.steps;
    let lambda = trainer.cfg.lambda;
    let d2 = trainer.theory.head_bound * trainer.theory.head_bound;
    let n = trainer.fed.n_clients() as f64;
    let mut terms = vec![s.alpha * (1.0 - l * s.alpha / 2.0)];
    if algo == Algorithm::SheafDmflAtt {
        terms.push(s.eta_beta * (1.0 - l * s.eta_beta / 2.0));
    }
    for k in 0..trainer.fed.graph.n_modalities() {
        let v = trainer.fed.modality_members(k).len() as f64;
        if v > 0.0 {
            let eta = s.eta_phi[k];
            terms.push(eta * v * v * (1.0 - l * eta / (2.0 * v)));
        }
    }
    let base = terms.iter().copied().fold(f64::INFINITY, f64::min);
    let (rho, rho_scaled) = if lambda > 0.0 {
        (
            base.min(s.eta_p * (1.0 - s.eta_p * lambda * d2 / 2.0)),
            base.min(s.eta_p * (1.0 - s.eta_p * lambda * n * d2 / 2.0)),
        )
    } else {
        (base, base)
    };
    let r = log.rows.len() as f64;
    let lhs = log.rows.iter().map(|row| row.grad.total()).sum::<f64>() / r;
    let psi0 = log.rows[0].psi;
    let side = |rho: f64| (rho > 0.0).then(|| psi0 / (rho * r));
    let rhs = side(rho);
    let rhs_scaled = side(rho_scaled);
    let margin = rhs.map(|x| x - lhs);
    let margin_scaled = rhs_scaled.map(|x| x - lhs);
    Some(TheoremCheck {
        rounds: log.rows.len(),
        lhs,
        psi0,
        psi_star: 0.0,
        rho,
        rho_scaled,
        rhs,
        rhs_scaled,
        holds: margin.is_some_and(|m| m > 0.0),
        holds_scaled: margin_scaled.is_some_and(|m| m > 0.0),
        margin,
        margin_scaled,
    })
}

/// Rows plus the metadata needed to render them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub algorithm: Algorithm,
    pub config_hash: String,
    pub group_labels: Vec<String>,
    pub n_modalities: usize,
    pub rows: Vec<RoundRecord>,
    /// Wall-clock seconds per round; kept out of `runlog.csv`.
    pub seconds: Vec<f64>,
}

/// Formats a float so the text round-trips exactly.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e15).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

impl RunLog {
    pub fn new(fed: &Federation, algorithm: Algorithm, config_hash: &str) -> Self {
        Self {
            algorithm,
            config_hash: config_hash.to_string(),
            group_labels: fed.groups.iter().map(|g| g.label()).collect(),
            n_modalities: fed.graph.n_modalities(),
            rows: Vec::new(),
            seconds: Vec::new(),
        }
    }

    pub fn push(&mut self, row: RoundRecord, seconds: f64) {
        self.rows.push(row);
        self.seconds.push(seconds);
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "round",
            "psi",
            "psi_next",
            "f_tilde",
            "sheaf_quadratic",
            "batch_loss",
            "grad_sq_total",
            "grad_sq_omega",
            "grad_sq_beta",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((0..self.n_modalities).map(|k| format!("grad_sq_phi_m{k}")));
        h.extend(
            [
                "grad_sq_p",
                "lemma1_max_err",
                "lemma2_residual",
                "lemma2_residual_avg",
                "max_head_norm",
                "comm_sheaf",
                "comm_encoder",
                "comm_head",
                "comm_total",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        h.extend(self.group_labels.iter().map(|g| format!("train_acc_{g}")));
        h.extend(self.group_labels.iter().map(|g| format!("test_acc_{g}")));
        h.push("config_hash".into());
        h
    }

    fn row_fields(&self, r: &RoundRecord) -> Vec<String> {
        let mut f = vec![
            r.round.to_string(),
            fmt_f64(r.psi),
            fmt_f64(r.psi_next),
            fmt_f64(r.f_tilde),
            fmt_f64(r.sheaf_quadratic),
            fmt_f64(r.batch_loss),
            fmt_f64(r.grad.total()),
            fmt_f64(r.grad.omega),
            fmt_f64(r.grad.beta),
        ];
        f.extend(r.grad.phi.iter().map(|&x| fmt_f64(x)));
        f.extend([
            fmt_f64(r.grad.maps),
            fmt_opt(r.lemma1_error),
            fmt_opt(r.lemma2_residual),
            fmt_opt(r.lemma2_residual_avg),
            fmt_f64(r.max_head_norm),
            r.comm_sheaf.to_string(),
            r.comm_encoder.to_string(),
            r.comm_head.to_string(),
            (r.comm_sheaf + r.comm_encoder + r.comm_head).to_string(),
        ]);
        f.extend(r.train_acc.iter().map(|&x| fmt_f64(x)));
        f.extend(r.test_acc.iter().map(|&x| fmt_f64(x)));
        f.push(self.config_hash.clone());
        f
    }

    /// The exact bytes of `runlog.csv`.
    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for r in &self.rows {
            w.write_record(self.row_fields(r))?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.csv_bytes()?)?;
        Ok(())
    }

    pub fn write_timing(&self, path: &Path) -> Result<()> {
        let mut out = String::from("round,seconds\n");
        for (r, s) in self.rows.iter().zip(&self.seconds) {
            let _ = writeln!(out, "{},{}", r.round, s);
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Largest per-round increase `Ψ^{r+1} − Ψ^r` (negative when every
    /// round decreased).
    pub fn max_psi_increase(&self) -> f64 {
        self.rows.iter().map(|r| r.psi_next - r.psi).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_lemma2_residual(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.lemma2_residual).reduce(f64::min)
    }

    pub fn max_lemma1_error(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.lemma1_error).reduce(f64::max)
    }

    pub fn comm_total(&self) -> u64 {
        self.rows.iter().map(|r| r.comm_sheaf + r.comm_encoder + r.comm_head).sum()
    }

    pub fn final_test_acc(&self) -> Option<&[f64]> {
        self.rows.last().map(|r| r.test_acc.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ClientGraph;
    use crate::model::{Fusion, ModelDims};
    use crate::sheaf::{InitScheme, SheafParams};
    use crate::trainer::initial_state;

    fn federation(sets: Vec<Vec<usize>>, edges: &[(usize, usize)], seed: u64) -> Federation {
        let n = sets.len();
        let graph = ClientGraph::new(n, edges, &sets).unwrap();
        let spec = crate::data::LatentTaskSpec {
            latent_dim: 3,
            n_classes: 3,
            modality_dims: vec![3, 2],
            noise_std: 0.3,
            seed,
        };
        let model = crate::data::LatentTaskModel::generate(&spec).unwrap();
        let data = crate::data::generate(
            &model,
            &graph,
            &crate::data::GenerateOptions { n_per_client: 12, heterogeneity: 0.5, split_frac: 0.75, seed },
        )
        .unwrap();
        let dims = ModelDims { input_dims: vec![3, 2], hidden: 3, embed_dims: vec![2, 2], n_classes: 3 };
        Federation::new(graph, dims, data).unwrap()
    }

    fn params(seed: u64) -> SheafParams {
        SheafParams { gamma: 0.5, lambda: 0.7, eta: 0.1, init: InitScheme::Random, sigma2: 0.5, seed }
    }

    fn cfg(algorithm: Algorithm) -> TrainConfig {
        TrainConfig { algorithm, lambda: 0.7, ..TrainConfig::default() }
    }

    #[test]
    fn lambda_zero_psi_is_loss_sum() {
        let fed = federation(vec![vec![0], vec![0, 1], vec![1]], &[(0, 1), (1, 2)], 1);
        let state = initial_state(&fed, Algorithm::SheafDmfl, Fusion::Concat, &params(1), 2).unwrap();
        let mut c = cfg(Algorithm::SheafDmfl);
        c.lambda = 0.0;
        let e = evaluate_objective(&fed, &c, &state).unwrap();
        assert_eq!(e.psi, e.f);
        assert_eq!(e.blocks.maps, 0.0);
    }

    #[test]
    fn zero_models_give_log_c() {
        let fed = federation(vec![vec![0], vec![0, 1]], &[(0, 1)], 3);
        let mut state = initial_state(&fed, Algorithm::SheafDmfl, Fusion::Concat, &params(3), 2).unwrap();
        for m in state.models.iter_mut().flatten() {
            m.scale(0.0);
        }
        let e = evaluate_objective(&fed, &cfg(Algorithm::SheafDmfl), &state).unwrap();
        assert!((e.f - 2.0 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(e.psi, e.f);
    }

    #[test]
    fn psi_matches_independent_sum() {
        let fed = federation(vec![vec![0], vec![0, 1], vec![1]], &[(0, 1), (1, 2), (0, 2)], 5);
        let state = initial_state(&fed, Algorithm::SheafDmflAtt, Fusion::Attention, &params(5), 2).unwrap();
        let e = evaluate_objective(&fed, &cfg(Algorithm::SheafDmflAtt), &state).unwrap();
        let mut f = 0.0;
        for i in 0..3 {
            let b = &fed.train[i];
            let logits = state.models[i][0].forward(b).unwrap().logits;
            for (row, &y) in logits.outer_iter().zip(&b.labels) {
                let m = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                f += (lse - row[y]) / b.len() as f64;
            }
        }
        let sh = state.sheaf.as_ref().unwrap();
        let omega = crate::sheaf::stack_heads(&state.heads());
        let p = sh.assemble_block_matrix();
        let po = p.dot(&omega);
        let want = f + 0.5 * 0.7 * po.dot(&po);
        assert!((e.psi - want).abs() < 1e-10, "{} vs {want}", e.psi);
    }

    #[test]
    fn flat_gradient_matches_finite_differences() {
        for fusion in [Fusion::Concat, Fusion::Attention] {
            let algo = if fusion == Fusion::Concat { Algorithm::SheafDmfl } else { Algorithm::SheafDmflAtt };
            let fed = federation(vec![vec![0], vec![0, 1], vec![0, 1]], &[(0, 1), (1, 2)], 7);
            let mut state = initial_state(&fed, algo, fusion, &params(7), 4).unwrap();
            for (i, slots) in state.models.iter_mut().enumerate() {
                for b in slots[0].attention.iter_mut().flatten() {
                    b.fill(0.3 * i as f64 - 0.2);
                }
            }
            let c = cfg(algo);
            let models = tilde_models(&fed, algo, &state);
            let layout = TiedLayout::new(&fed, algo, &models, state.sheaf.as_ref(), true);
            let e = objective_at(&fed, algo, c.lambda, &models, state.sheaf.as_ref()).unwrap();
            let g = flat_gradient(&fed, c.lambda, &layout, &e, &models, state.sheaf.as_ref()).unwrap();
            let x = layout.gather(&models, state.sheaf.as_ref());
            let psi0 = psi_flat(&fed, c.lambda, &layout, &x).unwrap();
            assert!((psi0 - e.psi).abs() < 1e-12);
            let total: f64 = g.iter().map(|v| v * v).sum();
            assert!((total - e.blocks.total()).abs() <= 1e-10 * (1.0 + total), "{total} vs {}", e.blocks.total());
            let eps = 1e-5;
            for n in 0..x.len() {
                let mut xp = x.clone();
                xp[n] += eps;
                let mut xm = x.clone();
                xm[n] -= eps;
                let fd = (psi_flat(&fed, c.lambda, &layout, &xp).unwrap()
                    - psi_flat(&fed, c.lambda, &layout, &xm).unwrap())
                    / (2.0 * eps);
                assert!((fd - g[n]).abs() <= 1e-4 * fd.abs().max(g[n].abs()).max(1e-3), "coord {n}: {fd} vs {}", g[n]);
            }
        }
    }

    #[test]
    fn gauss_newton_positive_and_deterministic() {
        let fed = federation(vec![vec![0], vec![0, 1], vec![1]], &[(0, 1), (1, 2)], 9);
        let state = initial_state(&fed, Algorithm::SheafDmflAtt, Fusion::Attention, &params(9), 2).unwrap();
        let models = tilde_models(&fed, Algorithm::SheafDmflAtt, &state);
        let a = gauss_newton_norm(&fed, Algorithm::SheafDmflAtt, 0.7, &models, state.sheaf.as_ref(), 30, 0).unwrap();
        let b = gauss_newton_norm(&fed, Algorithm::SheafDmflAtt, 0.7, &models, state.sheaf.as_ref(), 30, 0).unwrap();
        assert!(a > 0.0);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn duplicated_test_set_same_accuracy() {
        let fed = federation(vec![vec![0], vec![0, 1]], &[(0, 1)], 11);
        let state = initial_state(&fed, Algorithm::Local, Fusion::Concat, &params(11), 2).unwrap();
        let m = &state.models[1][0];
        let t = &fed.test[1];
        assert_eq!(m.accuracy(t).unwrap(), m.accuracy(&t.repeated(3)).unwrap());
    }

    #[test]
    fn fmt_round_trips() {
        for x in [0.0, 1.0, -2.5, 1e-20, 3.3e17, 0.1 + 0.2, std::f64::consts::PI * 1e-7] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
