//! Property checks behind `sheaf-sim verify` and the acceptance tests.
//!
//! Each check returns a [`PropertyResult`] with a one-line detail carrying
//! the measured margin. The `fast` level runs the algebraic and small-run
//! properties; `full` adds the reference-scenario training runs.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{self, ExperimentConfig};
use crate::data::{self, GenerateOptions, LatentTaskModel, LatentTaskSpec};
use crate::error::Result;
use crate::graph::{self, ClientGraph, MixingMatrix};
use crate::metrics::{self, TiedLayout};
use crate::model::{Fusion, ModelDims};
use crate::rng::rng_for;
use crate::runner::{self, RunOptions, RunOutcome};
use crate::sheaf::{InitScheme, SheafParams, SheafState};
use crate::trainer::{self, Algorithm, Federation, FederationState, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

/// Deliberate defects used to check that the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Perturbs one off-diagonal mixing weight.
    Mixing,
}

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }

    fn error(name: &str, e: impl fmt::Display) -> Self {
        Self::new(name, false, format!("error: {e}"))
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn wrap(name: &str, r: Result<PropertyResult>) -> PropertyResult {
    r.unwrap_or_else(|e| PropertyResult::error(name, e))
}

/// Random connected graph on `n` vertices: a random tree plus extra edges.
pub fn random_connected_edges<R: Rng>(n: usize, extra_p: f64, g: &mut R) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(g);
    let mut edges = Vec::new();
    for v in 1..n {
        let u = order[g.random_range(0..v)];
        edges.push((u.min(order[v]), u.max(order[v])));
    }
    for i in 0..n {
        for j in i + 1..n {
            if !edges.contains(&(i, j)) && g.random::<f64>() < extra_p {
                edges.push((i, j));
            }
        }
    }
    edges.sort_unstable();
    edges
}

/// Small random federation with two modalities, every modality subgraph
/// connected. Used by the gradient and training checks.
pub fn random_federation(seed: u64, n_clients: usize) -> Result<Federation> {
    let mut g = rng_for(seed, &[0xfed]);
    let (edges, sets) = loop {
        let edges = random_connected_edges(n_clients, 0.4, &mut g);
        let sets: Vec<Vec<usize>> = (0..n_clients)
            .map(|_| match g.random_range(0..3) {
                0 => vec![0],
                1 => vec![1],
                _ => vec![0, 1],
            })
            .collect();
        let graph = ClientGraph::with_modalities(n_clients, &edges, &sets, 2)?;
        if graph::modality_mixing(&graph).is_ok() {
            break (edges, sets);
        }
    };
    let graph = ClientGraph::with_modalities(n_clients, &edges, &sets, 2)?;
    let m = [g.random_range(2..5), g.random_range(2..5)];
    let l = g.random_range(2..4);
    let spec = LatentTaskSpec { latent_dim: 3, n_classes: 3, modality_dims: m.to_vec(), noise_std: 0.3, seed };
    let task = LatentTaskModel::generate(&spec)?;
    let data = data::generate(
        &task,
        &graph,
        &GenerateOptions { n_per_client: 10, heterogeneity: 0.4, split_frac: 0.6, seed },
    )?;
    let dims = ModelDims { input_dims: m.to_vec(), hidden: g.random_range(2..5), embed_dims: vec![l, l], n_classes: 3 };
    Federation::new(graph, dims, data)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst block-wise relative error between the analytic `∇Ψ` and central
/// differences, per block `[Φ, β, ω, P]`, on one random instance.
pub fn gradient_errors(seed: u64, fusion: Fusion, eps: f64) -> Result<[f64; 4]> {
    let fed = random_federation(seed, 3 + (seed % 2) as usize)?;
    let mut g = rng_for(seed, &[0x9d]);
    let algo = if fusion == Fusion::Concat { Algorithm::SheafDmfl } else { Algorithm::SheafDmflAtt };
    let lambda = g.random_range(0.1..1.5);
    let params =
        SheafParams { gamma: g.random_range(0.2..1.0), lambda, eta: 0.0, init: InitScheme::Random, sigma2: 0.5, seed };
    let mut state = trainer::initial_state(&fed, algo, fusion, &params, seed)?;
    // perturb away from the symmetric initialization
    for slots in state.models.iter_mut() {
        for m in slots.iter_mut() {
            for b in m.attention.iter_mut().flatten() {
                b.mapv_inplace(|_| 0.5 * g.sample::<f64, _>(StandardNormal));
            }
            m.head.b.mapv_inplace(|_| 0.3 * g.sample::<f64, _>(StandardNormal));
        }
    }
    fd_gradient_errors(&fed, algo, lambda, &state, eps)
}

/// Block-wise relative error `[Φ, β, ω, P]` of the analytic gradient of `Ψ`
/// at the averaged-encoder point of `state`.
pub fn fd_gradient_errors(
    fed: &Federation,
    algo: Algorithm,
    lambda: f64,
    state: &FederationState,
    eps: f64,
) -> Result<[f64; 4]> {
    let models = metrics::tilde_models(fed, algo, state);
    let sheaf = state.sheaf.as_ref();
    let layout = TiedLayout::new(fed, algo, &models, sheaf, true);
    let eval = metrics::objective_at(fed, algo, lambda, &models, sheaf)?;
    let grad = metrics::flat_gradient(fed, lambda, &layout, &eval, &models, sheaf)?;
    let x = layout.gather(&models, sheaf);
    let fd = (0..x.len())
        .into_par_iter()
        .map(|n| {
            let mut xp = x.clone();
            xp[n] += eps;
            let mut xm = x.clone();
            xm[n] -= eps;
            Ok((metrics::psi_flat(fed, lambda, &layout, &xp)? - metrics::psi_flat(fed, lambda, &layout, &xm)?)
                / (2.0 * eps))
        })
        .collect::<Result<Vec<f64>>>()?;
    let block = |ranges: &[std::ops::Range<usize>]| -> f64 {
        let idx: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        let a: Vec<f64> = idx.iter().map(|&i| grad[i]).collect();
        let b: Vec<f64> = idx.iter().map(|&i| fd[i]).collect();
        rel_err(&a, &b)
    };
    let maps: Vec<_> = layout.map_coords.iter().cloned().collect();
    Ok([block(&layout.encoder_coords), block(&layout.attention_coords), block(&layout.head_coords), block(&maps)])
}

/// Analytic gradient of `Ψ` against central differences on random
/// instances, both fusion modes, all parameter blocks.
pub fn check_gradients(n_seeds: u64) -> PropertyResult {
    let name = "gradient blocks match finite differences";
    let mut worst = [0.0f64; 4];
    for seed in 0..n_seeds {
        for fusion in [Fusion::Concat, Fusion::Attention] {
            match gradient_errors(seed, fusion, 1e-5) {
                Ok(e) => {
                    for (w, v) in worst.iter_mut().zip(e) {
                        *w = w.max(v);
                    }
                }
                Err(e) => return PropertyResult::error(name, e),
            }
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    PropertyResult::new(
        name,
        max <= 1e-4,
        format!(
            "{n_seeds} seeds x 2 fusions; worst rel err Φ {:.1e}, β {:.1e}, ω {:.1e}, P {:.1e} (tol 1e-4)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn to_nalgebra(a: &ndarray::Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

/// Gradient blocks against finite differences at round 0 of a configured run.
pub fn check_gradients_at_init(cfg: &ExperimentConfig) -> PropertyResult {
    let name = "gradient blocks match finite differences at round 0";
    let run = || -> Result<PropertyResult> {
        let fed = cfg.federation()?;
        let tcfg = cfg.train_config();
        let mut state =
            trainer::initial_state(&fed, tcfg.algorithm, cfg.fusion(), &cfg.sheaf_params(), cfg.model_seed())?;
        let t = Trainer::new(&fed, tcfg, &mut state)?;
        let e = fd_gradient_errors(&fed, t.cfg.algorithm, t.cfg.lambda, &state, 1e-5)?;
        let max = e.iter().copied().fold(0.0, f64::max);
        Ok(PropertyResult::new(
            name,
            max <= 1e-4,
            format!("rel err Φ {:.1e}, β {:.1e}, ω {:.1e}, P {:.1e} (tol 1e-4)", e[0], e[1], e[2], e[3]),
        ))
    };
    wrap(name, run())
}

/// Quadratic form against block assembly; Laplacian symmetric and PSD.
pub fn check_sheaf_algebra(n_instances: u64) -> PropertyResult {
    let name = "sheaf quadratic = ωᵀPᵀPω, Laplacian symmetric PSD";
    let mut worst_q: f64 = 0.0;
    let mut worst_sym: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    for seed in 0..n_instances {
        let mut g = rng_for(seed, &[0x5eaf]);
        let n = g.random_range(2..=5);
        let edges = random_connected_edges(n, 0.5, &mut g);
        let graph = match ClientGraph::new(n, &edges, &vec![vec![0]; n]) {
            Ok(x) => x,
            Err(e) => return PropertyResult::error(name, e),
        };
        let dims: Vec<usize> = (0..n).map(|_| g.random_range(1..=8)).collect();
        let params = SheafParams {
            gamma: g.random_range(0.05..=1.0),
            lambda: 1.0,
            eta: 0.1,
            init: if seed % 2 == 0 { InitScheme::Random } else { InitScheme::Identity },
            sigma2: g.random_range(0.1..2.0),
            seed,
        };
        let sh = match SheafState::init(&graph, &dims, &params) {
            Ok(x) => x,
            Err(e) => return PropertyResult::error(name, e),
        };
        let omega: Vec<Array1<f64>> =
            dims.iter().map(|&d| (0..d).map(|_| g.sample::<f64, _>(StandardNormal)).collect()).collect();
        let q = match sh.quadratic(&omega) {
            Ok(q) => q,
            Err(e) => return PropertyResult::error(name, e),
        };
        let w = crate::sheaf::stack_heads(&omega);
        let l = sh.laplacian();
        let q2 = w.dot(&l.dot(&w));
        worst_q = worst_q.max((q - q2).abs() / q.abs().max(1.0));
        worst_sym = worst_sym.max((&l - &l.t()).iter().fold(0.0, |a, x| a.max(x.abs())));
        let eig = SymmetricEigen::new(to_nalgebra(&l));
        min_eig = min_eig.min(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min));
    }
    PropertyResult::new(
        name,
        worst_q <= 1e-10 && worst_sym == 0.0 && min_eig >= -1e-10,
        format!(
            "{n_instances} instances; max |Δq| {worst_q:.1e}, asymmetry {worst_sym:.1e}, min eigenvalue {min_eig:.2e}"
        ),
    )
}

/// Second-largest eigenvalue modulus by dense decomposition.
pub fn reference_gap(w: &MixingMatrix) -> f64 {
    let n = w.len();
    if n <= 1 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(to_nalgebra(&w.weights));
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    1.0 - ev[1].abs().max(ev[n - 1].abs())
}

/// Mixing matrices of random modality subgraphs: symmetric, doubly
/// stochastic, positive spectral gap matching a dense eigensolver.
pub fn check_mixing(n_subgraphs: usize, fault: Option<Fault>) -> PropertyResult {
    let name = "mixing matrices symmetric, doubly stochastic, gap > 0";
    let mut seen = 0;
    let mut worst_stoch: f64 = 0.0;
    let mut asym = 0;
    let mut min_gap = f64::INFINITY;
    let mut worst_gap_err: f64 = 0.0;
    let mut seed = 0u64;
    while seen < n_subgraphs {
        seed += 1;
        let mut g = rng_for(seed, &[0x313]);
        let n = g.random_range(2..=10);
        let edges = random_connected_edges(n, 0.3, &mut g);
        let sets: Vec<Vec<usize>> = (0..n).map(|_| if g.random::<f64>() < 0.7 { vec![0] } else { vec![1] }).collect();
        let Ok(graph) = ClientGraph::with_modalities(n, &edges, &sets, 2) else { continue };
        let Ok(mixing) = graph::modality_mixing(&graph) else { continue };
        for mut w in mixing.into_iter().flatten() {
            if fault == Some(Fault::Mixing) && w.len() > 1 {
                w.weights[[0, 1]] += 1e-3;
            }
            worst_stoch = worst_stoch.max(w.stochasticity_error());
            if !w.is_symmetric() {
                asym += 1;
            }
            match graph::spectral_gap(&w) {
                Ok(gap) => {
                    min_gap = min_gap.min(gap);
                    worst_gap_err = worst_gap_err.max((gap - reference_gap(&w)).abs());
                }
                Err(e) => return PropertyResult::error(name, e),
            }
            seen += 1;
        }
    }
    PropertyResult::new(
        name,
        worst_stoch <= 1e-12 && asym == 0 && min_gap > 0.0 && worst_gap_err < 1e-6,
        format!(
            "{seen} subgraphs; max stochasticity err {worst_stoch:.1e}, asymmetric {asym}, min gap {min_gap:.3e}, gap vs eigensolver {worst_gap_err:.1e}"
        ),
    )
}

fn small_trainer_cfg(algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        rounds: 5,
        alpha: Some(0.05),
        eta_phi: Some(0.05),
        eta_beta: Some(0.05),
        eta_p: Some(0.01),
        lambda: if algorithm.uses_sheaf() { 0.5 } else { 0.0 },
        ..TrainConfig::default()
    }
}

/// Gossip preserves the per-modality mean and contracts to consensus
/// within `⌈log(1/ε)/gap⌉` rounds.
pub fn check_gossip(n_instances: u64) -> PropertyResult {
    let name = "gossip preserves modality means and reaches consensus";
    let run = || -> Result<(f64, f64)> {
        let mut worst_mean: f64 = 0.0;
        let mut worst_final: f64 = 0.0;
        for seed in 0..n_instances {
            let fed = random_federation(seed, 4 + (seed % 3) as usize)?;
            let params =
                SheafParams { gamma: 0.5, lambda: 0.5, eta: 0.0, init: InitScheme::Identity, sigma2: 1.0, seed };
            let mut state = trainer::initial_state(&fed, Algorithm::SheafDmfl, Fusion::Concat, &params, seed)?;
            let mut g = rng_for(seed, &[0x6055]);
            for slots in state.models.iter_mut() {
                for e in slots[0].encoders.iter_mut() {
                    let v: Vec<f64> = e.flatten().iter().map(|_| g.sample::<f64, _>(StandardNormal)).collect();
                    e.assign_flat(&v);
                }
            }
            let t = Trainer::new(&fed, small_trainer_cfg(Algorithm::SheafDmfl), &mut state)?;
            for k in 0..2 {
                let Some(w) = &fed.mixing[k] else { continue };
                let gap = graph::spectral_gap(w)?;
                let eps: f64 = 1e-8;
                let rounds = ((1.0 / eps).ln() / gap).ceil() as usize;
                let mean_of = |s: &FederationState| -> Vec<f64> {
                    let mut acc = vec![0.0; s.encoder(w.members[0], k).expect("member").n_params()];
                    for &i in &w.members {
                        for (a, x) in acc.iter_mut().zip(s.encoder(i, k).expect("member").flatten()) {
                            *a += x;
                        }
                    }
                    acc.iter().map(|a| a / w.members.len() as f64).collect()
                };
                let spread = |s: &FederationState| -> f64 {
                    let mut d: f64 = 0.0;
                    for &i in &w.members {
                        for &j in &w.members {
                            let a = s.encoder(i, k).expect("member").flatten();
                            let b = s.encoder(j, k).expect("member").flatten();
                            d = d.max(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
                        }
                    }
                    d
                };
                let m0 = mean_of(&state);
                let d0 = spread(&state);
                let mut s = state.clone();
                for _ in 0..rounds {
                    s = t.gossip_encoders(&s);
                }
                let m1 = mean_of(&s);
                worst_mean = worst_mean.max(m0.iter().zip(&m1).fold(0.0, |a, (x, y)| a.max((x - y).abs())));
                if d0 > 0.0 {
                    worst_final = worst_final.max(spread(&s) / (d0 * w.len() as f64));
                }
            }
        }
        Ok((worst_mean, worst_final))
    };
    match run() {
        Ok((m, d)) => PropertyResult::new(
            name,
            m <= 1e-12 && d < 1e-8,
            format!("{n_instances} instances; mean drift {m:.1e} (tol 1e-12), relative spread after bound {d:.1e} (tol 1e-8)"),
        ),
        Err(e) => PropertyResult::error(name, e),
    }
}

/// Group head averaging in DSGD preserves group means.
pub fn check_dsgd_head_mean(n_instances: u64) -> PropertyResult {
    let name = "DSGD head averaging preserves group means";
    let run = || -> Result<f64> {
        let mut worst: f64 = 0.0;
        for seed in 0..n_instances {
            let fed = random_federation(seed, 5)?;
            let Ok(gm) = fed.group_mixing() else { continue };
            let params = SheafParams::default();
            let mut state = trainer::initial_state(&fed, Algorithm::Dsgd, Fusion::Concat, &params, seed)?;
            let mut cfg = small_trainer_cfg(Algorithm::Dsgd);
            cfg.alpha = Some(0.0);
            let t = Trainer::new(&fed, cfg, &mut state)?;
            let grads = t.gradients(&state)?;
            let mut next = state.clone();
            t.update_heads(&state, &mut next, &grads)?;
            for w in &gm {
                for s in 0..state.models[w.members[0]].len() {
                    let mean = |st: &FederationState| {
                        let mut acc = Array1::<f64>::zeros(st.models[w.members[0]][s].head.dim());
                        for &i in &w.members {
                            acc += &st.models[i][s].head.to_vector();
                        }
                        acc / w.members.len() as f64
                    };
                    let d = (mean(&state) - mean(&next)).iter().fold(0.0f64, |a, x| a.max(x.abs()));
                    worst = worst.max(d);
                }
            }
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => PropertyResult::new(name, w <= 1e-12, format!("max mean drift {w:.1e} (tol 1e-12)")),
        Err(e) => PropertyResult::error(name, e),
    }
}

/// Averaged-encoder identity on a short random run.
pub fn check_lemma1_small(n_instances: u64) -> PropertyResult {
    let name = "averaged encoder moves by -η_φ · mean gradient";
    let run = || -> Result<f64> {
        let mut worst: f64 = 0.0;
        for seed in 0..n_instances {
            let fed = random_federation(seed, 5)?;
            let params = SheafParams { gamma: 0.5, lambda: 0.5, eta: 0.0, init: InitScheme::Random, sigma2: 0.5, seed };
            let mut s = trainer::initial_state(&fed, Algorithm::SheafDmflAtt, Fusion::Attention, &params, seed)?;
            let t = Trainer::new(&fed, small_trainer_cfg(Algorithm::SheafDmflAtt), &mut s)?;
            for _ in 0..5 {
                let (n, stats) = t.step(&s)?;
                worst = worst.max(stats.lemma1_error);
                s = n;
            }
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => PropertyResult::new(name, w <= 1e-10, format!("max deviation {w:.1e} (tol 1e-10)")),
        Err(e) => PropertyResult::error(name, e),
    }
}

fn single_modality_config(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = base.clone();
    // every client keeps only its lowest modality
    c.graph.modalities = c.graph.modalities.iter().map(|s| vec![*s.iter().min().expect("nonempty")]).collect();
    c.train.rounds = 30;
    c
}

/// `λ = 0` Sheaf-DMFL with one modality per client equals encoder-gossip
/// DSGD bit for bit.
pub fn check_lambda_zero_equals_dsgd(base: &ExperimentConfig) -> PropertyResult {
    let name = "λ=0 single-modality sheaf run is bitwise DSGD (encoder gossip only)";
    let run = || -> Result<PropertyResult> {
        let mut a = single_modality_config(base);
        a.train.algorithm = Algorithm::SheafDmfl;
        a.train.lambda = Some(0.0);
        a.sheaf.lambda = None;
        a.model.fusion = None;
        let mut b = a.clone();
        b.train.algorithm = Algorithm::Dsgd;
        b.train.dsgd_head_gossip = false;
        let ra = runner::run_experiment(&a, &RunOptions::default())?;
        let rb = runner::run_experiment(&b, &RunOptions::default())?;
        let bits = |s: &FederationState| -> Vec<u64> {
            s.models.iter().flatten().flat_map(|m| m.flatten()).map(f64::to_bits).collect()
        };
        let same_params = bits(&ra.state) == bits(&rb.state);
        let psi = |o: &RunOutcome| -> Vec<u64> { o.log.rows.iter().map(|r| r.psi.to_bits()).collect() };
        let same_psi = psi(&ra) == psi(&rb);
        Ok(PropertyResult::new(
            name,
            same_params && same_psi && ra.error.is_none() && rb.error.is_none(),
            format!(
                "{} rounds; parameters identical: {same_params}, objective trace identical: {same_psi}",
                ra.log.rows.len()
            ),
        ))
    };
    wrap(name, run())
}

/// Identity maps with `γ = 1` turn the quadratic into `Σ‖ω_i − ω_j‖²`.
pub fn check_identity_consensus(n_instances: u64) -> PropertyResult {
    let name = "identity maps with γ=1 give the consensus penalty exactly";
    let mut mismatches = 0;
    for seed in 0..n_instances {
        let mut g = rng_for(seed, &[0x1d]);
        let n = g.random_range(2..=6);
        let edges = random_connected_edges(n, 0.5, &mut g);
        let graph = ClientGraph::new(n, &edges, &vec![vec![0]; n]).expect("valid graph");
        let d = g.random_range(1..=8);
        let params = SheafParams { gamma: 1.0, lambda: 1.0, eta: 0.0, init: InitScheme::Identity, sigma2: 1.0, seed };
        let sh = SheafState::init(&graph, &vec![d; n], &params).expect("valid sheaf");
        let omega: Vec<Array1<f64>> =
            (0..n).map(|_| (0..d).map(|_| g.sample::<f64, _>(StandardNormal)).collect()).collect();
        let q = sh.quadratic(&omega).expect("dims match");
        let mut c = 0.0;
        for &(i, j) in graph.edges() {
            let r = &omega[i] - &omega[j];
            c += r.dot(&r);
        }
        if q.to_bits() != c.to_bits() {
            mismatches += 1;
        }
    }
    PropertyResult::new(name, mismatches == 0, format!("{n_instances} instances; {mismatches} not bitwise equal"))
}

/// Local training exchanges nothing.
pub fn check_local_no_comm(base: &ExperimentConfig) -> PropertyResult {
    let name = "local baseline has zero communication";
    let run = || -> Result<PropertyResult> {
        let mut c = base.clone();
        c.train.algorithm = Algorithm::Local;
        c.model.fusion = None;
        c.train.rounds = 10;
        let o = runner::run_experiment(&c, &RunOptions::default())?;
        let total = o.log.comm_total();
        Ok(PropertyResult::new(name, total == 0 && o.error.is_none(), format!("total scalars exchanged {total}")))
    };
    wrap(name, run())
}

/// Communication tally equals the closed form from graph, γ and head dims.
pub fn check_comm_closed_form(base: &ExperimentConfig) -> PropertyResult {
    let name = "communication tally matches closed form";
    let run = || -> Result<PropertyResult> {
        let mut c = base.clone();
        c.train.rounds = 3;
        let o = runner::run_experiment(&c, &RunOptions::default())?;
        let fed = c.federation()?;
        let l = c.embed_dims()[0];
        let head = c.data.n_classes * l + c.data.n_classes;
        let de = crate::sheaf::edge_dim(head, head, c.sheaf.gamma)? as u64;
        let sheaf = 4 * de * fed.graph.edges().len() as u64;
        let mut enc = 0u64;
        for k in 0..c.n_modalities() {
            let members = fed.modality_members(k);
            let (_, e) = fed.graph.induced(members);
            let m = c.data.m_k[k];
            let h = c.model.hidden;
            enc += 2 * e.len() as u64 * (h * m + h + l * h + l) as u64;
        }
        let ok = o.log.rows.iter().all(|r| r.comm_sheaf == sheaf && r.comm_encoder == enc && r.comm_head == 0);
        Ok(PropertyResult::new(name, ok, format!("per round: sheaf {sheaf}, encoder {enc}")))
    };
    wrap(name, run())
}

/// Same config, 1 and 4 worker threads, run twice: identical `runlog.csv`.
pub fn check_determinism(cfg: &ExperimentConfig) -> PropertyResult {
    let name = "runlog.csv byte-identical across repeats and thread counts";
    let run = || -> Result<PropertyResult> {
        let mut bytes = Vec::new();
        for threads in [1, 4, 1] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| crate::Error::Config(e.to_string()))?;
            let o = pool.install(|| runner::run_experiment(cfg, &RunOptions::default()))?;
            bytes.push(o.log.csv_bytes()?);
        }
        let same = bytes.windows(2).all(|w| w[0] == w[1]);
        Ok(PropertyResult::new(name, same, format!("3 runs ({} bytes each), identical: {same}", bytes[0].len())))
    };
    wrap(name, run())
}

/// Interrupted run resumed from its checkpoint matches the uninterrupted run.
pub fn check_resume(cfg: &ExperimentConfig) -> PropertyResult {
    let name = "checkpoint resume reproduces the uninterrupted run";
    let run = || -> Result<PropertyResult> {
        let dir = std::env::temp_dir().join(format!("sheaf-sim-resume-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir)?;
        let full = runner::run_experiment(cfg, &RunOptions::default())?;
        // stop halfway and store a checkpoint that belongs to the full config
        let half = (cfg.train.rounds / 2).max(1);
        let mut short = cfg.clone();
        short.train.rounds = half;
        let o = runner::run_experiment(&short, &RunOptions::default())?;
        let mut log = o.log;
        log.config_hash = cfg.hash();
        runner::Checkpoint {
            version: runner::CHECKPOINT_VERSION,
            config_hash: cfg.hash(),
            state: o.state,
            steps: o.summary.steps,
            theory: o.summary.theory,
            log,
        }
        .save(&dir.join(runner::CHECKPOINT_FILE))?;
        let opts = RunOptions { out: Some(dir.clone()), resume: true, progress: false };
        let resumed = runner::run_experiment(cfg, &opts)?;
        let _ = std::fs::remove_dir_all(&dir);
        let same = resumed.log.csv_bytes()? == full.log.csv_bytes()?;
        Ok(PropertyResult::new(name, same, format!("resumed from round {half}, identical: {same}")))
    };
    wrap(name, run())
}

/// Outcome of the reference full-batch run and its theory checks.
#[derive(Debug)]
pub struct ReferenceChecks {
    pub lemma1: PropertyResult,
    pub monotone: PropertyResult,
    pub lemma2: PropertyResult,
    pub theorem: PropertyResult,
    pub head_bound: PropertyResult,
    pub outcome: Option<RunOutcome>,
}

pub fn reference_checks(cfg: &ExperimentConfig) -> ReferenceChecks {
    let fail = |n: &str, e: &dyn fmt::Display| PropertyResult::error(n, e);
    let names = [
        "averaged encoders follow the mean-gradient step every round (1e-10)",
        "objective non-increasing every round (1e-8)",
        "one-round descent inequality residual ≥ -1e-8",
        "averaged squared gradient bound with positive margin",
        "heads stay within the monitored norm bound",
    ];
    let o = match runner::run_experiment(cfg, &RunOptions::default()) {
        Ok(o) if o.error.is_none() => o,
        Ok(o) => {
            let e = o.error.as_ref().expect("error set").to_string();
            return ReferenceChecks {
                lemma1: fail(names[0], &e),
                monotone: fail(names[1], &e),
                lemma2: fail(names[2], &e),
                theorem: fail(names[3], &e),
                head_bound: fail(names[4], &e),
                outcome: Some(o),
            };
        }
        Err(e) => {
            return ReferenceChecks {
                lemma1: fail(names[0], &e),
                monotone: fail(names[1], &e),
                lemma2: fail(names[2], &e),
                theorem: fail(names[3], &e),
                head_bound: fail(names[4], &e),
                outcome: None,
            }
        }
    };
    let s = &o.summary;
    let rounds = o.log.rows.len();
    let l1 = s.lemma1_max_error.unwrap_or(f64::INFINITY);
    let inc = s.max_psi_increase.unwrap_or(f64::INFINITY);
    let l2 = s.lemma2_min_residual.unwrap_or(f64::NEG_INFINITY);
    let l2avg = s.lemma2_min_residual_avg.unwrap_or(f64::NEG_INFINITY);
    let worst_round = o
        .log
        .rows
        .iter()
        .filter_map(|r| r.lemma2_residual.map(|v| (r.round, v)))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let theorem = match &s.theorem {
        Some(t) => PropertyResult::new(
            names[3],
            t.holds,
            format!(
                "lhs {:.4e}, rhs {:.4e}, margin {:.4e} (ρ {:.3e}); N-scaled ρ {:.3e}: margin {}",
                t.lhs,
                t.rhs.unwrap_or(f64::NAN),
                t.margin.unwrap_or(f64::NAN),
                t.rho,
                t.rho_scaled,
                t.margin_scaled.map_or("n/a (ρ ≤ 0)".to_string(), |m| format!("{m:.4e}"))
            ),
        ),
        None => PropertyResult::new(names[3], false, "no bound for this algorithm".into()),
    };
    let max_head = o.log.rows.iter().map(|r| r.max_head_norm).fold(0.0, f64::max);
    ReferenceChecks {
        lemma1: PropertyResult::new(names[0], l1 <= 1e-10, format!("{rounds} rounds, max deviation {l1:.2e}")),
        monotone: PropertyResult::new(
            names[1],
            inc <= 1e-8,
            format!("{rounds} rounds, largest Ψ^{{r+1}} − Ψ^r {inc:.3e}"),
        ),
        lemma2: PropertyResult::new(
            names[2],
            l2 >= -1e-8,
            format!(
                "min residual {l2:.4e} (round {}); with averaged-encoder coefficient η_φ/|V_k| the min is {l2avg:.4e}",
                worst_round.0
            ),
        ),
        theorem,
        head_bound: PropertyResult::new(
            names[4],
            s.head_bound_respected,
            format!("max ‖ω‖ {max_head:.3}, bound {:.3}", s.theory.head_bound),
        ),
        outcome: Some(o),
    }
}

/// Final test accuracies `[seed][group]` for one algorithm.
pub fn final_accuracies(base: &ExperimentConfig, algorithm: Algorithm, seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
    seeds
        .iter()
        .map(|&s| {
            let mut c = base.with_seed(s);
            c.train.algorithm = algorithm;
            c.model.fusion = None;
            let o = runner::run_experiment(&c, &RunOptions::default())?;
            match o.error {
                Some(e) => Err(e),
                None => Ok(o.summary.final_test_acc),
            }
        })
        .collect()
}

fn mean_per_group(acc: &[Vec<f64>]) -> Vec<f64> {
    let g = acc[0].len();
    (0..g).map(|k| acc.iter().map(|a| a[k]).sum::<f64>() / acc.len() as f64).collect()
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Accuracy ordering on the reference scenario and its high-heterogeneity
/// variant.
pub fn check_accuracy_ordering(base: &ExperimentConfig, seeds: &[u64]) -> Vec<PropertyResult> {
    let names = [
        "sheaf (attention) beats local on ≥ 4/5 seeds in every group",
        "sheaf (attention) mean over groups ≥ DSGD",
        "heterogeneity 0.8: sheaf (attention) ≥ DSGD in every group",
    ];
    let run = || -> Result<Vec<PropertyResult>> {
        let s = final_accuracies(base, Algorithm::SheafDmflAtt, seeds)?;
        let l = final_accuracies(base, Algorithm::Local, seeds)?;
        let d = final_accuracies(base, Algorithm::Dsgd, seeds)?;
        let groups = s[0].len();
        let wins: Vec<usize> = (0..groups).map(|g| (0..seeds.len()).filter(|&i| s[i][g] > l[i][g]).count()).collect();
        let need = (seeds.len() * 4).div_ceil(5);
        let (ms, ml, md) = (mean_per_group(&s), mean_per_group(&l), mean_per_group(&d));
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mut hi = base.clone();
        hi.data.heterogeneity = 0.8;
        let sh = mean_per_group(&final_accuracies(&hi, Algorithm::SheafDmflAtt, seeds)?);
        let dh = mean_per_group(&final_accuracies(&hi, Algorithm::Dsgd, seeds)?);
        Ok(vec![
            PropertyResult::new(
                names[0],
                wins.iter().all(|&w| w >= need),
                format!("wins per group {wins:?} of {}; sheaf {} local {}", seeds.len(), fmt_vec(&ms), fmt_vec(&ml)),
            ),
            PropertyResult::new(
                names[1],
                avg(&ms) >= avg(&md),
                format!(
                    "sheaf {:.4} vs DSGD {:.4} (per group {} vs {})",
                    avg(&ms),
                    avg(&md),
                    fmt_vec(&ms),
                    fmt_vec(&md)
                ),
            ),
            PropertyResult::new(
                names[2],
                sh.iter().zip(&dh).all(|(a, b)| a >= b),
                format!("sheaf {} vs DSGD {}", fmt_vec(&sh), fmt_vec(&dh)),
            ),
        ])
    };
    run().unwrap_or_else(|e| names.iter().map(|n| PropertyResult::error(n, &e)).collect())
}

/// Identity maps with `γ = 0.25` reach at least the accuracy of `γ = 0.1`.
pub fn check_gamma_ablation(base: &ExperimentConfig, seeds: &[u64]) -> PropertyResult {
    let name = "identity init: γ=0.25 mean accuracy ≥ γ=0.1";
    let run = || -> Result<PropertyResult> {
        let mean = |gamma: f64| -> Result<f64> {
            let mut c = base.clone();
            c.sheaf.gamma = gamma;
            c.sheaf.init = InitScheme::Identity;
            let acc = final_accuracies(&c, c.train.algorithm, seeds)?;
            let per = mean_per_group(&acc);
            Ok(per.iter().sum::<f64>() / per.len() as f64)
        };
        let (a, b) = (mean(0.25)?, mean(0.1)?);
        Ok(PropertyResult::new(name, a >= b, format!("γ=0.25: {a:.4}, γ=0.1: {b:.4}")))
    };
    wrap(name, run())
}

/// Everything `verify` runs at the given level.
pub fn run_suite(level: Level, fault: Option<Fault>) -> Vec<PropertyResult> {
    let reference = config::reference();
    let mut small = reference.clone();
    small.train.rounds = 20;
    let (grad_seeds, sheaf_n, mix_n) = match level {
        Level::Fast => (10, 30, 50),
        Level::Full => (50, 100, 50),
    };
    let mut out = vec![
        check_mixing(mix_n, fault),
        check_sheaf_algebra(sheaf_n),
        check_gradients(grad_seeds),
        check_gradients_at_init(&reference),
        check_gossip(10),
        check_dsgd_head_mean(10),
        check_lemma1_small(5),
        check_identity_consensus(50),
        check_lambda_zero_equals_dsgd(&reference),
        check_local_no_comm(&reference),
        check_comm_closed_form(&reference),
        check_determinism(&small),
        check_resume(&small),
    ];
    if level == Level::Full {
        let r = reference_checks(&reference);
        out.extend([r.lemma1, r.monotone, r.lemma2, r.theorem, r.head_bound]);
        let seeds: Vec<u64> = (0..5).collect();
        out.extend(check_accuracy_ordering(&reference, &seeds));
        out.push(check_gamma_ablation(&reference, &seeds));
        out.push(check_determinism(&reference));
    }
    out
}
