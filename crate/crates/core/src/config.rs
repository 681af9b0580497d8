//! Experiment configuration: JSON schema, dotted overrides, validation,
//! hashing, and assembly of the federation it describes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{self, GenerateOptions, LatentTaskModel, LatentTaskSpec};
use crate::error::{Error, Result};
use crate::graph::ClientGraph;
use crate::model::{Fusion, ModelDims};
use crate::sheaf::{InitScheme, SheafParams};
use crate::trainer::{Algorithm, Federation, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub n_clients: usize,
    pub edges: Vec<[usize; 2]>,
    pub modalities: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionConfig {
    pub modality: usize,
    #[serde(default = "default_occlusion_frac")]
    pub frac: f64,
}

fn default_occlusion_frac() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub latent_dim: usize,
    pub n_classes: usize,
    /// Input dimension per modality.
    pub m_k: Vec<usize>,
    pub noise_std: f64,
    pub n_per_client: usize,
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default = "default_split")]
    pub split_frac: f64,
    /// Seeds the latent task (projections, labelling rule, client rotations).
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub occlusion: Option<OcclusionConfig>,
}

fn default_split() -> f64 {
    0.8
}

/// A single embedding dimension, or one per modality (concat fusion only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmbedDim {
    Shared(usize),
    PerModality(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed_dim: EmbedDim,
    /// Defaults to `data.n_classes`; must agree with it when given.
    #[serde(default)]
    pub n_classes: Option<usize>,
    /// Fusion for `local`; the sheaf algorithms fix their own.
    #[serde(default)]
    pub fusion: Option<Fusion>,
    /// Alias of `train.seeds.model`.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SheafConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Alias of `train.lambda`.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Alias of `train.eta_p`.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_gamma() -> f64 {
    0.25
}
fn default_init() -> InitScheme {
    InitScheme::Identity
}
fn default_sigma2() -> f64 {
    1.0
}

impl Default for SheafConfig {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            lambda: None,
            eta: None,
            init: default_init(),
            sigma2: default_sigma2(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    /// Sample draws and train/test split.
    #[serde(default)]
    pub data: u64,
    #[serde(default)]
    pub model: Option<u64>,
    #[serde(default)]
    pub shuffle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub algorithm: Algorithm,
    pub rounds: usize,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub eta_phi: Option<f64>,
    #[serde(default)]
    pub eta_beta: Option<f64>,
    #[serde(default)]
    pub eta_p: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub seeds: SeedConfig,
    /// Forces full-batch gradients regardless of `batch_size`.
    #[serde(default)]
    pub full_batch: bool,
    #[serde(default = "default_true")]
    pub dsgd_head_gossip: bool,
    #[serde(default = "default_safety")]
    pub smoothness_safety: f64,
}

fn default_true() -> bool {
    true
}
fn default_safety() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// Progress lines every this many rounds (0 = silent).
    #[serde(default)]
    pub log_every: usize,
    /// Checkpoint every this many rounds (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out(), log_every: 0, checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub sheaf: SheafConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Applies `key.path=value` to a JSON tree. The value is parsed as JSON
/// when possible (numbers, booleans, arrays), otherwise taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not inside an object")))?;
        if n + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty override key in {assignment:?}")))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v).map_err(json_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text).map_err(json_err)?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str_with(&text, overrides)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form with the output section removed,
    /// so the hash identifies the computation rather than where it is stored.
    pub fn hash(&self) -> String {
        let mut v = self.to_value();
        if let Some(o) = v.as_object_mut() {
            o.remove("output");
        }
        let text = serde_json::to_string(&v).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    /// Sets every seed to `seed` (used by sweeps). The latent task seed
    /// `data.seed` is left alone so all seeds share one scenario.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seeds = SeedConfig { data: seed, model: Some(seed), shuffle: seed };
        c.model.init_seed = None;
        c.sheaf.seed = seed;
        c
    }

    fn alias<T: PartialEq + Copy + std::fmt::Debug>(a: Option<T>, b: Option<T>, what: &str) -> Result<Option<T>> {
        match (a, b) {
            (Some(x), Some(y)) if x != y => {
                Err(Error::Config(format!("{what} given twice with different values ({x:?} vs {y:?})")))
            }
            (x, y) => Ok(x.or(y)),
        }
    }

    pub fn lambda(&self) -> f64 {
        let l = self.train.lambda.or(self.sheaf.lambda);
        match self.train.algorithm {
            Algorithm::SheafDmfl | Algorithm::SheafDmflAtt => l.unwrap_or(0.1),
            Algorithm::Local | Algorithm::Dsgd => 0.0,
        }
    }

    pub fn model_seed(&self) -> u64 {
        self.train.seeds.model.or(self.model.init_seed).unwrap_or(0)
    }

    pub fn n_modalities(&self) -> usize {
        self.data.m_k.len()
    }

    pub fn embed_dims(&self) -> Vec<usize> {
        match &self.model.embed_dim {
            EmbedDim::Shared(l) => vec![*l; self.n_modalities()],
            EmbedDim::PerModality(v) => v.clone(),
        }
    }

    pub fn fusion(&self) -> Fusion {
        match self.train.algorithm {
            Algorithm::SheafDmfl | Algorithm::Dsgd => Fusion::Concat,
            Algorithm::SheafDmflAtt => Fusion::Attention,
            Algorithm::Local => self.model.fusion.unwrap_or(Fusion::Attention),
        }
    }

    /// Schema-level checks that need no computation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let g = &self.graph;
        if g.n_clients == 0 {
            return bad("graph.n_clients must be positive".into());
        }
        if g.modalities.len() != g.n_clients {
            return bad(format!("graph.modalities has {} entries for {} clients", g.modalities.len(), g.n_clients));
        }
        let m = self.n_modalities();
        if m == 0 {
            return bad("data.m_k must list at least one modality".into());
        }
        for (i, set) in g.modalities.iter().enumerate() {
            if let Some(&k) = set.iter().find(|&&k| k >= m) {
                return bad(format!("client {i} uses modality {k} but data.m_k has {m} entries"));
            }
        }
        let d = &self.data;
        if d.n_classes < 2 || d.latent_dim == 0 || d.n_per_client < 2 || d.m_k.contains(&0) {
            return bad("data: need n_classes ≥ 2, latent_dim ≥ 1, n_per_client ≥ 2, m_k ≥ 1".into());
        }
        if !(d.noise_std >= 0.0) || !(0.0..=1.0).contains(&d.heterogeneity) {
            return bad("data: noise_std must be ≥ 0 and heterogeneity in [0, 1]".into());
        }
        if !(d.split_frac > 0.0 && d.split_frac < 1.0) {
            return Err(Error::InvalidFraction(d.split_frac));
        }
        if let Some(o) = &d.occlusion {
            if o.modality >= m {
                return bad(format!("occlusion modality {} out of range", o.modality));
            }
            if !(0.0..=1.0).contains(&o.frac) {
                return Err(Error::InvalidFraction(o.frac));
            }
        }
        if let Some(c) = self.model.n_classes {
            if c != d.n_classes {
                return bad(format!("model.n_classes = {c} but data.n_classes = {}", d.n_classes));
            }
        }
        if self.model.hidden == 0 || self.embed_dims().contains(&0) {
            return bad("model.hidden and model.embed_dim must be positive".into());
        }
        if self.embed_dims().len() != m {
            return bad(format!("model.embed_dim lists {} dims for {m} modalities", self.embed_dims().len()));
        }
        let fusion_wanted = match self.train.algorithm {
            Algorithm::SheafDmfl | Algorithm::Dsgd => Some(Fusion::Concat),
            Algorithm::SheafDmflAtt => Some(Fusion::Attention),
            Algorithm::Local => None,
        };
        if let (Some(want), Some(given)) = (fusion_wanted, self.model.fusion) {
            if want != given {
                return bad(format!(
                    "model.fusion = {given:?} conflicts with algorithm {}",
                    self.train.algorithm.name()
                ));
            }
        }
        if self.fusion() == Fusion::Attention {
            let e = self.embed_dims();
            if e.iter().any(|&l| l != e[0]) {
                return bad("attention fusion needs a single embedding dimension".into());
            }
        }
        if !(self.sheaf.gamma > 0.0 && self.sheaf.gamma <= 1.0) {
            return Err(Error::InvalidGamma(self.sheaf.gamma));
        }
        if !(self.sheaf.sigma2 > 0.0) {
            return Err(Error::InvalidSigma(self.sheaf.sigma2));
        }
        Self::alias(self.train.lambda, self.sheaf.lambda, "lambda (train.lambda / sheaf.lambda)")?;
        Self::alias(self.train.eta_p, self.sheaf.eta, "map step (train.eta_p / sheaf.eta)")?;
        Self::alias(self.train.seeds.model, self.model.init_seed, "model seed (train.seeds.model / model.init_seed)")?;
        let t = &self.train;
        if t.rounds == 0 {
            return bad("train.rounds must be at least 1".into());
        }
        for (name, v) in [
            ("alpha", t.alpha),
            ("eta_phi", t.eta_phi),
            ("eta_beta", t.eta_beta),
            ("eta_p", t.eta_p.or(self.sheaf.eta)),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("train.{name} = {v} must be positive"));
                }
            }
        }
        if let Some(l) = t.lambda.or(self.sheaf.lambda) {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda = {l} must be ≥ 0"));
            }
        }
        if !(t.smoothness_safety > 0.0) {
            return bad("train.smoothness_safety must be positive".into());
        }
        Ok(())
    }

    pub fn client_graph(&self) -> Result<ClientGraph> {
        let edges: Vec<(usize, usize)> = self.graph.edges.iter().map(|e| (e[0], e[1])).collect();
        ClientGraph::with_modalities(self.graph.n_clients, &edges, &self.graph.modalities, self.n_modalities())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            input_dims: self.data.m_k.clone(),
            hidden: self.model.hidden,
            embed_dims: self.embed_dims(),
            n_classes: self.data.n_classes,
        }
    }

    pub fn latent_spec(&self) -> LatentTaskSpec {
        LatentTaskSpec {
            latent_dim: self.data.latent_dim,
            n_classes: self.data.n_classes,
            modality_dims: self.data.m_k.clone(),
            noise_std: self.data.noise_std,
            seed: self.data.seed,
        }
    }

    /// Graph, data and mixing matrices.
    pub fn federation(&self) -> Result<Federation> {
        let graph = self.client_graph()?;
        let task = LatentTaskModel::generate(&self.latent_spec())?;
        let opts = GenerateOptions {
            n_per_client: self.data.n_per_client,
            heterogeneity: self.data.heterogeneity,
            split_frac: self.data.split_frac,
            seed: self.train.seeds.data,
        };
        let mut sets = data::generate(&task, &graph, &opts)?;
        if let Some(o) = &self.data.occlusion {
            sets = sets
                .iter()
                .map(|ds| {
                    if ds.modalities.contains(&o.modality) {
                        data::occlude(ds, o.modality, o.frac)
                    } else {
                        Ok(ds.clone())
                    }
                })
                .collect::<Result<_>>()?;
        }
        Federation::new(graph, self.model_dims(), sets)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            algorithm: t.algorithm,
            rounds: t.rounds,
            alpha: t.alpha,
            eta_phi: t.eta_phi,
            eta_beta: t.eta_beta,
            eta_p: t.eta_p.or(self.sheaf.eta),
            lambda: self.lambda(),
            batch_size: if t.full_batch { 0 } else { t.batch_size },
            shuffle_seed: t.seeds.shuffle,
            dsgd_head_gossip: t.dsgd_head_gossip,
            smoothness_safety: t.smoothness_safety,
        }
    }

    pub fn sheaf_params(&self) -> SheafParams {
        SheafParams {
            gamma: self.sheaf.gamma,
            lambda: self.lambda(),
            eta: self.train.eta_p.or(self.sheaf.eta).unwrap_or(0.0),
            init: self.sheaf.init,
            sigma2: self.sheaf.sigma2,
            seed: self.sheaf.seed,
        }
    }
}

/// The desk-scale reference scenario: nine clients in three triangles
/// (modality sets {m0}, {m1}, {m0, m1}) joined by three bridges.
pub fn reference() -> ExperimentConfig {
    let text = include_str!("../configs/reference.json");
    ExperimentConfig::from_str_with(text, &[]).expect("reference config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_sets_nested_values() {
        let mut v: Value = serde_json::json!({"train": {"rounds": 3}});
        apply_override(&mut v, "train.rounds=5").unwrap();
        apply_override(&mut v, "train.algorithm=local").unwrap();
        apply_override(&mut v, "sheaf.gamma=0.1").unwrap();
        assert_eq!(v["train"]["rounds"], 5);
        assert_eq!(v["train"]["algorithm"], "local");
        assert_eq!(v["sheaf"]["gamma"], 0.1);
        assert!(apply_override(&mut v, "nokey").is_err());
    }

    #[test]
    fn reference_is_valid_and_hash_ignores_output() {
        let c = reference();
        let mut d = c.clone();
        d.output.dir = PathBuf::from("elsewhere");
        assert_eq!(c.hash(), d.hash());
        d.train.rounds += 1;
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = reference().to_value();
        v["train"]["bogus"] = Value::from(1);
        assert!(matches!(ExperimentConfig::from_value(v), Err(Error::Config(_))));
    }

    #[test]
    fn conflicting_aliases_rejected() {
        let text = serde_json::to_string(&reference().to_value()).unwrap();
        let r = ExperimentConfig::from_str_with(&text, &["train.lambda=0.5".into(), "sheaf.lambda=0.2".into()]);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = ExperimentConfig::from_str_with(
            &text,
            &["train.algorithm=sheaf_dmfl".into(), "model.fusion=attention".into()],
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn baselines_have_no_coupling() {
        let text = serde_json::to_string(&reference().to_value()).unwrap();
        let c = ExperimentConfig::from_str_with(&text, &["train.algorithm=dsgd".into()]).unwrap();
        assert_eq!(c.lambda(), 0.0);
    }
}
