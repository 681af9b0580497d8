//! Synthetic multimodal classification data from a shared latent model.
//!
//! Each sample draws a latent `z ~ N(0, I)`; its label is the argmax of a
//! fixed linear score `W z` and modality `k` observes `R_{i,k} A_k z` plus
//! Gaussian noise. The projections `A_k` give each modality a different
//! linear view of `z`, and the client-specific rotations `R_{i,k}` move from
//! the identity (heterogeneity 0) toward a random rotation (heterogeneity 1).

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ClientGraph;
use crate::linalg;
use crate::model::Batch;
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTaskSpec {
    pub latent_dim: usize,
    pub n_classes: usize,
    /// Feature dimension `m_k` per modality id.
    pub modality_dims: Vec<usize>,
    pub noise_std: f64,
    pub seed: u64,
}

/// Realized generative model.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTaskModel {
    pub spec: LatentTaskSpec,
    /// `A_k`, `m_k × latent_dim`.
    pub projections: Vec<Array2<f64>>,
    /// `C × latent_dim`.
    pub label_weights: Array2<f64>,
}

fn gaussian<R: Rng>(rows: usize, cols: usize, scale: f64, g: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * g.sample::<f64, _>(StandardNormal))
}

impl LatentTaskModel {
    /// Draws projections and label weights. Projections are redrawn until
    /// full rank and then orthonormalized along the shorter side, so every
    /// view is well conditioned and `noise_std` is the per-coordinate noise
    /// level. Label weights get orthonormal rows when `C ≤ latent_dim`.
    pub fn generate(spec: &LatentTaskSpec) -> Result<Self> {
        if spec.latent_dim == 0 || spec.n_classes < 2 {
            return Err(Error::Config("latent_dim must be ≥ 1 and n_classes ≥ 2".into()));
        }
        if !(spec.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std = {} must be ≥ 0", spec.noise_std)));
        }
        let scale = 1.0 / (spec.latent_dim as f64).sqrt();
        let mut projections = Vec::with_capacity(spec.modality_dims.len());
        for (k, &m) in spec.modality_dims.iter().enumerate() {
            let want = m.min(spec.latent_dim);
            let mut attempt = 0u64;
            let a = loop {
                let mut g = rng::rng_for(spec.seed, &[stream::LATENT, k as u64, attempt]);
                let a = gaussian(m, spec.latent_dim, scale, &mut g);
                if linalg::rank(&a, 1e-8) == want {
                    let a = if m <= spec.latent_dim {
                        linalg::orthonormalize_rows(&a, 1e-8)
                    } else {
                        linalg::orthonormalize_cols(&a, 1e-8)
                    };
                    if let Some(a) = a {
                        break a;
                    }
                }
                attempt += 1;
            };
            projections.push(a);
        }
        let mut attempt = 0u64;
        let label_weights = loop {
            let mut g = rng::rng_for(spec.seed, &[stream::LATENT, u64::MAX, attempt]);
            let w = gaussian(spec.n_classes, spec.latent_dim, 1.0, &mut g);
            let w = if spec.n_classes <= spec.latent_dim {
                linalg::orthonormalize_rows(&w, 1e-8)
            } else {
                let mut w = w;
                for mut r in w.rows_mut() {
                    let n = linalg::norm(r.view());
                    r.mapv_inplace(|x| x / n);
                }
                Some(w)
            };
            if let Some(w) = w {
                break w;
            }
            attempt += 1;
        };
        Ok(Self { spec: spec.clone(), projections, label_weights })
    }

    /// Model with explicit matrices.
    pub fn from_parts(spec: LatentTaskSpec, projections: Vec<Array2<f64>>, label_weights: Array2<f64>) -> Result<Self> {
        if projections.len() != spec.modality_dims.len()
            || projections.iter().zip(&spec.modality_dims).any(|(a, &m)| a.dim() != (m, spec.latent_dim))
            || label_weights.dim() != (spec.n_classes, spec.latent_dim)
        {
            return Err(Error::DimensionMismatch("latent model matrices do not match spec".into()));
        }
        Ok(Self { spec, projections, label_weights })
    }

    /// Rotation `R_{i,k}` at heterogeneity `t`: the orthonormalized blend
    /// `(1 − t) I + t Q` with `Q` a seeded random rotation.
    pub fn rotation(&self, client: usize, modality: usize, t: f64) -> Array2<f64> {
        let m = self.spec.modality_dims[modality];
        let eye = Array2::<f64>::eye(m);
        if t == 0.0 {
            return eye;
        }
        let mut attempt = 0u64;
        loop {
            let mut g = rng::rng_for(self.spec.seed, &[stream::ROTATION, client as u64, modality as u64, attempt]);
            let q = linalg::orthonormalize_cols(&gaussian(m, m, 1.0, &mut g), 1e-8);
            if let Some(q) = q {
                let blend = &eye * (1.0 - t) + &q * t;
                if let Some(r) = linalg::orthonormalize_cols(&blend, 1e-6) {
                    return r;
                }
            }
            attempt += 1;
        }
    }
}

/// One client's samples. `features[k]` is present for every local modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client: usize,
    pub modalities: Vec<usize>,
    pub features: Vec<Option<Array2<f64>>>,
    pub labels: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl ClientDataset {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn all(&self) -> Batch {
        Batch { xs: self.features.clone(), labels: self.labels.clone() }
    }

    pub fn subset(&self, idx: &[usize]) -> Batch {
        self.all().select(idx)
    }

    pub fn train(&self) -> Batch {
        self.subset(&self.train_idx)
    }

    pub fn test(&self) -> Batch {
        self.subset(&self.test_idx)
    }
}

/// Options of [`generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub n_per_client: usize,
    pub heterogeneity: f64,
    pub split_frac: f64,
    /// Seeds sample draws and the train/test split.
    pub seed: u64,
}

/// Draws every client's dataset.
pub fn generate(model: &LatentTaskModel, graph: &ClientGraph, opts: &GenerateOptions) -> Result<Vec<ClientDataset>> {
    if !(opts.split_frac > 0.0 && opts.split_frac < 1.0) {
        return Err(Error::InvalidFraction(opts.split_frac));
    }
    if !(0.0..=1.0).contains(&opts.heterogeneity) {
        return Err(Error::InvalidFraction(opts.heterogeneity));
    }
    if opts.n_per_client < 2 {
        return Err(Error::Config("n_per_client must be at least 2".into()));
    }
    if graph.n_modalities() > model.spec.modality_dims.len() {
        return Err(Error::Config(format!(
            "graph uses {} modalities but data defines {}",
            graph.n_modalities(),
            model.spec.modality_dims.len()
        )));
    }
    let spec = &model.spec;
    let n = opts.n_per_client;
    (0..graph.n_clients())
        .map(|i| {
            let mods = graph.modalities(i).to_vec();
            let maps: Vec<(usize, Array2<f64>)> = mods
                .iter()
                .map(|&k| (k, model.rotation(i, k, opts.heterogeneity).dot(&model.projections[k])))
                .collect();
            let mut g = rng::rng_for(opts.seed, &[stream::SAMPLES, i as u64]);
            let mut features: Vec<Option<Array2<f64>>> = vec![None; spec.modality_dims.len()];
            for &(k, _) in &maps {
                features[k] = Some(Array2::zeros((n, spec.modality_dims[k])));
            }
            let mut labels = Vec::with_capacity(n);
            for s in 0..n {
                let z: Array1<f64> = (0..spec.latent_dim).map(|_| g.sample::<f64, _>(StandardNormal)).collect();
                let scores = model.label_weights.dot(&z);
                let y = scores
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (c, &v)| if v > bv { (c, v) } else { (bi, bv) })
                    .0;
                labels.push(y);
                for (k, map) in &maps {
                    let mut x = map.dot(&z);
                    for v in x.iter_mut() {
                        *v += spec.noise_std * g.sample::<f64, _>(StandardNormal);
                    }
                    features[*k].as_mut().expect("allocated").row_mut(s).assign(&x);
                }
            }
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng::rng_for(opts.seed, &[stream::SPLIT, i as u64]));
            let n_train = ((opts.split_frac * n as f64).floor() as usize).clamp(1, n - 1);
            let mut train_idx = perm[..n_train].to_vec();
            let mut test_idx = perm[n_train..].to_vec();
            train_idx.sort_unstable();
            test_idx.sort_unstable();
            Ok(ClientDataset { client: i, modalities: mods, features, labels, train_idx, test_idx })
        })
        .collect()
}

/// Zeroes the first `⌊frac·m_k⌋` coordinates of `modality` on every sample.
pub fn occlude(ds: &ClientDataset, modality: usize, frac: f64) -> Result<ClientDataset> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::InvalidFraction(frac));
    }
    let mut out = ds.clone();
    let x = out
        .features
        .get_mut(modality)
        .and_then(|x| x.as_mut())
        .ok_or(Error::ModalityAbsent { client: ds.client, modality })?;
    let cut = (frac * x.ncols() as f64).floor() as usize;
    x.columns_mut().into_iter().take(cut).for_each(|mut c| c.fill(0.0));
    Ok(out)
}

/// Writes `client{i}_m{k}.csv` per local modality (header `x0,x1,…`) and
/// `client{i}_labels.csv` (header `label,split`) into `dir`.
pub fn export_csv(datasets: &[ClientDataset], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for ds in datasets {
        for &k in &ds.modalities {
            let x = ds.features[k].as_ref().expect("local modality present");
            let mut w = csv::Writer::from_path(dir.join(format!("client{}_m{k}.csv", ds.client)))?;
            w.write_record((0..x.ncols()).map(|c| format!("x{c}")))?;
            for row in x.rows() {
                w.write_record(row.iter().map(|v| format!("{v:e}")))?;
            }
            w.flush()?;
        }
        let mut w = csv::Writer::from_path(dir.join(format!("client{}_labels.csv", ds.client)))?;
        w.write_record(["label", "split"])?;
        let mut split = vec!["train"; ds.n_samples()];
        for &t in &ds.test_idx {
            split[t] = "test";
        }
        for (y, s) in ds.labels.iter().zip(split) {
            w.write_record([y.to_string(), s.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> LatentTaskSpec {
        LatentTaskSpec { latent_dim: 4, n_classes: 3, modality_dims: vec![3, 5], noise_std: noise, seed: 17 }
    }

    fn graph() -> ClientGraph {
        ClientGraph::new(3, &[(0, 1), (1, 2)], &[vec![0], vec![0, 1], vec![1]]).unwrap()
    }

    fn opts(h: f64) -> GenerateOptions {
        GenerateOptions { n_per_client: 40, heterogeneity: h, split_frac: 0.75, seed: 5 }
    }

    #[test]
    fn generation_is_deterministic() {
        let m = LatentTaskModel::generate(&spec(0.1)).unwrap();
        let a = generate(&m, &graph(), &opts(0.5)).unwrap();
        let b = generate(&LatentTaskModel::generate(&spec(0.1)).unwrap(), &graph(), &opts(0.5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let m = LatentTaskModel::generate(&spec(0.1)).unwrap();
        for ds in generate(&m, &graph(), &opts(0.0)).unwrap() {
            assert_eq!(ds.train_idx.len(), 30);
            let mut all: Vec<usize> = ds.train_idx.iter().chain(&ds.test_idx).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..40).collect::<Vec<_>>());
            for &k in &ds.modalities {
                assert_eq!(ds.features[k].as_ref().unwrap().nrows(), 40);
            }
        }
    }

    #[test]
    fn rejects_bad_fraction() {
        let m = LatentTaskModel::generate(&spec(0.1)).unwrap();
        let mut o = opts(0.0);
        o.split_frac = 1.0;
        assert!(matches!(generate(&m, &graph(), &o), Err(Error::InvalidFraction(_))));
    }

    #[test]
    fn projections_full_rank_and_rotations_orthogonal() {
        let m = LatentTaskModel::generate(&spec(0.1)).unwrap();
        assert_eq!(linalg::rank(&m.projections[0], 1e-8), 3);
        assert_eq!(linalg::rank(&m.projections[1], 1e-8), 4);
        let r = m.rotation(2, 1, 0.8);
        let g = r.t().dot(&r);
        for a in 0..5 {
            for b in 0..5 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((g[[a, b]] - want).abs() < 1e-12);
            }
        }
        assert_eq!(m.rotation(2, 1, 0.0), Array2::<f64>::eye(5));
    }

    #[test]
    fn noiseless_labels_are_argmax_of_latent() {
        // With W = I and A = I the features are z itself.
        let s = LatentTaskSpec { latent_dim: 3, n_classes: 3, modality_dims: vec![3], noise_std: 0.0, seed: 1 };
        let m = LatentTaskModel::from_parts(s, vec![Array2::eye(3)], Array2::eye(3)).unwrap();
        let g = ClientGraph::new(1, &[], &[vec![0]]).unwrap();
        let ds = &generate(&m, &g, &opts(0.0)).unwrap()[0];
        let x = ds.features[0].as_ref().unwrap();
        for (row, &y) in x.rows().into_iter().zip(&ds.labels) {
            let arg = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, y);
        }
    }

    #[test]
    fn occlusion_examples() {
        let m = LatentTaskModel::generate(&LatentTaskSpec {
            latent_dim: 4,
            n_classes: 2,
            modality_dims: vec![4],
            noise_std: 0.1,
            seed: 2,
        })
        .unwrap();
        let g = ClientGraph::new(1, &[], &[vec![0]]).unwrap();
        let ds = generate(&m, &g, &opts(0.0)).unwrap().remove(0);
        assert_eq!(occlude(&ds, 0, 0.0).unwrap(), ds);
        let full = occlude(&ds, 0, 1.0).unwrap();
        assert!(full.features[0].as_ref().unwrap().iter().all(|&v| v == 0.0));
        let half = occlude(&ds, 0, 0.5).unwrap();
        let x = half.features[0].as_ref().unwrap();
        let orig = ds.features[0].as_ref().unwrap();
        for r in 0..x.nrows() {
            assert_eq!(x[[r, 0]], 0.0);
            assert_eq!(x[[r, 1]], 0.0);
            assert_eq!(x[[r, 2]], orig[[r, 2]]);
            assert_eq!(x[[r, 3]], orig[[r, 3]]);
        }
        assert_eq!(occlude(&half, 0, 0.5).unwrap(), half);
        assert!(matches!(occlude(&ds, 1, 0.5), Err(Error::ModalityAbsent { .. })));
    }

    #[test]
    fn csv_export_writes_headers() {
        let m = LatentTaskModel::generate(&spec(0.1)).unwrap();
        let data = generate(&m, &graph(), &opts(0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_csv(&data, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("client1_m1.csv")).unwrap();
        assert!(text.starts_with("x0,x1,x2,x3,x4\n"));
        assert_eq!(text.lines().count(), 41);
        let labels = std::fs::read_to_string(dir.path().join("client0_labels.csv")).unwrap();
        assert!(labels.starts_with("label,split\n"));
    }
}
