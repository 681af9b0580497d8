//! Per-client multimodal classifier with exact reverse-mode gradients.
//!
//! A client holding modalities `M_i` runs one two-layer relu perceptron per
//! modality, fuses the embeddings by concatenation (ascending modality id)
//! or by attention, and feeds the fused vector to a linear head. The
//! parameter vector splits as encoders, attention scores, head, in that
//! order; concat models carry no attention parameters.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Concat,
    Attention,
}

/// Shapes shared by every client model in a federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Input dimension `m_k` per modality id.
    pub input_dims: Vec<usize>,
    pub hidden: usize,
    /// Embedding dimension `l_k` per modality id.
    pub embed_dims: Vec<usize>,
    pub n_classes: usize,
}

impl ModelDims {
    pub fn fused_dim(&self, modalities: &[usize], fusion: Fusion) -> usize {
        match fusion {
            Fusion::Concat => modalities.iter().map(|&k| self.embed_dims[k]).sum(),
            Fusion::Attention => self.embed_dims[modalities[0]],
        }
    }

    /// Flattened head dimension `C·fused + C`.
    pub fn head_dim(&self, modalities: &[usize], fusion: Fusion) -> usize {
        self.n_classes * self.fused_dim(modalities, fusion) + self.n_classes
    }
}

/// Two-layer perceptron `h = W2·relu(W1·x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Encoder {
    pub fn zeros(input: usize, hidden: usize, embed: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((embed, hidden)),
            b2: Array1::zeros(embed),
        }
    }

    fn init<R: Rng>(input: usize, hidden: usize, embed: usize, rng: &mut R) -> Self {
        let mut e = Self::zeros(input, hidden, embed);
        fill_scaled(&mut e.w1, rng);
        fill_scaled(&mut e.w2, rng);
        e
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(self.b1.iter()).chain(self.w2.iter()).chain(self.b2.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1.iter_mut().chain(self.b1.iter_mut()).chain(self.w2.iter_mut()).chain(self.b2.iter_mut())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        for (x, &v) in self.values_mut().zip(flat) {
            *x = v;
        }
    }

    pub fn scaled_add(&mut self, a: f64, other: &Encoder) {
        self.w1.scaled_add(a, &other.w1);
        self.b1.scaled_add(a, &other.b1);
        self.w2.scaled_add(a, &other.w2);
        self.b2.scaled_add(a, &other.b2);
    }

    pub fn sq_norm(&self) -> f64 {
        self.values().map(|x| x * x).sum()
    }
}

/// Linear task head; flattened as `W` row-major followed by `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Head {
    pub fn zeros(n_classes: usize, fused: usize) -> Self {
        Self { w: Array2::zeros((n_classes, fused)), b: Array1::zeros(n_classes) }
    }

    pub fn dim(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn to_vector(&self) -> Array1<f64> {
        self.w.iter().chain(self.b.iter()).copied().collect()
    }

    pub fn set_vector(&mut self, v: ArrayView1<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "head vector of length {} for head of dimension {}",
                v.len(),
                self.dim()
            )));
        }
        for (x, &y) in self.w.iter_mut().chain(self.b.iter_mut()).zip(v.iter()) {
            *x = y;
        }
        Ok(())
    }
}

/// Per-client parameters `θ_i = [Φ_i, β_i, ω_i]`. The same type stores
/// gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    /// Ascending modality ids; `encoders` and `attention` follow this order.
    pub modalities: Vec<usize>,
    pub encoders: Vec<Encoder>,
    pub attention: Option<Vec<Array1<f64>>>,
    pub head: Head,
    pub fusion: Fusion,
}

/// Input batch. `xs[k]` holds the `n × m_k` features of modality `k`
/// when present.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub xs: Vec<Option<Array2<f64>>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            xs: self.xs.iter().map(|x| x.as_ref().map(|a| a.select(Axis(0), idx))).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenates the batch with itself `times` times.
    pub fn repeated(&self, times: usize) -> Batch {
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        self.select(&idx)
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pre_hidden: Vec<Array2<f64>>,
    hidden: Vec<Array2<f64>>,
    pub embeddings: Vec<Array2<f64>>,
    /// `tanh` scores per sample and modality (attention only).
    scores: Option<Array2<f64>>,
    /// Attention weights per sample and modality.
    pub alphas: Option<Array2<f64>>,
    pub fused: Array2<f64>,
    pub logits: Array2<f64>,
}

fn fill_scaled<R: Rng>(w: &mut Array2<f64>, rng: &mut R) {
    let scale = 1.0 / (w.ncols() as f64).sqrt();
    w.mapv_inplace(|_| scale * rng.sample::<f64, _>(StandardNormal));
}

/// Numerically stable softmax.
pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.mapv(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

/// `h = W2·relu(W1·x + b1) + b2` for a single input.
pub fn encoder_forward(p: &Encoder, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.len() != p.input_dim() {
        return Err(Error::DimensionMismatch(format!("encoder expects {} inputs, got {}", p.input_dim(), x.len())));
    }
    let a = (p.w1.dot(&x) + &p.b1).mapv(|v| v.max(0.0));
    Ok(p.w2.dot(&a) + &p.b2)
}

/// Concatenation in the given (ascending modality) order.
pub fn concat_fuse(embeddings: &[Array1<f64>]) -> Array1<f64> {
    embeddings.iter().flat_map(|h| h.iter().copied()).collect()
}

/// `e_k = tanh(β_kᵀ h_k)`, `α = softmax(e)`, fused `= Σ_k α_k h_k`.
pub fn attention_fuse(betas: &[Array1<f64>], embeddings: &[Array1<f64>]) -> Result<(Array1<f64>, Array1<f64>)> {
    if betas.len() != embeddings.len() || embeddings.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} attention vectors for {} embeddings",
            betas.len(),
            embeddings.len()
        )));
    }
    let l = embeddings[0].len();
    if embeddings.iter().zip(betas).any(|(h, b)| h.len() != l || b.len() != l) {
        return Err(Error::DimensionMismatch("attention fusion needs equal embedding sizes".into()));
    }
    let scores: Array1<f64> = betas.iter().zip(embeddings).map(|(b, h)| b.dot(h).tanh()).collect();
    let alphas = softmax(scores.view());
    let mut fused = Array1::zeros(l);
    for (a, h) in alphas.iter().zip(embeddings) {
        fused.scaled_add(*a, h);
    }
    Ok((fused, alphas))
}

/// `W·fused + b`.
pub fn head_forward(h: &Head, fused: ArrayView1<f64>) -> Result<Array1<f64>> {
    if fused.len() != h.w.ncols() {
        return Err(Error::DimensionMismatch(format!("head expects {} inputs, got {}", h.w.ncols(), fused.len())));
    }
    Ok(h.w.dot(&fused) + &h.b)
}

/// Mean cross-entropy of `logits` against `labels` and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let c = logits.ncols();
    let mut grad = Array2::<f64>::zeros((n, c));
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, n_classes: c });
        }
        let row = logits.row(b);
        let m = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for k in 0..c {
            grad[[b, k]] = (row[k] - lse).exp() / n as f64;
        }
        grad[[b, y]] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Modality-set key used to derive head seeds.
fn modality_mask(modalities: &[usize]) -> u64 {
    modalities.iter().fold(0u64, |acc, &k| acc | (1u64 << (k % 64)))
}

impl ClientModel {
    /// Seeded initialization. Encoders depend only on `(seed, modality)`,
    /// so all clients sharing a modality start from the same encoder;
    /// heads depend on `(seed, client, modality set)`. Weights are
    /// `N(0, 1/fan_in)`, biases and attention vectors zero.
    pub fn init(modalities: &[usize], dims: &ModelDims, fusion: Fusion, seed: u64, client: usize) -> Result<Self> {
        let mut mods = modalities.to_vec();
        mods.sort_unstable();
        mods.dedup();
        if mods.is_empty() {
            return Err(Error::EmptyModalitySet { client });
        }
        if let Some(&k) = mods.iter().find(|&&k| k >= dims.input_dims.len() || k >= dims.embed_dims.len()) {
            return Err(Error::DimensionMismatch(format!("no dimensions configured for modality {k}")));
        }
        if fusion == Fusion::Attention {
            let l = dims.embed_dims[mods[0]];
            if mods.iter().any(|&k| dims.embed_dims[k] != l) {
                return Err(Error::Config("attention fusion requires a common embedding dimension".into()));
            }
        }
        let encoders = mods
            .iter()
            .map(|&k| {
                let mut g = rng::rng_for(seed, &[rng::stream::ENCODER, k as u64]);
                Encoder::init(dims.input_dims[k], dims.hidden, dims.embed_dims[k], &mut g)
            })
            .collect();
        let attention =
            (fusion == Fusion::Attention).then(|| mods.iter().map(|&k| Array1::zeros(dims.embed_dims[k])).collect());
        let mut head = Head::zeros(dims.n_classes, dims.fused_dim(&mods, fusion));
        let mut g = rng::rng_for(seed, &[rng::stream::HEAD, client as u64, modality_mask(&mods)]);
        fill_scaled(&mut head.w, &mut g);
        Ok(Self { modalities: mods, encoders, attention, head, fusion })
    }

    pub fn n_classes(&self) -> usize {
        self.head.w.nrows()
    }

    pub fn position(&self, modality: usize) -> Option<usize> {
        self.modalities.binary_search(&modality).ok()
    }

    pub fn encoder(&self, modality: usize) -> Option<&Encoder> {
        self.position(modality).map(|p| &self.encoders[p])
    }

    pub fn encoder_mut(&mut self, modality: usize) -> Option<&mut Encoder> {
        self.position(modality).map(move |p| &mut self.encoders[p])
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale(0.0);
        z
    }

    pub fn scale(&mut self, a: f64) {
        for v in self.values_mut() {
            *v *= a;
        }
    }

    /// `self += a · other`, block by block.
    pub fn scaled_add(&mut self, a: f64, other: &ClientModel) {
        for (e, o) in self.encoders.iter_mut().zip(&other.encoders) {
            e.scaled_add(a, o);
        }
        if let (Some(bs), Some(os)) = (self.attention.as_mut(), other.attention.as_ref()) {
            for (b, o) in bs.iter_mut().zip(os) {
                b.scaled_add(a, o);
            }
        }
        self.head.w.scaled_add(a, &other.head.w);
        self.head.b.scaled_add(a, &other.head.b);
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        let enc = self.encoders.iter().flat_map(|e| e.values());
        let att = self.attention.iter().flatten().flat_map(|b| b.iter());
        enc.chain(att).chain(self.head.w.iter()).chain(self.head.b.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let enc = self.encoders.iter_mut().flat_map(|e| e.values_mut());
        let att = self.attention.iter_mut().flatten().flat_map(|b| b.iter_mut());
        enc.chain(att).chain(self.head.w.iter_mut()).chain(self.head.b.iter_mut())
    }

    pub fn n_params(&self) -> usize {
        self.values().count()
    }

    /// `[Φ, β, ω]` as one vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.n_params();
        if flat.len() != n {
            return Err(Error::DimensionMismatch(format!("{} values for {n} parameters", flat.len())));
        }
        for (x, &v) in self.values_mut().zip(flat) {
            *x = v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|x| x.is_finite())
    }

    pub fn encoder_sq_norm(&self) -> f64 {
        self.encoders.iter().map(Encoder::sq_norm).sum()
    }

    pub fn attention_sq_norm(&self) -> f64 {
        self.attention.iter().flatten().map(|b| b.dot(b)).sum()
    }

    pub fn head_sq_norm(&self) -> f64 {
        self.head.w.iter().chain(self.head.b.iter()).map(|x| x * x).sum()
    }

    fn inputs<'a>(&self, batch: &'a Batch) -> Result<Vec<ArrayView2<'a, f64>>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.modalities
            .iter()
            .zip(&self.encoders)
            .map(|(&k, enc)| {
                let x = batch
                    .xs
                    .get(k)
                    .and_then(|x| x.as_ref())
                    .ok_or_else(|| Error::DimensionMismatch(format!("batch lacks modality {k}")))?;
                if x.ncols() != enc.input_dim() || x.nrows() != batch.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "modality {k}: batch is {}x{}, encoder expects {} inputs",
                        x.nrows(),
                        x.ncols(),
                        enc.input_dim()
                    )));
                }
                Ok(x.view())
            })
            .collect()
    }

    /// Batched forward pass.
    pub fn forward(&self, batch: &Batch) -> Result<Forward> {
        let xs = self.inputs(batch)?;
        let n = batch.len();
        let mut pre_hidden = Vec::with_capacity(xs.len());
        let mut hidden = Vec::with_capacity(xs.len());
        let mut embeddings = Vec::with_capacity(xs.len());
        for (x, enc) in xs.iter().zip(&self.encoders) {
            let z1 = x.dot(&enc.w1.t()) + &enc.b1;
            let a1 = z1.mapv(|v| v.max(0.0));
            let h = a1.dot(&enc.w2.t()) + &enc.b2;
            pre_hidden.push(z1);
            hidden.push(a1);
            embeddings.push(h);
        }
        let (fused, scores, alphas) = match (&self.fusion, &self.attention) {
            (Fusion::Concat, _) => {
                let views: Vec<_> = embeddings.iter().map(|h| h.view()).collect();
                let fused =
                    ndarray::concatenate(Axis(1), &views).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
                (fused, None, None)
            }
            (Fusion::Attention, Some(betas)) => {
                let kk = embeddings.len();
                let l = embeddings[0].ncols();
                if embeddings.iter().any(|h| h.ncols() != l) {
                    return Err(Error::DimensionMismatch("attention fusion needs equal embedding sizes".into()));
                }
                let mut scores = Array2::<f64>::zeros((n, kk));
                for (k, (h, beta)) in embeddings.iter().zip(betas).enumerate() {
                    scores.column_mut(k).assign(&h.dot(beta).mapv(f64::tanh));
                }
                let mut alphas = Array2::<f64>::zeros((n, kk));
                for (b, row) in scores.rows().into_iter().enumerate() {
                    alphas.row_mut(b).assign(&softmax(row));
                }
                let mut fused = Array2::<f64>::zeros((n, l));
                for (k, h) in embeddings.iter().enumerate() {
                    let a = alphas.column(k);
                    Zip::from(fused.rows_mut()).and(h.rows()).and(&a).for_each(|mut f, hr, &w| {
                        f.scaled_add(w, &hr);
                    });
                }
                (fused, Some(scores), Some(alphas))
            }
            (Fusion::Attention, None) => {
                return Err(Error::DimensionMismatch("attention model without attention parameters".into()))
            }
        };
        if fused.ncols() != self.head.w.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "fused dimension {} does not match head input {}",
                fused.ncols(),
                self.head.w.ncols()
            )));
        }
        let logits = fused.dot(&self.head.w.t()) + &self.head.b;
        Ok(Forward { pre_hidden, hidden, embeddings, scores, alphas, fused, logits })
    }

    /// Pulls `dlogits` back through the network; returns the parameter
    /// gradient in the model's own layout.
    pub fn backward(&self, batch: &Batch, fwd: &Forward, dlogits: ArrayView2<f64>) -> Result<ClientModel> {
        let xs = self.inputs(batch)?;
        let mut grad = self.zeros_like();
        grad.head.w = dlogits.t().dot(&fwd.fused);
        grad.head.b = dlogits.sum_axis(Axis(0));
        let dfused = dlogits.dot(&self.head.w);

        let dembed: Vec<Array2<f64>> = match (&self.fusion, &self.attention, &fwd.alphas, &fwd.scores) {
            (Fusion::Concat, ..) => {
                let mut off = 0;
                fwd.embeddings
                    .iter()
                    .map(|h| {
                        let l = h.ncols();
                        let d = dfused.slice(s![.., off..off + l]).to_owned();
                        off += l;
                        d
                    })
                    .collect()
            }
            (Fusion::Attention, Some(betas), Some(alphas), Some(scores)) => {
                let n = dfused.nrows();
                let kk = fwd.embeddings.len();
                // dL/dα_k = <dfused, h_k> per sample
                let mut dalpha = Array2::<f64>::zeros((n, kk));
                for (k, h) in fwd.embeddings.iter().enumerate() {
                    let col = (&dfused * h).sum_axis(Axis(1));
                    dalpha.column_mut(k).assign(&col);
                }
                let mut out = Vec::with_capacity(kk);
                let gbetas = grad.attention.as_mut().expect("attention grads");
                for (k, h) in fwd.embeddings.iter().enumerate() {
                    let mut dh = dfused.clone();
                    let mut de = Array1::<f64>::zeros(n);
                    for b in 0..n {
                        let a = alphas[[b, k]];
                        dh.row_mut(b).mapv_inplace(|v| a * v);
                        let mean: f64 = (0..kk).map(|j| alphas[[b, j]] * dalpha[[b, j]]).sum();
                        let ds = a * (dalpha[[b, k]] - mean);
                        let t = scores[[b, k]];
                        de[b] = ds * (1.0 - t * t);
                    }
                    gbetas[k] = h.t().dot(&de);
                    for b in 0..n {
                        dh.row_mut(b).scaled_add(de[b], &betas[k]);
                    }
                    out.push(dh);
                }
                out
            }
            _ => return Err(Error::DimensionMismatch("inconsistent attention state".into())),
        };

        for (p, ((enc, dh), x)) in self.encoders.iter().zip(&dembed).zip(&xs).enumerate() {
            let g = &mut grad.encoders[p];
            g.w2 = dh.t().dot(&fwd.hidden[p]);
            g.b2 = dh.sum_axis(Axis(0));
            let mut dz1 = dh.dot(&enc.w2);
            Zip::from(&mut dz1).and(&fwd.pre_hidden[p]).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            g.w1 = dz1.t().dot(x);
            g.b1 = dz1.sum_axis(Axis(0));
        }
        Ok(grad)
    }

    /// Mean cross-entropy loss over the batch.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let fwd = self.forward(batch)?;
        cross_entropy(fwd.logits.view(), &batch.labels).map(|(l, _)| l)
    }

    /// Mean cross-entropy loss and its gradient with respect to `[Φ, β, ω]`.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, ClientModel)> {
        let fwd = self.forward(batch)?;
        let (loss, dlogits) = cross_entropy(fwd.logits.view(), &batch.labels)?;
        let grad = self.backward(batch, &fwd, dlogits.view())?;
        Ok((loss, grad))
    }

    /// Predicted class per sample.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let fwd = self.forward(batch)?;
        Ok(fwd
            .logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        let pred = self.predict(batch)?;
        let hits = pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / batch.len() as f64)
    }
}

/// Central-difference gradient of the batch loss over every parameter.
pub fn finite_diff_grads(m: &ClientModel, batch: &Batch, eps: f64) -> Result<ClientModel> {
    let base = m.flatten();
    let mut probe = m.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut theta = base.clone();
    for c in 0..base.len() {
        theta[c] = base[c] + eps;
        probe.unflatten(&theta)?;
        let up = probe.loss(batch)?;
        theta[c] = base[c] - eps;
        probe.unflatten(&theta)?;
        let down = probe.loss(batch)?;
        theta[c] = base[c];
        out.push((up - down) / (2.0 * eps));
    }
    let mut g = m.zeros_like();
    g.unflatten(&out)?;
    Ok(g)
}
