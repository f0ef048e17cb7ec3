//! The trainable adapter, the fixed classification head, and every training
//! loop built on them.
//!
//! Logits are computed as `head(adapter(e))` for an embedding `e` from the
//! frozen encoder. Only the adapter is ever trained.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototype::PrototypeDataset;
use crate::rng::{self, purpose, Rng};
use crate::tensor::{
    dot, log_softmax, norm, softmax, softmax_cross_entropy, Matrix, Optimizer, OptimizerKind,
};
use crate::world::{gauss, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Linear,
    #[default]
    Cosine,
}

/// Fixed matrix of class anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    anchors: Matrix,
    mode: HeadMode,
    temperature: f64,
}

impl ClassificationHead {
    /// Wraps an anchor matrix. Cosine mode normalises every row and rejects
    /// zero rows.
    pub fn new(anchors: Matrix, mode: HeadMode, temperature: f64) -> Result<Self> {
        if anchors.rows() < 2 {
            return Err(Error::domain("head needs at least two classes"));
        }
        if !(temperature > 0.0) {
            return Err(Error::config("model.temperature", "must be positive"));
        }
        let mut anchors = anchors;
        if mode == HeadMode::Cosine {
            for k in 0..anchors.rows() {
                let row = anchors.row_mut(k);
                let n = norm(row);
                if !(n > 1e-12) {
                    return Err(Error::domain(format!(
                        "class {k} anchor has zero norm and cannot be normalised"
                    )));
                }
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(Self {
            anchors,
            mode,
            temperature,
        })
    }

    /// Averages several anchor variants per class, mirroring a head built
    /// from per-domain prompt embeddings.
    pub fn from_variants(variants: &[Vec<Vec<f64>>], mode: HeadMode, temperature: f64) -> Result<Self> {
        let rows: Vec<Vec<f64>> = variants
            .iter()
            .map(|vs| {
                let d = vs.first().map_or(0, Vec::len);
                let mut acc = vec![0.0; d];
                for v in vs {
                    acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
                }
                acc.iter_mut().for_each(|a| *a /= vs.len() as f64);
                acc
            })
            .collect();
        Self::new(Matrix::from_rows(&rows)?, mode, temperature)
    }

    pub fn anchors(&self) -> &Matrix {
        &self.anchors
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn classes(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn logits(&self, a: &[f64]) -> Result<Vec<f64>> {
        match self.mode {
            HeadMode::Linear => Ok(self.anchors.matvec(a)),
            HeadMode::Cosine => {
                let n = norm(a);
                if n == 0.0 {
                    return Err(Error::domain("adapted embedding has zero norm under cosine head"));
                }
                let mut z = self.anchors.matvec(a);
                let s = self.temperature / n;
                z.iter_mut().for_each(|v| *v *= s);
                Ok(z)
            }
        }
    }

    /// Gradient with respect to the adapted embedding `a`.
    fn backward(&self, a: &[f64], d_logits: &[f64]) -> Vec<f64> {
        let g = self.anchors.matvec_t(d_logits);
        match self.mode {
            HeadMode::Linear => g,
            HeadMode::Cosine => {
                let n = norm(a);
                let scale = self.temperature / n;
                let proj = dot(a, &g) / (n * n);
                g.iter()
                    .zip(a)
                    .map(|(gi, ai)| scale * (gi - proj * ai))
                    .collect()
            }
        }
    }
}

/// Per class, averages `variants_per_class` seeded random unit vectors.
pub fn build_head(
    classes: usize,
    d_emb: usize,
    seed: u64,
    variants_per_class: usize,
    mode: HeadMode,
    temperature: f64,
) -> Result<ClassificationHead> {
    if classes < 2 {
        return Err(Error::config("world.classes", "need at least two classes"));
    }
    if variants_per_class == 0 {
        return Err(Error::config("model.head_variants", "must be positive"));
    }
    let mut rng = rng::stream(seed, &[purpose::HEAD]);
    let variants: Vec<Vec<Vec<f64>>> = (0..classes)
        .map(|_| {
            (0..variants_per_class)
                .map(|_| {
                    let mut v: Vec<f64> = (0..d_emb).map(|_| gauss(&mut rng)).collect();
                    crate::tensor::normalize(&mut v);
                    v
                })
                .collect()
        })
        .collect();
    ClassificationHead::from_variants(&variants, mode, temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdapterKind {
    /// `a = W·e + b`; the bias is optional.
    Linear { bias: bool },
    /// `a = ρ·(W2·relu(W1·e + b1) + b2) + (1−ρ)·e`.
    Bottleneck { hidden: usize, residual: f64 },
}

impl AdapterKind {
    pub fn bottleneck_for(d_emb: usize) -> Self {
        AdapterKind::Bottleneck {
            hidden: (d_emb / 4).max(1),
            residual: 0.2,
        }
    }
}

/// Adapter parameters. Tensor layout:
/// linear `[W (d×d), b (d×1)]` (no `b` without bias);
/// bottleneck `[W1 (h×d), b1 (h×1), W2 (d×h), b2 (d×1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    kind: AdapterKind,
    d_emb: usize,
    tensors: Vec<Matrix>,
}

impl Adapter {
    /// Gaussian weights scaled by `1/√fan_in`, zero biases.
    pub fn init(kind: AdapterKind, d_emb: usize, rng: &mut Rng) -> Result<Self> {
        let s = 1.0 / (d_emb as f64).sqrt();
        let tensors = match kind {
            AdapterKind::Linear { bias } => {
                let mut t = vec![Matrix::from_fn(d_emb, d_emb, |_, _| s * gauss(rng))];
                if bias {
                    t.push(Matrix::zeros(d_emb, 1));
                }
                t
            }
            AdapterKind::Bottleneck { hidden, residual } => {
                if hidden == 0 {
                    return Err(Error::config("model.hidden", "must be positive"));
                }
                if !(0.0..=1.0).contains(&residual) {
                    return Err(Error::config("model.residual", "must lie in [0, 1]"));
                }
                let s2 = 1.0 / (hidden as f64).sqrt();
                vec![
                    Matrix::from_fn(hidden, d_emb, |_, _| s * gauss(rng)),
                    Matrix::zeros(hidden, 1),
                    Matrix::from_fn(d_emb, hidden, |_, _| s2 * gauss(rng)),
                    Matrix::zeros(d_emb, 1),
                ]
            }
        };
        Ok(Self {
            kind,
            d_emb,
            tensors,
        })
    }

    pub fn from_tensors(kind: AdapterKind, d_emb: usize, tensors: Vec<Matrix>) -> Result<Self> {
        let expected = Self::shapes(kind, d_emb);
        if tensors.len() != expected.len()
            || tensors.iter().zip(&expected).any(|(t, s)| t.shape() != *s)
        {
            return Err(Error::domain("adapter tensor shapes do not match kind"));
        }
        if tensors.iter().any(|t| !t.is_finite()) {
            return Err(Error::domain("adapter parameters must be finite"));
        }
        Ok(Self {
            kind,
            d_emb,
            tensors,
        })
    }

    /// `W = w`, `b = b` linear adapter.
    pub fn linear(w: Matrix, b: Option<Vec<f64>>) -> Result<Self> {
        let d = w.rows();
        let mut tensors = vec![w];
        let bias = b.is_some();
        if let Some(b) = b {
            tensors.push(Matrix::column(b));
        }
        Self::from_tensors(AdapterKind::Linear { bias }, d, tensors)
    }

    fn shapes(kind: AdapterKind, d: usize) -> Vec<(usize, usize)> {
        match kind {
            AdapterKind::Linear { bias: true } => vec![(d, d), (d, 1)],
            AdapterKind::Linear { bias: false } => vec![(d, d)],
            AdapterKind::Bottleneck { hidden, .. } => {
                vec![(hidden, d), (hidden, 1), (d, hidden), (d, 1)]
            }
        }
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.tensors
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect()
    }

    /// Frobenius distance between two adapters of the same layout.
    pub fn distance(&self, other: &Adapter) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| crate::tensor::squared_distance(a.data(), b.data()))
            .sum::<f64>()
            .sqrt()
    }

    /// `Σ wᵢ·Aᵢ` over adapters sharing one layout.
    pub fn weighted_average(adapters: &[&Adapter], weights: &[f64]) -> Result<Adapter> {
        let first = adapters
            .first()
            .ok_or_else(|| Error::domain("cannot average zero adapters"))?;
        if adapters.len() != weights.len() {
            return Err(Error::domain("one weight per adapter required"));
        }
        let mut out: Adapter = (*first).clone();
        for t in &mut out.tensors {
            t.scale(0.0);
        }
        for (a, &w) in adapters.iter().zip(weights) {
            if a.kind != first.kind || a.d_emb != first.d_emb {
                return Err(Error::domain("adapters have different layouts"));
            }
            for (o, t) in out.tensors.iter_mut().zip(&a.tensors) {
                o.add_scaled(w, t);
            }
        }
        Ok(out)
    }

    pub fn adapt(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.d_emb {
            return Err(Error::domain(format!(
                "adapter expects embeddings of length {}, got {}",
                self.d_emb,
                e.len()
            )));
        }
        Ok(self.forward_cached(e).0)
    }

    fn forward_cached(&self, e: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self.kind {
            AdapterKind::Linear { bias } => {
                let mut a = self.tensors[0].matvec(e);
                if bias {
                    a.iter_mut()
                        .zip(self.tensors[1].data())
                        .for_each(|(x, b)| *x += b);
                }
                (a, Vec::new())
            }
            AdapterKind::Bottleneck { residual, .. } => {
                let mut z1 = self.tensors[0].matvec(e);
                z1.iter_mut()
                    .zip(self.tensors[1].data())
                    .for_each(|(x, b)| *x += b);
                let r: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
                let z2 = self.tensors[2].matvec(&r);
                let a = z2
                    .iter()
                    .zip(self.tensors[3].data())
                    .zip(e)
                    .map(|((z, b), x)| residual * (z + b) + (1.0 - residual) * x)
                    .collect();
                (a, z1)
            }
        }
    }

    /// Accumulates `∂/∂θ` of a scalar with gradient `d_a` at the adapted
    /// embedding, scaled by `weight`, into `grads`.
    fn backward(&self, e: &[f64], cache: &[f64], d_a: &[f64], weight: f64, grads: &mut [Matrix]) {
        match self.kind {
            AdapterKind::Linear { bias } => {
                grads[0].add_outer(weight, d_a, e);
                if bias {
                    crate::tensor::axpy(weight, d_a, grads[1].data_mut());
                }
            }
            AdapterKind::Bottleneck { residual, .. } => {
                let z1 = cache;
                let r: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
                let d_z2: Vec<f64> = d_a.iter().map(|g| residual * g).collect();
                grads[2].add_outer(weight, &d_z2, &r);
                crate::tensor::axpy(weight, &d_z2, grads[3].data_mut());
                let mut d_z1 = self.tensors[2].matvec_t(&d_z2);
                d_z1.iter_mut()
                    .zip(z1)
                    .for_each(|(g, z)| if *z <= 0.0 { *g = 0.0 });
                grads[0].add_outer(weight, &d_z1, e);
                crate::tensor::axpy(weight, &d_z1, grads[1].data_mut());
            }
        }
    }

    /// `MPFTADP1` checkpoint:
    /// magic | u32 kind tag | u32 d_emb | u32 hidden | f64 residual |
    /// u32 parameter count | f32 parameters, all little-endian.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let (tag, hidden, residual) = match self.kind {
            AdapterKind::Linear { bias: true } => (0u32, 0u32, 0f64),
            AdapterKind::Linear { bias: false } => (1, 0, 0.0),
            AdapterKind::Bottleneck { hidden, residual } => (2, hidden as u32, residual),
        };
        let n = self.param_count();
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER_BYTES + 4 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [tag, self.d_emb as u32, hidden] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&residual.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for t in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Adapter> {
        if bytes.len() < CHECKPOINT_HEADER_BYTES {
            return Err(Error::parse(bytes.len(), "missing header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "bad magic"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let d = word(12) as usize;
        let kind = match word(8) {
            0 => AdapterKind::Linear { bias: true },
            1 => AdapterKind::Linear { bias: false },
            2 => AdapterKind::Bottleneck {
                hidden: word(16) as usize,
                residual: f64::from_le_bytes(bytes[20..28].try_into().unwrap()),
            },
            t => return Err(Error::parse(8, format!("unknown adapter kind tag {t}"))),
        };
        let n = word(28) as usize;
        let shapes = Self::shapes(kind, d);
        if shapes.iter().map(|(r, c)| r * c).sum::<usize>() != n {
            return Err(Error::parse(28, "parameter count does not match shape header"));
        }
        if bytes.len() != CHECKPOINT_HEADER_BYTES + 4 * n {
            return Err(Error::parse(
                bytes.len().min(CHECKPOINT_HEADER_BYTES + 4 * n),
                "parameter block has the wrong length",
            ));
        }
        let mut values = bytes[CHECKPOINT_HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
        let tensors = shapes
            .iter()
            .map(|&(r, c)| Matrix::from_vec(r, c, values.by_ref().take(r * c).collect()))
            .collect::<Result<Vec<_>>>()?;
        Adapter::from_tensors(kind, d, tensors)
    }

    /// Size of the serialised checkpoint in bytes.
    pub fn checkpoint_bytes(&self) -> u64 {
        (CHECKPOINT_HEADER_BYTES + 4 * self.param_count()) as u64
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MPFTADP1";
pub const CHECKPOINT_HEADER_BYTES: usize = 8 + 4 * 4 + 8;

/// Logits of `head(adapter(e))`.
pub fn forward(adapter: &Adapter, head: &ClassificationHead, e: &[f64]) -> Result<Vec<f64>> {
    head.logits(&adapter.adapt(e)?)
}

pub fn predict(adapter: &Adapter, head: &ClassificationHead, e: &[f64]) -> Result<usize> {
    let z = forward(adapter, head, e)?;
    let mut best = 0;
    for (k, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = k;
        }
    }
    Ok(best)
}

pub fn accuracy(adapter: &Adapter, head: &ClassificationHead, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        if predict(adapter, head, &s.x)? == s.y {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Mean cross-entropy over `samples`.
pub fn mean_ce_loss(adapter: &Adapter, head: &ClassificationHead, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        total += softmax_cross_entropy(&forward(adapter, head, &s.x)?, s.y)?.0;
    }
    Ok(total / samples.len() as f64)
}

/// `KL(softmax(teacher) ‖ softmax(student))` and its gradient with respect
/// to the student logits.
pub fn kl_divergence(teacher_logits: &[f64], student_logits: &[f64]) -> (f64, Vec<f64>) {
    let lp = log_softmax(teacher_logits);
    let lq = log_softmax(student_logits);
    let kl = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0);
    let grad = lq
        .iter()
        .zip(&lp)
        .map(|(q, p)| q.exp() - p.exp())
        .collect();
    (kl, grad)
}

/// Batch-mean KL divergence from global-adapter outputs to local-adapter
/// outputs.
pub fn kd_loss(global_logits: &[Vec<f64>], local_logits: &[Vec<f64>]) -> Result<f64> {
    if global_logits.len() != local_logits.len()
        || global_logits.iter().zip(local_logits).any(|(g, l)| g.len() != l.len())
    {
        return Err(Error::domain("teacher and student logits differ in shape"));
    }
    if global_logits.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = global_logits
        .iter()
        .zip(local_logits)
        .map(|(g, l)| kl_divergence(g, l).0)
        .sum();
    Ok(total / global_logits.len() as f64)
}

/// Extra terms added to the cross-entropy.
#[derive(Debug, Clone, Copy, Default)]
pub struct Regularizers<'a> {
    /// Frozen teacher and KD weight β.
    pub distill: Option<(&'a Adapter, f64)>,
    /// Anchor and proximal weight μ for `(μ/2)·‖A − anchor‖²`.
    pub proximal: Option<(&'a Adapter, f64)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub prox: f64,
}

/// Mean loss over `batch` and its gradient with respect to the adapter.
pub fn loss_and_grad(
    adapter: &Adapter,
    head: &ClassificationHead,
    batch: &[&Sample],
    reg: Regularizers<'_>,
) -> Result<(LossParts, Vec<Matrix>)> {
    let mut grads = adapter.zero_grads();
    let mut parts = LossParts::default();
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let w = 1.0 / batch.len() as f64;
    for s in batch {
        if s.x.len() != adapter.d_emb {
            return Err(Error::domain("sample width does not match adapter"));
        }
        let (a, cache) = adapter.forward_cached(&s.x);
        let logits = head.logits(&a)?;
        let (ce, mut d_logits) = softmax_cross_entropy(&logits, s.y)?;
        parts.ce += w * ce;
        if let Some((teacher, beta)) = reg.distill {
            if beta != 0.0 {
                let t = forward(teacher, head, &s.x)?;
                let (kl, g) = kl_divergence(&t, &logits);
                parts.kd += w * kl;
                d_logits.iter_mut().zip(&g).for_each(|(d, gk)| *d += beta * gk);
            }
        }
        let d_a = head.backward(&a, &d_logits);
        adapter.backward(&s.x, &cache, &d_a, w, &mut grads);
    }
    let beta = reg.distill.map_or(0.0, |(_, b)| b);
    parts.total = parts.ce + beta * parts.kd;
    if let Some((anchor, mu)) = reg.proximal {
        if mu != 0.0 {
            let mut sq = 0.0;
            for ((g, p), q) in grads.iter_mut().zip(&adapter.tensors).zip(&anchor.tensors) {
                for ((gk, pk), qk) in g.data_mut().iter_mut().zip(p.data()).zip(q.data()) {
                    let diff = pk - qk;
                    sq += diff * diff;
                    *gk += mu * diff;
                }
            }
            parts.prox = 0.5 * mu * sq;
            parts.total += parts.prox;
        }
    }
    Ok((parts, grads))
}

/// Hyperparameters shared by every adapter training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epoch cap for server-side prototype training.
    pub max_epochs: usize,
    pub variance_threshold: f64,
    pub variance_window: usize,
    pub optimizer: OptimizerKind,
    /// Global-norm gradient clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// KD weight β for local adaptation.
    pub kd_weight: f64,
    /// Few-shot samples per class for local adaptation.
    pub few_shot: usize,
    /// Epochs over the few-shot set during local adaptation.
    pub adapt_epochs: usize,
    /// Accepted and reported; no training loop consumes them.
    pub preservation_weight: f64,
    pub adaptation_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            max_epochs: 500,
            variance_threshold: 1e-5,
            variance_window: 5,
            optimizer: OptimizerKind::Adam,
            grad_clip: 1.0,
            seed: 0,
            kd_weight: 1.0,
            few_shot: 5,
            adapt_epochs: 25,
            preservation_weight: 1.0,
            adaptation_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("train.learning_rate", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.variance_window < 2 {
            return Err(Error::config("train.variance_window", "must be at least 2"));
        }
        if !(self.kd_weight >= 0.0) {
            return Err(Error::config("train.kd_weight", "must be non-negative"));
        }
        if self.few_shot == 0 {
            return Err(Error::config("train.few_shot", "must be at least 1"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip", "must be non-negative"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Optimizer {
        let clip = (self.grad_clip > 0.0).then_some(self.grad_clip);
        Optimizer::new(self.optimizer, self.learning_rate, clip)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochStats {
    /// Sample-weighted mean of the batch losses.
    pub loss: LossParts,
    /// Mean over batches of the squared gradient norm.
    pub grad_norm_sq: f64,
}

/// One pass over `data` in seeded shuffled mini-batches. When the batch
/// covers the whole set the order is left untouched, so the recorded loss is
/// the full objective at the pre-step parameters.
pub fn train_epoch(
    adapter: &mut Adapter,
    head: &ClassificationHead,
    data: &[Sample],
    reg: Regularizers<'_>,
    optimizer: &mut Optimizer,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::domain("cannot train on an empty dataset"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if batch_size < data.len() {
        order.shuffle(rng);
    }
    let mut stats = EpochStats::default();
    let mut batches = 0usize;
    let n = data.len() as f64;
    for chunk in order.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
        let (parts, grads) = loss_and_grad(adapter, head, &batch, reg)?;
        let w = batch.len() as f64 / n;
        stats.loss.total += w * parts.total;
        stats.loss.ce += w * parts.ce;
        stats.loss.kd += w * parts.kd;
        stats.loss.prox += w * parts.prox;
        stats.grad_norm_sq += grads.iter().map(Matrix::frobenius_sq).sum::<f64>();
        batches += 1;
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        optimizer.step(adapter.tensors_mut(), &grads)?;
    }
    stats.grad_norm_sq /= batches as f64;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapter: Adapter,
    pub loss_history: Vec<f64>,
    pub grad_norm_sq_history: Vec<f64>,
    pub epochs_used: usize,
}

fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Server-side training of the global adapter on every prototype.
///
/// Prototypes are independent training points. Training stops once the
/// variance of the last `variance_window` epoch losses drops below
/// `variance_threshold`, or at `max_epochs`.
pub fn train_global_adapter(
    prototypes: &PrototypeDataset,
    head: &ClassificationHead,
    initial: Adapter,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if prototypes.is_empty() {
        return Err(Error::domain("prototype dataset is empty"));
    }
    if let Some(p) = prototypes.prototypes.iter().find(|p| p.class_id >= head.classes()) {
        return Err(Error::domain(format!(
            "prototype label {} exceeds head classes {}",
            p.class_id,
            head.classes()
        )));
    }
    train_until_flat(&prototypes.as_samples(), head, initial, config)
}

/// The variance-stopped loop behind [`train_global_adapter`], usable on any
/// labelled embedding set.
pub fn train_until_flat(
    data: &[Sample],
    head: &ClassificationHead,
    initial: Adapter,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut adapter = initial;
    let mut optimizer = config.optimizer();
    let mut rng = rng::stream(config.seed, &[purpose::SERVER]);
    let mut losses = Vec::new();
    let mut grad_norms = Vec::new();
    for epoch in 1..=config.max_epochs {
        let stats = match train_epoch(
            &mut adapter,
            head,
            data,
            Regularizers::default(),
            &mut optimizer,
            config.batch_size,
            &mut rng,
        ) {
            Err(Error::NonFiniteGradient) => return Err(Error::Diverged { epoch }),
            other => other?,
        };
        if !stats.loss.total.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        losses.push(stats.loss.total);
        grad_norms.push(stats.grad_norm_sq);
        let w = config.variance_window;
        if losses.len() >= w && population_variance(&losses[losses.len() - w..]) < config.variance_threshold {
            break;
        }
    }
    Ok(TrainOutcome {
        adapter,
        epochs_used: losses.len(),
        loss_history: losses,
        grad_norm_sq_history: grad_norms,
    })
}

/// Smoothness bound for mean softmax cross-entropy with a linear adapter
/// and linear head: `½·σ_max(H)²·max‖ẽ‖²`, where `ẽ` is the prototype with a
/// constant 1 appended when the adapter has a bias.
pub fn lipschitz_bound(prototypes: &PrototypeDataset, head: &ClassificationHead, kind: AdapterKind) -> Result<f64> {
    let bias = match kind {
        AdapterKind::Linear { bias } => bias,
        AdapterKind::Bottleneck { .. } => {
            return Err(Error::Unsupported("Lipschitz bound requires a linear adapter".into()))
        }
    };
    if head.mode() != HeadMode::Linear {
        return Err(Error::Unsupported("Lipschitz bound requires a linear head".into()));
    }
    if prototypes.is_empty() {
        return Ok(0.0);
    }
    let sigma = head.anchors().spectral_norm();
    let extra = if bias { 1.0 } else { 0.0 };
    let max_sq = prototypes
        .prototypes
        .iter()
        .map(|p| dot(&p.vec, &p.vec) + extra)
        .fold(0.0, f64::max);
    Ok(0.5 * sigma * sigma * max_sq)
}

/// Up to `few_shot` training samples per class, drawn without replacement.
pub fn few_shot_select(samples: &[Sample], classes: usize, few_shot: usize, rng: &mut Rng) -> Vec<Sample> {
    let mut out = Vec::new();
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].y == class).collect();
        let take = few_shot.min(idx.len());
        let (chosen, _) = idx.partial_shuffle(rng, take);
        out.extend(chosen.iter().map(|&i| samples[i].clone()));
    }
    out
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub adapter: Adapter,
    pub ce_history: Vec<f64>,
    pub kd_history: Vec<f64>,
}

/// Fine-tunes a copy of the global adapter on few-shot data with
/// `CE + β·KL(global ‖ local)`.
pub fn local_adapt(
    global: &Adapter,
    head: &ClassificationHead,
    few_shot: &[Sample],
    beta: f64,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<AdaptOutcome> {
    if few_shot.is_empty() {
        return Err(Error::domain("few-shot set is empty"));
    }
    if !(beta >= 0.0) {
        return Err(Error::config("train.kd_weight", "must be non-negative"));
    }
    let mut adapter = global.clone();
    let mut optimizer = config.optimizer();
    let reg = Regularizers {
        distill: Some((global, beta)),
        proximal: None,
    };
    let mut ce = Vec::with_capacity(config.adapt_epochs);
    let mut kd = Vec::with_capacity(config.adapt_epochs);
    for _ in 0..config.adapt_epochs {
        let stats = train_epoch(&mut adapter, head, few_shot, reg, &mut optimizer, config.batch_size, rng)?;
        ce.push(stats.loss.ce);
        kd.push(stats.loss.kd);
    }
    Ok(AdaptOutcome {
        adapter,
        ce_history: ce,
        kd_history: kd,
    })
}

/// Softmax probabilities of the full model, for diagnostics.
pub fn probabilities(adapter: &Adapter, head: &ClassificationHead, e: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&forward(adapter, head, e)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(x: Vec<f64>, y: usize) -> Sample {
        Sample { x, y, origin_domain: 0 }
    }

    #[test]
    fn single_variant_anchor_is_that_vector() {
        let v = vec![vec![vec![0.6, 0.8]], vec![vec![1.0, 0.0]]];
        let h = ClassificationHead::from_variants(&v, HeadMode::Cosine, 1.0).unwrap();
        assert_eq!(h.anchors().row(0), &[0.6, 0.8]);
        let built = build_head(4, 7, 3, 1, HeadMode::Cosine, 100.0).unwrap();
        for k in 0..4 {
            assert!((norm(built.anchors().row(k)) - 1.0).abs() < 1e-12);
        }
        let averaged = build_head(4, 7, 3, 5, HeadMode::Cosine, 100.0).unwrap();
        for k in 0..4 {
            assert!((norm(averaged.anchors().row(k)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_variants_cannot_normalise() {
        let v = vec![vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![vec![0.0, 1.0]]];
        assert!(ClassificationHead::from_variants(&v, HeadMode::Cosine, 1.0).is_err());
    }

    #[test]
    fn identity_adapter_linear_head() {
        let head = ClassificationHead::new(
            Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]]).unwrap(),
            HeadMode::Linear,
            1.0,
        )
        .unwrap();
        let a = Adapter::linear(Matrix::identity(2), Some(vec![0.0, 0.0])).unwrap();
        let e = [0.3, -0.4];
        let z = forward(&a, &head, &e).unwrap();
        for k in 0..3 {
            assert!((z[k] - dot(&e, head.anchors().row(k))).abs() < 1e-15);
        }
        let zero = Adapter::linear(Matrix::zeros(2, 2), Some(vec![0.0, 0.0])).unwrap();
        assert_eq!(forward(&zero, &head, &e).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn cosine_logits_bounded_and_zero_norm_rejected() {
        let head = build_head(5, 6, 1, 2, HeadMode::Cosine, 100.0).unwrap();
        let mut rng = rng::stream(2, &[]);
        let a = Adapter::init(AdapterKind::Linear { bias: true }, 6, &mut rng).unwrap();
        for i in 0..20 {
            let e: Vec<f64> = (0..6).map(|j| ((i * 7 + j) as f64).sin()).collect();
            let z = forward(&a, &head, &e).unwrap();
            assert!(z.iter().all(|v| v.abs() <= 100.0 + 1e-9));
        }
        let zero = Adapter::linear(Matrix::zeros(6, 6), None).unwrap();
        assert!(forward(&zero, &head, &[1.0; 6]).is_err());
    }

    #[test]
    fn kd_values() {
        assert_eq!(kd_loss(&[vec![0.3, 1.2]], &[vec![0.3, 1.2]]).unwrap(), 0.0);
        // softmax([ln 4, 0]) = [0.8, 0.2]; softmax([0, 0]) = [0.5, 0.5].
        let g = vec![vec![4f64.ln(), 0.0]];
        let l = vec![vec![0.0, 0.0]];
        let expected = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((kd_loss(&g, &l).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.1927).abs() < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip_at_f32() {
        let mut rng = rng::stream(4, &[]);
        for kind in [
            AdapterKind::Linear { bias: true },
            AdapterKind::Linear { bias: false },
            AdapterKind::bottleneck_for(8),
        ] {
            let a = Adapter::init(kind, 8, &mut rng).unwrap();
            let bytes = a.to_checkpoint();
            assert_eq!(bytes.len() as u64, a.checkpoint_bytes());
            let b = Adapter::from_checkpoint(&bytes).unwrap();
            assert_eq!(b.kind(), a.kind());
            for (x, y) in a.tensors().iter().zip(b.tensors()) {
                for (p, q) in x.data().iter().zip(y.data()) {
                    assert_eq!(*p as f32, *q as f32);
                }
            }
            assert_eq!(b.to_checkpoint(), bytes);
        }
        assert!(Adapter::from_checkpoint(b"MPFTADP1").is_err());
    }

    #[test]
    fn few_shot_counts() {
        let mut data = Vec::new();
        for class in 0..3 {
            let n = if class == 2 { 2 } else { 20 };
            for i in 0..n {
                data.push(sample(vec![i as f64], class));
            }
        }
        let a = few_shot_select(&data, 3, 5, &mut rng::stream(1, &[]));
        let b = few_shot_select(&data, 3, 5, &mut rng::stream(1, &[]));
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert_eq!(a.iter().filter(|s| s.y == 2).count(), 2);
        assert_eq!(a.iter().filter(|s| s.y == 0).count(), 5);
    }

    #[test]
    fn lipschitz_formula() {
        use crate::prototype::Prototype;
        let head = ClassificationHead::new(Matrix::identity(3), HeadMode::Linear, 1.0).unwrap();
        let mut ds = PrototypeDataset {
            prototypes: vec![Prototype { client_id: 0, class_id: 0, vec: vec![0.6, 0.8, 0.0] }],
            d_emb: 3,
            classes: 3,
            contributing_clients: vec![0],
            missing: vec![],
        };
        let nobias = AdapterKind::Linear { bias: false };
        assert!((lipschitz_bound(&ds, &head, nobias).unwrap() - 0.5).abs() < 1e-12);
        assert!((lipschitz_bound(&ds, &head, AdapterKind::Linear { bias: true }).unwrap() - 1.0).abs() < 1e-12);
        ds.prototypes[0].vec.iter_mut().for_each(|v| *v *= 2.0);
        assert!((lipschitz_bound(&ds, &head, nobias).unwrap() - 2.0).abs() < 1e-12);
        ds.prototypes.clear();
        assert_eq!(lipschitz_bound(&ds, &head, nobias).unwrap(), 0.0);
        let cos = ClassificationHead::new(Matrix::identity(3), HeadMode::Cosine, 1.0).unwrap();
        assert!(matches!(lipschitz_bound(&ds, &cos, nobias), Err(Error::Unsupported(_))));
        assert!(lipschitz_bound(&ds, &head, AdapterKind::bottleneck_for(3)).is_err());
    }

    #[test]
    fn empty_inputs_error() {
        let head = build_head(2, 2, 0, 1, HeadMode::Cosine, 10.0).unwrap();
        let a = Adapter::init(AdapterKind::Linear { bias: true }, 2, &mut rng::stream(0, &[])).unwrap();
        let cfg = TrainConfig::default();
        assert!(local_adapt(&a, &head, &[], 1.0, &cfg, &mut rng::stream(0, &[])).is_err());
        let empty = PrototypeDataset {
            prototypes: vec![],
            d_emb: 2,
            classes: 2,
            contributing_clients: vec![],
            missing: vec![],
        };
        assert!(train_global_adapter(&empty, &head, a, &cfg).is_err());
    }
}
