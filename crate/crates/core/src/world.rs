//! Synthetic multi-domain federations and the frozen encoder.
//!
//! Raw inputs are drawn as `x = μ_k + δ_d + ε`: a class mean shared by all
//! domains, a per-domain offset, and anisotropic noise rotated by a per-domain
//! orthogonal matrix so domains differ in both location and covariance.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, purpose, Rng};
use crate::tensor::{dot, normalize, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub origin_domain: usize,
}

/// Index partition of a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub client_id: usize,
    pub home_domain: usize,
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl DomainDataset {
    pub fn indices(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.split.train,
            Part::Test => &self.split.test,
            Part::Validation => &self.split.validation,
        }
    }

    pub fn part(&self, part: Part) -> Vec<Sample> {
        self.indices(part)
            .iter()
            .map(|&i| self.samples[i].clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Identity,
    #[default]
    Mlp2,
}

fn default_split() -> [f64; 3] {
    [0.7, 0.2, 0.1]
}

/// Parameters of a synthetic federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub clients: usize,
    pub classes: usize,
    pub d_in: usize,
    pub d_emb: usize,
    pub samples_per_class_per_client: usize,
    /// Scale of the per-domain mean offset (σ_d).
    pub domain_shift_scale: f64,
    /// Scale of within-class noise (σ_w).
    pub within_class_scale: f64,
    /// Fraction of every client's samples drawn from its partner domain.
    pub mixed_ratio: f64,
    /// Clients per domain. `clients` must be divisible by it.
    pub shards_per_domain: usize,
    pub encoder: EncoderKind,
    /// Train/test/validation fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            clients: 6,
            classes: 10,
            d_in: 64,
            d_emb: 32,
            samples_per_class_per_client: 60,
            domain_shift_scale: 2.0,
            within_class_scale: 0.6,
            mixed_ratio: 0.0,
            shards_per_domain: 1,
            encoder: EncoderKind::Mlp2,
            split: default_split(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("world.clients", self.clients),
            ("world.classes", self.classes),
            ("world.d_in", self.d_in),
            ("world.d_emb", self.d_emb),
            ("world.samples_per_class_per_client", self.samples_per_class_per_client),
            ("world.shards_per_domain", self.shards_per_domain),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("world.classes", "need at least two classes"));
        }
        if !(0.0..=1.0).contains(&self.mixed_ratio) {
            return Err(Error::config(
                "world.mixed_ratio",
                format!("{} is outside [0, 1]", self.mixed_ratio),
            ));
        }
        if self.clients % self.shards_per_domain != 0 {
            return Err(Error::config(
                "world.shards_per_domain",
                format!(
                    "{} clients cannot be divided into shards of {}",
                    self.clients, self.shards_per_domain
                ),
            ));
        }
        if !(self.domain_shift_scale >= 0.0 && self.within_class_scale >= 0.0) {
            return Err(Error::config("world.domain_shift_scale", "scales must be non-negative"));
        }
        if self.encoder == EncoderKind::Identity && self.d_in != self.d_emb {
            return Err(Error::config("world.d_emb", "identity encoder requires d_in = d_emb"));
        }
        validate_ratios(&self.split).map_err(|_| {
            Error::config("world.split", "ratios must be positive and sum to 1")
        })?;
        Ok(())
    }

    pub fn domains(&self) -> usize {
        self.clients / self.shards_per_domain
    }
}

/// Deterministic stand-in for a pretrained image encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoder {
    kind: EncoderKind,
    d_in: usize,
    d_emb: usize,
    seed: u64,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

const ENCODER_BIAS_SCALE: f64 = 0.1;

impl FrozenEncoder {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: EncoderKind::Identity,
            d_in: dim,
            d_emb: dim,
            seed: 0,
            w1: Matrix::zeros(0, 0),
            b1: Vec::new(),
            w2: Matrix::zeros(0, 0),
            b2: Vec::new(),
        }
    }

    /// Two-layer tanh MLP with Gaussian weights scaled by `1/√fan_in`.
    /// The hidden width equals `d_in`.
    pub fn mlp2(d_in: usize, d_emb: usize, seed: u64) -> Self {
        let hidden = d_in;
        let mut rng = rng::stream(seed, &[purpose::ENCODER]);
        let s1 = 1.0 / (d_in as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Matrix::from_fn(hidden, d_in, |_, _| s1 * gauss(&mut rng));
        let b1 = (0..hidden).map(|_| ENCODER_BIAS_SCALE * gauss(&mut rng)).collect();
        let w2 = Matrix::from_fn(d_emb, hidden, |_, _| s2 * gauss(&mut rng));
        let b2 = (0..d_emb).map(|_| ENCODER_BIAS_SCALE * gauss(&mut rng)).collect();
        Self {
            kind: EncoderKind::Mlp2,
            d_in,
            d_emb,
            seed,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn build(kind: EncoderKind, d_in: usize, d_emb: usize, seed: u64) -> Result<Self> {
        match kind {
            EncoderKind::Identity if d_in != d_emb => {
                Err(Error::domain("identity encoder requires d_in = d_emb"))
            }
            EncoderKind::Identity => Ok(Self::identity(d_in)),
            EncoderKind::Mlp2 => Ok(Self::mlp2(d_in, d_emb, seed)),
        }
    }

    /// Same weights with both bias vectors zeroed.
    pub fn without_biases(mut self) -> Self {
        self.b1.iter_mut().for_each(|b| *b = 0.0);
        self.b2.iter_mut().for_each(|b| *b = 0.0);
        self
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::domain(format!(
                "encoder expects input of length {}, got {}",
                self.d_in,
                x.len()
            )));
        }
        Ok(match self.kind {
            EncoderKind::Identity => x.to_vec(),
            EncoderKind::Mlp2 => self.forward(x).1,
        })
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden: Vec<f64> = (0..self.w1.rows())
            .map(|j| (dot(self.w1.row(j), x) + self.b1[j]).tanh())
            .collect();
        let out = (0..self.d_emb)
            .map(|j| (dot(self.w2.row(j), &hidden) + self.b2[j]).tanh())
            .collect();
        (hidden, out)
    }

    /// Chain-rule gradient with respect to the input, given the gradient
    /// `upstream` with respect to the embedding at `x`.
    pub fn input_grad(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in || upstream.len() != self.d_emb {
            return Err(Error::domain("input or upstream gradient has the wrong length"));
        }
        Ok(match self.kind {
            EncoderKind::Identity => upstream.to_vec(),
            EncoderKind::Mlp2 => {
                let (hidden, out) = self.forward(x);
                let d_out: Vec<f64> = upstream
                    .iter()
                    .zip(&out)
                    .map(|(g, o)| g * (1.0 - o * o))
                    .collect();
                let mut d_hidden = self.w2.matvec_t(&d_out);
                for (g, h) in d_hidden.iter_mut().zip(&hidden) {
                    *g *= 1.0 - h * h;
                }
                self.w1.matvec_t(&d_hidden)
            }
        })
    }

    /// FNV-1a hash over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        feed(self.kind as u64);
        feed(self.d_in as u64);
        feed(self.d_emb as u64);
        for v in self
            .w1
            .data()
            .iter()
            .chain(&self.b1)
            .chain(self.w2.data())
            .chain(&self.b2)
        {
            feed(v.to_bits());
        }
        h
    }

    /// Maps every sample of `dataset` into embedding space, keeping labels,
    /// origin tags and the split.
    pub fn embed_dataset(&self, dataset: &DomainDataset) -> Result<DomainDataset> {
        let samples = dataset
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    x: self.encode(&s.x)?,
                    y: s.y,
                    origin_domain: s.origin_domain,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DomainDataset {
            client_id: dataset.client_id,
            home_domain: dataset.home_domain,
            samples,
            split: dataset.split.clone(),
        })
    }
}

/// One standard normal draw.
pub fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A generated federation: client datasets in raw input space plus the
/// encoder every client shares.
#[derive(Debug, Clone)]
pub struct Federation {
    pub classes: usize,
    pub encoder: FrozenEncoder,
    pub datasets: Vec<DomainDataset>,
}

impl Federation {
    pub fn clients(&self) -> usize {
        self.datasets.len()
    }

    /// Client datasets mapped through the frozen encoder.
    pub fn embedded(&self) -> Result<Vec<DomainDataset>> {
        self.datasets
            .iter()
            .map(|d| self.encoder.embed_dataset(d))
            .collect()
    }
}

struct DomainGeometry {
    shift: Vec<f64>,
    rotation: Matrix,
}

fn random_orthogonal(dim: usize, rng: &mut Rng) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        for r in &rows {
            let p = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        if normalize(&mut v) > 1e-8 {
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows).expect("square rows")
}

fn noise_profile(d_in: usize) -> Vec<f64> {
    if d_in == 1 {
        return vec![1.0];
    }
    (0..d_in)
        .map(|j| 0.5 + j as f64 / (d_in - 1) as f64)
        .collect()
}

fn draw_sample(
    class_means: &[Vec<f64>],
    geometry: &DomainGeometry,
    profile: &[f64],
    within_scale: f64,
    class: usize,
    domain: usize,
    rng: &mut Rng,
) -> Sample {
    let z: Vec<f64> = profile.iter().map(|s| s * gauss(rng)).collect();
    let noise = geometry.rotation.matvec(&z);
    let x = class_means[class]
        .iter()
        .zip(&geometry.shift)
        .zip(&noise)
        .map(|((m, d), e)| m + d + within_scale * e)
        .collect();
    Sample {
        x,
        y: class,
        origin_domain: domain,
    }
}

/// Builds the federation described by `config`.
pub fn generate_federation(config: &WorldConfig) -> Result<Federation> {
    config.validate()?;
    let d = config.d_in;
    let mut world_rng = rng::stream(config.seed, &[purpose::WORLD]);
    let class_means: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| (0..d).map(|_| gauss(&mut world_rng)).collect())
        .collect();
    let domains = config.domains();
    let geometry: Vec<DomainGeometry> = (0..domains)
        .map(|dom| {
            let mut rng = rng::stream(config.seed, &[purpose::WORLD, dom as u64]);
            let shift = (0..d)
                .map(|_| config.domain_shift_scale * gauss(&mut rng))
                .collect();
            let rotation = random_orthogonal(d, &mut rng);
            DomainGeometry { shift, rotation }
        })
        .collect();
    let profile = noise_profile(d);
    let m = config.shards_per_domain;
    let per_class = config.samples_per_class_per_client;

    let mut datasets = Vec::with_capacity(config.clients);
    for (dom, geo) in geometry.iter().enumerate() {
        let mut rng = rng::stream(config.seed, &[purpose::WORLD, dom as u64, 1]);
        // Pool per class, then dealt into shards of equal class counts.
        let mut shards: Vec<Vec<Sample>> = vec![Vec::new(); m];
        let mut shard_rng = rng::stream(config.seed, &[purpose::SHARD, dom as u64]);
        for class in 0..config.classes {
            let mut pool: Vec<Sample> = (0..per_class * m)
                .map(|_| {
                    draw_sample(
                        &class_means,
                        geo,
                        &profile,
                        config.within_class_scale,
                        class,
                        dom,
                        &mut rng,
                    )
                })
                .collect();
            if m > 1 {
                pool.shuffle(&mut shard_rng);
            }
            for (s, chunk) in pool.chunks(per_class).enumerate() {
                shards[s].extend_from_slice(chunk);
            }
        }
        for (s, samples) in shards.into_iter().enumerate() {
            datasets.push(DomainDataset {
                client_id: dom * m + s,
                home_domain: dom,
                samples,
                split: Split::default(),
            });
        }
    }

    if config.mixed_ratio > 0.0 {
        let n_clients = datasets.len();
        for i in 0..n_clients {
            let partner = datasets[(i + 1) % n_clients].home_domain;
            let ds = &mut datasets[i];
            let count = (config.mixed_ratio * ds.samples.len() as f64).round() as usize;
            let mut positions: Vec<usize> = (0..ds.samples.len()).collect();
            positions.shuffle(&mut rng::stream(config.seed, &[purpose::MIX, i as u64]));
            let mut rng = rng::stream(config.seed, &[purpose::MIX, i as u64, 1]);
            for &p in &positions[..count] {
                let class = ds.samples[p].y;
                ds.samples[p] = draw_sample(
                    &class_means,
                    &geometry[partner],
                    &profile,
                    config.within_class_scale,
                    class,
                    partner,
                    &mut rng,
                );
            }
        }
    }

    for ds in &mut datasets {
        let labels: Vec<usize> = ds.samples.iter().map(|s| s.y).collect();
        ds.split = split_dataset(
            &labels,
            &config.split,
            &mut rng::stream(config.seed, &[purpose::SPLIT, ds.client_id as u64]),
        )?;
    }

    let encoder = FrozenEncoder::build(config.encoder, config.d_in, config.d_emb, config.seed)?;
    Ok(Federation {
        classes: config.classes,
        encoder,
        datasets,
    })
}

fn validate_ratios(ratios: &[f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "split",
            format!("ratios {ratios:?} must be positive and sum to 1"),
        ));
    }
    Ok(())
}

/// Stratified train/test/validation split.
///
/// Each class is shuffled and cut into contiguous blocks of
/// `round(n_c·test)` and `round(n_c·val)` samples; the rest goes to train.
pub fn split_dataset(labels: &[usize], ratios: &[f64; 3], rng: &mut Rng) -> Result<Split> {
    validate_ratios(ratios)?;
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut split = Split::default();
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(rng);
        let n = idx.len() as f64;
        let n_test = ((n * ratios[1]).round() as usize).min(idx.len());
        let n_val = ((n * ratios[2]).round() as usize).min(idx.len() - n_test);
        let n_train = idx.len() - n_test - n_val;
        split.train.extend_from_slice(&idx[..n_train]);
        split.test.extend_from_slice(&idx[n_train..n_train + n_test]);
        split.validation.extend_from_slice(&idx[n_train + n_test..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    split.validation.sort_unstable();
    Ok(split)
}
