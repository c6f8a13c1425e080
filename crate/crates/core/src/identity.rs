//! Identity embeddings: a small conv classifier whose penultimate layer serves as
//! the frozen feature extractor, the identity-preservation loss and cosine scoring.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdbgan_autograd::nn::{Conv2d, Linear};
use tdbgan_autograd::{Adam, Graph, Module, Param, Real, Tensor, Var};

use crate::data::{epoch_batches, Dataset, LabelMode};
use crate::error::{check_shape, invalid, Error, Result};
use crate::gan::cls_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: vec![16, 32, 64],
            embed_dim: 512,
        }
    }
}

/// `(conv 4x4 stride 2, leaky ReLU)* -> flatten -> fc_embed -> leaky ReLU -> fc_out`.
#[derive(Clone, Debug)]
pub struct ConvClassifier<T> {
    pub config: ClassifierConfig,
    pub classes: usize,
    convs: Vec<Conv2d<T>>,
    embed: Linear<T>,
    out: Linear<T>,
}

impl<T: Real> ConvClassifier<T> {
    pub fn new(name: &str, config: ClassifierConfig, classes: usize, seed: u64) -> Result<Self> {
        let depth = config.channels.len();
        if depth == 0 || config.image_size >> depth == 0 || (config.image_size >> depth) << depth != config.image_size {
            return Err(invalid(
                "classifier config",
                format!("image_size {} not divisible by 2^{depth}", config.image_size),
            ));
        }
        if classes == 0 || config.embed_dim == 0 {
            return Err(invalid("classifier config", "classes and embed_dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let mut convs = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(&format!("{name}.conv{i}"), c_in, c, 4, 2, 1, &mut rng));
            c_in = c;
        }
        let flat = c_in * (config.image_size >> depth).pow(2);
        let embed = Linear::new(&format!("{name}.fc_embed"), flat, config.embed_dim, &mut rng);
        let out = Linear::new(&format!("{name}.fc_out"), config.embed_dim, classes, &mut rng);
        Ok(Self {
            config,
            classes,
            convs,
            embed,
            out,
        })
    }

    /// `(embedding, logits)`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, h);
            h = g.leaky_relu(h, T::lit(0.2));
        }
        let n = g.shape(h)[0];
        let flat = g.value(h).len() / n;
        let h = g.reshape(h, &[n, flat]);
        let e = self.embed.forward(g, h);
        let a = g.leaky_relu(e, T::lit(0.2));
        (e, self.out.forward(g, a))
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let n = images.shape().first().copied().unwrap_or(0);
        let s = self.config.image_size;
        check_shape("classifier input", &[n, 3, s, s], images.shape())
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images)?;
        Ok(self.run_chunked(images, |_, l| l))
    }

    pub fn embeddings(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images)?;
        Ok(self.run_chunked(images, |e, _| e))
    }

    fn run_chunked(&self, images: &Tensor<T>, pick: impl Fn(Tensor<T>, Tensor<T>) -> Tensor<T>) -> Tensor<T> {
        let n = images.dim(0);
        let per = images.len() / n.max(1);
        let parts: Vec<Tensor<T>> = images
            .data()
            .chunks(per * 64)
            .map(|c| {
                let mut s = images.shape().to_vec();
                s[0] = c.len() / per;
                let mut g = Graph::new();
                let x = g.input(Tensor::new(&s, c.to_vec()).unwrap());
                let (e, l) = self.forward(&mut g, x);
                pick(g.value(e).clone(), g.value(l).clone())
            })
            .collect();
        Tensor::stack(&parts).unwrap()
    }

    /// Argmax (one-hot) or thresholded (multi-binary) predictions, `[n][k]`.
    pub fn predict(&self, images: &Tensor<T>, mode: LabelMode) -> Result<Vec<Vec<u8>>> {
        let logits = self.logits(images)?;
        Ok(logits
            .data()
            .chunks(self.classes)
            .map(|row| match mode {
                LabelMode::MultiBinary => row.iter().map(|&v| (v > T::zero()) as u8).collect(),
                LabelMode::OneHot => {
                    let best = argmax(row);
                    (0..row.len()).map(|i| (i == best) as u8).collect()
                }
            })
            .collect())
    }
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

impl<T: Real> Module<T> for ConvClassifier<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = self.convs.iter().flat_map(|c| c.params()).collect();
        p.extend(self.embed.params());
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p: Vec<&mut Param<T>> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        p.extend(self.embed.params_mut());
        p.extend(self.out.params_mut());
        p
    }
}

/// What a classifier is trained to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Softmax over identity ids `0..n`.
    Identity(usize),
    /// The manifest's own labels.
    Labels(LabelMode),
}

impl Task {
    fn classes(self, data: &Dataset) -> usize {
        match self {
            Task::Identity(n) => n,
            Task::Labels(_) => data.manifest.vocabulary().len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for ClassifierRecipe {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 32,
            lr: 1e-3,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

/// Trains a fresh classifier with Adam on `data`.
pub fn train_classifier(
    name: &str,
    data: &Dataset,
    config: ClassifierConfig,
    task: Task,
    recipe: &ClassifierRecipe,
) -> Result<ConvClassifier<f32>> {
    if let Task::Labels(mode) = task {
        crate::gan::check_mode(data.manifest.label_mode(), mode)?;
    }
    let classes = task.classes(data);
    let mut clf = ConvClassifier::new(name, config, classes, recipe.seed)?;
    let mut opt = Adam::new(recipe.lr, 0.9, 0.999);
    for epoch in 0..recipe.epochs {
        for batch in epoch_batches(data, recipe.batch_size, recipe.seed, epoch as u64, recipe.flip_prob)? {
            let n = batch.len();
            let (targets, mode) = match task {
                Task::Identity(k) => {
                    let mut t = Tensor::zeros(&[n, k]);
                    for (i, &id) in batch.identities.iter().enumerate() {
                        if id as usize >= k {
                            return Err(invalid("identity", format!("id {id} >= {k}")));
                        }
                        t.data_mut()[i * k + id as usize] = 1.0;
                    }
                    (t, LabelMode::OneHot)
                }
                Task::Labels(mode) => (batch.labels.clone(), mode),
            };
            let mut g = Graph::new();
            let x = g.input(batch.images);
            let (_, logits) = clf.forward(&mut g, x);
            let loss = cls_loss(&mut g, logits, &targets, mode);
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("{name} classification"),
                    step: epoch as u64,
                });
            }
            let grads = g.backward(loss);
            opt.step(clf.params_mut(), &grads);
        }
    }
    Ok(clf)
}

// ---------------------------------------------------------------------------
// Extractor

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    SeededRandomConvnet,
    TrainedClassifierBackbone,
    ExternalWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub weight_source: Option<PathBuf>,
    pub frozen: bool,
    pub network: ClassifierConfig,
    pub recipe: ClassifierRecipe,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::TrainedClassifierBackbone,
            weight_source: None,
            frozen: true,
            network: ClassifierConfig::default(),
            recipe: ClassifierRecipe::default(),
        }
    }
}

/// A unit-or-raw embedding of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("embedding", "non-finite entry"));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(invalid("embedding", "cannot normalise the zero vector"));
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }
}

/// Frozen identity feature extractor. Built empty, then initialised by one of the
/// `init_*` methods according to its kind.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub config: ExtractorConfig,
    net: Option<ConvClassifier<f32>>,
}

impl Extractor {
    pub fn new(config: ExtractorConfig) -> Self {
        Self { config, net: None }
    }

    pub fn seeded_random(network: ClassifierConfig, seed: u64) -> Result<Self> {
        let net = ConvClassifier::new("ext", network.clone(), 1, seed)?;
        Ok(Self {
            config: ExtractorConfig {
                kind: ExtractorKind::SeededRandomConvnet,
                network,
                ..Default::default()
            },
            net: Some(net),
        })
    }

    /// Trains the backbone as an identity classifier over `n_identities` ids.
    pub fn train(config: ExtractorConfig, data: &Dataset, n_identities: usize) -> Result<Self> {
        let net = train_classifier("ext", data, config.network.clone(), Task::Identity(n_identities), &config.recipe)?;
        Ok(Self {
            config: ExtractorConfig {
                kind: ExtractorKind::TrainedClassifierBackbone,
                ..config
            },
            net: Some(net),
        })
    }

    /// Wraps an already-built network.
    pub fn from_network(config: ExtractorConfig, net: ConvClassifier<f32>) -> Self {
        Self { config, net: Some(net) }
    }

    /// Loads `ext.*` weights from a checkpoint file.
    pub fn load_external(config: ExtractorConfig, classes: usize, path: &Path) -> Result<Self> {
        let mut net = ConvClassifier::new("ext", config.network.clone(), classes, 0)?;
        let file = crate::train::CheckpointFile::read(path)?;
        file.restore_params(path, net.params_mut())?;
        Ok(Self {
            config: ExtractorConfig {
                kind: ExtractorKind::ExternalWeights,
                weight_source: Some(path.to_path_buf()),
                ..config
            },
            net: Some(net),
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.net.is_some()
    }

    pub fn network(&self) -> Result<&ConvClassifier<f32>> {
        self.net
            .as_ref()
            .ok_or_else(|| invalid("extractor", "not initialised"))
    }

    pub fn network_mut(&mut self) -> Option<&mut ConvClassifier<f32>> {
        self.net.as_mut()
    }

    /// Embeddings `[n, d]`; the graph never sees trainable extractor weights.
    pub fn embed_batch(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.network()?.embeddings(images)
    }

    pub fn embed(&self, images: &Tensor<f32>) -> Result<Vec<EmbeddingVector>> {
        let e = self.embed_batch(images)?;
        let d = e.dim(1);
        e.data()
            .chunks(d)
            .map(|c| EmbeddingVector::new(c.iter().map(|&v| v as f64).collect()))
            .collect()
    }
}

/// `mean_n ||F(t) - F(t_hat)||^2` with `F` frozen; gradients reach `t_hat` only.
pub fn identity_loss<T: Real>(g: &mut Graph<T>, t: Var, t_hat: Var, net: &ConvClassifier<T>) -> Var {
    g.freeze(net.params());
    let t_fixed = g.detach(t);
    let (e_t, _) = net.forward(g, t_fixed);
    let (e_hat, _) = net.forward(g, t_hat);
    let n = g.shape(t_hat)[0];
    let d = g.sub(e_hat, e_t);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, T::lit(1.0 / n as f64))
}

pub fn identity_loss_value(t: &Tensor<f32>, t_hat: &Tensor<f32>, extractor: &Extractor) -> Result<f64> {
    let net = extractor.network()?;
    check_shape("identity_loss", t.shape(), t_hat.shape())?;
    let mut g = Graph::new();
    let a = g.input(t.clone());
    let b = g.input(t_hat.clone());
    let l = identity_loss(&mut g, a, b, net);
    Ok(g.value(l).item() as f64)
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            expected: vec![a.values.len()],
            got: vec![b.values.len()],
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("embedding", "cosine similarity of a zero vector"));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
