//! Verification metrics, pair sampling, attribute-classification accuracy and
//! ablation curve comparison.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdbgan_autograd::Tensor;

use crate::data::{Dataset, LabelMode, Manifest, Record};
use crate::error::{invalid, Error, Result};
use crate::gan::check_mode;
use crate::identity::{cosine_similarity, ConvClassifier, EmbeddingVector, Extractor};
use crate::train::{LossLog, Model, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Client,
    Impostor,
}

/// Similarity scores with their ground-truth pair labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<PairLabel>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<PairLabel>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(invalid(
                "score set",
                format!("{} scores but {} labels", scores.len(), labels.len()),
            ));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(invalid("score set", format!("score {i} is not finite")));
        }
        Ok(Self { scores, labels })
    }

    pub fn from_groups(clients: &[f64], impostors: &[f64]) -> Result<Self> {
        let scores = clients.iter().chain(impostors).copied().collect();
        let labels = std::iter::repeat_n(PairLabel::Client, clients.len())
            .chain(std::iter::repeat_n(PairLabel::Impostor, impostors.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[PairLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn counts(&self) -> (usize, usize) {
        let p = self.labels.iter().filter(|&&l| l == PairLabel::Client).count();
        (p, self.labels.len() - p)
    }

    /// `(threshold, client count, impostor count)` per distinct score, descending.
    fn levels(&self) -> Vec<(f64, usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut out: Vec<(f64, usize, usize)> = Vec::new();
        for i in idx {
            let s = self.scores[i];
            let (tp, fp) = match self.labels[i] {
                PairLabel::Client => (1, 0),
                PairLabel::Impostor => (0, 1),
            };
            match out.last_mut() {
                Some(last) if last.0 == s => {
                    last.1 += tp;
                    last.2 += fp;
                }
                _ => out.push((s, tp, fp)),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Accept when `score >= threshold`; `+inf` for the `(0, 0)` endpoint.
    pub threshold: f64,
}

/// ROC points from a sweep over every distinct score, `(0,0)` first and `(1,1)` last.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn from_scores(set: &ScoreSet) -> Result<Self> {
        let (p, n) = set.counts();
        if p == 0 || n == 0 {
            return Err(invalid(
                "score set",
                "needs at least one client and one impostor score",
            ));
        }
        let mut points = vec![RocPoint {
            fpr: 0.0,
            tpr: 0.0,
            threshold: f64::INFINITY,
        }];
        let (mut tp, mut fp) = (0usize, 0usize);
        for (s, dtp, dfp) in set.levels() {
            tp += dtp;
            fp += dfp;
            points.push(RocPoint {
                fpr: fp as f64 / n as f64,
                tpr: tp as f64 / p as f64,
                threshold: s,
            });
        }
        Ok(Self { points })
    }

    /// Trapezoid area.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    /// TPR at `FPR = alpha` by linear interpolation; at `alpha = 0` the best TPR
    /// reachable with no false accepts.
    pub fn tpr_at_fpr(&self, alpha: f64) -> f64 {
        let mut best = 0.0f64;
        for (i, p) in self.points.iter().enumerate() {
            if p.fpr <= alpha {
                best = best.max(p.tpr);
            } else if i > 0 {
                let q = self.points[i - 1];
                if q.fpr < alpha {
                    let t = (alpha - q.fpr) / (p.fpr - q.fpr);
                    best = best.max(q.tpr + t * (p.tpr - q.tpr));
                }
                break;
            }
        }
        best
    }

    /// Point where `FPR = 1 - TPR`, interpolated along the curve.
    pub fn eer_point(&self) -> (f64, f64) {
        let f = |p: &RocPoint| p.fpr + p.tpr - 1.0;
        for w in self.points.windows(2) {
            let (a, b) = (f(&w[0]), f(&w[1]));
            if a == 0.0 {
                return (w[0].fpr, w[0].tpr);
            }
            if a < 0.0 && b >= 0.0 {
                let t = -a / (b - a);
                let fpr = w[0].fpr + t * (w[1].fpr - w[0].fpr);
                let tpr = w[0].tpr + t * (w[1].tpr - w[0].tpr);
                return (fpr, tpr);
            }
        }
        let last = self.points.last().unwrap();
        (last.fpr, last.tpr)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["threshold", "fpr", "tpr"])?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub tpr_at_fpr_1pct: f64,
    pub tpr_at_fpr_01pct: f64,
    pub tpr_at_fpr_0pct: f64,
    pub eer: f64,
    /// `(FPR, TPR)` at which `eer` was read.
    pub eer_point: (f64, f64),
    pub ap: f64,
    pub auc: f64,
    pub roc: RocCurve,
}

impl VerificationReport {
    /// Flat `key=value` lines.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("tpr_at_fpr_1pct", self.tpr_at_fpr_1pct),
            ("tpr_at_fpr_01pct", self.tpr_at_fpr_01pct),
            ("tpr_at_fpr_0pct", self.tpr_at_fpr_0pct),
            ("eer", self.eer),
            ("ap", self.ap),
            ("auc", self.auc),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }
}

pub fn verification_metrics(set: &ScoreSet) -> Result<VerificationReport> {
    let roc = RocCurve::from_scores(set)?;
    let eer_point = roc.eer_point();
    Ok(VerificationReport {
        tpr_at_fpr_1pct: roc.tpr_at_fpr(0.01),
        tpr_at_fpr_01pct: roc.tpr_at_fpr(0.001),
        tpr_at_fpr_0pct: roc.tpr_at_fpr(0.0),
        eer: eer_point.0,
        eer_point,
        ap: average_precision(set)?,
        auc: roc.auc(),
        roc,
    })
}

/// `sum_k (R_k - R_{k-1}) P_k` over the distinct-score thresholds.
pub fn average_precision(set: &ScoreSet) -> Result<f64> {
    let (p, n) = set.counts();
    if p == 0 || n == 0 {
        return Err(invalid(
            "score set",
            "needs at least one client and one impostor score",
        ));
    }
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    for (_, dtp, dfp) in set.levels() {
        tp += dtp;
        fp += dfp;
        let recall = tp as f64 / p as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Confusion counts at a fixed acceptance threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecisionReport {
    pub true_accepts: usize,
    pub false_accepts: usize,
    pub true_rejects: usize,
    pub false_rejects: usize,
}

impl DecisionReport {
    pub fn at_threshold(set: &ScoreSet, threshold: f64) -> Self {
        let mut r = Self {
            true_accepts: 0,
            false_accepts: 0,
            true_rejects: 0,
            false_rejects: 0,
        };
        for (&s, &l) in set.scores.iter().zip(&set.labels) {
            match (s >= threshold, l) {
                (true, PairLabel::Client) => r.true_accepts += 1,
                (true, PairLabel::Impostor) => r.false_accepts += 1,
                (false, PairLabel::Impostor) => r.true_rejects += 1,
                (false, PairLabel::Client) => r.false_rejects += 1,
            }
        }
        r
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.true_accepts + self.false_accepts + self.true_rejects + self.false_rejects;
        (self.true_accepts + self.true_rejects) as f64 / total.max(1) as f64
    }
}

// ---------------------------------------------------------------------------
// Pair sampling

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Gallery,
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageRef {
    pub source: Source,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub a: ImageRef,
    pub b: ImageRef,
    pub label: PairLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairOptions {
    /// When the generated set is non-empty, every pair contains a generated image.
    pub require_generated: bool,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            require_generated: true,
        }
    }
}

/// Seeded sampling without replacement of `n_client` same-identity pairs and
/// `n_impostor` different-identity pairs. Clients come first in the result.
pub fn build_pairs(
    gallery: &Manifest,
    generated: &Manifest,
    n_client: usize,
    n_impostor: usize,
    seed: u64,
) -> Result<Vec<Pair>> {
    build_pairs_with(gallery, generated, n_client, n_impostor, seed, PairOptions::default())
}

pub fn build_pairs_with(
    gallery: &Manifest,
    generated: &Manifest,
    n_client: usize,
    n_impostor: usize,
    seed: u64,
    options: PairOptions,
) -> Result<Vec<Pair>> {
    let mut images: Vec<(ImageRef, u32)> = Vec::new();
    for (source, m) in [(Source::Gallery, gallery), (Source::Generated, generated)] {
        for (index, r) in m.records().iter().enumerate() {
            images.push((ImageRef { source, index }, r.identity));
        }
    }
    let need_generated = options.require_generated && !generated.is_empty();
    let mut clients = Vec::new();
    let mut impostors = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let ((a, ia), (b, ib)) = (images[i], images[j]);
            if need_generated && a.source != Source::Generated && b.source != Source::Generated {
                continue;
            }
            if ia == ib {
                clients.push((a, b));
            } else {
                impostors.push((a, b));
            }
        }
    }
    if clients.len() < n_client || impostors.len() < n_impostor {
        return Err(Error::InsufficientPairs(format!(
            "requested {n_client} client and {n_impostor} impostor pairs, only {} and {} available",
            clients.len(),
            impostors.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut take = |pool: Vec<(ImageRef, ImageRef)>, n: usize, label: PairLabel| -> Vec<Pair> {
        pool.choose_multiple(&mut rng, n)
            .map(|&(a, b)| Pair { a, b, label })
            .collect()
    };
    let mut out = take(clients, n_client, PairLabel::Client);
    out.extend(take(impostors, n_impostor, PairLabel::Impostor));
    Ok(out)
}

/// Writes `path_a,path_b,label` with paths as recorded in the manifests.
pub fn write_pairs_csv(path: &Path, pairs: &[Pair], gallery: &Manifest, generated: &Manifest) -> Result<()> {
    let lookup = |r: ImageRef| {
        let m = match r.source {
            Source::Gallery => gallery,
            Source::Generated => generated,
        };
        m.records()[r.index].image_path.clone()
    };
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["path_a", "path_b", "label"])?;
    for p in pairs {
        let label = match p.label {
            PairLabel::Client => "client",
            PairLabel::Impostor => "impostor",
        };
        w.write_record([&*lookup(p.a).to_string_lossy(), &*lookup(p.b).to_string_lossy(), label])?;
    }
    w.flush()?;
    Ok(())
}

/// Scores every pair with `score(a, b)`.
pub fn score_pairs(pairs: &[Pair], mut score: impl FnMut(ImageRef, ImageRef) -> Result<f64>) -> Result<ScoreSet> {
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        scores.push(score(p.a, p.b)?);
    }
    ScoreSet::new(scores, pairs.iter().map(|p| p.label).collect())
}

// ---------------------------------------------------------------------------
// Classification accuracy

/// A classifier together with the label convention it was trained for.
#[derive(Clone, Debug)]
pub struct AttributeClassifier {
    pub net: ConvClassifier<f32>,
    pub mode: LabelMode,
}

impl AttributeClassifier {
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<Vec<u8>>> {
        self.net.predict(images, self.mode)
    }
}

/// Fraction of images whose predicted label vector equals the target.
pub fn expression_accuracy(
    classifier: &AttributeClassifier,
    images: &Tensor<f32>,
    targets: &[Vec<u8>],
    target_mode: LabelMode,
) -> Result<f64> {
    check_mode(classifier.mode, target_mode)?;
    let pred = predictions(classifier, images, targets)?;
    let hits = pred.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Fraction of images whose predicted value of attribute `k` equals the target's.
pub fn attribute_accuracy(
    classifier: &AttributeClassifier,
    images: &Tensor<f32>,
    targets: &[Vec<u8>],
    k: usize,
) -> Result<f64> {
    check_mode(LabelMode::MultiBinary, classifier.mode)?;
    let pred = predictions(classifier, images, targets)?;
    if targets.iter().any(|t| k >= t.len()) {
        return Err(invalid("attribute", format!("index {k} out of range")));
    }
    let hits = pred.iter().zip(targets).filter(|(p, t)| p[k] == t[k]).count();
    Ok(hits as f64 / targets.len() as f64)
}

fn predictions(classifier: &AttributeClassifier, images: &Tensor<f32>, targets: &[Vec<u8>]) -> Result<Vec<Vec<u8>>> {
    if images.dim(0) != targets.len() {
        return Err(invalid(
            "accuracy",
            format!("{} images but {} targets", images.dim(0), targets.len()),
        ));
    }
    if targets.is_empty() {
        return Err(Error::EmptySpec("no images to classify".into()));
    }
    classifier.predict(images)
}

// ---------------------------------------------------------------------------
// Ablation curves

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Favors {
    A,
    B,
    Tie,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationComparison {
    pub term: String,
    /// `(stage, epoch, mean)` for each arm.
    pub epochs_a: Vec<(Stage, usize, f64)>,
    pub epochs_b: Vec<(Stage, usize, f64)>,
    /// Mean over the last 10% of logged values.
    pub final_a: f64,
    pub final_b: f64,
    /// `final_a - final_b`; negative favours `a` for a loss.
    pub gap: f64,
    pub favors: Favors,
}

impl AblationComparison {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["arm", "stage", "epoch", "mean"])?;
        for (arm, rows) in [("a", &self.epochs_a), ("b", &self.epochs_b)] {
            for &(stage, epoch, mean) in rows {
                w.write_record([arm, stage.as_str(), &epoch.to_string(), &mean.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean of the last `ceil(len / 10)` values of `term`.
pub fn final_window_mean(log: &LossLog, term: &str) -> Result<f64> {
    let s = log.series(term);
    if s.is_empty() {
        return Err(Error::MissingTerm(term.to_string()));
    }
    let k = s.len().div_ceil(10);
    Ok(s[s.len() - k..].iter().map(|&(_, v)| v).sum::<f64>() / k as f64)
}

pub fn compare_ablation_curves(log_a: &LossLog, log_b: &LossLog, term: &str) -> Result<AblationComparison> {
    let final_a = final_window_mean(log_a, term)?;
    let final_b = final_window_mean(log_b, term)?;
    let gap = final_a - final_b;
    Ok(AblationComparison {
        term: term.to_string(),
        epochs_a: log_a.epoch_means(term),
        epochs_b: log_b.epoch_means(term),
        final_a,
        final_b,
        gap,
        favors: if gap < 0.0 {
            Favors::A
        } else if gap > 0.0 {
            Favors::B
        } else {
            Favors::Tie
        },
    })
}

// ---------------------------------------------------------------------------
// Edit protocols

/// One edit scored by a protocol: a test image and the label it is moved to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditTask {
    pub source: usize,
    pub target: Vec<u8>,
    /// The attribute that was flipped (multi-binary protocols only).
    pub changed: Option<usize>,
}

/// Every test image with each attribute inverted in turn.
pub fn single_attribute_flips(test: &Dataset) -> Vec<EditTask> {
    let mut out = Vec::new();
    for (i, r) in test.manifest.records().iter().enumerate() {
        for k in 0..r.labels.len() {
            let mut target = r.labels.clone();
            target[k] ^= 1;
            out.push(EditTask {
                source: i,
                target,
                changed: Some(k),
            });
        }
    }
    out
}

/// Every test image of class `source_class` moved to each other class.
pub fn neutral_transfers(test: &Dataset, source_class: usize) -> Vec<EditTask> {
    let k = test.manifest.vocabulary().len();
    let mut out = Vec::new();
    for (i, r) in test.manifest.records().iter().enumerate() {
        if r.labels.get(source_class) != Some(&1) {
            continue;
        }
        for c in (0..k).filter(|&c| c != source_class) {
            let mut target = vec![0; k];
            target[c] = 1;
            out.push(EditTask {
                source: i,
                target,
                changed: None,
            });
        }
    }
    out
}

/// One random edit per test image: a single flipped attribute, or a different class.
pub fn random_edits(test: &Dataset, seed: u64) -> Vec<EditTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = test.manifest.label_mode();
    test.manifest
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let k = r.labels.len();
            let mut target = r.labels.clone();
            let changed = match mode {
                LabelMode::MultiBinary => {
                    let a = rng.gen_range(0..k);
                    target[a] ^= 1;
                    Some(a)
                }
                LabelMode::OneHot => {
                    let cur = r.labels.iter().position(|&b| b == 1).unwrap_or(0);
                    let c = if k > 1 { (cur + rng.gen_range(1..k)) % k } else { cur };
                    target = vec![0; k];
                    target[c] = 1;
                    None
                }
            };
            EditTask {
                source: i,
                target,
                changed,
            }
        })
        .collect()
}

/// Runs `tasks` through the model in batches; returns `(images, textures)`.
pub fn run_edits(model: &Model, use_dae: bool, test: &Dataset, tasks: &[EditTask]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    const BATCH: usize = 64;
    if tasks.is_empty() {
        return Err(Error::EmptySpec("no edits to run".into()));
    }
    let k = model.config.label_dim;
    let mut images = Vec::new();
    let mut textures = Vec::new();
    for chunk in tasks.chunks(BATCH) {
        let idx: Vec<usize> = chunk.iter().map(|t| t.source).collect();
        let x = test.batch(&idx).images;
        let mut targets = Tensor::zeros(&[chunk.len(), k]);
        for (i, t) in chunk.iter().enumerate() {
            if t.target.len() != k {
                return Err(invalid("edit target", format!("{} labels, model expects {k}", t.target.len())));
            }
            for (j, &b) in t.target.iter().enumerate() {
                targets.data_mut()[i * k + j] = b as f32;
            }
        }
        let (img, tex) = model.transfer(&x, &targets, use_dae)?;
        images.extend_from_slice(img.data());
        textures.extend_from_slice(tex.data());
    }
    let mut shape = test.batch(&[tasks[0].source]).images.shape().to_vec();
    shape[0] = tasks.len();
    Ok((Tensor::new(&shape, images)?, Tensor::new(&shape, textures)?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCell {
    pub target: String,
    pub predicted: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferReport {
    pub accuracy: f64,
    pub edits: usize,
    pub confusion: Vec<ConfusionCell>,
}

impl TransferReport {
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["target", "predicted", "count"])?;
        for c in &self.confusion {
            w.write_record([c.target.as_str(), c.predicted.as_str(), &c.count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores edited images with an independent classifier.
pub fn transfer_accuracy(
    classifier: &AttributeClassifier,
    edited: &Tensor<f32>,
    tasks: &[EditTask],
    vocabulary: &[String],
) -> Result<TransferReport> {
    let targets: Vec<Vec<u8>> = tasks.iter().map(|t| t.target.clone()).collect();
    let pred = predictions(classifier, edited, &targets)?;
    Ok(tally_transfers(&pred, tasks, vocabulary))
}

/// Counts hits and confusion cells for `pred[i]` read off the edit of `tasks[i]`.
///
/// A flip task counts as a hit when the flipped attribute reads as its new value;
/// a class task when the whole predicted vector equals the target.
pub fn tally_transfers(pred: &[Vec<u8>], tasks: &[EditTask], vocabulary: &[String]) -> TransferReport {
    let name = |k: usize| vocabulary.get(k).cloned().unwrap_or_else(|| k.to_string());
    let mut cells: std::collections::BTreeMap<(String, String), usize> = Default::default();
    let mut hits = 0;
    for (p, task) in pred.iter().zip(tasks) {
        let t = &task.target;
        let (hit, key) = match task.changed {
            Some(k) => (
                p[k] == t[k],
                (format!("{}={}", name(k), t[k]), format!("{}={}", name(k), p[k])),
            ),
            None => {
                let cls = |v: &[u8]| v.iter().position(|&b| b == 1).map_or("none".to_string(), name);
                (p == t, (cls(t), cls(p)))
            }
        };
        hits += hit as usize;
        *cells.entry(key).or_default() += 1;
    }
    TransferReport {
        accuracy: if tasks.is_empty() { 0.0 } else { hits as f64 / tasks.len() as f64 },
        edits: tasks.len(),
        confusion: cells
            .into_iter()
            .map(|((target, predicted), count)| ConfusionCell { target, predicted, count })
            .collect(),
    }
}

/// Verification of edited test images against the real test gallery.
#[derive(Clone, Debug)]
pub struct EditedVerification {
    pub report: VerificationReport,
    pub pairs: Vec<Pair>,
    pub generated: Manifest,
    pub scores: ScoreSet,
}

/// Edits each test image once (seeded), then scores `n_client` + `n_impostor`
/// gallery/generated pairs by cosine similarity of `extractor` embeddings.
pub fn edited_verification(
    model: &Model,
    use_dae: bool,
    extractor: &Extractor,
    test: &Dataset,
    n_client: usize,
    n_impostor: usize,
    seed: u64,
) -> Result<EditedVerification> {
    let tasks = random_edits(test, seed);
    let (edited, _) = run_edits(model, use_dae, test, &tasks)?;
    let records = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let src = &test.manifest.records()[t.source];
            Record {
                image_path: format!("generated/{i:05}.png").into(),
                identity: src.identity,
                split: src.split,
                labels: t.target.clone(),
            }
        })
        .collect();
    let generated = Manifest::new(records, test.manifest.vocabulary().to_vec(), test.manifest.label_mode())?;
    let pairs = build_pairs(&test.manifest, &generated, n_client, n_impostor, seed)?;
    let all: Vec<usize> = (0..test.len()).collect();
    let gallery_emb = embed_all(extractor, &test.batch(&all).images)?;
    let generated_emb = embed_all(extractor, &edited)?;
    let scores = score_pairs(&pairs, |a, b| {
        let pick = |r: ImageRef| match r.source {
            Source::Gallery => &gallery_emb[r.index],
            Source::Generated => &generated_emb[r.index],
        };
        cosine_similarity(pick(a), pick(b))
    })?;
    Ok(EditedVerification {
        report: verification_metrics(&scores)?,
        pairs,
        generated,
        scores,
    })
}

fn embed_all(extractor: &Extractor, images: &Tensor<f32>) -> Result<Vec<EmbeddingVector>> {
    const BATCH: usize = 128;
    let n = images.dim(0);
    let per = images.len() / n.max(1);
    let mut shape = images.shape().to_vec();
    let mut out = Vec::with_capacity(n);
    for s in (0..n).step_by(BATCH) {
        let m = BATCH.min(n - s);
        shape[0] = m;
        let chunk = Tensor::new(&shape, images.data()[s * per..(s + m) * per].to_vec())?;
        out.extend(extractor.embed(&chunk)?);
    }
    Ok(out)
}
