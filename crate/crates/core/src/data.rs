//! Manifests, the CelebA attribute importer, the synthetic face generator and
//! seeded batch iteration.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdbgan_autograd::Tensor;

use crate::error::{invalid, Error, Result};
use crate::warp::{self, DeformationField, WarpGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    MultiBinary,
    OneHot,
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::MultiBinary => "multi_binary",
            LabelMode::OneHot => "one_hot",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub image_path: PathBuf,
    pub identity: u32,
    pub split: Split,
    pub labels: Vec<u8>,
}

impl Record {
    pub fn label_vector(&self) -> Vec<f32> {
        self.labels.iter().map(|&b| b as f32).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    records: Vec<Record>,
    vocabulary: Vec<String>,
    label_mode: LabelMode,
}

impl Manifest {
    pub fn new(records: Vec<Record>, vocabulary: Vec<String>, label_mode: LabelMode) -> Result<Self> {
        if vocabulary.is_empty() {
            return Err(invalid("manifest", "empty vocabulary"));
        }
        for (i, r) in records.iter().enumerate() {
            if r.labels.len() != vocabulary.len() {
                return Err(invalid(
                    "manifest",
                    format!("record {i} has {} labels, vocabulary has {}", r.labels.len(), vocabulary.len()),
                ));
            }
            if r.labels.iter().any(|&b| b > 1) {
                return Err(invalid("manifest", format!("record {i} has a non-binary label")));
            }
            if label_mode == LabelMode::OneHot && r.labels.iter().map(|&b| b as u32).sum::<u32>() != 1 {
                return Err(invalid("manifest", format!("record {i} is not one-hot")));
            }
        }
        Ok(Self {
            records,
            vocabulary,
            label_mode,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn label_mode(&self) -> LabelMode {
        self.label_mode
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one split, in order.
    pub fn filter_split(&self, split: Split) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
            vocabulary: self.vocabulary.clone(),
            label_mode: self.label_mode,
        }
    }

    /// Writes `path,identity,split,<name>...` with 0/1 label cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["path".to_string(), "identity".into(), "split".into()];
        header.extend(self.vocabulary.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.image_path.to_string_lossy().into_owned(),
                r.identity.to_string(),
                r.split.as_str().to_string(),
            ];
            row.extend(r.labels.iter().map(|b| b.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a manifest written by [`Manifest::write_csv`]. Image paths are kept as
    /// written; resolve them with [`Manifest::resolve`].
    pub fn read_csv(path: &Path, label_mode: LabelMode) -> Result<Self> {
        let name = path.display().to_string();
        let mut rd = csv::Reader::from_path(path)?;
        let header = rd.headers()?.clone();
        let fixed = ["path", "identity", "split"];
        if header.len() <= 3 || header.iter().take(3).ne(fixed) {
            return Err(parse_err(&name, 1, "header must be path,identity,split,<label>..."));
        }
        let vocabulary: Vec<String> = header.iter().skip(3).map(str::to_string).collect();
        let mut records = Vec::new();
        for (i, row) in rd.records().enumerate() {
            let line = i + 2;
            let row = row?;
            if row.len() != header.len() {
                return Err(parse_err(&name, line, format!("expected {} cells, got {}", header.len(), row.len())));
            }
            let identity = row[1]
                .parse()
                .map_err(|_| parse_err(&name, line, format!("bad identity `{}`", &row[1])))?;
            let split = match &row[2] {
                "train" => Split::Train,
                "test" => Split::Test,
                s => return Err(parse_err(&name, line, format!("bad split `{s}`"))),
            };
            let labels = row
                .iter()
                .skip(3)
                .map(|c| match c {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    _ => Err(parse_err(&name, line, format!("label cell `{c}` is not 0/1"))),
                })
                .collect::<Result<Vec<u8>>>()?;
            if label_mode == LabelMode::OneHot && labels.iter().map(|&b| b as u32).sum::<u32>() != 1 {
                return Err(parse_err(&name, line, "one-hot label does not sum to 1"));
            }
            records.push(Record {
                image_path: PathBuf::from(&row[0]),
                identity,
                split,
                labels,
            });
        }
        Manifest::new(records, vocabulary, label_mode)
    }

    pub fn resolve(&self, base: &Path, index: usize) -> PathBuf {
        let p = &self.records[index].image_path;
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    }

    /// Index of each vocabulary name, or an error listing the vocabulary.
    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.vocabulary
            .iter()
            .position(|v| v.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                invalid(
                    "attribute",
                    format!("unknown name `{name}`; vocabulary: {}", self.vocabulary.join(", ")),
                )
            })
    }
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses a CelebA `list_attr_celeba.txt` file, keeping the `selected` attributes
/// in the order given. Identities are unknown in this file and set to 0; every
/// record is placed in the train split.
pub fn load_celeba_attributes(path: &Path, selected: &[&str]) -> Result<Manifest> {
    let name = path.display().to_string();
    let rd = BufReader::new(File::open(path)?);
    let mut lines = rd.lines();
    let mut next = |n: usize| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| parse_err(&name, n, "unexpected end of file"))
    };
    let count: usize = next(1)?
        .trim()
        .parse()
        .map_err(|_| parse_err(&name, 1, "first line must be the image count"))?;
    let header: Vec<String> = next(2)?.split_whitespace().map(str::to_string).collect();
    if header.is_empty() {
        return Err(parse_err(&name, 2, "no attribute names"));
    }
    let columns = selected
        .iter()
        .map(|s| {
            header
                .iter()
                .position(|h| h == s)
                .ok_or_else(|| parse_err(&name, 2, format!("unknown attribute `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let line = i + 3;
        let text = next(line)?;
        let cells: Vec<&str> = text.split_whitespace().collect();
        if cells.len() != header.len() + 1 {
            return Err(parse_err(
                &name,
                line,
                format!("expected filename and {} flags, got {} cells", header.len(), cells.len()),
            ));
        }
        let mut flags = Vec::with_capacity(header.len());
        for c in &cells[1..] {
            flags.push(match *c {
                "1" | "+1" => 1u8,
                "-1" => 0u8,
                other => return Err(parse_err(&name, line, format!("flag `{other}` outside {{-1, +1}}"))),
            });
        }
        records.push(Record {
            image_path: PathBuf::from(cells[0]),
            identity: 0,
            split: Split::Train,
            labels: columns.iter().map(|&c| flags[c]).collect(),
        });
    }
    if let Some(extra) = next(count + 3).ok().filter(|l| !l.trim().is_empty()) {
        return Err(parse_err(
            &name,
            count + 3,
            format!("more rows than the declared count {count}: `{extra}`"),
        ));
    }
    Manifest::new(
        records,
        selected.iter().map(|s| s.to_string()).collect(),
        LabelMode::MultiBinary,
    )
}

// ---------------------------------------------------------------------------
// Images

/// Decodes an 8-bit PNG into `[3, h, w]` with values in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

fn to_rgb8(t: &Tensor<f32>) -> Result<image::RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(invalid("image", format!("expected [3, h, w], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            let v = d[c * h * w + y as usize * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    }))
}

/// Encodes `[3, h, w]` in `[0, 1]` as an 8-bit PNG.
pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    to_rgb8(t)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Bilinear resize of a `[3, h, w]` image.
pub fn resize(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(invalid("image", format!("expected [3, h, w], got {s:?}")));
    }
    let (sh, sw) = (s[1], s[2]);
    let d = t.data();
    let src = image::Rgb32FImage::from_fn(sw as u32, sh as u32, |x, y| {
        let i = y as usize * sw + x as usize;
        image::Rgb([d[i], d[sh * sw + i], d[2 * sh * sw + i]])
    });
    let out = image::imageops::resize(&src, w as u32, h as u32, image::imageops::FilterType::Triangle);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in out.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c];
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Images paired with their manifest records, all in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    /// One `[3, h, w]` image per record.
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn new(manifest: Manifest, images: Vec<Tensor<f32>>) -> Result<Self> {
        if manifest.len() != images.len() {
            return Err(invalid(
                "dataset",
                format!("{} records but {} images", manifest.len(), images.len()),
            ));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().position(|t| t.shape() != first.shape()) {
                return Err(invalid("dataset", format!("image {bad} has a different shape")));
            }
        }
        Ok(Self { manifest, images })
    }

    /// Decodes every record's PNG, resolving relative paths against `base`.
    pub fn load(manifest: Manifest, base: &Path) -> Result<Self> {
        let images = (0..manifest.len())
            .map(|i| load_png(&manifest.resolve(base, i)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn split(&self, split: Split) -> Dataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.manifest.records[i].split == split)
            .collect();
        self.subset(&keep)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            manifest: Manifest {
                records: indices.iter().map(|&i| self.manifest.records[i].clone()).collect(),
                vocabulary: self.manifest.vocabulary.clone(),
                label_mode: self.manifest.label_mode,
            },
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    /// `(channels, height, width)` of the images.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|t| (t.dim(0), t.dim(1), t.dim(2)))
    }

    /// Stacks the selected images and labels without augmentation.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let flips = vec![false; indices.len()];
        self.assemble(indices, &flips)
    }

    fn assemble(&self, indices: &[usize], flips: &[bool]) -> Batch {
        let (c, h, w) = self.image_shape().expect("non-empty dataset");
        let k = self.manifest.vocabulary.len();
        let mut px = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len() * k);
        for (&i, &flip) in indices.iter().zip(flips) {
            let src = self.images[i].data();
            if flip {
                for row in src.chunks(w) {
                    px.extend(row.iter().rev());
                }
            } else {
                px.extend_from_slice(src);
            }
            labels.extend(self.manifest.records[i].label_vector());
        }
        Batch {
            images: Tensor::new(&[indices.len(), c, h, w], px).unwrap(),
            labels: Tensor::new(&[indices.len(), k], labels).unwrap(),
            identities: indices.iter().map(|&i| self.manifest.records[i].identity).collect(),
            indices: indices.to_vec(),
            flipped: flips.to_vec(),
        }
    }
}

/// A minibatch: images `[n, 3, h, w]`, labels `[n, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Tensor<f32>,
    pub identities: Vec<u32>,
    /// Dataset index of each sample.
    pub indices: Vec<usize>,
    pub flipped: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Generator used for the permutation and flips of one epoch.
fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    rng
}

/// Seeded shuffled batches for one epoch; the sequence is a pure function of
/// `(dataset, batch_size, seed, epoch, flip_prob)`.
pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    flips: Vec<bool>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self
            .data
            .assemble(&self.order[self.pos..end], &self.flips[self.pos..end]);
        self.pos = end;
        Some(b)
    }
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

pub fn epoch_batches(
    data: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    flip_prob: f64,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(invalid("batch size", "must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::EmptySpec("cannot iterate an empty dataset".into()));
    }
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(invalid("flip probability", format!("{flip_prob} outside [0, 1]")));
    }
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let flips = (0..order.len()).map(|_| rng.gen::<f64>() < flip_prob).collect();
    Ok(BatchIter {
        data,
        order,
        flips,
        batch_size,
        pos: 0,
    })
}

/// Shuffled order and flip decisions of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPlan {
    pub order: Vec<usize>,
    pub flips: Vec<bool>,
    pub batch_size: usize,
}

impl EpochPlan {
    pub fn new(data: &Dataset, batch_size: usize, seed: u64, epoch: u64, flip_prob: f64) -> Result<Self> {
        let it = epoch_batches(data, batch_size, seed, epoch, flip_prob)?;
        Ok(Self {
            order: it.order,
            flips: it.flips,
            batch_size,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// The `index`-th batch of the epoch, if any.
    pub fn batch(&self, data: &Dataset, index: usize) -> Option<Batch> {
        let start = index * self.batch_size;
        if start >= self.order.len() {
            return None;
        }
        let end = (start + self.batch_size).min(self.order.len());
        Some(data.assemble(&self.order[start..end], &self.flips[start..end]))
    }
}

/// First-epoch batches.
pub fn batch_iterator(data: &Dataset, batch_size: usize, seed: u64, flip_prob: f64) -> Result<BatchIter<'_>> {
    epoch_batches(data, batch_size, seed, 0, flip_prob)
}

// ---------------------------------------------------------------------------
// Synthetic faces

/// Attributes the synthetic generator knows how to render.
pub const SYNTHETIC_ATTRIBUTES: &[&str] = &["glasses", "smile", "pale", "beard", "blond"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub n_identities: usize,
    pub n_images: usize,
    pub attributes: Vec<String>,
    pub deformation_magnitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_identities: 20,
            n_images: 2000,
            attributes: vec!["glasses".into(), "smile".into()],
            deformation_magnitude: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::EmptySpec("n_images is 0".into()));
        }
        if self.image_size < 8 {
            return Err(invalid("synthetic spec", "image_size must be at least 8"));
        }
        if self.n_identities == 0 || self.n_images < self.n_identities {
            return Err(invalid("synthetic spec", "need 1 <= n_identities <= n_images"));
        }
        if !(0.0..=1.0).contains(&self.deformation_magnitude) {
            return Err(invalid("synthetic spec", "deformation_magnitude outside [0, 1]"));
        }
        if self.attributes.is_empty() {
            return Err(invalid("synthetic spec", "no attributes"));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if !SYNTHETIC_ATTRIBUTES.contains(&a.as_str()) {
                return Err(invalid(
                    "synthetic spec",
                    format!("unknown attribute `{a}`; supported: {}", SYNTHETIC_ATTRIBUTES.join(", ")),
                ));
            }
            if self.attributes[..i].contains(a) {
                return Err(invalid("synthetic spec", format!("duplicate attribute `{a}`")));
            }
        }
        Ok(())
    }
}

/// Ground truth for one synthetic image. All fields are per-sample (no batch axis).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[1, h, w]`
    pub shading: Tensor<f32>,
    /// `[3, h, w]`
    pub albedo: Tensor<f32>,
    /// `[3, h, w]`, shading times albedo.
    pub texture: Tensor<f32>,
    /// `[2, h, w]`
    pub grid: Tensor<f32>,
}

impl SyntheticSample {
    pub fn warp_grid(&self) -> WarpGrid<f32> {
        let s = self.grid.shape();
        WarpGrid::new(self.grid.clone().reshape(&[1, s[0], s[1], s[2]]).unwrap())
            .expect("generator builds valid grids")
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub data: Dataset,
    pub truth: Vec<SyntheticSample>,
}

/// Per-identity appearance parameters.
struct Face {
    skin: [f32; 3],
    hair: [f32; 3],
    background: [f32; 3],
    hairline: f32,
    rx: f32,
    ry: f32,
    eye_dx: f32,
    pattern: [(f32, f32, f32, f32); 2],
}

impl Face {
    // 6.28 rather than TAU: changing it would change every generated dataset
    #[allow(clippy::approx_constant)]
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut u = |lo: f32, hi: f32| rng.gen_range(lo..hi);
        Face {
            skin: [u(0.52, 0.68), u(0.38, 0.52), u(0.28, 0.42)],
            hair: [u(0.08, 0.3), u(0.06, 0.22), u(0.04, 0.16)],
            background: [u(0.15, 0.6), u(0.15, 0.6), u(0.15, 0.6)],
            hairline: u(0.14, 0.26),
            rx: u(0.34, 0.42),
            ry: u(0.4, 0.47),
            eye_dx: u(0.13, 0.18),
            pattern: [
                (u(0.03, 0.07), u(1.0, 3.0), u(1.0, 3.0), u(0.0, 6.28)),
                (u(0.03, 0.07), u(1.0, 3.0), u(1.0, 3.0), u(0.0, 6.28)),
            ],
        }
    }
}

#[allow(clippy::approx_constant)]
fn albedo_at(face: &Face, attrs: &[(&str, bool)], u: f32, v: f32) -> [f32; 3] {
    let has = |name: &str| attrs.iter().any(|&(a, on)| on && a == name);
    let (du, dv) = ((u - 0.5) / face.rx, (v - 0.52) / face.ry);
    let r2 = du * du + dv * dv;
    let mut hair = face.hair;
    if has("blond") {
        hair = [0.72, 0.6, 0.3];
    }
    let mut px = if r2 > 1.0 {
        if v < 0.5 && r2 < 1.35 {
            hair
        } else {
            face.background
        }
    } else if v < face.hairline + 0.08 * du * du {
        hair
    } else {
        let mut s = face.skin;
        if has("pale") {
            s = s.map(|c| (c * 1.3).min(0.74));
        }
        let p: f32 = face
            .pattern
            .iter()
            .map(|&(a, fu, fv, ph)| a * (6.28 * (fu * u + fv * v) + ph).sin())
            .sum();
        s.map(|c| c + p)
    };
    if r2 <= 1.0 {
        // eyes
        for ex in [0.5 - face.eye_dx, 0.5 + face.eye_dx] {
            if (u - ex).powi(2) + (v - 0.42).powi(2) < 0.055f32.powi(2) {
                px = [0.12, 0.1, 0.1];
            }
        }
        if has("beard") && v > 0.76 {
            px = face.hair.map(|c| c * 0.8);
        }
        if has("smile") {
            let centre = 0.76 - 2.6 * (u - 0.5).powi(2);
            if (u - 0.5).abs() < 0.16 && (v - centre).abs() < 0.04 {
                px = [0.74, 0.72, 0.7];
            }
        } else if (u - 0.5).abs() < 0.12 && (v - 0.73).abs() < 0.025 {
            px = [0.42, 0.16, 0.16];
        }
        if has("glasses") && (0.37..=0.47).contains(&v) && du.abs() < 0.97 {
            px = [0.05, 0.05, 0.06];
        }
    }
    px.map(|c| c.clamp(0.02, 0.74))
}

/// Smooth noise in `[-1, 1]` built from two random low-frequency sinusoids.
struct SmoothNoise([(f64, f64, f64, f64); 2]);

impl SmoothNoise {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut wave = || {
            (
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.0..1.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.3..0.7),
            )
        };
        Self([wave(), wave()])
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let [(f0, g0, p0, a0), (f1, g1, p1, _)] = self.0;
        let a1 = 1.0 - a0;
        a0 * (std::f64::consts::TAU * (f0 * u + g0 * v) + p0).sin()
            + a1 * (std::f64::consts::TAU * (g1 * u + f1 * v) + p1).sin()
    }
}

fn balanced_bits(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut bits: Vec<u8> = (0..n).map(|i| (i < n / 2) as u8).collect();
    bits.shuffle(rng);
    bits
}

/// Builds a synthetic face dataset with exact ground truth.
///
/// Every image is `warp(shading * albedo, grid)` evaluated in `f32`, identities are
/// assigned round robin, each attribute has exactly `n/2` positives, and every tenth
/// image of each identity goes to the test split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let size = spec.image_size;
    let n = spec.n_images;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let faces: Vec<Face> = (0..spec.n_identities).map(|_| Face::sample(&mut rng)).collect();
    let columns: Vec<Vec<u8>> = spec.attributes.iter().map(|_| balanced_bits(n, &mut rng)).collect();

    let coord = |i: usize| i as f64 / (size - 1) as f64;
    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let identity = i % spec.n_identities;
        let labels: Vec<u8> = columns.iter().map(|c| c[i]).collect();
        let attrs: Vec<(&str, bool)> = spec
            .attributes
            .iter()
            .zip(&labels)
            .map(|(a, &b)| (a.as_str(), b == 1))
            .collect();

        let plane = size * size;
        let mut albedo = vec![0f32; 3 * plane];
        for y in 0..size {
            for x in 0..size {
                let a = albedo_at(&faces[identity], &attrs, coord(x) as f32, coord(y) as f32);
                for c in 0..3 {
                    albedo[c * plane + y * size + x] = a[c];
                }
            }
        }

        let (gx, gy, gq) = (
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.4..0.4),
        );
        let shading: Vec<f32> = (0..plane)
            .map(|p| {
                let (u, v) = (coord(p % size) - 0.5, coord(p / size) - 0.5);
                let s = 1.0 + gx * u + gy * v + gq * (u * u + v * v - 1.0 / 6.0);
                s.clamp(0.6, 1.35) as f32
            })
            .collect();
        let texture: Vec<f32> = (0..3 * plane).map(|k| shading[k % plane] * albedo[k]).collect();

        let (nx, ny) = (SmoothNoise::sample(&mut rng), SmoothNoise::sample(&mut rng));
        let m = spec.deformation_magnitude * 0.8;
        let mut inc = vec![0f64; 2 * plane];
        for p in 0..plane {
            let (u, v) = (coord(p % size), coord(p / size));
            inc[p] = 1.0 + m * nx.at(u, v);
            inc[plane + p] = 1.0 + m * ny.at(u, v);
        }
        let field = DeformationField::new(Tensor::new(&[1, 2, size, size], inc)?)?;
        let grid: Tensor<f32> = warp::integrate_deformation(&field).into_coords().cast();

        let tex = Tensor::new(&[1, 3, size, size], texture)?;
        let image = warp::warp_image(&tex, &grid)?;

        records.push(Record {
            image_path: PathBuf::from(format!("images/{i:05}.png")),
            identity: identity as u32,
            split: if (i / spec.n_identities) % 10 == 9 {
                Split::Test
            } else {
                Split::Train
            },
            labels,
        });
        images.push(image.reshape(&[3, size, size])?);
        truth.push(SyntheticSample {
            shading: Tensor::new(&[1, size, size], shading)?,
            albedo: Tensor::new(&[3, size, size], albedo)?,
            texture: tex.reshape(&[3, size, size])?,
            grid: grid.reshape(&[2, size, size])?,
        });
    }
    let manifest = Manifest::new(records, spec.attributes.clone(), LabelMode::MultiBinary)?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        data: Dataset::new(manifest, images)?,
        truth,
    })
}

const TRUTH_MAGIC: &[u8; 8] = b"TDBGTRU1";

impl SyntheticDataset {
    /// Writes `manifest.csv`, `images/*.png` and `ground_truth.bin` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        for (i, img) in self.data.images.iter().enumerate() {
            save_png(img, &self.data.manifest.resolve(dir, i))?;
        }
        self.data.manifest.write_csv(&dir.join("manifest.csv"))?;
        let mut w = BufWriter::new(File::create(dir.join("ground_truth.bin"))?);
        w.write_all(TRUTH_MAGIC)?;
        let size = self.spec.image_size as u32;
        for v in [self.truth.len() as u32, size, size] {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in &self.truth {
            for x in t.shading.data().iter().chain(t.albedo.data()).chain(t.grid.data()) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads `ground_truth.bin` written by [`SyntheticDataset::write`].
pub fn read_ground_truth(path: &Path) -> Result<Vec<SyntheticSample>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| invalid("ground truth file", format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != TRUTH_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (n, h, w) = (word(0), word(1), word(2));
    let per = 6 * h * w;
    if bytes.len() != 20 + 4 * n * per {
        return Err(bad("truncated"));
    }
    let floats: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    floats
        .chunks(per)
        .map(|c| {
            let shading = Tensor::new(&[1, h, w], c[..h * w].to_vec())?;
            let albedo = Tensor::new(&[3, h, w], c[h * w..4 * h * w].to_vec())?;
            let texture = Tensor::from_fn(&[3, h, w], |k| albedo.data()[k] * shading.data()[k % (h * w)]);
            Ok(SyntheticSample {
                shading,
                albedo,
                texture,
                grid: Tensor::new(&[2, h, w], c[4 * h * w..].to_vec())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            image_size: 16,
            n_identities: 4,
            n_images: 40,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn synthetic_oracle_and_balance() {
        let spec = SyntheticSpec {
            n_images: 100,
            seed: 7,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.data.len(), 100);
        for a in 0..2 {
            let pos = ds.data.manifest.records().iter().filter(|r| r.labels[a] == 1).count();
            let rate = pos as f64 / 100.0;
            assert!((0.4..=0.6).contains(&rate));
        }
        for (img, t) in ds.data.images.iter().zip(&ds.truth) {
            let grid = t.grid.clone().reshape(&[1, 2, 32, 32]).unwrap();
            let tex = t.texture.clone().reshape(&[1, 3, 32, 32]).unwrap();
            let re = warp::warp_image(&tex, &grid).unwrap();
            assert!(re.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            t.warp_grid();
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small(3)).unwrap();
        let b = generate_synthetic(&small(3)).unwrap();
        assert_eq!(a.data.images, b.data.images);
        assert_eq!(a.truth, b.truth);
        let c = generate_synthetic(&small(4)).unwrap();
        assert_ne!(a.data.images, c.data.images);
    }

    #[test]
    fn zero_deformation_is_identity() {
        let spec = SyntheticSpec {
            deformation_magnitude: 0.0,
            ..small(1)
        };
        let ds = generate_synthetic(&spec).unwrap();
        let id = warp::identity_grid::<f32>(1, 16, 16);
        for (img, t) in ds.data.images.iter().zip(&ds.truth) {
            assert_eq!(t.grid.data(), id.data());
            assert!(img.max_abs_diff(&t.texture) < 1e-6);
        }
    }

    #[test]
    fn synthetic_spec_errors() {
        let empty = SyntheticSpec {
            n_images: 0,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&empty), Err(Error::EmptySpec(_))));
        let unknown = SyntheticSpec {
            attributes: vec!["hat".into()],
            ..small(0)
        };
        assert!(generate_synthetic(&unknown).is_err());
    }

    #[test]
    fn batches_cover_epoch_and_repeat() {
        let ds = generate_synthetic(&small(0)).unwrap().data;
        let sizes: Vec<usize> = batch_iterator(&ds, 16, 5, 0.5).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![16, 16, 8]);
        let mut seen: Vec<usize> = batch_iterator(&ds, 16, 5, 0.5).unwrap().flat_map(|b| b.indices).collect();
        seen.sort();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        let a: Vec<Batch> = batch_iterator(&ds, 7, 9, 0.5).unwrap().collect();
        let b: Vec<Batch> = batch_iterator(&ds, 7, 9, 0.5).unwrap().collect();
        assert_eq!(a, b);
        assert!(a.iter().any(|b| b.flipped.iter().any(|&f| f)));
        let e1: Vec<usize> = epoch_batches(&ds, 40, 9, 1, 0.0).unwrap().next().unwrap().indices;
        assert_ne!(e1, a.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn flips_mirror_rows() {
        let ds = generate_synthetic(&small(0)).unwrap().data;
        let b = batch_iterator(&ds, 40, 2, 1.0).unwrap().next().unwrap();
        let i = b.indices[0];
        let src = &ds.images[i];
        let got = b.images.sample(0);
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(
                        got.data()[c * 256 + y * 16 + x],
                        src.data()[c * 256 + y * 16 + 15 - x]
                    );
                }
            }
        }
        let none = batch_iterator(&ds, 40, 2, 0.0).unwrap().next().unwrap();
        for (k, &i) in none.indices.iter().enumerate() {
            assert_eq!(none.images.sample(k).data(), ds.images[i].data());
        }
    }

    #[test]
    fn batch_iterator_errors() {
        let ds = generate_synthetic(&small(0)).unwrap().data;
        assert!(batch_iterator(&ds, 0, 0, 0.5).is_err());
        assert!(batch_iterator(&ds.subset(&[]), 4, 0, 0.5).is_err());
    }

    #[test]
    fn one_hot_guard() {
        let rec = |labels: Vec<u8>| Record {
            image_path: "a.png".into(),
            identity: 0,
            split: Split::Train,
            labels,
        };
        let vocab = vec!["a".to_string(), "b".into()];
        assert!(Manifest::new(vec![rec(vec![1, 0])], vocab.clone(), LabelMode::OneHot).is_ok());
        assert!(Manifest::new(vec![rec(vec![1, 1])], vocab.clone(), LabelMode::OneHot).is_err());
        assert!(Manifest::new(vec![rec(vec![0, 0])], vocab.clone(), LabelMode::OneHot).is_err());
        assert!(Manifest::new(vec![rec(vec![1, 1])], vocab, LabelMode::MultiBinary).is_ok());
        assert!(Manifest::new(vec![], vec![], LabelMode::MultiBinary).is_err());
    }
}
