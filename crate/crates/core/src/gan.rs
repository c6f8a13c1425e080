//! Label-conditioned texture generator, PatchGAN discriminator with source and
//! domain heads, the adversarial/classification/reconstruction losses and the
//! attribute-transfer inference path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdbgan_autograd::nn::{Conv2d, ConvTranspose2d, InstanceNorm2d};
use tdbgan_autograd::{Graph, Module, Param, Real, Tensor, Var};

use crate::dae::Dae;
use crate::data::LabelMode;
use crate::error::{check_shape, invalid, Error, Result};
use crate::warp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub lambda_ip: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda2p: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_rec: 10.0,
            lambda_ip: 0.001,
            lambda1: 1e-6,
            lambda2: 0.01,
            lambda2p: 0.01,
            lambda3: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cls,
            self.lambda_rec,
            self.lambda_ip,
            self.lambda1,
            self.lambda2,
            self.lambda2p,
            self.lambda3,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("loss weights", "all weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// A conditioning vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainLabel {
    values: Vec<f32>,
    mode: LabelMode,
}

impl DomainLabel {
    pub fn new(values: Vec<f32>, mode: LabelMode) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("domain label", format!("{values:?} not in [0, 1]^k")));
        }
        if mode == LabelMode::OneHot && (values.iter().sum::<f32>() - 1.0).abs() > 1e-6 {
            return Err(invalid("domain label", "one-hot label must sum to 1"));
        }
        Ok(Self { values, mode })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Repeats the label `n` times as a `[n, k]` tensor.
    pub fn batch<T: Real>(&self, n: usize) -> Tensor<T> {
        let k = self.values.len();
        Tensor::from_fn(&[n, k], |i| T::lit(self.values[i % k] as f64))
    }
}

pub fn check_mode(expected: LabelMode, got: LabelMode) -> Result<()> {
    if expected != got {
        return Err(Error::LabelMode {
            expected: expected.to_string(),
            got: got.to_string(),
        });
    }
    Ok(())
}

/// A graph value that is an image in observation space. Only these reach the
/// discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageVar(Var);

/// A graph value that is a texture in the canonical frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextureVar(Var);

impl ImageVar {
    /// Wraps observed data.
    pub fn observed(v: Var) -> Self {
        Self(v)
    }

    /// Without a DAE the "texture" already lives in image space and the warp is
    /// the identity.
    pub fn unwarped(t: TextureVar) -> Self {
        Self(t.0)
    }

    pub fn var(self) -> Var {
        self.0
    }
}

impl TextureVar {
    pub fn from_dae(v: Var) -> Self {
        Self(v)
    }

    /// Uses a raw image directly as the generator input (no disentangling).
    pub fn from_raw_image(x: ImageVar) -> Self {
        Self(x.0)
    }

    pub fn var(self) -> Var {
        self.0
    }
}

/// Re-warps a texture into image space.
pub fn warp_texture<T: Real>(g: &mut Graph<T>, t: TextureVar, grid: Var) -> ImageVar {
    ImageVar(warp::warp(g, t.0, grid))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub res_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            res_blocks: 3,
        }
    }
}

impl GeneratorConfig {
    /// Full-size StarGAN layout: 64 base channels, 6 residual blocks.
    pub fn full() -> Self {
        Self {
            base_channels: 64,
            res_blocks: 6,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvIn<T> {
    conv: Conv2d<T>,
    norm: InstanceNorm2d<T>,
}

impl<T: Real> ConvIn<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(name: &str, c_in: usize, c_out: usize, k: usize, s: usize, p: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), c_in, c_out, k, s, p, rng),
            norm: InstanceNorm2d::new(&format!("{name}.norm"), c_out),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, relu: bool) -> Var {
        let h = self.conv.forward(g, x);
        let h = self.norm.forward(g, h);
        if relu {
            g.relu(h)
        } else {
            h
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv.params();
        p.extend(self.norm.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
}

#[derive(Clone, Debug)]
struct UpIn<T> {
    conv: ConvTranspose2d<T>,
    norm: InstanceNorm2d<T>,
}

/// StarGAN-style generator: 7x7 stem, two stride-2 downsamples, residual blocks,
/// two transposed-conv upsamples, 7x7 head with a `2 sigmoid` output.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub label_dim: usize,
    stem: ConvIn<T>,
    down: Vec<ConvIn<T>>,
    res: Vec<(ConvIn<T>, ConvIn<T>)>,
    up: Vec<UpIn<T>>,
    head: Conv2d<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: &GeneratorConfig, label_dim: usize, seed: u64) -> Result<Self> {
        if cfg.base_channels == 0 || label_dim == 0 {
            return Err(invalid("generator config", "base_channels and label_dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = cfg.base_channels;
        let stem = ConvIn::new("gen.stem", 3 + label_dim, b, 7, 1, 3, &mut rng);
        let down = vec![
            ConvIn::new("gen.down0", b, 2 * b, 4, 2, 1, &mut rng),
            ConvIn::new("gen.down1", 2 * b, 4 * b, 4, 2, 1, &mut rng),
        ];
        let res = (0..cfg.res_blocks)
            .map(|i| {
                (
                    ConvIn::new(&format!("gen.res{i}.a"), 4 * b, 4 * b, 3, 1, 1, &mut rng),
                    ConvIn::new(&format!("gen.res{i}.b"), 4 * b, 4 * b, 3, 1, 1, &mut rng),
                )
            })
            .collect();
        let up = [(4 * b, 2 * b), (2 * b, b)]
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| UpIn {
                conv: ConvTranspose2d::new(&format!("gen.up{i}.conv"), ci, co, 4, 2, 1, &mut rng),
                norm: InstanceNorm2d::new(&format!("gen.up{i}.norm"), co),
            })
            .collect();
        let head = Conv2d::new("gen.head", b, 3, 7, 1, 3, &mut rng);
        Ok(Self {
            label_dim,
            stem,
            down,
            res,
            up,
            head,
        })
    }

    /// `G(t, c)`: `labels` is `[n, k]` and is tiled into constant channels.
    pub fn forward(&self, g: &mut Graph<T>, texture: TextureVar, labels: &Tensor<T>) -> TextureVar {
        let s = g.shape(texture.0).to_vec();
        let (n, h, w) = (s[0], s[2], s[3]);
        assert_eq!(labels.shape(), &[n, self.label_dim], "generator: label shape");
        let maps = Tensor::from_fn(&[n, self.label_dim, h, w], |i| labels.data()[i / (h * w)]);
        let maps = g.input(maps);
        let x = g.concat(&[texture.0, maps]);
        let mut h = self.stem.forward(g, x, true);
        for d in &self.down {
            h = d.forward(g, h, true);
        }
        for (a, b) in &self.res {
            let r = a.forward(g, h, true);
            let r = b.forward(g, r, false);
            h = g.add(h, r);
        }
        for u in &self.up {
            let v = u.conv.forward(g, h);
            let v = u.norm.forward(g, v);
            h = g.relu(v);
        }
        let out = self.head.forward(g, h);
        let out = g.sigmoid(out);
        TextureVar(g.scale(out, T::lit(2.0)))
    }

    /// Runs the generator on tensors; `labels` is `[n, k]`.
    pub fn generate(&self, texture: &Tensor<T>, labels: &Tensor<T>) -> Result<Tensor<T>> {
        let s = texture.shape();
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
            return Err(invalid("texture", format!("expected [n, 3, 4h, 4w], got {s:?}")));
        }
        check_shape("generator labels", &[s[0], self.label_dim], labels.shape())?;
        let mut g = Graph::new();
        let t = g.input(texture.clone());
        let out = self.forward(&mut g, TextureVar(t), labels);
        Ok(g.value(out.0).clone())
    }
}

impl<T: Real> Module<T> for Generator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.stem.params();
        p.extend(self.down.iter().flat_map(|d| d.params()));
        for (a, b) in &self.res {
            p.extend(a.params());
            p.extend(b.params());
        }
        for u in &self.up {
            p.extend(u.conv.params());
            p.extend(u.norm.params());
        }
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.stem.params_mut();
        p.extend(self.down.iter_mut().flat_map(|d| d.params_mut()));
        for (a, b) in &mut self.res {
            p.extend(a.params_mut());
            p.extend(b.params_mut());
        }
        for u in &mut self.up {
            p.extend(u.conv.params_mut());
            p.extend(u.norm.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Side of the source patch map.
    pub patch_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            patch_size: 2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn full() -> Self {
        Self {
            base_channels: 64,
            patch_size: 2,
        }
    }
}

/// Graph handles of the two discriminator heads.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    /// `[n, 1, p, p]`
    pub src: Var,
    /// `[n, k]`
    pub cls: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput<T> {
    pub src_logits: Tensor<T>,
    pub cls_logits: Tensor<T>,
}

/// PatchGAN: 4x4 stride-2 convs with leaky ReLU (0.01) down to a `p x p` map, a
/// 3x3 source head and a classification head spanning the whole map.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub image_size: usize,
    pub label_dim: usize,
    convs: Vec<Conv2d<T>>,
    src: Conv2d<T>,
    cls: Conv2d<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: &DiscriminatorConfig, image_size: usize, label_dim: usize, seed: u64) -> Result<Self> {
        let p = cfg.patch_size;
        if p == 0 || !image_size.is_multiple_of(p) || !(image_size / p).is_power_of_two() || image_size / p < 2 {
            return Err(invalid(
                "discriminator config",
                format!("image_size {image_size} must be patch_size {p} times a power of two >= 2"),
            ));
        }
        if cfg.base_channels == 0 || label_dim == 0 {
            return Err(invalid("discriminator config", "channels and label_dim must be positive"));
        }
        let layers = (image_size / p).trailing_zeros() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let mut convs = Vec::new();
        for i in 0..layers {
            let c = cfg.base_channels << i;
            convs.push(Conv2d::new(&format!("dis.conv{i}"), c_in, c, 4, 2, 1, &mut rng));
            c_in = c;
        }
        Ok(Self {
            image_size,
            label_dim,
            convs,
            src: Conv2d::new("dis.src", c_in, 1, 3, 1, 1, &mut rng),
            cls: Conv2d::new("dis.cls", c_in, label_dim, p, 1, 0, &mut rng),
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, images: ImageVar) -> DiscriminatorVars {
        let mut h = images.0;
        for conv in &self.convs {
            h = conv.forward(g, h);
            h = g.leaky_relu(h, T::lit(0.01));
        }
        let src = self.src.forward(g, h);
        let cls = self.cls.forward(g, h);
        let n = g.shape(cls)[0];
        let cls = g.reshape(cls, &[n, self.label_dim]);
        DiscriminatorVars { src, cls }
    }

    pub fn discriminate(&self, images: &Tensor<T>) -> Result<DiscriminatorOutput<T>> {
        let n = images.shape().first().copied().unwrap_or(0);
        check_shape(
            "discriminator input",
            &[n, 3, self.image_size, self.image_size],
            images.shape(),
        )?;
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let v = self.forward(&mut g, ImageVar(x));
        Ok(DiscriminatorOutput {
            src_logits: g.value(v.src).clone(),
            cls_logits: g.value(v.cls).clone(),
        })
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = self.convs.iter().flat_map(|c| c.params()).collect();
        p.extend(self.src.params());
        p.extend(self.cls.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p: Vec<&mut Param<T>> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        p.extend(self.src.params_mut());
        p.extend(self.cls.params_mut());
        p
    }
}

// ---------------------------------------------------------------------------
// Losses

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `mean[-log sigmoid(fake)]`
    #[default]
    NonSaturating,
    /// `mean[log(1 - sigmoid(fake))]`, the minimax form.
    Minimax,
}

/// Discriminator term as binary cross-entropy: real targets 1, fake targets 0.
/// Minimising it maximises the adversarial payoff.
pub fn d_adversarial<T: Real>(g: &mut Graph<T>, real_src: Var, fake_src: Var) -> Var {
    let ones = Tensor::ones(g.shape(real_src));
    let zeros = Tensor::zeros(g.shape(fake_src));
    let r = g.bce_with_logits(real_src, ones);
    let f = g.bce_with_logits(fake_src, zeros);
    g.add(r, f)
}

pub fn g_adversarial<T: Real>(g: &mut Graph<T>, fake_src: Var, form: GeneratorLoss) -> Var {
    match form {
        GeneratorLoss::NonSaturating => {
            let ones = Tensor::ones(g.shape(fake_src));
            g.bce_with_logits(fake_src, ones)
        }
        GeneratorLoss::Minimax => {
            let zeros = Tensor::zeros(g.shape(fake_src));
            let l = g.bce_with_logits(fake_src, zeros);
            g.scale(l, -T::one())
        }
    }
}

/// `(d_term, g_term)` on patch logits.
pub fn adversarial_losses<T: Real>(real_src: &Tensor<T>, fake_src: &Tensor<T>, form: GeneratorLoss) -> (f64, f64) {
    let mut g = Graph::new();
    let r = g.input(real_src.clone());
    let f = g.input(fake_src.clone());
    let d = d_adversarial(&mut g, r, f);
    let gt = g_adversarial(&mut g, f, form);
    (g.value(d).item().as_f64(), g.value(gt).item().as_f64())
}

/// Domain classification loss: softmax cross-entropy (one-hot) or per-attribute
/// binary cross-entropy summed over attributes; both averaged over the batch.
pub fn cls_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>, mode: LabelMode) -> Var {
    match mode {
        LabelMode::OneHot => g.softmax_cross_entropy(logits, targets.clone()),
        LabelMode::MultiBinary => {
            let k = targets.shape()[1];
            let l = g.bce_with_logits(logits, targets.clone());
            g.scale(l, T::lit(k as f64))
        }
    }
}

/// Checked scalar form: `labels` must carry the model's label mode.
pub fn cls_loss_value<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    labels_mode: LabelMode,
    model_mode: LabelMode,
) -> Result<f64> {
    check_mode(model_mode, labels_mode)?;
    check_shape("cls_loss", logits.shape(), targets.shape())?;
    let mut g = Graph::new();
    let x = g.input(logits.clone());
    let l = cls_loss(&mut g, x, targets, model_mode);
    Ok(g.value(l).item().as_f64())
}

/// `(L_rec^t, L_rec^i, L_rec)` as mean absolute errors.
pub fn reconstruction_losses<T: Real>(
    g: &mut Graph<T>,
    t: Var,
    t_cyc: Var,
    x: Var,
    x_rec: Var,
) -> (Var, Var, Var) {
    let lt = g.l1_mean(t_cyc, t);
    let li = g.l1_mean(x_rec, x);
    let l = g.add(lt, li);
    (lt, li, l)
}

pub fn reconstruction_losses_value<T: Real>(
    t: &Tensor<T>,
    t_cyc: &Tensor<T>,
    x: &Tensor<T>,
    x_rec: &Tensor<T>,
) -> Result<(f64, f64, f64)> {
    check_shape("texture cycle", t.shape(), t_cyc.shape())?;
    check_shape("image reconstruction", x.shape(), x_rec.shape())?;
    let mut g = Graph::new();
    let vs = [t, t_cyc, x, x_rec].map(|v| g.input(v.clone()));
    let (a, b, c) = reconstruction_losses(&mut g, vs[0], vs[1], vs[2], vs[3]);
    let v = |x: Var| g.value(x).item().as_f64();
    Ok((v(a), v(b), v(c)))
}

/// `L_D = d_term + lambda_cls * L_cls^r`, where `d_term` is the negated payoff in
/// BCE form.
pub fn objective_d<T: Real>(g: &mut Graph<T>, d_term: Var, cls_real: Var, lambda_cls: f64) -> Var {
    let c = g.scale(cls_real, T::lit(lambda_cls));
    g.add(d_term, c)
}

pub fn objective_d_value(d_term: f64, cls_real: f64, lambda_cls: f64) -> f64 {
    d_term + lambda_cls * cls_real
}

/// `L_G = g_term + lambda_cls L_cls^f + lambda_rec L_rec + lambda_ip L_ip`.
pub fn objective_g<T: Real>(
    g: &mut Graph<T>,
    g_term: Var,
    cls_fake: Var,
    rec: Var,
    ip: Option<Var>,
    w: &LossWeights,
) -> Var {
    let c = g.scale(cls_fake, T::lit(w.lambda_cls));
    let r = g.scale(rec, T::lit(w.lambda_rec));
    let l = g.add(g_term, c);
    let l = g.add(l, r);
    match ip {
        Some(ip) if w.lambda_ip > 0.0 => {
            let i = g.scale(ip, T::lit(w.lambda_ip));
            g.add(l, i)
        }
        _ => l,
    }
}

pub fn objective_g_value(g_term: f64, cls_fake: f64, rec: f64, ip: f64, w: &LossWeights) -> f64 {
    g_term + w.lambda_cls * cls_fake + w.lambda_rec * rec + w.lambda_ip * ip
}

/// Edits `images` towards `targets` (`[n, k]`): DAE texture and grid, generator on
/// the texture, re-warp with the original grid. Without a DAE the generator works
/// on the raw image. Returns `(edited image, edited texture)`.
pub fn transfer_attributes<T: Real>(
    dae: Option<&Dae<T>>,
    generator: &Generator<T>,
    images: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = images.shape().first().copied().unwrap_or(0);
    check_shape("transfer targets", &[n, generator.label_dim], targets.shape())?;
    let mut g = Graph::new();
    let x = g.input(images.clone());
    match dae {
        Some(dae) => {
            let s = images.shape();
            check_shape("transfer input", &[n, 3, dae.config.image_size, dae.config.image_size], s)?;
            let out = dae.forward(&mut g, x);
            let t_hat = generator.forward(&mut g, TextureVar(out.texture), targets);
            let img = warp_texture(&mut g, t_hat, out.grid);
            Ok((g.value(img.0).clone(), g.value(t_hat.0).clone()))
        }
        None => {
            let t_hat = generator.forward(&mut g, TextureVar::from_raw_image(ImageVar(x)), targets);
            let v = g.value(t_hat.0).clone();
            Ok((v.clone(), v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tdbgan_autograd::Gradients;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn adversarial_examples() {
        let z = Tensor::<f64>::zeros(&[3, 1, 2, 2]);
        let (d, gt) = adversarial_losses(&z, &z, GeneratorLoss::NonSaturating);
        assert!((d - 2.0 * LN2).abs() < 1e-12);
        assert!((gt - LN2).abs() < 1e-12);
        let (_, lit) = adversarial_losses(&z, &z, GeneratorLoss::Minimax);
        assert!((lit + LN2).abs() < 1e-12);
        let (d, _) = adversarial_losses(
            &Tensor::full(&[1, 1, 2, 2], 60.0),
            &Tensor::full(&[1, 1, 2, 2], -60.0),
            GeneratorLoss::NonSaturating,
        );
        assert!(d < 1e-20);
    }

    #[test]
    fn cls_examples() {
        let logits = Tensor::<f64>::zeros(&[4, 8]);
        let t = Tensor::from_fn(&[4, 8], |i| if i % 8 == (i / 8) * 2 { 1.0 } else { 0.0 });
        let ce = cls_loss_value(&logits, &t, LabelMode::OneHot, LabelMode::OneHot).unwrap();
        assert!((ce - 8f64.ln()).abs() < 1e-12);

        let logits = Tensor::<f64>::zeros(&[3, 5]);
        let t = Tensor::from_fn(&[3, 5], |i| (i % 2) as f64);
        let bce = cls_loss_value(&logits, &t, LabelMode::MultiBinary, LabelMode::MultiBinary).unwrap();
        assert!((bce - 5.0 * LN2).abs() < 1e-12);

        let sat = Tensor::from_fn(&[3, 5], |i| if i % 2 == 1 { 50.0 } else { -50.0 });
        let l = cls_loss_value(&sat, &t, LabelMode::MultiBinary, LabelMode::MultiBinary).unwrap();
        assert!(l < 1e-18);

        assert!(matches!(
            cls_loss_value(&logits, &t, LabelMode::OneHot, LabelMode::MultiBinary),
            Err(Error::LabelMode { .. })
        ));
    }

    #[test]
    fn reconstruction_examples() {
        let t = Tensor::<f64>::full(&[1, 3, 4, 4], 0.3);
        let (a, b, c) = reconstruction_losses_value(&t, &t, &t, &t).unwrap();
        assert_eq!((a, b, c), (0.0, 0.0, 0.0));
        let shifted = t.map(|v| v + 0.2);
        let (a, b, c) = reconstruction_losses_value(&t, &shifted, &t, &shifted).unwrap();
        assert!((a - 0.2).abs() < 1e-12 && (b - 0.2).abs() < 1e-12);
        assert!((c - 0.4).abs() < 1e-12);
        assert!(reconstruction_losses_value(&t, &Tensor::zeros(&[1, 3, 4, 5]), &t, &t).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn objective_examples() {
        // all logits 0, one-hot k = 8: d_term 2 ln 2, classification ln 8
        let ld = objective_d_value(2.0 * LN2, 8f64.ln(), 1.0);
        assert!((ld - 3.4657).abs() < 1e-4);

        let w = LossWeights::default();
        assert_eq!(objective_g_value(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        let lg = objective_g_value(0.6931, 2.0794, 0.4, 0.0, &w);
        assert!((lg - 6.7725).abs() < 1e-9);
    }

    #[test]
    fn shape_contracts() {
        let gen = Generator::<f32>::new(&GeneratorConfig { base_channels: 4, res_blocks: 1 }, 5, 0).unwrap();
        assert_eq!(gen.stem.conv.weight.value.shape()[1], 8);
        let t = Tensor::full(&[2, 3, 64, 64], 0.5);
        let out = gen.generate(&t, &Tensor::zeros(&[2, 5])).unwrap();
        assert_eq!(out.shape(), &[2, 3, 64, 64]);
        assert!(out.data().iter().all(|&v| v >= 0.0));
        assert!(gen.generate(&t, &Tensor::zeros(&[2, 4])).is_err());

        let dis = Discriminator::<f32>::new(&DiscriminatorConfig { base_channels: 4, patch_size: 2 }, 64, 5, 0)
            .unwrap();
        assert_eq!(dis.convs.len(), 5);
        let o = dis.discriminate(&t).unwrap();
        assert_eq!(o.src_logits.shape(), &[2, 1, 2, 2]);
        assert_eq!(o.cls_logits.shape(), &[2, 5]);
        assert_eq!(dis.discriminate(&t).unwrap(), o);
        assert!(dis.discriminate(&Tensor::zeros(&[2, 3, 32, 32])).is_err());
    }

    fn nonzero(grads: &Gradients<f64>, params: Vec<&Param<f64>>) -> bool {
        params
            .iter()
            .any(|p| grads.param(p).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)))
    }

    fn untouched(grads: &Gradients<f64>, params: Vec<&Param<f64>>) -> bool {
        params.iter().all(|p| grads.param(p).is_none())
    }

    #[test]
    fn gradient_routing() {
        let gen = Generator::<f64>::new(&GeneratorConfig { base_channels: 4, res_blocks: 1 }, 2, 3).unwrap();
        let dis = Discriminator::<f64>::new(&DiscriminatorConfig { base_channels: 4, patch_size: 2 }, 16, 2, 4)
            .unwrap();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 7) % 13) as f64 / 13.0);
        let c = Tensor::from_fn(&[2, 2], |i| (i % 2) as f64);
        let grid = crate::warp::identity_grid::<f64>(2, 16, 16);
        let w = LossWeights::default();

        // generator objective: G receives gradient, D is frozen
        let mut g = Graph::new();
        g.freeze(dis.params());
        let xv = g.input(x.clone());
        let gv = g.input(grid.clone());
        let t = TextureVar::from_dae(xv);
        let fake_t = gen.forward(&mut g, t, &c);
        let fake = warp_texture(&mut g, fake_t, gv);
        let df = dis.forward(&mut g, fake);
        let adv = g_adversarial(&mut g, df.src, GeneratorLoss::NonSaturating);
        let cls = cls_loss(&mut g, df.cls, &c, LabelMode::MultiBinary);
        let cyc = gen.forward(&mut g, fake_t, &c);
        let (_, _, rec) = reconstruction_losses(&mut g, xv, cyc.var(), xv, xv);
        let l = objective_g(&mut g, adv, cls, rec, None, &w);
        let grads = g.backward(l);
        assert!(nonzero(&grads, gen.params()));
        assert!(untouched(&grads, dis.params()));

        // discriminator objective: D receives gradient, G is frozen and the fake detached
        let mut g = Graph::new();
        g.freeze(gen.params());
        let xv = g.input(x);
        let gv = g.input(grid);
        let fake_t = gen.forward(&mut g, TextureVar::from_dae(xv), &c);
        let fake = warp_texture(&mut g, fake_t, gv);
        let fake = ImageVar::observed(g.detach(fake.var()));
        let dr = dis.forward(&mut g, ImageVar::observed(xv));
        let df = dis.forward(&mut g, fake);
        let adv = d_adversarial(&mut g, dr.src, df.src);
        let cls = cls_loss(&mut g, dr.cls, &c, LabelMode::MultiBinary);
        let l = objective_d(&mut g, adv, cls, w.lambda_cls);
        let grads = g.backward(l);
        assert!(nonzero(&grads, dis.params()));
        assert!(untouched(&grads, gen.params()));
    }

    #[test]
    fn domain_label_guards() {
        assert!(DomainLabel::new(vec![0.0, 1.0, 0.0], LabelMode::OneHot).is_ok());
        assert!(DomainLabel::new(vec![1.0, 1.0], LabelMode::OneHot).is_err());
        assert!(DomainLabel::new(vec![1.0, 1.0], LabelMode::MultiBinary).is_ok());
        assert!(DomainLabel::new(vec![1.5], LabelMode::MultiBinary).is_err());
    }
}
