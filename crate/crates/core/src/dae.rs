//! Intrinsic deforming autoencoder: one strided conv encoder, three transposed-conv
//! decoders (shading, albedo, deformation increments), texture composition and the
//! reconstruction objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdbgan_autograd::nn::{Conv2d, ConvTranspose2d, Linear};
use tdbgan_autograd::{Graph, Module, Param, Real, Tensor, Var};

use crate::error::{check_shape, invalid, Result};
use crate::gan::LossWeights;
use crate::warp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaeConfig {
    pub image_size: usize,
    /// Output channels of the stride-2 encoder blocks; decoders mirror them.
    pub channels: Vec<usize>,
    pub z_shading: usize,
    pub z_albedo: usize,
    pub z_deformation: usize,
}

impl Default for DaeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: vec![32, 64, 128, 128],
            z_shading: 32,
            z_albedo: 64,
            z_deformation: 32,
        }
    }
}

impl DaeConfig {
    pub fn validate(&self) -> Result<()> {
        let depth = self.channels.len();
        if depth == 0 || self.channels.contains(&0) {
            return Err(invalid("dae config", "channels must be non-empty and positive"));
        }
        if self.image_size >> depth == 0 || (self.image_size >> depth) << depth != self.image_size {
            return Err(invalid(
                "dae config",
                format!("image_size {} not divisible by 2^{depth}", self.image_size),
            ));
        }
        if self.z_shading == 0 || self.z_albedo == 0 || self.z_deformation == 0 {
            return Err(invalid("dae config", "latent sizes must be positive"));
        }
        Ok(())
    }

    fn bottleneck(&self) -> usize {
        self.image_size >> self.channels.len()
    }

    pub fn z_total(&self) -> usize {
        self.z_shading + self.z_albedo + self.z_deformation
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    convs: Vec<Conv2d<T>>,
    head: Linear<T>,
}

impl<T: Real> Encoder<T> {
    fn new(cfg: &DaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut c_in = 3;
        let convs = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&format!("dae.enc.conv{i}"), c_in, c, 4, 2, 1, rng);
                c_in = c;
                conv
            })
            .collect();
        let flat = c_in * cfg.bottleneck().pow(2);
        Self {
            convs,
            head: Linear::new("dae.enc.head", flat, cfg.z_total(), rng),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, h);
            h = g.leaky_relu(h, T::lit(0.2));
        }
        let n = g.shape(h)[0];
        let flat = g.value(h).len() / n;
        let h = g.reshape(h, &[n, flat]);
        self.head.forward(g, h)
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = self.convs.iter().flat_map(|c| c.params()).collect();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p: Vec<&mut Param<T>> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        p.extend(self.head.params_mut());
        p
    }
}

/// `linear -> reshape -> (convT 4x4 stride 2, leaky ReLU)* -> convT` producing
/// pre-activations at full resolution.
#[derive(Clone, Debug)]
pub struct Decoder<T> {
    fc: Linear<T>,
    convs: Vec<ConvTranspose2d<T>>,
    start: [usize; 3],
}

impl<T: Real> Decoder<T> {
    fn new(name: &str, cfg: &DaeConfig, z: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let s0 = cfg.bottleneck();
        let rev: Vec<usize> = cfg.channels.iter().rev().copied().collect();
        let fc = Linear::new(&format!("{name}.fc"), z, rev[0] * s0 * s0, rng);
        let mut convs = Vec::new();
        for i in 0..rev.len() {
            let c_out = rev.get(i + 1).copied().unwrap_or(out);
            convs.push(ConvTranspose2d::new(&format!("{name}.deconv{i}"), rev[i], c_out, 4, 2, 1, rng));
        }
        Self {
            fc,
            convs,
            start: [rev[0], s0, s0],
        }
    }

    fn forward(&self, g: &mut Graph<T>, z: Var) -> Var {
        let n = g.shape(z)[0];
        let h = self.fc.forward(g, z);
        let h = g.leaky_relu(h, T::lit(0.2));
        let [c, s, _] = self.start;
        let mut h = g.reshape(h, &[n, c, s, s]);
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, h);
            if i < last {
                h = g.leaky_relu(h, T::lit(0.2));
            }
        }
        h
    }

    fn scale_output_layer(&mut self, s: f64) {
        let last = self.convs.last_mut().unwrap();
        for p in last.params_mut() {
            p.value = p.value.map(|v| v * T::lit(s));
        }
    }
}

impl<T: Real> Module<T> for Decoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.fc.params();
        p.extend(self.convs.iter().flat_map(|c| c.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.fc.params_mut();
        p.extend(self.convs.iter_mut().flat_map(|c| c.params_mut()));
        p
    }
}

/// Graph handles of the three latent partitions.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub z_s: Var,
    pub z_a: Var,
    pub z_d: Var,
}

/// Graph handles for one DAE forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DaeVars {
    pub shading: Var,
    pub albedo: Var,
    pub increments: Var,
    pub texture: Var,
    pub grid: Var,
    pub reconstruction: Var,
}

/// Latent code for a batch; each part is `[n, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub z_s: Tensor<T>,
    pub z_a: Tensor<T>,
    pub z_d: Tensor<T>,
}

/// Materialised DAE outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DaeOutput<T> {
    /// `[n, 3, h, w]`
    pub texture: Tensor<T>,
    /// `[n, 2, h, w]`
    pub grid: Tensor<T>,
    /// `[n, 1, h, w]`, in `(0, 2)`
    pub shading: Tensor<T>,
    /// `[n, 3, h, w]`, in `(0, 1)`
    pub albedo: Tensor<T>,
    /// `[n, 3, h, w]`
    pub reconstruction: Tensor<T>,
}

impl<T: Real> DaeOutput<T> {
    fn read(g: &Graph<T>, v: &DaeVars) -> Self {
        Self {
            texture: g.value(v.texture).clone(),
            grid: g.value(v.grid).clone(),
            shading: g.value(v.shading).clone(),
            albedo: g.value(v.albedo).clone(),
            reconstruction: g.value(v.reconstruction).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dae<T> {
    pub config: DaeConfig,
    pub encoder: Encoder<T>,
    pub shading: Decoder<T>,
    pub albedo: Decoder<T>,
    pub deformation: Decoder<T>,
}

impl<T: Real> Dae<T> {
    pub fn new(config: DaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut rng);
        let shading = Decoder::new("dae.shading", &config, config.z_shading, 1, &mut rng);
        let albedo = Decoder::new("dae.albedo", &config, config.z_albedo, 3, &mut rng);
        let mut deformation = Decoder::new("dae.deformation", &config, config.z_deformation, 2, &mut rng);
        // start close to the identity warp
        deformation.scale_output_layer(0.1);
        Ok(Self {
            config,
            encoder,
            shading,
            albedo,
            deformation,
        })
    }

    pub fn encode(&self, g: &mut Graph<T>, images: Var) -> LatentVars {
        let z = self.encoder.forward(g, images);
        let c = &self.config;
        LatentVars {
            z_s: g.narrow(z, 0, c.z_shading),
            z_a: g.narrow(z, c.z_shading, c.z_albedo),
            z_d: g.narrow(z, c.z_shading + c.z_albedo, c.z_deformation),
        }
    }

    /// Decoder pre-activations `(shading, albedo, deformation)`.
    pub fn decode_raw(&self, g: &mut Graph<T>, code: &LatentVars) -> (Var, Var, Var) {
        (
            self.shading.forward(g, code.z_s),
            self.albedo.forward(g, code.z_a),
            self.deformation.forward(g, code.z_d),
        )
    }

    pub fn forward(&self, g: &mut Graph<T>, images: Var) -> DaeVars {
        let code = self.encode(g, images);
        let (rs, ra, rd) = self.decode_raw(g, &code);
        let (s, a, inc) = activate(g, rs, ra, rd);
        assemble(g, s, a, inc)
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        let n = s.first().copied().unwrap_or(0);
        let size = self.config.image_size;
        check_shape("dae input", &[n, 3, size, size], s)
    }

    pub fn encode_tensor(&self, images: &Tensor<T>) -> Result<LatentCode<T>> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let z = self.encode(&mut g, x);
        Ok(LatentCode {
            z_s: g.value(z.z_s).clone(),
            z_a: g.value(z.z_a).clone(),
            z_d: g.value(z.z_d).clone(),
        })
    }

    /// Decodes a code into `(shading, albedo, increments)`.
    pub fn decode_components(&self, code: &LatentCode<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let n = code.z_s.shape().first().copied().unwrap_or(0);
        let c = &self.config;
        check_shape("z_s", &[n, c.z_shading], code.z_s.shape())?;
        check_shape("z_a", &[n, c.z_albedo], code.z_a.shape())?;
        check_shape("z_d", &[n, c.z_deformation], code.z_d.shape())?;
        let mut g = Graph::new();
        let z = LatentVars {
            z_s: g.input(code.z_s.clone()),
            z_a: g.input(code.z_a.clone()),
            z_d: g.input(code.z_d.clone()),
        };
        let (rs, ra, rd) = self.decode_raw(&mut g, &z);
        let (s, a, inc) = activate(&mut g, rs, ra, rd);
        Ok((g.value(s).clone(), g.value(a).clone(), g.value(inc).clone()))
    }

    pub fn run(&self, images: &Tensor<T>) -> Result<DaeOutput<T>> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let v = self.forward(&mut g, x);
        Ok(DaeOutput::read(&g, &v))
    }
}

impl<T: Real> Module<T> for Dae<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.shading.params());
        p.extend(self.albedo.params());
        p.extend(self.deformation.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.shading.params_mut());
        p.extend(self.albedo.params_mut());
        p.extend(self.deformation.params_mut());
        p
    }
}

/// Output activations: shading `2 sigmoid`, albedo `sigmoid`, increments `sigmoid`.
pub fn activate<T: Real>(g: &mut Graph<T>, raw_s: Var, raw_a: Var, raw_d: Var) -> (Var, Var, Var) {
    let s = g.sigmoid(raw_s);
    let s = g.scale(s, T::lit(2.0));
    let a = g.sigmoid(raw_a);
    let d = g.sigmoid(raw_d);
    (s, a, d)
}

/// Texture, grid and reconstruction from the decoded components.
pub fn assemble<T: Real>(g: &mut Graph<T>, shading: Var, albedo: Var, increments: Var) -> DaeVars {
    let texture = compose_texture(g, shading, albedo);
    let grid = warp::integrate(g, increments);
    let reconstruction = warp::warp(g, texture, grid);
    DaeVars {
        shading,
        albedo,
        increments,
        texture,
        grid,
        reconstruction,
    }
}

/// `T = S * A`, the single shading channel broadcast over the albedo channels.
pub fn compose_texture<T: Real>(g: &mut Graph<T>, shading: Var, albedo: Var) -> Var {
    g.mul_channel(shading, albedo)
}

pub fn compose_texture_tensor<T: Real>(shading: &Tensor<T>, albedo: &Tensor<T>) -> Result<Tensor<T>> {
    let (ss, sa) = (shading.shape(), albedo.shape());
    if sa.len() != 4 {
        return Err(invalid("albedo", format!("expected [n, c, h, w], got {sa:?}")));
    }
    check_shape("compose_texture", &[sa[0], 1, sa[2], sa[3]], ss)?;
    let mut g = Graph::new();
    let s = g.input(shading.clone());
    let a = g.input(albedo.clone());
    let t = compose_texture(&mut g, s, a);
    Ok(g.value(t).clone())
}

/// Named loss terms plus their sum.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

impl LossTerms {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> Vec<(&'static str, f64)> {
        self.terms.iter().map(|&(n, v)| (n, g.value(v).item().as_f64())).collect()
    }
}

/// `L_R + L_smooth + L_B + L_shading`.
pub fn dae_objective<T: Real>(g: &mut Graph<T>, out: &DaeVars, images: Var, w: &LossWeights) -> LossTerms {
    let l_r = g.mse(out.reconstruction, images);
    let l_smooth = warp::smoothness(g, out.grid, T::lit(w.lambda1));
    let l_b = warp::bias_reduce(g, out.grid, T::lit(w.lambda2), T::lit(w.lambda2p));
    let l_sh = shading_loss(g, out.shading, T::lit(w.lambda3));
    let t = g.add(l_r, l_smooth);
    let t = g.add(t, l_b);
    let total = g.add(t, l_sh);
    LossTerms {
        total,
        terms: vec![
            ("L_R", l_r),
            ("L_smooth", l_smooth),
            ("L_B", l_b),
            ("L_shading", l_sh),
            ("L_DAE", total),
        ],
    }
}

/// `lambda3 * sum of squared forward differences` of the shading field.
pub fn shading_loss<T: Real>(g: &mut Graph<T>, shading: Var, lambda3: T) -> Var {
    let dx = g.diff(shading, 3);
    let dy = g.diff(shading, 2);
    let sx = g.square(dx);
    let sy = g.square(dy);
    let sx = g.sum(sx);
    let sy = g.sum(sy);
    let s = g.add(sx, sy);
    g.scale(s, lambda3)
}

/// Evaluates the objective on materialised tensors; returns `(total, terms)`.
pub fn dae_objective_tensor<T: Real>(
    out: &DaeOutput<T>,
    images: &Tensor<T>,
    w: &LossWeights,
) -> Result<(f64, Vec<(&'static str, f64)>)> {
    check_shape("dae_objective", out.reconstruction.shape(), images.shape())?;
    let mut g = Graph::new();
    let v = DaeVars {
        shading: g.input(out.shading.clone()),
        albedo: g.input(out.albedo.clone()),
        increments: g.input(Tensor::zeros(&[1])),
        texture: g.input(out.texture.clone()),
        grid: g.input(out.grid.clone()),
        reconstruction: g.input(out.reconstruction.clone()),
    };
    let x = g.input(images.clone());
    let l = dae_objective(&mut g, &v, x, w);
    Ok((g.value(l.total).item().as_f64(), l.values(&g)))
}
