//! Finite-difference checks of every loss term on small random instances.
//! Shared by the integration tests and the acceptance runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdbgan::dae::{activate, assemble, dae_objective, shading_loss};
use tdbgan::data::LabelMode;
use tdbgan::gan::{
    cls_loss, d_adversarial, g_adversarial, objective_d, objective_g, reconstruction_losses, GeneratorLoss,
    LossWeights,
};
use tdbgan::identity::{identity_loss, ClassifierConfig, ConvClassifier};
use tdbgan::warp::{bias_reduce, integrate, smoothness, warp};
use tdbgan_autograd::gradcheck::{max_rel_err, Options, ScalarFn};
use tdbgan_autograd::{Graph, Real, Tensor, Var};

pub struct GradResult {
    pub name: String,
    pub err_f64: f64,
    pub err_f32: f64,
}

impl GradResult {
    pub fn ok(&self) -> bool {
        self.err_f64 <= 1e-6 && self.err_f32 <= 1e-3
    }
}

const N: usize = 2;
const S: usize = 8;

fn contract<T: Real>(g: &mut Graph<T>, y: Var) -> Var {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| T::lit(((i * 7919 % 97) as f64 / 97.0) - 0.4));
    let w = g.input(w);
    let p = g.mul(y, w);
    g.sum(p)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn check<F: ScalarFn>(name: &str, f: &F, inputs: &[Tensor<f64>]) -> GradResult {
    GradResult {
        name: name.to_string(),
        err_f64: max_rel_err::<f64, F>(f, inputs, Options::default()),
        err_f32: max_rel_err::<f32, F>(
            f,
            inputs,
            Options {
                step: 1e-4,
                ..Options::default()
            },
        ),
    }
}

fn unit_weights() -> LossWeights {
    LossWeights {
        lambda_cls: 1.0,
        lambda_rec: 10.0,
        lambda_ip: 0.5,
        lambda1: 1.0,
        lambda2: 1.0,
        lambda2p: 1.0,
        lambda3: 1.0,
    }
}

/// DAE objective from pre-activation decoder outputs `(raw_s, raw_a, raw_d)`.
struct Dae {
    term: usize,
}

impl ScalarFn for Dae {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let (s, a, d) = activate(g, x[0], x[1], x[2]);
        let out = assemble(g, s, a, d);
        // the total uses the real weights so no single term swamps the others
        let w = if self.term == 4 { LossWeights::default() } else { unit_weights() };
        let l = dae_objective(g, &out, x[3], &w);
        l.terms[self.term].1
    }
}

struct Warp;

impl ScalarFn for Warp {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let y = warp(g, x[0], x[1]);
        contract(g, y)
    }
}

struct Integrate;

impl ScalarFn for Integrate {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let y = integrate(g, x[0]);
        contract(g, y)
    }
}

struct Smooth;

impl ScalarFn for Smooth {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let grid = integrate(g, x[0]);
        smoothness(g, grid, T::one())
    }
}

struct Bias;

impl ScalarFn for Bias {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        bias_reduce(g, x[0], T::lit(0.7), T::lit(1.3))
    }
}

struct Shading;

impl ScalarFn for Shading {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        shading_loss(g, x[0], T::one())
    }
}

struct Adv {
    which: usize,
}

impl ScalarFn for Adv {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        match self.which {
            0 => d_adversarial(g, x[0], x[1]),
            1 => g_adversarial(g, x[1], GeneratorLoss::NonSaturating),
            _ => g_adversarial(g, x[1], GeneratorLoss::Minimax),
        }
    }
}

struct Cls {
    mode: LabelMode,
    targets: Tensor<f64>,
}

impl ScalarFn for Cls {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        cls_loss(g, x[0], &self.targets.cast(), self.mode)
    }
}

struct Rec {
    which: usize,
}

impl ScalarFn for Rec {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let (a, b, c) = reconstruction_losses(g, x[0], x[1], x[2], x[3]);
        [a, b, c][self.which]
    }
}

struct Ip {
    t: Tensor<f64>,
}

impl ScalarFn for Ip {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let cfg = ClassifierConfig {
            image_size: S,
            channels: vec![4, 8],
            embed_dim: 16,
        };
        let net = ConvClassifier::<T>::new("ip", cfg, 3, 5).unwrap();
        let t = g.input(self.t.cast());
        identity_loss(g, t, x[0], &net)
    }
}

struct ObjD;

impl ScalarFn for ObjD {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let adv = d_adversarial(g, x[0], x[1]);
        let cls = cls_loss(g, x[2], &Tensor::from_fn(&[N, 2], |i| T::lit((i % 2) as f64)), LabelMode::MultiBinary);
        objective_d(g, adv, cls, 1.0)
    }
}

struct ObjG;

impl ScalarFn for ObjG {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let adv = g_adversarial(g, x[0], GeneratorLoss::NonSaturating);
        let cls = cls_loss(g, x[1], &Tensor::from_fn(&[N, 2], |i| T::lit((i % 3 == 0) as u8 as f64)), LabelMode::MultiBinary);
        let (_, _, rec) = reconstruction_losses(g, x[2], x[3], x[4], x[5]);
        let ip = g.sum(x[6]);
        objective_g(g, adv, cls, rec, Some(ip), &unit_weights())
    }
}

/// Runs every check with inputs drawn from `seed`.
pub fn run(seed: u64) -> Vec<GradResult> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let raw_s = uniform(&[N, 1, S, S], -1.5, 1.5, &mut r);
    let raw_a = uniform(&[N, 3, S, S], -1.5, 1.5, &mut r);
    let raw_d = uniform(&[N, 2, S, S], -1.5, 1.5, &mut r);
    let img = uniform(&[N, 3, S, S], 0.0, 1.0, &mut r);
    for (i, name) in ["L_R", "L_smooth", "L_B", "L_shading", "L_DAE"].iter().enumerate() {
        let inputs = [raw_s.clone(), raw_a.clone(), raw_d.clone(), img.clone()];
        out.push(check(&format!("dae {name}"), &Dae { term: i }, &inputs));
    }

    let inc = uniform(&[N, 2, S, S], 0.2, 1.5, &mut r);
    let grid = {
        let mut gr = Graph::<f64>::new();
        let v = gr.input(inc.clone());
        let y = integrate(&mut gr, v);
        gr.value(y).clone()
    };
    let jitter = uniform(&[N, 2, S, S], -0.03, 0.03, &mut r);
    let grid_j = grid.zip_map(&jitter, |a, b| a + b);
    out.push(check("warp (image, grid)", &Warp, &[img.clone(), grid_j.clone()]));
    out.push(check("integrate", &Integrate, std::slice::from_ref(&inc)));
    out.push(check("L_smooth", &Smooth, std::slice::from_ref(&inc)));
    out.push(check("L_B", &Bias, &[grid_j]));
    out.push(check("L_shading", &Shading, &[uniform(&[N, 1, S, S], 0.2, 1.8, &mut r)]));

    let real = uniform(&[N, 1, 2, 2], -3.0, 3.0, &mut r);
    let fake = uniform(&[N, 1, 2, 2], -3.0, 3.0, &mut r);
    for (i, name) in ["D_adv", "G_adv non-saturating", "G_adv minimax"].iter().enumerate() {
        out.push(check(name, &Adv { which: i }, &[real.clone(), fake.clone()]));
    }

    let logits = uniform(&[N, 4], -3.0, 3.0, &mut r);
    let multi = Tensor::new(&[N, 4], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let onehot = Tensor::new(&[N, 4], vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    out.push(check(
        "L_cls multi-binary",
        &Cls {
            mode: LabelMode::MultiBinary,
            targets: multi,
        },
        std::slice::from_ref(&logits),
    ));
    out.push(check(
        "L_cls one-hot",
        &Cls {
            mode: LabelMode::OneHot,
            targets: onehot,
        },
        &[logits],
    ));

    let rec_inputs: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&[N, 3, S, S], 0.0, 1.0, &mut r)).collect();
    for (i, name) in ["L_rec^t", "L_rec^i", "L_rec"].iter().enumerate() {
        out.push(check(name, &Rec { which: i }, &rec_inputs));
    }

    let t = uniform(&[N, 3, S, S], 0.0, 1.0, &mut r);
    out.push(check("L_ip", &Ip { t }, &[uniform(&[N, 3, S, S], 0.0, 1.0, &mut r)]));

    out.push(check(
        "L_D",
        &ObjD,
        &[
            uniform(&[N, 1, 2, 2], -3.0, 3.0, &mut r),
            uniform(&[N, 1, 2, 2], -3.0, 3.0, &mut r),
            uniform(&[N, 2], -3.0, 3.0, &mut r),
        ],
    ));
    let mut g_inputs = vec![uniform(&[N, 1, 2, 2], -3.0, 3.0, &mut r), uniform(&[N, 2], -3.0, 3.0, &mut r)];
    g_inputs.extend((0..4).map(|_| uniform(&[N, 3, S, S], 0.0, 1.0, &mut r)));
    g_inputs.push(uniform(&[3], 0.0, 1.0, &mut r));
    out.push(check("L_G", &ObjG, &g_inputs));
    out
}
