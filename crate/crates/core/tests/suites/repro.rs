//! Reproducibility checks on a tiny model. Shared by the integration tests and the
//! acceptance runner.

use tdbgan::data::{generate_synthetic, Dataset, LabelMode, Split, SyntheticSpec};
use tdbgan::train::{Model, ModelConfig, Stage, TrainConfig, Trainer};
use tdbgan_autograd::Tensor;

pub fn tiny_data(seed: u64, magnitude: f64) -> Dataset {
    let spec = SyntheticSpec {
        image_size: 16,
        n_identities: 4,
        n_images: 40,
        deformation_magnitude: magnitude,
        seed,
        ..Default::default()
    };
    generate_synthetic(&spec).unwrap().data.split(Split::Train)
}

pub fn tiny_model(seed: u64) -> Model {
    let mut mc = ModelConfig::new(16, 2, LabelMode::MultiBinary, seed);
    mc.dae.channels = vec![8, 8];
    mc.dae.z_shading = 4;
    mc.dae.z_albedo = 8;
    mc.dae.z_deformation = 4;
    mc.generator.base_channels = 4;
    mc.generator.res_blocks = 1;
    mc.discriminator.base_channels = 4;
    Model::new(mc).unwrap()
}

pub fn stage(stage: Stage, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs_constant: epochs,
        epochs_decay: 0,
        batch_size: 8,
        n_critic: 2,
        use_identity_loss: false,
        ..TrainConfig::paper(stage)
    }
}

/// DAE, GAN and joint stages of two epochs each.
pub fn tiny_plan() -> Vec<TrainConfig> {
    vec![stage(Stage::DaeOnly, 2), stage(Stage::GanFrozenDae, 2), stage(Stage::Joint, 2)]
}

fn forward_outputs(model: &Model, data: &Dataset) -> Vec<Tensor<f32>> {
    let b = data.batch(&[0, 1, 2, 3]);
    let targets = Tensor::from_fn(&[4, 2], |i| ((i / 2 + i) % 2) as f32);
    let dae = model.dae.run(&b.images).unwrap();
    let (img, tex) = model.transfer(&b.images, &targets, true).unwrap();
    let d = model.discriminator.discriminate(&b.images).unwrap();
    vec![dae.reconstruction, dae.texture, dae.grid, img, tex, d.src_logits, d.cls_logits]
}

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

/// Trains a few steps, saves, reloads and compares every forward output bitwise.
pub fn checkpoint_round_trip(dir: &std::path::Path) -> Outcome {
    let data = tiny_data(3, 0.5);
    let mut t = Trainer::new(tiny_model(3), tiny_plan()).unwrap();
    for _ in 0..7 {
        t.step(&data).unwrap();
    }
    let path = dir.join("round_trip.ckpt");
    t.save(&path).unwrap();
    let back = Trainer::load(&path).unwrap();
    let a = forward_outputs(&t.model, &data);
    let b = forward_outputs(&back.model, &data);
    let same_outputs = a.iter().zip(&b).all(|(x, y)| bitwise(x.data(), y.data()));
    let same_params = t
        .model
        .named_params()
        .iter()
        .zip(back.model.named_params())
        .all(|(p, q)| p.name() == q.name() && bitwise(p.value.data(), q.value.data()));
    Outcome {
        passed: same_outputs && same_params && back.progress == t.progress,
        detail: format!("outputs {same_outputs}, params {same_params}"),
    }
}

fn bitwise(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Runs `steps` calls straight through, and again with a save/load after `split`
/// calls; returns the largest difference between the logged terms.
pub fn resume_gap(dir: &std::path::Path, split: usize, steps: usize) -> f64 {
    let data = tiny_data(5, 0.5);
    let run = |resume: bool| {
        let mut t = Trainer::new(tiny_model(5), tiny_plan()).unwrap();
        let mut terms = Vec::new();
        for i in 0..split + steps {
            if resume && i == split {
                let path = dir.join("resume.ckpt");
                t.save(&path).unwrap();
                t = Trainer::load(&path).unwrap();
            }
            let s = t.step(&data).unwrap().expect("plan long enough");
            if i >= split {
                terms.push(s);
            }
        }
        terms
    };
    let a = run(false);
    let b = run(true);
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(&b) {
        if x.len() != y.len() {
            return f64::INFINITY;
        }
        for ((n1, v1), (n2, v2)) in x.iter().zip(y) {
            if n1 != n2 {
                return f64::INFINITY;
            }
            worst = worst.max((v1 - v2).abs());
        }
    }
    worst
}
