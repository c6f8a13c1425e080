use std::path::PathBuf;

use proptest::prelude::*;
use tdbgan::dae::{compose_texture_tensor, dae_objective_tensor, Dae, DaeConfig};
use tdbgan::data::{LabelMode, Manifest, Record, Split};
use tdbgan::gan::{adversarial_losses, cls_loss_value, GeneratorLoss, LossWeights};
use tdbgan::identity::{identity_loss_value, ClassifierConfig, Extractor};
use tdbgan::train::{lr_at_epoch, Stage, TrainConfig};
use tdbgan_autograd::Tensor;

fn manifest() -> impl Strategy<Value = (Manifest, LabelMode)> {
    (1usize..5, 1usize..12, any::<bool>()).prop_flat_map(|(k, n, one_hot)| {
        let record = (0u32..50, any::<bool>(), prop::collection::vec(0u8..2, k), 0..k);
        prop::collection::vec(record, n).prop_map(move |rows| {
            let mode = if one_hot { LabelMode::OneHot } else { LabelMode::MultiBinary };
            let records = rows
                .into_iter()
                .enumerate()
                .map(|(i, (identity, test, bits, hot))| Record {
                    image_path: PathBuf::from(format!("img/{i:03}.png")),
                    identity,
                    split: if test { Split::Test } else { Split::Train },
                    labels: if one_hot { (0..k).map(|j| (j == hot) as u8).collect() } else { bits },
                })
                .collect();
            let vocab = (0..k).map(|j| format!("attr{j}")).collect();
            (Manifest::new(records, vocab, mode).unwrap(), mode)
        })
    })
}

fn bce(z: f64, y: f64) -> f64 {
    // log(1 + e^z) - y z, written to stay exact for large |z|
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn small_extractor(seed: u64) -> Extractor {
    let net = ClassifierConfig {
        image_size: 16,
        channels: vec![4, 8],
        embed_dim: 32,
    };
    Extractor::seeded_random(net, seed).unwrap()
}

fn unit_tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor<f32>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(0.0f32..1.0, n).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn manifest_csv_round_trip((m, mode) in manifest()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        m.write_csv(&path).unwrap();
        prop_assert_eq!(Manifest::read_csv(&path, mode).unwrap(), m);
    }

    #[test]
    fn cls_losses_match_brute_force(
        (n, k) in (1usize..5, 1usize..6),
        seed in any::<u64>(),
        one_hot in any::<bool>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let hot: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let targets: Vec<f64> = (0..n * k)
            .map(|i| if one_hot { (i % k == hot[i / k]) as u8 as f64 } else { rng.gen_range(0..2) as f64 })
            .collect();
        let mode = if one_hot { LabelMode::OneHot } else { LabelMode::MultiBinary };
        let got = cls_loss_value(
            &Tensor::new(&[n, k], logits.clone()).unwrap(),
            &Tensor::new(&[n, k], targets.clone()).unwrap(),
            mode,
            mode,
        )
        .unwrap();
        let mut want = 0.0;
        for r in 0..n {
            let row = &logits[r * k..(r + 1) * k];
            let t = &targets[r * k..(r + 1) * k];
            want += if one_hot {
                log_sum_exp(row) - row.iter().zip(t).map(|(z, y)| z * y).sum::<f64>()
            } else {
                row.iter().zip(t).map(|(&z, &y)| bce(z, y)).sum::<f64>()
            };
        }
        want /= n as f64;
        prop_assert!(got.is_finite());
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn adversarial_losses_are_finite(
        real in prop::collection::vec(-30.0f64..30.0, 8),
        fake in prop::collection::vec(-30.0f64..30.0, 8),
    ) {
        let r = Tensor::new(&[2, 1, 2, 2], real).unwrap();
        let f = Tensor::new(&[2, 1, 2, 2], fake).unwrap();
        for form in [GeneratorLoss::NonSaturating, GeneratorLoss::Minimax] {
            let (d, g) = adversarial_losses(&r, &f, form);
            prop_assert!(d.is_finite() && g.is_finite());
            prop_assert!(d >= 0.0);
        }
    }

    #[test]
    fn dae_terms_are_nonnegative_and_finite(
        seed in 0u64..1000,
        x in prop::collection::vec(0.0f64..1.0, 2 * 3 * 16 * 16),
        weights in prop::collection::vec(0.0f64..100.0, 4),
    ) {
        let cfg = DaeConfig {
            image_size: 16,
            channels: vec![4, 8],
            z_shading: 3,
            z_albedo: 5,
            z_deformation: 2,
        };
        let dae = Dae::<f64>::new(cfg, seed).unwrap();
        let x = Tensor::new(&[2, 3, 16, 16], x).unwrap();
        let out = dae.run(&x).unwrap();
        let w = LossWeights {
            lambda1: weights[0],
            lambda2: weights[1],
            lambda2p: weights[2],
            lambda3: weights[3],
            ..Default::default()
        };
        let (total, terms) = dae_objective_tensor(&out, &x, &w).unwrap();
        let names: Vec<&str> = terms.iter().map(|t| t.0).collect();
        prop_assert_eq!(names, vec!["L_R", "L_smooth", "L_B", "L_shading", "L_DAE"]);
        for (name, v) in &terms {
            prop_assert!(v.is_finite() && *v >= 0.0, "{} = {}", name, v);
        }
        prop_assert!(total.is_finite() && total >= 0.0);
    }

    #[test]
    fn shading_broadcasts_over_channels(
        s in prop::collection::vec(0.0f64..2.0, 2 * 5 * 4),
        a in prop::collection::vec(0.0f64..1.0, 2 * 3 * 5 * 4),
    ) {
        let shading = Tensor::new(&[2, 1, 5, 4], s.clone()).unwrap();
        let albedo = Tensor::new(&[2, 3, 5, 4], a.clone()).unwrap();
        let t = compose_texture_tensor(&shading, &albedo).unwrap();
        // replicate the shading to three channels and multiply elementwise
        let hw = 5 * 4;
        let replicated: Vec<f64> = (0..a.len()).map(|i| s[(i / (3 * hw)) * hw + i % hw]).collect();
        let want: Vec<f64> = replicated.iter().zip(&a).map(|(x, y)| x * y).collect();
        prop_assert_eq!(t.data(), &want[..]);
    }

    #[test]
    fn identity_loss_is_symmetric_and_zero_on_the_diagonal(
        seed in 0u64..100,
        t in unit_tensor(&[2, 3, 16, 16]),
        u in unit_tensor(&[2, 3, 16, 16]),
    ) {
        let ext = small_extractor(seed);
        prop_assert_eq!(identity_loss_value(&t, &t, &ext).unwrap(), 0.0);
        let ab = identity_loss_value(&t, &u, &ext).unwrap();
        let ba = identity_loss_value(&u, &t, &ext).unwrap();
        prop_assert!(ab >= 0.0 && ba >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-5 * ab.max(1e-12), "{} vs {}", ab, ba);
    }

    #[test]
    fn lr_is_non_increasing_and_piecewise_linear(
        constant in 0usize..20,
        decay in 0usize..20,
        lr in 1e-6f64..1e-2,
    ) {
        prop_assume!(constant + decay > 0);
        let cfg = TrainConfig {
            epochs_constant: constant,
            epochs_decay: decay,
            lr,
            ..TrainConfig::paper(Stage::GanFrozenDae)
        };
        let rates: Vec<f64> = (0..constant + decay).map(|e| lr_at_epoch(&cfg, e).unwrap()).collect();
        for w in rates.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        for (e, r) in rates.iter().enumerate() {
            let want = if e < constant { lr } else { lr * (1.0 - (e - constant) as f64 / decay as f64) };
            prop_assert!((r - want).abs() <= 1e-15, "epoch {}: {} vs {}", e, r, want);
        }
        // equal steps along the decay
        let tail = &rates[constant..];
        for w in tail.windows(3) {
            prop_assert!(((w[0] - w[1]) - (w[1] - w[2])).abs() <= 1e-15);
        }
    }
}
