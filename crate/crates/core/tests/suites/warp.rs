//! Warp properties checked against independent oracles. Shared by the integration
//! tests and the acceptance runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdbgan::warp::{fit_affine, identity_grid, integrate_deformation, warp_image, AffineTransform, DeformationField};
use tdbgan_autograd::Tensor;

/// First violated invariant of a `[n, 2, h, w]` grid, if any.
pub fn grid_violation(coords: &Tensor<f64>) -> Option<String> {
    let s = coords.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let at = |b: usize, c: usize, i: usize, j: usize| coords.data()[((b * 2 + c) * h + i) * w + j];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for c in 0..2 {
                    let v = at(b, c, i, j);
                    if !(-1.0..=1.0).contains(&v) {
                        return Some(format!("sample {b} ({i},{j}) channel {c}: {v} outside [-1,1]"));
                    }
                }
                if j + 1 < w && at(b, 0, i, j + 1) <= at(b, 0, i, j) {
                    return Some(format!("sample {b}: x not increasing at ({i},{j})"));
                }
                if i + 1 < h && at(b, 1, i + 1, j) <= at(b, 1, i, j) {
                    return Some(format!("sample {b}: y not increasing at ({i},{j})"));
                }
            }
            if at(b, 0, i, 0) != -1.0 || at(b, 0, i, w - 1) != 1.0 {
                return Some(format!("sample {b}: row {i} ends are not exactly -1/+1"));
            }
        }
        for j in 0..w {
            if at(b, 1, 0, j) != -1.0 || at(b, 1, h - 1, j) != 1.0 {
                return Some(format!("sample {b}: column {j} ends are not exactly -1/+1"));
            }
        }
    }
    None
}

/// Random raw field mixing negative, tiny, ordinary and very large increments.
pub fn random_field(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let h = rng.gen_range(2..=12);
    let w = rng.gen_range(2..=12);
    let style = rng.gen_range(0..4);
    Tensor::from_fn(&[1, 2, h, w], |_| match style {
        0 => rng.gen_range(-3.0..3.0),
        1 => rng.gen_range(-1.0..1.0f64).exp() * 2.0,
        2 => 10f64.powf(rng.gen_range(-6.0..3.0)),
        _ => {
            if rng.gen_bool(0.3) {
                -rng.gen_range(0.0..5.0)
            } else {
                rng.gen_range(0.0..1e4)
            }
        }
    })
}

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn monotone_grids(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..cases {
        let raw = random_field(&mut rng);
        let grid = integrate_deformation(&DeformationField::new(raw).unwrap());
        if let Some(v) = grid_violation(grid.coords()) {
            return Check {
                name: "monotone grids",
                passed: false,
                detail: format!("field {k}: {v}"),
            };
        }
    }
    Check {
        name: "monotone grids",
        passed: true,
        detail: format!("{cases} random fields"),
    }
}

pub fn identity_warp(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let h = rng.gen_range(2..=16);
        let w = rng.gen_range(2..=16);
        let c = rng.gen_range(1..=3);
        let level: f64 = rng.gen_range(0.1..5.0);
        let img = Tensor::from_fn(&[1, c, h, w], |_| rng.gen_range(0.0..1.0f64));
        let uniform = Tensor::full(&[1, 2, h, w], level);
        let grid = integrate_deformation(&DeformationField::new(uniform).unwrap());
        let out = warp_image(&img, grid.coords()).unwrap();
        worst = worst.max(out.max_abs_diff(&img));
        // the f32 path as used in training
        let img32: Tensor<f32> = img.cast();
        let grid32 = integrate_deformation(&DeformationField::new(Tensor::<f32>::full(&[1, 2, h, w], level as f32)).unwrap());
        let out32 = warp_image(&img32, grid32.coords()).unwrap();
        worst = worst.max(out32.cast::<f64>().max_abs_diff(&img));
    }
    Check {
        name: "identity warp",
        passed: worst < 1e-6,
        detail: format!("max abs diff {worst:.2e} over {cases} images"),
    }
}

fn row_coords(increments: &[f64]) -> Vec<f64> {
    let w = increments.len();
    let raw = Tensor::from_fn(&[1, 2, 2, w], |i| if i < 2 * w { increments[i % w] } else { 1.0 });
    let grid = integrate_deformation(&DeformationField::new(raw).unwrap());
    grid.coords().data()[..w].to_vec()
}

pub fn integrate_examples() -> Check {
    let cases: [(&[f64], [f64; 4]); 3] = [
        (&[1.0, 1.0, 1.0, 1.0], [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]),
        (&[1.0, 1.0, 2.0, 4.0], [-1.0, -5.0 / 7.0, -1.0 / 7.0, 1.0]),
        (&[-1.0, -2.0, -0.5, -3.0], [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]),
    ];
    let mut worst = 0.0f64;
    for (inc, expected) in cases {
        let got = row_coords(inc);
        for (g, e) in got.iter().zip(expected) {
            worst = worst.max((g - e).abs());
        }
    }
    Check {
        name: "integrate examples",
        passed: worst <= 4.0 * f64::EPSILON,
        detail: format!("max deviation {worst:.1e}"),
    }
}

/// Least-squares fit recovers random small affine maps applied to the identity grid.
pub fn affine_recovery(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let h = rng.gen_range(2..=10);
        let w = rng.gen_range(2..=10);
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (r == c) as u8 as f64 + rng.gen_range(-0.2..0.2);
            }
        }
        let a = AffineTransform { matrix: m };
        let id: Tensor<f64> = identity_grid(1, h, w);
        let mut grid = id.clone();
        let d = grid.data_mut();
        for p in 0..h * w {
            let (x, y) = a.apply(id.data()[p], id.data()[h * w + p]);
            d[p] = x;
            d[h * w + p] = y;
        }
        let fit = fit_affine(&grid).unwrap()[0];
        worst = worst.max(fit.max_abs_diff(&a));
    }
    Check {
        name: "affine recovery",
        passed: worst <= 1e-6,
        detail: format!("max entry error {worst:.1e} over {cases} maps"),
    }
}

pub fn run(seed: u64) -> Vec<Check> {
    vec![
        monotone_grids(1000, seed),
        identity_warp(100, seed + 1),
        integrate_examples(),
        affine_recovery(200, seed + 2),
    ]
}
