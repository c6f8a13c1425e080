//! Brute-force oracles for the verification metrics. Shared by the integration
//! tests and the acceptance runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdbgan::eval::{verification_metrics, PairLabel, ScoreSet};

pub fn random_set(rng: &mut ChaCha8Rng) -> ScoreSet {
    let n = rng.gen_range(2..=50);
    let ties = rng.gen_bool(0.5);
    let mut labels: Vec<PairLabel> = (0..n)
        .map(|_| if rng.gen_bool(0.5) { PairLabel::Client } else { PairLabel::Impostor })
        .collect();
    labels[0] = PairLabel::Client;
    labels[1] = PairLabel::Impostor;
    let scores = labels
        .iter()
        .map(|l| {
            let shift = if *l == PairLabel::Client { 0.3 } else { 0.0 };
            if ties {
                (rng.gen_range(0..6) as f64) / 5.0 + shift
            } else {
                rng.gen_range(-1.0..1.0) + shift
            }
        })
        .collect();
    ScoreSet::new(scores, labels).unwrap()
}

fn split(set: &ScoreSet) -> (Vec<f64>, Vec<f64>) {
    let mut c = Vec::new();
    let mut i = Vec::new();
    for (&s, &l) in set.scores().iter().zip(set.labels()) {
        match l {
            PairLabel::Client => c.push(s),
            PairLabel::Impostor => i.push(s),
        }
    }
    (c, i)
}

/// P(client score > impostor score), ties counted 1/2.
pub fn auc_pairwise(set: &ScoreSet) -> f64 {
    let (c, i) = split(set);
    let mut acc = 0.0;
    for a in &c {
        for b in &i {
            acc += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    acc / (c.len() * i.len()) as f64
}

/// `(fpr, tpr)` for accept-if-`score >= t` at `+inf` and at each distinct score, descending.
pub fn sweep(set: &ScoreSet) -> Vec<(f64, f64)> {
    let (c, i) = split(set);
    let mut th: Vec<f64> = set.scores().to_vec();
    th.sort_by(|a, b| b.partial_cmp(a).unwrap());
    th.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in th {
        let tpr = c.iter().filter(|&&s| s >= t).count() as f64 / c.len() as f64;
        let fpr = i.iter().filter(|&&s| s >= t).count() as f64 / i.len() as f64;
        pts.push((fpr, tpr));
    }
    pts
}

/// Largest TPR on the piecewise-linear sweep at FPR exactly `alpha`.
pub fn tpr_at(pts: &[(f64, f64)], alpha: f64) -> f64 {
    let mut best: f64 = 0.0;
    for w in pts.windows(2) {
        let ((f0, t0), (f1, t1)) = (w[0], w[1]);
        if f0 <= alpha && alpha <= f1 {
            let v = if f1 == f0 { t1.max(t0) } else { t0 + (alpha - f0) / (f1 - f0) * (t1 - t0) };
            best = best.max(v);
        }
    }
    best
}

pub fn ap_oracle(set: &ScoreSet) -> f64 {
    let (c, i) = split(set);
    let mut th: Vec<f64> = set.scores().to_vec();
    th.sort_by(|a, b| b.partial_cmp(a).unwrap());
    th.dedup();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for t in th {
        let tp = c.iter().filter(|&&s| s >= t).count() as f64;
        let fp = i.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / c.len() as f64;
        ap += (recall - prev) * tp / (tp + fp);
        prev = recall;
    }
    ap
}

pub struct MetricsOutcome {
    pub max_auc_err: f64,
    pub max_ap_err: f64,
    pub max_tpr_err: f64,
    pub max_eer_residual: f64,
    pub max_eer_off_curve: f64,
    pub monotone_invariant: bool,
    pub curve_monotone: bool,
}

impl MetricsOutcome {
    pub fn passed(&self) -> bool {
        self.max_auc_err <= 1e-9
            && self.max_ap_err <= 1e-9
            && self.max_tpr_err <= 1e-9
            && self.max_eer_residual <= 1e-9
            && self.max_eer_off_curve <= 1e-9
            && self.monotone_invariant
            && self.curve_monotone
    }
}

/// Distance from `(x, y)` to the polyline.
fn off_curve(pts: &[(f64, f64)], x: f64, y: f64) -> f64 {
    pts.windows(2)
        .map(|w| {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            let (dx, dy) = (x1 - x0, y1 - y0);
            let len2 = dx * dx + dy * dy;
            let t = if len2 == 0.0 { 0.0 } else { (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0) };
            ((x0 + t * dx - x).powi(2) + (y0 + t * dy - y).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn run(cases: usize, seed: u64) -> MetricsOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut o = MetricsOutcome {
        max_auc_err: 0.0,
        max_ap_err: 0.0,
        max_tpr_err: 0.0,
        max_eer_residual: 0.0,
        max_eer_off_curve: 0.0,
        monotone_invariant: true,
        curve_monotone: true,
    };
    for _ in 0..cases {
        let set = random_set(&mut rng);
        let r = verification_metrics(&set).unwrap();
        let pts = sweep(&set);
        o.max_auc_err = o.max_auc_err.max((r.auc - auc_pairwise(&set)).abs());
        o.max_ap_err = o.max_ap_err.max((r.ap - ap_oracle(&set)).abs());
        for (alpha, got) in [(0.0, r.tpr_at_fpr_0pct), (0.001, r.tpr_at_fpr_01pct), (0.01, r.tpr_at_fpr_1pct)] {
            o.max_tpr_err = o.max_tpr_err.max((got - tpr_at(&pts, alpha)).abs());
        }
        let (f, t) = r.eer_point;
        o.max_eer_residual = o.max_eer_residual.max((f - (1.0 - t)).abs()).max((r.eer - f).abs());
        o.max_eer_off_curve = o.max_eer_off_curve.max(off_curve(&pts, f, t));
        let roc = &r.roc.points;
        o.curve_monotone &= roc.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr)
            && (roc[0].fpr, roc[0].tpr) == (0.0, 0.0)
            && (roc[roc.len() - 1].fpr, roc[roc.len() - 1].tpr) == (1.0, 1.0);

        let warped = ScoreSet::new(
            set.scores().iter().map(|&s| (2.0 * s).exp() + s * s * s + 7.0).collect(),
            set.labels().to_vec(),
        )
        .unwrap();
        let r2 = verification_metrics(&warped).unwrap();
        o.monotone_invariant &= r2.auc == r.auc
            && r2.eer == r.eer
            && r2.tpr_at_fpr_0pct == r.tpr_at_fpr_0pct
            && r2.tpr_at_fpr_01pct == r.tpr_at_fpr_01pct
            && r2.tpr_at_fpr_1pct == r.tpr_at_fpr_1pct
            && r2.ap == r.ap;
    }
    o
}
