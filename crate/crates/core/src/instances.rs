//! Reproducible random problem instances for property checks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::generators::{make_alpha, make_kl, ConvexGenerator};
use crate::measures::DiscreteMeasure;

/// How the supports of `Q` and `P` relate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportLayout {
    /// Both measures charge every point.
    Shared,
    /// `Q` charges points outside `supp(P)`.
    NotAbsolutelyContinuous,
}

#[derive(Clone, Debug, Serialize)]
pub struct Instance {
    pub q: DiscreteMeasure,
    pub p: DiscreteMeasure,
    pub layout: SupportLayout,
}

pub fn random_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Weights bounded away from zero, normalized.
pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// A pair of measures on `n_points` random points in `R^d`.
pub fn random_pair(rng: &mut ChaCha8Rng, n_points: usize, d: usize, layout: SupportLayout) -> Instance {
    let n = n_points.max(2);
    let pts: Vec<Vec<f64>> = (0..n).map(|_| random_point(rng, d)).collect();
    match layout {
        SupportLayout::Shared => Instance {
            q: DiscreteMeasure::probability(pts.clone(), random_weights(rng, n)).expect("valid weights"),
            p: DiscreteMeasure::probability(pts, random_weights(rng, n)).expect("valid weights"),
            layout,
        },
        SupportLayout::NotAbsolutelyContinuous => {
            // P on a proper subset, Q on everything.
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let np = rng.random_range(1..n);
            let p_pts: Vec<Vec<f64>> = idx[..np].iter().map(|&i| pts[i].clone()).collect();
            Instance {
                q: DiscreteMeasure::probability(pts, random_weights(rng, n)).expect("valid weights"),
                p: DiscreteMeasure::probability(p_pts, random_weights(rng, np)).expect("valid weights"),
                layout,
            }
        }
    }
}

/// KL, f₂ or f₅.
pub fn standard_generators() -> Vec<ConvexGenerator> {
    vec![make_kl(), make_alpha(2.0).expect("alpha 2"), make_alpha(5.0).expect("alpha 5")]
}
