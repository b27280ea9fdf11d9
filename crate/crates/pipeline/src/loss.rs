//! Task losses on probabilities. Training evaluates the same quantities from
//! logits inside the graph.

use serde::{Deserialize, Serialize};

fn soft_dice_parts(p: &[f64], t: &[f64]) -> (f64, f64) {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let s = p.iter().sum::<f64>() + t.iter().sum::<f64>() + 1.0;
    (2.0 * inter + 1.0, s)
}

fn bce_term(p: f64, t: f64) -> f64 {
    let mut l = 0.0;
    if t != 0.0 {
        l -= t * p.ln();
    }
    if t != 1.0 {
        l -= (1.0 - t) * (1.0 - p).ln();
    }
    l
}

/// `λ_bce·BCE + λ_dice·(1 − (2Σpt + 1)/(Σp + Σt + 1))` over the batch.
pub fn loss_repair(p: &[f64], t: &[f64], l_bce: f64, l_dice: f64) -> f64 {
    assert_eq!(p.len(), t.len(), "repair loss lengths");
    let n = p.len().max(1) as f64;
    let bce = p.iter().zip(t).map(|(&p, &t)| bce_term(p, t)).sum::<f64>() / n;
    let (num, s) = soft_dice_parts(p, t);
    l_bce * bce + l_dice * (1.0 - num / s)
}

/// Gradient of [`loss_repair`] with respect to the probabilities.
pub fn loss_repair_grad(p: &[f64], t: &[f64], l_bce: f64, l_dice: f64) -> Vec<f64> {
    let n = p.len().max(1) as f64;
    let (num, s) = soft_dice_parts(p, t);
    p.iter()
        .zip(t)
        .map(|(&p, &t)| {
            let dbce = (-t / p + (1.0 - t) / (1.0 - p)) / n;
            let ddice = -(2.0 * t * s - num) / (s * s);
            l_bce * dbce + l_dice * ddice
        })
        .collect()
}

/// Mean negative log probability of the target class; `dist` is row-major `n × classes`.
pub fn loss_ce(dist: &[f64], classes: usize, targets: &[usize]) -> f64 {
    assert_eq!(dist.len(), classes * targets.len(), "cross-entropy shape");
    let n = targets.len().max(1) as f64;
    targets.iter().enumerate().map(|(i, &c)| -dist[i * classes + c].ln()).sum::<f64>() / n
}

pub fn loss_ce_grad(dist: &[f64], classes: usize, targets: &[usize]) -> Vec<f64> {
    let n = targets.len().max(1) as f64;
    let mut g = vec![0.0; dist.len()];
    for (i, &c) in targets.iter().enumerate() {
        g[i * classes + c] = -1.0 / (dist[i * classes + c] * n);
    }
    g
}

/// Per-task losses of one step; an absent task is `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLosses {
    pub repair: Option<f64>,
    pub label: Option<f64>,
    pub recon: Option<f64>,
}

/// Unweighted sum; absent tasks contribute 0.
pub fn total_loss(l: &TaskLosses) -> f64 {
    l.repair.unwrap_or(0.0) + l.label.unwrap_or(0.0) + l.recon.unwrap_or(0.0)
}
