//! Training objectives acting on the network output and the embedding space.
//!
//! The one-class contrastive loss pulls bonafide embeddings toward a running
//! bonafide center and pushes attack embeddings beyond a margin; attacks
//! already outside the margin contribute nothing.

use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::protocol::Label;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the one-class term in the combined loss.
    pub lambda: f64,
    pub margin: f64,
    /// Smoothing factor of the bonafide-center update.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            margin: 3.0,
            alpha: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(config(format!("lambda must be in [0,1], got {}", self.lambda)));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Running center of the bonafide embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonafideCenter {
    pub center: Vec<f64>,
    pub alpha: f64,
    pub initialized: bool,
}

impl BonafideCenter {
    pub fn new(dim: usize, alpha: f64) -> Self {
        Self {
            center: vec![0.0; dim],
            alpha,
            initialized: false,
        }
    }

    pub fn at(center: Vec<f64>, alpha: f64) -> Self {
        Self {
            center,
            alpha,
            initialized: true,
        }
    }
}

/// Binary cross-entropy with bonafide = 1. Returns `(loss, dloss/dp)`.
pub fn bce_loss(p: f64, y: Label) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(input(format!("probability must lie in (0,1), got {p}")));
    }
    Ok(match y {
        Label::Bonafide => (-p.ln(), -1.0 / p),
        Label::Attack => (-(1.0 - p).ln(), 1.0 / (1.0 - p)),
    })
}

/// Euclidean distance between an embedding and the bonafide center.
pub fn distance_to_center(x: &[f64], c: &BonafideCenter) -> Result<f64> {
    if x.len() != c.center.len() {
        return Err(input(format!(
            "embedding has {} dims, center has {}",
            x.len(),
            c.center.len()
        )));
    }
    Ok(x.iter()
        .zip(&c.center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// One-class contrastive loss and its gradient with respect to `x`.
///
/// Bonafide: `½·DC²`. Attack: `½·max(0, m − DC)²`. The attack gradient at
/// `DC = 0` has no direction and is returned as zero.
pub fn occl_loss(x: &[f64], c: &BonafideCenter, y: Label, margin: f64) -> Result<(f64, Vec<f64>)> {
    if !(margin.is_finite() && margin > 0.0) {
        return Err(config(format!("margin must be > 0, got {margin}")));
    }
    let dc = distance_to_center(x, c)?;
    let offset = x.iter().zip(&c.center).map(|(a, b)| a - b);
    Ok(match y {
        Label::Bonafide => (0.5 * dc * dc, offset.collect()),
        Label::Attack => {
            if dc >= margin {
                (0.0, vec![0.0; x.len()])
            } else if dc == 0.0 {
                (0.5 * margin * margin, vec![0.0; x.len()])
            } else {
                let gap = margin - dc;
                let scale = -gap / dc;
                (0.5 * gap * gap, offset.map(|d| scale * d).collect())
            }
        }
    })
}

/// `(1 − λ)·bce + λ·occl`.
#[inline]
pub fn combined_loss(bce: f64, occl: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * bce + lambda * occl
}

/// Moves the center toward the mean of the batch's bonafide embeddings:
/// `c ← ĉ + α·(x̄ − ĉ)`, equivalently `(1 − α)·ĉ + α·x̄`.
///
/// An uninitialized center jumps straight to `x̄`; a batch without bonafide
/// samples leaves it untouched.
pub fn update_center(c: &BonafideCenter, bonafide: &[&[f64]], alpha: f64) -> Result<BonafideCenter> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config(format!("alpha must be in [0,1], got {alpha}")));
    }
    if bonafide.is_empty() {
        return Ok(c.clone());
    }
    let dim = c.center.len();
    if let Some(bad) = bonafide.iter().find(|e| e.len() != dim) {
        return Err(input(format!("embedding has {} dims, center has {dim}", bad.len())));
    }
    let n = bonafide.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| bonafide.iter().map(|e| e[j]).sum::<f64>() / n)
        .collect();
    let center = if c.initialized {
        c.center
            .iter()
            .zip(&mean)
            .map(|(old, m)| old + alpha * (m - old))
            .collect()
    } else {
        mean
    };
    Ok(BonafideCenter {
        center,
        alpha: c.alpha,
        initialized: true,
    })
}

/// Classic center loss `½·Σ‖xᵢ − c_{yᵢ}‖²`; `labels[i]` indexes `centers`.
pub fn center_loss(embeddings: &[Vec<f64>], labels: &[usize], centers: &[Vec<f64>]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(input(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, (x, &y)) in embeddings.iter().zip(labels).enumerate() {
        let c = centers
            .get(y)
            .ok_or_else(|| input(format!("no center for label {y} (sample {i})")))?;
        if c.len() != x.len() {
            return Err(input(format!("sample {i}: embedding/center dimension mismatch")));
        }
        total += x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(0.5 * total)
}
