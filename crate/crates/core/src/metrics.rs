//! ISO/IEC 30107-3 error rates.
//!
//! Scores are "higher = more bonafide"; a sample with `score >= τ` is
//! accepted as bonafide. Threshold sweeps use the midpoints between adjacent
//! distinct scores plus one sentinel below the minimum and one above the
//! maximum, which covers every distinct decision the rule can make.

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::protocol::Label;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

impl Rates {
    fn new(apcer: f64, bpcer: f64) -> Self {
        Self {
            apcer,
            bpcer,
            acer: (apcer + bpcer) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub dev_apcer: f64,
    pub dev_bpcer: f64,
    pub dev_acer: f64,
    pub eval_apcer: f64,
    pub eval_bpcer: f64,
    pub eval_acer: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub det_points: Vec<DetPoint>,
}

impl MetricsReport {
    /// Aligned table with percentages at one decimal.
    pub fn to_table(&self, title: &str) -> String {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let mut out = String::new();
        out.push_str(&format!("{title}\n"));
        out.push_str(&format!(
            "{:<6} | {:>7} {:>7} {:>7}\n",
            "set", "APCER", "BPCER", "ACER"
        ));
        out.push_str(&format!("{}\n", "-".repeat(32)));
        out.push_str(&format!(
            "{:<6} | {:>7} {:>7} {:>7}\n",
            "dev",
            pct(self.dev_apcer),
            pct(self.dev_bpcer),
            pct(self.dev_acer)
        ));
        out.push_str(&format!(
            "{:<6} | {:>7} {:>7} {:>7}\n",
            "eval",
            pct(self.eval_apcer),
            pct(self.eval_bpcer),
            pct(self.eval_acer)
        ));
        out.push_str(&format!("eval EER {}%  threshold {}\n", pct(self.eer), self.threshold));
        out
    }
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(input(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::Metric("scored set is empty".into()));
        }
        if let Some(i) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::Metric(format!("score {i} is NaN")));
        }
        Ok(Self { scores, labels })
    }

    fn class_scores(&self, label: Label) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .scores
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == label)
            .map(|(&s, _)| s)
            .collect();
        v.sort_by(f64::total_cmp);
        v
    }

    fn require(&self, label: Label) -> Result<()> {
        if self.labels.contains(&label) {
            Ok(())
        } else {
            Err(Error::Metric(format!("no {label} samples in the scored set")))
        }
    }
}

/// Every distinct decision threshold for the given scores, ascending.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut u = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    if u.is_empty() {
        return Vec::new();
    }
    let lo = u[0];
    let hi = u[u.len() - 1];
    let mut out = Vec::with_capacity(u.len() + 1);
    out.push(lo - (1.0 + lo.abs()));
    out.extend(u.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(hi + (1.0 + hi.abs()));
    out
}

/// Rates over presorted per-class scores.
struct Sweep {
    attacks: Vec<f64>,
    bonafide: Vec<f64>,
}

impl Sweep {
    fn new(set: &ScoredSet) -> Self {
        Self {
            attacks: set.class_scores(Label::Attack),
            bonafide: set.class_scores(Label::Bonafide),
        }
    }

    fn bpcer(&self, tau: f64) -> f64 {
        self.bonafide.partition_point(|&s| s < tau) as f64 / self.bonafide.len() as f64
    }

    fn apcer(&self, tau: f64) -> f64 {
        let below = self.attacks.partition_point(|&s| s < tau);
        (self.attacks.len() - below) as f64 / self.attacks.len() as f64
    }

    fn rates(&self, tau: f64) -> Rates {
        Rates::new(self.apcer(tau), self.bpcer(tau))
    }
}

pub fn compute_rates(set: &ScoredSet, tau: f64) -> Result<Rates> {
    set.require(Label::Attack)?;
    set.require(Label::Bonafide)?;
    Ok(Sweep::new(set).rates(tau))
}

/// Largest candidate threshold whose BPCER on `dev` does not exceed
/// `target_bpcer`.
pub fn select_threshold(dev: &ScoredSet, target_bpcer: f64) -> Result<f64> {
    if !(target_bpcer > 0.0 && target_bpcer < 1.0) {
        return Err(input(format!("target BPCER must lie in (0,1), got {target_bpcer}")));
    }
    dev.require(Label::Bonafide)?;
    let sweep = Sweep::new(dev);
    let candidates = candidate_thresholds(&dev.scores);
    // BPCER is non-decreasing in τ and zero at the lower sentinel.
    let mut best = candidates[0];
    for &t in &candidates {
        if sweep.bpcer(t) <= target_bpcer {
            best = t;
        } else {
            break;
        }
    }
    Ok(best)
}

/// Equal error rate and the threshold where it is reached.
///
/// Picks the candidate minimizing `|APCER − BPCER|`, then the smallest
/// `APCER + BPCER`, then the lowest threshold; the EER is the mean of the two
/// rates there.
pub fn eer(set: &ScoredSet) -> Result<(f64, f64)> {
    set.require(Label::Attack)?;
    set.require(Label::Bonafide)?;
    let sweep = Sweep::new(set);
    let mut best: Option<(f64, f64, f64)> = None; // (gap, sum, tau)
    for t in candidate_thresholds(&set.scores) {
        let r = sweep.rates(t);
        let gap = (r.apcer - r.bpcer).abs();
        let sum = r.apcer + r.bpcer;
        let better = match best {
            None => true,
            Some((g, s, _)) => gap < g || (gap == g && sum < s),
        };
        if better {
            best = Some((gap, sum, t));
        }
    }
    let (_, sum, tau) = best.expect("at least two candidates");
    Ok((sum / 2.0, tau))
}

/// One point per candidate threshold, ascending in threshold.
pub fn det_points(set: &ScoredSet) -> Result<Vec<DetPoint>> {
    set.require(Label::Attack)?;
    set.require(Label::Bonafide)?;
    let sweep = Sweep::new(set);
    Ok(candidate_thresholds(&set.scores)
        .into_iter()
        .map(|t| DetPoint {
            threshold: t,
            apcer: sweep.apcer(t),
            bpcer: sweep.bpcer(t),
        })
        .collect())
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("threshold,apcer,bpcer\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.apcer, p.bpcer));
    }
    out
}
