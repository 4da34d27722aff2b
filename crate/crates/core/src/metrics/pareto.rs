use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Which direction of a sparsity measure means "sparser".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// L0, L1 and L1/√L2.
    LowerIsSparser,
    /// Hoyer sparseness.
    HigherIsSparser,
}

impl Orientation {
    fn cost(self, sparsity: f64) -> f64 {
        match self {
            Orientation::LowerIsSparser => sparsity,
            Orientation::HigherIsSparser => -sparsity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub sparsity: f64,
    pub explained_variance: f64,
    pub run_id: String,
}

impl ParetoPoint {
    pub fn new(sparsity: f64, explained_variance: f64, run_id: impl Into<String>) -> Result<Self> {
        ensure!(
            sparsity.is_finite() && explained_variance.is_finite(),
            "Pareto point must be finite"
        );
        Ok(Self {
            sparsity,
            explained_variance,
            run_id: run_id.into(),
        })
    }
}

/// Points not dominated under (sparser, higher explained variance), sorted
/// from sparsest to densest. Non-finite points are ignored.
pub fn pareto_frontier(points: &[ParetoPoint], orientation: Orientation) -> Vec<ParetoPoint> {
    let mut pts: Vec<&ParetoPoint> = points
        .iter()
        .filter(|p| p.sparsity.is_finite() && p.explained_variance.is_finite())
        .collect();
    pts.sort_by(|a, b| {
        orientation
            .cost(a.sparsity)
            .total_cmp(&orientation.cost(b.sparsity))
            .then(b.explained_variance.total_cmp(&a.explained_variance))
            .then(a.run_id.cmp(&b.run_id))
    });
    let mut out: Vec<ParetoPoint> = Vec::new();
    let mut best_before = f64::NEG_INFINITY;
    let mut i = 0;
    while i < pts.len() {
        let cost = orientation.cost(pts[i].sparsity);
        let group_max = pts[i].explained_variance;
        let mut j = i;
        while j < pts.len() && orientation.cost(pts[j].sparsity) == cost {
            if pts[j].explained_variance == group_max && group_max > best_before {
                out.push(pts[j].clone());
            }
            j += 1;
        }
        best_before = best_before.max(group_max);
        i = j;
    }
    out
}

/// Sparsity of a frontier as a piecewise-linear function of explained
/// variance, evaluated at `ev`. `None` outside the frontier's EV range.
pub fn interpolate_sparsity(frontier: &[ParetoPoint], ev: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = frontier.iter().map(|p| (p.explained_variance, p.sparsity)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (first, last) = (pts.first()?, pts.last()?);
    if ev < first.0 || ev > last.0 {
        return None;
    }
    for w in pts.windows(2) {
        let ((e0, s0), (e1, s1)) = (w[0], w[1]);
        if ev >= e0 && ev <= e1 {
            if e1 == e0 {
                return Some(s0);
            }
            return Some(s0 + (s1 - s0) * (ev - e0) / (e1 - e0));
        }
    }
    Some(first.1)
}

/// `∫ |s_a(ev) − s_b(ev)| d ev` over the EV range both frontiers cover,
/// by the trapezoid rule on `steps` intervals. Zero when the ranges do not
/// overlap.
pub fn frontier_gap_area(a: &[ParetoPoint], b: &[ParetoPoint], steps: usize) -> f64 {
    let range = |f: &[ParetoPoint]| {
        f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.explained_variance), hi.max(p.explained_variance))
        })
    };
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);
    let (lo, hi) = (alo.max(blo), ahi.min(bhi));
    if !(hi > lo) || steps == 0 {
        return 0.0;
    }
    let h = (hi - lo) / steps as f64;
    let gap = |ev: f64| match (interpolate_sparsity(a, ev), interpolate_sparsity(b, ev)) {
        (Some(x), Some(y)) => (x - y).abs(),
        _ => 0.0,
    };
    let mut total = 0.5 * (gap(lo) + gap(hi));
    for i in 1..steps {
        total += gap(lo + h * i as f64);
    }
    total * h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: f64, ev: f64, id: &str) -> ParetoPoint {
        ParetoPoint::new(s, ev, id).unwrap()
    }

    #[test]
    fn single_point_is_its_own_frontier() {
        let pts = vec![p(1.0, 0.5, "a")];
        assert_eq!(pareto_frontier(&pts, Orientation::LowerIsSparser), pts);
    }

    #[test]
    fn dominated_point_is_removed() {
        let pts = vec![p(2.0, 0.4, "worse"), p(1.0, 0.5, "better")];
        let f = pareto_frontier(&pts, Orientation::LowerIsSparser);
        assert_eq!(f, vec![p(1.0, 0.5, "better")]);
    }

    #[test]
    fn hoyer_orientation_prefers_high_values() {
        let pts = vec![p(0.9, 0.5, "sparse"), p(0.2, 0.4, "dense")];
        let f = pareto_frontier(&pts, Orientation::HigherIsSparser);
        assert_eq!(f, vec![p(0.9, 0.5, "sparse")]);
    }

    #[test]
    fn gap_area_of_parallel_frontiers() {
        let a = vec![p(1.0, 0.0, "a0"), p(2.0, 1.0, "a1")];
        let b = vec![p(1.5, 0.0, "b0"), p(2.5, 1.0, "b1")];
        assert!((frontier_gap_area(&a, &b, 100) - 0.5).abs() < 1e-12);
        assert_eq!(interpolate_sparsity(&a, 0.5), Some(1.5));
        assert_eq!(interpolate_sparsity(&a, 1.5), None);
    }
}
