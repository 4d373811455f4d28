//! Latency cost model for lookahead prefetching and the choice of prefetch
//! budget.
//!
//! Stage 1 (generation + transfer) costs `max(t_llm, b_p / B)`; stage 2
//! (retrieval) costs `max(t_c, t_g)` with the slow tier proportional to the
//! number of missed clusters. For a piecewise-linear miss profile the total
//! is piecewise linear in `b_p`, so its minimum lies on a breakpoint: the
//! overlap boundary `B * t_llm`, a profile sample, or a point where the fast
//! and slow tier times cross.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{QueryTrace, StageKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub bandwidth_bytes_per_s: f64,
    /// Slow-tier seconds per cluster.
    pub t_cc: f64,
    /// Fast-tier seconds per cluster.
    pub t_gc: f64,
    pub parallel_slots: u32,
}

impl CostModel {
    pub fn new(bandwidth_bytes_per_s: f64, t_cc: f64, t_gc: f64, parallel_slots: u32) -> Self {
        CostModel { bandwidth_bytes_per_s, t_cc, t_gc, parallel_slots }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(self.bandwidth_bytes_per_s.is_finite() && self.bandwidth_bytes_per_s > 0.0) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        if !ok(self.t_cc) || !ok(self.t_gc) || self.t_cc == 0.0 {
            return Err(Error::Config("t_cc must be positive and t_gc non-negative".into()));
        }
        if self.parallel_slots == 0 {
            return Err(Error::Config("parallel_slots must be at least 1".into()));
        }
        if self.t_gc > self.t_cc {
            log::warn!(
                "fast-tier cluster time {} exceeds slow-tier time {}",
                self.t_gc,
                self.t_cc
            );
        }
        Ok(())
    }
}

/// Generation plus overlapped transfer of `b_p` bytes.
pub fn stage1_latency(b_p: f64, t_llm: f64, bandwidth: f64) -> f64 {
    if b_p <= bandwidth * t_llm {
        t_llm
    } else {
        b_p / bandwidth
    }
}

/// Expected retrieval time when a fraction `r_miss` of `n_probe` clusters
/// misses the fast tier. The slow tier is `r_miss * n_probe * t_cc / P`.
pub fn stage2_latency(n_probe: usize, r_miss: f64, cost: &CostModel) -> f64 {
    let n = n_probe as f64;
    let slow = r_miss * n * cost.t_cc / cost.parallel_slots as f64;
    let fast = (1.0 - r_miss) * n * cost.t_gc;
    slow.max(fast)
}

/// Empirical miss rate as a function of prefetched bytes, linearly
/// interpolated between samples and flat outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissProfile {
    points: Vec<(f64, f64)>,
}

impl MissProfile {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("miss profile needs at least one sample"));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in points.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(format!("duplicate sample at {} bytes", w[0].0)));
            }
            if w[1].1 > w[0].1 {
                return Err(Error::invalid("miss rate must be non-increasing in bytes"));
            }
        }
        if points.iter().any(|&(b, r)| !(b >= 0.0 && b.is_finite() && (0.0..=1.0).contains(&r))) {
            return Err(Error::invalid("samples need finite bytes >= 0 and miss rate in [0, 1]"));
        }
        Ok(MissProfile { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn r_miss(&self, b: f64) -> f64 {
        let p = &self.points;
        if b <= p[0].0 {
            return p[0].1;
        }
        let last = p[p.len() - 1];
        if b >= last.0 {
            return last.1;
        }
        let i = p.partition_point(|&(x, _)| x <= b);
        let (x0, y0) = p[i - 1];
        let (x1, y1) = p[i];
        y0 + (y1 - y0) * (b - x0) / (x1 - x0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetCase {
    /// Prefetch exactly what the generation window hides.
    OverlapBound,
    /// Prefetching past the window pays for itself up to `b_star`.
    InteriorMinimum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetDecision {
    pub b_star: f64,
    pub case: BudgetCase,
    pub t1: f64,
    pub t2: f64,
}

impl BudgetDecision {
    pub fn total(&self) -> f64 {
        self.t1 + self.t2
    }
}

pub fn predicted_total(
    b: f64,
    profile: &MissProfile,
    t_llm: f64,
    n_probe: usize,
    cost: &CostModel,
) -> f64 {
    stage1_latency(b, t_llm, cost.bandwidth_bytes_per_s)
        + stage2_latency(n_probe, profile.r_miss(b), cost)
}

fn ties(a: f64, b: f64) -> bool {
    if !(a.is_finite() && b.is_finite()) {
        return a == b;
    }
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
}

/// Minimizes predicted `t1 + t2` over `b_p` in `[0, max(B * t_llm, last sample)]`.
/// Among equal totals the largest budget wins, so a profile that never
/// improves still prefetches up to the overlap boundary.
pub fn optimal_budget(
    profile: &MissProfile,
    t_llm: f64,
    n_probe: usize,
    cost: &CostModel,
) -> Result<BudgetDecision> {
    if !(t_llm.is_finite() && t_llm >= 0.0) {
        return Err(Error::invalid("t_llm must be finite and non-negative"));
    }
    let bw = cost.bandwidth_bytes_per_s;
    let boundary = bw * t_llm;
    let hi = boundary.max(profile.points.last().unwrap().0);

    let mut candidates = vec![0.0, boundary, hi];
    candidates.extend(profile.points.iter().map(|p| p.0).filter(|&b| b <= hi));
    // Where slow == fast: r = t_gc / (t_cc / P + t_gc).
    let slow_per = cost.t_cc / cost.parallel_slots as f64;
    if cost.t_gc > 0.0 {
        let r_cross = cost.t_gc / (slow_per + cost.t_gc);
        for w in profile.points.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if y0 != y1 && (y1..=y0).contains(&r_cross) {
                candidates.push(x0 + (r_cross - y0) * (x1 - x0) / (y1 - y0));
            }
        }
    }

    let mut best_b = 0.0;
    let mut best_total = f64::INFINITY;
    for b in candidates {
        let total = predicted_total(b, profile, t_llm, n_probe, cost);
        if total < best_total && !ties(total, best_total) {
            best_b = b;
            best_total = total;
        } else if ties(total, best_total) && b > best_b {
            best_b = b;
        }
    }
    let t1 = stage1_latency(best_b, t_llm, bw);
    let t2 = stage2_latency(n_probe, profile.r_miss(best_b), cost);
    let case = if best_b > boundary { BudgetCase::InteriorMinimum } else { BudgetCase::OverlapBound };
    Ok(BudgetDecision { b_star: best_b, case, t1, t2 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSweep {
    pub best_b: f64,
    pub best_total: f64,
    pub step: f64,
}

/// Dense sweep of the predicted total over `points` evenly spaced budgets.
pub fn grid_sweep(
    profile: &MissProfile,
    t_llm: f64,
    n_probe: usize,
    cost: &CostModel,
    points: usize,
) -> GridSweep {
    let hi = (cost.bandwidth_bytes_per_s * t_llm).max(profile.points.last().unwrap().0);
    let step = if points > 1 { hi / (points - 1) as f64 } else { 0.0 };
    let mut best = GridSweep { best_b: 0.0, best_total: f64::INFINITY, step };
    for i in 0..points.max(1) {
        let b = step * i as f64;
        let total = predicted_total(b, profile, t_llm, n_probe, cost);
        if total < best.best_total && !ties(total, best.best_total) {
            best.best_b = b;
            best.best_total = total;
        } else if ties(total, best.best_total) {
            best.best_b = b;
        }
    }
    best
}

/// `optimal_budget` with a built-in grid cross-check: fails if a grid point
/// beats the analytic optimum or the two argmins are more than one step apart.
pub fn optimal_budget_checked(
    profile: &MissProfile,
    t_llm: f64,
    n_probe: usize,
    cost: &CostModel,
    grid_points: usize,
) -> Result<BudgetDecision> {
    let d = optimal_budget(profile, t_llm, n_probe, cost)?;
    let g = grid_sweep(profile, t_llm, n_probe, cost, grid_points);
    let total = d.total();
    if total > g.best_total && !ties(total, g.best_total) {
        return Err(Error::invalid(format!(
            "grid point {} (total {}) beats analytic optimum {} (total {})",
            g.best_b, g.best_total, d.b_star, total
        )));
    }
    if (d.b_star - g.best_b).abs() > g.step * (1.0 + 1e-9) {
        return Err(Error::invalid(format!(
            "analytic optimum {} and grid optimum {} differ by more than one step {}",
            d.b_star, g.best_b, g.step
        )));
    }
    Ok(d)
}

/// Which generation stage's recorded duration sets the overlap window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelector {
    /// The generation stage directly before the `n`-th retrieval (0-based).
    PreRetrieval(usize),
    /// Every generation stage that directly precedes a retrieval.
    AllPreRetrieval,
}

fn selected_durations(trace: &QueryTrace, sel: StageSelector) -> Vec<f64> {
    let mut out = Vec::new();
    let mut retrieval = 0;
    for (i, st) in trace.stages.iter().enumerate() {
        if st.kind != StageKind::Retrieve {
            continue;
        }
        if i > 0 && trace.stages[i - 1].kind == StageKind::Generate {
            let wanted = match sel {
                StageSelector::PreRetrieval(n) => n == retrieval,
                StageSelector::AllPreRetrieval => true,
            };
            if wanted {
                out.push(trace.stages[i - 1].duration_s);
            }
        }
        retrieval += 1;
    }
    out
}

/// Mean selected generation time over `traces` times the link bandwidth.
pub fn calibrate_budget(
    traces: &[QueryTrace],
    selector: StageSelector,
    bandwidth_bytes_per_s: f64,
) -> Result<u64> {
    let durations: Vec<f64> = traces.iter().flat_map(|t| selected_durations(t, selector)).collect();
    if durations.is_empty() {
        return Err(Error::invalid("no trace contains the selected pre-retrieval stage"));
    }
    let mean = durations.iter().sum::<f64>() / durations.len() as f64;
    Ok((mean * bandwidth_bytes_per_s).round() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Pipeline, Stage};

    fn cost() -> CostModel {
        CostModel::new(32e9, 1e-3, 1e-5, 1)
    }

    #[test]
    fn stage1_examples() {
        let bw = 32e9;
        let t = 2.0;
        assert_eq!(stage1_latency(bw * t, t, bw), t);
        assert_eq!(stage1_latency(96e9, t, bw), 3.0);
        assert_eq!(stage1_latency(0.0, t, bw), t);
    }

    #[test]
    fn stage2_examples() {
        let c = cost();
        assert_eq!(stage2_latency(256, 1.0, &c), 256.0 * 1e-3);
        let no_fast = CostModel { t_gc: 0.0, ..c };
        assert_eq!(stage2_latency(256, 0.0, &no_fast), 0.0);
        let v = stage2_latency(256, 0.25, &c);
        assert!((v - 0.064).abs() < 1e-15, "{v}");
        let fast = 0.75 * 256.0 * 1e-5;
        assert!(fast < v && (fast - 0.00192).abs() < 1e-15);
    }

    #[test]
    fn constant_profile_pushes_to_boundary() {
        let p = MissProfile::new(vec![(0.0, 0.4), (1e10, 0.4)]).unwrap();
        let c = CostModel { t_gc: 0.0, ..cost() };
        let d = optimal_budget(&p, 0.5, 256, &c).unwrap();
        assert_eq!(d.case, BudgetCase::OverlapBound);
        assert_eq!(d.b_star, 32e9 * 0.5);
        let d = optimal_budget(&p, 0.0, 256, &c).unwrap();
        assert_eq!(d.b_star, 0.0);
    }

    #[test]
    fn interior_minimum_found() {
        let c = CostModel::new(1e9, 0.1, 0.0, 1);
        let p = MissProfile::new(vec![(0.0, 1.0), (1e9, 0.6), (2e9, 0.3), (4e9, 0.25)]).unwrap();
        let d = optimal_budget_checked(&p, 1.0, 256, &c, 10_000).unwrap();
        assert_eq!(d.case, BudgetCase::InteriorMinimum);
        assert_eq!(d.b_star, 2e9);
    }

    #[test]
    fn profile_validation_and_interpolation() {
        assert!(MissProfile::new(vec![]).is_err());
        assert!(MissProfile::new(vec![(0.0, 0.2), (1.0, 0.5)]).is_err());
        assert!(MissProfile::new(vec![(0.0, 1.5)]).is_err());
        let p = MissProfile::new(vec![(10.0, 0.8), (20.0, 0.4)]).unwrap();
        assert_eq!(p.r_miss(0.0), 0.8);
        assert!((p.r_miss(15.0) - 0.6).abs() < 1e-12);
        assert_eq!(p.r_miss(99.0), 0.4);
    }

    fn trace(durations: &[f64]) -> QueryTrace {
        let mut stages = Vec::new();
        for &d in durations {
            stages.push(Stage::generate(d, Some(0), 1));
            stages.push(Stage::retrieve(0, 1));
        }
        QueryTrace { trace_id: 0, pipeline: Pipeline::Custom, input_ref: 0, stages }
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(
            calibrate_budget(&[trace(&[0.25])], StageSelector::PreRetrieval(0), 32e9).unwrap(),
            8_000_000_000
        );
        assert_eq!(
            calibrate_budget(&[trace(&[0.1]), trace(&[0.3])], StageSelector::PreRetrieval(0), 64e9)
                .unwrap(),
            12_800_000_000
        );
        let same = vec![trace(&[0.4]); 7];
        assert_eq!(
            calibrate_budget(&same, StageSelector::PreRetrieval(0), 1e9).unwrap(),
            calibrate_budget(&same[..1], StageSelector::PreRetrieval(0), 1e9).unwrap()
        );
        assert!(calibrate_budget(&[trace(&[0.1])], StageSelector::PreRetrieval(3), 1e9).is_err());
        assert!(calibrate_budget(&[], StageSelector::AllPreRetrieval, 1e9).is_err());
        assert_eq!(
            calibrate_budget(&[trace(&[1.0, 3.0])], StageSelector::AllPreRetrieval, 1.0).unwrap(),
            2
        );
    }
}
