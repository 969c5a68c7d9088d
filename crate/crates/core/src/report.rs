//! Tables recomputed from a metrics log. Every function here is pure in the
//! records it is given.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::scheduler::Simulation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Propagation walltimes of single members, `bins` equal-width bins between
/// the smallest and largest value.
pub fn propagation_histogram(records: &[MetricRecord], bins: usize) -> Vec<HistogramBin> {
    let times: Vec<f64> = records
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Member { wall_ms, .. } => Some(*wall_ms),
            _ => None,
        })
        .collect();
    histogram(&times, bins)
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
}

/// Least squares fit of `y = a + b·x²`.
pub fn fit_quadratic(points: &[(f64, f64)]) -> Result<QuadraticFit> {
    if points.len() < 2 {
        return Err(Error::config("a quadratic fit needs at least two points"));
    }
    let n = points.len() as f64;
    let u: Vec<f64> = points.iter().map(|(x, _)| x * x).collect();
    let mean_u = u.iter().sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut suu, mut suy, mut syy) = (0.0, 0.0, 0.0);
    for (ui, (_, y)) in u.iter().zip(points) {
        suu += (ui - mean_u) * (ui - mean_u);
        suy += (ui - mean_u) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if suu == 0.0 {
        return Err(Error::config("a quadratic fit needs at least two distinct x"));
    }
    let b = suy / suu;
    let a = mean_y - b * mean_u;
    let ss_res: f64 = u.iter().zip(points).map(|(ui, (_, y))| (y - a - b * ui).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(QuadraticFit { a, b, r2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRow {
    pub members: usize,
    pub samples: usize,
    pub mean_wall_ms: f64,
}

/// Update walltime per ensemble size, with the `a + b·M²` fit when there are
/// at least two sizes.
pub fn update_scaling(records: &[MetricRecord]) -> (Vec<UpdateRow>, Option<QuadraticFit>) {
    let mut by_m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let MetricRecord::Update { members, wall_ms, .. } = r {
            by_m.entry(*members).or_default().push(*wall_ms);
        }
    }
    let rows: Vec<UpdateRow> = by_m
        .into_iter()
        .map(|(members, w)| UpdateRow {
            members,
            samples: w.len(),
            mean_wall_ms: w.iter().sum::<f64>() / w.len() as f64,
        })
        .collect();
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.members as f64, r.mean_wall_ms)).collect();
    let fit = fit_quadratic(&points).ok();
    (rows, fit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyRow {
    pub cycle: u32,
    pub runners: usize,
    pub members: usize,
    pub wall_ms: f64,
    /// Time a single runner would need: the baseline's propagation walltime
    /// when given, otherwise the sum of the member walltimes.
    pub single_runner_ms: f64,
    pub efficiency: f64,
}

/// Propagation efficiency `T₁ / (R · T_R)` for every cycle.
pub fn efficiency(records: &[MetricRecord], baseline: Option<&[MetricRecord]>) -> Vec<EfficiencyRow> {
    let baseline_ms: Option<BTreeMap<u32, f64>> = baseline.map(|b| {
        b.iter()
            .filter_map(|r| match r {
                MetricRecord::Propagation { cycle, wall_ms, .. } => Some((*cycle, *wall_ms)),
                _ => None,
            })
            .collect()
    });
    let mut member_sum: BTreeMap<u32, f64> = BTreeMap::new();
    for r in records {
        if let MetricRecord::Member { cycle, wall_ms, .. } = r {
            *member_sum.entry(*cycle).or_default() += wall_ms;
        }
    }
    records
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Propagation {
                cycle,
                wall_ms,
                runners,
                members_propagated,
                ..
            } => {
                let single = match &baseline_ms {
                    Some(b) => *b.get(cycle)?,
                    None => member_sum.get(cycle).copied().unwrap_or(0.0),
                };
                let efficiency = if *runners == 0 || *wall_ms <= 0.0 {
                    0.0
                } else {
                    single / (*runners as f64 * wall_ms)
                };
                Some(EfficiencyRow {
                    cycle: *cycle,
                    runners: *runners,
                    members: *members_propagated,
                    wall_ms: *wall_ms,
                    single_runner_ms: single,
                    efficiency,
                })
            }
            _ => None,
        })
        .collect()
}

pub fn prop_hist_csv(records: &[MetricRecord], bins: usize) -> String {
    let mut out = String::from("bin_lo_ms,bin_hi_ms,count\n");
    for b in propagation_histogram(records, bins) {
        let _ = writeln!(out, "{:.3},{:.3},{}", b.lo, b.hi, b.count);
    }
    out
}

pub fn update_scaling_csv(records: &[MetricRecord]) -> String {
    let (rows, fit) = update_scaling(records);
    let mut out = String::from("members,samples,mean_wall_ms\n");
    for r in &rows {
        let _ = writeln!(out, "{},{},{:.6}", r.members, r.samples, r.mean_wall_ms);
    }
    if let Some(f) = fit {
        let _ = writeln!(out, "# fit wall_ms = a + b*M^2: a={:.6} b={:.9} r2={:.4}", f.a, f.b, f.r2);
    }
    out
}

pub fn efficiency_csv(records: &[MetricRecord], baseline: Option<&[MetricRecord]>) -> String {
    let mut out = String::from("cycle,runners,members,members_per_runner,wall_ms,single_runner_ms,efficiency\n");
    for r in efficiency(records, baseline) {
        let per_runner = if r.runners == 0 { 0.0 } else { r.members as f64 / r.runners as f64 };
        let _ = writeln!(
            out,
            "{},{},{},{:.3},{:.3},{:.3},{:.4}",
            r.cycle, r.runners, r.members, per_runner, r.wall_ms, r.single_runner_ms, r.efficiency
        );
    }
    out
}

/// Every record on one timeline, times relative to the first record.
pub fn trace_csv(records: &[MetricRecord]) -> String {
    let t0 = records.iter().map(MetricRecord::t_ms).min().unwrap_or(0);
    let mut rows: Vec<(u64, String)> = records
        .iter()
        .map(|r| (r.t_ms().saturating_sub(t0), trace_fields(r)))
        .collect();
    rows.sort_by_key(|(t, _)| *t);
    let mut out = String::from("t_ms,event,cycle,runner,member,value,detail\n");
    for (t, fields) in rows {
        let _ = writeln!(out, "{t},{fields}");
    }
    out
}

fn trace_fields(r: &MetricRecord) -> String {
    let opt = |v: Option<u32>| v.map(|v| v.to_string()).unwrap_or_default();
    match r {
        MetricRecord::Propagation { cycle, wall_ms, runners, .. } => {
            format!("propagation,{cycle},,,{wall_ms:.3},{runners} runners")
        }
        MetricRecord::Update { cycle, members, wall_ms, .. } => {
            format!("update,{cycle},,,{wall_ms:.3},{members} members")
        }
        MetricRecord::Member {
            cycle,
            member,
            runner,
            wall_ms,
            ..
        } => format!("member,{cycle},{runner},{member},{wall_ms:.3},"),
        MetricRecord::RunnerJoined { runner, .. } => format!("runner_joined,,{runner},,,"),
        MetricRecord::RunnerFailed {
            cycle,
            runner,
            member,
            reason,
            ..
        } => format!("runner_failed,{cycle},{runner},{},,{}", opt(*member), csv_text(reason)),
        MetricRecord::RunnerRetired { runner, .. } => format!("runner_retired,,{runner},,,"),
        MetricRecord::MemberDropped {
            cycle, member, restarts, ..
        } => format!("member_dropped,{cycle},,{member},{restarts},"),
        MetricRecord::MemberReplaced {
            cycle, member, restarts, ..
        } => format!("member_replaced,{cycle},,{member},{restarts},"),
        MetricRecord::Checkpoint { cycle, wall_ms, .. } => format!("checkpoint,{cycle},,,{wall_ms:.3},"),
        MetricRecord::Restore { cycle, .. } => format!("restore,{cycle},,,,"),
        MetricRecord::StudyDone {
            cycles, ensemble_hash, ..
        } => format!("study_done,{cycles},,,,{ensemble_hash}"),
        MetricRecord::Launcher {
            event, runner, detail, ..
        } => format!("launcher_{event},,{},,,{}", opt(*runner), csv_text(detail)),
    }
}

fn csv_text(s: &str) -> String {
    s.replace([',', '\n'], " ")
}

pub fn simulation_csv(sim: &Simulation) -> String {
    let mut out = String::from("member,runner,start,end\n");
    for t in &sim.trace {
        let _ = writeln!(out, "{},{},{},{}", t.member, t.runner, t.start, t.end);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic_is_recovered() {
        let pts: Vec<(f64, f64)> = [8.0, 16.0, 32.0, 64.0].iter().map(|&m| (m, 3.0 + 0.5 * m * m)).collect();
        let f = fit_quadratic(&pts).unwrap();
        assert!((f.a - 3.0).abs() < 1e-9 && (f.b - 0.5).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_data_fits_worse() {
        let pts: Vec<(f64, f64)> = (1..=6).map(|m| (m as f64, if m % 2 == 0 { 10.0 } else { 0.0 })).collect();
        assert!(fit_quadratic(&pts).unwrap().r2 < 0.5);
    }

    #[test]
    fn histogram_counts_everything() {
        let v = [1.0, 2.0, 2.5, 9.0, 10.0];
        let h = histogram(&v, 3);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(h[0].lo, 1.0);
        assert_eq!(h[2].hi, 10.0);
        assert_eq!(h[2].count, 2);
    }

    #[test]
    fn efficiency_against_member_sum() {
        let recs = vec![
            MetricRecord::Member {
                cycle: 0,
                member: 0,
                runner: 1,
                start_ms: 0,
                wall_ms: 60.0,
                t_ms: 60,
            },
            MetricRecord::Member {
                cycle: 0,
                member: 1,
                runner: 2,
                start_ms: 0,
                wall_ms: 20.0,
                t_ms: 20,
            },
            MetricRecord::Propagation {
                cycle: 0,
                wall_ms: 60.0,
                busy_ms: BTreeMap::new(),
                members_propagated: 2,
                runners: 2,
                t_ms: 61,
            },
        ];
        let rows = efficiency(&recs, None);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].efficiency - 80.0 / 120.0).abs() < 1e-12);
        assert!(trace_csv(&recs).lines().count() == 4);
    }
}
