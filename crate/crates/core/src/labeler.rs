//! Rule-based anomaly labels. Used for evaluation only.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{AnomalyGroup, AnomalyLabelSet, Interval, Trajectory, WctKind};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("invalid labeler config: {0}")]
    InvalidConfig(String),
    #[error("need at least {need} samples, got {got}")]
    TooShort { need: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelerConfig {
    pub zigzag_window: usize,
    pub zigzag_curvature_threshold: f64,
    pub zigzag_fraction: f64,
    pub braking_window: usize,
    pub braking_threshold: f64,
    pub turn_threshold: f64,
    pub lane_window: usize,
    pub lane_interval_threshold: usize,
    pub proximity_threshold: f64,
    pub proximity_duration: usize,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            zigzag_window: 40,
            zigzag_curvature_threshold: 0.5,
            zigzag_fraction: 0.10,
            braking_window: 5,
            braking_threshold: -3.0,
            turn_threshold: 0.8,
            lane_window: 20,
            lane_interval_threshold: 30,
            proximity_threshold: 3.0,
            proximity_duration: 20,
        }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        let bad = |m: &str| Err(LabelError::InvalidConfig(m.to_string()));
        if self.zigzag_window < 2 || self.braking_window < 2 || self.lane_window < 2 {
            return bad("windows must be >= 2");
        }
        if self.braking_window % 2 == 0 {
            return bad("braking_window must be odd");
        }
        let finite = [
            self.zigzag_curvature_threshold,
            self.zigzag_fraction,
            self.braking_threshold,
            self.turn_threshold,
            self.proximity_threshold,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("thresholds must be finite");
        }
        if self.turn_threshold <= 0.0 {
            return bad("turn_threshold must be > 0");
        }
        Ok(())
    }
}

/// Groups the true entries of `flags` into maximal half-open runs.
pub fn runs(flags: &[bool]) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Interval::new(s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Interval::new(s, flags.len()));
    }
    out
}

/// Merges overlapping or touching intervals.
pub fn merge(mut ivs: Vec<Interval>) -> Vec<Interval> {
    ivs.sort_by_key(|iv| (iv.start, iv.end));
    let mut out: Vec<Interval> = Vec::with_capacity(ivs.len());
    for iv in ivs {
        match out.last_mut() {
            Some(last) if iv.start <= last.end => last.end = last.end.max(iv.end),
            _ => out.push(iv),
        }
    }
    out
}

fn dt_of(traj: &Trajectory) -> f64 {
    traj.meta_f64("dt").unwrap_or(0.1)
}

/// Curvature of the heading curve from central differences at spacing `window`.
///
/// Entry `j` belongs to step `j + window`; the first and last `window` steps
/// have no value.
pub fn curvature_series(headings: &[(f64, f64)], window: usize, dt: f64) -> Result<Vec<f64>, LabelError> {
    let need = 2 * window + 1;
    if window == 0 || headings.len() < need {
        return Err(LabelError::TooShort {
            need,
            got: headings.len(),
        });
    }
    let h = window as f64 * dt;
    Ok((window..headings.len() - window)
        .map(|i| {
            let (xp, yp) = headings[i + window];
            let (x0, y0) = headings[i];
            let (xm, ym) = headings[i - window];
            let dx = (xp - xm) / (2.0 * h);
            let dy = (yp - ym) / (2.0 * h);
            let ddx = (xp - 2.0 * x0 + xm) / (h * h);
            let ddy = (yp - 2.0 * y0 + ym) / (h * h);
            let denom = (dx * dx + dy * dy).powf(1.5);
            if denom < 1e-9 {
                0.0
            } else {
                (dx * ddy - dy * ddx).abs() / denom
            }
        })
        .collect())
}

pub fn detect_zigzag(traj: &Trajectory, cfg: &LabelerConfig) -> Vec<Interval> {
    let w = cfg.zigzag_window;
    let headings: Vec<(f64, f64)> = traj.steps.iter().map(|s| (s.state.hx, s.state.hy)).collect();
    let Ok(k) = curvature_series(&headings, w, dt_of(traj)) else {
        return Vec::new();
    };
    let mut marked = vec![0u32; headings.len()];
    for (j, &kj) in k.iter().enumerate() {
        if kj > cfg.zigzag_curvature_threshold {
            marked[j + w] = 1;
        }
    }
    if marked.len() < w {
        return Vec::new();
    }
    let mut count: u32 = marked[..w].iter().sum();
    let mut hits = Vec::new();
    for start in 0..=marked.len() - w {
        if start > 0 {
            count = count + marked[start + w - 1] - marked[start - 1];
        }
        if count as f64 / w as f64 > cfg.zigzag_fraction {
            hits.push(Interval::new(start, start + w));
        }
    }
    merge(hits)
}

/// Smoothed acceleration series `SA` in m/s², `None` where the windows do not fit.
pub fn smoothed_acceleration(speeds: &[f64], window: usize, dt: f64) -> Vec<Option<f64>> {
    let n = speeds.len();
    let lo = window / 2;
    let hi = window - lo;
    let accel: Vec<Option<f64>> = (0..n)
        .map(|i| (i >= lo && i + hi < n).then(|| (speeds[i + hi] - speeds[i - lo]) / (window as f64 * dt)))
        .collect();
    (0..n)
        .map(|i| {
            if i < lo || i + lo >= n {
                return None;
            }
            let mut sum = 0.0;
            for a in &accel[i - lo..=i + lo] {
                sum += (*a)?;
            }
            Some(sum / window as f64)
        })
        .collect()
}

pub fn detect_sudden_braking(traj: &Trajectory, cfg: &LabelerConfig) -> Vec<Interval> {
    let speeds: Vec<f64> = traj.steps.iter().map(|s| s.state.speed).collect();
    if speeds.len() <= cfg.braking_window {
        return Vec::new();
    }
    let sa = smoothed_acceleration(&speeds, cfg.braking_window, dt_of(traj));
    let flags: Vec<bool> = sa.iter().map(|a| a.is_some_and(|a| a < cfg.braking_threshold)).collect();
    runs(&flags)
}

/// Lateral acceleration `Δθ/dt · v_{i+1}` for steps `1..len-1`; entry 0 and the last entry are 0.
pub fn lateral_acceleration(headings: &[(f64, f64)], speeds: &[f64], dt: f64) -> Vec<f64> {
    let n = headings.len();
    let mut out = vec![0.0; n];
    for i in 1..n.saturating_sub(1) {
        let (ax, ay) = headings[i - 1];
        let (bx, by) = headings[i];
        let na = ax.hypot(ay);
        let nb = bx.hypot(by);
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let dot = ((ax * bx + ay * by) / (na * nb)).clamp(-1.0, 1.0);
        out[i] = dot.acos() / dt * speeds[i + 1];
    }
    out
}

pub fn detect_sudden_turns(traj: &Trajectory, cfg: &LabelerConfig) -> Vec<Interval> {
    if traj.len() < 3 {
        return Vec::new();
    }
    let headings: Vec<(f64, f64)> = traj.steps.iter().map(|s| (s.state.hx, s.state.hy)).collect();
    let speeds: Vec<f64> = traj.steps.iter().map(|s| s.state.speed).collect();
    let alat = lateral_acceleration(&headings, &speeds, dt_of(traj));
    let flags: Vec<bool> = alat.iter().map(|a| a.abs() > cfg.turn_threshold).collect();
    runs(&flags)
}

/// Runs of the valid-mode moving average of `crossings` above 0.5, longer
/// than `min_len`, placed at the window centers.
pub fn lane_intervals(crossings: &[bool], window: usize, min_len: usize) -> Vec<Interval> {
    if window == 0 || crossings.len() < window {
        return Vec::new();
    }
    let mut sum: usize = crossings[..window].iter().filter(|&&c| c).count();
    let mut above = Vec::with_capacity(crossings.len() - window + 1);
    for j in 0..=crossings.len() - window {
        if j > 0 {
            sum = sum + crossings[j + window - 1] as usize - crossings[j - 1] as usize;
        }
        above.push(sum as f64 / window as f64 > 0.5);
    }
    let center = window / 2;
    runs(&above)
        .into_iter()
        .filter(|iv| iv.len() > min_len)
        .map(|iv| Interval::new(iv.start + center, iv.end + center))
        .collect()
}

pub fn detect_lane_weaving(traj: &Trajectory, cfg: &LabelerConfig) -> Vec<Interval> {
    let d: Vec<bool> = traj.steps.iter().map(|s| s.obs.crossed_lane_line).collect();
    lane_intervals(&d, cfg.lane_window, cfg.lane_interval_threshold)
}

/// Indices of lidar beams strictly within ±30° of straight ahead.
pub fn forward_cone(beam_count: usize) -> Vec<usize> {
    (0..beam_count)
        .filter(|&k| {
            let mut a = 2.0 * PI * k as f64 / beam_count as f64;
            if a > PI {
                a -= 2.0 * PI;
            }
            a.abs() < PI / 6.0 - 1e-12
        })
        .collect()
}

pub fn detect_tailgating(traj: &Trajectory, cfg: &LabelerConfig) -> Vec<Interval> {
    let Some(first) = traj.steps.first() else {
        return Vec::new();
    };
    let range = traj.meta_f64("lidar_range").unwrap_or(50.0);
    let cone = forward_cone(first.obs.lidar.len());
    let flags: Vec<bool> = traj
        .steps
        .iter()
        .map(|s| {
            let nearest = cone.iter().map(|&k| s.obs.lidar[k]).fold(f64::INFINITY, f64::min);
            nearest * range < cfg.proximity_threshold
        })
        .collect();
    runs(&flags)
        .into_iter()
        .filter(|iv| iv.len() >= cfg.proximity_duration)
        .collect()
}

pub fn label_trajectory(traj: &Trajectory, cfg: &LabelerConfig) -> Result<AnomalyLabelSet, LabelError> {
    cfg.validate()?;
    let mut set = AnomalyLabelSet::default();
    set.groups.insert(AnomalyGroup::Zigzag, detect_zigzag(traj, cfg));
    set.groups.insert(AnomalyGroup::SuddenBraking, detect_sudden_braking(traj, cfg));
    set.groups.insert(AnomalyGroup::SuddenTurn, detect_sudden_turns(traj, cfg));
    set.groups.insert(AnomalyGroup::LaneWeaving, detect_lane_weaving(traj, cfg));
    set.groups.insert(AnomalyGroup::Tailgating, detect_tailgating(traj, cfg));
    let crash = match traj.wct {
        Some(e) if e.kind == WctKind::Crash && !traj.is_empty() => {
            vec![Interval::new(traj.len() - 1, traj.len())]
        }
        _ => Vec::new(),
    };
    set.groups.insert(AnomalyGroup::Crash, crash);
    Ok(set)
}

/// Labels every trajectory in place.
pub fn label_all(trajs: &mut [Trajectory], cfg: &LabelerConfig) -> Result<(), LabelError> {
    use rayon::prelude::*;
    cfg.validate()?;
    let labels: Vec<AnomalyLabelSet> = trajs
        .par_iter()
        .map(|t| label_trajectory(t, cfg))
        .collect::<Result<_, _>>()?;
    for (t, l) in trajs.iter_mut().zip(labels) {
        t.anomaly_labels = l;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::fixtures;
    use proptest::prelude::*;

    fn rotating(omega: f64, dt: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|i| ((omega * i as f64 * dt).cos(), (omega * i as f64 * dt).sin())).collect()
    }

    #[test]
    fn constant_heading_has_zero_curvature() {
        let k = curvature_series(&vec![(1.0, 0.0); 100], 40, 0.1).unwrap();
        assert_eq!(k.len(), 20);
        assert!(k.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_rotation_curvature_near_one() {
        // exact derivatives of (cos ωt, sin ωt) give curvature 1
        for (omega, dt) in [(0.5, 0.1), (0.2, 0.1), (0.1, 0.05)] {
            let k = curvature_series(&rotating(omega, dt, 50), 1, dt).unwrap();
            assert!(k.iter().all(|&v| (v - 1.0).abs() <= 0.02), "{omega} {dt}");
            // closed form of the central-difference scheme
            let a = omega * dt;
            let closed = 2.0 / (1.0 + a.cos());
            assert!(k.iter().all(|&v| (v - closed).abs() < 1e-6));
        }
    }

    #[test]
    fn curvature_converges_with_dt() {
        let err = |dt: f64| {
            let k = curvature_series(&rotating(1.0, dt, 60), 2, dt).unwrap();
            (k[10] - 1.0).abs()
        };
        assert!(err(0.05) < err(0.1));
    }

    #[test]
    fn curvature_too_short() {
        assert!(matches!(curvature_series(&[(1.0, 0.0); 5], 3, 0.1), Err(LabelError::TooShort { .. })));
    }

    #[test]
    fn braking_closed_form() {
        let speeds: Vec<f64> = (0..60).map(|i| 20.0 - 2.0 * i as f64 * 0.1).collect();
        let sa = smoothed_acceleration(&speeds, 5, 0.1);
        let interior: Vec<f64> = sa.iter().flatten().copied().collect();
        assert!(!interior.is_empty());
        assert!(interior.iter().all(|&a| (a + 2.0).abs() < 1e-9));
        let mut t = fixtures::straight("b", 60);
        for (s, v) in t.steps.iter_mut().zip(&speeds) {
            s.state.speed = *v;
        }
        assert!(detect_sudden_braking(&t, &LabelerConfig::default()).is_empty());
        let cfg = LabelerConfig {
            braking_threshold: -1.5,
            ..LabelerConfig::default()
        };
        let flagged = detect_sudden_braking(&t, &cfg);
        let defined: Vec<usize> = (0..60).filter(|&i| sa[i].is_some()).collect();
        assert_eq!(flagged, vec![Interval::new(defined[0], defined[defined.len() - 1] + 1)]);
    }

    #[test]
    fn constant_speed_no_braking() {
        assert!(detect_sudden_braking(&fixtures::straight("c", 50), &LabelerConfig::default()).is_empty());
    }

    #[test]
    fn perpendicular_turn() {
        let a = lateral_acceleration(&[(1.0, 0.0), (0.0, 1.0), (0.0, 1.0)], &[2.0, 2.0, 2.0], 0.1);
        assert!((a[1] - 10.0 * PI).abs() < 1e-9);
        assert!(a[1] > 0.8);
    }

    #[test]
    fn dot_above_one_is_clipped() {
        let h = (1.0, 1e-5);
        let a = lateral_acceleration(&[h, h, h], &[10.0; 3], 0.1);
        assert!(a.iter().all(|v| v.is_finite() && *v == 0.0));
        let b = lateral_acceleration(&[(1.0000000002, 0.0), (1.0, 0.0), (1.0, 0.0)], &[10.0; 3], 0.1);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn lane_convolution_cases() {
        assert!(lane_intervals(&[false; 50], 5, 30).is_empty());
        let all = lane_intervals(&[true; 50], 5, 30);
        assert_eq!(all, vec![Interval::new(2, 48)]);
        assert_eq!(all[0].len(), 46);
        let sparse: Vec<bool> = (0..100).map(|i| i % 10 == 0).collect();
        assert!(lane_intervals(&sparse, 20, 30).is_empty());
    }

    fn with_forward_reading(meters: f64, n: usize, from: usize, len: usize) -> Trajectory {
        let mut t = fixtures::straight("tg", n);
        t.meta.insert("lidar_range".into(), 50.0.into());
        for s in &mut t.steps[from..from + len] {
            s.obs.lidar[0] = meters / 50.0;
        }
        t
    }

    #[test]
    fn tailgating_duration_rule() {
        let cfg = LabelerConfig::default();
        let clear = with_forward_reading(50.0, 40, 0, 40);
        assert!(detect_tailgating(&clear, &cfg).is_empty());
        let long = with_forward_reading(2.0, 40, 5, 25);
        let short = with_forward_reading(2.0, 40, 5, 5);
        assert_eq!(detect_tailgating(&long, &cfg), vec![Interval::new(5, 30)]);
        assert!(detect_tailgating(&short, &cfg).is_empty());
    }

    #[test]
    fn forward_cone_members() {
        assert_eq!(forward_cone(24), vec![0, 1, 23]);
        assert_eq!(forward_cone(1), vec![0]);
    }

    #[test]
    fn isolated_sharp_step_below_fraction() {
        let mut t = fixtures::straight("z", 200);
        let turn = (0.6f64.cos(), 0.6f64.sin());
        for s in &mut t.steps[100..] {
            s.state.hx = turn.0;
            s.state.hy = turn.1;
        }
        // one heading jump marks at most the steps whose stencil straddles it
        let k = curvature_series(&t.steps.iter().map(|s| (s.state.hx, s.state.hy)).collect::<Vec<_>>(), 40, 0.1).unwrap();
        let marked = k.iter().filter(|&&v| v > 0.5).count();
        assert!(marked <= 3, "{marked}");
        assert!(detect_zigzag(&t, &LabelerConfig::default()).is_empty());
        assert!(detect_zigzag(&fixtures::straight("s", 200), &LabelerConfig::default()).is_empty());
    }

    #[test]
    fn crash_group_is_final_step() {
        let mut t = fixtures::straight("c", 12);
        t.wct = Some(crate::trajectory::WctEvent {
            kind: WctKind::Crash,
            step: 11,
        });
        t.wct_label = 1;
        let set = label_trajectory(&t, &LabelerConfig::default()).unwrap();
        assert_eq!(set.intervals(AnomalyGroup::Crash), &[Interval::new(11, 12)]);
        assert!(set.is_anomalous());
    }

    #[test]
    fn even_braking_window_rejected() {
        let cfg = LabelerConfig {
            braking_window: 4,
            ..LabelerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn braking_threshold_monotone(speeds in proptest::collection::vec(0.0f64..20.0, 10..60), lo in -8.0f64..0.0, d in 0.0f64..4.0) {
            let mut t = fixtures::straight("m", speeds.len());
            for (s, v) in t.steps.iter_mut().zip(&speeds) { s.state.speed = *v; }
            let strict = LabelerConfig { braking_threshold: lo, ..LabelerConfig::default() };
            let loose = LabelerConfig { braking_threshold: lo + d, ..LabelerConfig::default() };
            let a = detect_sudden_braking(&t, &strict);
            let b = detect_sudden_braking(&t, &loose);
            for iv in &a {
                prop_assert!(b.iter().any(|j| j.start <= iv.start && iv.end <= j.end));
            }
        }

        #[test]
        fn turn_threshold_monotone(angles in proptest::collection::vec(-0.3f64..0.3, 3..40), tau in 0.1f64..5.0, d in 0.0f64..5.0) {
            let mut t = fixtures::straight("m", angles.len());
            let mut theta = 0.0;
            for (s, a) in t.steps.iter_mut().zip(&angles) {
                theta += a;
                s.state.hx = theta.cos();
                s.state.hy = theta.sin();
            }
            let low = LabelerConfig { turn_threshold: tau, ..LabelerConfig::default() };
            let high = LabelerConfig { turn_threshold: tau + d, ..LabelerConfig::default() };
            let a = detect_sudden_turns(&t, &low);
            for iv in detect_sudden_turns(&t, &high) {
                prop_assert!(a.iter().any(|j| j.start <= iv.start && iv.end <= j.end));
            }
        }

        #[test]
        fn intervals_valid(flags in proptest::collection::vec(any::<bool>(), 0..120), w in 2usize..25, tau in 0usize..40) {
            let n = flags.len();
            let ivs = lane_intervals(&flags, w, tau);
            for pair in ivs.windows(2) {
                prop_assert!(pair[0].end < pair[1].start);
            }
            for iv in &ivs {
                prop_assert!(iv.start < iv.end && iv.end <= n);
            }
        }
    }
}
