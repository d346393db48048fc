//! Trajectory data model and its JSONL representation.
//!
//! One trajectory per line. Floats are written with 9 significant digits so
//! that two writes of the same trajectory are byte-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Tolerance on the unit-norm heading invariant.
pub const HEADING_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub x: f64,
    pub y: f64,
    pub hx: f64,
    pub hy: f64,
    #[serde(rename = "v")]
    pub speed: f64,
    pub lane: i32,
}

impl KinematicState {
    pub fn heading_angle(&self) -> f64 {
        self.hy.atan2(self.hx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub lidar: Vec<f64>,
    pub lane: Vec<f64>,
    pub side: Vec<f64>,
    #[serde(rename = "crossed")]
    pub crossed_lane_line: bool,
}

impl Observation {
    /// Number of entries fed to learned models (lidar, lane and side).
    pub fn flat_len(&self) -> usize {
        self.lidar.len() + self.lane.len() + self.side.len()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.lidar);
        out.extend_from_slice(&self.lane);
        out.extend_from_slice(&self.side);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        self.flatten_into(&mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub steer: f64,
    pub accel: f64,
}

impl Action {
    pub fn clamped(steer: f64, accel: f64) -> Self {
        Self {
            steer: steer.clamp(-1.0, 1.0),
            accel: accel.clamp(-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeStep {
    pub t: usize,
    pub obs: Observation,
    pub state: KinematicState,
    pub action: Action,
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WctKind {
    #[serde(rename = "crash")]
    Crash,
    #[serde(rename = "off-road")]
    OffRoad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WctEvent {
    pub kind: WctKind,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyGroup {
    Zigzag,
    SuddenBraking,
    SuddenTurn,
    LaneWeaving,
    Tailgating,
    Crash,
}

impl AnomalyGroup {
    pub const ALL: [AnomalyGroup; 6] = [
        AnomalyGroup::Zigzag,
        AnomalyGroup::SuddenBraking,
        AnomalyGroup::SuddenTurn,
        AnomalyGroup::LaneWeaving,
        AnomalyGroup::Tailgating,
        AnomalyGroup::Crash,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyGroup::Zigzag => "zigzag",
            AnomalyGroup::SuddenBraking => "sudden_braking",
            AnomalyGroup::SuddenTurn => "sudden_turn",
            AnomalyGroup::LaneWeaving => "lane_weaving",
            AnomalyGroup::Tailgating => "tailgating",
            AnomalyGroup::Crash => "crash",
        }
    }
}

impl fmt::Display for AnomalyGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Half-open step interval `[start, end)`, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<[usize; 2]> for Interval {
    fn from(v: [usize; 2]) -> Self {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [usize; 2] {
    fn from(i: Interval) -> Self {
        [i.start, i.end]
    }
}

/// Per-group anomaly intervals produced by the rule-based labeler.
///
/// An unlabeled trajectory carries an empty map; a labeled one carries every
/// group, possibly with empty interval lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnomalyLabelSet {
    pub groups: BTreeMap<AnomalyGroup, Vec<Interval>>,
}

impl AnomalyLabelSet {
    pub fn is_anomalous(&self) -> bool {
        self.groups.values().any(|v| !v.is_empty())
    }

    pub fn is_labeled(&self) -> bool {
        !self.groups.is_empty()
    }

    pub fn has(&self, group: AnomalyGroup) -> bool {
        self.groups.get(&group).is_some_and(|v| !v.is_empty())
    }

    pub fn intervals(&self, group: AnomalyGroup) -> &[Interval] {
        self.groups.get(&group).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Clips every interval to `[0, len)`, dropping the ones that vanish.
    pub fn truncated(&self, len: usize) -> Self {
        let groups = self
            .groups
            .iter()
            .map(|(g, ivs)| {
                let kept = ivs
                    .iter()
                    .filter(|iv| iv.start < len)
                    .map(|iv| Interval::new(iv.start, iv.end.min(len)))
                    .filter(|iv| !iv.is_empty())
                    .collect();
                (*g, kept)
            })
            .collect();
        Self { groups }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub seed: u64,
    pub meta: BTreeMap<String, Value>,
    pub wct: Option<WctEvent>,
    pub wct_label: u8,
    pub anomaly_labels: AnomalyLabelSet,
    pub steps: Vec<TimeStep>,
    /// Source trajectory id, for items cut from another trajectory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_len: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_annotated(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.reward.is_some())
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(Value::as_f64)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }

    /// Expert action-noise level, when recorded.
    pub fn epsilon(&self) -> Option<f64> {
        self.meta_f64("epsilon")
    }

    /// First `k` steps, keeping the label, the WCT record and provenance.
    pub fn prefix(&self, k: usize, id: String) -> Trajectory {
        let k = k.min(self.len());
        Trajectory {
            id,
            seed: self.seed,
            meta: self.meta.clone(),
            wct: self.wct,
            wct_label: self.wct_label,
            anomaly_labels: self.anomaly_labels.truncated(k),
            steps: self.steps[..k].to_vec(),
            src: Some(self.src.clone().unwrap_or_else(|| self.id.clone())),
            prefix_len: Some(k),
        }
    }

    /// Whether this record is a cut of a longer trajectory.
    pub fn is_cut(&self) -> bool {
        self.prefix_len.is_some()
    }
}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn check_unit_range(field: &str, values: &[f64], out: &mut Vec<Violation>) {
    for (i, &v) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            out.push(Violation::new(
                format!("{field}[{i}]"),
                format!("value {v} outside [0,1]"),
            ));
        }
    }
}

/// Checks every type invariant. An empty report means the trajectory is valid.
pub fn validate(traj: &Trajectory) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = traj.steps.len();
    if n == 0 {
        out.push(Violation::new("steps", "trajectory has no steps"));
    }

    match (traj.wct, traj.wct_label) {
        (Some(_), 1) | (None, 0) => {}
        (_, l) if l > 1 => out.push(Violation::new("wct_label", format!("label {l} not in {{0,1}}"))),
        (Some(_), _) => out.push(Violation::new("wct_label", "wct present but wct_label = 0")),
        (None, _) => out.push(Violation::new("wct_label", "wct_label = 1 but wct absent")),
    }
    if let Some(w) = traj.wct {
        if n > 0 {
            // cut records keep the source's terminus, which lies at or after their end
            let ok = if traj.is_cut() { w.step + 1 >= n } else { w.step + 1 == n };
            if !ok {
                out.push(Violation::new(
                    "wct.step",
                    format!("terminus step {} does not end a trajectory of {n} steps", w.step),
                ));
            }
        }
    }

    let (lidar_n, lane_n, side_n) = traj
        .steps
        .first()
        .map(|s| (s.obs.lidar.len(), s.obs.lane.len(), s.obs.side.len()))
        .unwrap_or_default();
    let annotated = traj.steps.first().is_some_and(|s| s.reward.is_some());
    for (i, s) in traj.steps.iter().enumerate() {
        let p = format!("steps[{i}]");
        if s.t != i {
            out.push(Violation::new(format!("{p}.t"), format!("t = {} at position {i}", s.t)));
        }
        let st = &s.state;
        let norm = (st.hx * st.hx + st.hy * st.hy).sqrt();
        if !((norm - 1.0).abs() <= HEADING_NORM_TOL) {
            out.push(Violation::new(
                format!("{p}.state.heading"),
                format!("heading norm {norm} is not 1"),
            ));
        }
        if !(st.speed >= 0.0) || !st.speed.is_finite() {
            out.push(Violation::new(format!("{p}.state.v"), format!("speed {} < 0", st.speed)));
        }
        if !st.x.is_finite() || !st.y.is_finite() {
            out.push(Violation::new(format!("{p}.state.position"), "non-finite position"));
        }
        check_unit_range(&format!("{p}.obs.lidar"), &s.obs.lidar, &mut out);
        check_unit_range(&format!("{p}.obs.lane"), &s.obs.lane, &mut out);
        check_unit_range(&format!("{p}.obs.side"), &s.obs.side, &mut out);
        if s.obs.lidar.len() != lidar_n || s.obs.lane.len() != lane_n || s.obs.side.len() != side_n {
            out.push(Violation::new(format!("{p}.obs"), "sensor lengths differ from step 0"));
        }
        for (name, v) in [("steer", s.action.steer), ("accel", s.action.accel)] {
            if !(-1.0..=1.0).contains(&v) {
                out.push(Violation::new(format!("{p}.action.{name}"), format!("{v} outside [-1,1]")));
            }
        }
        if s.reward.is_some() != annotated {
            out.push(Violation::new(format!("{p}.reward"), "reward annotated on some steps only"));
        }
        if let Some(r) = s.reward {
            if !r.is_finite() {
                out.push(Violation::new(format!("{p}.reward"), "non-finite reward"));
            }
        }
    }
    if let Some(&lidar_meta) = traj.meta.get("lidar_beam_count").and_then(Value::as_u64).as_ref() {
        if n > 0 && lidar_meta as usize != lidar_n {
            out.push(Violation::new(
                "steps[0].obs.lidar",
                format!("{lidar_n} beams but scenario declares {lidar_meta}"),
            ));
        }
    }

    for (group, ivs) in &traj.anomaly_labels.groups {
        let mut prev_end = 0usize;
        for (k, iv) in ivs.iter().enumerate() {
            let field = format!("anomaly_labels.{group}[{k}]");
            if iv.is_empty() || iv.end > n {
                out.push(Violation::new(field, format!("[{}, {}) not within [0, {n})", iv.start, iv.end)));
            } else if k > 0 && iv.start < prev_end {
                out.push(Violation::new(field, "overlaps or precedes the previous interval"));
            }
            prev_end = iv.end;
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: parse error: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: invariant violated on {field}: {message}")]
    Invariant {
        line: usize,
        field: String,
        message: String,
    },
}

/// Rounds to 9 significant digits (correctly rounded via decimal formatting).
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    let mut buf = [0u8; 40];
    let mut cur = io::Cursor::new(&mut buf[..]);
    write!(cur, "{x:.8e}").expect("buffer holds any f64");
    let len = cur.position() as usize;
    std::str::from_utf8(&buf[..len])
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(x)
}

/// Compact JSON formatter that writes floats with 9 significant digits.
#[derive(Debug, Default, Clone, Copy)]
pub struct CanonicalFormatter;

impl serde_json::ser::Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        serde_json::ser::CompactFormatter.write_f64(writer, round_sig9(value))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes any value as one canonical JSON line (no trailing newline).
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<Vec<u8>> {
    let mut out = Vec::with_capacity(4096);
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CanonicalFormatter);
    value.serialize(&mut ser)?;
    Ok(out)
}

pub fn write_trajectories_to<W: Write>(writer: W, trajs: &[Trajectory]) -> io::Result<usize> {
    let mut w = BufWriter::new(writer);
    for t in trajs {
        let line = to_canonical_json(t).map_err(io::Error::other)?;
        w.write_all(&line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(trajs.len())
}

/// Writes one trajectory per line and returns the number of records written.
pub fn write_trajectories(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<usize, TrajectoryError> {
    let path = path.as_ref();
    let io_err = |source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_trajectories_to(file, trajs).map_err(io_err)
}

pub fn read_trajectories_from<R: BufRead>(reader: R) -> Result<Vec<Trajectory>, TrajectoryError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| TrajectoryError::Io {
            path: format!("<line {line_no}>"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory =
            serde_json::from_str(&line).map_err(|source| TrajectoryError::Parse { line: line_no, source })?;
        if let Some(v) = validate(&traj).into_iter().next() {
            return Err(TrajectoryError::Invariant {
                line: line_no,
                field: v.field,
                message: v.message,
            });
        }
        out.push(traj);
    }
    Ok(out)
}

/// Reads a JSONL trajectory file, validating every record.
pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, TrajectoryError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_trajectories_from(BufReader::new(file))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn step(t: usize, x: f64, speed: f64) -> TimeStep {
        TimeStep {
            t,
            obs: Observation {
                lidar: vec![1.0; 4],
                lane: vec![0.5; 2],
                side: vec![0.25; 2],
                crossed_lane_line: false,
            },
            state: KinematicState {
                x,
                y: 5.25,
                hx: 1.0,
                hy: 0.0,
                speed,
                lane: 1,
            },
            action: Action { steer: 0.0, accel: 0.1 },
            reward: None,
        }
    }

    pub fn straight(id: &str, n: usize) -> Trajectory {
        Trajectory {
            id: id.to_string(),
            seed: 3,
            meta: BTreeMap::from([("dt".to_string(), Value::from(0.1))]),
            wct: None,
            wct_label: 0,
            anomaly_labels: AnomalyLabelSet::default(),
            steps: (0..n).map(|t| step(t, t as f64 * 1.5, 15.0)).collect(),
            src: None,
            prefix_len: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn well_formed_trajectory_has_empty_report() {
        assert!(validate(&straight("a", 5)).is_empty());
    }

    #[test]
    fn wct_without_label_is_one_violation() {
        let mut t = straight("a", 5);
        t.wct = Some(WctEvent { kind: WctKind::Crash, step: 4 });
        let report = validate(&t);
        assert_eq!(report.len(), 1, "{report:?}");
        assert_eq!(report[0].field, "wct_label");
    }

    #[test]
    fn lidar_out_of_range_names_index() {
        let mut t = straight("a", 5);
        t.steps[2].obs.lidar[3] = 1.2;
        let report = validate(&t);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].field, "steps[2].obs.lidar[3]");
    }

    #[test]
    fn wct_must_be_last_step_unless_cut() {
        let mut t = straight("a", 5);
        t.wct = Some(WctEvent { kind: WctKind::OffRoad, step: 2 });
        t.wct_label = 1;
        assert_eq!(validate(&t)[0].field, "wct.step");
        t.wct = Some(WctEvent { kind: WctKind::OffRoad, step: 4 });
        assert!(validate(&t).is_empty());
        let p = t.prefix(3, "a/p3".into());
        assert!(validate(&p).is_empty());
    }

    #[test]
    fn overlapping_intervals_are_reported() {
        let mut t = straight("a", 10);
        t.anomaly_labels
            .groups
            .insert(AnomalyGroup::Zigzag, vec![Interval::new(0, 5), Interval::new(4, 8)]);
        assert_eq!(validate(&t).len(), 1);
        t.anomaly_labels
            .groups
            .insert(AnomalyGroup::Zigzag, vec![Interval::new(0, 5), Interval::new(6, 11)]);
        assert_eq!(validate(&t).len(), 1);
    }

    #[test]
    fn empty_write_gives_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        assert_eq!(write_trajectories(&p, &[]).unwrap(), 0);
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        assert!(read_trajectories(&p).unwrap().is_empty());
    }

    #[test]
    fn three_records_three_lines() {
        let trajs: Vec<_> = (0..3).map(|i| straight(&format!("t{i}"), 4 + i)).collect();
        let mut buf = Vec::new();
        assert_eq!(write_trajectories_to(&mut buf, &trajs).unwrap(), 3);
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        for line in text.lines() {
            let _: Trajectory = serde_json::from_str(line).unwrap();
        }
        assert_eq!(read_trajectories_from(&buf[..]).unwrap(), trajs);
    }

    #[test]
    fn schema_field_names() {
        let mut t = straight("x", 1);
        t.steps[0].reward = Some(0.5);
        let v: Value = serde_json::from_slice(&to_canonical_json(&t).unwrap()).unwrap();
        for key in ["id", "seed", "meta", "wct", "wct_label", "anomaly_labels", "steps"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["wct"].is_null());
        let s = &v["steps"][0];
        for key in ["t", "obs", "state", "action", "reward"] {
            assert!(s.get(key).is_some(), "missing step.{key}");
        }
        for key in ["lidar", "lane", "side", "crossed"] {
            assert!(s["obs"].get(key).is_some());
        }
        for key in ["x", "y", "hx", "hy", "v", "lane"] {
            assert!(s["state"].get(key).is_some());
        }
        assert!(s["action"].get("steer").is_some() && s["action"].get("accel").is_some());
        let mut u = straight("x", 1);
        u.steps[0].reward = None;
        let v: Value = serde_json::from_slice(&to_canonical_json(&u).unwrap()).unwrap();
        assert!(v["steps"][0]["reward"].is_null());
        assert!(v.get("src").is_none());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = String::from_utf8(to_canonical_json(&straight("a", 2)).unwrap()).unwrap();
        let text = format!("{good}\n{{\"id\": oops\n");
        match read_trajectories_from(text.as_bytes()) {
            Err(TrajectoryError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_heading_names_heading() {
        let mut t = straight("a", 2);
        t.steps[1].state.hx = 0.5;
        let text = to_canonical_json(&t).unwrap();
        match read_trajectories_from(&text[..]) {
            Err(TrajectoryError::Invariant { line, field, .. }) => {
                assert_eq!(line, 1);
                assert!(field.contains("heading"), "{field}");
            }
            other => panic!("expected invariant error, got {other:?}"),
        }
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(round_sig9(std::f64::consts::PI), 3.14159265);
        assert_eq!(round_sig9(-0.0), 0.0);
        assert_eq!(round_sig9(1.0 / 3.0), 0.333333333);
        let mut t = straight("a", 1);
        t.steps[0].state.x = 1.0 / 3.0;
        let line = String::from_utf8(to_canonical_json(&t).unwrap()).unwrap();
        assert!(line.contains("\"x\":0.333333333,"), "{line}");
    }

    #[test]
    fn truncate_labels() {
        let mut set = AnomalyLabelSet::default();
        set.groups.insert(AnomalyGroup::SuddenTurn, vec![Interval::new(90, 100), Interval::new(96, 99)]);
        set.groups.insert(AnomalyGroup::Crash, vec![Interval::new(99, 100)]);
        let t = set.truncated(95);
        assert_eq!(t.intervals(AnomalyGroup::SuddenTurn), &[Interval::new(90, 95)]);
        assert!(!t.has(AnomalyGroup::Crash));
    }
}
