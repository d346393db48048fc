//! Per-beam LiDAR noise families and displacement metrics.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::trajectory::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("unknown noise family {0:?}")]
    UnknownFamily(String),
    #[error("unknown intensity {0:?}")]
    UnknownIntensity(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("empty sequence")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Precipitation,
    Distance,
    Ambient,
    Spurious,
    Gaussian,
    Dropout,
    Composite1,
    Composite2,
}

impl NoiseFamily {
    pub const ALL: [NoiseFamily; 8] = [
        NoiseFamily::Precipitation,
        NoiseFamily::Distance,
        NoiseFamily::Ambient,
        NoiseFamily::Spurious,
        NoiseFamily::Gaussian,
        NoiseFamily::Dropout,
        NoiseFamily::Composite1,
        NoiseFamily::Composite2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseFamily::Precipitation => "precipitation",
            NoiseFamily::Distance => "distance",
            NoiseFamily::Ambient => "ambient",
            NoiseFamily::Spurious => "spurious",
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Dropout => "dropout",
            NoiseFamily::Composite1 => "composite1",
            NoiseFamily::Composite2 => "composite2",
        }
    }

    /// Elementary families applied in order.
    fn stages(self) -> &'static [NoiseFamily] {
        use NoiseFamily::*;
        match self {
            Composite1 => &[Precipitation, Distance, Ambient, Spurious],
            Composite2 => &[Gaussian, Dropout, Spurious],
            Precipitation => &[Precipitation],
            Distance => &[Distance],
            Ambient => &[Ambient],
            Spurious => &[Spurious],
            Gaussian => &[Gaussian],
            Dropout => &[Dropout],
        }
    }
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseFamily {
    type Err = NoiseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NoiseFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| NoiseError::UnknownFamily(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Low,
    Med,
    High,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Low, Intensity::Med, Intensity::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Intensity::Low => "low",
            Intensity::Med => "med",
            Intensity::High => "high",
        }
    }

    fn idx(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Intensity {
    type Err = NoiseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Intensity::ALL
            .into_iter()
            .find(|i| i.as_str() == s)
            .ok_or_else(|| NoiseError::UnknownIntensity(s.to_string()))
    }
}

/// Per-family parameters. Index by intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub precip_prob: [f64; 3],
    pub precip_mean: [f64; 3],
    pub precip_jitter: [f64; 3],
    pub distance_sigma: [f64; 3],
    pub ambient_bias: [f64; 3],
    pub ambient_sigma: [f64; 3],
    pub spurious_prob: [f64; 3],
    pub gaussian_sigma: [f64; 3],
    pub dropout_prob: [f64; 3],
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            precip_prob: [0.02, 0.10, 0.20],
            precip_mean: [0.5, 0.5, 0.5],
            precip_jitter: [0.01, 0.03, 0.05],
            distance_sigma: [0.01, 0.02, 0.05],
            ambient_bias: [0.02, 0.05, 0.08],
            ambient_sigma: [0.02, 0.05, 0.08],
            spurious_prob: [0.01, 0.05, 0.10],
            gaussian_sigma: [0.01, 0.03, 0.08],
            dropout_prob: [0.05, 0.15, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub intensity: Intensity,
    pub seed: u64,
    #[serde(default)]
    pub params: NoiseParams,
}

impl NoiseSpec {
    pub fn new(family: NoiseFamily, intensity: Intensity, seed: u64) -> Self {
        Self {
            family,
            intensity,
            seed,
            params: NoiseParams::default(),
        }
    }
}

fn perturb(r: f64, family: NoiseFamily, i: usize, p: &NoiseParams, rng: &mut ChaCha8Rng) -> f64 {
    match family {
        NoiseFamily::Precipitation => {
            if rng.random::<f64>() < p.precip_prob[i] {
                let e = Exp::new(1.0 / p.precip_mean[i]).map_or(0.0, |d| d.sample(rng));
                r.min(e)
            } else {
                let d = p.precip_jitter[i];
                let u = if d > 0.0 { rng.random_range(-d..d) } else { 0.0 };
                r * (1.0 + u)
            }
        }
        NoiseFamily::Distance => r * (1.0 + gauss(p.distance_sigma[i], rng)),
        NoiseFamily::Ambient => r + p.ambient_bias[i] + gauss(p.ambient_sigma[i], rng),
        NoiseFamily::Spurious => {
            if rng.random::<f64>() < p.spurious_prob[i] {
                rng.random::<f64>()
            } else {
                r
            }
        }
        NoiseFamily::Gaussian => r + gauss(p.gaussian_sigma[i], rng),
        NoiseFamily::Dropout => {
            if rng.random::<f64>() < p.dropout_prob[i] {
                0.0
            } else {
                r
            }
        }
        NoiseFamily::Composite1 | NoiseFamily::Composite2 => unreachable!("composites are expanded by stages()"),
    }
}

fn gauss(sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).map_or(0.0, |d| d.sample(rng))
}

/// Perturbs every LiDAR reading independently; nothing else changes.
pub fn apply_noise(traj: &Trajectory, spec: &NoiseSpec) -> Trajectory {
    let mut out = traj.clone();
    let base = seed::derive(spec.seed, &traj.id);
    let i = spec.intensity.idx();
    for step in &mut out.steps {
        for (beam, r) in step.obs.lidar.iter_mut().enumerate() {
            let mut rng = seed::rng(seed::derive_ints(base, &[step.t as u64, beam as u64]));
            let mut v = *r;
            for &stage in spec.family.stages() {
                v = perturb(v, stage, i, &spec.params, &mut rng).clamp(0.0, 1.0);
            }
            *r = v;
        }
    }
    out
}

pub fn apply_noise_all(trajs: &[Trajectory], spec: &NoiseSpec) -> Vec<Trajectory> {
    trajs.par_iter().map(|t| apply_noise(t, spec)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplacementReport {
    pub mse: f64,
    pub mae: f64,
    pub mean_displacement: f64,
    pub dtw_distance: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn displacement_metrics(clean: &Trajectory, noisy: &Trajectory) -> Result<DisplacementReport, NoiseError> {
    if clean.len() != noisy.len() {
        return Err(NoiseError::LengthMismatch(format!("{} vs {} steps", clean.len(), noisy.len())));
    }
    if clean.is_empty() {
        return Err(NoiseError::Empty);
    }
    let mut n = 0usize;
    let (mut se, mut ae, mut disp) = (0.0, 0.0, 0.0);
    for (a, b) in clean.steps.iter().zip(&noisy.steps) {
        if a.obs.lidar.len() != b.obs.lidar.len() {
            return Err(NoiseError::LengthMismatch(format!("beam counts at step {}", a.t)));
        }
        for (x, y) in a.obs.lidar.iter().zip(&b.obs.lidar) {
            se += (x - y) * (x - y);
            ae += (x - y).abs();
        }
        n += a.obs.lidar.len();
        disp += euclid(&a.obs.lidar, &b.obs.lidar);
    }
    let xs: Vec<&[f64]> = clean.steps.iter().map(|s| s.obs.lidar.as_slice()).collect();
    let ys: Vec<&[f64]> = noisy.steps.iter().map(|s| s.obs.lidar.as_slice()).collect();
    Ok(DisplacementReport {
        mse: se / n.max(1) as f64,
        mae: ae / n.max(1) as f64,
        mean_displacement: disp / clean.len() as f64,
        dtw_distance: dtw_distance(&xs, &ys)?,
    })
}

/// Dynamic time warping with Euclidean step cost.
pub fn dtw_distance<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<f64, NoiseError> {
    if a.is_empty() || b.is_empty() {
        return Err(NoiseError::Empty);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for ai in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let c = euclid(ai.as_ref(), b[j - 1].as_ref());
            cur[j] = c + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::fixtures;
    use proptest::prelude::*;

    fn varied(id: &str) -> Trajectory {
        let mut t = fixtures::straight(id, 30);
        for s in &mut t.steps {
            for (k, r) in s.obs.lidar.iter_mut().enumerate() {
                *r = 0.2 + 0.15 * k as f64 + 0.01 * s.t as f64;
            }
        }
        t
    }

    #[test]
    fn zero_sigma_gaussian_is_identity() {
        let t = varied("a");
        let mut spec = NoiseSpec::new(NoiseFamily::Gaussian, Intensity::Low, 1);
        spec.params.gaussian_sigma = [0.0; 3];
        assert_eq!(apply_noise(&t, &spec), t);
    }

    #[test]
    fn full_dropout_zeroes_lidar_only() {
        let t = varied("a");
        let mut spec = NoiseSpec::new(NoiseFamily::Dropout, Intensity::High, 1);
        spec.params.dropout_prob = [1.0; 3];
        let n = apply_noise(&t, &spec);
        assert!(n.steps.iter().all(|s| s.obs.lidar.iter().all(|&r| r == 0.0)));
        for (a, b) in t.steps.iter().zip(&n.steps) {
            assert_eq!(a.obs.lane, b.obs.lane);
            assert_eq!(a.obs.side, b.obs.side);
            assert_eq!(a.state, b.state);
            assert_eq!(a.action, b.action);
        }
    }

    #[test]
    fn noise_is_seeded() {
        let t = varied("a");
        let spec = NoiseSpec::new(NoiseFamily::Composite1, Intensity::Med, 9);
        assert_eq!(apply_noise(&t, &spec), apply_noise(&t, &spec));
        let other = NoiseSpec::new(NoiseFamily::Composite1, Intensity::Med, 10);
        assert_ne!(apply_noise(&t, &spec), apply_noise(&t, &other));
    }

    #[test]
    fn parse_names() {
        assert_eq!("composite2".parse::<NoiseFamily>().unwrap(), NoiseFamily::Composite2);
        assert_eq!("med".parse::<Intensity>().unwrap(), Intensity::Med);
        assert!("fog".parse::<NoiseFamily>().is_err());
    }

    #[test]
    fn self_displacement_is_zero() {
        let t = varied("a");
        let r = displacement_metrics(&t, &t).unwrap();
        assert_eq!((r.mse, r.mae, r.mean_displacement, r.dtw_distance), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_offset_closed_form() {
        let mut a = fixtures::straight("a", 10);
        for s in &mut a.steps {
            s.obs.lidar = vec![0.5; 24];
        }
        let mut b = a.clone();
        for s in &mut b.steps {
            s.obs.lidar = vec![0.6; 24];
        }
        let r = displacement_metrics(&a, &b).unwrap();
        assert!((r.mae - 0.1).abs() < 1e-12);
        assert!((r.mse - 0.01).abs() < 1e-12);
        assert!((r.mean_displacement - 0.1 * 24f64.sqrt()).abs() < 1e-12);
        assert!((r.mean_displacement - 0.4899).abs() < 1e-4);
    }

    #[test]
    fn length_mismatch_is_error() {
        let a = fixtures::straight("a", 10);
        let b = fixtures::straight("a", 9);
        assert!(matches!(displacement_metrics(&a, &b), Err(NoiseError::LengthMismatch(_))));
    }

    #[test]
    fn dtw_hand_case() {
        let a = [[0.0], [0.0]];
        let b = [[1.0]];
        assert_eq!(dtw_distance(&a, &b).unwrap(), 2.0);
        let empty: [[f64; 1]; 0] = [];
        assert_eq!(dtw_distance(&empty, &b), Err(NoiseError::Empty));
    }

    proptest! {
        #[test]
        fn readings_stay_in_unit_interval(fam in 0usize..8, int in 0usize..3, seed in any::<u64>()) {
            let spec = NoiseSpec::new(NoiseFamily::ALL[fam], Intensity::ALL[int], seed);
            let n = apply_noise(&varied("p"), &spec);
            prop_assert!(n.steps.iter().all(|s| s.obs.lidar.iter().all(|r| (0.0..=1.0).contains(r))));
        }

        #[test]
        fn dtw_symmetric_nonnegative(
            a in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 2), 1..8),
            b in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 2), 1..8),
        ) {
            let ab = dtw_distance(&a, &b).unwrap();
            let ba = dtw_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
        }
    }
}
