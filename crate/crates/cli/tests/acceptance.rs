//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line to
//! stdout (outside the test harness capture) and then asserts.

use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trapkit::config::RunConfig;
use trapkit::stages::{pipeline, EvaluationOutput};
use trapkit_core::classifier::{gradient_check, ClassifierConfig, SequenceClassifier};
use trapkit_core::evaluation::{confusion_metrics, roc_auc};
use trapkit_core::labeler::{
    label_all, lane_intervals, lateral_acceleration, smoothed_acceleration, LabelerConfig,
};
use trapkit_core::noise::{apply_noise_all, displacement_metrics, dtw_distance, Intensity, NoiseFamily, NoiseSpec};
use trapkit_core::reward::{
    annotate_rewards, features, kendall_tau, pair_gradient_check, preference_prob, rank_by_meta, ranking_accuracy,
    train_reward, trajectory_return, RewardConfig, RewardNet,
};
use trapkit_core::simulator::{generate_dataset, MixSpec, ScenarioConfig, ScheduleKind};
use trapkit_core::trajectory::{AnomalyGroup, Trajectory};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id:>2} {name}: {verdict} ({detail})");
    let _ = out.flush();
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn group_of(kind: ScheduleKind) -> AnomalyGroup {
    match kind {
        ScheduleKind::Zigzag => AnomalyGroup::Zigzag,
        ScheduleKind::SuddenBraking => AnomalyGroup::SuddenBraking,
        ScheduleKind::SuddenTurn => AnomalyGroup::SuddenTurn,
        ScheduleKind::LaneWeaving => AnomalyGroup::LaneWeaving,
        ScheduleKind::Tailgating => AnomalyGroup::Tailgating,
        ScheduleKind::ConstantThrottle => unreachable!("not an anomaly kind"),
    }
}

#[test]
fn criterion_01_labeler_oracle() {
    let start = Instant::now();
    let tmpl = ScenarioConfig::default();
    let cfg = LabelerConfig::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, kind) in ScheduleKind::ANOMALIES.into_iter().enumerate() {
        let base = 7_000_000 + 1_000 * i as u64;
        let mut ts = generate_dataset(base..base + 200, &tmpl, &MixSpec::all(kind)).unwrap();
        label_all(&mut ts, &cfg).unwrap();
        let hits = ts.iter().filter(|t| t.anomaly_labels.has(group_of(kind))).count();
        let recall = hits as f64 / ts.len() as f64;
        pass &= recall >= 0.95;
        parts.push(format!("{} {recall:.3}", kind.as_str()));
    }
    let mut clean = generate_dataset(7_100_000..7_100_200, &tmpl, &MixSpec::clean()).unwrap();
    label_all(&mut clean, &cfg).unwrap();
    let fp = clean.iter().filter(|t| t.anomaly_labels.is_anomalous()).count() as f64 / clean.len() as f64;
    let elapsed = start.elapsed();
    pass &= fp <= 0.05 && elapsed <= Duration::from_secs(120);
    report(
        1,
        "labeler oracle",
        pass,
        &format!("recall {}; clean anomalous rate {fp:.3}; {:.1}s", parts.join(", "), secs(elapsed)),
    );
    assert!(pass);
}

#[test]
fn criterion_02_formula_spot_checks() {
    let speeds: Vec<f64> = (0..40).map(|i| 20.0 - 2.0 * (i as f64 * 0.1)).collect();
    let braking: Vec<f64> = smoothed_acceleration(&speeds, 5, 0.1).into_iter().flatten().collect();
    let braking_ok = !braking.is_empty() && braking.iter().all(|a| (a + 2.0).abs() < 1e-9);

    let lat = lateral_acceleration(&[(1.0, 0.0), (0.0, 1.0), (0.0, 1.0)], &[2.0; 3], 0.1);
    let lat_ok = (lat[1] - 10.0 * PI).abs() < 1e-9;

    let lane = lane_intervals(&[true; 50], 5, 30);
    let lane_ok = lane.len() == 1 && lane[0].len() == 46;

    let p = preference_prob(1.0, 2.0);
    let pref_ok = (p - 0.731059).abs() <= 1e-6;

    // tp=3, fp=1, fn=1, tn=5
    let pred = [true, true, true, true, false, false, false, false, false, false];
    let truth = [true, true, true, false, true, false, false, false, false, false];
    let m = confusion_metrics(&pred, &truth).unwrap();
    let (tp, fp, fn_, tn) = (3.0, 1.0, 1.0, 5.0);
    let oracle = (tp * tn - fp * fn_) / f64::sqrt((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_));
    let mcc_ok = (m.mcc - oracle).abs() <= 1e-4
        && (m.precision - 0.75).abs() < 1e-12
        && (m.recall - 0.75).abs() < 1e-12
        && (m.f1 - 0.75).abs() < 1e-12;

    let pass = braking_ok && lat_ok && lane_ok && pref_ok && mcc_ok;
    report(
        2,
        "formula spot checks",
        pass,
        &format!(
            "braking {:.6}, lateral {:.6} vs 10pi, lane interval {}, preference {p:.7}, \
             mcc {:.5} vs hand value 14/sqrt(4*4*6*6) = {oracle:.5} (the listed 0.5051 uses sqrt(768), an arithmetic slip)",
            braking.first().copied().unwrap_or(f64::NAN),
            lat[1],
            lane.first().map_or(0, |i| i.len()),
            m.mcc
        ),
    );
    assert!(pass);
}

/// A random contiguous window of a simulated trajectory.
fn window(pool: &[Trajectory], rng: &mut ChaCha8Rng, len: usize, id: &str) -> Trajectory {
    let src = loop {
        let s = &pool[rng.random_range(0..pool.len())];
        if s.len() > len {
            break s;
        }
    };
    let start = rng.random_range(0..src.len() - len);
    let mut t = src.clone();
    t.id = id.to_string();
    t.steps = src.steps[start..start + len].to_vec();
    t.wct = None;
    t
}

#[test]
fn criterion_03_gradient_checks() {
    let start = Instant::now();
    let pool = generate_dataset(7_200_000..7_200_010, &ScenarioConfig::default(), &MixSpec::expert_ladder()).unwrap();
    let dim = features(&pool[0]).len() / pool[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut reward_worst = 0.0f64;
    for i in 0..10 {
        let net = RewardNet::new(dim, 100 + i);
        let (la, lb) = (rng.random_range(3..9), rng.random_range(3..9));
        let a = window(&pool, &mut rng, la, "a");
        let b = window(&pool, &mut rng, lb, "b");
        reward_worst = reward_worst.max(pair_gradient_check(&net, &a, &b, 1e-5).unwrap());
    }

    let mut cls_worst = 0.0f64;
    let mut worst_group = "";
    for i in 0..10 {
        let net = RewardNet::new(dim, 200 + i);
        let mut t = window(&pool, &mut rng, 3, "c");
        annotate_rewards(&net, std::slice::from_mut(&mut t)).unwrap();
        let cfg = ClassifierConfig {
            seed: 300 + i,
            ..ClassifierConfig::default()
        };
        let model = SequenceClassifier::new(dim + 3, &cfg);
        for (group, err) in gradient_check(&model, &t, i % 2 == 0, 1e-5, Some(64)).unwrap() {
            if err > cls_worst {
                cls_worst = err;
                worst_group = group;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = reward_worst <= 1e-4 && cls_worst <= 1e-3 && elapsed <= Duration::from_secs(60);
    report(
        3,
        "gradient checks",
        pass,
        &format!(
            "reward max rel err {reward_worst:.2e}, classifier max rel err {cls_worst:.2e} ({worst_group}); {:.1}s",
            secs(elapsed)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_reward_ranking() {
    let start = Instant::now();
    let tmpl = ScenarioConfig::default();
    let mix = MixSpec::expert_ladder();
    let train = generate_dataset(7_300_000..7_300_400, &tmpl, &mix).unwrap();
    let test = generate_dataset(7_400_000..7_400_100, &tmpl, &mix).unwrap();
    let ranked = rank_by_meta(train).unwrap();
    let cfg = RewardConfig {
        seed: 11,
        ..RewardConfig::default()
    };
    let (net, _) = train_reward(&ranked, &cfg).unwrap();
    let returns: Vec<f64> = test.iter().map(|t| trajectory_return(&net, t).unwrap()).collect();
    let eps: Vec<f64> = test.iter().map(|t| t.epsilon().unwrap()).collect();
    let quality: Vec<f64> = eps.iter().map(|e| -e).collect();
    let acc = ranking_accuracy(&returns, &eps);
    let tau = kendall_tau(&returns, &quality);
    let elapsed = start.elapsed();
    let pass = acc >= 0.85 && tau >= 0.8 && elapsed <= Duration::from_secs(300);
    report(
        4,
        "reward ranking",
        pass,
        &format!("pairwise accuracy {acc:.3}, kendall tau {tau:.3}; {:.1}s", secs(elapsed)),
    );
    assert!(pass);
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum cost over every monotone warping path, by exhaustive recursion.
fn dtw_brute(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize) -> f64 {
    let here = euclid(&a[i], &b[j]);
    if i + 1 == a.len() && j + 1 == b.len() {
        return here;
    }
    let mut best = f64::INFINITY;
    if i + 1 < a.len() {
        best = best.min(dtw_brute(a, b, i + 1, j));
    }
    if j + 1 < b.len() {
        best = best.min(dtw_brute(a, b, i, j + 1));
    }
    if i + 1 < a.len() && j + 1 < b.len() {
        best = best.min(dtw_brute(a, b, i + 1, j + 1));
    }
    here + best
}

#[test]
fn criterion_05_dtw_and_auc_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut dtw_ok = 0;
    let mut dtw_worst = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.random_range(1..4);
        let seq = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let n = rng.random_range(1..=6);
        let a = seq(n, &mut rng);
        let m = rng.random_range(1..=6);
        let b = seq(m, &mut rng);
        let dp = dtw_distance(&a, &b).unwrap();
        let brute = dtw_brute(&a, &b, 0, 0);
        dtw_worst = dtw_worst.max((dp - brute).abs());
        if (dp - brute).abs() <= 1e-12 * brute.max(1.0) {
            dtw_ok += 1;
        }
    }

    let mut auc_worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..200);
        let mut truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        truth[0] = true;
        truth[1] = false;
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0).collect();
        let (auc, _) = roc_auc(&scores, &truth).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (si, ti) in scores.iter().zip(&truth) {
            for (sj, tj) in scores.iter().zip(&truth) {
                if *ti && !*tj {
                    den += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        auc_worst = auc_worst.max((auc - num / den).abs());
    }
    let pass = dtw_ok == 1000 && auc_worst <= 1e-9;
    report(
        5,
        "DTW and AUC oracles",
        pass,
        &format!("DTW {dtw_ok}/1000 exact (max diff {dtw_worst:.1e}), AUC max diff vs concordance {auc_worst:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_noise_monotonicity() {
    let clean = generate_dataset(7_500_000..7_500_100, &ScenarioConfig::default(), &MixSpec::expert_ladder()).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for family in NoiseFamily::ALL {
        let means: Vec<f64> = Intensity::ALL
            .iter()
            .map(|&intensity| {
                let noisy = apply_noise_all(&clean, &NoiseSpec::new(family, intensity, 17));
                let total: f64 = clean
                    .iter()
                    .zip(&noisy)
                    .map(|(c, n)| displacement_metrics(c, n).unwrap().mean_displacement)
                    .sum();
                total / clean.len() as f64
            })
            .collect();
        let ok = means[0] < means[1] && means[1] < means[2];
        pass &= ok;
        parts.push(format!("{family} {:.4}<{:.4}<{:.4}", means[0], means[1], means[2]));
    }
    report(6, "noise monotonicity", pass, &parts.join(", "));
    assert!(pass);
}

struct DeskRun {
    out: EvaluationOutput,
    elapsed: Duration,
}

/// One full-size pipeline run shared by the end-to-end criteria.
fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: dir.path().join("desk"),
            ..RunConfig::default()
        };
        assert_eq!(cfg.data.expert_seeds.len(), 2000);
        assert_eq!(cfg.data.test_seeds.len(), 1000);
        let start = Instant::now();
        let out = pipeline(&cfg).unwrap();
        DeskRun {
            out,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_07_end_to_end_desk_run() {
    let run = desk_run();
    let c = &run.out.classifier;
    let base = run.out.baseline.as_ref().expect("baseline enabled");
    let margin = c.f1 - base.test.f1;
    let pass = c.recall >= 0.80 && margin >= 0.10 && run.elapsed <= Duration::from_secs(1800);
    report(
        7,
        "end-to-end desk run",
        pass,
        &format!(
            "recall {:.3}, f1 {:.3} vs baseline {:.3} (margin {margin:.3}), precision {:.3}, auc {:.3}; {:.0}s",
            c.recall,
            c.f1,
            base.test.f1,
            c.precision,
            c.auc,
            secs(run.elapsed)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_lead_time() {
    let run = desk_run();
    let lt = run.out.lead_time.as_ref().expect("lead time enabled");
    let median = lt.median.unwrap_or(f64::NEG_INFINITY);
    let pass = lt.cases > 0 && median > 0.0 && lt.preceding_fraction >= 0.70;
    report(
        8,
        "lead time",
        pass,
        &format!(
            "{} wct cases, {} detected, median lead {median:.1} steps, preceding fraction {:.3}",
            lt.cases, lt.detected, lt.preceding_fraction
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_noise_robustness() {
    let run = desk_run();
    let sweep = &run.out.noise_sweep;
    let worst = sweep
        .iter()
        .max_by(|a, b| a.f1_drop.total_cmp(&b.f1_drop))
        .expect("noise sweep enabled");
    let pass = sweep.len() == 24 && sweep.iter().all(|r| r.f1_drop <= 0.15);
    report(
        9,
        "noise robustness",
        pass,
        &format!(
            "{} conditions, clean f1 {:.3}, worst drop {:.3} ({} {}), min f1 {:.3}",
            sweep.len(),
            run.out.classifier.f1,
            worst.f1_drop,
            worst.family,
            worst.intensity,
            sweep.iter().map(|r| r.f1).fold(f64::INFINITY, f64::min)
        ),
    );
    assert!(pass);
}

fn quickstart_metrics(dir: PathBuf) -> Vec<u8> {
    let cfg = RunConfig {
        out_dir: dir.clone(),
        ..RunConfig::quickstart()
    };
    pipeline(&cfg).unwrap();
    std::fs::read(dir.join("metrics.json")).unwrap()
}

#[test]
fn criterion_10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = quickstart_metrics(dir.path().join("a"));
    let b = quickstart_metrics(dir.path().join("b"));
    let pass = !a.is_empty() && a == b;
    let cfg = RunConfig::quickstart();
    report(
        10,
        "determinism",
        pass,
        &format!(
            "two quickstart pipelines (expert {}, test {}) gave {} metrics.json",
            cfg.data.expert_seeds,
            cfg.data.test_seeds,
            if pass { "byte-identical" } else { "different" }
        ),
    );
    assert!(pass);
}
