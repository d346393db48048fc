//! Pipeline stages. Every stage reads its inputs from files and writes its
//! outputs to files, so a chained run matches stages run one by one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trapkit_core::classifier::{
    encode_and_classify, prefix_scores, train_classifier, trim_for_eval, ClassifierConfig, SequenceClassifier,
};
use trapkit_core::dataset::{build_dataset, SamplerConfig, WctDataset};
use trapkit_core::evaluation::{
    self, baseline_reward_threshold, confusion_metrics, lead_time, summarize_lead_times, ConfusionMetrics,
    LeadTimeSummary, MetricsReport,
};
use trapkit_core::labeler::{label_all, LabelerConfig};
use trapkit_core::noise::{apply_noise_all, displacement_metrics, Intensity, NoiseFamily, NoiseSpec};
use trapkit_core::reward::{annotate_rewards, rank_by_meta, train_reward, RewardConfig, RewardNet};
use trapkit_core::simulator::{generate_dataset, MixSpec, ScenarioConfig};
use trapkit_core::trajectory::{read_trajectories, to_canonical_json, write_trajectories, Trajectory};

use crate::config::{EvaluationConfig, RunConfig, SeedRange, TruthRule};

fn read(path: &Path) -> Result<Vec<Trajectory>> {
    read_trajectories(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_trajectories(path, trajs).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Canonical pretty-free JSON with 9-digit floats and a trailing newline.
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = to_canonical_json(value)?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load_reward(path: &Path) -> Result<RewardNet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RewardNet::from_json(&text).with_context(|| format!("parsing reward net {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<SequenceClassifier> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SequenceClassifier::from_json(&text).with_context(|| format!("parsing classifier {}", path.display()))
}

pub fn simulate(seeds: SeedRange, scenario: &ScenarioConfig, mix: &MixSpec, out: &Path) -> Result<String> {
    let trajs = generate_dataset(seeds.range(), scenario, mix)?;
    write(out, &trajs)?;
    let wct = trajs.iter().filter(|t| t.wct_label == 1).count();
    Ok(format!("simulate: {} trajectories ({wct} wct) -> {}", trajs.len(), out.display()))
}

pub fn label(input: &Path, out: &Path, cfg: &LabelerConfig) -> Result<String> {
    let mut trajs = read(input)?;
    label_all(&mut trajs, cfg)?;
    write(out, &trajs)?;
    let anomalous = trajs.iter().filter(|t| t.anomaly_labels.is_anomalous()).count();
    Ok(format!("label: {anomalous}/{} anomalous -> {}", trajs.len(), out.display()))
}

pub fn noise(input: &Path, out: &Path, spec: &NoiseSpec, report: Option<&Path>) -> Result<String> {
    let clean = read(input)?;
    let noisy = apply_noise_all(&clean, spec);
    write(out, &noisy)?;
    let reports = clean
        .par_iter()
        .zip(&noisy)
        .map(|(a, b)| displacement_metrics(a, b))
        .collect::<Result<Vec<_>, _>>()?;
    let n = reports.len().max(1) as f64;
    let mean_disp = reports.iter().map(|r| r.mean_displacement).sum::<f64>() / n;
    if let Some(path) = report {
        let mut csv = String::from("id,mse,mae,mean_displacement,dtw_distance\n");
        for (t, r) in clean.iter().zip(&reports) {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                t.id, r.mse, r.mae, r.mean_displacement, r.dtw_distance
            ));
        }
        write_text(path, &csv)?;
    }
    Ok(format!(
        "noise: {} {} on {} trajectories, mean displacement {mean_disp:.4} -> {}",
        spec.family,
        spec.intensity,
        noisy.len(),
        out.display()
    ))
}

/// Rollouts used for ranking: optionally only those without a scripted anomaly.
pub fn reward_demos(trajs: Vec<Trajectory>, clean_only: bool) -> Vec<Trajectory> {
    if !clean_only {
        return trajs;
    }
    trajs
        .into_iter()
        .filter(|t| t.meta_str("anomaly").is_none_or(|a| a == "none"))
        .collect()
}

pub fn train_reward_stage(demos: &Path, out: &Path, cfg: &RewardConfig, clean_only: bool) -> Result<String> {
    let trajs = reward_demos(read(demos)?, clean_only);
    let n = trajs.len();
    let ranked = rank_by_meta(trajs)?;
    let (net, report) = train_reward(&ranked, cfg)?;
    write_text(out, &net.to_json()?)?;
    let last = report.losses.iter().rev().take(50).sum::<f64>() / report.losses.len().clamp(1, 50) as f64;
    Ok(format!(
        "train-reward: {n} rollouts, {} levels, final loss {last:.4} -> {}",
        ranked.distinct_levels(),
        out.display()
    ))
}

pub fn annotate(reward: &Path, input: &Path, out: &Path) -> Result<String> {
    let net = load_reward(reward)?;
    let mut trajs = read(input)?;
    annotate_rewards(&net, &mut trajs)?;
    write(out, &trajs)?;
    Ok(format!("annotate: {} trajectories -> {}", trajs.len(), out.display()))
}

pub fn build_dataset_stage(input: &Path, out: &Path, cfg: &SamplerConfig) -> Result<String> {
    let trajs = read(input)?;
    let data = build_dataset(&trajs, cfg)?;
    write(out, &data.items)?;
    Ok(format!(
        "build-dataset: {} items from {} sources ({} positive) -> {}",
        data.items.len(),
        data.stats.sources,
        data.stats.positives,
        out.display()
    ))
}

fn ensure_annotated(trajs: &mut [Trajectory], reward: Option<&Path>) -> Result<()> {
    match reward {
        Some(path) => annotate_rewards(&load_reward(path)?, trajs)?,
        None => {
            if let Some(t) = trajs.iter().find(|t| !t.is_annotated()) {
                bail!("trajectory {} has no rewards; pass --reward", t.id);
            }
        }
    }
    Ok(())
}

pub fn train_classifier_stage(
    data: &Path,
    reward: Option<&Path>,
    out: &Path,
    cfg: &ClassifierConfig,
    val_fraction: f64,
) -> Result<String> {
    let mut items = read(data)?;
    if reward.is_some() || items.iter().any(|t| !t.is_annotated()) {
        ensure_annotated(&mut items, reward)?;
    }
    let stats = Default::default();
    let dataset = WctDataset { items, stats };
    let (train, val) = dataset.split(val_fraction, cfg.seed);
    let (model, report) = train_classifier(&train, &val, cfg)?;
    write_text(out, &model.to_json()?)?;
    write_json(&out.with_extension("report.json"), &report)?;
    Ok(format!(
        "train-classifier: {} train / {} val items, best epoch {} val f1 {:.4} (majority {:.4}) -> {}",
        train.len(),
        val.len(),
        report.best_epoch,
        report.best_val_f1,
        report.majority_f1,
        out.display()
    ))
}

fn trimmed(trajs: &[Trajectory], m: usize) -> Result<Vec<Trajectory>> {
    trajs
        .iter()
        .map(|t| trim_for_eval(t, m).map_err(anyhow::Error::from))
        .collect()
}

fn classify_all(model: &SequenceClassifier, trajs: &[Trajectory]) -> Result<Vec<f64>> {
    trajs
        .par_iter()
        .map(|t| encode_and_classify(model, t).map_err(anyhow::Error::from))
        .collect()
}

pub fn score(model: &Path, reward: Option<&Path>, input: &Path, out: &Path, trim: usize, threshold: f64) -> Result<String> {
    let model = load_model(model)?;
    let mut trajs = read(input)?;
    ensure_annotated(&mut trajs, reward)?;
    let scores = classify_all(&model, &trimmed(&trajs, trim)?)?;
    let mut csv = String::from("id,score,predicted\n");
    for (t, s) in trajs.iter().zip(&scores) {
        csv.push_str(&format!("{},{},{}\n", t.id, s, u8::from(*s > threshold)));
    }
    write_text(out, &csv)?;
    let flagged = scores.iter().filter(|&&s| s > threshold).count();
    Ok(format!("score: {flagged}/{} flagged -> {}", scores.len(), out.display()))
}

fn truth(t: &Trajectory, rule: TruthRule) -> bool {
    match rule {
        TruthRule::AnomalousOrWct => evaluation::truth_of(t),
        TruthRule::WctOnly => t.wct_label == 1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub threshold: f64,
    pub train_f1: f64,
    pub degenerate: bool,
    pub test: ConfusionMetrics,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: NoiseFamily,
    pub intensity: Intensity,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub auc: f64,
    pub f1_drop: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub test_count: usize,
    pub positives: usize,
    pub classifier: MetricsReport,
    pub baseline: Option<BaselineSummary>,
    pub f1_margin: Option<f64>,
    pub lead_time: Option<LeadTimeSummary>,
    pub noise_sweep: Vec<SweepRow>,
}

pub struct EvalInputs<'a> {
    pub model: &'a Path,
    pub reward: &'a Path,
    /// Labeled test trajectories without rewards.
    pub test: &'a Path,
    /// Labeled and reward-annotated training trajectories for the baseline fit.
    pub train: Option<&'a Path>,
}

fn f1_under(
    model: &SequenceClassifier,
    net: &RewardNet,
    raw: &[Trajectory],
    truth_v: &[bool],
    cfg: &EvaluationConfig,
) -> Result<(ConfusionMetrics, f64)> {
    let mut ts = raw.to_vec();
    annotate_rewards(net, &mut ts)?;
    let scores = classify_all(model, &trimmed(&ts, cfg.trim)?)?;
    let pred: Vec<bool> = scores.iter().map(|&s| s > cfg.threshold).collect();
    let auc = evaluation::roc_auc(&scores, truth_v).map(|r| r.0).unwrap_or(0.5);
    Ok((confusion_metrics(&pred, truth_v)?, auc))
}

pub fn evaluate(inputs: &EvalInputs, cfg: &RunConfig, out_dir: &Path) -> Result<EvaluationOutput> {
    let ev = &cfg.evaluation;
    let model = load_model(inputs.model)?;
    let net = load_reward(inputs.reward)?;
    let raw = read(inputs.test)?;
    ensure!(!raw.is_empty(), "empty test set");
    if let Some(t) = raw.iter().find(|t| !t.anomaly_labels.is_labeled()) {
        bail!("test trajectory {} is unlabeled; run `label` first", t.id);
    }
    let mut test = raw.clone();
    annotate_rewards(&net, &mut test)?;
    let scored = trimmed(&test, ev.trim)?;
    let scores = classify_all(&model, &scored)?;
    let truth_v: Vec<bool> = test.iter().map(|t| truth(t, ev.truth)).collect();
    let ids: Vec<String> = test.iter().map(|t| t.id.clone()).collect();
    let labels: Vec<_> = test.iter().map(|t| t.anomaly_labels.clone()).collect();
    let mut report = evaluation::report(&ids, &scores, &truth_v, &labels, ev.threshold)?;

    let lead = if ev.lead_time {
        let wct: Vec<&Trajectory> = test.iter().filter(|t| t.wct.is_some()).collect();
        let leads = wct
            .iter()
            .map(|t| {
                let p = prefix_scores(&model, t)?;
                Ok(lead_time(&p, t.wct.map_or(t.len() - 1, |w| w.step), ev.threshold))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(summarize_lead_times(&leads))
    } else {
        None
    };
    report.lead_time = lead.clone();

    let baseline = match (ev.baseline, inputs.train) {
        (true, Some(train_path)) => {
            let train = read(train_path)?;
            let train_truth: Vec<bool> = train.iter().map(|t| truth(t, ev.truth)).collect();
            let res = baseline_reward_threshold(&train, &train_truth, &scored)?;
            let neg: Vec<f64> = res.test_scores.iter().map(|s| -s).collect();
            Some(BaselineSummary {
                threshold: res.fit.threshold,
                train_f1: res.fit.train_f1,
                degenerate: res.fit.degenerate,
                test: confusion_metrics(&res.predictions, &truth_v)?,
                auc: evaluation::roc_auc(&neg, &truth_v).map(|r| r.0).unwrap_or(0.5),
            })
        }
        _ => None,
    };

    let mut sweep = Vec::new();
    if ev.noise_sweep {
        for family in NoiseFamily::ALL {
            for intensity in Intensity::ALL {
                let spec = NoiseSpec {
                    params: cfg.noise.params.clone(),
                    ..NoiseSpec::new(family, intensity, cfg.noise_seed())
                };
                let noisy = apply_noise_all(&raw, &spec);
                let (m, auc) = f1_under(&model, &net, &noisy, &truth_v, ev)?;
                log::info!("noise {family} {intensity}: f1 {:.4}", m.f1);
                sweep.push(SweepRow {
                    family,
                    intensity,
                    f1: m.f1,
                    recall: m.recall,
                    precision: m.precision,
                    auc,
                    f1_drop: report.f1 - m.f1,
                });
            }
        }
    }

    let out = EvaluationOutput {
        test_count: test.len(),
        positives: truth_v.iter().filter(|&&t| t).count(),
        f1_margin: baseline.as_ref().map(|b| report.f1 - b.test.f1),
        baseline,
        lead_time: lead,
        noise_sweep: sweep,
        classifier: report,
    };
    write_reports(&out, &test, &scores, &truth_v, ev.threshold, out_dir)?;
    Ok(out)
}

fn write_reports(
    out: &EvaluationOutput,
    test: &[Trajectory],
    scores: &[f64],
    truth_v: &[bool],
    threshold: f64,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("metrics.json"), out)?;

    let mut roc = String::from("fpr,tpr,threshold\n");
    for p in &out.classifier.roc_points {
        roc.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    write_text(&dir.join("roc.csv"), &roc)?;

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in test {
        for (g, ivs) in &t.anomaly_labels.groups {
            if !ivs.is_empty() {
                *counts.entry(g.to_string()).or_default() += 1;
            }
        }
    }
    let mut groups = String::from("group,count,recall\n");
    for (g, r) in &out.classifier.per_group_recall {
        groups.push_str(&format!("{g},{},{r}\n", counts.get(g.as_str()).copied().unwrap_or(0)));
    }
    write_text(&dir.join("groups.csv"), &groups)?;

    let mut sc = String::from("id,score,predicted,truth\n");
    for ((t, s), y) in test.iter().zip(scores).zip(truth_v) {
        sc.push_str(&format!("{},{},{},{}\n", t.id, s, u8::from(*s > threshold), u8::from(*y)));
    }
    write_text(&dir.join("scores.csv"), &sc)?;

    if !out.noise_sweep.is_empty() {
        let mut csv = String::from("family,intensity,f1,recall,precision,auc,f1_drop\n");
        for r in &out.noise_sweep {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.family, r.intensity, r.f1, r.recall, r.precision, r.auc, r.f1_drop
            ));
        }
        write_text(&dir.join("noise_sweep.csv"), &csv)?;
    }
    Ok(())
}

pub fn evaluation_summary(out: &EvaluationOutput) -> String {
    let c = &out.classifier;
    let mut s = format!(
        "evaluate: {} test ({} positive) f1 {:.4} recall {:.4} precision {:.4} auc {:.4} mcc {:.4}",
        out.test_count, out.positives, c.f1, c.recall, c.precision, c.auc, c.mcc
    );
    if let Some(b) = &out.baseline {
        s.push_str(&format!(" | baseline f1 {:.4}", b.test.f1));
    }
    if let Some(l) = &out.lead_time {
        s.push_str(&format!(
            " | lead median {:?} preceding {:.3}",
            l.median, l.preceding_fraction
        ));
    }
    if let Some(worst) = out.noise_sweep.iter().map(|r| r.f1_drop).reduce(f64::max) {
        s.push_str(&format!(" | worst noise drop {worst:.4}"));
    }
    s
}

/// File layout of a pipeline run.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Runs every stage in order, each through its files.
pub fn pipeline(cfg: &RunConfig) -> Result<EvaluationOutput> {
    cfg.validate()?;
    let p = RunPaths::new(&cfg.out_dir);
    fs::create_dir_all(&p.dir)?;
    write_text(&p.file("config.json"), &serde_json::to_string_pretty(cfg)?)?;
    let mut log_lines = Vec::new();
    let mut say = |s: String| {
        log::info!("{s}");
        log_lines.push(s);
    };

    say(simulate(cfg.data.expert_seeds, &cfg.scenario, &cfg.data.expert_mix, &p.file("expert.jsonl"))?);
    say(simulate(cfg.data.test_seeds, &cfg.scenario, &cfg.data.test_mix, &p.file("test.jsonl"))?);
    say(label(&p.file("expert.jsonl"), &p.file("expert.labeled.jsonl"), &cfg.labeler)?);
    say(label(&p.file("test.jsonl"), &p.file("test.labeled.jsonl"), &cfg.labeler)?);
    let test_input = match cfg.noise.family {
        Some(family) => {
            let spec = NoiseSpec {
                params: cfg.noise.params.clone(),
                ..NoiseSpec::new(family, cfg.noise.intensity, cfg.noise_seed())
            };
            say(noise(
                &p.file("test.labeled.jsonl"),
                &p.file("test.noisy.jsonl"),
                &spec,
                Some(&p.file("noise.csv")),
            )?);
            p.file("test.noisy.jsonl")
        }
        None => p.file("test.labeled.jsonl"),
    };
    say(train_reward_stage(
        &p.file("expert.jsonl"),
        &p.file("reward.json"),
        &cfg.reward_config(),
        cfg.data.reward_clean_only,
    )?);
    say(annotate(
        &p.file("reward.json"),
        &p.file("expert.labeled.jsonl"),
        &p.file("expert.annotated.jsonl"),
    )?);
    say(build_dataset_stage(
        &p.file("expert.annotated.jsonl"),
        &p.file("dataset.jsonl"),
        &cfg.sampler_config(),
    )?);
    say(train_classifier_stage(
        &p.file("dataset.jsonl"),
        None,
        &p.file("model.json"),
        &cfg.classifier_config(),
        cfg.sampler.val_fraction,
    )?);
    let inputs = EvalInputs {
        model: &p.file("model.json"),
        reward: &p.file("reward.json"),
        test: &test_input,
        train: Some(&p.file("expert.annotated.jsonl")),
    };
    let out = evaluate(&inputs, cfg, &p.dir)?;
    say(evaluation_summary(&out));
    let mut f = fs::File::create(p.file("summary.txt"))?;
    for l in &log_lines {
        writeln!(f, "{l}")?;
    }
    Ok(out)
}
