//! Worst-case-terminus sequence classifier.
//!
//! Each timestep `(observation, action, reward)` is projected to a token.
//! Tokens get sinusoidal position encodings and pass through one pre-norm
//! self-attention block with a GELU feed-forward layer. The mean token feeds
//! a single logit.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::confusion_metrics;
use crate::nn::{self, gemm, Adam, AdamConfig, Dense, LayerNorm, LnCache};
use crate::seed;
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("trajectory {0} has no reward annotation")]
    NotAnnotated(String),
    #[error("trajectory {0} is empty")]
    Empty(String),
    #[error("step has {got} features, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("training data contains a single class")]
    SingleClass,
    #[error("cannot trim {m} steps from a trajectory of length {len}")]
    TooShort { len: usize, m: usize },
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub proj_hidden: usize,
    pub token_cap: usize,
    pub positions: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 2,
            ff_width: 128,
            proj_hidden: 128,
            token_cap: 128,
            positions: true,
            epochs: 10,
            batch: 16,
            lr: 1e-3,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::InvalidConfig(m.into()));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even");
        }
        if self.token_cap == 0 || self.batch == 0 || self.ff_width == 0 || self.proj_hidden == 0 {
            return bad("sizes must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad("threshold must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceClassifier {
    pub input_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub token_cap: usize,
    pub positions: bool,
    pub seed: u64,
    pub proj_hidden: Dense,
    pub proj_out: Dense,
    pub ln1: LayerNorm,
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub ln2: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
    pub head: Dense,
}

pub const PARAM_GROUPS: [&str; 11] = [
    "proj_hidden", "proj_out", "ln1", "wq", "wk", "wv", "wo", "ln2", "ff1", "ff2", "head",
];

/// Everything the backward pass needs from one forward pass.
struct Tape {
    rows: usize,
    x: Vec<f64>,
    a1: Vec<f64>,
    ln1: LnCache,
    n1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<Vec<f64>>,
    o: Vec<f64>,
    ln2: LnCache,
    n2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    pooled: Vec<f64>,
    logit: f64,
}

fn head_cols(m: &[f64], rows: usize, d: usize, start: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&m[r * d + start..r * d + start + width]);
    }
    out
}

fn put_cols(dst: &mut [f64], src: &[f64], rows: usize, d: usize, start: usize, width: usize) {
    for r in 0..rows {
        dst[r * d + start..r * d + start + width].copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Sinusoidal position encoding for `rows` positions of width `d`.
pub fn position_encoding(rows: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; rows * d];
    for pos in 0..rows {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = angle.sin();
            pe[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    pe
}

/// Step indices kept when a sequence exceeds `cap`: every `ceil(len / cap)`-th
/// step, aligned so that the last step is always kept.
pub fn token_indices(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    let stride = len.div_ceil(cap);
    let count = len.div_ceil(stride);
    (0..count).map(|i| len - 1 - (count - 1 - i) * stride).collect()
}

impl SequenceClassifier {
    pub fn new(input_dim: usize, cfg: &ClassifierConfig) -> Self {
        let mut rng = seed::rng(seed::derive(cfg.seed, "classifier-init"));
        let d = cfg.d_model;
        Self {
            input_dim,
            d_model: d,
            heads: cfg.heads,
            token_cap: cfg.token_cap,
            positions: cfg.positions,
            seed: cfg.seed,
            proj_hidden: Dense::glorot(input_dim, cfg.proj_hidden, &mut rng),
            proj_out: Dense::glorot(cfg.proj_hidden, d, &mut rng),
            ln1: LayerNorm::new(d),
            wq: Dense::glorot(d, d, &mut rng),
            wk: Dense::glorot(d, d, &mut rng),
            wv: Dense::glorot(d, d, &mut rng),
            wo: Dense::glorot(d, d, &mut rng),
            ln2: LayerNorm::new(d),
            ff1: Dense::glorot(d, cfg.ff_width, &mut rng),
            ff2: Dense::glorot(cfg.ff_width, d, &mut rng),
            head: Dense::glorot(d, 1, &mut rng),
        }
    }

    fn zero_grad(&self) -> Self {
        let d = self.d_model;
        Self {
            proj_hidden: self.proj_hidden.zero_like(),
            proj_out: self.proj_out.zero_like(),
            ln1: LayerNorm::zeros(d),
            wq: self.wq.zero_like(),
            wk: self.wk.zero_like(),
            wv: self.wv.zero_like(),
            wo: self.wo.zero_like(),
            ln2: LayerNorm::zeros(d),
            ff1: self.ff1.zero_like(),
            ff2: self.ff2.zero_like(),
            head: self.head.zero_like(),
            input_dim: self.input_dim,
            d_model: d,
            heads: self.heads,
            token_cap: self.token_cap,
            positions: self.positions,
            seed: self.seed,
        }
    }

    /// Parameter tensors grouped as in [`PARAM_GROUPS`].
    pub fn groups(&self) -> Vec<Vec<&Vec<f64>>> {
        fn dense(l: &Dense) -> Vec<&Vec<f64>> {
            vec![&l.w, &l.b]
        }
        vec![
            dense(&self.proj_hidden),
            dense(&self.proj_out),
            vec![&self.ln1.gain, &self.ln1.bias],
            dense(&self.wq),
            dense(&self.wk),
            dense(&self.wv),
            dense(&self.wo),
            vec![&self.ln2.gain, &self.ln2.bias],
            dense(&self.ff1),
            dense(&self.ff2),
            dense(&self.head),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.proj_hidden.w,
            &mut self.proj_hidden.b,
            &mut self.proj_out.w,
            &mut self.proj_out.b,
            &mut self.ln1.gain,
            &mut self.ln1.bias,
            &mut self.wq.w,
            &mut self.wq.b,
            &mut self.wk.w,
            &mut self.wk.b,
            &mut self.wv.w,
            &mut self.wv.b,
            &mut self.wo.w,
            &mut self.wo.b,
            &mut self.ln2.gain,
            &mut self.ln2.bias,
            &mut self.ff1.w,
            &mut self.ff1.b,
            &mut self.ff2.w,
            &mut self.ff2.b,
            &mut self.head.w,
            &mut self.head.b,
        ]
    }

    fn tensors(&self) -> Vec<&Vec<f64>> {
        self.groups().into_iter().flatten().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Input rows `[obs ‖ steer, accel ‖ reward]` for the given steps.
    fn rows_for(&self, traj: &Trajectory, idx: &[usize]) -> Result<Vec<f64>, ClassifierError> {
        if traj.is_empty() {
            return Err(ClassifierError::Empty(traj.id.clone()));
        }
        let mut x = Vec::with_capacity(idx.len() * self.input_dim);
        for &i in idx {
            let s = &traj.steps[i];
            let r = s.reward.ok_or_else(|| ClassifierError::NotAnnotated(traj.id.clone()))?;
            let got = s.obs.flat_len() + 3;
            if got != self.input_dim {
                return Err(ClassifierError::DimMismatch {
                    expected: self.input_dim,
                    got,
                });
            }
            s.obs.flatten_into(&mut x);
            x.extend_from_slice(&[s.action.steer, s.action.accel, r]);
        }
        Ok(x)
    }

    /// Input rows of the kept tokens and their count.
    pub fn inputs(&self, traj: &Trajectory) -> Result<(Vec<f64>, usize), ClassifierError> {
        let idx = token_indices(traj.len(), self.token_cap);
        Ok((self.rows_for(traj, &idx)?, idx.len()))
    }

    /// Token embeddings before position encoding.
    pub fn project(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut a1 = self.proj_hidden.forward(x, rows);
        nn::tanh_inplace(&mut a1);
        self.proj_out.forward(&a1, rows)
    }

    fn forward(&self, x: Vec<f64>, rows: usize) -> Tape {
        let d = self.d_model;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut a1 = self.proj_hidden.forward(&x, rows);
        nn::tanh_inplace(&mut a1);
        let mut x0 = self.proj_out.forward(&a1, rows);
        if self.positions {
            add_into(&mut x0, &position_encoding(rows, d));
        }

        let (n1, ln1) = self.ln1.forward(&x0, rows);
        let q = self.wq.forward(&n1, rows);
        let k = self.wk.forward(&n1, rows);
        let v = self.wv.forward(&n1, rows);
        let mut o = vec![0.0; rows * d];
        let mut att = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = head_cols(&q, rows, d, h * dh, dh);
            let kh = head_cols(&k, rows, d, h * dh, dh);
            let vh = head_cols(&v, rows, d, h * dh, dh);
            let mut s = vec![0.0; rows * rows];
            gemm(rows, dh, rows, scale, &qh, false, &kh, true, 0.0, &mut s);
            for r in 0..rows {
                let row = &mut s[r * rows..(r + 1) * rows];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    z += *e;
                }
                row.iter_mut().for_each(|e| *e /= z);
            }
            let mut oh = vec![0.0; rows * dh];
            gemm(rows, rows, dh, 1.0, &s, false, &vh, false, 0.0, &mut oh);
            put_cols(&mut o, &oh, rows, d, h * dh, dh);
            att.push(s);
        }
        let mut x1 = self.wo.forward(&o, rows);
        add_into(&mut x1, &x0);

        let (n2, ln2) = self.ln2.forward(&x1, rows);
        let u = self.ff1.forward(&n2, rows);
        let g: Vec<f64> = u.iter().map(|&z| nn::gelu(z)).collect();
        let mut x2 = self.ff2.forward(&g, rows);
        add_into(&mut x2, &x1);

        let mut pooled = vec![0.0; d];
        for r in 0..rows {
            add_into(&mut pooled, &x2[r * d..(r + 1) * d]);
        }
        pooled.iter_mut().for_each(|p| *p /= rows as f64);
        let logit = self.head.forward(&pooled, 1)[0];
        Tape {
            rows,
            x,
            a1,
            ln1,
            n1,
            q,
            k,
            v,
            att,
            o,
            ln2,
            n2,
            u,
            g,
            pooled,
            logit,
        }
    }

    /// Accumulates `d_logit * d(logit)/d(params)` into `grad`.
    fn backward(&self, t: &Tape, d_logit: f64, grad: &mut Self) {
        let d = self.d_model;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = t.rows;

        let d_pooled = self.head.backward(&t.pooled, &[d_logit], 1, &mut grad.head);
        let mut dx2 = vec![0.0; rows * d];
        for r in 0..rows {
            for c in 0..d {
                dx2[r * d + c] = d_pooled[c] / rows as f64;
            }
        }

        // feed-forward branch
        let dg = self.ff2.backward(&t.g, &dx2, rows, &mut grad.ff2);
        let du: Vec<f64> = dg.iter().zip(&t.u).map(|(g, &z)| g * nn::gelu_grad(z)).collect();
        let dn2 = self.ff1.backward(&t.n2, &du, rows, &mut grad.ff1);
        let mut dx1 = self.ln2.backward(&t.ln2, &dn2, &mut grad.ln2);
        add_into(&mut dx1, &dx2);

        // attention branch
        let d_o = self.wo.backward(&t.o, &dx1, rows, &mut grad.wo);
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        for h in 0..self.heads {
            let a = &t.att[h];
            let qh = head_cols(&t.q, rows, d, h * dh, dh);
            let kh = head_cols(&t.k, rows, d, h * dh, dh);
            let vh = head_cols(&t.v, rows, d, h * dh, dh);
            let doh = head_cols(&d_o, rows, d, h * dh, dh);
            let mut da = vec![0.0; rows * rows];
            gemm(rows, dh, rows, 1.0, &doh, false, &vh, true, 0.0, &mut da);
            let mut dvh = vec![0.0; rows * dh];
            gemm(rows, rows, dh, 1.0, a, true, &doh, false, 0.0, &mut dvh);
            // softmax backward, row by row
            let mut ds = da;
            for r in 0..rows {
                let ar = &a[r * rows..(r + 1) * rows];
                let dr = &mut ds[r * rows..(r + 1) * rows];
                let dot: f64 = ar.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
                for (e, &p) in dr.iter_mut().zip(ar) {
                    *e = p * (*e - dot);
                }
            }
            let mut dqh = vec![0.0; rows * dh];
            gemm(rows, rows, dh, scale, &ds, false, &kh, false, 0.0, &mut dqh);
            let mut dkh = vec![0.0; rows * dh];
            gemm(rows, rows, dh, scale, &ds, true, &qh, false, 0.0, &mut dkh);
            put_cols(&mut dq, &dqh, rows, d, h * dh, dh);
            put_cols(&mut dk, &dkh, rows, d, h * dh, dh);
            put_cols(&mut dv, &dvh, rows, d, h * dh, dh);
        }
        let mut dn1 = self.wq.backward(&t.n1, &dq, rows, &mut grad.wq);
        add_into(&mut dn1, &self.wk.backward(&t.n1, &dk, rows, &mut grad.wk));
        add_into(&mut dn1, &self.wv.backward(&t.n1, &dv, rows, &mut grad.wv));
        let mut dx0 = self.ln1.backward(&t.ln1, &dn1, &mut grad.ln1);
        add_into(&mut dx0, &dx1);

        // projection
        let da1 = self.proj_out.backward(&t.a1, &dx0, rows, &mut grad.proj_out);
        let dz1 = nn::tanh_backward(&t.a1, &da1);
        self.proj_hidden.backward(&t.x, &dz1, rows, &mut grad.proj_hidden);
    }

    /// Logit for raw input rows.
    pub fn logit_of(&self, x: Vec<f64>, rows: usize) -> f64 {
        self.forward(x, rows).logit
    }

    pub fn logit(&self, traj: &Trajectory) -> Result<f64, ClassifierError> {
        let (x, rows) = self.inputs(traj)?;
        Ok(self.logit_of(x, rows))
    }

    /// Binary cross-entropy with logits and its parameter gradient.
    fn loss_grad(&self, x: Vec<f64>, rows: usize, label: bool) -> (f64, Self) {
        let tape = self.forward(x, rows);
        let y = if label { 1.0 } else { 0.0 };
        let loss = nn::softplus(tape.logit) - y * tape.logit;
        let mut grad = self.zero_grad();
        self.backward(&tape, nn::sigmoid(tape.logit) - y, &mut grad);
        (loss, grad)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// WCT probability of the whole trajectory.
pub fn encode_and_classify(model: &SequenceClassifier, traj: &Trajectory) -> Result<f64, ClassifierError> {
    Ok(nn::sigmoid(model.logit(traj)?))
}

/// Probabilities of every prefix of length `2..=len`.
pub fn prefix_scores(model: &SequenceClassifier, traj: &Trajectory) -> Result<Vec<f64>, ClassifierError> {
    if traj.len() < 2 {
        return Err(ClassifierError::TooShort { len: traj.len(), m: 1 });
    }
    let full = model.rows_for(traj, &(0..traj.len()).collect::<Vec<_>>())?;
    let w = model.input_dim;
    Ok((2..=traj.len())
        .into_par_iter()
        .map(|k| {
            let idx = token_indices(k, model.token_cap);
            let mut x = Vec::with_capacity(idx.len() * w);
            for &i in &idx {
                x.extend_from_slice(&full[i * w..(i + 1) * w]);
            }
            nn::sigmoid(model.logit_of(x, idx.len()))
        })
        .collect())
}

/// Drops the last `m` steps; the WCT record and provenance are kept.
pub fn trim_for_eval(traj: &Trajectory, m: usize) -> Result<Trajectory, ClassifierError> {
    if traj.len() <= m {
        return Err(ClassifierError::TooShort { len: traj.len(), m });
    }
    let mut t = traj.prefix(traj.len() - m, traj.id.clone());
    t.src = traj.src.clone();
    t.prefix_len = traj.prefix_len;
    Ok(t)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    pub epoch_loss: Vec<f64>,
    pub val_f1: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// F1 of always predicting the validation majority class.
    pub majority_f1: f64,
}

fn f1_at(model: &SequenceClassifier, items: &[Trajectory], threshold: f64) -> Result<f64, ClassifierError> {
    let probs: Vec<f64> = items
        .par_iter()
        .map(|t| encode_and_classify(model, t))
        .collect::<Result<_, _>>()?;
    let pred: Vec<bool> = probs.iter().map(|&p| p > threshold).collect();
    let truth: Vec<bool> = items.iter().map(|t| t.wct_label == 1).collect();
    Ok(confusion_metrics(&pred, &truth).map(|m| m.f1).unwrap_or(0.0))
}

pub fn train_classifier(
    train: &[Trajectory],
    val: &[Trajectory],
    cfg: &ClassifierConfig,
) -> Result<(SequenceClassifier, ClassifierTrainReport), ClassifierError> {
    cfg.validate()?;
    let pos = train.iter().filter(|t| t.wct_label == 1).count();
    if pos == 0 || pos == train.len() {
        return Err(ClassifierError::SingleClass);
    }
    let input_dim = train[0].steps.first().map_or(0, |s| s.obs.flat_len() + 3);
    let mut model = SequenceClassifier::new(input_dim, cfg);
    for t in train.iter().chain(val) {
        model.inputs(t)?;
    }
    // with no validation split, model selection falls back to the training set
    let select = if val.is_empty() { train } else { val };
    let truth: Vec<bool> = select.iter().map(|t| t.wct_label == 1).collect();
    let majority = truth.iter().filter(|&&b| b).count() * 2 >= truth.len();
    let majority_f1 = confusion_metrics(&vec![majority; truth.len()], &truth).map(|m| m.f1).unwrap_or(0.0);

    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &shapes);
    let mut report = ClassifierTrainReport {
        majority_f1,
        best_val_f1: -1.0,
        ..Default::default()
    };
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed::derive_ints(cfg.seed, &[epoch as u64])));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let parts: Vec<(f64, SequenceClassifier)> = chunk
                .par_iter()
                .map(|&i| {
                    let (x, rows) = model.inputs(&train[i]).expect("validated above");
                    model.loss_grad(x, rows, train[i].wct_label == 1)
                })
                .collect();
            let scale = 1.0 / chunk.len() as f64;
            let mut total = model.zero_grad();
            for (l, g) in &parts {
                epoch_loss += l;
                let mut acc = total.tensors_mut();
                for (a, p) in acc.iter_mut().zip(g.tensors()) {
                    for (x, y) in a.iter_mut().zip(p) {
                        *x += y * scale;
                    }
                }
            }
            let grads: Vec<&[f64]> = total.tensors().into_iter().map(|v| v.as_slice()).collect();
            opt.step(model.tensors_mut(), grads);
        }
        let f1 = f1_at(&model, select, cfg.threshold)?;
        report.epoch_loss.push(epoch_loss / train.len() as f64);
        report.val_f1.push(f1);
        log::info!("classifier epoch {epoch}: loss {:.4} val f1 {f1:.4}", epoch_loss / train.len() as f64);
        if f1 > report.best_val_f1 {
            report.best_val_f1 = f1;
            report.best_epoch = epoch;
            best = model.clone();
        }
    }
    if !best.is_finite() {
        return Err(ClassifierError::InvalidConfig("training diverged".into()));
    }
    Ok((best, report))
}

/// Largest per-group relative error between analytic and central-difference
/// gradients of the cross-entropy loss on `traj`.
///
/// With `per_tensor = Some(k)`, at most `k` seeded random coordinates of each
/// tensor are probed; `None` probes every coordinate.
pub fn gradient_check(
    model: &SequenceClassifier,
    traj: &Trajectory,
    label: bool,
    h: f64,
    per_tensor: Option<usize>,
) -> Result<Vec<(&'static str, f64)>, ClassifierError> {
    let (x, rows) = model.inputs(traj)?;
    let (_, grad) = model.loss_grad(x.clone(), rows, label);
    let y = if label { 1.0 } else { 0.0 };
    let loss = |m: &SequenceClassifier| {
        let logit = m.forward(x.clone(), rows).logit;
        nn::softplus(logit) - y * logit
    };
    let mut rng = seed::rng(seed::derive(model.seed, "gradient-check"));
    let mut probe = model.clone();
    let mut out = Vec::new();
    let mut tensor = 0;
    for (gi, group) in grad.groups().iter().enumerate() {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for g in group {
            let coords: Vec<usize> = match per_tensor {
                Some(k) if k < g.len() => rand::seq::index::sample(&mut rng, g.len(), k).into_vec(),
                _ => (0..g.len()).collect(),
            };
            for j in coords {
                let base = probe.tensors_mut()[tensor][j];
                probe.tensors_mut()[tensor][j] = base + h;
                let lp = loss(&probe);
                probe.tensors_mut()[tensor][j] = base - h;
                let lm = loss(&probe);
                probe.tensors_mut()[tensor][j] = base;
                let fd = (lp - lm) / (2.0 * h);
                num += (fd - g[j]).powi(2);
                den += fd.powi(2).max(g[j].powi(2));
            }
            tensor += 1;
        }
        out.push((PARAM_GROUPS[gi], num.sqrt() / den.sqrt().max(1e-12)));
    }
    Ok(out)
}
