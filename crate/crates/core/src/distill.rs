//! Windowed contrastive distillation from a teacher branch to a student
//! branch, view construction per strategy, and the SGD training loop.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad_check, BoundParams, GradCheckReport, ParamStore, SegmentKind, Tape, Tensor, Var};
use crate::config::RunConfig;
use crate::encoders::{neighborhoods, Encoder, EncoderConfig, PredictorMode, Predictors, NORMALIZE_EPS};
use crate::error::{Error, Result};
use crate::geometry::Sequence;
use crate::partial_view::{generate_partial_sequence, random_sample_sequence, TrajectoryConfig};
use crate::rng::{derive_seed, stream, Pcg32};

/// Time offsets around an anchor frame; always contains 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub offsets: Vec<i64>,
}

impl WindowSpec {
    pub fn new(mut offsets: Vec<i64>) -> Result<Self> {
        offsets.sort_unstable();
        offsets.dedup();
        if !offsets.contains(&0) {
            return Err(Error::config("time window must contain offset 0"));
        }
        Ok(WindowSpec { offsets })
    }

    /// Single frame: purely geometric distillation.
    pub fn window1() -> Self {
        WindowSpec { offsets: vec![0] }
    }

    pub fn window3() -> Self {
        WindowSpec {
            offsets: vec![-1, 0, 1],
        }
    }

    pub fn window5() -> Self {
        WindowSpec {
            offsets: vec![-2, -1, 0, 1, 2],
        }
    }

    pub fn plus_minus2() -> Self {
        WindowSpec {
            offsets: vec![-2, 0, 2],
        }
    }

    pub fn nonzero(&self) -> impl Iterator<Item = i64> + '_ {
        self.offsets.iter().copied().filter(|&o| o != 0)
    }

    pub fn contains(&self, o: i64) -> bool {
        self.offsets.binary_search(&o).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeScope {
    /// Frames of the anchor's own sequence outside the window.
    Sequence,
    /// Additionally every frame of the other sequences in the batch.
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Negatives only.
    Literal,
    /// Negatives plus the positive.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Complete teacher input, partial student input.
    C2p,
    C2c,
    P2p,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMode {
    /// Occlusion sampling along a camera trajectory.
    Trajectory,
    /// Uniform random point dropping.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherArch {
    /// Local aggregation only.
    Asymmetric,
    /// Same architecture as the student, separate weights.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// Teacher receives loss gradients.
    Joint,
    /// Teacher stays at its initialization.
    StopGradient,
    /// Teacher tracks the student's matching weights.
    Ema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub window: Vec<i64>,
    /// Weight of the same-frame term.
    pub alpha_geo: f64,
    /// Weight of each nonzero window offset, in ascending offset order.
    pub time_weights: Vec<f64>,
    pub negatives: NegativeScope,
    pub denominator: Denominator,
    pub strategy: Strategy,
    pub views: ViewMode,
    /// Keep ratio of the random view mode.
    pub random_keep_ratio: f64,
    /// P2P draws one partial view and feeds it to both branches.
    pub p2p_shared_view: bool,
    pub predictor: PredictorMode,
    pub teacher: TeacherArch,
    pub teacher_mode: TeacherMode,
    pub ema_decay: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 0.07,
            window: vec![-1, 0, 1],
            alpha_geo: 0.5,
            time_weights: vec![0.25, 0.25],
            negatives: NegativeScope::Sequence,
            denominator: Denominator::Literal,
            strategy: Strategy::C2p,
            views: ViewMode::Trajectory,
            random_keep_ratio: 0.5,
            p2p_shared_view: false,
            predictor: PredictorMode::FrameWise,
            teacher: TeacherArch::Asymmetric,
            teacher_mode: TeacherMode::Joint,
            ema_decay: 0.99,
        }
    }
}

impl DistillConfig {
    /// Switches the window and sets the matching loss split: half on the
    /// same frame, the rest shared evenly by the other offsets.
    pub fn with_window(mut self, window: &WindowSpec) -> Self {
        let n = window.nonzero().count();
        self.window = window.offsets.clone();
        if n == 0 {
            self.alpha_geo = 1.0;
            self.time_weights = Vec::new();
        } else {
            self.alpha_geo = 0.5;
            self.time_weights = vec![0.5 / n as f64; n];
        }
        self
    }

    pub fn window_spec(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.window.clone())
    }

    pub fn alpha_time(&self) -> f64 {
        self.time_weights.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        let w = self.window_spec()?;
        if w.offsets != self.window {
            return Err(Error::config("time window offsets must be distinct and ascending"));
        }
        let n = w.nonzero().count();
        if self.time_weights.len() != n {
            return Err(Error::config(format!(
                "{} time weights for {n} nonzero offsets",
                self.time_weights.len()
            )));
        }
        if self.time_weights.iter().any(|&x| !(x >= 0.0)) || !(self.alpha_geo >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if (self.alpha_geo + self.alpha_time() - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "loss weights sum to {}, expected 1",
                self.alpha_geo + self.alpha_time()
            )));
        }
        if !(self.random_keep_ratio > 0.0 && self.random_keep_ratio <= 1.0) {
            return Err(Error::config("random_keep_ratio must be in (0, 1]"));
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay <= 1.0) {
            return Err(Error::config("ema_decay must be in [0, 1]"));
        }
        Ok(())
    }

    fn time_weight(&self, offset: i64) -> f64 {
        self.window
            .iter()
            .filter(|&&o| o != 0)
            .position(|&o| o == offset)
            .map(|k| self.time_weights[k])
            .unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    /// Write a checkpoint every this many epochs; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 0.01,
            warmup_epochs: 10,
            momentum: 0.9,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be finite and >= 0"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over the first `warmup_epochs` epochs.
pub fn warmup_lr(epoch: usize, base_lr: f64, warmup_epochs: usize) -> f64 {
    if epoch < warmup_epochs {
        base_lr * (epoch + 1) as f64 / warmup_epochs as f64
    } else {
        base_lr
    }
}

/// Negative teacher rows for frame `i` of sequence `seq` in a batch laid
/// out by `lens`, as global row indices in ascending order.
pub fn negative_pool(
    seq: usize,
    i: usize,
    lens: &[usize],
    window: &WindowSpec,
    scope: NegativeScope,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (s, &len) in lens.iter().enumerate() {
        if s == seq {
            for j in 0..len {
                if !window.contains(j as i64 - i as i64) {
                    out.push(start + j);
                }
            }
        } else if scope == NegativeScope::Batch {
            out.extend(start..start + len);
        }
        start += len;
    }
    if out.is_empty() {
        return Err(Error::DegenerateBatch(format!(
            "frame {i} of sequence {seq} has no negatives"
        )));
    }
    Ok(out)
}

fn offsets_of(lens: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    lens.iter()
        .map(|&l| {
            let s = acc;
            acc += l;
            s
        })
        .collect()
}

/// `q kᵀ / τ` over all rows.
fn logits(tape: &mut Tape, q: Var, k: Var, tau: f64) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let m = tape.matmul(q, kt)?;
    tape.scale(m, 1.0 / tau)
}

/// InfoNCE terms `log Σ exp(neg) − pos` (positive joins the sum in
/// standard mode) for each `(anchor row, positive row, negatives)`.
fn info_nce_terms(
    tape: &mut Tape,
    logits: Var,
    cols: usize,
    items: &[(usize, usize, Vec<usize>)],
    mode: Denominator,
) -> Result<Var> {
    let mut pos = Vec::with_capacity(items.len());
    let mut flat = Vec::new();
    let mut lens = Vec::with_capacity(items.len());
    for (a, p, negs) in items {
        pos.push(a * cols + p);
        let before = flat.len();
        if mode == Denominator::Standard {
            flat.push(a * cols + p);
        }
        flat.extend(negs.iter().map(|n| a * cols + n));
        lens.push(flat.len() - before);
    }
    let pos = tape.pick(logits, &pos)?;
    let neg = tape.pick(logits, &flat)?;
    let lse = tape.segment(neg, &lens, SegmentKind::LogSumExp)?;
    tape.sub(lse, pos)
}

/// Loss nodes of one objective evaluation plus per-anchor values.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub geo: Var,
    pub time: Var,
    pub total: Var,
    pub geo_terms: Vec<f64>,
    /// Weighted per-anchor time terms (`NaN` where an anchor has no offset).
    pub time_terms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub geo: f64,
    pub time: f64,
    pub total: f64,
    pub geo_terms: Vec<f64>,
    pub time_terms: Vec<f64>,
}

impl LossBreakdown {
    fn from_vars(tape: &Tape, v: &LossVars) -> Self {
        LossBreakdown {
            geo: tape.value(v.geo).item(),
            time: tape.value(v.time).item(),
            total: tape.value(v.total).item(),
            geo_terms: v.geo_terms.clone(),
            time_terms: v.time_terms.clone(),
        }
    }
}

/// `α1·geo + α2·time`.
pub fn total_loss(geo: f64, time: f64, cfg: &DistillConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    Ok(LossBreakdown {
        geo,
        time,
        total: cfg.alpha_geo * geo + cfg.alpha_time() * time,
        geo_terms: Vec::new(),
        time_terms: Vec::new(),
    })
}

fn geo_on_tape(
    tape: &mut Tape,
    student: Var,
    teacher: Var,
    lens: &[usize],
    window: &WindowSpec,
    cfg: &DistillConfig,
) -> Result<(Var, Vec<f64>)> {
    let rows: usize = lens.iter().sum();
    let lg = logits(tape, student, teacher, cfg.temperature)?;
    let starts = offsets_of(lens);
    let mut items = Vec::with_capacity(rows);
    for (s, &len) in lens.iter().enumerate() {
        for i in 0..len {
            let a = starts[s] + i;
            items.push((a, a, negative_pool(s, i, lens, window, cfg.negatives)?));
        }
    }
    let terms = info_nce_terms(tape, lg, rows, &items, cfg.denominator)?;
    let values = tape.value(terms).data().to_vec();
    let sum = tape.sum(terms)?;
    Ok((tape.scale(sum, 1.0 / rows as f64)?, values))
}

/// `predictions` holds the normalized predictor output for each nonzero
/// offset of the window.
fn time_on_tape(
    tape: &mut Tape,
    predictions: &[(i64, Var)],
    teacher: Var,
    lens: &[usize],
    window: &WindowSpec,
    cfg: &DistillConfig,
) -> Result<(Var, Vec<f64>)> {
    let rows: usize = lens.iter().sum();
    let starts = offsets_of(lens);
    // Weight of every valid offset at each anchor, for renormalization.
    let mut weight_sum = vec![0.0; rows];
    for (s, &len) in lens.iter().enumerate() {
        for i in 0..len {
            for o in window.nonzero() {
                let j = i as i64 + o;
                if j >= 0 && (j as usize) < len {
                    weight_sum[starts[s] + i] += cfg.time_weight(o);
                }
            }
        }
    }
    let anchors = weight_sum.iter().filter(|&&w| w > 0.0).count();
    let mut per_anchor = vec![f64::NAN; rows];
    if anchors == 0 {
        return Ok((tape.constant(Tensor::scalar(0.0)), per_anchor));
    }
    let mut parts = Vec::new();
    for &(o, pred) in predictions {
        let w = cfg.time_weight(o);
        let mut items = Vec::new();
        let mut coef = Vec::new();
        for (s, &len) in lens.iter().enumerate() {
            for i in 0..len {
                let j = i as i64 + o;
                let a = starts[s] + i;
                if j < 0 || j as usize >= len || weight_sum[a] <= 0.0 {
                    continue;
                }
                items.push((a, starts[s] + j as usize, negative_pool(s, i, lens, window, cfg.negatives)?));
                coef.push(w / weight_sum[a]);
            }
        }
        if items.is_empty() {
            continue;
        }
        let lg = logits(tape, pred, teacher, cfg.temperature)?;
        let terms = info_nce_terms(tape, lg, rows, &items, cfg.denominator)?;
        for ((a, _, _), (t, c)) in items.iter().zip(tape.value(terms).data().iter().zip(&coef)) {
            let slot = &mut per_anchor[*a];
            *slot = if slot.is_nan() { c * t } else { *slot + c * t };
        }
        let c = tape.constant(Tensor::vector(coef));
        let weighted = tape.mul(terms, c)?;
        parts.push(tape.sum(weighted)?);
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok((tape.scale(acc, 1.0 / anchors as f64)?, per_anchor))
}

/// Full objective on already computed frame features (unit rows, stacked
/// per sequence as `lens` says). `predictions` pairs each nonzero offset
/// with the normalized predictor output for every student row.
pub fn objective(
    tape: &mut Tape,
    student: Var,
    teacher: Var,
    predictions: &[(i64, Var)],
    lens: &[usize],
    cfg: &DistillConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    let window = cfg.window_spec()?;
    let (ls, d) = tape.value(student).dims2()?;
    let (lt, dt) = tape.value(teacher).dims2()?;
    if ls != lt || d != dt || ls != lens.iter().sum::<usize>() {
        return Err(Error::shape(format!(
            "student [{ls}, {d}] vs teacher [{lt}, {dt}] for {} frames",
            lens.iter().sum::<usize>()
        )));
    }
    let (geo, geo_terms) = geo_on_tape(tape, student, teacher, lens, &window, cfg)?;
    let (time, time_terms) = time_on_tape(tape, predictions, teacher, lens, &window, cfg)?;
    let g = tape.scale(geo, cfg.alpha_geo)?;
    let t = tape.scale(time, cfg.alpha_time())?;
    let total = tape.add(g, t)?;
    Ok(LossVars {
        geo,
        time,
        total,
        geo_terms,
        time_terms,
    })
}

/// Geometric term on fixed features.
pub fn geo_loss(student: &Tensor, teacher: &Tensor, lens: &[usize], cfg: &DistillConfig) -> Result<f64> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let t = tape.constant(teacher.clone());
    let (g, _) = geo_on_tape(&mut tape, s, t, lens, &cfg.window_spec()?, cfg)?;
    Ok(tape.value(g).item())
}

/// Temporal term given raw predictor outputs per nonzero offset; each is
/// normalized before use.
pub fn time_loss_with(
    predictions: &[(i64, Tensor)],
    teacher: &Tensor,
    lens: &[usize],
    cfg: &DistillConfig,
) -> Result<f64> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let t = tape.constant(teacher.clone());
    let mut preds = Vec::with_capacity(predictions.len());
    for (o, p) in predictions {
        let v = tape.constant(p.clone());
        preds.push((*o, tape.l2_normalize(v, 1, NORMALIZE_EPS)?));
    }
    let (l, _) = time_on_tape(&mut tape, &preds, t, lens, &cfg.window_spec()?, cfg)?;
    Ok(tape.value(l).item())
}

/// Temporal term with the predictor heads stored in `params`.
pub fn time_loss(
    student: &Tensor,
    teacher: &Tensor,
    lens: &[usize],
    params: &ParamStore,
    predictors: &Predictors,
    cfg: &DistillConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.with_prefix("pred.").bind(&mut tape, |_| false);
    let s = tape.constant(student.clone());
    let mut preds = Vec::new();
    for o in cfg.window_spec()?.nonzero() {
        let y = predictors.forward(&mut tape, &bound, s, o)?;
        preds.push((o, tape.value(y).clone()));
    }
    time_loss_with(&preds, teacher, lens, cfg)
}

/// Teacher and student inputs for one complete sequence.
pub fn build_views(
    complete: &Sequence,
    cfg: &DistillConfig,
    traj: &TrajectoryConfig,
    seed: u64,
) -> Result<(Sequence, Sequence)> {
    let partial = |s: u64| -> Result<Sequence> {
        match cfg.views {
            ViewMode::Trajectory => Ok(generate_partial_sequence(complete, traj, s)?.0),
            ViewMode::Random => random_sample_sequence(complete, cfg.random_keep_ratio, s),
        }
    };
    Ok(match cfg.strategy {
        Strategy::C2c => (complete.clone(), complete.clone()),
        Strategy::C2p => (complete.clone(), partial(seed)?),
        Strategy::P2p if cfg.p2p_shared_view => {
            let p = partial(seed)?;
            (p.clone(), p)
        }
        Strategy::P2p => (partial(seed.wrapping_add(1))?, partial(seed)?),
    })
}

/// Teacher, student and predictor heads for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub teacher: Encoder,
    pub student: Encoder,
    pub predictors: Predictors,
}

impl Model {
    pub fn new(enc: &EncoderConfig, cfg: &DistillConfig) -> Self {
        let teacher = match cfg.teacher {
            TeacherArch::Asymmetric => Encoder::teacher(enc),
            TeacherArch::Symmetric => Encoder::symmetric_teacher(enc),
        };
        Model {
            teacher,
            student: Encoder::student(enc),
            predictors: Predictors::new(&cfg.window, cfg.predictor, enc.dim),
        }
    }

    /// Fresh parameters; each part draws from its own stream of `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.teacher.init(&mut store, &mut stream(seed, 1))?;
        self.student.init(&mut store, &mut stream(seed, 2))?;
        self.predictors.init(&mut store, &mut stream(seed, 3))?;
        Ok(store)
    }

    /// Objective for a batch of `(teacher input, student input)` pairs.
    pub fn loss(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        batch: &[(Sequence, Sequence)],
        cfg: &DistillConfig,
    ) -> Result<LossVars> {
        let lens: Vec<usize> = batch.iter().map(|(t, _)| t.len()).collect();
        if batch.iter().any(|(t, s)| t.len() != s.len()) {
            return Err(Error::shape("teacher and student views differ in length"));
        }
        let nb_t = neighborhoods(batch.iter().flat_map(|(t, _)| t.frames.iter()), &self.teacher.cfg)?;
        let nb_s = neighborhoods(batch.iter().flat_map(|(_, s)| s.frames.iter()), &self.student.cfg)?;
        let t = self.teacher.forward(tape, params, &nb_t, &lens)?;
        let s = self.student.forward(tape, params, &nb_s, &lens)?;
        let mut preds = Vec::new();
        for o in cfg.window_spec()?.nonzero() {
            let y = self.predictors.forward(tape, params, s, o)?;
            preds.push((o, tape.l2_normalize(y, 1, NORMALIZE_EPS)?));
        }
        objective(tape, s, t, &preds, &lens, cfg)
    }
}

/// Parameters, momentum buffers and progress of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub momentum: ParamStore,
    pub epoch: usize,
    pub step: usize,
}

const MOMENTUM_PREFIX: &str = "opt.momentum.";
const PROGRESS_KEY: &str = "meta.progress";

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        TrainState {
            params,
            momentum: ParamStore::new(),
            epoch: 0,
            step: 0,
        }
    }

    /// Parameters plus `opt.momentum.*` buffers and `meta.progress`.
    pub fn to_checkpoint(&self) -> ParamStore {
        let mut out = self.params.clone();
        for (k, v) in self.momentum.iter() {
            out.insert(format!("{MOMENTUM_PREFIX}{k}"), v.clone());
        }
        out.insert(
            PROGRESS_KEY,
            Tensor::vector(vec![self.epoch as f64, self.step as f64]),
        );
        out
    }

    pub fn from_checkpoint(store: &ParamStore) -> Result<Self> {
        let mut state = TrainState::new(ParamStore::new());
        for (k, v) in store.iter() {
            if let Some(name) = k.strip_prefix(MOMENTUM_PREFIX) {
                state.momentum.insert(name, v.clone());
            } else if k == PROGRESS_KEY {
                match v.data() {
                    [e, s] if *e >= 0.0 && *s >= 0.0 => {
                        state.epoch = *e as usize;
                        state.step = *s as usize;
                    }
                    _ => return Err(Error::config("malformed meta.progress entry")),
                }
            } else if !k.starts_with("meta.") {
                state.params.insert(k.clone(), v.clone());
            }
        }
        Ok(state)
    }
}

fn trainable(name: &str, mode: TeacherMode) -> bool {
    !name.starts_with("teacher.") || mode == TeacherMode::Joint
}

/// One SGD step on `batch`. On a non-finite loss or update the state is
/// left untouched.
pub fn train_step(
    model: &Model,
    state: &mut TrainState,
    batch: &[(Sequence, Sequence)],
    lr: f64,
    momentum: f64,
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, |k| trainable(k, cfg.teacher_mode));
    let vars = model.loss(&mut tape, &bound, batch, cfg)?;
    let out = LossBreakdown::from_vars(&tape, &vars);
    if !out.total.is_finite() {
        return Err(Error::Numeric(format!("loss is {}", out.total)));
    }
    let grads = bound.grads(&tape.backward(vars.total)?);
    let mut params = state.params.clone();
    let mut velocity = state.momentum.clone();
    for (name, g) in &grads {
        let v = match velocity.get_mut(name) {
            Some(v) => v,
            None => {
                velocity.insert(name.clone(), Tensor::zeros(g.shape()));
                velocity.get_mut(name).expect("just inserted")
            }
        };
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = momentum * *vi + gi;
        }
        let p = params.get_mut(name).expect("gradient of a bound parameter");
        for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
            *pi -= lr * vi;
        }
    }
    if cfg.teacher_mode == TeacherMode::Ema {
        let decay = cfg.ema_decay;
        let names: Vec<String> = params
            .names()
            .filter(|k| k.starts_with("teacher."))
            .cloned()
            .collect();
        for name in names {
            let src = format!("student.{}", &name["teacher.".len()..]);
            let Some(s) = params.get(&src).cloned() else { continue };
            let t = params.get_mut(&name).expect("listed above");
            if t.shape() != s.shape() {
                continue;
            }
            for (ti, si) in t.data_mut().iter_mut().zip(s.data()) {
                *ti = decay * *ti + (1.0 - decay) * si;
            }
        }
    }
    if !params.all_finite() || !velocity.all_finite() {
        return Err(Error::Numeric("parameter update produced non-finite values".into()));
    }
    state.params = params;
    state.momentum = velocity;
    state.step += 1;
    Ok(out)
}

pub const LOG_HEADER: &str = "epoch,step,lr,L_geo,L_time,L_total";

/// Seed of the views of sequence `index` in `epoch`.
pub fn view_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(seed, 0x7669_6577), epoch as u64), index as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub state: TrainState,
    /// Mean `L_total` of every epoch run in this call.
    pub epoch_means: Vec<f64>,
}

/// Runs epochs `state.epoch..cfg.train.epochs`, writing one CSV row per
/// step to `log` (header included when starting from epoch 0) and calling
/// `checkpoint` every `checkpoint_every` epochs.
pub fn pretrain(
    data: &[Sequence],
    cfg: &RunConfig,
    seed: u64,
    mut state: TrainState,
    log: &mut dyn Write,
    checkpoint: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("no training sequences".into()));
    }
    let model = Model::new(&cfg.encoder, &cfg.distill);
    let train = &cfg.train;
    if state.epoch == 0 && state.step == 0 {
        writeln!(log, "{LOG_HEADER}")?;
    }
    let mut epoch_means = Vec::new();
    while state.epoch < train.epochs {
        let epoch = state.epoch;
        let lr = warmup_lr(epoch, train.lr, train.warmup_epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        stream(derive_seed(seed, 0x6f72_6465), epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<(Sequence, Sequence)> = chunk
                .par_iter()
                .map(|&i| build_views(&data[i], &cfg.distill, &cfg.trajectory, view_seed(seed, epoch, i)))
                .collect::<Result<_>>()?;
            let step = state.step;
            let out = train_step(&model, &mut state, &batch, lr, train.momentum, &cfg.distill)?;
            writeln!(log, "{epoch},{step},{lr},{},{},{}", out.geo, out.time, out.total)?;
            sum += out.total;
            steps += 1;
        }
        log.flush()?;
        epoch_means.push(sum / steps as f64);
        state.epoch += 1;
        if train.checkpoint_every > 0 && state.epoch % train.checkpoint_every == 0 {
            checkpoint(&state)?;
        }
    }
    Ok(TrainReport { state, epoch_means })
}

/// Finite-difference check of the full objective with respect to every
/// parameter tensor of a tiny model, one report per tensor.
pub fn objective_gradcheck(h: f64) -> Result<Vec<GradCheckReport>> {
    let enc = EncoderConfig {
        spatial_stride: 6,
        radius: 0.7,
        neighbors: 4,
        dim: 4,
        heads: 2,
        ffn_dim: 6,
        max_frames: 6,
        ..EncoderConfig::default()
    };
    let cfg = DistillConfig::default();
    let model = Model::new(&enc, &cfg);
    let params = model.init(0x6f62_6a)?;
    let mut rng = Pcg32::from_seed(0x62_6174_6368);
    let mut seq = |frames: usize, n: usize| {
        Sequence::new(
            (0..frames)
                .map(|_| {
                    crate::geometry::PointCloudFrame::new(
                        (0..n)
                            .map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)])
                            .collect(),
                    )
                })
                .collect(),
        )
    };
    let a = seq(4, 14);
    let b = seq(5, 12);
    let batch = vec![
        build_views(&a, &DistillConfig { strategy: Strategy::C2c, ..cfg.clone() }, &TrajectoryConfig::default(), 0)?,
        (b.clone(), random_sample_sequence(&b, 0.7, 1)?),
    ];
    let mut reports = Vec::new();
    for name in params.names() {
        let x = params.get(name).expect("listed").clone();
        let rest = {
            let mut r = params.clone();
            r.insert(name.clone(), Tensor::zeros(&[0]));
            r
        };
        let err = grad_check(
            |tape, v| {
                let mut bound = rest.bind(tape, |_| false);
                bound.set(name, v);
                let vars = model.loss(tape, &bound, &batch, &cfg)?;
                Ok(vars.total)
            },
            &x,
            h,
        )?;
        reports.push(GradCheckReport {
            name: format!("objective/{name}"),
            max_rel_error: err,
        });
    }
    Ok(reports)
}

/// Features `(student, teacher)` of a batch, for diagnostics and tests.
pub fn batch_features(
    model: &Model,
    params: &ParamStore,
    batch: &[(Sequence, Sequence)],
) -> Result<(Tensor, Tensor)> {
    let lens: Vec<usize> = batch.iter().map(|(t, _)| t.len()).collect();
    let nb_t = neighborhoods(batch.iter().flat_map(|(t, _)| t.frames.iter()), &model.teacher.cfg)?;
    let nb_s = neighborhoods(batch.iter().flat_map(|(_, s)| s.frames.iter()), &model.student.cfg)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let t = model.teacher.forward(&mut tape, &bound, &nb_t, &lens)?;
    let s = model.student.forward(&mut tape, &bound, &nb_s, &lens)?;
    Ok((tape.value(s).clone(), tape.value(t).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, DataConfig};

    fn unit_rows(rng: &mut Pcg32, rows: usize, d: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            let r: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(r.iter().map(|x| x / n));
        }
        Tensor::new(vec![rows, d], data).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn normalized(r: &[f64]) -> Vec<f64> {
        let n = dot(r, r).sqrt().max(NORMALIZE_EPS);
        r.iter().map(|x| x / n).collect()
    }

    /// Negatives of (seq, i) by direct enumeration.
    fn oracle_negs(seq: usize, i: usize, lens: &[usize], window: &[i64], batch: bool) -> Vec<usize> {
        let mut out = Vec::new();
        let mut base = 0;
        for (s, &len) in lens.iter().enumerate() {
            for j in 0..len {
                let inside = window.iter().any(|&o| i as i64 + o == j as i64);
                if (s == seq && !inside) || (s != seq && batch) {
                    out.push(base + j);
                }
            }
            base += len;
        }
        out
    }

    fn oracle_term(anchor: &[f64], pos: &[f64], negs: &[&[f64]], tau: f64, standard: bool) -> f64 {
        let mut denom: f64 = negs.iter().map(|n| (dot(anchor, n) / tau).exp()).sum();
        if standard {
            denom += (dot(anchor, pos) / tau).exp();
        }
        -((dot(anchor, pos) / tau).exp() / denom).ln()
    }

    fn oracle_geo(s: &Tensor, t: &Tensor, lens: &[usize], cfg: &DistillConfig) -> f64 {
        let batch = cfg.negatives == NegativeScope::Batch;
        let standard = cfg.denominator == Denominator::Standard;
        let (mut total, mut count, mut base) = (0.0, 0, 0);
        for (q, &len) in lens.iter().enumerate() {
            for i in 0..len {
                let negs: Vec<&[f64]> = oracle_negs(q, i, lens, &cfg.window, batch)
                    .into_iter()
                    .map(|j| t.row(j))
                    .collect();
                total += oracle_term(s.row(base + i), t.row(base + i), &negs, cfg.temperature, standard);
                count += 1;
            }
            base += len;
        }
        total / count as f64
    }

    fn oracle_time(preds: &[(i64, Tensor)], t: &Tensor, lens: &[usize], cfg: &DistillConfig) -> f64 {
        let batch = cfg.negatives == NegativeScope::Batch;
        let standard = cfg.denominator == Denominator::Standard;
        let nonzero: Vec<i64> = cfg.window.iter().copied().filter(|&o| o != 0).collect();
        let (mut total, mut count, mut base) = (0.0, 0, 0);
        for (q, &len) in lens.iter().enumerate() {
            for i in 0..len {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, &o) in nonzero.iter().enumerate() {
                    let j = i as i64 + o;
                    if j < 0 || j >= len as i64 {
                        continue;
                    }
                    let w = cfg.time_weights[k];
                    let p = &preds.iter().find(|(po, _)| *po == o).unwrap().1;
                    let anchor = normalized(p.row(base + i));
                    let negs: Vec<&[f64]> = oracle_negs(q, i, lens, &cfg.window, batch)
                        .into_iter()
                        .map(|n| t.row(n))
                        .collect();
                    acc += w * oracle_term(&anchor, t.row(base + j as usize), &negs, cfg.temperature, standard);
                    wsum += w;
                }
                if wsum > 0.0 {
                    total += acc / wsum;
                    count += 1;
                }
            }
            base += len;
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    #[test]
    fn negative_pool_examples() {
        let w = WindowSpec::window3();
        assert_eq!(negative_pool(0, 2, &[5], &w, NegativeScope::Sequence).unwrap(), vec![0, 4]);
        assert_eq!(negative_pool(0, 0, &[5], &w, NegativeScope::Sequence).unwrap(), vec![2, 3, 4]);
        assert_eq!(negative_pool(0, 2, &[5, 5], &w, NegativeScope::Batch).unwrap().len(), 7);
        assert_eq!(negative_pool(1, 2, &[5, 5], &w, NegativeScope::Sequence).unwrap(), vec![5, 9]);
        assert!(matches!(
            negative_pool(0, 1, &[3], &w, NegativeScope::Sequence),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn uniform_features_give_log_nneg() {
        let cfg = DistillConfig::default();
        let row = [0.6, 0.8, 0.0];
        let t = Tensor::from_rows(&vec![row.to_vec(); 5]).unwrap();
        let mut tape = Tape::new();
        let (s, tv) = (tape.constant(t.clone()), tape.constant(t.clone()));
        let (_, terms) = geo_on_tape(&mut tape, s, tv, &[5], &WindowSpec::window3(), &cfg).unwrap();
        assert!((terms[2] - 2f64.ln()).abs() < 1e-9);
        assert!((terms[0] - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_negatives_closed_form() {
        let cfg = DistillConfig {
            temperature: 0.07,
            ..DistillConfig::default()
        };
        // Frame 2 is the anchor: its positive is itself, its negatives
        // (frames 0 and 4) are orthogonal to it.
        let rows = vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ];
        let t = Tensor::from_rows(&rows).unwrap();
        let mut tape = Tape::new();
        let (s, tv) = (tape.constant(t.clone()), tape.constant(t.clone()));
        let (_, terms) = geo_on_tape(&mut tape, s, tv, &[5], &WindowSpec::window3(), &cfg).unwrap();
        assert!((terms[2] - (2f64.ln() - 1.0 / 0.07)).abs() < 1e-9);

        let tau1 = DistillConfig {
            temperature: 1.0,
            ..DistillConfig::default()
        };
        let mut tape = Tape::new();
        let (s, tv) = (tape.constant(t.clone()), tape.constant(t));
        let (_, terms) = geo_on_tape(&mut tape, s, tv, &[5], &WindowSpec::window3(), &tau1).unwrap();
        assert!((terms[2] - (2f64.ln() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn time_term_closed_form() {
        // Predictions for anchor 2 equal the teacher positive at 3 (offset
        // +1) and at 1 (offset -1); negatives 0 and 4 are orthogonal.
        let cfg = DistillConfig {
            temperature: 1.0,
            ..DistillConfig::default()
        };
        let t = Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let pred = Tensor::from_rows(&vec![vec![1.0, 0.0, 0.0]; 5]).unwrap();
        let mut tape = Tape::new();
        let tv = tape.constant(t);
        let pv = tape.constant(pred);
        let (_, terms) = time_on_tape(&mut tape, &[(-1, pv), (1, pv)], tv, &[5], &WindowSpec::window3(), &cfg)
            .unwrap();
        assert!((terms[2] - (2f64.ln() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn window_one_has_zero_time_loss_and_pure_geo_total() {
        let cfg = DistillConfig::default().with_window(&WindowSpec::window1());
        cfg.validate().unwrap();
        let mut rng = Pcg32::from_seed(3);
        let s = unit_rows(&mut rng, 6, 4);
        let t = unit_rows(&mut rng, 6, 4);
        assert_eq!(time_loss_with(&[], &t, &[6], &cfg).unwrap(), 0.0);
        let mut tape = Tape::new();
        let (sv, tv) = (tape.constant(s), tape.constant(t));
        let v = objective(&mut tape, sv, tv, &[], &[6], &cfg).unwrap();
        assert_eq!(tape.value(v.time).item(), 0.0);
        assert_eq!(tape.value(v.total).item(), tape.value(v.geo).item());
    }

    #[test]
    fn total_loss_examples() {
        let cfg = DistillConfig::default();
        assert_eq!(total_loss(2.0, 4.0, &cfg).unwrap().total, 3.0);
        let geo_only = DistillConfig::default().with_window(&WindowSpec::window1());
        assert_eq!(total_loss(2.0, 4.0, &geo_only).unwrap().total, 2.0);
        let bad = DistillConfig {
            alpha_geo: 0.7,
            ..DistillConfig::default()
        };
        assert!(matches!(total_loss(1.0, 1.0, &bad), Err(Error::Config(_))));
        // An interior frame weighs its own term 0.5 and each neighbor 0.25.
        assert_eq!(cfg.alpha_geo, 0.5);
        assert_eq!(cfg.time_weight(-1), 0.25);
        assert_eq!(cfg.time_weight(1), 0.25);
    }

    #[test]
    fn window_presets() {
        let w5 = DistillConfig::default().with_window(&WindowSpec::window5());
        assert_eq!(w5.time_weights, vec![0.125; 4]);
        w5.validate().unwrap();
        let pm2 = DistillConfig::default().with_window(&WindowSpec::plus_minus2());
        assert_eq!(pm2.window, vec![-2, 0, 2]);
        assert_eq!(pm2.time_weights, vec![0.25, 0.25]);
        assert!(WindowSpec::new(vec![-1, 1]).is_err());
        let unsorted = DistillConfig {
            window: vec![1, 0, -1],
            ..DistillConfig::default()
        };
        assert!(unsorted.validate().is_err());
    }

    #[test]
    fn losses_match_brute_force_oracle() {
        let mut rng = Pcg32::from_seed(0x6f72_6163);
        for case in 0..100 {
            let seqs = 1 + rng.below(2) as usize;
            let lens: Vec<usize> = (0..seqs).map(|_| 4 + rng.below(5) as usize).collect();
            let rows: usize = lens.iter().sum();
            let d = 2 + rng.below(15) as usize;
            let window = match case % 4 {
                0 => WindowSpec::window3(),
                1 => WindowSpec::window1(),
                2 => WindowSpec::plus_minus2(),
                _ => WindowSpec::window5(),
            };
            let mut cfg = DistillConfig::default().with_window(&window);
            cfg.temperature = rng.uniform(0.05, 1.0);
            if rng.coin() {
                cfg.denominator = Denominator::Standard;
            }
            if seqs > 1 && rng.coin() {
                cfg.negatives = NegativeScope::Batch;
            }
            if lens.iter().any(|&l| l <= window.offsets.len()) && cfg.negatives == NegativeScope::Sequence {
                // A window this wide can cover a short sequence entirely.
                cfg.negatives = NegativeScope::Batch;
                if seqs == 1 {
                    continue;
                }
            }
            let s = unit_rows(&mut rng, rows, d);
            let t = unit_rows(&mut rng, rows, d);
            let preds: Vec<(i64, Tensor)> = window
                .nonzero()
                .map(|o| {
                    let n = rows * d;
                    (o, Tensor::new(vec![rows, d], (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap())
                })
                .collect();
            let g = geo_loss(&s, &t, &lens, &cfg).unwrap();
            assert!((g - oracle_geo(&s, &t, &lens, &cfg)).abs() < 1e-10, "case {case}");
            let tl = time_loss_with(&preds, &t, &lens, &cfg).unwrap();
            assert!((tl - oracle_time(&preds, &t, &lens, &cfg)).abs() < 1e-10, "case {case}");
        }
    }

    #[test]
    fn raising_positive_similarity_lowers_the_term() {
        let cfg = DistillConfig::default();
        let t = Tensor::from_rows(&[
            vec![0.0, 1.0],
            vec![0.6, 0.8],
            vec![1.0, 0.0],
            vec![0.6, -0.8],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let mut last = f64::INFINITY;
        for k in 0..6 {
            let a = 0.3 * k as f64;
            let mut rows = t.rows();
            rows[2] = vec![a.cos(), a.sin()];
            let s = Tensor::from_rows(&rows).unwrap();
            let mut tape = Tape::new();
            let (sv, tv) = (tape.constant(s), tape.constant(t.clone()));
            let (_, terms) = geo_on_tape(&mut tape, sv, tv, &[5], &WindowSpec::window3(), &cfg).unwrap();
            // Rotating away from the positive (1, 0) raises the term.
            assert!(k == 0 || terms[2] > last);
            last = terms[2];
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut rng = Pcg32::from_seed(11);
        let s = unit_rows(&mut rng, 7, 5);
        let t = unit_rows(&mut rng, 7, 5);
        let p = unit_rows(&mut rng, 7, 5);
        let cfg = DistillConfig::default();
        let mut tape = Tape::new();
        let (sv, tv, pv) = (tape.constant(s), tape.constant(t), tape.constant(p));
        let v = objective(&mut tape, sv, tv, &[(-1, pv), (1, pv)], &[7], &cfg).unwrap();
        let b = LossBreakdown::from_vars(&tape, &v);
        assert!((b.total - (0.5 * b.geo + 0.5 * b.time)).abs() < 1e-12);
    }

    #[test]
    fn warmup_schedule() {
        assert!((warmup_lr(0, 0.01, 10) - 0.001).abs() < 1e-15);
        assert_eq!(warmup_lr(9, 0.01, 10), 0.01);
        assert_eq!(warmup_lr(30, 0.01, 10), 0.01);
        assert_eq!(warmup_lr(0, 0.01, 0), 0.01);
    }

    fn tiny() -> (RunConfig, Vec<Sequence>) {
        let mut cfg = RunConfig::default();
        cfg.data = DataConfig {
            sequences: 4,
            frames: 6,
            points: 48,
            ..DataConfig::default()
        };
        cfg.encoder = EncoderConfig {
            spatial_stride: 16,
            neighbors: 6,
            dim: 8,
            heads: 2,
            ffn_dim: 8,
            max_frames: 8,
            ..EncoderConfig::default()
        };
        cfg.train.epochs = 2;
        cfg.train.batch_size = 2;
        let data = make_dataset(4, &cfg.data.template(), 5).unwrap();
        (cfg, data)
    }

    #[test]
    fn views_per_strategy() {
        let (cfg, data) = tiny();
        let seq = &data[0];
        let c2c = DistillConfig {
            strategy: Strategy::C2c,
            ..cfg.distill.clone()
        };
        let (t, s) = build_views(seq, &c2c, &cfg.trajectory, 3).unwrap();
        assert_eq!(t, s);
        assert_eq!(t.frames, seq.frames);
        let (t, s) = build_views(seq, &cfg.distill, &cfg.trajectory, 3).unwrap();
        assert_eq!(t.frames, seq.frames);
        for (pf, cf) in s.frames.iter().zip(&seq.frames) {
            assert!(pf.points.iter().all(|p| cf.points.contains(p)));
        }
        let p2p = DistillConfig {
            strategy: Strategy::P2p,
            ..cfg.distill.clone()
        };
        let (t, s) = build_views(seq, &p2p, &cfg.trajectory, 3).unwrap();
        assert_ne!(t.cameras, s.cameras);
        let shared = DistillConfig {
            p2p_shared_view: true,
            ..p2p
        };
        let (t, s) = build_views(seq, &shared, &cfg.trajectory, 3).unwrap();
        assert_eq!(t, s);
    }

    #[test]
    fn zero_lr_keeps_parameters_and_steps_are_deterministic() {
        let (cfg, data) = tiny();
        let model = Model::new(&cfg.encoder, &cfg.distill);
        let batch: Vec<(Sequence, Sequence)> = data[..2]
            .iter()
            .enumerate()
            .map(|(i, s)| build_views(s, &cfg.distill, &cfg.trajectory, i as u64).unwrap())
            .collect();
        let init = model.init(1).unwrap();
        let mut state = TrainState::new(init.clone());
        let out = train_step(&model, &mut state, &batch, 0.0, 0.9, &cfg.distill).unwrap();
        assert!(out.total.is_finite());
        assert_eq!(state.params, init);
        assert_eq!(state.step, 1);

        let mut a = TrainState::new(init.clone());
        let mut b = TrainState::new(init.clone());
        let la = train_step(&model, &mut a, &batch, 0.01, 0.9, &cfg.distill).unwrap();
        let lb = train_step(&model, &mut b, &batch, 0.01, 0.9, &cfg.distill).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_ne!(a.params, init);
    }

    #[test]
    fn teacher_modes() {
        let (cfg, data) = tiny();
        let batch: Vec<(Sequence, Sequence)> = data[..2]
            .iter()
            .map(|s| build_views(s, &cfg.distill, &cfg.trajectory, 0).unwrap())
            .collect();
        for mode in [TeacherMode::StopGradient, TeacherMode::Ema, TeacherMode::Joint] {
            let d = DistillConfig {
                teacher_mode: mode,
                ..cfg.distill.clone()
            };
            let model = Model::new(&cfg.encoder, &d);
            let init = model.init(2).unwrap();
            let mut state = TrainState::new(init.clone());
            train_step(&model, &mut state, &batch, 0.05, 0.9, &d).unwrap();
            let w = "teacher.local.w1";
            let before = init.get(w).unwrap();
            let after = state.params.get(w).unwrap();
            match mode {
                TeacherMode::StopGradient => assert_eq!(before, after),
                TeacherMode::Ema => {
                    let s = state.params.get("student.local.w1").unwrap();
                    for ((a, b), x) in after.data().iter().zip(before.data()).zip(s.data()) {
                        assert!((a - (0.99 * b + 0.01 * x)).abs() < 1e-15);
                    }
                }
                TeacherMode::Joint => assert_ne!(before, after),
            }
        }
    }

    #[test]
    fn pretrain_logs_and_resumes() {
        let (cfg, data) = tiny();
        let model = Model::new(&cfg.encoder, &cfg.distill);
        let init = model.init(4).unwrap();
        let mut full_log = Vec::new();
        let full = pretrain(&data, &cfg, 4, TrainState::new(init.clone()), &mut full_log, &mut |_| Ok(())).unwrap();
        let text = String::from_utf8(full_log.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 2);
        assert_eq!(full.state.step, 4);
        assert_eq!(full.state.epoch, 2);

        let mut half_cfg = cfg.clone();
        half_cfg.train.epochs = 1;
        let mut log = Vec::new();
        let half = pretrain(&data, &half_cfg, 4, TrainState::new(init), &mut log, &mut |_| Ok(())).unwrap();
        let restored = TrainState::from_checkpoint(&half.state.to_checkpoint()).unwrap();
        assert_eq!(restored, half.state);
        let resumed = pretrain(&data, &cfg, 4, restored, &mut log, &mut |_| Ok(())).unwrap();
        assert_eq!(resumed.state, full.state);
        assert_eq!(log, full_log);
    }

    #[test]
    fn zero_epochs_keeps_init() {
        let (mut cfg, data) = tiny();
        cfg.train.epochs = 0;
        let model = Model::new(&cfg.encoder, &cfg.distill);
        let init = model.init(6).unwrap();
        let out = pretrain(&data, &cfg, 6, TrainState::new(init.clone()), &mut Vec::new(), &mut |_| Ok(())).unwrap();
        assert_eq!(out.state.params, init);
        assert!(out.epoch_means.is_empty());
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let reports = objective_gradcheck(1e-5).unwrap();
        assert!(reports.len() > 20);
        for r in &reports {
            assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
        }
    }
}
