//! Linear-probe evaluation of frozen student features, ablation grids and
//! data-fraction runs.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::config::RunConfig;
use crate::distill::{pretrain, Model, Strategy, TeacherArch, TrainState, ViewMode, WindowSpec};
use crate::encoders::{Encoder, EncoderConfig, PredictorMode};
use crate::error::{Error, Result};
use crate::geometry::Sequence;
use crate::rng::{derive_seed, Pcg32};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub steps: usize,
    /// Share of sequences in the probe's training split.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.1,
            steps: 500,
            train_fraction: 0.8,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("probe lr must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("probe train_fraction must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Frame features with their labels and owning sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub groups: Vec<usize>,
}

impl ProbeData {
    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

const FEATURE_CHUNK: usize = 8;

/// Student features of every frame, without gradients.
pub fn extract_features(params: &ParamStore, enc: &EncoderConfig, data: &[Sequence]) -> Result<ProbeData> {
    let student = Encoder::student(enc);
    let refs: Vec<&Sequence> = data.iter().collect();
    let chunks: Vec<Vec<crate::autograd::Tensor>> = refs
        .par_chunks(FEATURE_CHUNK)
        .map(|c| student.features(params, c))
        .collect::<Result<_>>()?;
    let mut out = ProbeData {
        features: Vec::new(),
        labels: Vec::new(),
        groups: Vec::new(),
    };
    for (g, (seq, feats)) in data.iter().zip(chunks.into_iter().flatten()).enumerate() {
        let labels = seq
            .labels
            .as_ref()
            .ok_or_else(|| Error::DegenerateLabels(format!("sequence {g} has no labels")))?;
        if feats.shape()[1] != enc.dim {
            return Err(Error::config("feature dim differs from encoder dim"));
        }
        for (row, &l) in feats.rows().into_iter().zip(labels) {
            out.features.push(row);
            out.labels.push(l);
            out.groups.push(g);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Held-out accuracy per class; `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub seed: u64,
    pub fingerprint: u64,
}

/// Splits sequence groups `train_fraction` / rest after a seeded shuffle.
pub fn split_groups(groups: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::config("probe needs at least two sequences"));
    }
    Pcg32::from_seed(seed).shuffle(&mut ids);
    let n_train = ((ids.len() as f64 * train_fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Multinomial logistic regression on standardized features, trained by
/// full-batch gradient descent from zero weights, scored on held-out
/// sequences.
pub fn linear_probe(data: &ProbeData, cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    cfg.validate()?;
    let n = data.features.len();
    if n == 0 || data.labels.len() != n || data.groups.len() != n {
        return Err(Error::EmptyInput("probe data is empty or ragged".into()));
    }
    let mut distinct = data.labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateLabels("probe needs at least two classes".into()));
    }
    let classes = *distinct.last().expect("nonempty") as usize + 1;
    let d = data.dim();
    if data.features.iter().any(|r| r.len() != d) {
        return Err(Error::config("probe features have inconsistent dims"));
    }
    let (train_groups, _) = split_groups(&data.groups, cfg.train_fraction, seed)?;
    let is_train: Vec<bool> = data
        .groups
        .iter()
        .map(|g| train_groups.binary_search(g).is_ok())
        .collect();
    let train: Vec<usize> = (0..n).filter(|&i| is_train[i]).collect();
    let test: Vec<usize> = (0..n).filter(|&i| !is_train[i]).collect();

    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, x) in mean.iter_mut().zip(&data.features[i]) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut std = vec![0.0; d];
    for &i in &train {
        for ((s, x), m) in std.iter_mut().zip(&data.features[i]).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / train.len() as f64).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    }
    let standardize = |i: usize| -> Vec<f64> {
        data.features[i]
            .iter()
            .zip(&mean)
            .zip(&std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();

    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let mut probs = vec![0.0; classes];
    let inv = 1.0 / train.len() as f64;
    for _ in 0..cfg.steps {
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        for (x, &i) in xs.iter().zip(&train) {
            softmax_scores(x, &w, &b, classes, &mut probs);
            probs[data.labels[i] as usize] -= 1.0;
            for (k, &x_k) in x.iter().enumerate() {
                let row = &mut gw[k * classes..(k + 1) * classes];
                for (g, p) in row.iter_mut().zip(&probs) {
                    *g += x_k * p;
                }
            }
            for (g, p) in gb.iter_mut().zip(&probs) {
                *g += p;
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * g * inv;
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= cfg.lr * g * inv;
        }
    }
    if !w.iter().chain(&b).all(|v| v.is_finite()) {
        return Err(Error::Numeric("probe weights diverged".into()));
    }

    let mut correct = 0;
    let mut class_total = vec![0usize; classes];
    let mut class_correct = vec![0usize; classes];
    for &i in &test {
        softmax_scores(&standardize(i), &w, &b, classes, &mut probs);
        let mut best = 0;
        for c in 1..classes {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        let truth = data.labels[i] as usize;
        class_total[truth] += 1;
        if best == truth {
            correct += 1;
            class_correct[truth] += 1;
        }
    }
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        correct,
        total: test.len(),
        per_class: class_total
            .iter()
            .zip(&class_correct)
            .map(|(&t, &c)| (t > 0).then(|| c as f64 / t as f64))
            .collect(),
        seed,
        fingerprint: 0,
    })
}

fn softmax_scores(x: &[f64], w: &[f64], b: &[f64], classes: usize, out: &mut [f64]) {
    out.copy_from_slice(b);
    for (k, &xk) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(&w[k * classes..(k + 1) * classes]) {
            *o += xk * wv;
        }
    }
    let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// One grid cell: a label and the full configuration it runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub cell_label: String,
    pub seed: u64,
    pub probe_acc: f64,
    pub final_l_total: f64,
    pub epochs: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<ReportRow>,
    /// `(label, fingerprint, canonical config text)` per cell.
    pub cells: Vec<(String, u64, String)>,
}

pub const REPORT_HEADER: &str = "cell_label,seed,probe_acc,final_L_total,epochs,wall_seconds";

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.cell_label, r.seed, r.probe_acc, r.final_l_total, r.epochs, r.wall_seconds
            );
        }
        s
    }

    /// Each cell's configuration, prefixed by its label and fingerprint.
    pub fn configs_text(&self) -> String {
        let mut s = String::new();
        for (label, fp, text) in &self.cells {
            let _ = writeln!(s, "# cell {label} fingerprint {fp:016x}\n{text}");
        }
        s
    }
}

type Axis = (&'static str, Vec<&'static str>);

fn axes() -> Vec<Axis> {
    vec![
        ("strategy", vec!["c2p", "c2c", "p2p"]),
        ("window", vec!["1", "3", "5", "pm2"]),
        ("views", vec!["trajectory", "random"]),
        ("teacher", vec!["asymmetric", "symmetric"]),
        ("predictor", vec!["frame-wise", "single"]),
    ]
}

fn apply_axis(cfg: &mut RunConfig, axis: &str, value: &str) -> Result<()> {
    let d = &mut cfg.distill;
    match (axis, value) {
        ("strategy", "c2p") => d.strategy = Strategy::C2p,
        ("strategy", "c2c") => d.strategy = Strategy::C2c,
        ("strategy", "p2p") => d.strategy = Strategy::P2p,
        ("window", w) => {
            let spec = match w {
                "1" => WindowSpec::window1(),
                "3" => WindowSpec::window3(),
                "5" => WindowSpec::window5(),
                "pm2" => WindowSpec::plus_minus2(),
                _ => return Err(Error::Usage(format!("unknown window `{w}`"))),
            };
            *d = d.clone().with_window(&spec);
        }
        ("views", "trajectory") => d.views = ViewMode::Trajectory,
        ("views", "random") => d.views = ViewMode::Random,
        ("teacher", "asymmetric") => d.teacher = TeacherArch::Asymmetric,
        ("teacher", "symmetric") => d.teacher = TeacherArch::Symmetric,
        ("predictor", "frame-wise") => d.predictor = PredictorMode::FrameWise,
        ("predictor", "single") => d.predictor = PredictorMode::Single,
        _ => return Err(Error::Usage(format!("unknown grid value {axis}={value}"))),
    }
    Ok(())
}

/// Expands a grid description into cells. `base` (or an empty string) is the base
/// configuration alone, `full` crosses every axis, and otherwise the string
/// lists axes as `axis=v1,v2;axis=v1`. Axes are crossed in the fixed order
/// strategy, window, views, teacher, predictor.
pub fn parse_grid(spec: &str, base: &RunConfig) -> Result<Vec<Cell>> {
    let spec = spec.trim();
    let all = axes();
    let chosen: Vec<(&str, Vec<String>)> = if spec.is_empty() || spec == "base" {
        Vec::new()
    } else if spec == "full" {
        all.iter()
            .map(|(a, v)| (*a, v.iter().map(|s| s.to_string()).collect()))
            .collect()
    } else {
        let mut out: Vec<(&str, Vec<String>)> = Vec::new();
        for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
            let (axis, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("grid entry `{part}` lacks `=`")))?;
            let axis = all
                .iter()
                .map(|(a, _)| *a)
                .find(|a| *a == axis.trim())
                .ok_or_else(|| Error::Usage(format!("unknown grid axis `{}`", axis.trim())))?;
            if out.iter().any(|(a, _)| *a == axis) {
                return Err(Error::Usage(format!("grid axis `{axis}` given twice")));
            }
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(Error::Usage(format!("grid axis `{axis}` has no values")));
            }
            out.push((axis, values));
        }
        out.sort_by_key(|(a, _)| all.iter().position(|(b, _)| b == a));
        out
    };
    let mut cells = vec![Cell {
        label: "base".into(),
        config: base.clone(),
    }];
    for (axis, values) in &chosen {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut config = cell.config.clone();
                apply_axis(&mut config, axis, v)?;
                let label = if cell.label == "base" {
                    format!("{axis}={v}")
                } else {
                    format!("{}/{axis}={v}", cell.label)
                };
                next.push(Cell { label, config });
            }
        }
        cells = next;
    }
    for c in &cells {
        c.config.validate()?;
    }
    Ok(cells)
}

/// Pretrains from a fresh init and returns the final state and the mean
/// `L_total` of the last epoch (NaN with zero epochs).
pub fn pretrain_quiet(data: &[Sequence], cfg: &RunConfig, seed: u64) -> Result<(TrainState, f64)> {
    let model = Model::new(&cfg.encoder, &cfg.distill);
    let state = TrainState::new(model.init(seed)?);
    let report = pretrain(data, cfg, seed, state, &mut std::io::sink(), &mut |_| Ok(()))?;
    let last = report.epoch_means.last().copied().unwrap_or(f64::NAN);
    Ok((report.state, last))
}

/// Pretrain then probe every cell for every seed. Cells run in parallel;
/// rows come out in (cell, seed) order. `timing` records wall time,
/// otherwise the column holds 0 so reports are reproducible.
pub fn run_ablation(cells: &[Cell], data: &[Sequence], seeds: &[u64], timing: bool) -> Result<AblationReport> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one cell and one seed"));
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rows: Vec<ReportRow> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cell = &cells[c];
            let start = Instant::now();
            let (state, last) = pretrain_quiet(data, &cell.config, seed)?;
            let feats = extract_features(&state.params, &cell.config.encoder, data)?;
            let probe = linear_probe(&feats, &cell.config.probe, seed)?;
            Ok(ReportRow {
                cell_label: cell.label.clone(),
                seed,
                probe_acc: probe.accuracy,
                final_l_total: last,
                epochs: cell.config.train.epochs,
                wall_seconds: if timing { start.elapsed().as_secs_f64() } else { 0.0 },
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        rows,
        cells: cells
            .iter()
            .map(|c| (c.label.clone(), c.config.fingerprint(), c.config.to_toml()))
            .collect(),
    })
}

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.1, 0.2, 0.4, 0.8];

/// Sequences used for pretraining at `fraction`: `round(fraction · N)` of
/// them, drawn by `seed`, in ascending order.
pub fn fraction_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction {fraction} outside (0, 1]")));
    }
    let count = (fraction * n as f64).round() as usize;
    if count == 0 {
        return Err(Error::config(format!(
            "fraction {fraction} of {n} sequences selects none"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    Pcg32::from_seed(derive_seed(seed, 0x6672_6163)).shuffle(&mut ids);
    let mut out = ids[..count].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// For each fraction, pretrains on a subset of the sequences and probes
/// the whole dataset with the fixed probe split; a random-init student is
/// probed alongside. Rows are labeled `fraction=<f>/init=<pretrained|random>`.
pub fn data_fraction_run(
    fractions: &[f64],
    cfg: &RunConfig,
    data: &[Sequence],
    seeds: &[u64],
    timing: bool,
) -> Result<AblationReport> {
    if fractions.is_empty() || seeds.is_empty() {
        return Err(Error::config("data-fraction run needs fractions and seeds"));
    }
    for &f in fractions {
        fraction_subset(data.len(), f, 0)?;
    }
    let jobs: Vec<(f64, u64)> = fractions
        .iter()
        .flat_map(|&f| seeds.iter().map(move |&s| (f, s)))
        .collect();
    let pairs: Vec<[ReportRow; 2]> = jobs
        .par_iter()
        .map(|&(f, seed)| {
            let start = Instant::now();
            let subset: Vec<Sequence> = fraction_subset(data.len(), f, seed)?
                .into_iter()
                .map(|i| data[i].clone())
                .collect();
            let (state, last) = pretrain_quiet(&subset, cfg, seed)?;
            let feats = extract_features(&state.params, &cfg.encoder, data)?;
            let pre = linear_probe(&feats, &cfg.probe, seed)?;
            let pre_secs = start.elapsed().as_secs_f64();
            let start = Instant::now();
            let init = Model::new(&cfg.encoder, &cfg.distill).init(seed)?;
            let feats = extract_features(&init, &cfg.encoder, data)?;
            let rnd = linear_probe(&feats, &cfg.probe, seed)?;
            let rnd_secs = start.elapsed().as_secs_f64();
            let row = |init: &str, acc: f64, loss: f64, epochs: usize, secs: f64| ReportRow {
                cell_label: format!("fraction={f}/init={init}"),
                seed,
                probe_acc: acc,
                final_l_total: loss,
                epochs,
                wall_seconds: if timing { secs } else { 0.0 },
            };
            Ok([
                row("pretrained", pre.accuracy, last, cfg.train.epochs, pre_secs),
                row("random", rnd.accuracy, f64::NAN, 0, rnd_secs),
            ])
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        rows.extend(p);
    }
    Ok(AblationReport {
        rows,
        cells: vec![("data-fraction".into(), cfg.fingerprint(), cfg.to_toml())],
    })
}
