//! Frame-level encoders. The teacher aggregates each frame on its own; the
//! student shares that local stage shape and adds position embeddings plus
//! a temporal attention block across frames. Predictor heads map student
//! features to temporally offset teacher features.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{
    attention, linear, BoundParams, ParamStore, SegmentKind, Tape, Tensor, Var, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::geometry::{dist2, sub, PointCloudFrame, Sequence};
use crate::rng::Pcg32;

/// Rows are normalized with this floor; an all-zero row stays zero.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Anchors per frame are `points / spatial_stride`, at least one.
    pub spatial_stride: usize,
    /// Fixed anchor count overriding the stride rule when nonzero.
    pub anchors: usize,
    pub radius: f64,
    pub neighbors: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Size of the position embedding table.
    pub max_frames: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            spatial_stride: 32,
            anchors: 0,
            radius: 0.9,
            neighbors: 32,
            dim: 64,
            heads: 4,
            layers: 1,
            ffn_dim: 128,
            max_frames: 64,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_stride == 0 || self.neighbors == 0 {
            return Err(Error::config("spatial_stride and neighbors must be >= 1"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::config("ball radius must be positive"));
        }
        if self.dim == 0 || self.ffn_dim == 0 || self.max_frames == 0 {
            return Err(Error::config("dim, ffn_dim and max_frames must be >= 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Anchor count for a frame of `n` points (zero only for empty frames).
    pub fn anchors_for(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else if self.anchors > 0 {
            self.anchors.min(n)
        } else {
            (n / self.spatial_stride).max(1)
        }
    }
}

/// Greedy farthest point sampling from index 0; ties go to the lowest index.
pub fn farthest_point_sample(frame: &PointCloudFrame, count: usize) -> Result<Vec<usize>> {
    let n = frame.len();
    if count > n {
        return Err(Error::config(format!(
            "cannot sample {count} anchors from {n} points"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let pts = &frame.points;
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(count);
    let mut cur = 0;
    loop {
        out.push(cur);
        chosen[cur] = true;
        if out.len() == count {
            return Ok(out);
        }
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let d = dist2(pts[i], pts[cur]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
}

/// Up to `k` indices within `radius` of `frame[anchor]` in ascending order,
/// padded with the first one found.
pub fn ball_query(frame: &PointCloudFrame, anchor: usize, radius: f64, k: usize) -> Vec<usize> {
    let c = frame.points[anchor];
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(k);
    for (i, p) in frame.points.iter().enumerate() {
        if dist2(*p, c) <= r2 {
            out.push(i);
            if out.len() == k {
                return out;
            }
        }
    }
    let pad = out.first().copied().unwrap_or(anchor);
    out.resize(k, pad);
    out
}

/// Neighbor offsets of every anchor of a group of frames, ready for the
/// shared perceptron: rows are `(frame, anchor, neighbor)` in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhoods {
    pub offsets: Tensor,
    pub anchors_per_frame: Vec<usize>,
    pub k: usize,
}

impl Neighborhoods {
    pub fn frames(&self) -> usize {
        self.anchors_per_frame.len()
    }
}

fn frame_offsets(frame: &PointCloudFrame, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    let anchors = farthest_point_sample(frame, cfg.anchors_for(frame.len()))?;
    let mut out = Vec::with_capacity(anchors.len() * cfg.neighbors * 3);
    for &a in &anchors {
        let c = frame.points[a];
        for j in ball_query(frame, a, cfg.radius, cfg.neighbors) {
            out.extend_from_slice(&sub(frame.points[j], c));
        }
    }
    Ok(out)
}

pub fn neighborhoods<'a, I>(frames: I, cfg: &EncoderConfig) -> Result<Neighborhoods>
where
    I: IntoIterator<Item = &'a PointCloudFrame>,
{
    cfg.validate()?;
    let frames: Vec<&PointCloudFrame> = frames.into_iter().collect();
    let parts: Vec<Vec<f64>> = frames
        .par_iter()
        .map(|f| frame_offsets(f, cfg))
        .collect::<Result<_>>()?;
    let anchors_per_frame = frames.iter().map(|f| cfg.anchors_for(f.len())).collect();
    let data = parts.concat();
    let rows = data.len() / 3;
    Ok(Neighborhoods {
        offsets: Tensor::new(vec![rows, 3], data)?,
        anchors_per_frame,
        k: cfg.neighbors,
    })
}

/// Shared per-point perceptron `3 → d → d` on neighbor offsets, then the
/// max over each anchor's neighbors: one `[anchors, d]` row block.
pub fn local_aggregate(
    tape: &mut Tape,
    params: &BoundParams,
    prefix: &str,
    nb: &Neighborhoods,
) -> Result<Var> {
    let w1 = params.get(&format!("{prefix}.local.w1"))?;
    let b1 = params.get(&format!("{prefix}.local.b1"))?;
    let w2 = params.get(&format!("{prefix}.local.w2"))?;
    let b2 = params.get(&format!("{prefix}.local.b2"))?;
    let d = tape.value(w2).shape()[1];
    let total: usize = nb.anchors_per_frame.iter().sum();
    if total == 0 {
        return Ok(tape.constant(Tensor::zeros(&[0, d])));
    }
    let x = tape.constant(nb.offsets.clone());
    let h = linear(tape, x, w1, b1)?;
    let h = tape.relu(h)?;
    let h = linear(tape, h, w2, b2)?;
    let h = tape.reshape(h, &[total, nb.k, d])?;
    tape.max_pool(h, 1)
}

/// Unnormalized per-frame features `[frames, d]`; empty frames give zeros.
fn pooled_frames(
    tape: &mut Tape,
    params: &BoundParams,
    prefix: &str,
    nb: &Neighborhoods,
    pooling: Pooling,
) -> Result<Var> {
    let per_anchor = local_aggregate(tape, params, prefix, nb)?;
    let kind = match pooling {
        Pooling::Mean => SegmentKind::Mean,
        Pooling::Max => SegmentKind::Max,
    };
    tape.segment(per_anchor, &nb.anchors_per_frame, kind)
}

/// A frame-level encoder: the local stage, optionally followed by position
/// embeddings and temporal attention blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub prefix: String,
    pub cfg: EncoderConfig,
    pub temporal: bool,
}

impl Encoder {
    pub fn teacher(cfg: &EncoderConfig) -> Self {
        Encoder {
            prefix: "teacher".into(),
            cfg: cfg.clone(),
            temporal: false,
        }
    }

    /// Teacher with the student's architecture (weights still separate).
    pub fn symmetric_teacher(cfg: &EncoderConfig) -> Self {
        Encoder {
            temporal: true,
            ..Encoder::teacher(cfg)
        }
    }

    pub fn student(cfg: &EncoderConfig) -> Self {
        Encoder {
            prefix: "student".into(),
            cfg: cfg.clone(),
            temporal: true,
        }
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    /// Uniform `±1/√fan_in` weights, layer-norm gains of one and zero biases
    /// where a layer norm sits.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Pcg32) -> Result<()> {
        self.cfg.validate()?;
        let d = self.cfg.dim;
        store.init_uniform(&self.name("local.w1"), &[3, d], 3, rng);
        store.init_uniform(&self.name("local.b1"), &[d], 3, rng);
        store.init_uniform(&self.name("local.w2"), &[d, d], d, rng);
        store.init_uniform(&self.name("local.b2"), &[d], d, rng);
        if !self.temporal {
            return Ok(());
        }
        store.init_uniform(&self.name("pos"), &[self.cfg.max_frames, d], d, rng);
        let f = self.cfg.ffn_dim;
        for l in 0..self.cfg.layers {
            let b = |s: &str| self.name(&format!("block{l}.{s}"));
            store.insert(b("ln1.g"), Tensor::filled(&[d], 1.0));
            store.insert(b("ln1.b"), Tensor::zeros(&[d]));
            for m in ["wq", "wk", "wv", "wo"] {
                store.init_uniform(&b(&format!("attn.{m}")), &[d, d], d, rng);
                store.init_uniform(&b(&format!("attn.{m}_b")), &[d], d, rng);
            }
            store.insert(b("ln2.g"), Tensor::filled(&[d], 1.0));
            store.insert(b("ln2.b"), Tensor::zeros(&[d]));
            store.init_uniform(&b("ffn.w1"), &[d, f], d, rng);
            store.init_uniform(&b("ffn.b1"), &[f], d, rng);
            store.init_uniform(&b("ffn.w2"), &[f, d], f, rng);
            store.init_uniform(&b("ffn.b2"), &[d], f, rng);
        }
        Ok(())
    }

    /// Frame features for a group of sequences, stacked as `[ΣL, d]` with
    /// unit rows. `lens` gives the frame count of each sequence in `nb`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        nb: &Neighborhoods,
        lens: &[usize],
    ) -> Result<Var> {
        if lens.iter().sum::<usize>() != nb.frames() {
            return Err(Error::shape(format!(
                "sequence lengths sum to {} for {} frames",
                lens.iter().sum::<usize>(),
                nb.frames()
            )));
        }
        let mut x = pooled_frames(tape, params, &self.prefix, nb, self.cfg.pooling)?;
        if self.temporal {
            x = self.temporal_stage(tape, params, x, lens)?;
        }
        tape.l2_normalize(x, 1, NORMALIZE_EPS)
    }

    fn temporal_stage(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: Var,
        lens: &[usize],
    ) -> Result<Var> {
        let longest = lens.iter().copied().max().unwrap_or(0);
        if longest > self.cfg.max_frames {
            return Err(Error::config(format!(
                "sequence of {longest} frames exceeds max_frames {}",
                self.cfg.max_frames
            )));
        }
        let positions: Vec<usize> = lens.iter().flat_map(|&l| 0..l).collect();
        let pos = params.get(&self.name("pos"))?;
        let pos = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(x, pos)?;
        for l in 0..self.cfg.layers {
            let p = |s: &str| params.get(&self.name(&format!("block{l}.{s}")));
            let h = tape.layer_norm(x, p("ln1.g")?, p("ln1.b")?, LAYER_NORM_EPS)?;
            let q = linear(tape, h, p("attn.wq")?, p("attn.wq_b")?)?;
            let k = linear(tape, h, p("attn.wk")?, p("attn.wk_b")?)?;
            let v = linear(tape, h, p("attn.wv")?, p("attn.wv_b")?)?;
            let mut parts = Vec::with_capacity(lens.len());
            let mut start = 0;
            for &len in lens {
                if len == 0 {
                    continue;
                }
                let qs = tape.narrow(q, 0, start, len)?;
                let ks = tape.narrow(k, 0, start, len)?;
                let vs = tape.narrow(v, 0, start, len)?;
                parts.push(attention(tape, qs, ks, vs, self.cfg.heads)?);
                start += len;
            }
            let a = if parts.len() == 1 {
                parts[0]
            } else {
                tape.concat(&parts, 0)?
            };
            let a = linear(tape, a, p("attn.wo")?, p("attn.wo_b")?)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, p("ln2.g")?, p("ln2.b")?, LAYER_NORM_EPS)?;
            let h = linear(tape, h, p("ffn.w1")?, p("ffn.b1")?)?;
            let h = tape.relu(h)?;
            let h = linear(tape, h, p("ffn.w2")?, p("ffn.b2")?)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    /// Gradient-free features of each sequence, one `[L, d]` tensor apiece.
    pub fn features(&self, params: &ParamStore, seqs: &[&Sequence]) -> Result<Vec<Tensor>> {
        let nb = neighborhoods(seqs.iter().flat_map(|s| s.frames.iter()), &self.cfg)?;
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let mut tape = Tape::new();
        let bound = params.with_prefix(&format!("{}.", self.prefix)).bind(&mut tape, |_| false);
        let out = self.forward(&mut tape, &bound, &nb, &lens)?;
        let value = tape.value(out);
        let d = value.shape()[1];
        let mut start = 0;
        lens.iter()
            .map(|&l| {
                let rows = value.data()[start * d..(start + l) * d].to_vec();
                start += l;
                Tensor::new(vec![l, d], rows)
            })
            .collect()
    }
}

/// Per-frame teacher features of one sequence.
pub fn teacher_forward(params: &ParamStore, cfg: &EncoderConfig, seq: &Sequence) -> Result<Tensor> {
    Ok(Encoder::teacher(cfg).features(params, &[seq])?.remove(0))
}

/// Per-frame student features of one sequence.
pub fn student_forward(params: &ParamStore, cfg: &EncoderConfig, seq: &Sequence) -> Result<Tensor> {
    Ok(Encoder::student(cfg).features(params, &[seq])?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorMode {
    /// One head per nonzero time offset.
    FrameWise,
    /// One head shared by every offset.
    Single,
}

/// Heads `linear → layer_norm → relu → linear`, each `d → d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictors {
    pub offsets: Vec<i64>,
    pub mode: PredictorMode,
    pub dim: usize,
}

impl Predictors {
    pub fn new(window: &[i64], mode: PredictorMode, dim: usize) -> Self {
        Predictors {
            offsets: window.iter().copied().filter(|&o| o != 0).collect(),
            mode,
            dim,
        }
    }

    fn head(&self, offset: i64) -> Result<String> {
        if offset == 0 || !self.offsets.contains(&offset) {
            return Err(Error::config(format!("no predictor for offset {offset}")));
        }
        Ok(match self.mode {
            PredictorMode::Single => "pred.shared".into(),
            PredictorMode::FrameWise if offset < 0 => format!("pred.m{}", -offset),
            PredictorMode::FrameWise => format!("pred.p{offset}"),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Pcg32) -> Result<()> {
        let d = self.dim;
        let mut heads: Vec<String> = self
            .offsets
            .iter()
            .map(|&o| self.head(o))
            .collect::<Result<_>>()?;
        heads.dedup();
        for h in heads {
            store.init_uniform(&format!("{h}.w1"), &[d, d], d, rng);
            store.init_uniform(&format!("{h}.b1"), &[d], d, rng);
            store.insert(format!("{h}.ln.g"), Tensor::filled(&[d], 1.0));
            store.insert(format!("{h}.ln.b"), Tensor::zeros(&[d]));
            store.init_uniform(&format!("{h}.w2"), &[d, d], d, rng);
            store.init_uniform(&format!("{h}.b2"), &[d], d, rng);
        }
        Ok(())
    }

    /// Applies the head for `offset` to every row of `x`.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var, offset: i64) -> Result<Var> {
        let h = self.head(offset)?;
        let p = |s: &str| params.get(&format!("{h}.{s}"));
        let y = linear(tape, x, p("w1")?, p("b1")?)?;
        let y = tape.layer_norm(y, p("ln.g")?, p("ln.b")?, LAYER_NORM_EPS)?;
        let y = tape.relu(y)?;
        linear(tape, y, p("w2")?, p("b2")?)
    }
}

/// One predictor head on a single feature vector.
pub fn predictor_forward(
    params: &ParamStore,
    predictors: &Predictors,
    f: &[f64],
    offset: i64,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.with_prefix("pred.").bind(&mut tape, |_| false);
    let x = tape.constant(Tensor::new(vec![1, f.len()], f.to_vec())?);
    let y = predictors.forward(&mut tape, &bound, x, offset)?;
    Ok(tape.value(y).data().to_vec())
}
