//! Distillation objectives over masked frames.
//!
//! Two losses share one graph-fragment implementation: an L2 regression on
//! masked frames and a contrastive objective that classifies each masked
//! teacher frame against distractors drawn from the same utterance's other
//! masked frames. Normalized mode divides per-layer sums by the masked
//! count (and the L2 loss additionally by the width); the per-layer mean
//! over layers and the batch mean over utterances are applied on top.
//!
//! Cross-width students project each tap through a per-layer affine head
//! that is trained jointly and discarded after distillation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sc, Bindings, GraphBuilder, NodeId, Scalar, Tensor};
use crate::encoder::{ParamSet, TapKind, TapSet};
use crate::error::{Error, Result};
use crate::mapping::LayerMap;
use crate::masking::MaskSpec;
use crate::optim::{AdamHyper, Schedule};
use crate::rng::SeedTree;

/// Which objective drives distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    L2,
}

/// How student taps are brought to the teacher's width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// One affine head per mapped layer.
    LinearPerLayer,
    /// No projection; requires matching widths.
    None,
}

fn default_true() -> bool {
    true
}
fn default_tau() -> f64 {
    0.1
}
fn default_k() -> usize {
    100
}
fn default_mask_prob() -> f64 {
    0.065
}
fn default_mask_span() -> usize {
    10
}
fn default_batch() -> usize {
    8
}
fn default_collapse_every() -> usize {
    10
}
fn default_checkpoint_every() -> usize {
    500
}
fn default_clip() -> Option<f64> {
    Some(10.0)
}
fn default_tap() -> TapKind {
    TapKind::Ffn2
}
fn default_projection() -> ProjectionKind {
    ProjectionKind::LinearPerLayer
}
fn default_loss() -> LossKind {
    LossKind::Contrastive
}
fn default_teacher_init() -> crate::encoder::TeacherInit {
    crate::encoder::TeacherInit::Random
}

/// Every knob of one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_loss")]
    pub loss_kind: LossKind,
    /// Softmax temperature of the contrastive objective.
    #[serde(default = "default_tau")]
    pub temperature: f64,
    /// Distractor count K.
    #[serde(default = "default_k")]
    pub distractors: usize,
    /// Which teacher representation serves as the target.
    #[serde(default = "default_tap")]
    pub tap_kind: TapKind,
    /// Instance-normalize teacher targets per utterance and channel.
    #[serde(default)]
    pub target_instance_norm: bool,
    #[serde(default = "default_projection")]
    pub projection: ProjectionKind,
    /// Per-layer and per-mask normalization (the batch-training form).
    /// Disable for the raw per-utterance sums.
    #[serde(default = "default_true")]
    pub normalized: bool,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default = "default_mask_span")]
    pub mask_span: usize,
    pub schedule: Schedule,
    #[serde(default)]
    pub adam: AdamHyper,
    /// Global gradient-norm clip; null disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_utterances: usize,
    /// Collapse metric cadence in steps.
    #[serde(default = "default_collapse_every")]
    pub collapse_every: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_teacher_init")]
    pub init_from_teacher: crate::encoder::TeacherInit,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config(format!(
                "mask_prob {} outside [0, 1]",
                self.mask_prob
            )));
        }
        if self.mask_span < 1 {
            return Err(Error::config("mask_span must be >= 1".to_string()));
        }
        if self.batch_utterances == 0 {
            return Err(Error::config("batch_utterances must be >= 1".to_string()));
        }
        if self.collapse_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config(
                "collapse_every and checkpoint_every must be >= 1".to_string(),
            ));
        }
        self.schedule.validate()
    }
}

/// Per-mapped-layer affine maps from student width to teacher width.
///
/// Empty when the widths match and no projection is configured.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads<T: Scalar> {
    kind: ProjectionKind,
    params: ParamSet<T>,
    student_dim: usize,
    teacher_dim: usize,
}

impl<T: Scalar> ProjectionHeads<T> {
    pub fn build(
        map: &LayerMap,
        student_dim: usize,
        teacher_dim: usize,
        kind: ProjectionKind,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        match kind {
            ProjectionKind::None => {
                if student_dim != teacher_dim {
                    return Err(Error::config(format!(
                        "projection 'none' needs matching widths, got {student_dim} vs {teacher_dim}"
                    )));
                }
            }
            ProjectionKind::LinearPerLayer => {
                let tree = SeedTree::new(seed);
                let a = 1.0 / (student_dim as f64).sqrt();
                for &(l, _) in &map.pairs {
                    let mut rng = tree.stream(&format!("head/{l}"), &[]);
                    let w: Vec<T> = (0..student_dim * teacher_dim)
                        .map(|_| sc(a * (2.0 * rng.gen::<f64>() - 1.0)))
                        .collect();
                    params.push(
                        format!("head{l}.w"),
                        Tensor::from_parts(vec![student_dim, teacher_dim], w, false),
                    );
                    params.push(format!("head{l}.b"), Tensor::zeros(vec![teacher_dim]));
                }
            }
        }
        Ok(ProjectionHeads {
            kind,
            params,
            student_dim,
            teacher_dim,
        })
    }

    pub(crate) fn from_parts(
        kind: ProjectionKind,
        params: ParamSet<T>,
        student_dim: usize,
        teacher_dim: usize,
    ) -> Self {
        ProjectionHeads {
            kind,
            params,
            student_dim,
            teacher_dim,
        }
    }

    pub fn kind(&self) -> ProjectionKind {
        self.kind
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn student_dim(&self) -> usize {
        self.student_dim
    }

    pub fn teacher_dim(&self) -> usize {
        self.teacher_dim
    }

    pub fn bind_params(&self, binds: &mut Bindings<T>, requires_grad: bool) {
        for (name, tensor) in self.params.iter() {
            let t = if requires_grad {
                tensor.clone().with_grad()
            } else {
                tensor.clone()
            };
            binds.insert(name, t);
        }
    }

    /// Project one utterance's tap values outside any graph.
    pub fn apply(&self, layer: usize, tap: &Tensor<T>) -> Result<Tensor<T>> {
        match self.kind {
            ProjectionKind::None => Ok(tap.clone()),
            ProjectionKind::LinearPerLayer => {
                let w = self
                    .params
                    .get(&format!("head{layer}.w"))
                    .ok_or_else(|| Error::usage(format!("no head for layer {layer}")))?;
                let b = self.params.get(&format!("head{layer}.b")).unwrap();
                let mut gb = GraphBuilder::<T>::new();
                let x = gb.constant(tap.clone());
                let wn = gb.constant(w.clone());
                let bn = gb.constant(b.clone());
                let h = gb.matmul(x, wn)?;
                let y = gb.add_row(h, bn)?;
                gb.output("y", y)?;
                let graph = gb.finish();
                Ok(graph.forward(&Bindings::new())?.output("y")?.clone())
            }
        }
    }

    /// Graph input nodes for every head parameter.
    pub(crate) fn declare(&self, gb: &mut GraphBuilder<T>) -> Result<Vec<(String, NodeId)>> {
        let mut nodes = Vec::new();
        for (name, tensor) in self.params.iter() {
            let id = gb.input(name, tensor.shape().to_vec())?;
            nodes.push((name.to_string(), id));
        }
        Ok(nodes)
    }

    pub(crate) fn head_nodes(
        nodes: &[(String, NodeId)],
        layer: usize,
    ) -> Option<(NodeId, NodeId)> {
        let w = nodes.iter().find(|(n, _)| n == &format!("head{layer}.w"))?;
        let b = nodes.iter().find(|(n, _)| n == &format!("head{layer}.b"))?;
        Some((w.1, b.1))
    }
}

/// Uniform sample without replacement from the masked set minus `t`.
///
/// Returns `min(k, |masked| - 1)` indices.
pub fn sample_distractors(
    mask: &MaskSpec,
    t: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if !mask.contains(t) {
        return Err(Error::usage(format!("frame {t} is not masked")));
    }
    let mut candidates: Vec<usize> = mask.masked.iter().copied().filter(|&i| i != t).collect();
    let take = k.min(candidates.len());
    // Partial Fisher-Yates: the first `take` slots become the sample.
    for i in 0..take {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    candidates.truncate(take);
    Ok(candidates)
}

/// Instance-normalize per channel across time (used on teacher targets).
pub fn instance_norm<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = x.rows_cols()?;
    let eps = sc::<T>(1e-5);
    let inv_n = T::one() / sc(rows as f64);
    let mut mean = vec![T::zero(); cols];
    for row in x.data().chunks_exact(cols) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m = *m * inv_n;
    }
    let mut var = vec![T::zero(); cols];
    for row in x.data().chunks_exact(cols) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&s| T::one() / (s * inv_n + eps).sqrt())
        .collect();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(cols) {
        for ((&v, &m), &is) in row.iter().zip(&mean).zip(&inv_std) {
            out.push((v - m) * is);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out, false))
}

/// Append the contrastive objective for one (utterance, layer) pair.
///
/// `z` is the student tap (already at teacher width if `head` is absent);
/// `h` is the same-shape teacher target. Returns a scalar node: the sum
/// over masked frames of the negative log-probability of the true teacher
/// frame among its distractors, divided by the masked count when
/// `normalized`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn append_contrastive_loss<T: Scalar>(
    gb: &mut GraphBuilder<T>,
    z: NodeId,
    h: NodeId,
    head: Option<(NodeId, NodeId)>,
    mask: &MaskSpec,
    k: usize,
    tau: f64,
    rng: &mut impl Rng,
    normalized: bool,
) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::usage(format!("temperature must be positive, got {tau}")));
    }
    let masked = &mask.masked;
    if masked.is_empty() {
        return Err(Error::usage("contrastive loss over an empty mask".to_string()));
    }
    let m = masked.len();
    let k_eff = k.min(m - 1);

    let zm = gb.gather_rows(z, masked.clone())?;
    let zm = match head {
        Some((w, b)) => {
            let p = gb.matmul(zm, w)?;
            gb.add_row(p, b)?
        }
        None => zm,
    };

    let mut candidate_rows = Vec::with_capacity(m * (k_eff + 1));
    let mut repeat_rows = Vec::with_capacity(m * (k_eff + 1));
    for (slot, &t) in masked.iter().enumerate() {
        candidate_rows.push(t);
        let distractors = sample_distractors(mask, t, k, rng)?;
        debug_assert_eq!(distractors.len(), k_eff);
        candidate_rows.extend(distractors);
        repeat_rows.extend(std::iter::repeat(slot).take(k_eff + 1));
    }

    let cands = gb.gather_rows(h, candidate_rows)?;
    let zrep = gb.gather_rows(zm, repeat_rows)?;
    let scores = gb.row_cosine(zrep, cands)?;
    let scores = gb.reshape(scores, vec![m, k_eff + 1])?;
    let scores = gb.scale(scores, sc(1.0 / tau));
    let logp = gb.log_softmax(scores)?;
    let positives = gb.slice_cols(logp, 0, 1)?;
    let total = gb.sum(positives);
    let loss = gb.scale(total, -T::one());
    Ok(if normalized {
        gb.scale(loss, sc(1.0 / m as f64))
    } else {
        loss
    })
}

/// Append the L2 regression objective for one (utterance, layer) pair.
/// Normalized mode divides by width times masked count.
pub(crate) fn append_l2_loss<T: Scalar>(
    gb: &mut GraphBuilder<T>,
    z: NodeId,
    h: NodeId,
    head: Option<(NodeId, NodeId)>,
    mask: &MaskSpec,
    teacher_dim: usize,
    normalized: bool,
) -> Result<NodeId> {
    let masked = &mask.masked;
    if masked.is_empty() {
        return Err(Error::usage("l2 loss over an empty mask".to_string()));
    }
    let m = masked.len();
    let zm = gb.gather_rows(z, masked.clone())?;
    let zm = match head {
        Some((w, b)) => {
            let p = gb.matmul(zm, w)?;
            gb.add_row(p, b)?
        }
        None => zm,
    };
    let hm = gb.gather_rows(h, masked.clone())?;
    let diff = gb.sub(zm, hm)?;
    let sq = gb.mul(diff, diff)?;
    let loss = gb.sum(sq);
    Ok(if normalized {
        gb.scale(loss, sc(1.0 / (teacher_dim * m) as f64))
    } else {
        loss
    })
}

/// Contrastive loss of one already-projected layer (value only).
pub fn contrastive_layer_loss<T: Scalar>(
    z: &Tensor<T>,
    h: &Tensor<T>,
    mask: &MaskSpec,
    k: usize,
    tau: f64,
    rng: &mut impl Rng,
    normalized: bool,
) -> Result<T> {
    if z.shape() != h.shape() {
        return Err(Error::usage(format!(
            "z shape {:?} does not match h shape {:?}",
            z.shape(),
            h.shape()
        )));
    }
    if mask.masked.is_empty() {
        return Ok(T::zero());
    }
    let mut gb = GraphBuilder::new();
    let zn = gb.constant(z.clone());
    let hn = gb.constant(h.clone());
    let loss = append_contrastive_loss(&mut gb, zn, hn, None, mask, k, tau, rng, normalized)?;
    gb.output("loss", loss)?;
    let graph = gb.finish();
    graph.forward(&Bindings::new())?.output("loss")?.item()
}

/// L2 loss of one already-projected layer (value only).
pub fn l2_layer_loss<T: Scalar>(
    z: &Tensor<T>,
    h: &Tensor<T>,
    mask: &MaskSpec,
    normalized: bool,
) -> Result<T> {
    if z.shape() != h.shape() {
        return Err(Error::usage(format!(
            "z shape {:?} does not match h shape {:?}",
            z.shape(),
            h.shape()
        )));
    }
    if mask.masked.is_empty() {
        return Ok(T::zero());
    }
    let (_, cols) = h.rows_cols()?;
    let mut gb = GraphBuilder::new();
    let zn = gb.constant(z.clone());
    let hn = gb.constant(h.clone());
    let loss = append_l2_loss(&mut gb, zn, hn, None, mask, cols, normalized)?;
    gb.output("loss", loss)?;
    let graph = gb.finish();
    graph.forward(&Bindings::new())?.output("loss")?.item()
}

/// One utterance's inputs to the batch objective.
pub struct UtteranceTaps<'a, T: Scalar> {
    pub student: &'a TapSet<T>,
    pub teacher: &'a TapSet<T>,
    pub mask: &'a MaskSpec,
}

/// Batch objective over full tap sets: projects student taps, sums
/// per-layer losses, divides by the layer count in normalized mode, and
/// averages over utterances that drew a non-empty mask.
pub fn total_loss<T: Scalar>(
    batch: &[UtteranceTaps<'_, T>],
    heads: &ProjectionHeads<T>,
    map: &LayerMap,
    cfg: &DistillConfig,
    rng: &mut impl Rng,
) -> Result<T> {
    let mut sum = T::zero();
    let mut counted = 0usize;
    for utt in batch {
        if utt.mask.masked.is_empty() {
            continue;
        }
        let mut utt_sum = T::zero();
        for &(student_layer, teacher_layer) in &map.pairs {
            let z = utt.student.layer(student_layer).ok_or_else(|| {
                Error::usage(format!("student taps missing layer {student_layer}"))
            })?;
            let h = utt.teacher.layer(teacher_layer).ok_or_else(|| {
                Error::usage(format!("teacher taps missing layer {teacher_layer}"))
            })?;
            let h = if cfg.target_instance_norm {
                instance_norm(h)?
            } else {
                h.clone()
            };
            let zp = heads.apply(student_layer, z)?;
            let layer_loss = match cfg.loss_kind {
                LossKind::Contrastive => contrastive_layer_loss(
                    &zp,
                    &h,
                    utt.mask,
                    cfg.distractors,
                    cfg.temperature,
                    rng,
                    cfg.normalized,
                )?,
                LossKind::L2 => l2_layer_loss(&zp, &h, utt.mask, cfg.normalized)?,
            };
            utt_sum += layer_loss;
        }
        if cfg.normalized {
            utt_sum = utt_sum / sc(map.pairs.len() as f64);
        }
        sum += utt_sum;
        counted += 1;
    }
    if counted == 0 {
        return Ok(T::zero());
    }
    Ok(sum / sc(counted as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_mask;
    use crate::rng::SeedTree;
    use proptest::prelude::*;

    fn mask_of(frame_count: usize, masked: Vec<usize>) -> MaskSpec {
        MaskSpec {
            frame_count,
            masked,
            start_prob: 0.5,
            span: 1,
        }
    }

    #[test]
    fn distractors_exclude_target_and_cap_at_available() {
        let mask = mask_of(300, (0..200).collect());
        let mut rng = SeedTree::new(1).stream("d", &[]);
        let d = sample_distractors(&mask, 5, 100, &mut rng).unwrap();
        assert_eq!(d.len(), 100);
        assert!(!d.contains(&5));
        let mut sorted = d.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 100, "distractors must be distinct");
    }

    #[test]
    fn no_candidates_gives_empty_list() {
        let mask = mask_of(10, vec![3]);
        let mut rng = SeedTree::new(1).stream("d", &[]);
        assert!(sample_distractors(&mask, 3, 100, &mut rng).unwrap().is_empty());
        assert!(sample_distractors(&mask, 4, 100, &mut rng).is_err());
    }

    #[test]
    fn k_zero_gives_empty_list() {
        let mask = mask_of(10, vec![1, 2, 3]);
        let mut rng = SeedTree::new(1).stream("d", &[]);
        assert!(sample_distractors(&mask, 2, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn singleton_mask_contrastive_loss_is_zero() {
        let z = Tensor::matrix(3, 2, vec![1.0f64, 0.0, 0.5, 0.5, 0.0, 1.0]).unwrap();
        let mask = mask_of(3, vec![1]);
        let mut rng = SeedTree::new(2).stream("d", &[]);
        let loss = contrastive_layer_loss(&z, &z, &mask, 100, 0.1, &mut rng, true).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn symmetric_two_candidate_case_is_log_two() {
        // Both cosines equal 0.5 for each masked frame, so the softmax is
        // uniform over two candidates at any temperature.
        let z = Tensor::matrix(2, 2, vec![1.0f64, 0.0, 1.0, 0.0]).unwrap();
        let s3 = 0.75f64.sqrt();
        let h = Tensor::matrix(2, 2, vec![0.5, s3, 0.5, -s3]).unwrap();
        let mask = mask_of(2, vec![0, 1]);
        for tau in [0.05, 0.1, 1.0, 7.3] {
            let mut rng = SeedTree::new(3).stream("d", &[]);
            let loss = contrastive_layer_loss(&z, &h, &mask, 1, tau, &mut rng, true).unwrap();
            assert!((loss - 2.0f64.ln()).abs() < 1e-12, "tau {tau}: loss {loss}");
        }
    }

    #[test]
    fn perfect_positive_and_worst_distractor_case() {
        // cos(z, h+) = 1 and cos(z, h-) = -1 at tau 0.1: the loss is
        // log(1 + e^-20) up to the cosine epsilon guard.
        let z = Tensor::matrix(2, 2, vec![1.0f64, 0.0, -1.0, 0.0]).unwrap();
        let h = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let mask = mask_of(2, vec![0, 1]);
        let mut rng = SeedTree::new(4).stream("d", &[]);
        let loss = contrastive_layer_loss(&z, &h, &mask, 1, 0.1, &mut rng, true).unwrap();
        let expect = (-20.0f64).exp().ln_1p();
        assert!((loss - expect).abs() < 1e-12, "loss {loss} vs {expect}");
    }

    #[test]
    fn l2_loss_hand_cases() {
        let z = Tensor::matrix(1, 2, vec![1.0f64, 0.0]).unwrap();
        let h = Tensor::matrix(1, 2, vec![0.0f64, 1.0]).unwrap();
        let mask = mask_of(1, vec![0]);
        let raw = l2_layer_loss(&z, &h, &mask, false).unwrap();
        assert!((raw - 2.0).abs() < 1e-15);
        let normalized = l2_layer_loss(&z, &h, &mask, true).unwrap();
        assert!((normalized - 1.0).abs() < 1e-15);
        let zero = l2_layer_loss(&z, &z, &mask, true).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn contrastive_is_scale_invariant() {
        let mut rng = SeedTree::new(5).stream("vals", &[]);
        let mut data = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                .collect()
        };
        let z = Tensor::matrix(6, 4, data(24)).unwrap();
        let h = Tensor::matrix(6, 4, data(24)).unwrap();
        let mask = mask_of(6, vec![0, 2, 3, 5]);
        let mut loss_rng = SeedTree::new(6).stream("d", &[]);
        let base = contrastive_layer_loss(&z, &h, &mask, 2, 0.1, &mut loss_rng, true).unwrap();

        // Rescale each row of z and h by an independent positive factor.
        let scale_rows = |t: &Tensor<f64>, offset: f64| {
            let (r, c) = t.rows_cols().unwrap();
            let mut v = t.data().to_vec();
            for i in 0..r {
                let s = 0.3 + offset * (i as f64 + 1.0);
                for x in v[i * c..(i + 1) * c].iter_mut() {
                    *x *= s;
                }
            }
            Tensor::matrix(r, c, v).unwrap()
        };
        let z2 = scale_rows(&z, 0.7);
        let h2 = scale_rows(&h, 1.3);
        let mut loss_rng2 = SeedTree::new(6).stream("d", &[]);
        let scaled = contrastive_layer_loss(&z2, &h2, &mask, 2, 0.1, &mut loss_rng2, true).unwrap();
        assert!(
            ((scaled - base) / base).abs() < 1e-6,
            "base {base} scaled {scaled}"
        );
    }

    #[test]
    fn total_loss_reduces_to_layer_loss_and_batch_mean() {
        use crate::encoder::TapSet;
        let map = crate::mapping::layer_map(2, 2).unwrap();
        let cfg = DistillConfig {
            loss_kind: LossKind::L2,
            projection: ProjectionKind::None,
            normalized: true,
            schedule: Schedule {
                peak_lr: 1e-4,
                warmup_steps: 1,
                total_steps: 10,
            },
            ..contrastive_defaults()
        };
        let heads = ProjectionHeads::build(&map, 2, 2, ProjectionKind::None, 0).unwrap();
        let mask = mask_of(1, vec![0]);
        let z = Tensor::matrix(1, 2, vec![1.0f64, 0.0]).unwrap();
        let h = Tensor::matrix(1, 2, vec![0.0f64, 1.0]).unwrap();
        let student = TapSet {
            kind: TapKind::BlockOutput,
            taps: vec![(1, z.clone()), (2, z.clone())],
        };
        let teacher = TapSet {
            kind: TapKind::Ffn2,
            taps: vec![(1, h.clone()), (2, z.clone())],
        };
        // Layer 1 contributes 1.0, layer 2 contributes 0, mean 0.5.
        let mut rng = SeedTree::new(7).stream("d", &[]);
        let one = total_loss(
            &[UtteranceTaps {
                student: &student,
                teacher: &teacher,
                mask: &mask,
            }],
            &heads,
            &map,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!((one - 0.5).abs() < 1e-12);

        // Two utterances with losses a and b average to (a+b)/2.
        let teacher_zero = TapSet {
            kind: TapKind::Ffn2,
            taps: vec![(1, z.clone()), (2, z.clone())],
        };
        let mut rng = SeedTree::new(7).stream("d", &[]);
        let two = total_loss(
            &[
                UtteranceTaps {
                    student: &student,
                    teacher: &teacher,
                    mask: &mask,
                },
                UtteranceTaps {
                    student: &student,
                    teacher: &teacher_zero,
                    mask: &mask,
                },
            ],
            &heads,
            &map,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!((two - 0.25).abs() < 1e-12);

        // Empty-mask utterances are skipped.
        let empty = MaskSpec::empty(1);
        let mut rng = SeedTree::new(7).stream("d", &[]);
        let skipped = total_loss(
            &[
                UtteranceTaps {
                    student: &student,
                    teacher: &teacher,
                    mask: &mask,
                },
                UtteranceTaps {
                    student: &student,
                    teacher: &teacher_zero,
                    mask: &empty,
                },
            ],
            &heads,
            &map,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!((skipped - 0.5).abs() < 1e-12);
    }

    fn contrastive_defaults() -> DistillConfig {
        DistillConfig {
            loss_kind: LossKind::Contrastive,
            temperature: 0.1,
            distractors: 100,
            tap_kind: TapKind::Ffn2,
            target_instance_norm: false,
            projection: ProjectionKind::LinearPerLayer,
            normalized: true,
            mask_prob: 0.065,
            mask_span: 10,
            schedule: Schedule {
                peak_lr: 1e-4,
                warmup_steps: 4000,
                total_steps: 200_000,
            },
            adam: AdamHyper::default(),
            clip_norm: Some(10.0),
            batch_utterances: 4,
            collapse_every: 10,
            checkpoint_every: 500,
            init_from_teacher: crate::encoder::TeacherInit::Random,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn contrastive_loss_is_bounded(seed in 0u64..5000) {
            let tree = SeedTree::new(seed);
            let mut rng = tree.stream("vals", &[]);
            let frames = 12usize;
            let dim = 5usize;
            let z_data: Vec<f64> = (0..frames * dim)
                .map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0))
                .collect();
            let h_data: Vec<f64> = (0..frames * dim)
                .map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0))
                .collect();
            let z = Tensor::matrix(frames, dim, z_data).unwrap();
            let h = Tensor::matrix(frames, dim, h_data).unwrap();
            let mask = sample_mask(frames, 0.4, 3, &mut tree.stream("mask", &[])).unwrap();
            prop_assume!(!mask.masked.is_empty());
            let k = 4usize;
            let tau = 0.1;
            let mut loss_rng = tree.stream("d", &[]);
            let loss = contrastive_layer_loss(&z, &h, &mask, k, tau, &mut loss_rng, true).unwrap();
            let k_eff = k.min(mask.masked.len() - 1);
            let upper = ((k_eff + 1) as f64).ln() + 2.0 / tau;
            prop_assert!(loss >= 0.0, "loss {} negative", loss);
            prop_assert!(loss <= upper, "loss {} above bound {}", loss, upper);
        }
    }
}
