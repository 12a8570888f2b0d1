//! The distillation training loop: frozen teacher, learnable student.
//!
//! Each step samples a batch of utterances and a fresh span mask per
//! utterance, runs the teacher unmasked and the student masked, scores the
//! student's projected taps against the teacher's targets, and applies one
//! Adam update under the warmup/decay schedule. The student forward and
//! the loss live in two chained graphs, with the student taps as the
//! explicit boundary; gradients cross it as seeded cotangents, which also
//! makes the masked-only gradient flow directly observable.
//!
//! All randomness derives from one root seed via named streams keyed by
//! step and utterance slot, so runs replay bitwise and checkpoints resume
//! exactly.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{Bindings, Gradients, GraphBuilder, Scalar, Tensor};
use crate::checkpoint::{blobs_to_params, params_to_blobs, read_container, write_container, Blob};
use crate::encoder::{
    append_forward, declare_params, init_student_from_teacher, Encoder, TapKind,
};
use crate::error::{Error, Result};
use crate::features::Corpus;
use crate::losses::{
    append_contrastive_loss, append_l2_loss, instance_norm, DistillConfig, LossKind,
    ProjectionHeads, ProjectionKind,
};
use crate::mapping::{layer_map, LayerMap};
use crate::masking::{sample_mask, MaskSpec};
use crate::optim::{adam_step_named, clip_global_norm, lr_at, OptimizerState};
use crate::rng::SeedTree;

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_per_layer: Vec<f64>,
    pub collapse: Option<f64>,
    pub elapsed_ms: u64,
}

/// Everything a run needs to continue: student, heads, optimizer moments,
/// the root seed, and the metric history so far.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: Encoder<f32>,
    pub heads: ProjectionHeads<f32>,
    pub optimizer: OptimizerState,
    pub root_seed: u64,
    pub step: u64,
    pub metrics: Vec<MetricRecord>,
}

impl TrainState {
    /// Persist to the checkpoint container format (parameters, heads,
    /// optimizer moments). Metric history is not persisted.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = serde_json::json!({
            "kind": "train_state",
            "step": self.step,
            "root_seed": self.root_seed,
            "optimizer_step": self.optimizer.step,
            "student_config": self.student.config(),
            "projection": self.heads.kind(),
            "student_dim": self.heads.student_dim(),
            "teacher_dim": self.heads.teacher_dim(),
        });
        let mut blobs = params_to_blobs(self.student.params(), "param.");
        blobs.extend(params_to_blobs(self.heads.params(), "heads."));
        for (name, (m, v)) in self.optimizer.moments() {
            blobs.push(Blob {
                name: format!("adam.m.{name}"),
                shape: vec![m.len()],
                data: m.clone(),
            });
            blobs.push(Blob {
                name: format!("adam.v.{name}"),
                shape: vec![v.len()],
                data: v.clone(),
            });
        }
        write_container(path, &header, &blobs)
    }

    /// Reload a state saved by [`TrainState::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
        let (header, blobs) = read_container(path)?;
        if header.get("kind").and_then(Value::as_str) != Some("train_state") {
            return Err(Error::format(0, "container is not a train-state checkpoint"));
        }
        let step = header.get("step").and_then(Value::as_u64).unwrap_or(0);
        let root_seed = header
            .get("root_seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::format(0, "train state missing root_seed"))?;
        let config: crate::encoder::EncoderConfig =
            serde_json::from_value(header.get("student_config").cloned().ok_or_else(|| {
                Error::format(0, "train state missing student_config")
            })?)?;
        let kind: ProjectionKind = serde_json::from_value(
            header
                .get("projection")
                .cloned()
                .ok_or_else(|| Error::format(0, "train state missing projection"))?,
        )?;
        let student_dim = header
            .get("student_dim")
            .and_then(Value::as_u64)
            .unwrap_or(config.dim as u64) as usize;
        let teacher_dim = header
            .get("teacher_dim")
            .and_then(Value::as_u64)
            .unwrap_or(config.dim as u64) as usize;

        let student = Encoder::from_parts(config, blobs_to_params(&blobs, "param.")?);
        let heads = ProjectionHeads::from_parts(
            kind,
            blobs_to_params(&blobs, "heads.")?,
            student_dim,
            teacher_dim,
        );
        let mut optimizer = OptimizerState::new();
        optimizer.step = header
            .get("optimizer_step")
            .and_then(Value::as_u64)
            .unwrap_or(step);
        for blob in &blobs {
            if let Some(name) = blob.name.strip_prefix("adam.m.") {
                let v = blobs
                    .iter()
                    .find(|b| b.name == format!("adam.v.{name}"))
                    .ok_or_else(|| {
                        Error::format(0, format!("missing second moment for '{name}'"))
                    })?;
                optimizer.insert_moments(name.to_string(), blob.data.clone(), v.data.clone());
            }
        }
        Ok(TrainState {
            student,
            heads,
            optimizer,
            root_seed,
            step,
            metrics: Vec::new(),
        })
    }
}

/// Mean pairwise cosine similarity over at most 2000 uniformly sampled
/// frame pairs; 1.0 means the representations collapsed onto one ray.
///
/// Pair sampling uses a fixed internal seed so the metric is a pure
/// function of its input.
pub fn collapse_metric<T: Scalar>(reps: &Tensor<T>) -> Result<f64> {
    let (rows, cols) = reps.rows_cols()?;
    if rows < 2 {
        return Err(Error::usage(format!(
            "collapse metric needs at least 2 frames, got {rows}"
        )));
    }
    let data = reps.data();
    let norm = |i: usize| -> f64 {
        data[i * cols..(i + 1) * cols]
            .iter()
            .map(|v| {
                let x = v.to_f64().unwrap();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    };
    if (0..rows).all(|i| norm(i) == 0.0) {
        return Err(Error::numeric(
            "collapse metric of all-zero representations".to_string(),
        ));
    }
    let cosine = |i: usize, j: usize| -> f64 {
        let a = &data[i * cols..(i + 1) * cols];
        let b = &data[j * cols..(j + 1) * cols];
        let dot: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| x.to_f64().unwrap() * y.to_f64().unwrap())
            .sum();
        dot / ((norm(i) + 1e-8) * (norm(j) + 1e-8))
    };
    let total_pairs = rows * (rows - 1) / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    if total_pairs <= 2000 {
        for i in 0..rows {
            for j in (i + 1)..rows {
                sum += cosine(i, j);
                count += 1;
            }
        }
    } else {
        let mut rng = SeedTree::new(0x636f_6c6c).stream("pairs", &[rows as u64]);
        while count < 2000 {
            let i = rng.gen_range(0..rows);
            let j = rng.gen_range(0..rows);
            if i == j {
                continue;
            }
            sum += cosine(i, j);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

struct BatchPlan {
    /// Corpus indices of this step's utterances.
    indices: Vec<usize>,
    masks: Vec<MaskSpec>,
}

/// Driver for one distillation run.
pub struct Distiller<'a> {
    cfg: DistillConfig,
    teacher: &'a Encoder<f32>,
    corpus: &'a Corpus,
    map: LayerMap,
    state: TrainState,
    /// With determinism on, `elapsed_ms` is logged as zero so metric logs
    /// are byte-identical across runs.
    pub determinism: bool,
}

impl<'a> Distiller<'a> {
    pub fn new(
        cfg: DistillConfig,
        teacher: &'a Encoder<f32>,
        mut student: Encoder<f32>,
        corpus: &'a Corpus,
        root_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::config("corpus is empty".to_string()));
        }
        if cfg.batch_utterances > corpus.len() {
            return Err(Error::config(format!(
                "batch_utterances {} exceeds corpus size {}",
                cfg.batch_utterances,
                corpus.len()
            )));
        }
        let input_dim = corpus.input_dim().unwrap();
        for enc in [teacher.config(), student.config()] {
            if enc.input_dim != input_dim {
                return Err(Error::config(format!(
                    "encoder input_dim {} does not match corpus width {input_dim}",
                    enc.input_dim
                )));
            }
        }
        let map = layer_map(student.config().layers, teacher.config().layers)?;
        init_student_from_teacher(&mut student, teacher, cfg.init_from_teacher)?;
        let heads = ProjectionHeads::build(
            &map,
            student.config().dim,
            teacher.config().dim,
            cfg.projection,
            SeedTree::new(root_seed).derive("init/heads", &[]),
        )?;
        let state = TrainState {
            student,
            heads,
            optimizer: OptimizerState::new(),
            root_seed,
            step: 0,
            metrics: Vec::new(),
        };
        Ok(Distiller {
            cfg,
            teacher,
            corpus,
            map,
            state,
            determinism: true,
        })
    }

    /// Continue a run from a reloaded state. The config must match the one
    /// that produced the checkpoint for the continuation to be exact.
    pub fn resume(
        cfg: DistillConfig,
        teacher: &'a Encoder<f32>,
        state: TrainState,
        corpus: &'a Corpus,
    ) -> Result<Self> {
        cfg.validate()?;
        let map = layer_map(state.student.config().layers, teacher.config().layers)?;
        Ok(Distiller {
            cfg,
            teacher,
            corpus,
            map,
            state,
            determinism: true,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn layer_map(&self) -> &LayerMap {
        &self.map
    }

    fn plan_batch(&self, step: u64) -> Result<BatchPlan> {
        let tree = SeedTree::new(self.state.root_seed);
        let mut data_rng = tree.stream("data", &[step]);
        let n = self.corpus.len();
        let mut pool: Vec<usize> = (0..n).collect();
        let take = self.cfg.batch_utterances;
        for i in 0..take {
            let j = data_rng.gen_range(i..n);
            pool.swap(i, j);
        }
        pool.truncate(take);
        let mut masks = Vec::with_capacity(take);
        for (slot, &idx) in pool.iter().enumerate() {
            let frames = self.corpus.items[idx].seq.frames;
            let mut mask_rng = tree.stream("mask", &[step, slot as u64]);
            masks.push(sample_mask(
                frames,
                self.cfg.mask_prob,
                self.cfg.mask_span,
                &mut mask_rng,
            )?);
        }
        Ok(BatchPlan {
            indices: pool,
            masks,
        })
    }

    /// Run one training step.
    pub fn step(&mut self) -> Result<MetricRecord> {
        self.step_inner(false)
    }

    /// Diagnostic variant of [`Distiller::step`]: zeroes the loss gradient
    /// at unmasked student tap frames before it reaches the encoder
    /// backward pass. Because both objectives only touch masked frames,
    /// the resulting update must be bitwise identical to a plain step.
    pub fn step_zeroing_unmasked_tap_gradients(&mut self) -> Result<MetricRecord> {
        self.step_inner(true)
    }

    fn step_inner(&mut self, zero_unmasked_tap_grads: bool) -> Result<MetricRecord> {
        let started = Instant::now();
        let step = self.state.step + 1;
        let lr = lr_at(step, &self.cfg.schedule)?;
        let tree = SeedTree::new(self.state.root_seed);
        let plan = self.plan_batch(step)?;
        let batch_ids: Vec<&str> = plan
            .indices
            .iter()
            .map(|&i| self.corpus.items[i].seq.utterance_id.as_str())
            .collect();
        let annotate = |e: Error| match e {
            Error::Numeric(msg) => {
                Error::Numeric(format!("step {step}, batch {batch_ids:?}: {msg}"))
            }
            other => other,
        };

        let student_layers: Vec<usize> = (1..=self.state.student.config().layers).collect();
        let teacher_layers = self.map.teacher_layers_in_order();

        // Teacher targets, computed unmasked and detached.
        let mut teacher_taps = Vec::with_capacity(plan.indices.len());
        for &idx in &plan.indices {
            let taps = self
                .teacher
                .forward_with_taps(
                    &self.corpus.items[idx].seq,
                    None,
                    &teacher_layers,
                    self.cfg.tap_kind,
                )
                .map_err(annotate)?;
            teacher_taps.push(taps);
        }

        // Graph A: student forward for the whole batch, taps as outputs.
        let mut gb_a = GraphBuilder::<f32>::new();
        let pn = declare_params(&mut gb_a, self.state.student.config(), "")?;
        let mut final_tap_names = Vec::new();
        for (slot, &idx) in plan.indices.iter().enumerate() {
            let seq = &self.corpus.items[idx].seq;
            let feat_data: Vec<f32> = seq.values().to_vec();
            let feat = gb_a.constant(Tensor::from_parts(
                vec![seq.frames, seq.dim],
                feat_data,
                false,
            ));
            let fwd = append_forward(
                &mut gb_a,
                self.state.student.config(),
                &pn,
                feat,
                seq.frames,
                Some(plan.masks[slot].masked.as_slice()),
                &student_layers,
                TapKind::BlockOutput,
            )?;
            for (layer, node) in &fwd.taps {
                gb_a.output(format!("u{slot}.l{layer}"), *node)?;
            }
            final_tap_names.push(format!("u{slot}.l{}", student_layers.last().unwrap()));
        }
        let graph_a = gb_a.finish();
        let mut binds_a = Bindings::new();
        self.state.student.bind_params(&mut binds_a, "", true);
        let eval_a = graph_a.forward(&binds_a).map_err(annotate)?;

        // Graph B: taps in, loss out.
        let mut gb_b = GraphBuilder::<f32>::new();
        let head_nodes = self.state.heads.declare(&mut gb_b)?;
        let mut binds_b = Bindings::new();
        self.state.heads.bind_params(&mut binds_b, true);
        let mut layer_sum_nodes = Vec::new();
        let mut counted = 0usize;
        for (slot, _) in plan.indices.iter().enumerate() {
            let mask = &plan.masks[slot];
            if mask.masked.is_empty() {
                continue;
            }
            counted += 1;
            let mut distract_rng = tree.stream("distractors", &[step, slot as u64]);
            for (pair_idx, &(sl, tl)) in self.map.pairs.iter().enumerate() {
                let tap_name = format!("u{slot}.l{sl}");
                let tap_value = eval_a.output(&tap_name)?;
                let z = gb_b.input(tap_name.clone(), tap_value.shape().to_vec())?;
                binds_b.insert(tap_name.as_str(), tap_value.clone().with_grad());
                let target = teacher_taps[slot].layer(tl).ok_or_else(|| {
                    Error::usage(format!("teacher taps missing layer {tl}"))
                })?;
                let target = if self.cfg.target_instance_norm {
                    instance_norm(target)?
                } else {
                    target.clone()
                };
                let h = gb_b.constant(target);
                let head = ProjectionHeads::<f32>::head_nodes(&head_nodes, sl);
                let loss_node = match self.cfg.loss_kind {
                    LossKind::Contrastive => append_contrastive_loss(
                        &mut gb_b,
                        z,
                        h,
                        head,
                        mask,
                        self.cfg.distractors,
                        self.cfg.temperature,
                        &mut distract_rng,
                        self.cfg.normalized,
                    )?,
                    LossKind::L2 => append_l2_loss(
                        &mut gb_b,
                        z,
                        h,
                        head,
                        mask,
                        self.teacher.config().dim,
                        self.cfg.normalized,
                    )?,
                };
                if layer_sum_nodes.len() <= pair_idx {
                    layer_sum_nodes.push(loss_node);
                } else {
                    layer_sum_nodes[pair_idx] = gb_b.add(layer_sum_nodes[pair_idx], loss_node)?;
                }
            }
        }

        let (loss_value, per_layer, grads_b) = if counted == 0 {
            (0.0, vec![0.0; self.map.pairs.len()], None)
        } else {
            let inv_count = 1.0 / counted as f32;
            let mut layer_mean_nodes = Vec::new();
            for (pair_idx, &node) in layer_sum_nodes.iter().enumerate() {
                let mean = gb_b.scale(node, inv_count);
                gb_b.output(format!("layer{pair_idx}"), mean)?;
                layer_mean_nodes.push(mean);
            }
            let mut total = layer_mean_nodes[0];
            for &node in &layer_mean_nodes[1..] {
                total = gb_b.add(total, node)?;
            }
            if self.cfg.normalized {
                total = gb_b.scale(total, 1.0 / self.map.pairs.len() as f32);
            }
            gb_b.output("loss", total)?;
            let graph_b = gb_b.finish();
            let eval_b = graph_b.forward(&binds_b).map_err(annotate)?;
            let loss_value = eval_b.output("loss")?.item()? as f64;
            let per_layer: Vec<f64> = (0..self.map.pairs.len())
                .map(|i| Ok(eval_b.output(&format!("layer{i}"))?.item()? as f64))
                .collect::<Result<_>>()?;
            let grads_b = eval_b.backward_scalar("loss").map_err(annotate)?;
            (loss_value, per_layer, Some(grads_b))
        };

        // Chain tap cotangents through the student forward graph, then
        // merge parameter gradients from both graphs.
        let mut merged: Gradients<f32> = Gradients::new();
        if let Some(grads_b) = grads_b {
            let mut seeds: Vec<(&str, Tensor<f32>)> = Vec::new();
            for (name, grad) in grads_b.iter() {
                if !name.starts_with("u") || !name.contains(".l") {
                    continue;
                }
                let mut grad = grad.clone();
                if zero_unmasked_tap_grads {
                    let slot: usize = name[1..name.find('.').unwrap()].parse().unwrap();
                    let mask = &plan.masks[slot];
                    let (rows, cols) = grad.rows_cols()?;
                    let data = grad.data_mut();
                    for r in 0..rows {
                        if !mask.contains(r) {
                            data[r * cols..(r + 1) * cols].fill(0.0);
                        }
                    }
                }
                seeds.push((name.as_str(), grad));
            }
            let grads_a = eval_a.backward_seeded(&seeds).map_err(annotate)?;
            for (name, grad) in grads_a {
                merged.insert(name, grad);
            }
            for (name, grad) in grads_b.iter() {
                if self.state.heads.params().get(name).is_some() {
                    merged.insert(name.clone(), grad.clone());
                }
            }
            if let Some(max_norm) = self.cfg.clip_norm {
                clip_global_norm(&mut merged, max_norm);
            }
        }

        let collapse = if step % self.cfg.collapse_every as u64 == 0 {
            let dim = self.state.student.config().dim;
            let mut rows: Vec<f32> = Vec::new();
            let mut count = 0usize;
            for name in &final_tap_names {
                let t = eval_a.output(name)?;
                rows.extend_from_slice(t.data());
                count += t.shape()[0];
            }
            let stacked = Tensor::from_parts(vec![count, dim], rows, false);
            Some(collapse_metric(&stacked).map_err(annotate)?)
        } else {
            None
        };

        if !merged.is_empty() {
            let TrainState {
                student,
                heads,
                optimizer,
                ..
            } = &mut self.state;
            adam_step_named(
                student.params_mut().iter_mut().chain(heads.params_mut().iter_mut()),
                &merged,
                optimizer,
                lr,
                &self.cfg.adam,
            )?;
        }

        self.state.step = step;
        let record = MetricRecord {
            step,
            lr,
            loss: loss_value,
            loss_per_layer: per_layer,
            collapse,
            elapsed_ms: if self.determinism {
                0
            } else {
                started.elapsed().as_millis() as u64
            },
        };
        self.state.metrics.push(record.clone());
        Ok(record)
    }

    /// Mean cosine between projected student taps and teacher targets over
    /// masked frames, per mapped layer, on a fixed evaluation batch.
    pub fn alignment_per_layer(&self, eval_utterances: usize) -> Result<Vec<f64>> {
        let tree = SeedTree::new(self.state.root_seed);
        let n = eval_utterances.min(self.corpus.len());
        let teacher_layers = self.map.teacher_layers_in_order();
        let student_layers: Vec<usize> = self.map.pairs.iter().map(|&(l, _)| l).collect();
        let mut sums = vec![0.0f64; self.map.pairs.len()];
        let mut counts = vec![0usize; self.map.pairs.len()];
        for u in 0..n {
            let item = &self.corpus.items[u];
            let mut mask_rng = tree.stream("eval-mask", &[u as u64]);
            let mask = sample_mask(
                item.seq.frames,
                self.cfg.mask_prob,
                self.cfg.mask_span,
                &mut mask_rng,
            )?;
            if mask.masked.is_empty() {
                continue;
            }
            let student_taps = self.state.student.forward_with_taps(
                &item.seq,
                Some(&mask),
                &student_layers,
                TapKind::BlockOutput,
            )?;
            let teacher_taps = self.teacher.forward_with_taps(
                &item.seq,
                None,
                &teacher_layers,
                self.cfg.tap_kind,
            )?;
            for (pair_idx, &(sl, tl)) in self.map.pairs.iter().enumerate() {
                let z = self
                    .state
                    .heads
                    .apply(sl, student_taps.layer(sl).unwrap())?;
                let h = teacher_taps.layer(tl).unwrap();
                let h = if self.cfg.target_instance_norm {
                    instance_norm(h)?
                } else {
                    h.clone()
                };
                let cols = z.shape()[1];
                for &t in &mask.masked {
                    let a = &z.data()[t * cols..(t + 1) * cols];
                    let b = &h.data()[t * cols..(t + 1) * cols];
                    let dot: f64 = a
                        .iter()
                        .zip(b)
                        .map(|(x, y)| *x as f64 * *y as f64)
                        .sum();
                    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                    sums[pair_idx] += dot / ((na + 1e-8) * (nb + 1e-8));
                    counts[pair_idx] += 1;
                }
            }
        }
        Ok(sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect())
    }
}

/// Outputs written under a run directory by [`distill`].
pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub final_state_path: PathBuf,
    pub final_student_path: PathBuf,
}

/// Drive a full run: `steps` training steps with metric logging and
/// periodic checkpoints when `run_dir` is given. Teacher parameters are
/// never touched.
pub fn distill(
    cfg: &DistillConfig,
    teacher: &Encoder<f32>,
    student: Encoder<f32>,
    corpus: &Corpus,
    steps: u64,
    root_seed: u64,
    run_dir: Option<&Path>,
) -> Result<TrainState> {
    let mut distiller = Distiller::new(cfg.clone(), teacher, student, corpus, root_seed)?;
    let mut metrics_file = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints"))?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("metrics.jsonl"),
            )?))
        }
        None => None,
    };
    for _ in 0..steps {
        let record = distiller.step()?;
        if let Some(f) = metrics_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        if let Some(dir) = run_dir {
            if record.step % cfg.checkpoint_every as u64 == 0 {
                distiller
                    .state()
                    .save(dir.join(format!("checkpoints/state_step{:06}.ckpt", record.step)))?;
            }
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }
    let state = distiller.into_state();
    if let Some(dir) = run_dir {
        state.save(dir.join("state_final.ckpt"))?;
        crate::checkpoint::save_encoder(&state.student, state.step, dir.join("student_final.ckpt"))?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_encoder, EncoderConfig};
    use crate::features::{SynthCorpusSpec, SynthParams};
    use crate::optim::Schedule;

    fn tiny_encoder_config(layers: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            dim: 16,
            ffn: 24,
            heads: 2,
            conv_kernel: 3,
            input_dim: 16,
            preset_name: None,
        }
    }

    fn tiny_corpus(seed: u64, utterances: usize) -> Corpus {
        let spec = SynthCorpusSpec {
            utterances,
            frames_min: 40,
            frames_max: 60,
            dim: 8,
            classes: 3,
            stack_factor: 2,
            params: SynthParams::default(),
        };
        Corpus::synthesize(&spec, &SeedTree::new(seed)).unwrap()
    }

    fn tiny_cfg(steps: u64) -> DistillConfig {
        DistillConfig {
            loss_kind: LossKind::Contrastive,
            temperature: 0.1,
            distractors: 8,
            tap_kind: TapKind::Ffn2,
            target_instance_norm: false,
            projection: ProjectionKind::LinearPerLayer,
            normalized: true,
            mask_prob: 0.12,
            mask_span: 4,
            schedule: Schedule {
                peak_lr: 2e-3,
                warmup_steps: 5,
                total_steps: steps.max(5),
            },
            adam: Default::default(),
            clip_norm: Some(10.0),
            batch_utterances: 2,
            collapse_every: 5,
            checkpoint_every: 1000,
            init_from_teacher: crate::encoder::TeacherInit::Random,
        }
    }

    #[test]
    fn zero_steps_leaves_student_untouched() {
        let corpus = tiny_corpus(1, 4);
        let teacher = build_encoder::<f32>(&tiny_encoder_config(3), 10).unwrap();
        let student = build_encoder::<f32>(&tiny_encoder_config(2), 11).unwrap();
        let before = student.clone();
        let state = distill(&tiny_cfg(10), &teacher, student, &corpus, 0, 99, None).unwrap();
        assert_eq!(state.step, 0);
        assert!(state.metrics.is_empty());
        for ((_, a), (_, b)) in state.student.params().iter().zip(before.params().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn teacher_is_bit_identical_after_distill() {
        let corpus = tiny_corpus(2, 4);
        let teacher = build_encoder::<f32>(&tiny_encoder_config(3), 10).unwrap();
        let teacher_copy = teacher.clone();
        let student = build_encoder::<f32>(&tiny_encoder_config(2), 11).unwrap();
        let _ = distill(&tiny_cfg(6), &teacher, student, &corpus, 6, 123, None).unwrap();
        for ((_, a), (_, b)) in teacher.params().iter().zip(teacher_copy.params().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn metric_traces_are_bitwise_reproducible() {
        let corpus = tiny_corpus(3, 4);
        let teacher = build_encoder::<f32>(&tiny_encoder_config(3), 20).unwrap();
        let run = || {
            let student = build_encoder::<f32>(&tiny_encoder_config(2), 21).unwrap();
            let state = distill(&tiny_cfg(8), &teacher, student, &corpus, 8, 7, None).unwrap();
            state.metrics
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                serde_json::to_string(x).unwrap(),
                serde_json::to_string(y).unwrap()
            );
        }
    }

    #[test]
    fn masked_only_gradient_flow_update_is_bitwise_equal() {
        let corpus = tiny_corpus(4, 4);
        let teacher = build_encoder::<f32>(&tiny_encoder_config(3), 30).unwrap();
        let make = || {
            let student = build_encoder::<f32>(&tiny_encoder_config(2), 31).unwrap();
            Distiller::new(tiny_cfg(4), &teacher, student, &corpus, 55).unwrap()
        };
        let mut plain = make();
        plain.step().unwrap();
        let mut zeroed = make();
        zeroed.step_zeroing_unmasked_tap_gradients().unwrap();
        for ((na, a), (nb, b)) in plain
            .state()
            .student
            .params()
            .iter()
            .chain(plain.state().heads.params().iter())
            .zip(zeroed.state().student.params().iter().chain(zeroed.state().heads.params().iter()))
        {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data(), "parameter {na} diverged");
        }
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_next_record() {
        let corpus = tiny_corpus(5, 4);
        let teacher = build_encoder::<f32>(&tiny_encoder_config(3), 40).unwrap();
        let cfg = tiny_cfg(10);

        let student = build_encoder::<f32>(&tiny_encoder_config(2), 41).unwrap();
        let mut uninterrupted = Distiller::new(cfg.clone(), &teacher, student, &corpus, 77).unwrap();
        let mut records = Vec::new();
        for _ in 0..5 {
            records.push(uninterrupted.step().unwrap());
        }

        let student = build_encoder::<f32>(&tiny_encoder_config(2), 41).unwrap();
        let mut first_leg = Distiller::new(cfg.clone(), &teacher, student, &corpus, 77).unwrap();
        for _ in 0..4 {
            first_leg.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        first_leg.state().save(&path).unwrap();

        let reloaded = TrainState::load(&path).unwrap();
        let mut second_leg = Distiller::resume(cfg, &teacher, reloaded, &corpus).unwrap();
        let rec5 = second_leg.step().unwrap();
        assert_eq!(
            serde_json::to_string(&rec5).unwrap(),
            serde_json::to_string(&records[4]).unwrap()
        );
    }

    #[test]
    fn collapse_metric_reference_points() {
        // Identical nonzero frames collapse to 1.
        let row = [1.0f64, 2.0, -1.0];
        let same_data: Vec<f64> = row.iter().cycle().take(12).copied().collect();
        let same = Tensor::matrix(4, 3, same_data).unwrap();
        assert!((collapse_metric(&same).unwrap() - 1.0).abs() < 1e-7);
        // Orthonormal rows give 0.
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(collapse_metric(&eye).unwrap().abs() < 1e-9);
        // Random gaussian frames hover near zero.
        let mut rng = SeedTree::new(8).stream("g", &[]);
        let data: Vec<f64> = (0..1000 * 64)
            .map(|_| -> f64 {
                rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
            })
            .collect();
        let gauss = Tensor::matrix(1000, 64, data).unwrap();
        let c = collapse_metric(&gauss).unwrap();
        assert!(c.abs() < 0.05, "collapse {c}");
        // Degenerate inputs error.
        assert!(collapse_metric(&Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap()).is_err());
        assert!(collapse_metric(&Tensor::<f64>::zeros(vec![4, 3])).is_err());
    }
}
