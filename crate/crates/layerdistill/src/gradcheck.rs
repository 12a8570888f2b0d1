//! Finite-difference verification suites.
//!
//! Two entry points: a per-primitive sweep that checks every graph
//! operation against central differences at double precision, and a
//! composed check that differentiates the full masked contrastive
//! objective through a two-layer student encoder and its projection heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    finite_difference_check, Bindings, GraphBuilder, NodeId, Tensor,
};
use crate::encoder::{append_forward, build_encoder, declare_params, EncoderConfig, TapKind};
use crate::error::Result;
use crate::losses::{append_contrastive_loss, ProjectionHeads, ProjectionKind};
use crate::mapping::layer_map;
use crate::masking::sample_mask;
use crate::rng::SeedTree;

/// Aggregated verdict for one checked operation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// A full suite run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.cases.iter().all(|c| c.pass)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

type CaseBuilder = fn(&mut GraphBuilder<f64>, &mut ChaCha8Rng, &mut Bindings<f64>) -> NodeId;

/// Reduce `node` to a scalar that is sensitive to every component:
/// sum(node * C) with a random constant C.
fn weighted_sum(
    gb: &mut GraphBuilder<f64>,
    rng: &mut ChaCha8Rng,
    node: NodeId,
    shape: &[usize],
) -> NodeId {
    let numel: usize = shape.iter().product();
    let c = gb.constant(Tensor::from_parts(
        shape.to_vec(),
        uniform(rng, numel, -1.0, 1.0),
        false,
    ));
    let prod = gb.mul(node, c).unwrap();
    gb.sum(prod)
}

fn input(
    gb: &mut GraphBuilder<f64>,
    binds: &mut Bindings<f64>,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: Vec<usize>,
) -> NodeId {
    let numel: usize = shape.iter().product();
    let t = Tensor::from_parts(shape.clone(), uniform(rng, numel, -1.0, 1.0), true);
    binds.insert(name, t);
    gb.input(name, shape).unwrap()
}

fn primitive_cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("addition", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![3, 5]);
            let b = input(gb, binds, rng, "b", vec![3, 5]);
            let y = gb.add(a, b).unwrap();
            weighted_sum(gb, rng, y, &[3, 5])
        }),
        ("scaling", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![4, 3]);
            let y = gb.scale(a, -0.731);
            weighted_sum(gb, rng, y, &[4, 3])
        }),
        ("bias_row", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![4, 6]);
            let v = input(gb, binds, rng, "v", vec![6]);
            let y = gb.add_row(a, v).unwrap();
            weighted_sum(gb, rng, y, &[4, 6])
        }),
        ("hadamard", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![3, 4]);
            let b = input(gb, binds, rng, "b", vec![3, 4]);
            let y = gb.mul(a, b).unwrap();
            weighted_sum(gb, rng, y, &[3, 4])
        }),
        ("matrix_product", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![3, 4]);
            let b = input(gb, binds, rng, "b", vec![4, 5]);
            let y = gb.matmul(a, b).unwrap();
            weighted_sum(gb, rng, y, &[3, 5])
        }),
        ("transpose", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![3, 5]);
            let y = gb.transpose(a).unwrap();
            weighted_sum(gb, rng, y, &[5, 3])
        }),
        ("reshape", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![3, 4]);
            let y = gb.reshape(a, vec![6, 2]).unwrap();
            weighted_sum(gb, rng, y, &[6, 2])
        }),
        ("slice_cols", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![4, 7]);
            let y = gb.slice_cols(a, 2, 3).unwrap();
            weighted_sum(gb, rng, y, &[4, 3])
        }),
        ("concat_cols", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![3, 2]);
            let b = input(gb, binds, rng, "b", vec![3, 4]);
            let y = gb.concat_cols(&[a, b]).unwrap();
            weighted_sum(gb, rng, y, &[3, 6])
        }),
        ("embedding_lookup", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![6, 4]);
            // Repeats exercise gradient accumulation into shared rows.
            let y = gb.gather_rows(a, vec![0, 3, 3, 5, 1]).unwrap();
            weighted_sum(gb, rng, y, &[5, 4])
        }),
        ("mask_rows", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![6, 4]);
            let e = input(gb, binds, rng, "e", vec![4]);
            let y = gb.mask_rows(a, e, vec![1, 2, 5]).unwrap();
            weighted_sum(gb, rng, y, &[6, 4])
        }),
        ("softmax", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![4, 6]);
            let y = gb.softmax(a).unwrap();
            weighted_sum(gb, rng, y, &[4, 6])
        }),
        ("log_softmax", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![4, 6]);
            let y = gb.log_softmax(a).unwrap();
            weighted_sum(gb, rng, y, &[4, 6])
        }),
        ("layer_norm", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![5, 6]);
            let g = input(gb, binds, rng, "g", vec![6]);
            let b = input(gb, binds, rng, "b", vec![6]);
            let y = gb.layer_norm(a, g, b, 1e-5).unwrap();
            weighted_sum(gb, rng, y, &[5, 6])
        }),
        ("depthwise_conv1d", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![7, 4]);
            let w = input(gb, binds, rng, "w", vec![3, 4]);
            let y = gb.depthwise_conv1d(a, w).unwrap();
            weighted_sum(gb, rng, y, &[7, 4])
        }),
        ("gated_linear_unit", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![4, 8]);
            let y = gb.glu(a).unwrap();
            weighted_sum(gb, rng, y, &[4, 4])
        }),
        ("swish", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![4, 5]);
            let y = gb.swish(a).unwrap();
            weighted_sum(gb, rng, y, &[4, 5])
        }),
        ("cosine_similarity", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![5, 4]);
            let b = input(gb, binds, rng, "b", vec![5, 4]);
            let y = gb.row_cosine(a, b).unwrap();
            weighted_sum(gb, rng, y, &[5])
        }),
        ("sum", |gb, rng, binds| {
            let a = input(gb, binds, rng, "a", vec![3, 4]);
            let scaled = gb.scale(a, 1.37);
            let _ = rng.gen::<f64>();
            gb.sum(scaled)
        }),
    ]
}

/// Check every primitive against central differences over `n_seeds`
/// random instances each.
pub fn primitive_suite(n_seeds: u64, epsilon: f64, tolerance: f64) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for (name, build) in primitive_cases() {
        let mut worst = 0.0f64;
        for seed in 0..n_seeds {
            let mut rng = SeedTree::new(seed).stream(&format!("gradcheck/{name}"), &[]);
            let mut gb = GraphBuilder::<f64>::new();
            let mut binds = Bindings::new();
            let y = build(&mut gb, &mut rng, &mut binds);
            gb.output("y", y)?;
            let graph = gb.finish();
            let report = finite_difference_check(&graph, "y", &binds, epsilon, tolerance)?;
            worst = worst.max(report.max_rel_error());
        }
        cases.push(CaseReport {
            name: name.to_string(),
            seeds: n_seeds,
            max_rel_error: worst,
            pass: worst <= tolerance,
        });
    }
    Ok(SuiteReport {
        epsilon,
        tolerance,
        cases,
    })
}

/// Differentiate the full masked contrastive objective through a
/// two-layer toy student and its projection heads, checking every
/// parameter against central differences.
pub fn composed_loss_suite(n_seeds: u64, epsilon: f64, tolerance: f64) -> Result<SuiteReport> {
    let student_cfg = EncoderConfig {
        layers: 2,
        dim: 8,
        ffn: 12,
        heads: 2,
        conv_kernel: 3,
        input_dim: 6,
        preset_name: None,
    };
    let teacher_dim = 10usize;
    let frames = 9usize;
    let map = layer_map(2, 4)?;

    let mut worst = 0.0f64;
    for seed in 0..n_seeds {
        let tree = SeedTree::new(seed);
        let student = build_encoder::<f64>(&student_cfg, tree.derive("student", &[]))?;
        let heads = ProjectionHeads::<f64>::build(
            &map,
            student_cfg.dim,
            teacher_dim,
            ProjectionKind::LinearPerLayer,
            tree.derive("heads", &[]),
        )?;

        // Non-empty mask, drawn deterministically per seed.
        let mut mask = sample_mask(frames, 0.45, 2, &mut tree.stream("mask", &[]))?;
        if mask.masked.is_empty() {
            mask.masked = vec![2, 5];
        }

        let mut gb = GraphBuilder::<f64>::new();
        let mut feat_rng = tree.stream("features", &[]);
        let feat = gb.constant(Tensor::from_parts(
            vec![frames, student_cfg.input_dim],
            uniform(&mut feat_rng, frames * student_cfg.input_dim, -1.0, 1.0),
            false,
        ));
        let pn = declare_params(&mut gb, &student_cfg, "")?;
        let fwd = append_forward(
            &mut gb,
            &student_cfg,
            &pn,
            feat,
            frames,
            Some(mask.masked.as_slice()),
            &[1, 2],
            TapKind::BlockOutput,
        )?;
        let head_nodes = heads.declare(&mut gb)?;

        let mut loss_nodes = Vec::new();
        let mut distract_rng = tree.stream("distractors", &[]);
        let mut target_rng = tree.stream("targets", &[]);
        for (layer, tap) in fwd.taps.iter() {
            let target = gb.constant(Tensor::from_parts(
                vec![frames, teacher_dim],
                uniform(&mut target_rng, frames * teacher_dim, -1.0, 1.0),
                false,
            ));
            let head = ProjectionHeads::<f64>::head_nodes(&head_nodes, *layer);
            let node = append_contrastive_loss(
                &mut gb,
                *tap,
                target,
                head,
                &mask,
                3,
                0.1,
                &mut distract_rng,
                true,
            )?;
            loss_nodes.push(node);
        }
        let mut total = loss_nodes[0];
        for &n in &loss_nodes[1..] {
            total = gb.add(total, n)?;
        }
        let total = gb.scale(total, 0.5);
        gb.output("loss", total)?;
        let graph = gb.finish();

        let mut binds = Bindings::new();
        student.bind_params(&mut binds, "", true);
        heads.bind_params(&mut binds, true);
        let report = finite_difference_check(&graph, "loss", &binds, epsilon, tolerance)?;
        worst = worst.max(report.max_rel_error());
    }

    Ok(SuiteReport {
        epsilon,
        tolerance,
        cases: vec![CaseReport {
            name: "masked_contrastive_full_graph".to_string(),
            seeds: n_seeds,
            max_rel_error: worst,
            pass: worst <= tolerance,
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_at_a_few_seeds() {
        let report = primitive_suite(3, 1e-5, 1e-4).unwrap();
        assert!(
            report.pass(),
            "failures: {:?}",
            report
                .cases
                .iter()
                .filter(|c| !c.pass)
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn composed_loss_passes_at_a_few_seeds() {
        let report = composed_loss_suite(2, 1e-4, 1e-4).unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_error());
    }
}
