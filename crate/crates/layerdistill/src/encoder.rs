//! Conformer-style encoder stack with per-block tap points.
//!
//! Block layout: half-step feed-forward, self-attention, convolution
//! module, half-step feed-forward, final layer norm. Every sublayer is
//! pre-norm with a residual connection. The "ffn2" tap captures the second
//! feed-forward output after its 0.5 scaling and before the residual
//! addition; the "block_output" tap captures the block's final output.
//!
//! Masked frames are replaced by a learnable mask embedding right after
//! the input projection, before sinusoidal positions are added, so masked
//! positions keep their position information.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sc, Bindings, GraphBuilder, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::mapping::layer_map;
use crate::masking::MaskSpec;
use crate::rng::SeedTree;

use rand::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Architecture of one encoder stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub ffn: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub input_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset_name: Option<String>,
}

impl EncoderConfig {
    /// Named architectures. Input width assumes 80-dim features stacked by 2.
    pub fn preset(name: &str) -> Result<Self> {
        let (dim, ffn, layers, heads, conv_kernel) = match name {
            "xx-large" => (1024, 4096, 40, 16, 31),
            "x-large" => (1024, 4096, 24, 16, 31),
            "large12" => (1024, 4096, 12, 16, 31),
            "large40" => (768, 1024, 40, 8, 31),
            "tiny" => (32, 64, 4, 2, 7),
            other => {
                return Err(Error::config(format!(
                    "unknown preset '{other}' (expected xx-large, x-large, large12, large40, tiny)"
                )))
            }
        };
        Ok(EncoderConfig {
            layers,
            dim,
            ffn,
            heads,
            conv_kernel,
            input_dim: 160,
            preset_name: Some(name.to_string()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::config("layers must be >= 1".to_string()));
        }
        if self.dim == 0 || self.ffn == 0 || self.input_dim == 0 {
            return Err(Error::config("dim, ffn and input_dim must be >= 1".to_string()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        Ok(())
    }
}

/// Which representation a tap captures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapKind {
    /// Second feed-forward output, after half-step scaling, before the
    /// residual addition and the block's final layer norm.
    Ffn2,
    /// The block's final output.
    BlockOutput,
}

/// Per-layer hidden representations captured during a forward pass.
#[derive(Debug, Clone)]
pub struct TapSet<T: Scalar> {
    pub kind: TapKind,
    /// (1-based layer, frames x dim representation), in tap order.
    pub taps: Vec<(usize, Tensor<T>)>,
}

impl<T: Scalar> TapSet<T> {
    pub fn layer(&self, layer: usize) -> Option<&Tensor<T>> {
        self.taps.iter().find(|(l, _)| *l == layer).map(|(_, t)| t)
    }
}

/// Named parameter tensors in fixed construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_values(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.numel() as u64).sum()
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A built encoder: config plus parameters. Immutable during forward
/// passes; training mutates parameters under exclusive access.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    config: EncoderConfig,
    params: ParamSet<T>,
}

/// Parameter names and shapes for a config, in construction order.
fn param_layout(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.dim;
    let f = config.ffn;
    let k = config.conv_kernel;
    let mut out = vec![
        ("input_proj.w".to_string(), vec![config.input_dim, d]),
        ("input_proj.b".to_string(), vec![d]),
        ("mask_embed".to_string(), vec![d]),
    ];
    for i in 0..config.layers {
        let p = format!("block{i}.");
        for ffn_name in ["ffn1", "ffn2"] {
            out.push((format!("{p}{ffn_name}.ln.g"), vec![d]));
            out.push((format!("{p}{ffn_name}.ln.b"), vec![d]));
            out.push((format!("{p}{ffn_name}.w1"), vec![d, f]));
            out.push((format!("{p}{ffn_name}.b1"), vec![f]));
            out.push((format!("{p}{ffn_name}.w2"), vec![f, d]));
            out.push((format!("{p}{ffn_name}.b2"), vec![d]));
        }
        out.push((format!("{p}attn.ln.g"), vec![d]));
        out.push((format!("{p}attn.ln.b"), vec![d]));
        for proj in ["q", "k", "v", "o"] {
            out.push((format!("{p}attn.w{proj}"), vec![d, d]));
            out.push((format!("{p}attn.b{proj}"), vec![d]));
        }
        out.push((format!("{p}conv.ln.g"), vec![d]));
        out.push((format!("{p}conv.ln.b"), vec![d]));
        out.push((format!("{p}conv.pw1.w"), vec![d, 2 * d]));
        out.push((format!("{p}conv.pw1.b"), vec![2 * d]));
        out.push((format!("{p}conv.dw.w"), vec![k, d]));
        out.push((format!("{p}conv.norm.g"), vec![d]));
        out.push((format!("{p}conv.norm.b"), vec![d]));
        out.push((format!("{p}conv.pw2.w"), vec![d, d]));
        out.push((format!("{p}conv.pw2.b"), vec![d]));
        out.push((format!("{p}final_ln.g"), vec![d]));
        out.push((format!("{p}final_ln.b"), vec![d]));
    }
    out
}

fn init_param<T: Scalar>(name: &str, shape: &[usize], tree: &SeedTree) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    // Layer norm gains start at one, every bias and gain offset at zero.
    if name.ends_with(".g") || name.ends_with(".norm.g") {
        return Tensor::from_parts(shape.to_vec(), vec![T::one(); numel], false);
    }
    if name.ends_with(".b") || name.ends_with("b1") || name.ends_with("b2") {
        return Tensor::zeros(shape.to_vec());
    }
    // Weights: uniform in (-a, a) with a = 1/sqrt(fan_in). Fan-in is the
    // row count for x*W weights and the kernel size for depthwise kernels.
    let fan_in = shape[0];
    let a = 1.0 / (fan_in as f64).sqrt();
    let mut rng = tree.stream(&format!("init/{name}"), &[]);
    let data = (0..numel)
        .map(|_| sc::<T>(a * (2.0 * rng.gen::<f64>() - 1.0)))
        .collect();
    Tensor::from_parts(shape.to_vec(), data, false)
}

/// Build an encoder with deterministic scaled-uniform fan-in
/// initialization. Identical seed and config give bitwise-identical
/// parameters.
pub fn build_encoder<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<Encoder<T>> {
    config.validate()?;
    let tree = SeedTree::new(seed);
    let mut params = ParamSet::new();
    for (name, shape) in param_layout(config) {
        let t = init_param::<T>(&name, &shape, &tree);
        params.push(name, t);
    }
    debug_assert_eq!(params.total_values(), param_count(config));
    Ok(Encoder { config: config.clone(), params })
}

impl<T: Scalar> Encoder<T> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub(crate) fn from_parts(config: EncoderConfig, params: ParamSet<T>) -> Self {
        Encoder { config, params }
    }

    /// Bind every parameter into `binds` under `prefix`.
    pub fn bind_params(&self, binds: &mut Bindings<T>, prefix: &str, requires_grad: bool) {
        for (name, tensor) in self.params.iter() {
            let t = if requires_grad {
                tensor.clone().with_grad()
            } else {
                tensor.clone()
            };
            binds.insert(format!("{prefix}{name}"), t);
        }
    }

    /// Forward pass capturing the requested per-layer representations.
    ///
    /// With a mask, the masked frames' post-projection vectors are replaced
    /// by the mask embedding before block 1. Teacher-side calls pass no
    /// mask.
    pub fn forward_with_taps(
        &self,
        input: &FeatureSequence,
        mask: Option<&MaskSpec>,
        tap_layers: &[usize],
        tap_kind: TapKind,
    ) -> Result<TapSet<T>> {
        if input.dim != self.config.input_dim {
            return Err(Error::usage(format!(
                "input dim {} does not match encoder input_dim {}",
                input.dim, self.config.input_dim
            )));
        }
        if let Some(m) = mask {
            if m.frame_count != input.frames {
                return Err(Error::usage(format!(
                    "mask covers {} frames, input has {}",
                    m.frame_count, input.frames
                )));
            }
        }
        let mut gb = GraphBuilder::<T>::new();
        let feat_data: Vec<T> = input.values().iter().map(|&v| sc(v as f64)).collect();
        let feat = gb.constant(Tensor::from_parts(
            vec![input.frames, input.dim],
            feat_data,
            false,
        ));
        let params = declare_params(&mut gb, &self.config, "")?;
        let fwd = append_forward(
            &mut gb,
            &self.config,
            &params,
            feat,
            input.frames,
            mask.map(|m| m.masked.as_slice()),
            tap_layers,
            tap_kind,
        )?;
        for (layer, node) in &fwd.taps {
            gb.output(format!("tap{layer}"), *node)?;
        }
        let graph = gb.finish();
        let mut binds = Bindings::new();
        self.bind_params(&mut binds, "", false);
        let eval = graph.forward(&binds)?;
        let mut taps = Vec::with_capacity(fwd.taps.len());
        for (layer, _) in &fwd.taps {
            taps.push((*layer, eval.output(&format!("tap{layer}"))?.clone()));
        }
        Ok(TapSet { kind: tap_kind, taps })
    }
}

/// Graph-side handles to one parameter owner's input nodes.
pub(crate) struct ParamNodes {
    prefix: String,
    map: std::collections::BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub(crate) fn get(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter node '{}{name}' missing", self.prefix))
    }
}

/// Create one graph input per parameter, named `prefix` + parameter name.
pub(crate) fn declare_params<T: Scalar>(
    gb: &mut GraphBuilder<T>,
    config: &EncoderConfig,
    prefix: &str,
) -> Result<ParamNodes> {
    let mut map = std::collections::BTreeMap::new();
    for (name, shape) in param_layout(config) {
        let id = gb.input(format!("{prefix}{name}"), shape)?;
        map.insert(name, id);
    }
    Ok(ParamNodes {
        prefix: prefix.to_string(),
        map,
    })
}

/// Sinusoidal absolute positions, injected at the input projection.
fn positional_encoding<T: Scalar>(frames: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let omega = (10_000f64).powf(-2.0 * pair / dim as f64);
            let angle = t as f64 * omega;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(sc(v));
        }
    }
    Tensor::from_parts(vec![frames, dim], data, false)
}

fn append_layer_norm<T: Scalar>(
    gb: &mut GraphBuilder<T>,
    x: NodeId,
    pn: &ParamNodes,
    name: &str,
) -> Result<NodeId> {
    gb.layer_norm(x, pn.get(&format!("{name}.g")), pn.get(&format!("{name}.b")), LN_EPS)
}

fn append_affine<T: Scalar>(
    gb: &mut GraphBuilder<T>,
    x: NodeId,
    pn: &ParamNodes,
    w: &str,
    b: &str,
) -> Result<NodeId> {
    let h = gb.matmul(x, pn.get(w))?;
    gb.add_row(h, pn.get(b))
}

/// Half-step feed-forward: returns (residual output, scaled ffn output).
fn append_ffn_sublayer<T: Scalar>(
    gb: &mut GraphBuilder<T>,
    x: NodeId,
    pn: &ParamNodes,
    prefix: &str,
) -> Result<(NodeId, NodeId)> {
    let t = append_layer_norm(gb, x, pn, &format!("{prefix}.ln"))?;
    let h = append_affine(gb, t, pn, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let h = gb.swish(h)?;
    let h = append_affine(gb, h, pn, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
    let half = gb.scale(h, sc(0.5));
    let out = gb.add(x, half)?;
    Ok((out, half))
}

pub(crate) fn append_attention_sublayer<T: Scalar>(
    gb: &mut GraphBuilder<T>,
    x: NodeId,
    pn: &ParamNodes,
    prefix: &str,
    dim: usize,
    heads: usize,
) -> Result<NodeId> {
    let dk = dim / heads;
    let t = append_layer_norm(gb, x, pn, &format!("{prefix}.ln"))?;
    let q = append_affine(gb, t, pn, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = append_affine(gb, t, pn, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = append_affine(gb, t, pn, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let inv_sqrt_dk = sc::<T>(1.0 / (dk as f64).sqrt());
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = gb.slice_cols(q, h * dk, dk)?;
        let kh = gb.slice_cols(k, h * dk, dk)?;
        let vh = gb.slice_cols(v, h * dk, dk)?;
        let kt = gb.transpose(kh)?;
        let scores = gb.matmul(qh, kt)?;
        let scores = gb.scale(scores, inv_sqrt_dk);
        let attn = gb.softmax(scores)?;
        contexts.push(gb.matmul(attn, vh)?);
    }
    let ctx = if contexts.len() == 1 {
        contexts[0]
    } else {
        gb.concat_cols(&contexts)?
    };
    let o = append_affine(gb, ctx, pn, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
    gb.add(x, o)
}

fn append_conv_sublayer<T: Scalar>(
    gb: &mut GraphBuilder<T>,
    x: NodeId,
    pn: &ParamNodes,
    prefix: &str,
) -> Result<NodeId> {
    let t = append_layer_norm(gb, x, pn, &format!("{prefix}.ln"))?;
    let u = append_affine(gb, t, pn, &format!("{prefix}.pw1.w"), &format!("{prefix}.pw1.b"))?;
    let u = gb.glu(u)?;
    let u = gb.depthwise_conv1d(u, pn.get(&format!("{prefix}.dw.w")))?;
    let u = append_layer_norm(gb, u, pn, &format!("{prefix}.norm"))?;
    let u = gb.swish(u)?;
    let u = append_affine(gb, u, pn, &format!("{prefix}.pw2.w"), &format!("{prefix}.pw2.b"))?;
    gb.add(x, u)
}

/// Tap handles produced while appending a forward pass.
pub(crate) struct ForwardTaps {
    /// (1-based layer, node), in ascending layer order.
    pub taps: Vec<(usize, NodeId)>,
    /// Output of the last block.
    pub final_output: NodeId,
}

/// Append the full encoder forward pass for one utterance.
#[allow(clippy::too_many_arguments)]
pub(crate) fn append_forward<T: Scalar>(
    gb: &mut GraphBuilder<T>,
    config: &EncoderConfig,
    pn: &ParamNodes,
    features: NodeId,
    frames: usize,
    mask: Option<&[usize]>,
    tap_layers: &[usize],
    tap_kind: TapKind,
) -> Result<ForwardTaps> {
    if let Some(&bad) = tap_layers
        .iter()
        .find(|&&l| l == 0 || l > config.layers)
    {
        return Err(Error::usage(format!(
            "tap layer {bad} out of range 1..={}",
            config.layers
        )));
    }
    let mut x = append_affine(gb, features, pn, "input_proj.w", "input_proj.b")?;
    if let Some(indices) = mask {
        if !indices.is_empty() {
            x = gb.mask_rows(x, pn.get("mask_embed"), indices.to_vec())?;
        }
    }
    let pos = gb.constant(positional_encoding::<T>(frames, config.dim));
    x = gb.add(x, pos)?;

    let mut taps = Vec::new();
    for i in 0..config.layers {
        let p = format!("block{i}");
        let (after_ffn1, _) = append_ffn_sublayer(gb, x, pn, &format!("{p}.ffn1"))?;
        let after_attn =
            append_attention_sublayer(gb, after_ffn1, pn, &format!("{p}.attn"), config.dim, config.heads)?;
        let after_conv = append_conv_sublayer(gb, after_attn, pn, &format!("{p}.conv"))?;
        let (after_ffn2, ffn2_tap) = append_ffn_sublayer(gb, after_conv, pn, &format!("{p}.ffn2"))?;
        let block_out = append_layer_norm(gb, after_ffn2, pn, &format!("{p}.final_ln"))?;
        gb.label(block_out, format!("{p}.output"));
        let layer = i + 1;
        if tap_layers.contains(&layer) {
            let tap = match tap_kind {
                TapKind::Ffn2 => ffn2_tap,
                TapKind::BlockOutput => block_out,
            };
            taps.push((layer, tap));
        }
        x = block_out;
    }
    Ok(ForwardTaps {
        taps,
        final_output: x,
    })
}

/// Number of scalar parameters in the input projection and mask embedding.
pub fn frontend_param_count(config: &EncoderConfig) -> u64 {
    (config.input_dim * config.dim + config.dim + config.dim) as u64
}

/// Number of scalar parameters in one block.
pub fn block_param_count(config: &EncoderConfig) -> u64 {
    let d = config.dim as u64;
    let f = config.ffn as u64;
    let k = config.conv_kernel as u64;
    let ffn = 2 * d + d * f + f + f * d + d;
    let attn = 2 * d + 4 * (d * d + d);
    let conv = 2 * d + (d * 2 * d + 2 * d) + k * d + 2 * d + (d * d + d);
    2 * ffn + attn + conv + 2 * d
}

/// Closed-form total parameter count for a config.
pub fn param_count(config: &EncoderConfig) -> u64 {
    frontend_param_count(config) + config.layers as u64 * block_param_count(config)
}

/// Analytical forward-pass multiply-accumulate count for an utterance of
/// `seconds` at the 50 Hz post-stacking frame rate.
///
/// Affine maps, attention score/context products, and convolutions count
/// one MAC per scalar multiply-add; normalizations and activations count
/// zero.
pub fn estimate_macs(config: &EncoderConfig, seconds: f64) -> Result<u64> {
    if seconds <= 0.0 {
        return Err(Error::usage(format!("seconds must be positive, got {seconds}")));
    }
    let t = (seconds * 50.0).round() as u64;
    let d = config.dim as u64;
    let f = config.ffn as u64;
    let k = config.conv_kernel as u64;
    let frontend = t * config.input_dim as u64 * d;
    let ffns = 4 * t * d * f;
    let attn = 4 * t * d * d + 2 * t * t * d;
    let conv = 3 * t * d * d + t * k * d;
    Ok(frontend + config.layers as u64 * (ffns + attn + conv))
}

/// How to seed a student's parameters from a width-matched teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherInit {
    /// Keep the random initialization.
    Random,
    /// Copy the teacher blocks selected by the layer map.
    LayerSkip,
    /// Copy the teacher's bottom blocks.
    BottomLayers,
}

/// Copy teacher parameters into a width-matched student: the input
/// projection, mask embedding, and one teacher block per student block.
pub fn init_student_from_teacher<T: Scalar>(
    student: &mut Encoder<T>,
    teacher: &Encoder<T>,
    mode: TeacherInit,
) -> Result<()> {
    if mode == TeacherInit::Random {
        return Ok(());
    }
    let (sc_, tc) = (student.config.clone(), teacher.config.clone());
    if sc_.dim != tc.dim || sc_.ffn != tc.ffn || sc_.heads != tc.heads
        || sc_.conv_kernel != tc.conv_kernel || sc_.input_dim != tc.input_dim
    {
        return Err(Error::config(
            "teacher-initialized students must match the teacher's widths".to_string(),
        ));
    }
    let selected: Vec<usize> = match mode {
        TeacherInit::LayerSkip => layer_map(sc_.layers, tc.layers)?
            .teacher_layers_in_order(),
        TeacherInit::BottomLayers => (1..=sc_.layers).collect(),
        TeacherInit::Random => unreachable!(),
    };
    for name in ["input_proj.w", "input_proj.b", "mask_embed"] {
        let src = teacher.params.get(name).unwrap().clone();
        *student.params.get_mut(name).unwrap() = src;
    }
    for (student_block, teacher_layer) in selected.iter().enumerate() {
        let src_prefix = format!("block{}.", teacher_layer - 1);
        let dst_prefix = format!("block{student_block}.");
        let names: Vec<String> = teacher
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(&src_prefix))
            .map(|(n, _)| n.to_string())
            .collect();
        for src_name in names {
            let suffix = &src_name[src_prefix.len()..];
            let dst_name = format!("{dst_prefix}{suffix}");
            let src = teacher.params.get(&src_name).unwrap().clone();
            *student
                .params
                .get_mut(&dst_name)
                .ok_or_else(|| Error::config(format!("missing student parameter {dst_name}")))? = src;
        }
    }
    Ok(())
}
