//! Filterbank-style feature sequences: synthesis, frame stacking, and a
//! bit-exact on-disk format.
//!
//! The on-disk layout is:
//!
//! ```text
//! magic "CLLD" | version u16 LE = 1 | dim u32 LE | frames u32 LE
//! | rate_hz u32 LE | payload frames*dim f32 LE, row-major
//! ```
//!
//! Manifests are JSON lines, one `{id, path, frames, dim}` object per line,
//! with paths interpreted relative to the manifest file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CLLD";
pub const FEATURE_FORMAT_VERSION: u16 = 1;

/// A frames x dim matrix of real-valued features at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub frames: usize,
    pub dim: usize,
    pub rate_hz: u32,
    values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(
        utterance_id: impl Into<String>,
        frames: usize,
        dim: usize,
        rate_hz: u32,
        values: Vec<f32>,
    ) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::usage(format!(
                "feature sequence needs frames >= 1 and dim >= 1, got {frames}x{dim}"
            )));
        }
        if values.len() != frames * dim {
            return Err(Error::usage(format!(
                "feature payload of {} values does not match {frames}x{dim}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite feature value at flat index {pos}"
            )));
        }
        Ok(FeatureSequence {
            utterance_id: utterance_id.into(),
            frames,
            dim,
            rate_hz,
            values,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }
}

/// Concatenate every `factor` consecutive frames into one wider frame.
///
/// Output frame k is the concatenation of input frames
/// `k*factor .. k*factor+factor`; trailing remainder frames are dropped and
/// the frame rate divides by `factor`.
pub fn stack_frames(seq: &FeatureSequence, factor: usize) -> Result<FeatureSequence> {
    if factor < 1 {
        return Err(Error::usage("stack factor must be >= 1".to_string()));
    }
    if factor == 1 {
        return Ok(seq.clone());
    }
    let out_frames = seq.frames / factor;
    if out_frames == 0 {
        return Err(Error::usage(format!(
            "cannot stack {} frames by factor {factor}",
            seq.frames
        )));
    }
    let out_dim = seq.dim * factor;
    let mut values = Vec::with_capacity(out_frames * out_dim);
    for k in 0..out_frames {
        values.extend_from_slice(
            &seq.values[k * factor * seq.dim..(k * factor + factor) * seq.dim],
        );
    }
    FeatureSequence::new(
        seq.utterance_id.clone(),
        out_frames,
        out_dim,
        seq.rate_hz / factor as u32,
        values,
    )
}

/// Downsample per-frame labels to match [`stack_frames`]: each stacked frame
/// takes the label of its first constituent frame.
pub fn stack_labels(labels: &[u32], factor: usize) -> Vec<u32> {
    if factor <= 1 {
        return labels.to_vec();
    }
    (0..labels.len() / factor).map(|k| labels[k * factor]).collect()
}

/// Knobs of the synthetic corpus generator. The defaults produce frames
/// whose class identity is only weakly visible frame-locally but strongly
/// visible across a time context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Scale of class mean vectors.
    pub class_sep: f64,
    /// Per-frame noise scale before smoothing.
    pub noise: f64,
    /// Centered moving-average window (frames).
    pub smooth_window: usize,
    /// Class segment length range (frames, inclusive).
    pub segment_min: usize,
    pub segment_max: usize,
    pub rate_hz: u32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            class_sep: 0.3,
            noise: 1.5,
            smooth_window: 7,
            segment_min: 30,
            segment_max: 80,
            rate_hz: 100,
        }
    }
}

/// Deterministic class-structured features plus per-frame labels.
///
/// Each utterance is a sequence of class segments; frame values are the
/// class mean plus noise, smoothed along time so neighboring frames carry
/// mutual information.
pub fn synth_features(
    seed: u64,
    frames: usize,
    dim: usize,
    num_classes: usize,
) -> Result<(FeatureSequence, Vec<u32>)> {
    synth_features_with(seed, frames, dim, num_classes, &SynthParams::default())
}

pub fn synth_features_with(
    seed: u64,
    frames: usize,
    dim: usize,
    num_classes: usize,
    params: &SynthParams,
) -> Result<(FeatureSequence, Vec<u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut means = vec![0.0f64; num_classes.max(1) * dim.max(1)];
    for m in means.iter_mut() {
        let draw: f64 = normal.sample(&mut rng);
        *m = draw * params.class_sep;
    }
    synth_features_from_means(seed, frames, dim, num_classes, &means, params)
}

/// Class-conditioned synthesis against caller-provided class means
/// (`num_classes` x `dim`, row-major). Sharing the means across utterances
/// makes class identity consistent corpus-wide.
pub fn synth_features_from_means(
    seed: u64,
    frames: usize,
    dim: usize,
    num_classes: usize,
    means: &[f64],
    params: &SynthParams,
) -> Result<(FeatureSequence, Vec<u32>)> {
    if frames == 0 || dim == 0 || num_classes == 0 {
        return Err(Error::usage(
            "frames, dim and num_classes must all be >= 1".to_string(),
        ));
    }
    if means.len() != num_classes * dim {
        return Err(Error::usage(format!(
            "means cover {} values, expected {num_classes}x{dim}",
            means.len()
        )));
    }
    if params.segment_min == 0 || params.segment_min > params.segment_max {
        return Err(Error::config(format!(
            "invalid segment range [{}, {}]",
            params.segment_min, params.segment_max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    let mut labels = Vec::with_capacity(frames);
    while labels.len() < frames {
        let len = rng.gen_range(params.segment_min..=params.segment_max);
        let class = rng.gen_range(0..num_classes) as u32;
        for _ in 0..len.min(frames - labels.len()) {
            labels.push(class);
        }
    }

    let mut raw = vec![0.0f64; frames * dim];
    for (t, &label) in labels.iter().enumerate() {
        let mean_row = &means[label as usize * dim..(label as usize + 1) * dim];
        for (d, &mu) in mean_row.iter().enumerate() {
            let draw: f64 = normal.sample(&mut rng);
            raw[t * dim + d] = mu + draw * params.noise;
        }
    }

    // Centered moving average, clamped at the edges.
    let half = params.smooth_window / 2;
    let mut values = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(frames);
        let inv = 1.0 / (hi - lo) as f64;
        for d in 0..dim {
            let mut acc = 0.0;
            for s in lo..hi {
                acc += raw[s * dim + d];
            }
            values.push((acc * inv) as f32);
        }
    }

    let seq = FeatureSequence::new(
        format!("synth-{seed:016x}"),
        frames,
        dim,
        params.rate_hz,
        values,
    )?;
    Ok((seq, labels))
}

fn read_exact_at<R: Read>(reader: &mut R, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::format(
                    offset + filled as u64,
                    format!("unexpected end of file while reading {what}"),
                ))
            }
            Ok(n) => filled += n,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Write a sequence in the bit-exact feature format.
pub fn write_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_FORMAT_VERSION.to_le_bytes())?;
    let dim = u32::try_from(seq.dim).map_err(|_| Error::usage("dim exceeds u32"))?;
    let frames = u32::try_from(seq.frames).map_err(|_| Error::usage("frames exceed u32"))?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&frames.to_le_bytes())?;
    w.write_all(&seq.rate_hz.to_le_bytes())?;
    for v in &seq.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Header fields of a feature file, without the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHeader {
    pub dim: u32,
    pub frames: u32,
    pub rate_hz: u32,
}

pub fn read_feature_header(path: impl AsRef<Path>) -> Result<FeatureHeader> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    read_header_from(&mut r)
}

fn read_header_from<R: Read>(r: &mut R) -> Result<FeatureHeader> {
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, 0, "magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    let mut v2 = [0u8; 2];
    read_exact_at(r, &mut v2, 4, "format version")?;
    let version = u16::from_le_bytes(v2);
    if version != FEATURE_FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported format version {version}")));
    }
    let mut v4 = [0u8; 4];
    read_exact_at(r, &mut v4, 6, "dim")?;
    let dim = u32::from_le_bytes(v4);
    read_exact_at(r, &mut v4, 10, "frames")?;
    let frames = u32::from_le_bytes(v4);
    read_exact_at(r, &mut v4, 14, "rate_hz")?;
    let rate_hz = u32::from_le_bytes(v4);
    if dim == 0 || frames == 0 {
        return Err(Error::format(6, format!("degenerate header {frames}x{dim}")));
    }
    Ok(FeatureHeader { dim, frames, rate_hz })
}

/// Read a sequence back; `read_features(write_features(x)) == x` bitwise.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut r)?;
    let expected = header.frames as usize * header.dim as usize;
    let mut payload = vec![0u8; expected * 4];
    read_exact_at(&mut r, &mut payload, 18, "payload")?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format(
            18 + payload.len() as u64,
            "trailing bytes after payload".to_string(),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unnamed".to_string());
    FeatureSequence::new(
        id,
        header.frames as usize,
        header.dim as usize,
        header.rate_hz,
        values,
    )
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub frames: usize,
    pub dim: usize,
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a manifest and validate every entry against its file header.
///
/// Duplicate ids, missing files, and header mismatches are all errors.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<(ManifestEntry, PathBuf)>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<(ManifestEntry, PathBuf)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::config(format!("manifest line {}: {e}", lineno + 1))
        })?;
        if out.iter().any(|(m, _)| m.id == entry.id) {
            return Err(Error::config(format!(
                "manifest line {}: duplicate id '{}'",
                lineno + 1,
                entry.id
            )));
        }
        let file = base.join(&entry.path);
        let header = read_feature_header(&file)?;
        if header.frames as usize != entry.frames || header.dim as usize != entry.dim {
            return Err(Error::config(format!(
                "manifest entry '{}' declares {}x{}, file has {}x{}",
                entry.id, entry.frames, entry.dim, header.frames, header.dim
            )));
        }
        out.push((entry, file));
    }
    Ok(out)
}

/// Per-utterance labels sidecar (JSON lines of `{id, labels}`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct LabelsEntry {
    pub id: String,
    pub labels: Vec<u32>,
}

pub fn write_labels(entries: &[LabelsEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelsEntry>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LabelsEntry = serde_json::from_str(&line)
            .map_err(|e| Error::config(format!("labels line {}: {e}", lineno + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Synthetic corpus description for a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthCorpusSpec {
    pub utterances: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub dim: usize,
    pub classes: usize,
    /// Frame stacking factor applied after synthesis.
    pub stack_factor: usize,
    #[serde(default)]
    pub params: SynthParams,
}

impl SynthCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.utterances == 0 {
            return Err(Error::config("utterances must be >= 1".to_string()));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::config(format!(
                "invalid frame range [{}, {}]",
                self.frames_min, self.frames_max
            )));
        }
        if self.dim == 0 || self.classes == 0 || self.stack_factor == 0 {
            return Err(Error::config(
                "dim, classes and stack_factor must be >= 1".to_string(),
            ));
        }
        if self.frames_min / self.stack_factor == 0 {
            return Err(Error::config(format!(
                "frames_min {} too short for stack_factor {}",
                self.frames_min, self.stack_factor
            )));
        }
        Ok(())
    }
}

/// One utterance ready for the encoder: stacked features plus optional
/// stacked-rate labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub seq: FeatureSequence,
    pub labels: Option<Vec<u32>>,
}

/// In-memory utterance collection feeding a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Width of the stacked features.
    pub fn input_dim(&self) -> Option<usize> {
        self.items.first().map(|i| i.seq.dim)
    }

    /// Synthesize a corpus: class means are drawn once and shared by every
    /// utterance, so class identity is consistent corpus-wide. Frames per
    /// utterance are drawn uniformly from the configured range.
    pub fn synthesize(spec: &SynthCorpusSpec, tree: &crate::rng::SeedTree) -> Result<Corpus> {
        spec.validate()?;
        let mut mean_rng = tree.stream("corpus-means", &[]);
        let normal = StandardNormal;
        let means: Vec<f64> = (0..spec.classes * spec.dim)
            .map(|_| -> f64 { normal.sample(&mut mean_rng) })
            .map(|v| v * spec.params.class_sep)
            .collect();
        let mut items = Vec::with_capacity(spec.utterances);
        for u in 0..spec.utterances {
            let mut meta_rng = tree.stream("corpus-frames", &[u as u64]);
            let frames = meta_rng.gen_range(spec.frames_min..=spec.frames_max);
            let seed = tree.derive("corpus-utt", &[u as u64]);
            let (raw, labels) = synth_features_from_means(
                seed,
                frames,
                spec.dim,
                spec.classes,
                &means,
                &spec.params,
            )?;
            let mut seq = stack_frames(&raw, spec.stack_factor)?;
            seq.utterance_id = format!("synth-{u:04}");
            let labels = stack_labels(&labels, spec.stack_factor);
            let labels = labels[..seq.frames].to_vec();
            items.push(CorpusItem {
                seq,
                labels: Some(labels),
            });
        }
        Ok(Corpus { items })
    }

    /// Load a manifest, stack every file, and attach labels when a sidecar
    /// is given. Labels are downsampled by the same factor.
    pub fn from_manifest(
        manifest_path: impl AsRef<Path>,
        stack_factor: usize,
        labels_path: Option<&Path>,
    ) -> Result<Corpus> {
        let entries = load_manifest(manifest_path)?;
        let labels_by_id: Option<Vec<LabelsEntry>> =
            labels_path.map(read_labels).transpose()?;
        let mut items = Vec::with_capacity(entries.len());
        for (entry, file) in entries {
            let raw = read_features(&file)?;
            let mut seq = stack_frames(&raw, stack_factor)?;
            seq.utterance_id = entry.id.clone();
            let labels = match &labels_by_id {
                Some(list) => {
                    let found = list.iter().find(|l| l.id == entry.id).ok_or_else(|| {
                        Error::config(format!("no labels for utterance '{}'", entry.id))
                    })?;
                    if found.labels.len() != raw.frames {
                        return Err(Error::config(format!(
                            "labels for '{}' cover {} frames, file has {}",
                            entry.id,
                            found.labels.len(),
                            raw.frames
                        )));
                    }
                    let stacked = stack_labels(&found.labels, stack_factor);
                    Some(stacked[..seq.frames].to_vec())
                }
                None => None,
            };
            items.push(CorpusItem { seq, labels });
        }
        Ok(Corpus { items })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize, dim: usize) -> FeatureSequence {
        let values: Vec<f32> = (0..frames * dim).map(|i| i as f32).collect();
        FeatureSequence::new("t", frames, dim, 100, values).unwrap()
    }

    #[test]
    fn stack_halves_rate_and_widens() {
        let s = seq(10, 80);
        let out = stack_frames(&s, 2).unwrap();
        assert_eq!((out.frames, out.dim, out.rate_hz), (5, 160, 50));
        // Frame 1 of the output is input frames 2 and 3 concatenated.
        assert_eq!(out.frame(1)[..80], *s.frame(2));
        assert_eq!(out.frame(1)[80..], *s.frame(3));
    }

    #[test]
    fn stack_factor_one_is_identity() {
        let s = seq(7, 3);
        assert_eq!(stack_frames(&s, 1).unwrap(), s);
    }

    #[test]
    fn stack_drops_remainder() {
        let s = seq(11, 80);
        let out = stack_frames(&s, 2).unwrap();
        assert_eq!((out.frames, out.dim), (5, 160));
    }

    #[test]
    fn stack_rejects_zero_factor() {
        let s = seq(4, 2);
        assert!(stack_frames(&s, 0).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_seed_sensitive() {
        let (a, la) = synth_features(7, 50, 8, 3).unwrap();
        let (b, lb) = synth_features(7, 50, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = synth_features(8, 50, 8, 3).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn synth_single_class_labels_all_zero() {
        let (_, labels) = synth_features(1, 40, 4, 1).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.clld");
        let s = seq(3, 4);
        write_features(&s, &path).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.values(), s.values());
        assert_eq!(
            (back.frames, back.dim, back.rate_hz),
            (s.frames, s.dim, s.rate_hz)
        );
    }

    #[test]
    fn bad_magic_is_format_error_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.clld");
        std::fs::write(&path, b"NOPE00000000000000").unwrap();
        match read_features(&path).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.clld");
        let s = seq(10, 2);
        write_features(&s, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Keep the header plus 9 frames' worth of payload.
        std::fs::write(&path, &bytes[..18 + 9 * 2 * 4]).unwrap();
        match read_features(&path).unwrap_err() {
            Error::Format { offset, message } => {
                assert_eq!(offset, 18 + 9 * 2 * 4);
                assert!(message.contains("payload"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_stacked() {
        let spec = SynthCorpusSpec {
            utterances: 4,
            frames_min: 60,
            frames_max: 100,
            dim: 8,
            classes: 3,
            stack_factor: 2,
            params: SynthParams::default(),
        };
        let tree = crate::rng::SeedTree::new(11);
        let a = Corpus::synthesize(&spec, &tree).unwrap();
        let b = Corpus::synthesize(&spec, &tree).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for item in &a.items {
            assert_eq!(item.seq.dim, 16);
            assert_eq!(item.seq.rate_hz, 50);
            assert_eq!(item.labels.as_ref().unwrap().len(), item.seq.frames);
        }
    }

    #[test]
    fn manifest_validates_headers() {
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("u0.clld");
        write_features(&seq(6, 4), &fpath).unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        write_manifest(
            &[ManifestEntry {
                id: "u0".into(),
                path: "u0.clld".into(),
                frames: 6,
                dim: 4,
            }],
            &manifest,
        )
        .unwrap();
        assert_eq!(load_manifest(&manifest).unwrap().len(), 1);

        write_manifest(
            &[ManifestEntry {
                id: "u0".into(),
                path: "u0.clld".into(),
                frames: 7,
                dim: 4,
            }],
            &manifest,
        )
        .unwrap();
        assert!(load_manifest(&manifest).is_err());
    }
}
