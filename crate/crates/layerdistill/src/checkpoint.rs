//! Checkpoint container: a JSON header followed by named f32 blobs.
//!
//! Layout:
//!
//! ```text
//! magic "LDCP" | header_len u32 LE | header JSON (UTF-8)
//! then per blob:
//!   name_len u16 LE | name UTF-8 | rank u8 | rank x dim u32 LE
//!   | numel x f32 LE
//! ```
//!
//! The header carries `format_version`, a `kind` tag, `step`, `blob_count`,
//! and kind-specific fields (an encoder checkpoint embeds its config).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::autodiff::Tensor;
use crate::encoder::{param_count, Encoder, EncoderConfig, ParamSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDCP";
pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;

/// One named tensor in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Write a container; `blob_count` and `format_version` are filled in.
pub fn write_container(path: impl AsRef<Path>, header: &Value, blobs: &[Blob]) -> Result<()> {
    let mut header = header.clone();
    let obj = header
        .as_object_mut()
        .ok_or_else(|| Error::usage("container header must be a JSON object"))?;
    obj.insert("format_version".into(), CHECKPOINT_FORMAT_VERSION.into());
    obj.insert("blob_count".into(), blobs.len().into());
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&u32::try_from(header_bytes.len()).unwrap().to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for blob in blobs {
        let name = blob.name.as_bytes();
        w.write_all(&u16::try_from(name.len()).map_err(|_| Error::usage("blob name too long"))?.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[u8::try_from(blob.shape.len()).map_err(|_| Error::usage("blob rank too large"))?])?;
        let numel: usize = blob.shape.iter().product();
        if numel != blob.data.len() {
            return Err(Error::usage(format!(
                "blob '{}' declares shape {:?} but has {} values",
                blob.name,
                blob.shape,
                blob.data.len()
            )));
        }
        for &d in &blob.shape {
            w.write_all(&u32::try_from(d).map_err(|_| Error::usage("blob dim exceeds u32"))?.to_le_bytes())?;
        }
        for v in &blob.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::format(
                        start + filled as u64,
                        format!("unexpected end of file while reading {what}"),
                    ))
                }
                Ok(n) => filled += n,
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Read a container back: header plus blobs in file order.
pub fn read_container(path: impl AsRef<Path>) -> Result<(Value, Vec<Blob>)> {
    let mut c = Cursor {
        inner: BufReader::new(File::open(path.as_ref())?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    let header_len = c.u32("header length")? as usize;
    let header_start = c.offset;
    let mut header_bytes = vec![0u8; header_len];
    c.read_exact(&mut header_bytes, "header")?;
    let header: Value = serde_json::from_slice(&header_bytes).map_err(|e| {
        Error::format(header_start, format!("header is not valid JSON: {e}"))
    })?;
    let version = header.get("format_version").and_then(Value::as_u64);
    if version != Some(CHECKPOINT_FORMAT_VERSION) {
        return Err(Error::format(
            header_start,
            format!("unsupported format_version {version:?}"),
        ));
    }
    let blob_count = header
        .get("blob_count")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::format(header_start, "header missing blob_count"))? as usize;

    let mut blobs = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        let name_len = c.u16("blob name length")? as usize;
        let name_start = c.offset;
        let mut name_bytes = vec![0u8; name_len];
        c.read_exact(&mut name_bytes, "blob name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(name_start, "blob name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        c.read_exact(&mut rank, "blob rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(c.u32("blob dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        c.read_exact(&mut payload, &format!("blob '{name}' payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        blobs.push(Blob { name, shape, data });
    }
    let mut extra = [0u8; 1];
    if c.inner.read(&mut extra)? != 0 {
        return Err(Error::format(c.offset, "trailing bytes after last blob"));
    }
    Ok((header, blobs))
}

pub(crate) fn params_to_blobs(params: &ParamSet<f32>, prefix: &str) -> Vec<Blob> {
    params
        .iter()
        .map(|(name, t)| Blob {
            name: format!("{prefix}{name}"),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

/// Save an encoder: header carries the config and step.
pub fn save_encoder(encoder: &Encoder<f32>, step: u64, path: impl AsRef<Path>) -> Result<()> {
    let header = serde_json::json!({
        "kind": "encoder",
        "step": step,
        "config": encoder.config(),
    });
    write_container(path, &header, &params_to_blobs(encoder.params(), ""))
}

/// Load an encoder saved by [`save_encoder`]. Every parameter must be
/// present with its declared shape.
pub fn load_encoder(path: impl AsRef<Path>) -> Result<(Encoder<f32>, u64)> {
    let (header, blobs) = read_container(path)?;
    if header.get("kind").and_then(Value::as_str) != Some("encoder") {
        return Err(Error::format(0, "container is not an encoder checkpoint"));
    }
    let step = header.get("step").and_then(Value::as_u64).unwrap_or(0);
    let config: EncoderConfig = serde_json::from_value(
        header
            .get("config")
            .cloned()
            .ok_or_else(|| Error::format(0, "encoder checkpoint missing config"))?,
    )?;
    config.validate()?;
    let params = blobs_to_params(&blobs, "")?;
    let encoder = Encoder::from_parts(config.clone(), params);
    if encoder.params().total_values() != param_count(&config) {
        return Err(Error::format(
            0,
            format!(
                "checkpoint holds {} parameter values, config expects {}",
                encoder.params().total_values(),
                param_count(&config)
            ),
        ));
    }
    Ok((encoder, step))
}

pub(crate) fn blobs_to_params(blobs: &[Blob], prefix: &str) -> Result<ParamSet<f32>> {
    let mut params = ParamSet::new();
    for blob in blobs {
        if let Some(name) = blob.name.strip_prefix(prefix) {
            params.push(
                name.to_string(),
                Tensor::new(blob.shape.clone(), blob.data.clone())?,
            );
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::build_encoder;

    #[test]
    fn container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let header = serde_json::json!({"kind": "test", "step": 3});
        let blobs = vec![
            Blob {
                name: "a".into(),
                shape: vec![2, 2],
                data: vec![1.0, -2.5, 0.0, 4.25],
            },
            Blob {
                name: "b".into(),
                shape: vec![3],
                data: vec![0.5, 0.25, -0.125],
            },
        ];
        write_container(&path, &header, &blobs).unwrap();
        let (h, back) = read_container(&path).unwrap();
        assert_eq!(h["kind"], "test");
        assert_eq!(h["blob_count"], 2);
        assert_eq!(back, blobs);
    }

    #[test]
    fn encoder_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let cfg = EncoderConfig::preset("tiny").unwrap();
        let enc = build_encoder::<f32>(&cfg, 5).unwrap();
        save_encoder(&enc, 42, &path).unwrap();
        let (back, step) = load_encoder(&path).unwrap();
        assert_eq!(step, 42);
        assert_eq!(back.config(), enc.config());
        for ((n1, t1), (n2, t2)) in back.params().iter().zip(enc.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn truncated_container_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let blobs = vec![Blob {
            name: "a".into(),
            shape: vec![4],
            data: vec![0.0; 4],
        }];
        write_container(&path, &serde_json::json!({"kind": "test"}), &blobs).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_container(&path).unwrap_err() {
            Error::Format { message, .. } => assert!(message.contains("payload")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"XXXX\x02\x00\x00\x00{}").unwrap();
        match read_container(&path).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
