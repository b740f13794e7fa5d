//! Binary checkpoint: `CTRTAB\0`, u16 LE version, u32 LE header length,
//! JSON header, then every tensor as little-endian f64 in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{BundleFlags, ControlParams, ModelBundle, Process, ZeroConvKind};
use crate::denoiser::{DenoiserParams, TimeEmbedConfig, DENOISER_TENSORS};
use crate::encode::EncoderState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"CTRTAB\0";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlHeader {
    pub zero_conv: ZeroConvKind,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub schema_fingerprint: String,
    pub process: Process,
    pub flags: BundleFlags,
    pub hidden: usize,
    pub time_embed: TimeEmbedConfig,
    pub control: Option<ControlHeader>,
    pub encoder: EncoderState,
    pub tensors: Vec<TensorEntry>,
    /// Echo of the training configuration that produced the weights.
    pub train_config: serde_json::Value,
}

fn named(bundle: &ModelBundle) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = DENOISER_TENSORS
        .iter()
        .zip(bundle.denoiser.tensors())
        .map(|(n, t)| (format!("denoiser.{n}"), t))
        .collect();
    if let Some(c) = &bundle.control {
        out.extend(c.named_tensors().into_iter().map(|(n, t)| (format!("control.{n}"), t)));
    }
    out
}

pub fn to_bytes(bundle: &ModelBundle, train_config: serde_json::Value) -> Result<Vec<u8>> {
    let tensors = named(bundle);
    let header = CheckpointHeader {
        schema_fingerprint: bundle.encoder.schema.fingerprint(),
        process: bundle.process.clone(),
        flags: bundle.flags,
        hidden: bundle.denoiser.hidden(),
        time_embed: bundle.denoiser.time_cfg,
        control: bundle.control.as_ref().map(|c| ControlHeader {
            zero_conv: c.kind(),
            b: c.b,
        }),
        encoder: bundle.encoder.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        train_config,
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 6 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated file while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelBundle, CheckpointHeader)> {
    let mut rest = bytes;
    if take(&mut rest, MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes(take(&mut rest, 2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = u32::from_le_bytes(take(&mut rest, 4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(&mut rest, len, "header")?)
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.encoder.schema.fingerprint() != header.schema_fingerprint {
        return Err(Error::Format("schema fingerprint does not match embedded schema".into()));
    }
    header.process.validate().map_err(|e| Error::Format(e.to_string()))?;

    let d = header.encoder.dim();
    let mut denoiser = DenoiserParams::zeros(d, header.hidden)?;
    denoiser.time_cfg = header.time_embed;
    let time_width = header.time_embed.dim;
    denoiser.time1 = crate::denoiser::Linear::zeros(time_width, header.hidden);
    let mut control = match &header.control {
        Some(c) => Some(ControlParams::attach(&denoiser, c.zero_conv, c.b)?),
        None => None,
    };
    let mut slots: Vec<(String, &mut Tensor)> = DENOISER_TENSORS
        .iter()
        .map(|n| format!("denoiser.{n}"))
        .zip(denoiser.tensors_mut())
        .collect();
    if let Some(c) = control.as_mut() {
        let names: Vec<String> = c.named_tensors().into_iter().map(|(n, _)| format!("control.{n}")).collect();
        slots.extend(names.into_iter().zip(c.tensors_mut()));
    }
    if slots.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "header lists {} tensors, architecture has {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
        if *name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor `{}` {:?} does not match expected `{name}` {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let raw = take(&mut rest, slot.len() * 8, &entry.name)?;
        for (v, b) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
    }
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after payload", rest.len())));
    }
    let bundle = ModelBundle {
        denoiser,
        control,
        process: header.process.clone(),
        encoder: header.encoder.clone(),
        flags: header.flags,
    };
    Ok((bundle, header))
}

pub fn save_checkpoint(bundle: &ModelBundle, train_config: serde_json::Value, path: &Path) -> Result<()> {
    let bytes = to_bytes(bundle, train_config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; when `fingerprint` is given it must match the
/// stored schema fingerprint.
pub fn load_checkpoint(path: &Path, fingerprint: Option<&str>) -> Result<(ModelBundle, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let out = from_bytes(&bytes)?;
    if let Some(fp) = fingerprint {
        if fp != out.1.schema_fingerprint {
            return Err(Error::Format(format!(
                "schema fingerprint mismatch: checkpoint {} vs data {fp}",
                out.1.schema_fingerprint
            )));
        }
    }
    Ok(out)
}
