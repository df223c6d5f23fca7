//! Checkpoint format `CAPPO-CKPT v1`.
//!
//! Layout: a text header (`CAPPO-CKPT v1`, `step <n>`, `config_hash <hex>`,
//! `rng <4 x u64 hex>`, `tensors <count>`), then per parameter tensor one
//! descriptor line `tensor <name> <ndim> <dims...>` followed by the raw
//! little-endian 64-bit floats and a trailing newline byte. Load failures
//! name the section that broke.

use crate::policy::{ModelConfig, PolicyParams};
use crate::tensor::Tensor;
use crate::vocab::VOCAB_SIZE;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint, section `{section}`: {msg}")]
    Corrupt { section: String, msg: String },
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub config_hash: String,
    pub rng_state: [u64; 4],
    pub params: PolicyParams<f64>,
}

fn corrupt(section: &str, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt { section: section.into(), msg: msg.into() }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(b"CAPPO-CKPT v1\n");
    buf.extend_from_slice(format!("step {}\n", ckpt.step).as_bytes());
    buf.extend_from_slice(format!("config_hash {}\n", ckpt.config_hash).as_bytes());
    let s = ckpt.rng_state;
    buf.extend_from_slice(
        format!("rng {:016x} {:016x} {:016x} {:016x}\n", s[0], s[1], s[2], s[3]).as_bytes(),
    );
    let named = ckpt.params.named();
    buf.extend_from_slice(format!("tensors {}\n", named.len()).as_bytes());
    for (name, tensor) in named {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        buf.extend_from_slice(
            format!("tensor {name} {} {}\n", tensor.shape().len(), dims.join(" ")).as_bytes(),
        );
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self, section: &str) -> Result<&'a str, CheckpointError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
            self.pos += 1;
        }
        if self.pos >= self.bytes.len() {
            return Err(corrupt(section, "unexpected end of file"));
        }
        let line = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| corrupt(section, "non-utf8 header line"))?;
        self.pos += 1;
        Ok(line)
    }

    fn raw(&mut self, n: usize, section: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(section, format!("truncated: wanted {n} bytes")));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.line("magic")?;
    if magic != "CAPPO-CKPT v1" {
        return Err(corrupt("magic", format!("bad magic `{magic}`")));
    }
    let step = cur
        .line("step")?
        .strip_prefix("step ")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| corrupt("step", "expected `step <n>`"))?;
    let config_hash = cur
        .line("config_hash")?
        .strip_prefix("config_hash ")
        .map(str::to_string)
        .ok_or_else(|| corrupt("config_hash", "expected `config_hash <hex>`"))?;
    let rng_line = cur.line("rng")?;
    let rng_parts: Vec<&str> = rng_line
        .strip_prefix("rng ")
        .ok_or_else(|| corrupt("rng", "expected `rng <s0> <s1> <s2> <s3>`"))?
        .split(' ')
        .collect();
    if rng_parts.len() != 4 {
        return Err(corrupt("rng", "expected four state words"));
    }
    let mut rng_state = [0u64; 4];
    for (i, p) in rng_parts.iter().enumerate() {
        rng_state[i] =
            u64::from_str_radix(p, 16).map_err(|_| corrupt("rng", format!("bad word `{p}`")))?;
    }
    let count = cur
        .line("tensors")?
        .strip_prefix("tensors ")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| corrupt("tensors", "expected `tensors <count>`"))?;

    let mut entries: Vec<(String, Tensor<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let desc = cur.line("tensor descriptor")?;
        let mut parts = desc.split(' ');
        if parts.next() != Some("tensor") {
            return Err(corrupt("tensor descriptor", format!("bad descriptor `{desc}`")));
        }
        let name = parts
            .next()
            .ok_or_else(|| corrupt("tensor descriptor", "missing name"))?
            .to_string();
        let ndim: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt(&name, "bad ndim"))?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(
                parts
                    .next()
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| corrupt(&name, "bad dimension"))?,
            );
        }
        let numel: usize = shape.iter().product();
        let raw = cur.raw(numel * 8, &name)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        let sep = cur.raw(1, &name)?;
        if sep != b"\n" {
            return Err(corrupt(&name, "missing tensor separator"));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| corrupt(&name, format!("invalid tensor: {e}")))?;
        entries.push((name, tensor));
    }

    let params = params_from_entries(entries)?;
    Ok(Checkpoint { step, config_hash, rng_state, params })
}

fn params_from_entries(
    entries: Vec<(String, Tensor<f64>)>,
) -> Result<PolicyParams<f64>, CheckpointError> {
    const ORDER: [&str; 7] = ["embed", "img_w", "img_b", "hid_w", "hid_b", "out_w", "out_b"];
    if entries.len() != ORDER.len() {
        return Err(corrupt("tensors", format!("expected {} tensors, got {}", ORDER.len(), entries.len())));
    }
    let mut it = entries.into_iter();
    let mut take = |want: &str| -> Result<Tensor<f64>, CheckpointError> {
        let (name, t) = it.next().unwrap();
        if name != want {
            return Err(corrupt(want, format!("expected tensor `{want}`, found `{name}`")));
        }
        Ok(t)
    };
    Ok(PolicyParams {
        embed: take("embed")?,
        img_w: take("img_w")?,
        img_b: take("img_b")?,
        hid_w: take("hid_w")?,
        hid_b: take("hid_b")?,
        out_w: take("out_w")?,
        out_b: take("out_b")?,
    })
}

/// Shape congruence check against a model configuration (used before
/// evaluating or resuming with a loaded checkpoint).
pub fn validate_shapes(params: &PolicyParams<f64>, cfg: &ModelConfig) -> Result<(), CheckpointError> {
    let expect: [(&str, Vec<usize>); 7] = [
        ("embed", vec![VOCAB_SIZE, cfg.embed_dim]),
        ("img_w", vec![cfg.feat_dim, cfg.embed_dim]),
        ("img_b", vec![cfg.embed_dim]),
        ("hid_w", vec![cfg.feature_width(), cfg.hidden_dim]),
        ("hid_b", vec![cfg.hidden_dim]),
        ("out_w", vec![cfg.hidden_dim, VOCAB_SIZE]),
        ("out_b", vec![VOCAB_SIZE]),
    ];
    for ((name, want), (_, got)) in expect.iter().zip(params.named()) {
        if got.shape() != want.as_slice() {
            return Err(corrupt(
                name,
                format!("shape {:?} does not match configured {:?}", got.shape(), want),
            ));
        }
    }
    Ok(())
}
