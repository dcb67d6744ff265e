//! Binary weight file: a little-endian header followed by named float32
//! tensors.
//!
//! Layout: magic `LMDE1`; nine u32 config fields (vision width, text width,
//! vocabulary, vision layers, text layers, heads, patch size, resolution,
//! max text length); dropout as an f32; then for each tensor a u32 name
//! length, the UTF-8 name, a u32 rank, u32 dims, and row-major f32 data.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"LMDE1";

/// Model hyperparameters persisted in the file header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightHeader {
    pub vision_width: u32,
    pub text_width: u32,
    pub vocab: u32,
    pub vision_layers: u32,
    pub text_layers: u32,
    pub heads: u32,
    pub patch_size: u32,
    pub resolution: u32,
    pub max_text_len: u32,
    pub dropout: f32,
}

pub fn save(path: &Path, header: &WeightHeader, tensors: &[(String, &Tensor)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    for field in [
        header.vision_width,
        header.text_width,
        header.vocab,
        header.vision_layers,
        header.text_layers,
        header.heads,
        header.patch_size,
        header.resolution,
        header.max_text_len,
    ] {
        w.write_all(&field.to_le_bytes()).map_err(io)?;
    }
    w.write_all(&header.dropout.to_le_bytes()).map_err(io)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())
            .map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<(WeightHeader, Vec<(String, Tensor)>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::WeightLoad(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| bad("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic, not a weight file"));
    }
    let u32_at = |r: &mut BufReader<fs::File>, what: &str| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::WeightLoad(format!("{}: truncated {what}", path.display())))?;
        Ok(u32::from_le_bytes(b))
    };
    let vision_width = u32_at(&mut r, "header")?;
    let text_width = u32_at(&mut r, "header")?;
    let vocab = u32_at(&mut r, "header")?;
    let vision_layers = u32_at(&mut r, "header")?;
    let text_layers = u32_at(&mut r, "header")?;
    let heads = u32_at(&mut r, "header")?;
    let patch_size = u32_at(&mut r, "header")?;
    let resolution = u32_at(&mut r, "header")?;
    let max_text_len = u32_at(&mut r, "header")?;
    let dropout = f32::from_le_bytes(u32_at(&mut r, "header")?.to_le_bytes());
    let header = WeightHeader {
        vision_width,
        text_width,
        vocab,
        vision_layers,
        text_layers,
        heads,
        patch_size,
        resolution,
        max_text_len,
        dropout,
    };

    let mut tensors = Vec::new();
    loop {
        let mut b = [0u8; 4];
        match r.read_exact(&mut b) {
            Ok(()) => {}
            Err(_) => break, // clean end of file
        }
        let name_len = u32::from_le_bytes(b) as usize;
        if name_len > 4096 {
            return Err(bad("implausible tensor name length"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name not UTF-8"))?;
        let rank = u32_at(&mut r, "rank")? as usize;
        if rank > 8 {
            return Err(bad("implausible tensor rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut r, "dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut fb = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut fb)
                .map_err(|_| bad("truncated tensor data"))?;
            data.push(f32::from_le_bytes(fb) as f64);
        }
        tensors.push((name, Tensor::new(shape, data)));
    }
    Ok((header, tensors))
}

/// Lookup over loaded tensors with shape validation on extraction.
pub struct TensorMap(std::collections::BTreeMap<String, Tensor>);

impl TensorMap {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        TensorMap(entries.into_iter().collect())
    }

    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::WeightLoad(format!("missing tensor {name:?}")))?;
        if t.shape() != shape {
            return Err(Error::WeightLoad(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Extraction without a shape expectation, for variable-length entries.
    pub fn take_dynamic(&mut self, name: &str) -> Option<Tensor> {
        self.0.remove(name)
    }

    pub fn remaining(&self) -> Vec<&str> {
        self.0.keys().map(|s| s.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
