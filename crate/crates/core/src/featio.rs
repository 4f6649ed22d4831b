//! Reader and writer for ACPF feature-map dumps, plus sample averaging.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ACPF" | version: u8 = 1 | layer_count: u32
//! per layer: name_len: u16 | name (UTF-8) | s: u32 | c: u32 | H: u32 | W: u32
//!            | payload: s*c*H*W f32, row-major (s, c, H, W)
//! ```

use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ACPF";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum FeatioError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad dump format: {0}")]
    Format(String),
    #[error("dump truncated: {0}")]
    Truncated(String),
    #[error("invalid dump data: {0}")]
    Data(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpShape {
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl DumpShape {
    pub fn new(samples: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            samples,
            channels,
            height,
            width,
        }
    }

    pub fn map_len(&self) -> usize {
        self.height * self.width
    }

    fn checked_len(&self) -> Option<usize> {
        self.samples
            .checked_mul(self.channels)?
            .checked_mul(self.height)?
            .checked_mul(self.width)
    }
}

/// Captured feature maps of one layer, `(s, c, H, W)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    layer_name: String,
    shape: DumpShape,
    data: Vec<f32>,
}

impl FeatureDump {
    pub fn new(layer_name: impl Into<String>, shape: DumpShape, data: Vec<f32>) -> Result<Self, FeatioError> {
        let layer_name = layer_name.into();
        if shape.samples == 0 || shape.channels == 0 || shape.height == 0 || shape.width == 0 {
            return Err(FeatioError::Data(format!(
                "layer `{layer_name}` has an empty dimension: {shape:?}"
            )));
        }
        if layer_name.len() > u16::MAX as usize {
            return Err(FeatioError::Data("layer name longer than 65535 bytes".into()));
        }
        if [shape.samples, shape.channels, shape.height, shape.width]
            .iter()
            .any(|&d| d > u32::MAX as usize)
        {
            return Err(FeatioError::Data(format!("layer `{layer_name}` dimension exceeds u32")));
        }
        if shape.checked_len() != Some(data.len()) {
            return Err(FeatioError::Data(format!(
                "layer `{layer_name}` holds {} values, shape {shape:?} needs more or fewer",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatioError::Data(format!(
                "layer `{layer_name}` value {i} is not finite"
            )));
        }
        Ok(Self {
            layer_name,
            shape,
            data,
        })
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn shape(&self) -> DumpShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The `H*W` map of `channel` for `sample`.
    pub fn map(&self, sample: usize, channel: usize) -> &[f32] {
        let m = self.shape.map_len();
        let start = (sample * self.shape.channels + channel) * m;
        &self.data[start..start + m]
    }
}

/// Per-channel mean map over the sample axis, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedMaps {
    pub layer_name: String,
    pub channels: Vec<Vec<f64>>,
}

pub fn average_samples(d: &FeatureDump) -> AveragedMaps {
    let shape = d.shape();
    let mut channels = vec![vec![0.0f64; shape.map_len()]; shape.channels];
    for s in 0..shape.samples {
        for (c, acc) in channels.iter_mut().enumerate() {
            for (a, &v) in acc.iter_mut().zip(d.map(s, c)) {
                *a += v as f64;
            }
        }
    }
    let n = shape.samples as f64;
    for v in channels.iter_mut().flatten() {
        *v /= n;
    }
    AveragedMaps {
        layer_name: d.layer_name.clone(),
        channels,
    }
}

pub fn encode_dumps(dumps: &[FeatureDump]) -> Vec<u8> {
    let payload: usize = dumps
        .iter()
        .map(|d| 2 + d.layer_name.len() + 16 + 4 * d.data.len())
        .sum();
    let mut out = Vec::with_capacity(9 + payload);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(dumps.len() as u32).to_le_bytes());
    for d in dumps {
        out.extend_from_slice(&(d.layer_name.len() as u16).to_le_bytes());
        out.extend_from_slice(d.layer_name.as_bytes());
        let s = d.shape;
        for dim in [s.samples, s.channels, s.height, s.width] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &d.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_dump(path: impl AsRef<Path>, dumps: &[FeatureDump]) -> Result<(), FeatioError> {
    std::fs::write(path, encode_dumps(dumps))?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Vec<FeatureDump>, FeatioError> {
    decode_dumps(&std::fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FeatioError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(FeatioError::Truncated(format!(
                "{what} needs {n} bytes at offset {}, {remaining} left",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16, FeatioError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FeatioError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_dumps(bytes: &[u8]) -> Result<Vec<FeatureDump>, FeatioError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FeatioError::Format("missing ACPF magic".into()));
    }
    let mut cur = Cursor { buf: bytes, pos: 4 };
    let version = cur.take(1, "version")?[0];
    if version != VERSION {
        return Err(FeatioError::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32("layer count")?;
    let mut dumps = Vec::new();
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "layer name")?)
            .map_err(|_| FeatioError::Format("layer name is not UTF-8".into()))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32("shape")? as usize;
        }
        let shape = DumpShape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = shape
            .checked_len()
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FeatioError::Truncated(format!("layer `{name}` declares an impossible size")))?;
        let raw = cur.take(n, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        dumps.push(FeatureDump::new(name, shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(FeatioError::Format(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - cur.pos
        )));
    }
    Ok(dumps)
}
