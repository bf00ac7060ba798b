//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "KFLO" u16 version u8 mode u32 node_count
//! per node: u16 name_len, name, u8 kind, u32 x6 geometry (stride h w,
//!           padding h w, dilation h w), u32 groups, u8 layout, tensors
//! per tensor: u8 rank, u32 x rank dims, f32 payload
//! u32 CRC32 of everything above
//! ```
//!
//! Layout tag 0 means no parameters, 1 a plain kernel and bias, and any
//! `B >= 2` a base kernel, `B - 1` cascade kernels and a bias.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use super::{LayerKind, LayerNode, Mode, ModelError, ModelGraph, NodeParams, Result};
use crate::autodiff::{ParamClass, ParamStore};
use crate::kflo::KfloBlock;
use crate::tensor::{ConvGeometry, Tensor};

pub const FORMAT_MAGIC: [u8; 4] = *b"KFLO";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 1 + 4;

impl ModelGraph<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&FORMAT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.mode {
            Mode::Training => 0,
            Mode::Deployed => 1,
        });
        out.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        for node in &self.nodes {
            out.extend_from_slice(&(node.name.len() as u16).to_le_bytes());
            out.extend_from_slice(node.name.as_bytes());
            out.push(kind_tag(node.kind));
            let g = &node.geom;
            for v in [g.stride.0, g.stride.1, g.padding.0, g.padding.1, g.dilation.0, g.dilation.1, g.groups] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            let tensors: Vec<_> = match &node.params {
                NodeParams::None => {
                    out.push(0);
                    vec![]
                }
                NodeParams::Plain { kernel, bias } => {
                    out.push(1);
                    vec![*kernel, *bias]
                }
                NodeParams::Kflo { w1, cascade, bias, .. } => {
                    out.push((cascade.len() + 1) as u8);
                    std::iter::once(*w1).chain(cascade.iter().copied()).chain([*bias]).collect()
                }
            };
            for id in tensors {
                write_tensor(&mut out, self.params.value(id));
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(ModelError::Truncated {
                offset: 0,
                needed: 4,
                len: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != FORMAT_MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        if bytes.len() < 6 {
            return Err(ModelError::Truncated {
                offset: 4,
                needed: 2,
                len: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(ModelError::Truncated {
                offset: 6,
                needed: HEADER_LEN + 4 - 6,
                len: bytes.len(),
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        let mut parser = Parser {
            bytes: body,
            pos: 0,
            spans: Vec::new(),
        };
        let parsed = parser.model();
        if stored != computed {
            let located = locate_single_byte_error(stored ^ computed, body.len());
            if located.is_none() {
                if let Err(e @ ModelError::Truncated { .. }) = parsed {
                    return Err(e);
                }
            }
            let layer = located.map(|offset| {
                parser
                    .spans
                    .iter()
                    .find(|(_, r)| r.contains(&offset))
                    .map(|(name, _)| name.clone())
                    .unwrap_or_else(|| "header".to_string())
            });
            return Err(ModelError::Checksum { stored, computed, layer });
        }
        let model = parsed?;
        if parser.pos != body.len() {
            return Err(ModelError::Structure(format!(
                "{} trailing bytes after the last node",
                body.len() - parser.pos
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Loads a model and checks that it is in `mode`.
    pub fn load_expecting(path: impl AsRef<Path>, mode: Mode) -> Result<Self> {
        let model = Self::load(path)?;
        if model.mode != mode {
            return Err(ModelError::Mode {
                expected: mode,
                found: model.mode,
            });
        }
        Ok(model)
    }
}

fn kind_tag(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::Conv2d => 0,
        LayerKind::Fc => 1,
        LayerKind::Relu => 2,
        LayerKind::MaxPool2d => 3,
        LayerKind::GlobalAvgPool => 4,
    }
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Byte range of every node parsed so far.
    spans: Vec<(String, Range<usize>)>,
}

impl Parser<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len() + 4,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self, layer: &str) -> Result<Tensor<f32>> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| ModelError::Structure(format!("{layer}: tensor shape {shape:?} overflows")))?;
        let payload = self.take(numel)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }

    fn model(&mut self) -> Result<ModelGraph<f32>> {
        self.pos = 6;
        let mode = match self.u8()? {
            0 => Mode::Training,
            1 => Mode::Deployed,
            m => return Err(ModelError::Structure(format!("unknown mode byte {m}"))),
        };
        let count = self.u32()? as usize;
        let mut params = ParamStore::new();
        let mut nodes = Vec::new();
        for _ in 0..count {
            let start = self.pos;
            let len = self.u16()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| ModelError::Structure(format!("layer name at offset {start} is not UTF-8")))?;
            self.spans.push((name.clone(), start..start));
            let node = self.node(name, mode, &mut params)?;
            self.spans.last_mut().unwrap().1 = start..self.pos;
            nodes.push(node);
        }
        Ok(ModelGraph {
            input_shape: None,
            nodes,
            params,
            mode,
        })
    }

    fn node(&mut self, name: String, mode: Mode, params: &mut ParamStore<f32>) -> Result<LayerNode> {
        let kind = match self.u8()? {
            0 => LayerKind::Conv2d,
            1 => LayerKind::Fc,
            2 => LayerKind::Relu,
            3 => LayerKind::MaxPool2d,
            4 => LayerKind::GlobalAvgPool,
            k => return Err(ModelError::Structure(format!("{name}: unknown layer kind {k}"))),
        };
        let mut g = [0usize; 7];
        for v in &mut g {
            *v = self.u32()? as usize;
        }
        let geom = ConvGeometry {
            stride: (g[0], g[1]),
            padding: (g[2], g[3]),
            dilation: (g[4], g[5]),
            groups: g[6],
        };
        let layout = self.u8()?;
        let structure = |msg: String| ModelError::Structure(format!("{name}: {msg}"));
        if kind.is_filtering() != (layout != 0) {
            return Err(structure(format!("layout tag {layout} does not fit a {kind:?} layer")));
        }
        let rank = if kind == LayerKind::Conv2d { 4 } else { 2 };
        let node_params = match layout {
            0 => NodeParams::None,
            1 => {
                let kernel = self.tensor(&name)?;
                let bias = self.tensor(&name)?;
                if kernel.rank() != rank || bias.shape() != [kernel.shape()[0]] {
                    return Err(structure(format!("kernel {:?} with bias {:?}", kernel.shape(), bias.shape())));
                }
                NodeParams::Plain {
                    kernel: params.push(format!("{name}.weight"), ParamClass::Plain, kernel),
                    bias: params.push(format!("{name}.bias"), ParamClass::Bias, bias),
                }
            }
            depth => {
                if mode == Mode::Deployed {
                    return Err(structure("deployed model contains an overparameterized layer".into()));
                }
                let w1 = self.tensor(&name)?;
                let cascade = (1..depth).map(|_| self.tensor(&name)).collect::<Result<Vec<_>>>()?;
                let bias = self.tensor(&name)?;
                let ch_out = cascade.last().map(|k| k.shape()[0]).unwrap_or(0);
                if w1.rank() != rank || bias.shape() != [ch_out] || ch_out == 0 {
                    return Err(structure(format!("base kernel {:?} with bias {:?}", w1.shape(), bias.shape())));
                }
                let rho = w1.shape()[0] as f64 / ch_out as f64;
                let block = KfloBlock::new(w1, cascade, geom, rho).map_err(|e| structure(e.to_string()))?;
                let (w1, cascade) = block.into_parts();
                let w1 = params.push(format!("{name}.w1"), ParamClass::BaseKernel, w1);
                let cascade = cascade
                    .into_iter()
                    .enumerate()
                    .map(|(i, k)| params.push(format!("{name}.cascade{}", i + 2), ParamClass::Cascade, k))
                    .collect();
                let bias = params.push(format!("{name}.bias"), ParamClass::Bias, bias);
                NodeParams::Kflo { w1, cascade, bias }
            }
        };
        Ok(LayerNode {
            name,
            kind,
            geom,
            params: node_params,
        })
    }
}

/// Reflected CRC-32 table (polynomial 0xEDB88320).
fn crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    table
}

/// Finds the offset of a single corrupted byte from the CRC syndrome
/// `stored ^ computed` over a message of `len` bytes.
///
/// For equal-length messages the syndrome is the init-free CRC register of
/// the error pattern. A lone error byte `e` at offset `p` leaves `table[e]`
/// in the register, followed by `len - 1 - p` zero-byte steps, which are
/// undone one at a time until a table entry appears.
fn locate_single_byte_error(syndrome: u32, len: usize) -> Option<usize> {
    let table = crc_table();
    let mut inv_top = [0u8; 256];
    for (i, &t) in table.iter().enumerate() {
        inv_top[(t >> 24) as usize] = i as u8;
    }
    let entries: HashMap<u32, u8> = table.iter().enumerate().skip(1).map(|(i, &t)| (t, i as u8)).collect();
    let mut r = syndrome;
    for zeros in 0..len {
        if entries.contains_key(&r) {
            return Some(len - 1 - zeros);
        }
        let idx = inv_top[(r >> 24) as usize];
        r = ((r ^ table[idx as usize]) << 8) | idx as u32;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kflo::KfloConfig;
    use crate::model::build_lenet5;

    #[test]
    fn table_matches_crc32fast() {
        let t = crc_table();
        let mut crc = !0u32;
        for &b in b"123456789" {
            crc = t[((crc ^ b as u32) & 0xff) as usize] ^ (crc >> 8);
        }
        assert_eq!(!crc, crc32fast::hash(b"123456789"));
        assert_eq!(!crc, 0xCBF4_3926);
    }

    #[test]
    fn top_bytes_are_distinct() {
        let mut seen = [false; 256];
        for t in crc_table() {
            assert!(!std::mem::replace(&mut seen[(t >> 24) as usize], true));
        }
    }

    #[test]
    fn locates_every_single_byte_flip() {
        let msg: Vec<u8> = (0..300u32).map(|i| (i * 37 % 251) as u8).collect();
        let crc = crc32fast::hash(&msg);
        for p in [0, 1, 150, 298, 299] {
            for flip in [0x01u8, 0x80, 0xff] {
                let mut bad = msg.clone();
                bad[p] ^= flip;
                assert_eq!(locate_single_byte_error(crc ^ crc32fast::hash(&bad), msg.len()), Some(p));
            }
        }
    }

    #[test]
    fn round_trip_and_header_errors() {
        let m = build_lenet5::<f32>(KfloConfig::new(3, 0.5).unwrap(), 10, 1, 4).unwrap();
        let bytes = m.to_bytes();
        let back = ModelGraph::from_bytes(&bytes).unwrap();
        assert_eq!(back.nodes(), m.nodes());
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelGraph::from_bytes(&bad), Err(ModelError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(ModelGraph::from_bytes(&bad), Err(ModelError::UnsupportedVersion(2))));
        assert!(matches!(
            ModelGraph::from_bytes(&bytes[..bytes.len() / 2]),
            Err(ModelError::Truncated { .. })
        ));
    }
}
