//! `SENA1` checkpoint files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        "SENA1"
//! architecture u32 input_channels, u32 input_size, u32 trunk_filters,
//!              u32 branch_filters, u32 kernel, u32 dense_units,
//!              f32 block_dropout, f32 head_dropout
//! trunk        <stack>
//! u32          task count
//! per task     u16 id length, id bytes (UTF-8), u32 n_classes,
//!              u8 body kind: 0 = owned, followed by <stack>
//!                            1 = shared, followed by u16 length + owner id
//!              <stack> (classifier head)
//! <stack>      u32 layer count, then per layer:
//!              u8 kind, u8 frozen, kind payload, u32 param count,
//!              per param: u32 rank, u32 dims[rank], f32 data[prod(dims)]
//! payloads     conv2d: u32 in_channels, u32 filters, u32 kernel, u8 padding (0 same, 1 valid)
//!              dropout: f32 rate
//!              dense: u32 inputs, u32 units
//!              relu, maxpool2x2, flatten, softmax: none
//! ```
//!
//! Float payloads are stored bit-exactly, so a loaded model computes the
//! same outputs as the saved one.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Result, SenaError};
use crate::layers::{LayerKind, LayerNode, LayerSpec, LayerStack, Padding};
use crate::model::{Architecture, BranchBody, MultiTaskModel, TaskBranch};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SENA1";

fn kind_code(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::Conv2d => 0,
        LayerKind::Relu => 1,
        LayerKind::MaxPool2x2 => 2,
        LayerKind::Dropout => 3,
        LayerKind::Flatten => 4,
        LayerKind::Dense => 5,
        LayerKind::Softmax => 6,
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("checkpoint field exceeds u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn layer(&mut self, layer: &LayerNode) {
        self.u8(kind_code(layer.kind()));
        self.u8(layer.is_frozen() as u8);
        match *layer.spec() {
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                padding,
            } => {
                self.u32(in_channels);
                self.u32(filters);
                self.u32(kernel);
                self.u8(match padding {
                    Padding::Same => 0,
                    Padding::Valid => 1,
                });
            }
            LayerSpec::Dropout { rate } => self.f32(rate),
            LayerSpec::Dense { inputs, units } => {
                self.u32(inputs);
                self.u32(units);
            }
            LayerSpec::Relu | LayerSpec::MaxPool2x2 | LayerSpec::Flatten | LayerSpec::Softmax => {}
        }
        self.u32(layer.params().len());
        for p in layer.params() {
            self.u32(p.ndim());
            for &d in p.shape() {
                self.u32(d);
            }
            for &v in p.data() {
                self.f32(v);
            }
        }
    }

    fn stack(&mut self, stack: &LayerStack) {
        self.u32(stack.len());
        for l in stack.layers() {
            self.layer(l);
        }
    }
}

pub fn encode(model: &MultiTaskModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    let a = model.architecture();
    for v in [
        a.input_channels,
        a.input_size,
        a.trunk_filters,
        a.branch_filters,
        a.kernel,
        a.dense_units,
    ] {
        w.u32(v);
    }
    w.f32(a.block_dropout);
    w.f32(a.head_dropout);
    w.stack(model.trunk());
    w.u32(model.task_count());
    for b in model.branches() {
        w.str(b.task_id());
        w.u32(b.n_classes());
        match b.body() {
            BranchBody::Owned(stack) => {
                w.u8(0);
                w.stack(stack);
            }
            BranchBody::Shared(owner) => {
                w.u8(1);
                w.str(owner);
            }
        }
        w.stack(b.head());
    }
    w.buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> SenaError {
        SenaError::format(self.pos as u64, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| SenaError::format(at as u64, format!("{what} is not UTF-8")))
    }

    fn layer(&mut self) -> Result<LayerNode> {
        let at = self.pos;
        let code = self.u8("layer kind")?;
        let frozen = match self.u8("frozen flag")? {
            0 => false,
            1 => true,
            other => return Err(SenaError::format(at as u64 + 1, format!("frozen flag {other}"))),
        };
        let spec = match code {
            0 => {
                let in_channels = self.u32("conv in_channels")?;
                let filters = self.u32("conv filters")?;
                let kernel = self.u32("conv kernel")?;
                let padding = match self.u8("conv padding")? {
                    0 => Padding::Same,
                    1 => Padding::Valid,
                    other => return Err(self.err(format!("unknown padding code {other}"))),
                };
                LayerSpec::Conv2d {
                    in_channels,
                    filters,
                    kernel,
                    padding,
                }
            }
            1 => LayerSpec::Relu,
            2 => LayerSpec::MaxPool2x2,
            3 => LayerSpec::Dropout {
                rate: self.f32("dropout rate")?,
            },
            4 => LayerSpec::Flatten,
            5 => LayerSpec::Dense {
                inputs: self.u32("dense inputs")?,
                units: self.u32("dense units")?,
            },
            6 => LayerSpec::Softmax,
            other => return Err(SenaError::format(at as u64, format!("unknown layer kind {other}"))),
        };
        let n_params = self.u32("parameter count")?;
        let mut params = Vec::with_capacity(n_params.min(4));
        for _ in 0..n_params {
            let rank = self.u32("tensor rank")?;
            if rank == 0 || rank > 8 {
                return Err(self.err(format!("implausible tensor rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32("tensor dim")?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&l| l > 0)
                .ok_or_else(|| self.err(format!("invalid tensor shape {shape:?}")))?;
            let raw = self.take(len.checked_mul(4).ok_or_else(|| self.err("tensor too large"))?, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Tensor::from_vec(&shape, data)?);
        }
        LayerNode::from_parts(spec, params, frozen).map_err(|e| SenaError::format(at as u64, e.to_string()))
    }

    fn stack(&mut self) -> Result<LayerStack> {
        let n = self.u32("layer count")?;
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            layers.push(self.layer()?);
        }
        Ok(LayerStack::new(layers))
    }
}

pub fn decode(bytes: &[u8]) -> Result<MultiTaskModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(SenaError::format(0, "bad magic, expected \"SENA1\""));
    }
    let arch = Architecture {
        input_channels: r.u32("architecture")?,
        input_size: r.u32("architecture")?,
        trunk_filters: r.u32("architecture")?,
        branch_filters: r.u32("architecture")?,
        kernel: r.u32("architecture")?,
        dense_units: r.u32("architecture")?,
        block_dropout: r.f32("architecture")?,
        head_dropout: r.f32("architecture")?,
    };
    let trunk = r.stack()?;
    let n_tasks = r.u32("task count")?;
    let mut branches = IndexMap::new();
    for _ in 0..n_tasks {
        let at = r.pos;
        let id = r.str("task id")?;
        let n_classes = r.u32("class count")?;
        let body = match r.u8("body kind")? {
            0 => BranchBody::Owned(r.stack()?),
            1 => BranchBody::Shared(r.str("body owner")?),
            other => return Err(r.err(format!("unknown body kind {other}"))),
        };
        let head = r.stack()?;
        if branches.contains_key(&id) {
            return Err(SenaError::format(at as u64, format!("duplicate task id {id:?}")));
        }
        branches.insert(id.clone(), TaskBranch::from_parts(id, n_classes, body, head));
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    MultiTaskModel::from_parts(arch, trunk, branches).map_err(|e| SenaError::format(0, e.to_string()))
}

pub fn save(model: &MultiTaskModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| SenaError::io(path, e))
}

pub fn load(path: &Path) -> Result<MultiTaskModel> {
    let bytes = fs::read(path).map_err(|e| SenaError::io(path, e))?;
    decode(&bytes)
}
