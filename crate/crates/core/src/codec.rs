//! Little-endian primitives shared by the binary artifact formats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Mlp};

#[derive(Debug, Default)]
pub(crate) struct Writer {
    pub bytes: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raw(&mut self, b: &[u8]) {
        self.bytes.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.raw(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.raw(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.raw(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, values: &[f64]) {
        self.usize(values.len());
        values.iter().for_each(|v| self.f64(*v));
    }

    pub fn f32s(&mut self, values: &[f32]) {
        values.iter().for_each(|v| self.raw(&v.to_le_bytes()));
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.raw(s.as_bytes());
    }

    /// Architecture header followed by the layer-ordered `f32` payload.
    pub fn mlp(&mut self, net: &Mlp) {
        self.u32(net.layers().len() as u32);
        for layer in net.layers() {
            self.u32(layer.inputs as u32);
            self.u32(layer.outputs as u32);
            self.u8(layer.activation.tag());
        }
        for layer in net.layers() {
            self.f32s(&layer.weights);
            self.f32s(&layer.bias);
        }
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(Error::Truncated(what));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    pub fn magic(&mut self, expected: &[u8; 4], kind: &str) -> Result<()> {
        if self.take(4, "magic")? != expected {
            return Err(Error::Format(format!("not a {kind} file (magic mismatch)")));
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32, kind: &str) -> Result<()> {
        let v = self.u32("version")?;
        if v != expected {
            return Err(Error::Format(format!("unsupported {kind} version {v} (expected {expected})")));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn usize(&mut self, what: &'static str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} out of range")))
    }

    pub fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, what: &'static str) -> Result<Vec<f64>> {
        let n = self.usize(what)?;
        if n.saturating_mul(8) > self.remaining() {
            return Err(Error::Truncated(what));
        }
        (0..n).map(|_| self.f64(what)).collect()
    }

    pub fn f32s(&mut self, count: usize, out: &mut Vec<f32>, what: &'static str) -> Result<()> {
        let raw = self.take(count.checked_mul(4).ok_or(Error::Truncated(what))?, what)?;
        out.extend(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        Ok(())
    }

    pub fn str(&mut self, what: &'static str) -> Result<String> {
        let n = self.usize(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    pub fn mlp(&mut self) -> Result<Mlp> {
        let count = self.u32("layer count")? as usize;
        if count == 0 || count > 64 {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let inputs = self.u32("layer inputs")? as usize;
            let outputs = self.u32("layer outputs")? as usize;
            let activation = Activation::from_tag(self.u8("activation")?)?;
            shapes.push((inputs, outputs, activation));
        }
        let mut layers = Vec::with_capacity(count);
        for (inputs, outputs, activation) in shapes {
            let mut layer = Dense::zeros(inputs, outputs, activation);
            layer.weights.clear();
            layer.bias.clear();
            self.f32s(inputs.saturating_mul(outputs), &mut layer.weights, "layer weights")?;
            self.f32s(outputs, &mut layer.bias, "layer bias")?;
            layers.push(layer);
        }
        Mlp::from_layers(layers)
    }

    pub fn finish(&self, kind: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after {kind}", self.remaining())));
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
