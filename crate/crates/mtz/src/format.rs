//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MTZMODEL"
//! version    u32      currently 1
//! kind       u8       0 = single network, 1 = joint model
//! body       ...      see `write_network` / `write_zipped`
//! checksum   u32      CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Matrices are stored as `rows: u64, cols: u64` followed by row-major `f64`
//! values; masks as an optional matrix of 0/1 values; strings as a `u32`
//! byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use mtz_core::linalg::Matrix;
use mtz_core::model::conv::ConvGeometry;
use mtz_core::model::{Activation, JointLayer, Layer, LayerKind, Network, Shape, TaskSet, UnitInfo, ZippedModel, ZippedParts};
use mtz_core::TaskId;

pub const MAGIC: &[u8; 8] = b"MTZMODEL";
pub const VERSION: u32 = 1;

const KIND_NETWORK: u8 = 0;
const KIND_ZIPPED: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported format version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("file truncated")]
    Truncated,
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("expected a {expected} model file")]
    WrongKind { expected: &'static str },
    #[error(transparent)]
    Model(#[from] mtz_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FormatError>;

/// Either kind of stored model.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredModel {
    Network(Network),
    Zipped(ZippedModel),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }

    fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.usize(*x));
    }

    fn matrix(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        m.as_slice().iter().for_each(|x| self.f64(*x));
    }

    fn mask(&mut self, m: Option<&Matrix>) {
        match m {
            None => self.u8(0),
            Some(m) => {
                self.u8(1);
                self.usize(m.rows());
                self.usize(m.cols());
                m.as_slice().iter().for_each(|x| self.u8(u8::from(*x != 0.0)));
            }
        }
    }

    fn shape(&mut self, s: Shape) {
        match s {
            Shape::Flat(n) => {
                self.u8(0);
                self.usize(n);
            }
            Shape::Image { channels, h, w } => {
                self.u8(1);
                self.usize(channels);
                self.usize(h);
                self.usize(w);
            }
        }
    }

    fn kind(&mut self, k: &LayerKind) {
        match k {
            LayerKind::Dense => self.u8(0),
            LayerKind::Conv(g) => {
                self.u8(1);
                for v in [g.in_channels, g.in_h, g.in_w, g.kernel, g.stride, g.padding] {
                    self.usize(v);
                }
            }
            LayerKind::ResidualEntry => self.u8(2),
            LayerKind::ResidualExit { shortcut } => {
                self.u8(3);
                self.usizes(shortcut);
            }
        }
    }

    fn activation(&mut self, a: Activation) {
        self.u8(match a {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
    }

    fn unit(&mut self, u: &UnitInfo) {
        self.u64(u.users.bits());
        self.usize(u.origins.len());
        for &(t, i) in &u.origins {
            self.usize(t);
            self.usize(i);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

/// Upper bound on any stored length, to reject corrupt headers before allocating.
const MAX_LEN: usize = 1 << 32;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|v| *v <= MAX_LEN)
            .ok_or_else(|| FormatError::Malformed(format!("length {v} out of range")))
    }

    fn len_of(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.bytes.len() - self.pos {
            return Err(FormatError::Truncated);
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::Malformed("task name is not UTF-8".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_of(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len_of(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    fn dims(&mut self, elem: usize) -> Result<(usize, usize)> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows.checked_mul(cols).ok_or(FormatError::Truncated)?;
        if n.saturating_mul(elem) > self.bytes.len() - self.pos {
            return Err(FormatError::Truncated);
        }
        Ok((rows, cols))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let (rows, cols) = self.dims(8)?;
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_vec(rows, cols, data)?)
    }

    fn mask(&mut self) -> Result<Option<Matrix>> {
        match self.u8()? {
            0 => Ok(None),
            1 => {
                let (rows, cols) = self.dims(1)?;
                let data = self.take(rows * cols)?.iter().map(|b| f64::from(*b)).collect();
                Ok(Some(Matrix::from_vec(rows, cols, data)?))
            }
            t => Err(FormatError::Malformed(format!("mask tag {t}"))),
        }
    }

    fn shape(&mut self) -> Result<Shape> {
        match self.u8()? {
            0 => Ok(Shape::Flat(self.usize()?)),
            1 => Ok(Shape::Image {
                channels: self.usize()?,
                h: self.usize()?,
                w: self.usize()?,
            }),
            t => Err(FormatError::Malformed(format!("shape tag {t}"))),
        }
    }

    fn kind(&mut self) -> Result<LayerKind> {
        match self.u8()? {
            0 => Ok(LayerKind::Dense),
            1 => Ok(LayerKind::Conv(ConvGeometry {
                in_channels: self.usize()?,
                in_h: self.usize()?,
                in_w: self.usize()?,
                kernel: self.usize()?,
                stride: self.usize()?,
                padding: self.usize()?,
            })),
            2 => Ok(LayerKind::ResidualEntry),
            3 => Ok(LayerKind::ResidualExit { shortcut: self.usizes()? }),
            t => Err(FormatError::Malformed(format!("layer kind tag {t}"))),
        }
    }

    fn activation(&mut self) -> Result<Activation> {
        match self.u8()? {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            t => Err(FormatError::Malformed(format!("activation tag {t}"))),
        }
    }

    fn unit(&mut self) -> Result<UnitInfo> {
        let users = TaskSet::from_bits(self.u64()?);
        let n = self.len_of(16)?;
        let origins = (0..n).map(|_| Ok((self.usize()?, self.usize()?))).collect::<Result<Vec<_>>>()?;
        Ok(UnitInfo { users, origins })
    }
}

fn write_layer(w: &mut Writer, kind: &LayerKind, act: Activation, weights: &Matrix, bias: &[f64], mask: Option<&Matrix>) {
    w.kind(kind);
    w.activation(act);
    w.matrix(weights);
    w.f64s(bias);
    w.mask(mask);
}

fn write_network(w: &mut Writer, net: &Network) {
    w.str(net.task().as_str());
    w.shape(net.input_shape());
    w.usize(net.depth());
    for l in net.layers() {
        write_layer(w, l.kind(), l.activation(), l.weights(), l.bias(), l.mask());
    }
}

fn read_network(r: &mut Reader<'_>) -> Result<Network> {
    let task = TaskId::new(r.str()?);
    let input = r.shape()?;
    let depth = r.len_of(1)?;
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let kind = r.kind()?;
        let act = r.activation()?;
        let weights = r.matrix()?;
        let bias = r.f64s()?;
        let mask = r.mask()?;
        layers.push(Layer::new(kind, weights, bias, mask, act)?);
    }
    Ok(Network::new(task, input, layers)?)
}

fn write_zipped(w: &mut Writer, zm: &ZippedModel) {
    let p = zm.to_parts();
    w.usize(p.tasks.len());
    for t in &p.tasks {
        w.str(t.as_str());
    }
    w.f64s(&p.task_weights);
    w.usizes(&p.task_inputs);
    w.shape(p.input);
    w.usize(p.input_units.len());
    p.input_units.iter().for_each(|u| w.unit(u));
    w.usize(p.layers.len());
    for l in &p.layers {
        write_layer(w, &l.kind, l.activation, &l.weights, &l.bias, l.mask.as_ref());
        w.usize(l.units.len());
        l.units.iter().for_each(|u| w.unit(u));
    }
}

fn read_zipped(r: &mut Reader<'_>) -> Result<ZippedModel> {
    let n = r.len_of(4)?;
    let tasks = (0..n).map(|_| Ok(TaskId::new(r.str()?))).collect::<Result<Vec<_>>>()?;
    let task_weights = r.f64s()?;
    let task_inputs = r.usizes()?;
    let input = r.shape()?;
    let n = r.len_of(8)?;
    let input_units = (0..n).map(|_| r.unit()).collect::<Result<Vec<_>>>()?;
    let depth = r.len_of(1)?;
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let kind = r.kind()?;
        let activation = r.activation()?;
        let weights = r.matrix()?;
        let bias = r.f64s()?;
        let mask = r.mask()?;
        let n = r.len_of(8)?;
        let units = (0..n).map(|_| r.unit()).collect::<Result<Vec<_>>>()?;
        layers.push(JointLayer {
            kind,
            weights,
            bias,
            mask,
            activation,
            units,
        });
    }
    Ok(ZippedModel::from_parts(ZippedParts {
        tasks,
        task_weights,
        task_inputs,
        input,
        input_units,
        layers,
    })?)
}

fn finish(mut w: Writer) -> Vec<u8> {
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

fn header(kind: u8) -> Writer {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(kind);
    w
}

pub fn encode_network(net: &Network) -> Vec<u8> {
    let mut w = header(KIND_NETWORK);
    write_network(&mut w, net);
    finish(w)
}

pub fn encode_zipped(zm: &ZippedModel) -> Vec<u8> {
    let mut w = header(KIND_ZIPPED);
    write_zipped(&mut w, zm);
    finish(w)
}

pub fn encode(model: &StoredModel) -> Vec<u8> {
    match model {
        StoredModel::Network(n) => encode_network(n),
        StoredModel::Zipped(z) => encode_zipped(z),
    }
}

pub fn decode(bytes: &[u8]) -> Result<StoredModel> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 1 + 4 {
        return Err(FormatError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    let model = match r.u8()? {
        KIND_NETWORK => StoredModel::Network(read_network(&mut r)?),
        KIND_ZIPPED => StoredModel::Zipped(read_zipped(&mut r)?),
        t => return Err(FormatError::Malformed(format!("model kind tag {t}"))),
    };
    if r.pos != body.len() {
        return Err(FormatError::Malformed("trailing bytes after model".into()));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &StoredModel) -> Result<()> {
    fs::write(path, encode(model)).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<StoredModel> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

pub fn load_network(path: &Path) -> Result<Network> {
    match load(path)? {
        StoredModel::Network(n) => Ok(n),
        StoredModel::Zipped(_) => Err(FormatError::WrongKind { expected: "single-network" }),
    }
}

pub fn load_zipped(path: &Path) -> Result<ZippedModel> {
    match load(path)? {
        StoredModel::Zipped(z) => Ok(z),
        StoredModel::Network(_) => Err(FormatError::WrongKind { expected: "joint" }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mtz_core::model::arch::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64, task: &str) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Architecture::mlp(&[5, 4]).build(TaskId::new(task), Shape::Flat(3), 2, &mut rng).unwrap()
    }

    #[test]
    fn network_round_trip_is_exact() {
        let n = net(1, "a");
        let bytes = encode_network(&n);
        assert_eq!(decode(&bytes).unwrap(), StoredModel::Network(n));
    }

    #[test]
    fn zipped_round_trip_is_exact() {
        let zm = ZippedModel::from_networks(&net(1, "a"), &net(2, "b")).unwrap();
        let bytes = encode_zipped(&zm);
        assert_eq!(decode(&bytes).unwrap(), StoredModel::Zipped(zm));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_network(&net(1, "a"));
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(decode(&bad), Err(FormatError::BadMagic)));
        let mut bad = bytes.clone();
        let k = bad.len() / 2;
        bad[k] ^= 0x10;
        assert!(matches!(decode(&bad), Err(FormatError::Checksum { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(FormatError::UnsupportedVersion(9))));
        assert!(matches!(decode(&bytes[..10]), Err(FormatError::Truncated)));
    }
}
