//! Binary checkpoint container. The byte layout is described in
//! `docs/checkpoint-format.md`; all integers and floats are little-endian.

use std::io::{Read, Write};

use super::{Head, NetworkParams, NetworkSpec, NnError, Topology};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMOPOSE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A network plus free-form string metadata (task, normalization settings, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    /// Ordered `key=value` pairs. Keys must not contain `=` or newlines.
    pub metadata: Vec<(String, String)>,
}

fn topology_code(t: Topology) -> u8 {
    match t {
        Topology::Plain => 0,
        Topology::Residual => 1,
        Topology::DenseConcat => 2,
    }
}

fn head_code(h: Head) -> u8 {
    match h {
        Head::Classifier7 => 0,
        Head::Va2 => 1,
    }
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

fn to_u32(n: usize, what: &str) -> Result<u32, NnError> {
    u32::try_from(n).map_err(|_| bad(format!("{what} {n} does not fit in u32")))
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, params: NetworkParams) -> Self {
        Self {
            spec,
            params,
            metadata: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        self.params.check(&self.spec)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(bad(format!("metadata entry {k:?} is not encodable")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&to_u32(meta.len(), "metadata length")?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());

        out.extend_from_slice(&to_u32(self.spec.input_dim, "input_dim")?.to_le_bytes());
        out.push(topology_code(self.spec.topology));
        out.push(head_code(self.spec.head));
        out.extend_from_slice(&to_u32(self.spec.hidden.len(), "stage count")?.to_le_bytes());
        for &w in &self.spec.hidden {
            out.extend_from_slice(&to_u32(w, "width")?.to_le_bytes());
        }

        let shapes = self.params.tensor_shapes();
        let tensors = self.params.tensors();
        out.extend_from_slice(&to_u32(tensors.len(), "tensor count")?.to_le_bytes());
        for ((rows, cols), data) in shapes.into_iter().zip(tensors) {
            out.extend_from_slice(&to_u32(rows, "rows")?.to_le_bytes());
            out.extend_from_slice(&to_u32(cols, "cols")?.to_le_bytes());
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| bad("metadata is not UTF-8"))?;
        let metadata = meta
            .lines()
            .map(|line| {
                line.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| bad(format!("metadata line {line:?} has no '='")))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let input_dim = r.u32()? as usize;
        let topology = match r.u8()? {
            0 => Topology::Plain,
            1 => Topology::Residual,
            2 => Topology::DenseConcat,
            t => return Err(bad(format!("unknown topology code {t}"))),
        };
        let head = match r.u8()? {
            0 => Head::Classifier7,
            1 => Head::Va2,
            h => return Err(bad(format!("unknown head code {h}"))),
        };
        let n_hidden = r.u32()? as usize;
        if n_hidden > bytes.len() {
            return Err(bad("stage count exceeds file size"));
        }
        let hidden = (0..n_hidden).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>, _>>()?;
        let spec = NetworkSpec::new(input_dim, topology, hidden, head);
        spec.validate()?;
        let needed = spec
            .parameter_count()
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("parameter count overflows"))?;
        if needed > bytes.len() - r.pos {
            return Err(bad("declared network is larger than the file"));
        }

        let mut params = NetworkParams::zeros(&spec);
        let shapes = params.tensor_shapes();
        let count = r.u32()? as usize;
        if count != shapes.len() {
            return Err(bad(format!("expected {} tensors, found {count}", shapes.len())));
        }
        for (i, (tensor, shape)) in params.tensors_mut().into_iter().zip(shapes).enumerate() {
            let found = (r.u32()? as usize, r.u32()? as usize);
            if found != shape {
                return Err(bad(format!("tensor {i}: expected shape {shape:?}, found {found:?}")));
            }
            for x in tensor.iter_mut() {
                *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            spec,
            params,
            metadata,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), NnError> {
        w.write_all(&self.to_bytes()?).map_err(|e| bad(e.to_string()))
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, NnError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| bad(e.to_string()))?;
        Self::from_bytes(&buf)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(bad(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
}
