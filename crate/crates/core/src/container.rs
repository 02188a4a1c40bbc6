//! `TRC1` binary container for code and fingerprint artifacts.
//!
//! ```text
//! magic       4 bytes "TRC1"
//! version     u16     1
//! kind        u8      1 bias matrix, 2 codebook, 3 owner basis,
//!                     4 projection matrix, 5 trigger set
//! dtype       u8      0 f64, 1 u16, 2 f32
//! rank        u8
//! dims        rank x u64
//! meta_len    u32
//! meta        meta_len x f64   (kind-specific scalars, see below)
//! payload     prod(dims) elements of dtype, row-major
//! ```
//! Everything is little-endian.
//!
//! | kind | dims | meta | payload |
//! |------|------|------|---------|
//! | bias matrix | `[m, q]` | `[tau, kappa]` | f64 probabilities |
//! | codebook | `[n_owners, m]` | `[q, owner ids...]` | u16 labels |
//! | owner basis | `[p, p]` | `[n_owners]` | f64, row `j` is `s_j` |
//! | projection | `[l, p]` | `[]` | f64 |
//! | trigger set | `[m, 28, 28, 1]` | `[shared, owner or -1, seed]` | f32 pixels |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::datasets::TriggerSet;
use crate::error::{Error, Result};
use crate::tardos::{BiasMatrix, CodeBook};
use crate::whitebox::{OwnerBasis, ProjectionMatrix};

pub const MAGIC: &[u8; 4] = b"TRC1";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    BiasMatrix = 1,
    CodeBook = 2,
    OwnerBasis = 3,
    Projection = 4,
    TriggerSet = 5,
}

impl Kind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Kind::BiasMatrix,
            2 => Kind::CodeBook,
            3 => Kind::OwnerBasis,
            4 => Kind::Projection,
            5 => Kind::TriggerSet,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::U16(_) => 1,
            Payload::F32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U16(v) => v.len(),
            Payload::F32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub dims: Vec<u64>,
    pub meta: Vec<f64>,
    pub payload: Payload,
}

impl Container {
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let expected: u64 = self.dims.iter().product();
        assert_eq!(expected as usize, self.payload.len(), "payload disagrees with dims");
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&[self.kind as u8, self.payload.dtype(), self.dims.len() as u8])?;
        for d in &self.dims {
            out.write_all(&d.to_le_bytes())?;
        }
        out.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for m in &self.meta {
            out.write_all(&m.to_le_bytes())?;
        }
        // serialize in bounded blocks so huge projections never double in memory
        let mut buf = Vec::with_capacity(1 << 16);
        macro_rules! dump {
            ($values:expr) => {
                for block in $values.chunks(8192) {
                    buf.clear();
                    for v in block {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    out.write_all(&buf)?;
                }
            };
        }
        match &self.payload {
            Payload::F64(v) => dump!(v),
            Payload::U16(v) => dump!(v),
            Payload::F32(v) => dump!(v),
        }
        Ok(())
    }

    pub fn read_from(input: impl Read, origin: &Path) -> Result<Self> {
        let mut r = Reader {
            inner: input,
            pos: 0,
            origin,
        };
        let magic = r.bytes(4)?;
        if magic != MAGIC {
            return Err(r.err_at(0, "bad magic, expected TRC1"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(r.err(&format!("unsupported container version {version}")));
        }
        let [kind, dtype, rank] = r.array::<3>()?;
        let kind = Kind::from_u8(kind).ok_or_else(|| r.err(&format!("unknown artifact kind {kind}")))?;
        let dims: Vec<u64> = (0..rank).map(|_| r.array().map(u64::from_le_bytes)).collect::<Result<_>>()?;
        let meta_len = u32::from_le_bytes(r.array()?) as usize;
        let meta: Vec<f64> = (0..meta_len).map(|_| r.array().map(f64::from_le_bytes)).collect::<Result<_>>()?;
        let count = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).ok_or_else(|| r.err("dimension overflow"))? as usize;
        let payload = match dtype {
            0 => Payload::F64(r.values(count, f64::from_le_bytes)?),
            1 => Payload::U16(r.values(count, u16::from_le_bytes)?),
            2 => Payload::F32(r.values(count, f32::from_le_bytes)?),
            other => return Err(r.err(&format!("unknown dtype {other}"))),
        };
        let mut probe = [0u8; 1];
        if r.inner.read(&mut probe)? != 0 {
            return Err(r.err("trailing bytes after payload"));
        }
        Ok(Self { kind, dims, meta, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_from(BufReader::new(File::open(path)?), path)
    }
}

struct Reader<'p, R> {
    inner: R,
    pos: u64,
    origin: &'p Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => self.err("unexpected end of container"),
            _ => Error::Io(e),
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn values<T, const N: usize>(&mut self, count: usize, decode: fn([u8; N]) -> T) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(count);
        let mut block = vec![0u8; 8192 * N];
        let mut left = count;
        while left > 0 {
            let take = left.min(8192);
            self.fill(&mut block[..take * N])?;
            out.extend(block[..take * N].chunks_exact(N).map(|c| decode(c.try_into().unwrap())));
            left -= take;
        }
        Ok(out)
    }

    fn err(&self, reason: &str) -> Error {
        self.err_at(self.pos, reason)
    }

    fn err_at(&self, offset: u64, reason: &str) -> Error {
        Error::Parse {
            path: self.origin.to_path_buf(),
            offset,
            reason: reason.to_string(),
        }
    }
}

/// Types persisted in a `TRC1` container.
pub trait Artifact: Sized {
    const KIND: Kind;
    fn to_container(&self) -> Container;
    fn from_container(c: Container) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != Self::KIND {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: 6,
                reason: format!("expected {:?}, found {:?}", Self::KIND, c.kind),
            });
        }
        Self::from_container(c)
    }
}

fn bad(reason: &str) -> Error {
    Error::ShapeMismatch(reason.to_string())
}

impl Artifact for BiasMatrix {
    const KIND: Kind = Kind::BiasMatrix;

    fn to_container(&self) -> Container {
        Container {
            kind: Self::KIND,
            dims: vec![self.m() as u64, self.q() as u64],
            meta: vec![self.tau(), self.kappa()],
            payload: Payload::F64(self.entries().to_vec()),
        }
    }

    fn from_container(c: Container) -> Result<Self> {
        match (c.dims.as_slice(), c.meta.as_slice(), c.payload) {
            (&[m, q], &[tau, kappa], Payload::F64(v)) => BiasMatrix::from_entries(m as usize, q as usize, tau, kappa, v),
            _ => Err(bad("malformed bias matrix container")),
        }
    }
}

impl Artifact for CodeBook {
    const KIND: Kind = Kind::CodeBook;

    fn to_container(&self) -> Container {
        let mut meta = vec![self.q() as f64];
        meta.extend(self.owner_ids().iter().map(|&id| id as f64));
        Container {
            kind: Self::KIND,
            dims: vec![self.n_owners() as u64, self.m() as u64],
            meta,
            payload: Payload::U16(self.labels().to_vec()),
        }
    }

    fn from_container(c: Container) -> Result<Self> {
        match (c.dims.as_slice(), c.payload) {
            (&[n, m], Payload::U16(labels)) if c.meta.len() == n as usize + 1 => {
                let q = c.meta[0] as usize;
                let ids = c.meta[1..].iter().map(|&v| v as u32).collect();
                CodeBook::from_labels(q, m as usize, ids, labels)
            }
            _ => Err(bad("malformed codebook container")),
        }
    }
}

impl Artifact for OwnerBasis {
    const KIND: Kind = Kind::OwnerBasis;

    fn to_container(&self) -> Container {
        Container {
            kind: Self::KIND,
            dims: vec![self.dim() as u64, self.dim() as u64],
            meta: vec![self.n_owners() as f64],
            payload: Payload::F64(self.as_column_major().to_vec()),
        }
    }

    fn from_container(c: Container) -> Result<Self> {
        match (c.dims.as_slice(), c.meta.as_slice(), c.payload) {
            (&[p, p2], &[n], Payload::F64(v)) if p == p2 => OwnerBasis::from_columns(p as usize, n as usize, v),
            _ => Err(bad("malformed owner basis container")),
        }
    }
}

impl Artifact for ProjectionMatrix {
    const KIND: Kind = Kind::Projection;

    fn to_container(&self) -> Container {
        Container {
            kind: Self::KIND,
            dims: vec![self.rows() as u64, self.cols() as u64],
            meta: vec![],
            payload: Payload::F64(self.entries().to_vec()),
        }
    }

    fn from_container(c: Container) -> Result<Self> {
        match (c.dims.as_slice(), c.payload) {
            (&[l, p], Payload::F64(v)) => ProjectionMatrix::from_entries(l as usize, p as usize, v),
            _ => Err(bad("malformed projection container")),
        }
    }
}

impl Artifact for TriggerSet {
    const KIND: Kind = Kind::TriggerSet;

    fn to_container(&self) -> Container {
        Container {
            kind: Self::KIND,
            dims: vec![self.len() as u64, 28, 28, 1],
            meta: vec![
                if self.shared { 1.0 } else { 0.0 },
                self.owner.map(|o| o as f64).unwrap_or(-1.0),
                self.seed as f64,
            ],
            payload: Payload::F32(self.images.clone()),
        }
    }

    fn from_container(c: Container) -> Result<Self> {
        match (c.dims.as_slice(), c.meta.as_slice(), c.payload) {
            (&[_, 28, 28, 1], &[shared, owner, seed], Payload::F32(images)) => Ok(TriggerSet {
                images,
                shared: shared != 0.0,
                owner: (owner >= 0.0).then_some(owner as usize),
                seed: seed as u64,
            }),
            _ => Err(bad("malformed trigger set container")),
        }
    }
}
