//! Little-endian binary container for snapshots, stores, trails, models and
//! datasets.
//!
//! Layout: magic `BCTS`, `u32` version, `u32` feature dimension, 32-byte
//! config hash, then any number of sections, each a 4-byte tag, a `u64`
//! payload length and the payload. Readers skip tags they do not know.
//!
//! | tag    | payload |
//! |--------|---------|
//! | `PLCY` | `u64` n_B, `u8` retention, `u32` C, C × `u64` class counts |
//! | `MEAN` | `u32` epoch, C × d class means, d global mean (`f64`) |
//! | `STDS` | `u32` epoch, C × d class standard deviations (`f64`) |
//! | `SNAP` | `u32` class, `u32` epoch, `u32` rows, rows × d `f32` |
//! | `TRAL` | `u32` class, `u32` epoch, `u32` rows, rows × (`u32` epoch, `u32` index), rows × d `f32` |
//! | `PARM` | `u32` activation, `u32` epoch, `u32` D, H, d, then w1, b1, w2, b2 as `f32` |
//! | `CLSF` | `u32` C, `u32` d, C × d weights, C biases (`f32`) |
//! | `DSET` | `u8` split, `u32` N, `u32` D, `u32` C, N × `u32` labels, N × D `f32` |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::classifier::LinearClassifier;
use crate::datagen::{Dataset, Split};
use crate::embedding::{Activation, EmbeddingParams};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::trailstore::{ClassSnapshot, EpochStats, Provenance, Retention, StorePolicy, TrailSet, TrailStore};

pub const MAGIC: [u8; 4] = *b"BCTS";
pub const VERSION: u32 = 1;

pub type ConfigHash = [u8; 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub dim: u32,
    pub config_hash: ConfigHash,
}

const HEADER_LEN: usize = 4 + 4 + 4 + 32;

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn len32(&mut self, v: usize) -> Result<&mut Self> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        Ok(self.u32(v))
    }
    fn f32s(&mut self, v: &[f32]) -> &mut Self {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
        self
    }
    fn f64s(&mut self, v: &[f64]) -> &mut Self {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
        self
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format(format!("truncated {} section", self.what)));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn count(&mut self, n: usize, width: usize) -> Result<usize> {
        match n.checked_mul(width) {
            Some(b) if b <= self.buf.len() => Ok(b),
            _ => Err(Error::Format(format!("truncated {} section", self.what))),
        }
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.count(n, 4)?;
        Ok(self.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.count(n, 8)?;
        Ok(self.take(bytes)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("oversized matrix in {} section", self.what)))?;
        Matrix::new(rows, cols, self.f32s(n)?).map_err(|e| Error::Format(format!("{} section: {e}", self.what)))
    }
    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes in {} section", self.buf.len(), self.what)))
        }
    }
}

/// Accumulates sections in memory; [`ContainerWriter::finish`] returns the
/// encoded bytes.
pub struct ContainerWriter {
    bytes: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(dim: usize, config_hash: &ConfigHash) -> Result<Self> {
        let mut e = Enc::default();
        e.0.extend_from_slice(&MAGIC);
        e.u32(VERSION).len32(dim)?;
        e.0.extend_from_slice(config_hash);
        Ok(Self { bytes: e.0 })
    }

    fn section(&mut self, tag: &[u8; 4], payload: Enc) {
        self.bytes.extend_from_slice(tag);
        self.bytes.extend_from_slice(&(payload.0.len() as u64).to_le_bytes());
        self.bytes.extend_from_slice(&payload.0);
    }

    pub fn snapshot(&mut self, s: &ClassSnapshot) -> Result<&mut Self> {
        let mut e = Enc::default();
        e.len32(s.class)?.u32(s.epoch).len32(s.features.rows())?.f32s(s.features.data());
        self.section(b"SNAP", e);
        Ok(self)
    }

    pub fn trails(&mut self, t: &TrailSet) -> Result<&mut Self> {
        let mut e = Enc::default();
        e.len32(t.class)?.u32(t.epoch).len32(t.len())?;
        for p in &t.provenance {
            e.u32(p.epoch).u32(p.index);
        }
        e.f32s(t.features.data());
        self.section(b"TRAL", e);
        Ok(self)
    }

    pub fn embedding(&mut self, p: &EmbeddingParams) -> Result<&mut Self> {
        let mut e = Enc::default();
        e.u32(p.activation.id())
            .u32(p.epoch)
            .len32(p.input_dim())?
            .len32(p.hidden_dim())?
            .len32(p.feature_dim())?;
        e.f32s(p.w1.data()).f32s(&p.b1).f32s(p.w2.data()).f32s(&p.b2);
        self.section(b"PARM", e);
        Ok(self)
    }

    pub fn classifier(&mut self, c: &LinearClassifier) -> Result<&mut Self> {
        let mut e = Enc::default();
        e.len32(c.classes())?.len32(c.dim())?.f32s(c.w.data()).f32s(&c.b);
        self.section(b"CLSF", e);
        Ok(self)
    }

    pub fn dataset(&mut self, d: &Dataset) -> Result<&mut Self> {
        let mut e = Enc::default();
        e.u8(match d.split {
            Split::Train => 0,
            Split::Test => 1,
        })
        .len32(d.len())?
        .len32(d.input_dim())?
        .len32(d.num_classes())?;
        for &y in &d.labels {
            e.len32(y)?;
        }
        e.f32s(d.inputs.data());
        self.section(b"DSET", e);
        Ok(self)
    }

    /// Policy, per-epoch statistics and every retained payload.
    pub fn store(&mut self, store: &TrailStore) -> Result<&mut Self> {
        let policy = store.policy();
        let mut e = Enc::default();
        e.u64(policy.n_b as u64)
            .u8(match policy.retention {
                Retention::Policy => 0,
                Retention::All => 1,
            })
            .len32(store.num_classes())?;
        for &n in store.class_counts() {
            e.u64(n as u64);
        }
        self.section(b"PLCY", e);
        for &epoch in store.epochs() {
            let stats = store
                .stats_for(epoch)
                .ok_or_else(|| Error::State(format!("epoch {epoch} has no statistics")))?;
            let mut m = Enc::default();
            m.u32(epoch);
            for row in &stats.means {
                m.f64s(row);
            }
            m.f64s(&stats.global_mean);
            self.section(b"MEAN", m);
            let mut s = Enc::default();
            s.u32(epoch);
            for row in &stats.stds {
                s.f64s(row);
            }
            self.section(b"STDS", s);
        }
        for snap in store.snapshots() {
            self.snapshot(&snap)?;
        }
        Ok(self)
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }

    /// Writes to `path` through a temporary sibling and a rename.
    pub fn write_to(self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bcts.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// A decoded container: header plus its sections in file order.
pub struct Container {
    pub header: Header,
    sections: Vec<([u8; 4], Vec<u8>)>,
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
        return Err(Error::Format("not a BCTS container".into()));
    }
    let mut d = Dec::new(&bytes[4..HEADER_LEN], "header");
    let version = d.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let dim = d.u32()?;
    let config_hash: ConfigHash = d.take(32)?.try_into().unwrap();
    Ok(Header { version, dim, config_hash })
}

pub fn read_header_from(path: &Path) -> Result<Header> {
    let mut buf = vec![0u8; HEADER_LEN];
    let mut f = fs::File::open(path)?;
    std::io::Read::read_exact(&mut f, &mut buf).map_err(|_| Error::Format(format!("{} is too short", path.display())))?;
    read_header(&buf)
}

impl Container {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = read_header(bytes)?;
        let mut d = Dec::new(&bytes[HEADER_LEN..], "container");
        let mut sections = Vec::new();
        while !d.buf.is_empty() {
            let tag: [u8; 4] = d.take(4)?.try_into().unwrap();
            let len = usize::try_from(d.u64()?).map_err(|_| Error::Format("section too large".into()))?;
            sections.push((tag, d.take(len)?.to_vec()));
        }
        Ok(Self { header, sections })
    }

    pub fn open(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    fn tagged(&self, tag: &'static [u8; 4]) -> impl Iterator<Item = &[u8]> + '_ {
        self.sections.iter().filter(move |(t, _)| t == tag).map(|(_, p)| p.as_slice())
    }

    fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn snapshots(&self) -> Result<Vec<ClassSnapshot>> {
        self.tagged(b"SNAP")
            .map(|p| {
                let mut d = Dec::new(p, "SNAP");
                let class = d.usize()?;
                let epoch = d.u32()?;
                let rows = d.usize()?;
                let features = d.matrix(rows, self.dim())?;
                d.finish()?;
                Ok(ClassSnapshot { class, epoch, features })
            })
            .collect()
    }

    pub fn trails(&self) -> Result<Vec<TrailSet>> {
        self.tagged(b"TRAL")
            .map(|p| {
                let mut d = Dec::new(p, "TRAL");
                let class = d.usize()?;
                let epoch = d.u32()?;
                let rows = d.usize()?;
                d.count(rows, 8)?;
                let provenance = (0..rows)
                    .map(|_| Ok(Provenance { epoch: d.u32()?, index: d.u32()? }))
                    .collect::<Result<Vec<_>>>()?;
                let features = d.matrix(rows, self.dim())?;
                d.finish()?;
                Ok(TrailSet { class, epoch, features, provenance })
            })
            .collect()
    }

    pub fn embeddings(&self) -> Result<Vec<EmbeddingParams>> {
        self.tagged(b"PARM")
            .map(|p| {
                let mut d = Dec::new(p, "PARM");
                let activation = Activation::from_id(d.u32()?).map_err(|e| Error::Format(e.to_string()))?;
                let epoch = d.u32()?;
                let (input, hidden, feat) = (d.usize()?, d.usize()?, d.usize()?);
                let w1 = d.matrix(hidden, input)?;
                let b1 = d.f32s(hidden)?;
                let w2 = d.matrix(feat, hidden)?;
                let b2 = d.f32s(feat)?;
                d.finish()?;
                Ok(EmbeddingParams { w1, b1, w2, b2, activation, epoch })
            })
            .collect()
    }

    pub fn classifier(&self) -> Result<LinearClassifier> {
        let p = self
            .tagged(b"CLSF")
            .next()
            .ok_or_else(|| Error::Format("no classifier section".into()))?;
        let mut d = Dec::new(p, "CLSF");
        let (c, dim) = (d.usize()?, d.usize()?);
        let w = d.matrix(c, dim)?;
        let b = d.f32s(c)?;
        d.finish()?;
        LinearClassifier::new(w, b).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let p = self
            .tagged(b"DSET")
            .next()
            .ok_or_else(|| Error::Format("no dataset section".into()))?;
        let mut d = Dec::new(p, "DSET");
        let split = match d.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(Error::Format(format!("unknown split id {other}"))),
        };
        let (n, dim, classes) = (d.usize()?, d.usize()?, d.usize()?);
        d.count(n, 4)?;
        let labels = (0..n).map(|_| d.usize()).collect::<Result<Vec<_>>>()?;
        let inputs = d.matrix(n, dim)?;
        d.finish()?;
        Dataset::new(inputs, labels, classes, split).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn store(&self) -> Result<TrailStore> {
        let p = self
            .tagged(b"PLCY")
            .next()
            .ok_or_else(|| Error::Format("no store policy section".into()))?;
        let mut d = Dec::new(p, "PLCY");
        let n_b = usize::try_from(d.u64()?).map_err(|_| Error::Format("n_B too large".into()))?;
        let retention = match d.u8()? {
            0 => Retention::Policy,
            1 => Retention::All,
            other => return Err(Error::Format(format!("unknown retention id {other}"))),
        };
        let classes = d.usize()?;
        d.count(classes, 8)?;
        let counts = (0..classes).map(|_| Ok(d.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        d.finish()?;
        let dim = self.dim();
        let policy = StorePolicy::new(n_b, &counts, retention).map_err(|e| Error::Format(e.to_string()))?;

        let mut means: BTreeMap<u32, (Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
        for p in self.tagged(b"MEAN") {
            let mut d = Dec::new(p, "MEAN");
            let epoch = d.u32()?;
            let rows = (0..classes).map(|_| d.f64s(dim)).collect::<Result<Vec<_>>>()?;
            let global = d.f64s(dim)?;
            d.finish()?;
            means.insert(epoch, (rows, global));
        }
        let mut stats = BTreeMap::new();
        for p in self.tagged(b"STDS") {
            let mut d = Dec::new(p, "STDS");
            let epoch = d.u32()?;
            let stds = (0..classes).map(|_| d.f64s(dim)).collect::<Result<Vec<_>>>()?;
            d.finish()?;
            let (means, global_mean) = means
                .remove(&epoch)
                .ok_or_else(|| Error::Format(format!("deviations without means for epoch {epoch}")))?;
            stats.insert(epoch, EpochStats { means, stds, global_mean });
        }
        if let Some(epoch) = means.keys().next() {
            return Err(Error::Format(format!("means without deviations for epoch {epoch}")));
        }
        TrailStore::from_parts(counts, dim, policy, stats, self.snapshots()?)
    }
}
