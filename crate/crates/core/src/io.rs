//! Versioned little-endian binary formats for features, quality heads and
//! pooled representations.
//!
//! Every file opens with a 4-byte magic and a `u16` version. Strings are
//! UTF-8 prefixed by a `u32` byte length; floats are `f64` and must be finite.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::aggregation::{AggregatedRep, FeatureInstance, HeadMode, PoolingMode, QualityHead};
use crate::dataset::FeatureRecord;
use crate::error::{Error, Result};
use crate::math::{BatchNormParams, BatchNormStats, DenseMatrix, LinearParams};

pub const FEATURE_MAGIC: [u8; 4] = *b"CFAN";
pub const MODEL_MAGIC: [u8; 4] = *b"CFQH";
pub const REP_MAGIC: [u8; 4] = *b"CFRP";
pub const FORMAT_VERSION: u16 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        self.0.write_all(&magic)?;
        self.u16(FORMAT_VERSION)
    }

    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }

    fn u16(&mut self, v: u16) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn u32(&mut self, v: usize, what: &str) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))?;
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn u64(&mut self, v: usize) -> Result<()> {
        Ok(self.0.write_all(&(v as u64).to_le_bytes())?)
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len(), "string length")?;
        Ok(self.0.write_all(s.as_bytes())?)
    }

    fn floats(&mut self, v: &[f64], what: &str) -> Result<()> {
        for x in v {
            if !x.is_finite() {
                return Err(Error::Format(format!("non-finite value in {what}")));
            }
            self.0.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        Ok(self.0.flush()?)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(eof)?;
        Ok(b)
    }

    fn header(&mut self, magic: [u8; 4], kind: &str) -> Result<()> {
        if self.bytes::<4>()? != magic {
            return Err(Error::Format(format!("not a {kind} file (bad magic)")));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported {kind} format version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.bytes()?);
        usize::try_from(v).map_err(|_| Error::Format(format!("count {v} too large")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        let mut buf = Vec::new();
        (&mut self.0).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(eof_error());
        }
        String::from_utf8(buf).map_err(|_| Error::Format("identifier is not valid UTF-8".into()))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| {
                let x = f64::from_le_bytes(self.bytes()?);
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(Error::Format(format!("non-finite value in {what}")))
                }
            })
            .collect()
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.0.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after last record".into())),
        }
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::at(path)(e.into()))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::at(path)(e.into()))
}

fn eof_error() -> Error {
    Error::Format("unexpected end of file".into())
}

fn eof(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        eof_error()
    } else {
        Error::Io(e)
    }
}

/// Contents of a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub map_dim: usize,
    pub embed_dim: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureFile {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = Writer(w);
        w.header(FEATURE_MAGIC)?;
        w.u32(self.map_dim, "map_dim")?;
        w.u32(self.embed_dim, "embed_dim")?;
        w.u64(self.records.len())?;
        for r in &self.records {
            if r.instance.feature_map.len() != self.map_dim {
                return Err(Error::shape(
                    "feature file map",
                    self.map_dim,
                    r.instance.feature_map.len(),
                ));
            }
            if r.instance.embedding.len() != self.embed_dim {
                return Err(Error::shape(
                    "feature file embedding",
                    self.embed_dim,
                    r.instance.embedding.len(),
                ));
            }
            w.str(&r.subject_id)?;
            w.str(&r.template_id)?;
            w.floats(&r.instance.feature_map, "feature map")?;
            w.floats(&r.instance.embedding, "embedding")?;
        }
        w.finish()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader(r);
        r.header(FEATURE_MAGIC, "feature")?;
        let map_dim = r.u32()?;
        let embed_dim = r.u32()?;
        let count = r.u64()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let subject_id = r.str()?;
            let template_id = r.str()?;
            let feature_map = r.floats(map_dim, "feature map")?;
            let embedding = r.floats(embed_dim, "embedding")?;
            records.push(FeatureRecord {
                subject_id,
                template_id,
                instance: FeatureInstance::new(feature_map, embedding),
            });
        }
        r.expect_end()?;
        Ok(Self {
            map_dim,
            embed_dim,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        File::create(path)
            .map_err(Error::from)
            .and_then(|f| self.write_to(BufWriter::new(f)))
            .map_err(Error::at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        File::open(path)
            .map_err(Error::from)
            .and_then(|f| Self::read_from(BufReader::new(f)))
            .map_err(Error::at(path))
    }
}

fn head_mode_code(mode: HeadMode) -> u8 {
    match mode {
        HeadMode::ComponentWise => 0,
        HeadMode::InstanceScalar => 1,
    }
}

/// Serializes a quality head including its frozen batch-norm statistics.
pub fn write_head<W: Write>(head: &QualityHead, w: W) -> Result<()> {
    let mut w = Writer(w);
    w.header(MODEL_MAGIC)?;
    w.u8(head_mode_code(head.mode))?;
    w.u32(head.map_dim(), "map_dim")?;
    w.u32(head.embed_dim(), "embed_dim")?;
    w.floats(&[head.bn.eps], "batch-norm eps")?;
    w.floats(&head.bn.gamma, "gamma")?;
    w.floats(&head.bn.beta, "beta")?;
    w.floats(&head.stats.mean, "running mean")?;
    w.floats(&head.stats.var, "running variance")?;
    w.floats(head.fc.weight.as_slice(), "weight")?;
    w.floats(&head.fc.bias, "bias")?;
    w.finish()
}

pub fn read_head<R: Read>(r: R) -> Result<QualityHead> {
    let mut r = Reader(r);
    r.header(MODEL_MAGIC, "model")?;
    let mode = match r.u8()? {
        0 => HeadMode::ComponentWise,
        1 => HeadMode::InstanceScalar,
        other => return Err(Error::Format(format!("unknown head mode {other}"))),
    };
    let m = r.u32()?;
    let d = r.u32()?;
    let out = match mode {
        HeadMode::ComponentWise => d,
        HeadMode::InstanceScalar => 1,
    };
    let eps = r.floats(1, "batch-norm eps")?[0];
    let bn = BatchNormParams {
        gamma: r.floats(m, "gamma")?,
        beta: r.floats(m, "beta")?,
        eps,
    };
    let stats = BatchNormStats {
        mean: r.floats(m, "running mean")?,
        var: r.floats(m, "running variance")?,
    };
    let weight = DenseMatrix::from_vec(m, out, r.floats(m * out, "weight")?)?;
    let fc = LinearParams::new(weight, r.floats(out, "bias")?)?;
    r.expect_end()?;
    QualityHead::from_parts(bn, stats, fc, mode, d)
}

pub fn save_head(head: &QualityHead, path: &Path) -> Result<()> {
    File::create(path)
        .map_err(Error::from)
        .and_then(|f| write_head(head, BufWriter::new(f)))
        .map_err(Error::at(path))
}

pub fn load_head(path: &Path) -> Result<QualityHead> {
    File::open(path)
        .map_err(Error::from)
        .and_then(|f| read_head(BufReader::new(f)))
        .map_err(Error::at(path))
}

/// One pooled template.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub subject_id: String,
    pub template_id: String,
    pub rep: AggregatedRep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepFile {
    pub dim: usize,
    pub mode: PoolingMode,
    pub records: Vec<RepRecord>,
}

fn pooling_code(mode: PoolingMode) -> u8 {
    match mode {
        PoolingMode::Average => 0,
        PoolingMode::Instance => 1,
        PoolingMode::Cfan => 2,
    }
}

impl RepFile {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = Writer(w);
        w.header(REP_MAGIC)?;
        w.u8(pooling_code(self.mode))?;
        w.u32(self.dim, "dim")?;
        w.u64(self.records.len())?;
        for r in &self.records {
            if r.rep.vector.len() != self.dim {
                return Err(Error::shape("representation file", self.dim, r.rep.vector.len()));
            }
            w.str(&r.subject_id)?;
            w.str(&r.template_id)?;
            w.u64(r.rep.n_instances)?;
            w.floats(&r.rep.vector, "representation")?;
        }
        w.finish()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader(r);
        r.header(REP_MAGIC, "representation")?;
        let mode = match r.u8()? {
            0 => PoolingMode::Average,
            1 => PoolingMode::Instance,
            2 => PoolingMode::Cfan,
            other => return Err(Error::Format(format!("unknown pooling mode {other}"))),
        };
        let dim = r.u32()?;
        let count = r.u64()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let subject_id = r.str()?;
            let template_id = r.str()?;
            let n_instances = r.u64()?;
            let vector = r.floats(dim, "representation")?;
            records.push(RepRecord {
                subject_id,
                template_id,
                rep: AggregatedRep {
                    vector,
                    mode,
                    n_instances,
                },
            });
        }
        r.expect_end()?;
        Ok(Self { dim, mode, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        File::create(path)
            .map_err(Error::from)
            .and_then(|f| self.write_to(BufWriter::new(f)))
            .map_err(Error::at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        File::open(path)
            .map_err(Error::from)
            .and_then(|f| Self::read_from(BufReader::new(f)))
            .map_err(Error::at(path))
    }
}
