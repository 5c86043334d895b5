//! Binary paired-embedding corpus format.
//!
//! ```text
//! header (28 bytes, little-endian)
//!   magic     8 bytes  "XFICEMB1"
//!   version   u32      1
//!   count     u32      number of records
//!   d_img     u32
//!   d_txt     u32
//!   n_labels  u32
//! record (repeated `count` times)
//!   id        u64
//!   img       d_img × f32
//!   txt       d_txt × f32
//!   labels    ceil(n_labels / 8) bytes, LSB-first
//! ```
//!
//! Vectors are stored in single precision and widened to `f64` on decode.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::embedding::{EmbeddingPair, LabelMask};
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 8] = b"XFICEMB1";
pub const CORPUS_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusHeader {
    pub count: u32,
    pub d_img: u32,
    pub d_txt: u32,
    pub n_labels: u32,
}

impl CorpusHeader {
    pub fn record_len(&self) -> usize {
        8 + 4 * (self.d_img as usize + self.d_txt as usize) + (self.n_labels as usize).div_ceil(8)
    }

    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(CORPUS_MAGIC);
        out[8..12].copy_from_slice(&CORPUS_VERSION.to_le_bytes());
        out[12..16].copy_from_slice(&self.count.to_le_bytes());
        out[16..20].copy_from_slice(&self.d_img.to_le_bytes());
        out[20..24].copy_from_slice(&self.d_txt.to_le_bytes());
        out[24..28].copy_from_slice(&self.n_labels.to_le_bytes());
        out
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take("magic", 8)? != CORPUS_MAGIC {
            return Err(Error::format("magic", 0, "expected XFICEMB1"));
        }
        let version = r.u32("version")?;
        if version != CORPUS_VERSION {
            return Err(Error::format("version", 8, format!("unsupported version {version}")));
        }
        let header = CorpusHeader {
            count: r.u32("record count")?,
            d_img: r.u32("d_img")?,
            d_txt: r.u32("d_txt")?,
            n_labels: r.u32("n_labels")?,
        };
        if header.d_img == 0 {
            return Err(Error::format("d_img", 16, "dimension must be at least 1"));
        }
        if header.d_txt == 0 {
            return Err(Error::format("d_txt", 20, "dimension must be at least 1"));
        }
        Ok(header)
    }
}

/// An in-memory corpus with homogeneous dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub d_img: usize,
    pub d_txt: usize,
    pub n_labels: usize,
    pub records: Vec<EmbeddingPair>,
}

impl Corpus {
    pub fn new(d_img: usize, d_txt: usize, n_labels: usize) -> Self {
        Corpus { d_img, d_txt, n_labels, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks homogeneous dimensions, unique ids and finite entries.
    pub fn validate(&self) -> Result<()> {
        if self.d_img == 0 || self.d_txt == 0 {
            return Err(Error::Shape("corpus dimensions must be at least 1".into()));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if r.img.len() != self.d_img || r.txt.len() != self.d_txt {
                return Err(Error::Shape(format!(
                    "sample {} has dimensions ({}, {}), corpus is ({}, {})",
                    r.id,
                    r.img.len(),
                    r.txt.len(),
                    self.d_img,
                    self.d_txt
                )));
            }
            if !seen.insert(r.id) {
                return Err(Error::Usage(format!("duplicate sample id {}", r.id)));
            }
            if r.img.iter().chain(&r.txt).any(|v| !v.is_finite()) {
                return Err(Error::DegenerateVector(format!("sample {} has non-finite entries", r.id)));
            }
        }
        Ok(())
    }

    pub fn subset(&self, ids: &[u64]) -> Result<Corpus> {
        let index: std::collections::HashMap<u64, usize> =
            self.records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        let records = ids
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|&i| self.records[i].clone())
                    .ok_or_else(|| Error::Usage(format!("sample id {id} not in corpus")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { records, ..Corpus::new(self.d_img, self.d_txt, self.n_labels) })
    }

    pub fn header(&self) -> Result<CorpusHeader> {
        let to_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} exceeds u32")))
        };
        Ok(CorpusHeader {
            count: to_u32(self.records.len(), "record count")?,
            d_img: to_u32(self.d_img, "d_img")?,
            d_txt: to_u32(self.d_txt, "d_txt")?,
            n_labels: to_u32(self.n_labels, "n_labels")?,
        })
    }
}

/// Encodes `corpus` in the binary corpus format.
pub fn encode_corpus(corpus: &Corpus) -> Result<Vec<u8>> {
    let header = corpus.header()?;
    let mut out = Vec::with_capacity(HEADER_LEN + header.record_len() * corpus.len());
    write_corpus_to(&mut out, corpus).map_err(|e| Error::io("<memory>", e))?;
    Ok(out)
}

fn write_corpus_to<W: Write>(w: &mut W, corpus: &Corpus) -> std::io::Result<()> {
    let header = corpus
        .header()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    let label_len = corpus.n_labels.div_ceil(8);
    w.write_all(&header.to_bytes())?;
    for r in &corpus.records {
        if r.img.len() != corpus.d_img || r.txt.len() != corpus.d_txt {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("sample {} does not match corpus dimensions", r.id),
            ));
        }
        w.write_all(&r.id.to_le_bytes())?;
        for v in r.img.iter().chain(&r.txt) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        let mut labels = vec![0u8; label_len];
        if let Some(mask) = &r.labels {
            let bytes = mask.as_bytes();
            let n = bytes.len().min(label_len);
            labels[..n].copy_from_slice(&bytes[..n]);
        }
        w.write_all(&labels)?;
    }
    Ok(())
}

/// Decodes a whole corpus held in memory.
pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let reader = CorpusReader::new(bytes)?;
    let header = reader.header();
    let payload = (bytes.len() - HEADER_LEN) as u64;
    let expected = header.count as u64 * header.record_len() as u64;
    if payload < expected {
        return Err(Error::format(
            "record count",
            12,
            format!(
                "{} records of {} bytes need {expected} payload bytes, file has {payload}",
                header.count,
                header.record_len()
            ),
        ));
    }
    if payload > expected {
        return Err(Error::format(
            "record count",
            HEADER_LEN as u64 + expected,
            format!("{} trailing bytes after the last record", payload - expected),
        ));
    }
    let mut corpus = Corpus::new(header.d_img as usize, header.d_txt as usize, header.n_labels as usize);
    for rec in reader {
        corpus.records.push(rec?);
    }
    Ok(corpus)
}

/// Streaming record reader over any byte source.
pub struct CorpusReader<R: Read> {
    inner: R,
    header: CorpusHeader,
    next: u32,
    offset: u64,
    buf: Vec<u8>,
}

impl<R: Read> CorpusReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut head = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            match inner.read(&mut head[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io("<corpus stream>", e)),
            }
        }
        let header = CorpusHeader::parse(&head[..got])?;
        let buf = vec![0u8; header.record_len()];
        Ok(CorpusReader { inner, header, next: 0, offset: HEADER_LEN as u64, buf })
    }

    pub fn header(&self) -> CorpusHeader {
        self.header
    }

    fn read_record(&mut self) -> Result<EmbeddingPair> {
        let start = self.offset;
        self.inner.read_exact(&mut self.buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format("record", start, format!("truncated record {}", self.next))
            } else {
                Error::io("<corpus stream>", e)
            }
        })?;
        self.offset += self.buf.len() as u64;
        let d_img = self.header.d_img as usize;
        let d_txt = self.header.d_txt as usize;
        let mut r = ByteReader::new(&self.buf);
        let id = r.u64("id")?;
        let mut img = Vec::with_capacity(d_img);
        for _ in 0..d_img {
            img.push(r.f32("img")? as f64);
        }
        let mut txt = Vec::with_capacity(d_txt);
        for _ in 0..d_txt {
            txt.push(r.f32("txt")? as f64);
        }
        let labels = if self.header.n_labels > 0 {
            let n = (self.header.n_labels as usize).div_ceil(8);
            Some(LabelMask::from_bytes(r.take("labels", n)?.to_vec()))
        } else {
            None
        };
        Ok(EmbeddingPair { id, img, txt, labels })
    }
}

impl<R: Read> Iterator for CorpusReader<R> {
    type Item = Result<EmbeddingPair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.header.count {
            return None;
        }
        let rec = self.read_record();
        self.next += 1;
        if rec.is_err() {
            self.next = self.header.count;
        }
        Some(rec)
    }
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus_to(&mut w, corpus).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Opens a corpus file for streaming.
pub fn open_corpus(path: &Path) -> Result<CorpusReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    CorpusReader::new(BufReader::new(file))
}

/// Little-endian cursor that reports the field and offset of short reads.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, field: &'static str, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                field,
                self.pos as u64,
                format!("need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(field, 4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(field, 8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self, field: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(field, 4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(field, 8)?.try_into().expect("8 bytes")))
    }
}
