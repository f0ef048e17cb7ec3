//! The `MPFTEMB1` binary embedding format.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "MPFTEMB1" | u32 version=1 | u32 d_emb | u32 K | u32 N | u32 record_count
//! record_count × ( u32 client_id | u32 label | d_emb × f32 )
//! ```
//!
//! Used both for exporting embedded federations and as the wire payload for
//! prototype uploads.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::world::{split_dataset, DomainDataset, Sample};

pub const MAGIC: &[u8; 8] = b"MPFTEMB1";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 8 + 5 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub d_emb: u32,
    pub classes: u32,
    pub clients: u32,
    pub record_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub client_id: u32,
    pub label: u32,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub header: Header,
    pub records: Vec<Record>,
}

/// Size in bytes of a payload holding `records` vectors of width `d_emb`.
pub fn payload_bytes(d_emb: usize, records: usize) -> u64 {
    (HEADER_BYTES + records * (8 + 4 * d_emb)) as u64
}

/// Serialises `(client_id, label, vector)` triples. Vectors are narrowed to
/// `f32`.
pub fn encode<'a>(
    d_emb: usize,
    classes: usize,
    clients: usize,
    records: impl IntoIterator<Item = (usize, usize, &'a [f64])>,
) -> Vec<u8> {
    let records: Vec<_> = records.into_iter().collect();
    let mut out = Vec::with_capacity(payload_bytes(d_emb, records.len()) as usize);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, d_emb as u32, classes as u32, clients as u32, records.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (client, label, values) in records {
        debug_assert_eq!(values.len(), d_emb);
        out.extend_from_slice(&(client as u32).to_le_bytes());
        out.extend_from_slice(&(label as u32).to_le_bytes());
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::parse(self.pos, format!("truncated while reading {what}")))?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        self.u32(what).map(f32::from_bits)
    }
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingFile> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::parse(bytes.len(), "missing header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::parse(0, "bad magic"));
    }
    let mut r = Reader { bytes, pos: 8 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(8, format!("unsupported version {version}")));
    }
    let header = Header {
        d_emb: r.u32("d_emb")?,
        classes: r.u32("K")?,
        clients: r.u32("N")?,
        record_count: r.u32("record_count")?,
    };
    if header.d_emb == 0 {
        return Err(Error::parse(12, "d_emb must be positive"));
    }
    let d = header.d_emb as usize;
    let record_size = 8 + 4 * d;
    let mut records = Vec::with_capacity(header.record_count as usize);
    for i in 0..header.record_count as usize {
        let start = r.pos;
        if bytes.len() < start + record_size {
            return Err(Error::parse(
                start,
                format!("truncated record {i}: need {record_size} bytes"),
            ));
        }
        let client_id = r.u32("client_id")?;
        let label = r.u32("label")?;
        if label >= header.classes {
            return Err(Error::parse(
                start + 4,
                format!("record {i} has label {label} but K = {}", header.classes),
            ));
        }
        if client_id >= header.clients {
            return Err(Error::parse(
                start,
                format!("record {i} has client {client_id} but N = {}", header.clients),
            ));
        }
        let values = (0..d).map(|_| r.f32("value")).collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(start + 8, format!("record {i} holds a non-finite value")));
        }
        records.push(Record {
            client_id,
            label,
            values,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(
            r.pos,
            format!("{} trailing bytes after last record", bytes.len() - r.pos),
        ));
    }
    Ok(EmbeddingFile { header, records })
}

/// Writes every sample of every dataset (already in embedding space).
pub fn export_embeddings(datasets: &[DomainDataset], classes: usize, path: &Path) -> Result<()> {
    let d_emb = datasets
        .iter()
        .find_map(|d| d.samples.first())
        .map_or(0, |s| s.x.len());
    let clients = datasets.iter().map(|d| d.client_id + 1).max().unwrap_or(0);
    let bytes = encode(
        d_emb,
        classes,
        clients,
        datasets
            .iter()
            .flat_map(|d| d.samples.iter().map(move |s| (d.client_id, s.y, s.x.as_slice()))),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Rebuilds one dataset per client from a decoded file. Splits are derived
/// with the same stratified rule and seeding used for generated worlds.
pub fn datasets_from_file(file: &EmbeddingFile, ratios: &[f64; 3], seed: u64) -> Result<Vec<DomainDataset>> {
    let mut datasets: Vec<DomainDataset> = (0..file.header.clients as usize)
        .map(|c| DomainDataset {
            client_id: c,
            home_domain: c,
            samples: Vec::new(),
            split: Default::default(),
        })
        .collect();
    for rec in &file.records {
        datasets[rec.client_id as usize].samples.push(Sample {
            x: rec.values.iter().map(|&v| f64::from(v)).collect(),
            y: rec.label as usize,
            origin_domain: rec.client_id as usize,
        });
    }
    for ds in &mut datasets {
        let labels: Vec<usize> = ds.samples.iter().map(|s| s.y).collect();
        ds.split = split_dataset(
            &labels,
            ratios,
            &mut rng::stream(seed, &[purpose::SPLIT, ds.client_id as u64]),
        )?;
    }
    Ok(datasets)
}

pub fn import_embeddings(path: &Path, ratios: &[f64; 3], seed: u64) -> Result<(EmbeddingFile, Vec<DomainDataset>)> {
    let bytes = std::fs::read(path)?;
    let file = decode(&bytes)?;
    let datasets = datasets_from_file(&file, ratios, seed)?;
    Ok((file, datasets))
}
