//! MICM checkpoints: little-endian named tensor records.
//!
//! ```text
//! "MICM" | version u8 = 1 | record count u16
//! per record: name length u8 | name | rank u8 | extents u32 × rank | f64 × product
//! ```
//!
//! The first record describes the architecture (`meta.model` or
//! `meta.identity`); every other record is checked against the shape that
//! architecture implies.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FerError, IdentityDims, IdentityEncoder, ModelBundle, ModelDims, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"MICM";
const VERSION: u8 = 1;

pub fn write_records<W: Write>(records: &[(&str, &Tensor)], sink: &mut W) -> Result<()> {
    let count = u16::try_from(records.len())
        .map_err(|_| FerError::Malformed(format!("{} records exceed u16", records.len())))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in records {
        let nb = name.as_bytes();
        let len = u8::try_from(nb.len()).map_err(|_| FerError::Malformed(format!("record name `{name}` too long")))?;
        buf.push(len);
        buf.extend_from_slice(nb);
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| FerError::Malformed(format!("record `{name}`: extent {d}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, record: &str, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FerError::Truncated {
                record: record.to_string(),
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn read_records(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "header", "magic")?;
    if magic != MAGIC {
        return Err(FerError::BadMagic { found: magic.to_vec() });
    }
    let version = c.take(1, "header", "version")?[0];
    if version != VERSION {
        return Err(FerError::UnsupportedVersion(version));
    }
    let count = u16::from_le_bytes(c.take(2, "header", "record count")?.try_into().expect("2 bytes"));
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let ctx = format!("#{i}");
        let len = c.take(1, &ctx, "name length")?[0] as usize;
        let name = String::from_utf8(c.take(len, &ctx, "name")?.to_vec())
            .map_err(|_| FerError::Malformed(format!("record {ctx}: name is not UTF-8")))?;
        let rank = c.take(1, &name, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u32::from_le_bytes(c.take(4, &name, "extent")?.try_into().expect("4 bytes"));
            shape.push(d as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
        let raw = c.take(n.saturating_mul(8), &name, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| FerError::Malformed(format!("record `{name}`: {e}")))?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(FerError::Malformed(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

fn identity_meta(d: &IdentityDims) -> Vec<f64> {
    [d.height, d.width, d.channels, d.conv1, d.conv2, d.d_i]
        .iter()
        .map(|&v| v as f64)
        .collect()
}

fn model_meta(d: &ModelDims) -> Vec<f64> {
    let mut v = identity_meta(&d.identity);
    v.extend(
        [
            d.with_motion as usize,
            d.conv1,
            d.conv2,
            d.d_e,
            d.dec_hidden,
            d.stat_hidden,
            d.n_classes,
        ]
        .iter()
        .map(|&x| x as f64),
    );
    v
}

fn meta_values(record: &str, t: &Tensor, want: usize) -> Result<Vec<usize>> {
    if t.shape() != [want] {
        return Err(FerError::ShapeMismatch {
            record: record.into(),
            expected: vec![want],
            found: t.shape().to_vec(),
        });
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(FerError::Malformed(format!("`{record}` holds non-integer {v}")))
            }
        })
        .collect()
}

fn identity_dims(v: &[usize]) -> IdentityDims {
    IdentityDims {
        height: v[0],
        width: v[1],
        channels: v[2],
        conv1: v[3],
        conv2: v[4],
        d_i: v[5],
    }
}

fn check_positive(record: &str, v: &[usize], skip: &[usize]) -> Result<()> {
    match v.iter().enumerate().find(|(i, &x)| x == 0 && !skip.contains(i)) {
        Some((i, _)) => Err(FerError::Malformed(format!("`{record}` entry {i} is zero"))),
        None => Ok(()),
    }
}

/// Copies `records` into `stores` in order, checking names and shapes.
fn fill(stores: &mut [&mut ParamStore], records: Vec<(String, Tensor)>) -> Result<()> {
    let mut it = records.into_iter();
    for store in stores.iter_mut() {
        for (name, slot) in store.tensors_mut() {
            let (rname, t) = it.next().ok_or_else(|| FerError::MissingRecord(name.to_string()))?;
            if rname != name {
                return Err(FerError::UnexpectedRecord(rname));
            }
            if t.shape() != slot.shape() {
                return Err(FerError::ShapeMismatch {
                    record: rname,
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *slot = t;
        }
    }
    if let Some((extra, _)) = it.next() {
        return Err(FerError::UnexpectedRecord(extra));
    }
    Ok(())
}

pub fn save_checkpoint<W: Write>(bundle: &ModelBundle, sink: &mut W) -> Result<()> {
    let meta = Tensor::from_vec(vec![13], model_meta(&bundle.dims))?;
    let mut records = vec![("meta.model", &meta)];
    records.extend(bundle.records());
    write_records(&records, sink)
}

pub fn load_checkpoint<R: Read>(source: &mut R) -> Result<ModelBundle> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut records = read_records(&bytes)?;
    if records.is_empty() || records[0].0 != "meta.model" {
        return Err(FerError::MissingRecord("meta.model".into()));
    }
    let (name, meta) = records.remove(0);
    let v = meta_values(&name, &meta, 13)?;
    check_positive(&name, &v, &[6])?;
    if v[6] > 1 {
        return Err(FerError::Malformed(format!("`{name}` motion flag {}", v[6])));
    }
    let dims = ModelDims {
        identity: identity_dims(&v),
        with_motion: v[6] == 1,
        conv1: v[7],
        conv2: v[8],
        d_e: v[9],
        dec_hidden: v[10],
        stat_hidden: v[11],
        n_classes: v[12],
    };
    // Any initialization will do; every value is overwritten.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ident = IdentityEncoder::new(&mut rng, dims.identity);
    let mut b = ModelBundle::new(&mut rng, dims, ident)?;
    fill(
        &mut [
            &mut b.expr.params,
            &mut b.cls.params,
            &mut b.dec.params,
            &mut b.ident.params,
            &mut b.stat.params,
        ],
        records,
    )?;
    Ok(b)
}

pub fn save_identity<W: Write>(encoder: &IdentityEncoder, sink: &mut W) -> Result<()> {
    let meta = Tensor::from_vec(vec![6], identity_meta(&encoder.dims))?;
    let mut records = vec![("meta.identity", &meta)];
    records.extend(encoder.params.iter());
    write_records(&records, sink)
}

pub fn load_identity<R: Read>(source: &mut R) -> Result<IdentityEncoder> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut records = read_records(&bytes)?;
    if records.is_empty() || records[0].0 != "meta.identity" {
        return Err(FerError::MissingRecord("meta.identity".into()));
    }
    let (name, meta) = records.remove(0);
    let v = meta_values(&name, &meta, 6)?;
    check_positive(&name, &v, &[])?;
    let mut enc = IdentityEncoder::new(&mut ChaCha8Rng::seed_from_u64(0), identity_dims(&v));
    fill(&mut [&mut enc.params], records)?;
    Ok(enc)
}
