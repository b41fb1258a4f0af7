//! RGOP and RRAW binary formats, little-endian.
//!
//! ```text
//! RGOP: "RGOP" u8:version=1 u16:h u16:w u8:c u16:frame_count u8:mb u8:search_range
//!       I frame (h*w*c u8)
//!       per P frame: (h/mb)*(w/mb) x (i8 dy, i8 dx), then h*w*c x i16 residual
//! RRAW: "RRAW" u8:version=1 u16:h u16:w u8:c u16:frame_count, frames as h*w*c u8
//! ```

use std::io::{Read, Write};

use super::{
    check_config, reconstruct_next, CodecConfig, CodecError, Gop, MotionField, MotionVector,
    PFrame, RawFrame, ResidualPlane, Result,
};

const GOP_MAGIC: &[u8; 4] = b"RGOP";
const RAW_MAGIC: &[u8; 4] = b"RRAW";
const VERSION: u8 = 1;

fn u16_field(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| CodecError::InvalidInput(format!("{what} {v} does not fit in u16")))
}

pub fn write_gop<W: Write>(gop: &Gop, sink: &mut W) -> Result<()> {
    let (h, w, c) = gop.dims();
    check_config(&gop.config, h, w)?;
    let mut buf = Vec::with_capacity(16 + h * w * c * (1 + 2 * gop.p_frames.len()));
    buf.extend_from_slice(GOP_MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&u16_field(h, "height")?.to_le_bytes());
    buf.extend_from_slice(&u16_field(w, "width")?.to_le_bytes());
    buf.push(c as u8);
    buf.extend_from_slice(&u16_field(gop.frame_count(), "frame count")?.to_le_bytes());
    buf.push(gop.config.macroblock as u8);
    buf.push(gop.config.search_range as u8);
    buf.extend_from_slice(&gop.i_frame.pixels);
    let blocks = (h / gop.config.macroblock) * (w / gop.config.macroblock);
    for (k, p) in gop.p_frames.iter().enumerate() {
        if p.motion.vectors.len() != blocks || p.residual.values.len() != h * w * c {
            return Err(CodecError::InvalidInput(format!("P frame {} has wrong extents", k + 1)));
        }
        for v in &p.motion.vectors {
            buf.push(v.dy as u8);
            buf.push(v.dx as u8);
        }
        for r in &p.residual.values {
            buf.extend_from_slice(&r.to_le_bytes());
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
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CodecError::Truncated {
                offset: self.bytes.len(),
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn magic(&mut self, expected: &'static [u8; 4], name: &'static str) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(CodecError::BadMagic {
                offset: self.pos - 4,
                expected: name,
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let at = self.pos;
        let version = self.u8("version")?;
        if version != VERSION {
            return Err(CodecError::UnsupportedVersion { offset: at, version });
        }
        Ok(())
    }
}

struct Dims {
    h: usize,
    w: usize,
    c: usize,
    frames: usize,
}

fn read_dims(cur: &mut Cursor<'_>) -> Result<Dims> {
    let at = cur.pos;
    let h = cur.u16("height")? as usize;
    let w = cur.u16("width")? as usize;
    let c_at = cur.pos;
    let c = cur.u8("channels")? as usize;
    let f_at = cur.pos;
    let frames = cur.u16("frame count")? as usize;
    if h == 0 || w == 0 {
        return Err(CodecError::Invariant {
            offset: at,
            detail: format!("empty frame {h}x{w}"),
        });
    }
    if c != 1 && c != 3 {
        return Err(CodecError::Invariant {
            offset: c_at,
            detail: format!("channel count {c} not in {{1, 3}}"),
        });
    }
    if frames == 0 {
        return Err(CodecError::Invariant {
            offset: f_at,
            detail: "zero frames".into(),
        });
    }
    Ok(Dims { h, w, c, frames })
}

/// Parses a complete RGOP stream, validating every declared invariant.
pub fn parse_gop(bytes: &[u8]) -> Result<Gop> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.magic(GOP_MAGIC, "RGOP")?;
    let Dims { h, w, c, frames } = read_dims(&mut cur)?;
    let cfg_at = cur.pos;
    let config = CodecConfig {
        macroblock: cur.u8("macroblock size")? as usize,
        search_range: cur.u8("search range")? as usize,
    };
    check_config(&config, h, w).map_err(|e| CodecError::Invariant {
        offset: cfg_at,
        detail: e.to_string(),
    })?;
    let n = h * w * c;
    let i_frame = RawFrame {
        height: h,
        width: w,
        channels: c,
        pixels: cur.take(n, "I frame")?.to_vec(),
    };
    let (block_rows, block_cols) = (h / config.macroblock, w / config.macroblock);
    let range = config.search_range as i32;
    let mut p_frames = Vec::with_capacity(frames - 1);
    let mut prev = i_frame.clone();
    let mut scratch = vec![0u8; n];
    for _ in 1..frames {
        let mv_at = cur.pos;
        let raw = cur.take(2 * block_rows * block_cols, "motion vectors")?;
        let mut vectors = Vec::with_capacity(block_rows * block_cols);
        for (i, pair) in raw.chunks_exact(2).enumerate() {
            let v = MotionVector {
                dy: pair[0] as i8,
                dx: pair[1] as i8,
            };
            if (v.dy as i32).abs() > range || (v.dx as i32).abs() > range {
                return Err(CodecError::Invariant {
                    offset: mv_at + 2 * i,
                    detail: format!(
                        "motion vector ({}, {}) exceeds search range {range}",
                        v.dy, v.dx
                    ),
                });
            }
            vectors.push(v);
        }
        let res_at = cur.pos;
        let raw = cur.take(2 * n, "residuals")?;
        let values: Vec<i16> = raw
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        if let Some(i) = values.iter().position(|v| !(-255..=255).contains(v)) {
            return Err(CodecError::Invariant {
                offset: res_at + 2 * i,
                detail: format!("residual {} outside [-255, 255]", values[i]),
            });
        }
        let p = PFrame {
            motion: MotionField {
                block_rows,
                block_cols,
                vectors,
            },
            residual: ResidualPlane { values },
        };
        prev = reconstruct_next(&prev, &p, &config, &mut scratch).map_err(|i| {
            CodecError::Invariant {
                offset: res_at + 2 * i,
                detail: "reconstructed sample leaves [0, 255]".into(),
            }
        })?;
        p_frames.push(p);
    }
    if cur.pos != bytes.len() {
        return Err(CodecError::Invariant {
            offset: cur.pos,
            detail: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(Gop {
        config,
        i_frame,
        p_frames,
    })
}

pub fn read_gop<R: Read>(source: &mut R) -> Result<Gop> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse_gop(&bytes)
}

pub fn write_raw<W: Write>(frames: &[RawFrame], sink: &mut W) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| CodecError::InvalidInput("no frames to write".into()))?;
    let (h, w, c) = first.dims();
    let mut buf = Vec::with_capacity(12 + frames.len() * h * w * c);
    buf.extend_from_slice(RAW_MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&u16_field(h, "height")?.to_le_bytes());
    buf.extend_from_slice(&u16_field(w, "width")?.to_le_bytes());
    buf.push(c as u8);
    buf.extend_from_slice(&u16_field(frames.len(), "frame count")?.to_le_bytes());
    for (index, f) in frames.iter().enumerate() {
        if f.dims() != (h, w, c) {
            return Err(CodecError::DimensionMismatch {
                index,
                got: f.dims(),
                want: (h, w, c),
            });
        }
        buf.extend_from_slice(&f.pixels);
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn parse_raw(bytes: &[u8]) -> Result<Vec<RawFrame>> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.magic(RAW_MAGIC, "RRAW")?;
    let Dims { h, w, c, frames } = read_dims(&mut cur)?;
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(RawFrame {
            height: h,
            width: w,
            channels: c,
            pixels: cur.take(h * w * c, "frame")?.to_vec(),
        });
    }
    if cur.pos != bytes.len() {
        return Err(CodecError::Invariant {
            offset: cur.pos,
            detail: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(out)
}

pub fn read_raw<R: Read>(source: &mut R) -> Result<Vec<RawFrame>> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse_raw(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::encode_gop;
    use super::*;

    fn sample() -> Gop {
        let frames: Vec<RawFrame> = (0..3u8)
            .map(|t| {
                let px = (0..16 * 16).map(|i| (i as u8).wrapping_mul(3).wrapping_add(t * 5)).collect();
                RawFrame::new(16, 16, 1, px).unwrap()
            })
            .collect();
        encode_gop(&frames, CodecConfig::default()).unwrap()
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_gop(&sample(), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"RGOP");
        assert_eq!(buf[4], 1);
        assert_eq!(u16::from_le_bytes([buf[5], buf[6]]), 16);
        assert_eq!(buf[9], 1);
        assert_eq!(u16::from_le_bytes([buf[10], buf[11]]), 3);
        assert_eq!((buf[12], buf[13]), (8, 4));
        assert_eq!(buf.len(), 14 + 256 + 2 * (4 * 2 + 256 * 2));
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut buf = Vec::new();
        write_gop(&sample(), &mut buf).unwrap();
        buf[..4].copy_from_slice(b"XXXX");
        match parse_gop(&buf) {
            Err(CodecError::BadMagic { offset: 0, found, .. }) => assert_eq!(found, "XXXX"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_truncation() {
        let mut buf = Vec::new();
        write_gop(&sample(), &mut buf).unwrap();
        let mut v2 = buf.clone();
        v2[4] = 2;
        assert!(matches!(
            parse_gop(&v2),
            Err(CodecError::UnsupportedVersion { offset: 4, version: 2 })
        ));
        // Cut in the middle of the second P frame's residuals.
        let cut = buf.len() - 100;
        match parse_gop(&buf[..cut]) {
            Err(CodecError::Truncated { what, .. }) => assert_eq!(what, "residuals"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn motion_vector_beyond_range_is_rejected() {
        let mut buf = Vec::new();
        write_gop(&sample(), &mut buf).unwrap();
        let mv_at = 14 + 256;
        buf[mv_at + 1] = 5;
        match parse_gop(&buf) {
            Err(CodecError::Invariant { offset, .. }) => assert_eq!(offset, mv_at),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn raw_round_trip() {
        let frames = vec![
            RawFrame::new(2, 3, 3, (0..18).collect()).unwrap(),
            RawFrame::new(2, 3, 3, (100..118).collect()).unwrap(),
        ];
        let mut buf = Vec::new();
        write_raw(&frames, &mut buf).unwrap();
        assert_eq!(parse_raw(&buf).unwrap(), frames);
        assert!(matches!(parse_raw(&buf[..buf.len() - 1]), Err(CodecError::Truncated { .. })));
    }
}
