//! Lossless toy codec with I/P frame structure.
//!
//! The first frame of a sequence is stored verbatim as the I frame. Every
//! later frame is a P frame: one motion vector per macroblock found by
//! exhaustive block matching against the previous reconstruction, plus
//! the exact integer residual left after motion compensation. Decoding
//! reverses this, so `decode(encode(s)) == s` for every u8 sequence.

mod container;

pub use container::{parse_gop, parse_raw, read_gop, read_raw, write_gop, write_raw};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: &'static str,
        found: String,
    },
    #[error("unsupported version {version} at byte {offset}")]
    UnsupportedVersion { offset: usize, version: u8 },
    #[error("stream truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("invalid stream at byte {offset}: {detail}")]
    Invariant { offset: usize, detail: String },
    #[error("frame {index} is {got:?} but frame 0 is {want:?} (h, w, c)")]
    DimensionMismatch {
        index: usize,
        got: (usize, usize, usize),
        want: (usize, usize, usize),
    },
    #[error("invalid codec input: {0}")]
    InvalidInput(String),
    #[error("frame index {index} out of range for {count} frames")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("frame 0 is the I frame and has no residual")]
    NoResidual,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// Uncompressed 8-bit image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawFrame {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(CodecError::InvalidInput(format!(
                "frame {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(CodecError::InvalidInput(format!(
                "{} pixels for a {height}x{width}x{channels} frame",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Pixels scaled to `[0, 1]` as a planar `c × h × w` tensor.
    pub fn to_unit_tensor(&self) -> Tensor {
        let (h, w, c) = self.dims();
        let mut data = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = self.at(y, x, ch) as f64 / 255.0;
                }
            }
        }
        Tensor::from_vec(vec![c, h, w], data).expect("dims are positive")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MotionVector {
    pub dy: i8,
    pub dx: i8,
}

/// One motion vector per macroblock, row-major over the block grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionField {
    pub block_rows: usize,
    pub block_cols: usize,
    pub vectors: Vec<MotionVector>,
}

impl MotionField {
    pub fn get(&self, by: usize, bx: usize) -> MotionVector {
        self.vectors[by * self.block_cols + bx]
    }
}

/// Exact `current - prediction` for every sample, row-major interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualPlane {
    pub values: Vec<i16>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PFrame {
    pub motion: MotionField,
    pub residual: ResidualPlane,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    /// Macroblock side in pixels.
    pub macroblock: usize,
    /// Largest allowed |dy| and |dx|.
    pub search_range: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            macroblock: 8,
            search_range: 4,
        }
    }
}

/// Group of pictures: one I frame followed by P frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gop {
    pub config: CodecConfig,
    pub i_frame: RawFrame,
    pub p_frames: Vec<PFrame>,
}

impl Gop {
    pub fn frame_count(&self) -> usize {
        self.p_frames.len() + 1
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.i_frame.dims()
    }
}

fn check_config(config: &CodecConfig, h: usize, w: usize) -> Result<()> {
    let mb = config.macroblock;
    if mb == 0 || mb > u8::MAX as usize {
        return Err(CodecError::InvalidInput(format!("macroblock size {mb}")));
    }
    if config.search_range > i8::MAX as usize {
        return Err(CodecError::InvalidInput(format!(
            "search range {} exceeds {}",
            config.search_range,
            i8::MAX
        )));
    }
    if h % mb != 0 || w % mb != 0 {
        return Err(CodecError::InvalidInput(format!(
            "{h}x{w} frame is not divisible into {mb}x{mb} macroblocks"
        )));
    }
    Ok(())
}

#[inline]
fn clamp_coord(v: isize, len: usize) -> usize {
    v.clamp(0, len as isize - 1) as usize
}

/// Writes the motion-compensated prediction of `reference` into `pred`.
///
/// A pixel at `i` is predicted from `i - v` of its block's vector `v`,
/// with reference coordinates clamped to the frame.
fn predict(reference: &RawFrame, motion: &MotionField, mb: usize, pred: &mut [u8]) {
    let (h, w, c) = reference.dims();
    for by in 0..motion.block_rows {
        for bx in 0..motion.block_cols {
            let v = motion.get(by, bx);
            for y in by * mb..(by + 1) * mb {
                let ry = clamp_coord(y as isize - v.dy as isize, h);
                for x in bx * mb..(bx + 1) * mb {
                    let rx = clamp_coord(x as isize - v.dx as isize, w);
                    let src = (ry * w + rx) * c;
                    let dst = (y * w + x) * c;
                    pred[dst..dst + c].copy_from_slice(&reference.pixels[src..src + c]);
                }
            }
        }
    }
}

fn block_sad(cur: &RawFrame, reference: &RawFrame, by: usize, bx: usize, mb: usize, v: MotionVector) -> u32 {
    let (h, w, c) = cur.dims();
    let mut sad = 0u32;
    for y in by * mb..(by + 1) * mb {
        let ry = clamp_coord(y as isize - v.dy as isize, h);
        for x in bx * mb..(bx + 1) * mb {
            let rx = clamp_coord(x as isize - v.dx as isize, w);
            let a = &cur.pixels[(y * w + x) * c..][..c];
            let b = &reference.pixels[(ry * w + rx) * c..][..c];
            for (p, q) in a.iter().zip(b) {
                sad += (*p as i32 - *q as i32).unsigned_abs();
            }
        }
    }
    sad
}

/// Exhaustive SAD search over `±range`. Ties go to the smaller
/// `|dy| + |dx|`, then to the earlier candidate in row-major order.
pub fn estimate_motion(cur: &RawFrame, reference: &RawFrame, config: &CodecConfig) -> MotionField {
    let mb = config.macroblock;
    let r = config.search_range as isize;
    let (block_rows, block_cols) = (cur.height / mb, cur.width / mb);
    let mut vectors = Vec::with_capacity(block_rows * block_cols);
    for by in 0..block_rows {
        for bx in 0..block_cols {
            let mut best: Option<(u32, isize, MotionVector)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = MotionVector {
                        dy: dy as i8,
                        dx: dx as i8,
                    };
                    let sad = block_sad(cur, reference, by, bx, mb, v);
                    let cost = dy.abs() + dx.abs();
                    let better = match best {
                        None => true,
                        Some((s, c, _)) => sad < s || (sad == s && cost < c),
                    };
                    if better {
                        best = Some((sad, cost, v));
                    }
                }
            }
            vectors.push(best.map(|b| b.2).unwrap_or_default());
        }
    }
    MotionField {
        block_rows,
        block_cols,
        vectors,
    }
}

pub fn encode_gop(frames: &[RawFrame], config: CodecConfig) -> Result<Gop> {
    let first = frames
        .first()
        .ok_or_else(|| CodecError::InvalidInput("no frames to encode".into()))?;
    let want = first.dims();
    for (index, f) in frames.iter().enumerate() {
        if f.dims() != want {
            return Err(CodecError::DimensionMismatch {
                index,
                got: f.dims(),
                want,
            });
        }
    }
    check_config(&config, want.0, want.1)?;
    if frames.len() > u16::MAX as usize {
        return Err(CodecError::InvalidInput(format!("{} frames", frames.len())));
    }

    let mut reference = first.clone();
    let mut pred = vec![0u8; first.pixels.len()];
    let mut p_frames = Vec::with_capacity(frames.len() - 1);
    for cur in &frames[1..] {
        let motion = estimate_motion(cur, &reference, &config);
        predict(&reference, &motion, config.macroblock, &mut pred);
        let values = cur
            .pixels
            .iter()
            .zip(&pred)
            .map(|(&a, &b)| a as i16 - b as i16)
            .collect();
        p_frames.push(PFrame {
            motion,
            residual: ResidualPlane { values },
        });
        reference = reconstruct_next(&reference, p_frames.last().expect("just pushed"), &config, &mut pred)
            .expect("encoder residuals reconstruct in range");
    }
    Ok(Gop {
        config,
        i_frame: first.clone(),
        p_frames,
    })
}

/// Applies one P frame to the previous reconstruction. Returns the index
/// of the first sample that leaves `[0, 255]` on failure.
fn reconstruct_next(
    prev: &RawFrame,
    p: &PFrame,
    config: &CodecConfig,
    scratch: &mut [u8],
) -> std::result::Result<RawFrame, usize> {
    predict(prev, &p.motion, config.macroblock, scratch);
    let mut pixels = Vec::with_capacity(scratch.len());
    for (i, (&base, &res)) in scratch.iter().zip(&p.residual.values).enumerate() {
        let v = base as i16 + res;
        if !(0..=255).contains(&v) {
            return Err(i);
        }
        pixels.push(v as u8);
    }
    Ok(RawFrame {
        height: prev.height,
        width: prev.width,
        channels: prev.channels,
        pixels,
    })
}

/// Reconstructs frame `t`, reading only the I frame and P frames `1..=t`.
pub fn decode_frame(gop: &Gop, t: usize) -> Result<RawFrame> {
    if t >= gop.frame_count() {
        return Err(CodecError::IndexOutOfRange {
            index: t,
            count: gop.frame_count(),
        });
    }
    let mut frame = gop.i_frame.clone();
    let mut scratch = vec![0u8; frame.pixels.len()];
    for (k, p) in gop.p_frames[..t].iter().enumerate() {
        frame = reconstruct_next(&frame, p, &gop.config, &mut scratch).map_err(|i| {
            CodecError::InvalidInput(format!("P frame {} sample {i} leaves [0, 255]", k + 1))
        })?;
    }
    Ok(frame)
}

/// Every frame of the GOP in order.
pub fn decode_all(gop: &Gop) -> Result<Vec<RawFrame>> {
    let mut out = Vec::with_capacity(gop.frame_count());
    let mut frame = gop.i_frame.clone();
    let mut scratch = vec![0u8; frame.pixels.len()];
    out.push(frame.clone());
    for (k, p) in gop.p_frames.iter().enumerate() {
        frame = reconstruct_next(&frame, p, &gop.config, &mut scratch).map_err(|i| {
            CodecError::InvalidInput(format!("P frame {} sample {i} leaves [0, 255]", k + 1))
        })?;
        out.push(frame.clone());
    }
    Ok(out)
}

/// The apex frame used as the reconstruction target: the decoded frame
/// at `apex_idx`, obtained by accumulating residuals from the I frame.
pub fn accumulate_to_apex(gop: &Gop, apex_idx: usize) -> Result<RawFrame> {
    decode_frame(gop, apex_idx)
}

/// Network input for P frame `t`: the residual scaled by 1/255 as a
/// planar `c × h × w` tensor, optionally followed by two motion channels
/// (dy, dx) upsampled by nearest neighbour and scaled by 1/search_range.
pub fn residual_input(gop: &Gop, t: usize, with_motion: bool) -> Result<Tensor> {
    if t == 0 {
        return Err(CodecError::NoResidual);
    }
    if t >= gop.frame_count() {
        return Err(CodecError::IndexOutOfRange {
            index: t,
            count: gop.frame_count(),
        });
    }
    let p = &gop.p_frames[t - 1];
    let (h, w, c) = gop.dims();
    let planes = if with_motion { c + 2 } else { c };
    let mut data = vec![0.0; planes * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = p.residual.values[(y * w + x) * c + ch] as f64 / 255.0;
            }
        }
    }
    if with_motion && gop.config.search_range > 0 {
        let mb = gop.config.macroblock;
        let scale = 1.0 / gop.config.search_range as f64;
        for y in 0..h {
            for x in 0..w {
                let v = p.motion.get(y / mb, x / mb);
                data[(c * h + y) * w + x] = v.dy as f64 * scale;
                data[((c + 1) * h + y) * w + x] = v.dx as f64 * scale;
            }
        }
    }
    Ok(Tensor::from_vec(vec![planes, h, w], data).expect("dims are positive"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> RawFrame {
        let mut px = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                px.push(f(y, x));
            }
        }
        RawFrame::new(h, w, 1, px).unwrap()
    }

    #[test]
    fn constant_sequence_has_zero_motion_and_residual() {
        let f = frame(16, 16, |y, x| (y * 7 + x * 3) as u8);
        let gop = encode_gop(&[f.clone(), f.clone(), f], CodecConfig::default()).unwrap();
        for p in &gop.p_frames {
            assert!(p.motion.vectors.iter().all(|v| *v == MotionVector::default()));
            assert!(p.residual.values.iter().all(|&r| r == 0));
        }
    }

    #[test]
    fn single_frame_has_no_p_frames() {
        let gop = encode_gop(&[frame(8, 8, |_, _| 9)], CodecConfig::default()).unwrap();
        assert!(gop.p_frames.is_empty());
        assert_eq!(decode_frame(&gop, 0).unwrap(), gop.i_frame);
    }

    #[test]
    fn shift_is_found_by_block_matching() {
        // Content varies only along x, so the shifted frame is matched
        // exactly by dx = 1 everywhere except the clamped left column.
        let f1 = frame(32, 32, |_, x| (x * x % 251) as u8);
        let f2 = frame(32, 32, |_, x| ((x.max(1) - 1) * (x.max(1) - 1) % 251) as u8);
        let gop = encode_gop(&[f1, f2.clone()], CodecConfig::default()).unwrap();
        let p = &gop.p_frames[0];
        for by in 0..4 {
            for bx in 1..4 {
                assert_eq!(p.motion.get(by, bx), MotionVector { dy: 0, dx: 1 });
            }
        }
        for y in 0..32 {
            for x in 8..32 {
                assert_eq!(p.residual.values[y * 32 + x], 0);
            }
        }
        assert_eq!(decode_frame(&gop, 1).unwrap(), f2);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let a = frame(16, 16, |_, _| 0);
        let b = frame(8, 16, |_, _| 0);
        assert!(matches!(
            encode_gop(&[a, b], CodecConfig::default()),
            Err(CodecError::DimensionMismatch { index: 1, .. })
        ));
        let odd = frame(12, 16, |_, _| 0);
        assert!(matches!(
            encode_gop(&[odd], CodecConfig::default()),
            Err(CodecError::InvalidInput(_))
        ));
        assert!(matches!(encode_gop(&[], CodecConfig::default()), Err(CodecError::InvalidInput(_))));
    }

    #[test]
    fn residual_input_scaling_and_motion_planes() {
        let a = frame(8, 8, |_, _| 255);
        let b = frame(8, 8, |y, x| if (y, x) == (2, 3) { 0 } else { 255 });
        let gop = encode_gop(&[a, b], CodecConfig { macroblock: 8, search_range: 0 }).unwrap();
        let t = residual_input(&gop, 1, false).unwrap();
        assert_eq!(t.shape(), &[1, 8, 8]);
        assert_eq!(t.data()[2 * 8 + 3], -1.0);
        let tm = residual_input(&gop, 1, true).unwrap();
        assert_eq!(tm.shape(), &[3, 8, 8]);
        assert!(tm.data()[64..].iter().all(|&v| v == 0.0));
        assert!(matches!(residual_input(&gop, 0, false), Err(CodecError::NoResidual)));
        assert!(matches!(
            residual_input(&gop, 2, false),
            Err(CodecError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn decode_index_out_of_range() {
        let gop = encode_gop(&[frame(8, 8, |_, _| 1)], CodecConfig::default()).unwrap();
        assert!(matches!(decode_frame(&gop, 1), Err(CodecError::IndexOutOfRange { .. })));
        assert!(matches!(accumulate_to_apex(&gop, 3), Err(CodecError::IndexOutOfRange { .. })));
    }
}
