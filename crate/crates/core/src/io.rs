//! Binary file formats.
//!
//! * `C2PS` point cloud sequences (optional cameras and labels).
//! * `C2PD` depth images.
//! * `C2PW` named parameter checkpoints.
//!
//! All integers and floats are little-endian. Readers report the byte
//! offset at which a file stops making sense.

use std::fs;
use std::path::Path;

use crate::autograd::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, DepthImage, FrameCamera, PointCloudFrame, Sequence};

pub const SEQUENCE_MAGIC: &[u8; 4] = b"C2PS";
pub const DEPTH_MAGIC: &[u8; 4] = b"C2PD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C2PW";
pub const VERSION: u32 = 1;

const FLAG_CAMERAS: u8 = 0b01;
const FLAG_LABELS: u8 = 0b10;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos as u64;
        let v = self.u32("version")?;
        if v != VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&(x as f32).to_le_bytes());
}

fn count_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::config(format!("{what} count {n} exceeds u32")))
}

/// Serializes a sequence. Coordinates and camera values are stored as f32.
pub fn encode_sequence(seq: &Sequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(SEQUENCE_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, count_u32(seq.len(), "frame")?);
    let mut flags = 0;
    if seq.cameras.is_some() {
        flags |= FLAG_CAMERAS;
    }
    if seq.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    out.push(flags);
    for f in &seq.frames {
        put_u32(&mut out, count_u32(f.len(), "point")?);
        for p in &f.points {
            for &c in p {
                put_f32(&mut out, c);
            }
        }
    }
    if let Some(cams) = &seq.cameras {
        for c in cams {
            let k = &c.intrinsics;
            for v in [k.fx, k.fy, k.cx, k.cy] {
                put_f32(&mut out, v);
            }
            put_u32(&mut out, k.width);
            put_u32(&mut out, k.height);
            for r in 0..3 {
                for col in 0..3 {
                    put_f32(&mut out, c.pose.rotation[r][col]);
                }
                put_f32(&mut out, c.pose.translation[r]);
            }
        }
    }
    if let Some(labels) = &seq.labels {
        for &l in labels {
            put_u32(&mut out, l);
        }
    }
    Ok(out)
}

pub fn decode_sequence(buf: &[u8]) -> Result<Sequence> {
    let mut r = Reader::new(buf);
    r.magic(SEQUENCE_MAGIC)?;
    r.version()?;
    let len_at = r.pos as u64;
    let frames = r.u32("frame count")? as usize;
    if frames == 0 {
        return Err(Error::format(len_at, "sequence has zero frames"));
    }
    let flags_at = r.pos as u64;
    let flags = r.u8("flags")?;
    if flags & !(FLAG_CAMERAS | FLAG_LABELS) != 0 {
        return Err(Error::format(flags_at, format!("unknown flag bits {flags:#04b}")));
    }
    let mut out = Vec::with_capacity(frames.min(1 << 16));
    for _ in 0..frames {
        let n = r.u32("point count")? as usize;
        // Check the whole block up front so a huge count fails fast.
        let at = r.pos;
        let block = r.take(n.saturating_mul(12), "points")?;
        let mut points = Vec::with_capacity(n);
        for (i, chunk) in block.chunks_exact(12).enumerate() {
            let mut p = [0.0; 3];
            for (k, c) in chunk.chunks_exact(4).enumerate() {
                p[k] = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::format((at + i * 12) as u64, "non-finite coordinate"));
            }
            points.push(p);
        }
        out.push(PointCloudFrame::new(points));
    }
    let cameras = if flags & FLAG_CAMERAS != 0 {
        let mut cams = Vec::with_capacity(frames);
        for _ in 0..frames {
            let fx = r.f32("fx")? as f64;
            let fy = r.f32("fy")? as f64;
            let cx = r.f32("cx")? as f64;
            let cy = r.f32("cy")? as f64;
            let width = r.u32("width")?;
            let height = r.u32("height")?;
            let mut rotation = [[0.0; 3]; 3];
            let mut translation = [0.0; 3];
            for row in 0..3 {
                for col in 0..3 {
                    rotation[row][col] = r.f32("rotation")? as f64;
                }
                translation[row] = r.f32("translation")? as f64;
            }
            cams.push(FrameCamera {
                intrinsics: CameraIntrinsics {
                    fx,
                    fy,
                    cx,
                    cy,
                    width,
                    height,
                },
                pose: CameraPose::new(rotation, translation),
            });
        }
        Some(cams)
    } else {
        None
    };
    let labels = if flags & FLAG_LABELS != 0 {
        let mut labels = Vec::with_capacity(frames);
        for _ in 0..frames {
            labels.push(r.u32("label")?);
        }
        Some(labels)
    } else {
        None
    };
    r.finish()?;
    Ok(Sequence {
        frames: out,
        labels,
        cameras,
    })
}

pub fn write_sequence(path: &Path, seq: &Sequence) -> Result<()> {
    fs::write(path, encode_sequence(seq)?)?;
    Ok(())
}

pub fn read_sequence(path: &Path) -> Result<Sequence> {
    decode_sequence(&fs::read(path)?)
}

/// Depth image as f32, empty pixels as +infinity.
pub fn encode_depth(img: &DepthImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.depth.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, img.width);
    put_u32(&mut out, img.height);
    for &d in &img.depth {
        put_f32(&mut out, d);
    }
    out
}

/// Decodes depths only; the source-index map is not stored and comes back
/// as `0` for filled pixels.
pub fn decode_depth(buf: &[u8]) -> Result<DepthImage> {
    let mut r = Reader::new(buf);
    r.magic(DEPTH_MAGIC)?;
    r.version()?;
    let width = r.u32("width")?;
    let height = r.u32("height")?;
    let n = width as usize * height as usize;
    let mut img = DepthImage::empty(width, height);
    for i in 0..n {
        let at = r.pos as u64;
        let d = r.f32("depth")? as f64;
        if d == f64::INFINITY {
            continue;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::format(at, format!("invalid depth {d}")));
        }
        img.depth[i] = d;
        img.index[i] = 0;
    }
    r.finish()?;
    Ok(img)
}

pub fn write_depth(path: &Path, img: &DepthImage) -> Result<()> {
    fs::write(path, encode_depth(img))?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<DepthImage> {
    decode_depth(&fs::read(path)?)
}

pub fn encode_checkpoint(params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, count_u32(params.len(), "entry")?);
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::config(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::config(format!("rank of {name} exceeds 255")))?;
        out.push(rank);
        for &e in t.shape() {
            put_u32(&mut out, count_u32(e, "extent")?);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos as u64;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let at = r.pos as u64;
        r.take(n.saturating_mul(8), "values")?;
        r.pos = at as usize;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64("value")?);
        }
        if store.get(&name).is_some() {
            return Err(Error::format(at, format!("duplicate entry `{name}`")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    r.finish()?;
    Ok(store)
}

pub fn write_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    decode_checkpoint(&fs::read(path)?)
}

/// One `x y z` line per point.
pub fn frame_to_xyz(frame: &PointCloudFrame) -> String {
    let mut s = String::with_capacity(frame.len() * 32);
    for p in &frame.points {
        s.push_str(&format!("{} {} {}\n", p[0] as f32, p[1] as f32, p[2] as f32));
    }
    s
}

/// Writes `<stem>_<frame>.xyz` files into `dir`.
pub fn export_xyz(dir: &Path, stem: &str, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        fs::write(dir.join(format!("{stem}_{i:04}.xyz")), frame_to_xyz(f))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use crate::rng::Pcg32;
    use proptest::prelude::*;

    fn random_sequence(seed: u64, frames: usize, labels: bool, cameras: bool) -> Sequence {
        let mut rng = Pcg32::from_seed(seed);
        let frames: Vec<PointCloudFrame> = (0..frames)
            .map(|_| {
                let n = rng.below(40) as usize;
                PointCloudFrame::new(
                    (0..n)
                        .map(|_| [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)])
                        .collect(),
                )
            })
            .collect();
        let l = frames.len();
        Sequence {
            frames,
            labels: labels.then(|| (0..l as u32).map(|i| i % 3).collect()),
            cameras: cameras.then(|| {
                vec![
                    FrameCamera {
                        intrinsics: CameraIntrinsics::default(),
                        pose: look_at([0.0, -4.0, 1.0], [0.0; 3], [0.0, 0.0, 1.0]).unwrap(),
                    };
                    l
                ]
            }),
        }
    }

    proptest! {
        #[test]
        fn sequence_bytes_round_trip(seed in any::<u64>(), frames in 1usize..6, labels: bool, cameras: bool) {
            let bytes = encode_sequence(&random_sequence(seed, frames, labels, cameras)).unwrap();
            let decoded = decode_sequence(&bytes).unwrap();
            prop_assert_eq!(encode_sequence(&decoded).unwrap(), bytes);
            prop_assert_eq!(decoded.labels.is_some(), labels);
            prop_assert_eq!(decoded.cameras.is_some(), cameras);
        }
    }

    #[test]
    fn labels_are_preserved() {
        let seq = random_sequence(3, 4, true, false);
        let back = decode_sequence(&encode_sequence(&seq).unwrap()).unwrap();
        assert_eq!(back.labels, seq.labels);
    }

    #[test]
    fn header_layout() {
        let seq = Sequence::new(vec![PointCloudFrame::new(vec![[1.0, 2.0, 3.0]])]);
        let bytes = encode_sequence(&seq).unwrap();
        assert_eq!(&bytes[..4], b"C2PS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], 0);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(bytes[17..21].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 13 + 4 + 12);
    }

    #[test]
    fn truncated_file_names_offset() {
        let bytes = encode_sequence(&random_sequence(5, 3, true, true)).unwrap();
        let cut = bytes.len() - 3;
        match decode_sequence(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut && offset > 12),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_version_and_flags() {
        let mut bytes = encode_sequence(&random_sequence(6, 2, false, false)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_sequence(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_sequence(&bad), Err(Error::Format { offset: 4, .. })));
        bytes[12] = 0x80;
        assert!(matches!(decode_sequence(&bytes), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_sequence(&random_sequence(7, 2, false, false)).unwrap();
        bytes.push(0);
        assert!(matches!(decode_sequence(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn depth_layout_and_round_trip() {
        let mut img = DepthImage::empty(3, 2);
        img.depth[4] = 2.5;
        img.index[4] = 9;
        let bytes = encode_depth(&img);
        assert_eq!(&bytes[..4], b"C2PD");
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), f32::INFINITY);
        let back = decode_depth(&bytes).unwrap();
        assert_eq!(back.depth, img.depth);
        assert_eq!(encode_depth(&back), bytes);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new();
        let mut rng = Pcg32::from_seed(1);
        store.init_uniform("b.weight", &[3, 4], 3, &mut rng);
        store.init_uniform("a.bias", &[4], 3, &mut rng);
        store.insert("meta.step", Tensor::scalar(12.0));
        let bytes = encode_checkpoint(&store).unwrap();
        assert_eq!(&bytes[..4], b"C2PW");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, store);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn xyz_lines() {
        let f = PointCloudFrame::new(vec![[1.0, 2.5, -3.0], [0.0, 0.0, 0.0]]);
        assert_eq!(frame_to_xyz(&f), "1 2.5 -3\n0 0 0\n");
    }
}
