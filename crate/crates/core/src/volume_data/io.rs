//! `RSVOL1` volume files and `RSPAT1` patch archives. All integers and
//! floats little-endian.

use std::fs;
use std::path::Path;

use super::{Patch, Volume, VolumeSequence};
use crate::error::{Error, Result};

const VOLUME_MAGIC: &[u8; 6] = b"RSVOL1";
const PATCH_MAGIC: &[u8; 6] = b"RSPAT1";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format(
                    self.buf.len() as u64,
                    format!("truncated {what}: need {n} bytes at offset {}", self.pos),
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 6]) -> Result<()> {
        let got = self.take(6, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes(b.try_into().unwrap()))
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos as u64;
        let v = self.u32("version")?;
        if v != VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what} size overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
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

fn checked_product(dims: &[u32], offset: u64) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|&n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::format(offset, format!("dimensions {dims:?} overflow")))
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for &x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn dim_u32(d: usize, what: &str) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::Contract(format!("{what} {d} does not fit in u32")))
}

pub fn encode_sequence(frames: &[Volume]) -> Result<Vec<u8>> {
    let dims = frames
        .first()
        .map(|f| f.dims)
        .ok_or_else(|| Error::Contract("cannot encode an empty sequence".into()))?;
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(26 + frames.len() * n * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(frames.len(), "frame count")?.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&dim_u32(d, "dimension")?.to_le_bytes());
    }
    for f in frames {
        if f.dims != dims {
            return Err(Error::Contract("frames differ in dimensions".into()));
        }
        push_f32s(&mut out, &f.data);
    }
    Ok(out)
}

pub fn decode_sequence(buf: &[u8], frame_period: f64) -> Result<VolumeSequence> {
    let mut r = Reader::new(buf);
    r.magic(VOLUME_MAGIC)?;
    r.version()?;
    let header_at = r.pos as u64;
    let nt = r.u32("nt")?;
    let dims = [r.u32("nz")?, r.u32("ny")?, r.u32("nx")?];
    let per_frame = checked_product(&dims, header_at)?;
    checked_product(&[nt, dims[0], dims[1], dims[2]], header_at)?;
    if nt == 0 || per_frame == 0 {
        return Err(Error::format(header_at, "zero-sized volume"));
    }
    let dims = dims.map(|d| d as usize);
    let mut frames = Vec::with_capacity(nt as usize);
    for t in 0..nt {
        let data = r.floats(per_frame, &format!("payload of frame {t}"))?;
        frames.push(Volume { dims, data });
    }
    r.finish()?;
    VolumeSequence::new(frames, frame_period)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_sequence(path: impl AsRef<Path>, seq: &VolumeSequence) -> Result<()> {
    write_file(path.as_ref(), &encode_sequence(seq.frames())?)
}

pub fn read_sequence(path: impl AsRef<Path>, frame_period: f64) -> Result<VolumeSequence> {
    decode_sequence(&read_file(path.as_ref())?, frame_period)
}

/// Writes a single volume as a one-frame sequence.
pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    write_file(path.as_ref(), &encode_sequence(std::slice::from_ref(volume))?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let seq = decode_sequence(&read_file(path.as_ref())?, 1.0)?;
    if seq.len() != 1 {
        return Err(Error::format(10, format!("expected one frame, found {}", seq.len())));
    }
    Ok(seq.frames.into_iter().next().unwrap())
}

pub fn encode_patches(patches: &[Patch]) -> Result<Vec<u8>> {
    let side = patches.first().map_or(0, |p| p.side);
    let mut out = Vec::new();
    out.extend_from_slice(PATCH_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(patches.len(), "patch count")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(side, "patch side")?.to_le_bytes());
    for p in patches {
        if p.side != side || p.data.len() != side * side * side {
            return Err(Error::Contract("patches in one archive must share a side".into()));
        }
        out.extend_from_slice(&p.label.to_le_bytes());
        out.extend_from_slice(&dim_u32(p.frame_index, "frame index")?.to_le_bytes());
        for c in p.center {
            out.extend_from_slice(&c.to_le_bytes());
        }
        push_f32s(&mut out, &p.data);
    }
    Ok(out)
}

pub fn decode_patches(buf: &[u8]) -> Result<Vec<Patch>> {
    let mut r = Reader::new(buf);
    r.magic(PATCH_MAGIC)?;
    r.version()?;
    let header_at = r.pos as u64;
    let count = r.u32("count")?;
    let side = r.u32("side")?;
    let voxels = checked_product(&[side, side, side], header_at)?;
    let mut patches = Vec::with_capacity((count as usize).min(buf.len() / 4));
    for i in 0..count {
        let label = r.u32("label")?;
        let frame_index = r.u32("frame index")? as usize;
        let center = [r.i32("center")?, r.i32("center")?, r.i32("center")?];
        let data = r.floats(voxels, &format!("voxels of patch {i}"))?;
        patches.push(Patch {
            data,
            side: side as usize,
            frame_index,
            center,
            label,
        });
    }
    r.finish()?;
    Ok(patches)
}

pub fn write_patches(path: impl AsRef<Path>, patches: &[Patch]) -> Result<()> {
    write_file(path.as_ref(), &encode_patches(patches)?)
}

pub fn read_patches(path: impl AsRef<Path>) -> Result<Vec<Patch>> {
    decode_patches(&read_file(path.as_ref())?)
}
