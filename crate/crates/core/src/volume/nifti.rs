//! NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only `pixdim` spacing is interpreted. The qform/sform block (header bytes
//! 252..344) is carried through as opaque bytes, normalized to little endian.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{GridGeometry, LabelMap, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const AFFINE_START: usize = 252;
const AFFINE_END: usize = 344;

mod off {
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// The qform/sform section of a NIfTI-1 header, little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffineBlock(pub [u8; AFFINE_END - AFFINE_START]);

impl AffineBlock {
    /// qform_code = 1 with identity rotation, sform_code = 1 with a diagonal
    /// scaling matrix, both translated to `geometry.origin`.
    pub fn axis_aligned(geometry: &GridGeometry) -> Self {
        let mut b = [0u8; AFFINE_END - AFFINE_START];
        let put_i16 = |b: &mut [u8], at: usize, v: i16| b[at - AFFINE_START..at - AFFINE_START + 2].copy_from_slice(&v.to_le_bytes());
        let put_f32 = |b: &mut [u8], at: usize, v: f32| b[at - AFFINE_START..at - AFFINE_START + 4].copy_from_slice(&v.to_le_bytes());
        put_i16(&mut b, off::QFORM_CODE, 1);
        put_i16(&mut b, off::SFORM_CODE, 1);
        for a in 0..3 {
            put_f32(&mut b, off::QOFFSET_X + 4 * a, geometry.origin[a] as f32);
            let row = off::SROW_X + 16 * a;
            put_f32(&mut b, row + 4 * a, geometry.spacing[a] as f32);
            put_f32(&mut b, row + 12, geometry.origin[a] as f32);
        }
        AffineBlock(b)
    }

    fn i16_at(&self, at: usize) -> i16 {
        let i = at - AFFINE_START;
        i16::from_le_bytes([self.0[i], self.0[i + 1]])
    }

    fn f32_at(&self, at: usize) -> f32 {
        let i = at - AFFINE_START;
        f32::from_le_bytes(self.0[i..i + 4].try_into().unwrap())
    }

    /// Translation of the affine: sform if set, else qform, else zero.
    pub fn origin(&self) -> [f64; 3] {
        if self.i16_at(off::SFORM_CODE) > 0 {
            std::array::from_fn(|a| self.f32_at(off::SROW_X + 16 * a + 12) as f64)
        } else if self.i16_at(off::QFORM_CODE) > 0 {
            std::array::from_fn(|a| self.f32_at(off::QOFFSET_X + 4 * a) as f64)
        } else {
            [0.0; 3]
        }
    }
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Fields<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Fields<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Dtype {
    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Dtype::U8,
            4 => Dtype::I16,
            8 => Dtype::I32,
            16 => Dtype::F32,
            64 => Dtype::F64,
            256 => Dtype::I8,
            512 => Dtype::U16,
            768 => Dtype::U32,
            other => return Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
        })
    }

    fn code(self) -> i16 {
        match self {
            Dtype::U8 => 2,
            Dtype::I16 => 4,
            Dtype::I32 => 8,
            Dtype::F32 => 16,
            Dtype::F64 => 64,
            Dtype::I8 => 256,
            Dtype::U16 => 512,
            Dtype::U32 => 768,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::U8 | Dtype::I8 => 1,
            Dtype::I16 | Dtype::U16 => 2,
            Dtype::I32 | Dtype::U32 | Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], endian: Endian) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let arr: [u8; $n] = b.try_into().unwrap();
                (match endian {
                    Endian::Little => <$t>::from_le_bytes(arr),
                    Endian::Big => <$t>::from_be_bytes(arr),
                }) as f64
            }};
        }
        match self {
            Dtype::U8 => b[0] as f64,
            Dtype::I8 => b[0] as i8 as f64,
            Dtype::I16 => num!(i16, 2),
            Dtype::U16 => num!(u16, 2),
            Dtype::I32 => num!(i32, 4),
            Dtype::U32 => num!(u32, 4),
            Dtype::F32 => num!(f32, 4),
            Dtype::F64 => num!(f64, 8),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads a NIfTI-1 file; the payload is converted to `f32` whatever its
/// on-disk type, with `scl_slope`/`scl_inter` applied when set.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti_with_affine(path).map(|(v, _)| v)
}

pub fn read_nifti_with_affine(path: impl AsRef<Path>) -> Result<(Volume, AffineBlock)> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<(Volume, AffineBlock)> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!("file too short for a header ({} bytes)", bytes.len())));
    }
    let magic = &bytes[off::MAGIC..off::MAGIC + 4];
    if magic == b"ni1\0" {
        return Err(Error::Unsupported("two-file (.hdr/.img) NIfTI".into()));
    }
    if magic != b"n+1\0" {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let endian = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::Format("sizeof_hdr is not 348".into()));
    };
    let h = Fields { bytes, endian };

    let ndim = h.i16(off::DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim}")));
    }
    if ndim > 4 {
        return Err(Error::Unsupported(format!("{ndim}-dimensional image")));
    }
    let mut dims = [1usize; 4];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = h.i16(off::DIM + 2 * (i + 1));
        if v < 1 {
            return Err(Error::Format(format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    let dtype = Dtype::from_code(h.i16(off::DATATYPE))?;
    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate().take((ndim as usize).min(3)) {
        *s = (h.f32(off::PIXDIM + 4 * (a + 1)) as f64).abs();
    }
    let vox_offset = h.f32(off::VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Format(format!("vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;

    // Affine block, re-encoded little-endian.
    let mut block = [0u8; AFFINE_END - AFFINE_START];
    let mut at = AFFINE_START;
    while at < AFFINE_END {
        let (width, le): (usize, Vec<u8>) = if at < off::QOFFSET_X - 12 {
            (2, h.i16(at).to_le_bytes().to_vec())
        } else {
            (4, h.f32(at).to_le_bytes().to_vec())
        };
        block[at - AFFINE_START..at - AFFINE_START + width].copy_from_slice(&le);
        at += width;
    }
    let affine = AffineBlock(block);

    let geometry = GridGeometry::with_origin([dims[0], dims[1], dims[2]], spacing, affine.origin())?;
    let count = dims.iter().product::<usize>();
    let need = vox_offset + count * dtype.size();
    if bytes.len() < need {
        return Err(Error::Format(format!("payload truncated: {} of {need} bytes", bytes.len())));
    }
    let slope = h.f32(off::SCL_SLOPE) as f64;
    let inter = h.f32(off::SCL_INTER) as f64;
    let scale = slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0);
    let data = bytes[vox_offset..need]
        .chunks_exact(dtype.size())
        .map(|b| {
            let v = dtype.decode(b, endian);
            (if scale { v * slope + inter } else { v }) as f32
        })
        .collect();
    Ok((Volume::new(dims[3], geometry, data)?, affine))
}

fn encode(
    geometry: &GridGeometry,
    channels: usize,
    dtype: Dtype,
    payload: &[u8],
    affine: Option<&AffineBlock>,
) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let ndim: i16 = if channels > 1 { 4 } else { 3 };
    put_i16(&mut h, off::DIM, ndim);
    for a in 0..3 {
        put_i16(&mut h, off::DIM + 2 * (a + 1), geometry.shape[a] as i16);
    }
    for i in 4..8 {
        put_i16(&mut h, off::DIM + 2 * i, 1);
    }
    if channels > 1 {
        put_i16(&mut h, off::DIM + 8, channels as i16);
    }
    put_i16(&mut h, off::DATATYPE, dtype.code());
    put_i16(&mut h, off::BITPIX, (dtype.size() * 8) as i16);
    put_f32(&mut h, off::PIXDIM, 1.0);
    for a in 0..3 {
        put_f32(&mut h, off::PIXDIM + 4 * (a + 1), geometry.spacing[a] as f32);
    }
    for i in 4..8 {
        put_f32(&mut h, off::PIXDIM + 4 * i, 1.0);
    }
    put_f32(&mut h, off::VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut h, off::SCL_SLOPE, 1.0);
    put_f32(&mut h, off::SCL_INTER, 0.0);
    h[off::XYZT_UNITS] = 2; // mm
    let descrip = b"emednext";
    h[off::DESCRIP..off::DESCRIP + descrip.len()].copy_from_slice(descrip);
    let block = affine.cloned().unwrap_or_else(|| AffineBlock::axis_aligned(geometry));
    h[AFFINE_START..AFFINE_END].copy_from_slice(&block.0);
    h[off::MAGIC..off::MAGIC + 4].copy_from_slice(b"n+1\0");
    // bytes 348..352: empty extension flag
    h.extend_from_slice(payload);
    h
}

fn write_bytes(bytes: &[u8], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        // Default gzip header has mtime 0, so output is deterministic.
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(bytes).and_then(|_| enc.finish()).and_then(|mut w| w.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

/// Writes `vol` as float32 NIfTI-1 (3D, or 4D when it has several channels).
/// A `.gz` extension selects gzip compression.
pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti_with_affine(vol, None, path)
}

pub fn write_nifti_with_affine(vol: &Volume, affine: Option<&AffineBlock>, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = vol.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let bytes = encode(vol.geometry(), vol.channels(), Dtype::F32, &payload, affine);
    write_bytes(&bytes, path.as_ref())
}

/// Writes a label map as int16 NIfTI-1.
pub fn write_labels_nifti(labels: &LabelMap, affine: Option<&AffineBlock>, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = labels
        .labels()
        .iter()
        .flat_map(|&l| (l as i16).to_le_bytes())
        .collect();
    let bytes = encode(labels.geometry(), 1, Dtype::I16, &payload, affine);
    write_bytes(&bytes, path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(shape: [usize; 3], spacing: [f64; 3]) -> GridGeometry {
        GridGeometry::new(shape, spacing).unwrap()
    }

    #[test]
    fn zero_volume_has_deterministic_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.nii");
        write_nifti(&Volume::zeros(1, geom([4, 4, 4], [1.0; 3])), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 352 + 64 * 4);
        assert_eq!(i16::from_le_bytes([bytes[40], bytes[41]]), 3);
        for a in 0..3 {
            assert_eq!(i16::from_le_bytes([bytes[42 + 2 * a], bytes[43 + 2 * a]]), 4);
        }
        assert_eq!(&bytes[344..348], b"n+1\0");
    }

    #[test]
    fn roundtrip_float_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let g = geom([3, 4, 5], [0.9, 0.9, 1.2]);
        let v = Volume::new(2, g, (0..120).map(|i| i as f32 * 0.37 - 3.0).collect()).unwrap();
        let p = dir.path().join("v.nii");
        let pgz = dir.path().join("v.nii.gz");
        write_nifti(&v, &p).unwrap();
        write_nifti(&v, &pgz).unwrap();
        let a = read_nifti(&p).unwrap();
        let b = read_nifti(&pgz).unwrap();
        assert_eq!(a.data(), v.data());
        assert_eq!(a, b);
        assert_eq!(a.channels(), 2);
        for k in 0..3 {
            assert!((a.geometry().spacing[k] - g.spacing[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn label_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = geom([4, 2, 2], [1.0; 3]);
        let l = LabelMap::new(g, (0..16).map(|i| (i % 4) as u8).collect()).unwrap();
        let p = dir.path().join("seg.nii.gz");
        write_labels_nifti(&l, None, &p).unwrap();
        let back = LabelMap::from_volume(&read_nifti(&p).unwrap()).unwrap();
        assert_eq!(back.labels(), l.labels());
    }

    #[test]
    fn affine_block_is_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let g = geom([2, 2, 2], [1.0; 3]);
        let mut block = AffineBlock::axis_aligned(&g);
        block.0[20] = 0x3f; // perturb quatern bytes
        let p = dir.path().join("a.nii");
        write_nifti_with_affine(&Volume::zeros(1, g), Some(&block), &p).unwrap();
        let (_, back) = read_nifti_with_affine(&p).unwrap();
        assert_eq!(back, block);
    }

    #[test]
    fn rejects_bad_magic_dtype_and_rank() {
        let g = geom([2, 2, 2], [1.0; 3]);
        let good = encode(&g, 1, Dtype::F32, &[0u8; 32], None);

        let mut bad = good.clone();
        bad[344..348].copy_from_slice(b"xyz\0");
        assert!(matches!(decode(&bad), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[70..72].copy_from_slice(&32i16.to_le_bytes()); // complex64
        assert!(matches!(decode(&bad), Err(Error::Unsupported(_))));

        let mut bad = good.clone();
        bad[40..42].copy_from_slice(&5i16.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::Unsupported(_))));

        assert!(matches!(decode(&good[..100]), Err(Error::Format(_))));
    }

    #[test]
    fn reads_big_endian_int16_with_scaling() {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        h[40..42].copy_from_slice(&3i16.to_be_bytes());
        for a in 0..3 {
            h[42 + 2 * a..44 + 2 * a].copy_from_slice(&(if a == 0 { 2i16 } else { 1 }).to_be_bytes());
        }
        h[70..72].copy_from_slice(&4i16.to_be_bytes());
        h[72..74].copy_from_slice(&16i16.to_be_bytes());
        for a in 0..3 {
            h[80 + 4 * a..84 + 4 * a].copy_from_slice(&2.0f32.to_be_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_be_bytes());
        h[112..116].copy_from_slice(&0.5f32.to_be_bytes());
        h[116..120].copy_from_slice(&1.0f32.to_be_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(&(-4i16).to_be_bytes());
        h.extend_from_slice(&10i16.to_be_bytes());
        let (v, _) = decode(&h).unwrap();
        assert_eq!(v.data(), &[-1.0, 6.0]);
        assert_eq!(v.geometry().spacing, [2.0, 2.0, 2.0]);
    }
}
