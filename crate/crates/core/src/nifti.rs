//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Images are written as float32 and label maps as uint8. On read the byte
//! order is detected from `sizeof_hdr`, gzip from the `1F 8B` prefix, and
//! `scl_slope`/`scl_inter` are applied when the slope is non-zero.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{identity_affine, Affine, Grid, LabelMap, Volume};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE_FILE: &[u8; 4] = b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

/// Result of reading a file whose kind is decided by its datatype:
/// uint8 payloads come back as label maps, everything else as images.
#[derive(Debug, Clone, PartialEq)]
pub enum NiftiImage {
    Volume(Volume),
    Labels(LabelMap),
}

#[derive(Debug, Clone)]
struct Header {
    dims: [usize; 3],
    pixdim: [f64; 3],
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    affine: Affine,
    little_endian: bool,
}

struct Fields<'a> {
    buf: &'a [u8],
    le: bool,
}

impl Fields<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.buf[off], self.buf[off + 1]];
        if self.le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        if self.le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }
}

fn bytes_per_voxel(datatype: i16) -> Result<usize> {
    match datatype {
        DT_UINT8 => Ok(1),
        DT_INT16 => Ok(2),
        DT_INT32 | DT_FLOAT32 => Ok(4),
        DT_FLOAT64 => Ok(8),
        other => Err(Error::UnsupportedDatatype(other)),
    }
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!(
            "file too short for a header ({} bytes)",
            buf.len()
        )));
    }
    let le = if i32::from_le_bytes(buf[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        true
    } else if i32::from_be_bytes(buf[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        false
    } else {
        return Err(Error::Nifti("sizeof_hdr is not 348".into()));
    };
    if &buf[344..348] != MAGIC_SINGLE_FILE {
        return Err(Error::Nifti(format!(
            "bad magic {:?}, expected \"n+1\"",
            &buf[344..348]
        )));
    }
    let f = Fields { buf, le };
    let ndim = f.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        if (a as i16) < ndim {
            let v = f.i16(42 + 2 * a);
            if v < 1 {
                return Err(Error::Nifti(format!("dim[{}] = {v} must be positive", a + 1)));
            }
            *d = v as usize;
        }
    }
    for a in 3..ndim as usize {
        let v = f.i16(42 + 2 * a);
        if v > 1 {
            return Err(Error::Nifti(format!(
                "dim[{}] = {v}: only 3D volumes are supported",
                a + 1
            )));
        }
    }
    let mut pixdim = [1.0f64; 3];
    for (a, p) in pixdim.iter_mut().enumerate() {
        let v = f.f32(80 + 4 * a);
        *p = if (a as i16) < ndim { v.abs() as f64 } else { 1.0 };
        if !(*p > 0.0 && p.is_finite()) {
            return Err(Error::Nifti(format!("pixdim[{}] = {v} is not positive", a + 1)));
        }
    }
    let datatype = f.i16(70);
    let bpv = bytes_per_voxel(datatype)?;
    let bitpix = f.i16(72);
    if bitpix as usize != bpv * 8 {
        return Err(Error::Nifti(format!(
            "bitpix {bitpix} inconsistent with datatype {datatype}"
        )));
    }
    let vox_offset = f.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Nifti(format!("vox_offset {vox_offset} too small")));
    }
    let sform_code = f.i16(254);
    let affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f.f32(280 + 16 * r + 4 * c) as f64;
            }
        }
        a[3][3] = 1.0;
        a
    } else {
        identity_affine(pixdim)
    };
    Ok(Header {
        dims,
        pixdim,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: f.f32(112),
        scl_inter: f.f32(116),
        affine,
        little_endian: le,
    })
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
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn decode_payload(h: &Header, buf: &[u8]) -> Result<Vec<f64>> {
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let bpv = bytes_per_voxel(h.datatype)?;
    let need = h.vox_offset + n * bpv;
    if buf.len() < need {
        return Err(Error::Nifti(format!(
            "payload too short: dims {:?} need {} bytes, file has {}",
            h.dims,
            need,
            buf.len()
        )));
    }
    let data = &buf[h.vox_offset..need];
    let le = h.little_endian;
    macro_rules! decode {
        ($t:ty, $w:expr) => {
            data.chunks_exact($w)
                .map(|c| {
                    let b = c.try_into().unwrap();
                    (if le { <$t>::from_le_bytes(b) } else { <$t>::from_be_bytes(b) }) as f64
                })
                .collect::<Vec<f64>>()
        };
    }
    let mut values = match h.datatype {
        DT_UINT8 => data.iter().map(|&b| b as f64).collect(),
        DT_INT16 => decode!(i16, 2),
        DT_INT32 => decode!(i32, 4),
        DT_FLOAT32 => decode!(f32, 4),
        DT_FLOAT64 => decode!(f64, 8),
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    if h.scl_slope != 0.0 && h.scl_slope.is_finite() && h.scl_inter.is_finite() {
        let (s, b) = (h.scl_slope as f64, h.scl_inter as f64);
        if s != 1.0 || b != 0.0 {
            values.iter_mut().for_each(|v| *v = *v * s + b);
        }
    }
    Ok(values)
}

fn grid_of(h: &Header) -> Result<Grid> {
    Ok(Grid::new(h.dims, h.pixdim)?.with_affine(h.affine))
}

/// Reads any supported file; uint8 payloads become label maps.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let buf = read_bytes(path)?;
    let h = parse_header(&buf)?;
    if h.datatype == DT_UINT8 && (h.scl_slope == 0.0 || (h.scl_slope == 1.0 && h.scl_inter == 0.0)) {
        let n = h.dims[0] * h.dims[1] * h.dims[2];
        if buf.len() < h.vox_offset + n {
            return Err(Error::Nifti(format!(
                "payload too short: dims {:?} need {} bytes",
                h.dims,
                h.vox_offset + n
            )));
        }
        let data = buf[h.vox_offset..h.vox_offset + n].to_vec();
        return Ok(NiftiImage::Labels(LabelMap::new(grid_of(&h)?, data)?));
    }
    let values = decode_payload(&h, &buf)?;
    let data = values.into_iter().map(|v| v as f32).collect();
    Ok(NiftiImage::Volume(Volume::new(grid_of(&h)?, data)?))
}

/// Reads a file as a scalar image regardless of its stored datatype.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let buf = read_bytes(path)?;
    let h = parse_header(&buf)?;
    let values = decode_payload(&h, &buf)?;
    Volume::new(grid_of(&h)?, values.into_iter().map(|v| v as f32).collect())
}

/// Reads a file as a label map. Values must be integral and valid label ids.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let buf = read_bytes(path)?;
    let h = parse_header(&buf)?;
    let values = decode_payload(&h, &buf)?;
    let mut data = Vec::with_capacity(values.len());
    for v in values {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Nifti(format!("non-integral label value {v}")));
        }
        data.push(v as u8);
    }
    LabelMap::new(grid_of(&h)?, data)
}

fn header_bytes(grid: &Grid, datatype: i16) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, grid.dims[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, (bytes_per_voxel(datatype).unwrap() * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, grid.spacing[a] as f32);
    }
    for a in 3..7 {
        put_f32(&mut h, 80 + 4 * a, 1.0);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    // xyzt_units: mm
    h[123] = 2;
    put_i16(&mut h, 254, 1);
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut h, 280 + 16 * r + 4 * c, grid.affine[r][c] as f32);
        }
    }
    h[344..348].copy_from_slice(MAGIC_SINGLE_FILE);
    h
}

fn write_bytes(path: &Path, header: &[u8], payload: &[u8]) -> Result<()> {
    debug_assert_eq!(header.len(), DATA_OFFSET);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let res = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(header)
            .and_then(|_| enc.write_all(payload))
            .and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(header)
            .and_then(|_| w.write_all(payload))
            .and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

/// Writes an image as float32. A `.gz` suffix selects gzip compression.
pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let header = header_bytes(&vol.grid, DT_FLOAT32);
    let payload: Vec<u8> = vol.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path.as_ref(), &header, &payload)
}

/// Writes a label map as uint8.
pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let header = header_bytes(&labels.grid, DT_UINT8);
    write_bytes(path.as_ref(), &header, &labels.data)
}

pub fn write_nifti(image: &NiftiImage, path: impl AsRef<Path>) -> Result<()> {
    match image {
        NiftiImage::Volume(v) => write_volume(v, path),
        NiftiImage::Labels(l) => write_labels(l, path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn zeros_float32() {
        let dir = tmp();
        let p = dir.path().join("z.nii");
        let g = Grid::new([4, 4, 4], [1.0; 3]).unwrap();
        write_volume(&Volume::filled(g, 0.0), &p).unwrap();
        match read_nifti(&p).unwrap() {
            NiftiImage::Volume(v) => {
                assert_eq!(v.dims(), [4, 4, 4]);
                assert_eq!(v.grid.spacing, [1.0; 3]);
                assert!(v.data.iter().all(|&x| x == 0.0));
            }
            other => panic!("expected a volume, got {other:?}"),
        }
    }

    #[test]
    fn labels_roundtrip_gz() {
        let dir = tmp();
        let p = dir.path().join("l.nii.gz");
        let g = Grid::new([3, 2, 2], [0.8; 3]).unwrap();
        let l = LabelMap::new(g, vec![0, 1, 2, 0, 1, 2, 2, 2, 1, 0, 0, 1]).unwrap();
        write_labels(&l, &p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b]);
        match read_nifti(&p).unwrap() {
            NiftiImage::Labels(r) => assert_eq!(r.data, l.data),
            other => panic!("expected labels, got {other:?}"),
        }
    }

    #[test]
    fn all_ignore_payload() {
        let dir = tmp();
        let p = dir.path().join("ign.nii");
        let g = Grid::new([2, 3, 4], [1.0; 3]).unwrap();
        write_labels(&LabelMap::filled(g, 255), &p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(raw.len(), DATA_OFFSET + 24);
        assert!(raw[DATA_OFFSET..].iter().all(|&b| b == 255));
    }

    #[test]
    fn pixdim_written() {
        let dir = tmp();
        let p = dir.path().join("s.nii");
        let g = Grid::new([2, 2, 2], [0.75; 3]).unwrap();
        write_volume(&Volume::filled(g, 1.0), &p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        for a in 0..3 {
            let off = 80 + 4 * a;
            let v = f32::from_le_bytes(raw[off..off + 4].try_into().unwrap());
            assert_eq!(v, 0.75);
        }
    }

    fn handmade(datatype: i16, big_endian: bool, payload: &[u8], slope: f32, inter: f32) -> Vec<u8> {
        let g = Grid::new([2, 1, 1], [1.0; 3]).unwrap();
        let mut h = header_bytes(&g, datatype);
        h[112..116].copy_from_slice(&slope.to_le_bytes());
        h[116..120].copy_from_slice(&inter.to_le_bytes());
        if big_endian {
            // swap every numeric field we read
            let swap = |h: &mut Vec<u8>, off: usize, w: usize| h[off..off + w].reverse();
            swap(&mut h, 0, 4);
            for a in 0..8 {
                swap(&mut h, 40 + 2 * a, 2);
                swap(&mut h, 76 + 4 * a, 4);
            }
            swap(&mut h, 70, 2);
            swap(&mut h, 72, 2);
            swap(&mut h, 108, 4);
            swap(&mut h, 112, 4);
            swap(&mut h, 116, 4);
            swap(&mut h, 254, 2);
            for r in 0..12 {
                swap(&mut h, 280 + 4 * r, 4);
            }
        }
        h.extend_from_slice(payload);
        h
    }

    #[test]
    fn big_endian_int16_with_scaling() {
        let dir = tmp();
        let p = dir.path().join("be.nii");
        let mut payload = Vec::new();
        payload.extend_from_slice(&7i16.to_be_bytes());
        payload.extend_from_slice(&(-3i16).to_be_bytes());
        std::fs::write(&p, handmade(DT_INT16, true, &payload, 2.0, 1.0)).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.data, vec![15.0, -5.0]);
    }

    #[test]
    fn float64_and_int32_decode() {
        let dir = tmp();
        let p = dir.path().join("f64.nii");
        let payload: Vec<u8> = [1.5f64, -2.25].iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&p, handmade(DT_FLOAT64, false, &payload, 0.0, 0.0)).unwrap();
        assert_eq!(read_volume(&p).unwrap().data, vec![1.5, -2.25]);

        let p = dir.path().join("i32.nii");
        let payload: Vec<u8> = [2i32, 1].iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&p, handmade(DT_INT32, false, &payload, 0.0, 0.0)).unwrap();
        assert_eq!(read_labels(&p).unwrap().data, vec![2, 1]);
    }

    #[test]
    fn malformed_inputs() {
        let dir = tmp();
        let p = dir.path().join("bad.nii");
        let mut bytes = handmade(DT_FLOAT32, false, &[0; 8], 1.0, 0.0);
        bytes[344] = b'x';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_nifti(&p), Err(Error::Nifti(_))));

        let mut bytes = handmade(DT_FLOAT32, false, &[0; 8], 1.0, 0.0);
        bytes[70..72].copy_from_slice(&32i16.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_nifti(&p), Err(Error::UnsupportedDatatype(32))));

        // payload shorter than dims require
        let bytes = handmade(DT_FLOAT32, false, &[0; 4], 1.0, 0.0);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_nifti(&p), Err(Error::Nifti(_))));

        assert!(matches!(
            read_nifti(dir.path().join("missing.nii")),
            Err(Error::Io { .. })
        ));
    }
}
