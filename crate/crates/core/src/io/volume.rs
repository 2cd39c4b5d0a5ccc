//! XVOL binary volume container and labeled-atlas reader/writer.
//!
//! Layout: 8-byte magic `XVOL0001`, `u32 dims[3]`, `f32 voxel_size_mm[3]`,
//! `u8 dtype` (0 = f32, 1 = i32), then the raw little-endian payload.
//! Atlases store their label table in a `<stem>.labels` sidecar with one
//! `label,name` line per region.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::collections::BTreeMap;

use super::{IoError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"XVOL0001";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    I32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::I32),
            other => Err(IoError::InvalidHeader(format!("unknown dtype tag {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f32; 3],
    pub dtype: DType,
}

impl VolumeHeader {
    /// 1 mm isotropic f32 header.
    pub fn isotropic(dims: [usize; 3]) -> Self {
        VolumeHeader {
            dims,
            voxel_size_mm: [1.0, 1.0, 1.0],
            dtype: DType::F32,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(IoError::InvalidHeader(format!(
                "dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.voxel_size_mm.iter().any(|&v| !(v > 0.0)) {
            return Err(IoError::InvalidHeader(format!(
                "voxel sizes must be > 0, got {:?}",
                self.voxel_size_mm
            )));
        }
        let dims32 = [self.dims[0] as u32, self.dims[1] as u32, self.dims[2] as u32];
        (self.dims[0] as u64)
            .checked_mul(self.dims[1] as u64)
            .and_then(|p| p.checked_mul(self.dims[2] as u64))
            .filter(|&p| p <= u32::MAX as u64)
            .ok_or(IoError::DimOverflow { dims: dims32 })?;
        Ok(())
    }
}

/// Dense 3-D scalar field: the unit of imaging data.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(header: VolumeHeader, voxels: Vec<f32>) -> Result<Self> {
        header.validate()?;
        if voxels.len() != header.num_voxels() {
            return Err(IoError::Invalid(format!(
                "volume payload has {} voxels, header implies {}",
                voxels.len(),
                header.num_voxels()
            )));
        }
        Ok(Volume { header, voxels })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            header: VolumeHeader::isotropic(dims),
            voxels: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    /// `[1, D, H, W]` network-input tensor view of the voxel grid.
    pub fn to_tensor(&self) -> Tensor {
        let d = self.header.dims;
        Tensor::new(vec![1, d[0], d[1], d[2]], self.voxels.clone())
            .expect("volume invariant guarantees matching length")
    }

    pub fn from_flat(header: VolumeHeader, values: Vec<f32>) -> Result<Self> {
        Volume::new(header, values)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.header.dims[1] + j) * self.header.dims[2] + k
    }
}

/// Labeled parcellation sharing the volume grid; label 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    pub header: VolumeHeader,
    pub labels: Vec<i32>,
    pub label_table: BTreeMap<i32, String>,
}

impl Atlas {
    pub fn new(
        header: VolumeHeader,
        labels: Vec<i32>,
        label_table: BTreeMap<i32, String>,
    ) -> Result<Self> {
        header.validate()?;
        if labels.len() != header.num_voxels() {
            return Err(IoError::Invalid(format!(
                "atlas payload has {} labels, header implies {}",
                labels.len(),
                header.num_voxels()
            )));
        }
        for &l in &labels {
            if l != 0 && !label_table.contains_key(&l) {
                return Err(IoError::MissingLabel { label: l });
            }
        }
        for name in label_table.values() {
            if name.contains(',') || name.contains('\n') {
                return Err(IoError::Invalid(format!(
                    "region name {name:?} must not contain commas or newlines"
                )));
            }
        }
        Ok(Atlas {
            header,
            labels,
            label_table,
        })
    }
}

fn write_header<W: Write>(w: &mut W, header: &VolumeHeader) -> Result<()> {
    header.validate()?;
    w.write_all(MAGIC)?;
    for d in header.dims {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for v in header.voxel_size_mm {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.write_u8(header.dtype.tag())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<VolumeHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::BadMagic {
            path: path.display().to_string(),
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
        });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let mut voxel = [0f32; 3];
    for v in &mut voxel {
        *v = r.read_f32::<LittleEndian>()?;
    }
    let dtype = DType::from_tag(r.read_u8()?)?;
    let header = VolumeHeader {
        dims,
        voxel_size_mm: voxel,
        dtype,
    };
    header.validate()?;
    Ok(header)
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    let mut header = volume.header.clone();
    header.dtype = DType::F32;
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, &header)?;
    for v in &volume.voxels {
        w.write_f32::<LittleEndian>(*v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, path)?;
    if header.dtype != DType::F32 {
        return Err(IoError::DTypeMismatch {
            path: path.display().to_string(),
            expected: "f32",
            found: format!("{:?}", header.dtype),
        });
    }
    let expected = header.num_voxels();
    let mut voxels = Vec::with_capacity(expected);
    for _ in 0..expected {
        match r.read_f32::<LittleEndian>() {
            Ok(v) => voxels.push(v),
            Err(_) => {
                return Err(IoError::Truncated {
                    path: path.display().to_string(),
                    expected,
                    actual: voxels.len(),
                })
            }
        }
    }
    Volume::new(header, voxels)
}

fn labels_sidecar(path: &Path) -> std::path::PathBuf {
    path.with_extension("labels")
}

pub fn write_atlas(atlas: &Atlas, path: &Path) -> Result<()> {
    let mut header = atlas.header.clone();
    header.dtype = DType::I32;
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, &header)?;
    for l in &atlas.labels {
        w.write_i32::<LittleEndian>(*l)?;
    }
    w.flush()?;
    let mut t = BufWriter::new(File::create(labels_sidecar(path))?);
    for (label, name) in &atlas.label_table {
        writeln!(t, "{label},{name}")?;
    }
    t.flush()?;
    Ok(())
}

pub fn read_atlas(path: &Path) -> Result<Atlas> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, path)?;
    if header.dtype != DType::I32 {
        return Err(IoError::DTypeMismatch {
            path: path.display().to_string(),
            expected: "i32",
            found: format!("{:?}", header.dtype),
        });
    }
    let expected = header.num_voxels();
    let mut labels = Vec::with_capacity(expected);
    for _ in 0..expected {
        match r.read_i32::<LittleEndian>() {
            Ok(v) => labels.push(v),
            Err(_) => {
                return Err(IoError::Truncated {
                    path: path.display().to_string(),
                    expected,
                    actual: labels.len(),
                })
            }
        }
    }
    let sidecar = labels_sidecar(path);
    let text = std::fs::read_to_string(&sidecar)?;
    let mut table = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, name) = line.split_once(',').ok_or_else(|| IoError::ManifestParse {
            path: sidecar.display().to_string(),
            line: lineno + 1,
            message: "expected `label,name`".into(),
        })?;
        let label: i32 = label.trim().parse().map_err(|_| IoError::ManifestParse {
            path: sidecar.display().to_string(),
            line: lineno + 1,
            message: format!("bad label {label:?}"),
        })?;
        table.insert(label, name.trim().to_string());
    }
    Atlas::new(header, labels, table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_header_voxel_count() {
        let header = VolumeHeader::isotropic([157, 189, 156]);
        assert_eq!(header.num_voxels(), 4_628_988);
        assert!(header.validate().is_ok());
    }

    #[test]
    fn roundtrip_zero_volume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.xvol");
        let v = Volume::zeros([2, 2, 2]);
        write_volume(&v, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.xvol");
        let v = Volume::new(VolumeHeader::isotropic([3, 3, 3]), vec![1.0; 27]).unwrap();
        write_volume(&v, &path).unwrap();
        // Drop a float from the payload: 27 declared, 26 present.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match read_volume(&path) {
            Err(IoError::Truncated {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 27);
                assert_eq!(actual, 26);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn magic_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.xvol");
        std::fs::write(&path, b"NOTAVOL!restoffile").unwrap();
        assert!(matches!(read_volume(&path), Err(IoError::BadMagic { .. })));
    }

    #[test]
    fn atlas_roundtrip_with_label_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.xvol");
        let mut table = BTreeMap::new();
        table.insert(1, "left".to_string());
        table.insert(2, "right".to_string());
        let labels = vec![0, 1, 1, 2, 2, 0, 1, 2];
        let atlas = Atlas::new(VolumeHeader::isotropic([2, 2, 2]), labels, table).unwrap();
        write_atlas(&atlas, &path).unwrap();
        let back = read_atlas(&path).unwrap();
        assert_eq!(back.labels, atlas.labels);
        assert_eq!(back.label_table, atlas.label_table);
        assert_eq!(back.header.dtype, DType::I32);
    }

    #[test]
    fn atlas_rejects_unlisted_label() {
        let atlas = Atlas::new(
            VolumeHeader::isotropic([1, 1, 2]),
            vec![0, 7],
            BTreeMap::new(),
        );
        assert!(matches!(atlas, Err(IoError::MissingLabel { label: 7 })));
    }
}
