//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only what the pipeline needs: 3-D volumes with 1, 3 or 6 frames along the
//! fourth dimension, isotropic spacing, and the common integer and float
//! datatypes. Orientation is read (and warned about when not axis-aligned)
//! but never applied. The exact header written is described in
//! `docs/formats.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{FieldKind, GridSpec, LabelVolume, ScalarVolume, TensorVolume, VectorField};
use crate::error::{Error, Result};
use crate::tensor::SymTensor;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// Unit code for millimetres in `xyzt_units`.
const UNITS_MM: u8 = 2;

/// What a file is expected to contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Scalar,
    Vector,
    Tensor,
    Label,
}

impl VolumeKind {
    pub fn frames(self) -> usize {
        match self {
            VolumeKind::Scalar | VolumeKind::Label => 1,
            VolumeKind::Vector => 3,
            VolumeKind::Tensor => 6,
        }
    }
}

impl std::str::FromStr for VolumeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "scalar" => Ok(VolumeKind::Scalar),
            "vector" => Ok(VolumeKind::Vector),
            "tensor" => Ok(VolumeKind::Tensor),
            "label" => Ok(VolumeKind::Label),
            other => Err(format!("unknown volume kind `{other}`")),
        }
    }
}

/// A loaded volume of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Scalar(ScalarVolume),
    Vector(VectorField),
    Tensor(TensorVolume),
    Label(LabelVolume),
}

impl AnyVolume {
    pub fn grid(&self) -> &GridSpec {
        use super::HasGrid;
        match self {
            AnyVolume::Scalar(v) => v.grid(),
            AnyVolume::Vector(v) => v.grid(),
            AnyVolume::Tensor(v) => v.grid(),
            AnyVolume::Label(v) => v.grid(),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            AnyVolume::Scalar(v) => Ok(v),
            _ => Err(Error::DimensionMismatch("expected a scalar volume".into())),
        }
    }

    pub fn into_vector(self) -> Result<VectorField> {
        match self {
            AnyVolume::Vector(v) => Ok(v),
            _ => Err(Error::DimensionMismatch("expected a vector field".into())),
        }
    }

    pub fn into_tensor(self) -> Result<TensorVolume> {
        match self {
            AnyVolume::Tensor(v) => Ok(v),
            _ => Err(Error::DimensionMismatch("expected a tensor volume".into())),
        }
    }

    pub fn into_label(self) -> Result<LabelVolume> {
        match self {
            AnyVolume::Label(v) => Ok(v),
            _ => Err(Error::DimensionMismatch("expected a label volume".into())),
        }
    }
}

/// Frame-major payload ready to be written.
pub struct Encoded {
    grid: GridSpec,
    frames: usize,
    intent_name: &'static str,
    payload: Payload,
}

enum Payload {
    Float(Vec<f32>),
    Int16(Vec<i16>),
}

/// Volumes that can be written with [`save_volume`].
pub trait NiftiVolume {
    fn encode(&self) -> Result<Encoded>;
}

fn frame_major<const C: usize>(grid: GridSpec, data: impl Fn(usize) -> [f64; C]) -> Vec<f32> {
    let n = grid.len();
    let mut out = vec![0f32; n * C];
    for idx in 0..n {
        let v = data(idx);
        for c in 0..C {
            out[c * n + idx] = v[c] as f32;
        }
    }
    out
}

impl NiftiVolume for ScalarVolume {
    fn encode(&self) -> Result<Encoded> {
        Ok(Encoded {
            grid: self.grid,
            frames: 1,
            intent_name: "scalar",
            payload: Payload::Float(self.data.iter().map(|&v| v as f32).collect()),
        })
    }
}

impl NiftiVolume for VectorField {
    fn encode(&self) -> Result<Encoded> {
        Ok(Encoded {
            grid: self.grid,
            frames: 3,
            intent_name: self.kind.name(),
            payload: Payload::Float(frame_major(self.grid, |i| self.data[i])),
        })
    }
}

impl NiftiVolume for TensorVolume {
    fn encode(&self) -> Result<Encoded> {
        Ok(Encoded {
            grid: self.grid,
            frames: 6,
            intent_name: "tensor",
            payload: Payload::Float(frame_major(self.grid, |i| self.data[i].0)),
        })
    }
}

impl NiftiVolume for LabelVolume {
    fn encode(&self) -> Result<Encoded> {
        let data = self
            .data
            .iter()
            .map(|&l| {
                i16::try_from(l).map_err(|_| {
                    Error::InvalidParameter(format!("label {l} does not fit a 16-bit signed integer"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoded {
            grid: self.grid,
            frames: 1,
            intent_name: "label",
            payload: Payload::Int16(data),
        })
    }
}

impl NiftiVolume for AnyVolume {
    fn encode(&self) -> Result<Encoded> {
        match self {
            AnyVolume::Scalar(v) => v.encode(),
            AnyVolume::Vector(v) => v.encode(),
            AnyVolume::Tensor(v) => v.encode(),
            AnyVolume::Label(v) => v.encode(),
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn header_bytes(enc: &Encoded) -> [u8; VOX_OFFSET] {
    type E = LittleEndian;
    let mut h = [0u8; VOX_OFFSET];
    let g = &enc.grid;
    let (datatype, bitpix) = match enc.payload {
        Payload::Float(_) => (DT_FLOAT32, 32),
        Payload::Int16(_) => (DT_INT16, 16),
    };
    let s = g.spacing_mm as f32;

    E::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let ndim: i16 = if enc.frames > 1 { 4 } else { 3 };
    let dims = [ndim, g.nx as i16, g.ny as i16, g.nz as i16, enc.frames as i16, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        E::write_i16(&mut h[40 + 2 * i..42 + 2 * i], *d);
    }
    E::write_i16(&mut h[70..72], datatype);
    E::write_i16(&mut h[72..74], bitpix);
    let pixdim = [1.0f32, s, s, s, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        E::write_f32(&mut h[76 + 4 * i..80 + 4 * i], *p);
    }
    E::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    E::write_f32(&mut h[112..116], 1.0);
    E::write_f32(&mut h[116..120], 0.0);
    h[123] = UNITS_MM;
    let descrip = b"dtreg";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    // qform: identity rotation; sform: spacing on the diagonal, zero offset.
    E::write_i16(&mut h[252..254], 1);
    E::write_i16(&mut h[254..256], 1);
    let srows = [[s, 0.0, 0.0, 0.0], [0.0, s, 0.0, 0.0], [0.0, 0.0, s, 0.0]];
    for (r, row) in srows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let off = 280 + 16 * r + 4 * c;
            E::write_f32(&mut h[off..off + 4], *v);
        }
    }
    let name = enc.intent_name.as_bytes();
    h[328..328 + name.len().min(15)].copy_from_slice(&name[..name.len().min(15)]);
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

/// Writes a volume as NIfTI-1; gzip-compressed when the path ends in `.gz`.
///
/// Real-valued volumes are stored as float32 and labels as int16.
pub fn save_volume(vol: &impl NiftiVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let enc = vol.encode()?;
    let mut bytes = Vec::with_capacity(VOX_OFFSET + enc.grid.len() * enc.frames * 4);
    bytes.extend_from_slice(&header_bytes(&enc));
    match &enc.payload {
        Payload::Float(v) => {
            let start = bytes.len();
            bytes.resize(start + v.len() * 4, 0);
            LittleEndian::write_f32_into(v, &mut bytes[start..]);
        }
        Payload::Int16(v) => {
            let start = bytes.len();
            bytes.resize(start + v.len() * 2, 0);
            LittleEndian::write_i16_into(v, &mut bytes[start..]);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let write = |w: &mut dyn Write| w.write_all(&bytes).and_then(|_| w.flush());
    if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        write(&mut enc).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        write(&mut BufWriter::new(file)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut raw)
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

struct Header {
    dims: [usize; 3],
    frames: usize,
    datatype: i16,
    pixdim: [f32; 3],
    vox_offset: usize,
    slope: f32,
    inter: f32,
    intent_name: String,
    big_endian: bool,
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!(
            "file has {} bytes, header needs {HEADER_SIZE}",
            b.len()
        )));
    }
    let big_endian = if LittleEndian::read_i32(&b[0..4]) == HEADER_SIZE as i32 {
        false
    } else if BigEndian::read_i32(&b[0..4]) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(Error::MalformedHeader("sizeof_hdr is not 348".into()));
    };
    if &b[344..347] != b"n+1" {
        return Err(Error::MalformedHeader(
            "magic is not `n+1` (only single-file NIfTI-1 is supported)".into(),
        ));
    }
    let i16_at = |o: usize| {
        if big_endian {
            BigEndian::read_i16(&b[o..o + 2])
        } else {
            LittleEndian::read_i16(&b[o..o + 2])
        }
    };
    let f32_at = |o: usize| {
        if big_endian {
            BigEndian::read_f32(&b[o..o + 4])
        } else {
            LittleEndian::read_f32(&b[o..o + 4])
        }
    };
    let dim: Vec<i16> = (0..8).map(|i| i16_at(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) {
        return Err(Error::MalformedHeader(format!("dim[0] = {ndim}")));
    }
    let mut extent = [1usize; 7];
    for a in 0..ndim as usize {
        let d = dim[a + 1];
        if d < 1 {
            return Err(Error::MalformedHeader(format!("dim[{}] = {d}", a + 1)));
        }
        extent[a] = d as usize;
    }
    // 4th and 5th dimensions both count as frames (4-D frame stacks and 5-D vector intents).
    if extent[5..].iter().any(|&d| d != 1) || (extent[3] > 1 && extent[4] > 1) {
        return Err(Error::DimensionMismatch(format!(
            "unsupported dimensions {:?}",
            &dim[1..=ndim as usize]
        )));
    }
    let frames = extent[3] * extent[4];
    let pixdim = [f32_at(80), f32_at(84), f32_at(88)];
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::MalformedHeader(format!("vox_offset = {vox_offset}")));
    }

    check_orientation(&i16_at, &f32_at);

    let name_bytes = &b[328..344];
    let end = name_bytes.iter().position(|&c| c == 0).unwrap_or(16);
    Ok(Header {
        dims: [extent[0], extent[1], extent[2]],
        frames,
        datatype: i16_at(70),
        pixdim,
        vox_offset: vox_offset as usize,
        slope: f32_at(112),
        inter: f32_at(116),
        intent_name: String::from_utf8_lossy(&name_bytes[..end]).into_owned(),
        big_endian,
    })
}

fn check_orientation(
    i16_at: &dyn Fn(usize) -> i16,
    f32_at: &dyn Fn(usize) -> f32,
) {
    let sform = i16_at(254);
    let qform = i16_at(252);
    let axis_aligned = |m: [[f64; 3]; 3]| {
        m.iter().all(|row| {
            let big = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            row.iter().filter(|v| v.abs() > 1e-6 * big.max(1e-12)).count() == 1
        })
    };
    let aligned = if sform > 0 {
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(280 + 16 * r + 4 * c) as f64;
            }
        }
        axis_aligned(m)
    } else if qform > 0 {
        let (qb, qc, qd) = (f32_at(256) as f64, f32_at(260) as f64, f32_at(264) as f64);
        let qa = (1.0 - (qb * qb + qc * qc + qd * qd)).max(0.0).sqrt();
        let m = [
            [
                qa * qa + qb * qb - qc * qc - qd * qd,
                2.0 * (qb * qc - qa * qd),
                2.0 * (qb * qd + qa * qc),
            ],
            [
                2.0 * (qb * qc + qa * qd),
                qa * qa + qc * qc - qb * qb - qd * qd,
                2.0 * (qc * qd - qa * qb),
            ],
            [
                2.0 * (qb * qd - qa * qc),
                2.0 * (qc * qd + qa * qb),
                qa * qa + qd * qd - qc * qc - qb * qb,
            ],
        ];
        axis_aligned(m)
    } else {
        true
    };
    if !aligned {
        log::warn!("NIfTI orientation is not axis-aligned; it is ignored and data are used on the voxel grid");
    }
}

fn decode_samples(h: &Header, payload: &[u8], count: usize) -> Result<Vec<f64>> {
    let width = match h.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::MalformedHeader(format!(
                "unsupported datatype code {other}"
            )))
        }
    };
    if payload.len() < count * width {
        return Err(Error::MalformedHeader(format!(
            "data section has {} bytes, expected {}",
            payload.len(),
            count * width
        )));
    }
    let be = h.big_endian;
    let mut out = Vec::with_capacity(count);
    for s in payload[..count * width].chunks_exact(width) {
        let v = match (h.datatype, be) {
            (DT_UINT8, _) => s[0] as f64,
            (DT_INT8, _) => s[0] as i8 as f64,
            (DT_INT16, false) => LittleEndian::read_i16(s) as f64,
            (DT_INT16, true) => BigEndian::read_i16(s) as f64,
            (DT_UINT16, false) => LittleEndian::read_u16(s) as f64,
            (DT_UINT16, true) => BigEndian::read_u16(s) as f64,
            (DT_INT32, false) => LittleEndian::read_i32(s) as f64,
            (DT_INT32, true) => BigEndian::read_i32(s) as f64,
            (DT_UINT32, false) => LittleEndian::read_u32(s) as f64,
            (DT_UINT32, true) => BigEndian::read_u32(s) as f64,
            (DT_FLOAT32, false) => LittleEndian::read_f32(s) as f64,
            (DT_FLOAT32, true) => BigEndian::read_f32(s) as f64,
            (DT_FLOAT64, false) => LittleEndian::read_f64(s),
            (DT_FLOAT64, true) => BigEndian::read_f64(s),
            _ => unreachable!(),
        };
        out.push(v);
    }
    // scl_slope == 0 means "no scaling" per the NIfTI-1 standard.
    if h.slope != 0.0 && (h.slope != 1.0 || h.inter != 0.0) {
        let (a, b) = (h.slope as f64, h.inter as f64);
        out.iter_mut().for_each(|v| *v = a * *v + b);
    }
    Ok(out)
}

/// Reads a NIfTI-1 file (optionally gzip-compressed) as the requested kind.
///
/// Vector fields are tagged from the stored intent name (`velocity`), and
/// default to displacement otherwise.
pub fn load_volume(path: impl AsRef<Path>, kind: VolumeKind) -> Result<AnyVolume> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let h = parse_header(&bytes)?;
    if h.frames != kind.frames() {
        return Err(Error::DimensionMismatch(format!(
            "{} has {} frame(s), a {:?} volume needs {}",
            path.display(),
            h.frames,
            kind,
            kind.frames()
        )));
    }
    let [sx, sy, sz] = h.pixdim;
    if !(sx > 0.0 && sy > 0.0 && sz > 0.0) {
        return Err(Error::MalformedHeader(format!(
            "non-positive pixdim ({sx}, {sy}, {sz})"
        )));
    }
    let tol = 1e-5 * sx.abs();
    if (sx - sy).abs() > tol || (sx - sz).abs() > tol {
        return Err(Error::Anisotropic(sx as f64, sy as f64, sz as f64));
    }
    let grid = GridSpec::new(h.dims[0], h.dims[1], h.dims[2], sx as f64)?;
    let n = grid.len();
    if h.vox_offset > bytes.len() {
        return Err(Error::MalformedHeader("vox_offset beyond end of file".into()));
    }
    let samples = decode_samples(&h, &bytes[h.vox_offset..], n * h.frames)?;
    if let Some(bad) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(bad));
    }
    let frame = |c: usize, idx: usize| samples[c * n + idx];
    Ok(match kind {
        VolumeKind::Scalar => AnyVolume::Scalar(ScalarVolume::new(grid, samples)?),
        VolumeKind::Vector => {
            let field_kind = if h.intent_name == FieldKind::Velocity.name() {
                FieldKind::Velocity
            } else {
                FieldKind::Displacement
            };
            let data = (0..n)
                .map(|i| [frame(0, i), frame(1, i), frame(2, i)])
                .collect();
            AnyVolume::Vector(VectorField::new(grid, field_kind, data)?)
        }
        VolumeKind::Tensor => {
            let data = (0..n)
                .map(|i| SymTensor(std::array::from_fn(|c| frame(c, i))))
                .collect();
            AnyVolume::Tensor(TensorVolume::new(grid, data)?)
        }
        VolumeKind::Label => {
            let data = samples
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
                        Err(Error::DimensionMismatch(format!(
                            "label volume holds non-integral or negative value {v} at index {i}"
                        )))
                    } else {
                        Ok(v as u16)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            AnyVolume::Label(LabelVolume::new(grid, data)?)
        }
    })
}

pub fn load_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    load_volume(path, VolumeKind::Scalar)?.into_scalar()
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorVolume> {
    load_volume(path, VolumeKind::Tensor)?.into_tensor()
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    load_volume(path, VolumeKind::Label)?.into_label()
}

/// Loads a vector field and checks it carries the expected tag.
pub fn load_field(path: impl AsRef<Path>, kind: FieldKind) -> Result<VectorField> {
    let field = load_volume(path, VolumeKind::Vector)?.into_vector()?;
    field.expect_kind(kind)?;
    Ok(field)
}
