//! Array containers shared by every stage of the pipeline, and their on-disk
//! formats.
//!
//! Volumes are stored x-fastest: the linear index of voxel `(ix, iy, iz)` is
//! `ix + nx * (iy + ny * iz)`. Projection sets are stored u-fastest, then v,
//! then module, then angle, which is also the row order of the system matrix.
//!
//! Every array is written as a pair of files: a JSON header
//! (`<stem>.vol.json`, `<stem>.proj.json`, `<stem>.mask.json`) and a raw
//! little-endian payload next to it (`.vol.f32`, `.proj.f32`, `.mask.u8`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts of a 3D grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims3 {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims3 { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.nx * (iy + self.ny * iz)
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let ix = idx % self.nx;
        let iy = (idx / self.nx) % self.ny;
        let iz = idx / (self.nx * self.ny);
        (ix, iy, iz)
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }
}

impl std::fmt::Display for Dims3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// A 3D scalar image on a regular voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: Dims3,
    voxel_size: [f64; 3],
    values: Vec<f32>,
}

impl VolumeGrid {
    pub fn new(dims: Dims3, voxel_size: [f64; 3], values: Vec<f32>) -> Result<Self> {
        if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 {
            return Err(Error::Shape(format!("volume dims must be >= 1, got {dims}")));
        }
        if values.len() != dims.len() {
            return Err(Error::Shape(format!(
                "volume {dims} needs {} values, got {}",
                dims.len(),
                values.len()
            )));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!("voxel size must be positive, got {voxel_size:?}")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite volume value at index {i}")));
        }
        Ok(VolumeGrid {
            dims,
            voxel_size,
            values,
        })
    }

    pub fn zeros(dims: Dims3, voxel_size: [f64; 3]) -> Self {
        VolumeGrid {
            dims,
            voxel_size,
            values: vec![0.0; dims.len()],
        }
    }

    pub fn filled(dims: Dims3, voxel_size: [f64; 3], value: f32) -> Self {
        VolumeGrid {
            dims,
            voxel_size,
            values: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f32 {
        self.values[self.dims.index(ix, iy, iz)]
    }

    /// The `iz`-th axial slice, x-fastest.
    pub fn slice_z(&self, iz: usize) -> &[f32] {
        let n = self.dims.slice_len();
        &self.values[iz * n..(iz + 1) * n]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Same grid, new values.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        VolumeGrid::new(self.dims, self.voxel_size, values)
    }

    pub fn scaled(&self, factor: f32) -> Self {
        VolumeGrid {
            dims: self.dims,
            voxel_size: self.voxel_size,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }
}

/// Detector dimensions of a projection set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjDims {
    pub n_angles: usize,
    pub n_modules: usize,
    pub nu: usize,
    pub nv: usize,
}

impl ProjDims {
    pub const fn len(&self) -> usize {
        self.n_angles * self.n_modules * self.nu * self.nv
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn bins_per_module(&self) -> usize {
        self.nu * self.nv
    }

    /// Number of 2D module readings (angles × modules).
    pub const fn n_readings(&self) -> usize {
        self.n_angles * self.n_modules
    }

    #[inline]
    pub const fn index(&self, angle: usize, module: usize, iv: usize, iu: usize) -> usize {
        iu + self.nu * (iv + self.nv * (module + self.n_modules * angle))
    }
}

/// Stacked 2D detector readings for a set of angular positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    dims: ProjDims,
    angle_ids: Vec<String>,
    values: Vec<f32>,
}

impl ProjectionSet {
    pub fn new(dims: ProjDims, angle_ids: Vec<String>, values: Vec<f32>) -> Result<Self> {
        if dims.n_angles == 0 || dims.n_modules == 0 || dims.nu == 0 || dims.nv == 0 {
            return Err(Error::Shape(format!("projection dims must be >= 1, got {dims:?}")));
        }
        if angle_ids.len() != dims.n_angles {
            return Err(Error::Shape(format!(
                "{} angle ids for {} angles",
                angle_ids.len(),
                dims.n_angles
            )));
        }
        if values.len() != dims.len() {
            return Err(Error::Shape(format!(
                "projection set {dims:?} needs {} values, got {}",
                dims.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numerical(format!(
                "projection value at index {i} is negative or non-finite"
            )));
        }
        Ok(ProjectionSet {
            dims,
            angle_ids,
            values,
        })
    }

    pub fn zeros(dims: ProjDims, angle_ids: Vec<String>) -> Result<Self> {
        ProjectionSet::new(dims, angle_ids, vec![0.0; dims.len()])
    }

    pub fn dims(&self) -> ProjDims {
        self.dims
    }

    pub fn angle_ids(&self) -> &[String] {
        &self.angle_ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// One module's `nv × nu` reading, u-fastest.
    pub fn module(&self, angle: usize, module: usize) -> &[f32] {
        let n = self.dims.bins_per_module();
        let start = (angle * self.dims.n_modules + module) * n;
        &self.values[start..start + n]
    }

    /// Sub-set containing only the given angle.
    pub fn angle(&self, angle: usize) -> Result<ProjectionSet> {
        if angle >= self.dims.n_angles {
            return Err(Error::Shape(format!("angle {angle} out of range")));
        }
        let n = self.dims.n_modules * self.dims.bins_per_module();
        let dims = ProjDims {
            n_angles: 1,
            ..self.dims
        };
        ProjectionSet::new(
            dims,
            vec![self.angle_ids[angle].clone()],
            self.values[angle * n..(angle + 1) * n].to_vec(),
        )
    }

    /// Concatenate sets acquired with the same module layout, angle-major.
    pub fn stack(sets: &[ProjectionSet]) -> Result<ProjectionSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero projection sets".into()))?;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut n_angles = 0;
        for s in sets {
            let d = s.dims;
            if d.n_modules != first.dims.n_modules || d.nu != first.dims.nu || d.nv != first.dims.nv {
                return Err(Error::Shape("stacked projection sets differ in module layout".into()));
            }
            n_angles += d.n_angles;
            ids.extend(s.angle_ids.iter().cloned());
            values.extend_from_slice(&s.values);
        }
        ProjectionSet::new(
            ProjDims {
                n_angles,
                ..first.dims
            },
            ids,
            values,
        )
    }

    pub fn total(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }
}

/// Boolean voxel masks aligned with a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMasks {
    pub dims: Dims3,
    pub myocardium: Vec<bool>,
    pub blood_pool: Vec<bool>,
    pub defect: Vec<bool>,
}

impl LabeledMasks {
    pub fn empty(dims: Dims3) -> Self {
        let n = dims.len();
        LabeledMasks {
            dims,
            myocardium: vec![false; n],
            blood_pool: vec![false; n],
            defect: vec![false; n],
        }
    }

    pub fn has_defect(&self) -> bool {
        self.defect.iter().any(|&d| d)
    }

    pub fn count(mask: &[bool]) -> usize {
        mask.iter().filter(|&&m| m).count()
    }

    /// Checks `myocardium ∩ blood_pool = ∅` and `defect ⊆ myocardium`.
    pub fn validate(&self) -> Result<()> {
        let n = self.dims.len();
        if self.myocardium.len() != n || self.blood_pool.len() != n || self.defect.len() != n {
            return Err(Error::Shape(format!("mask lengths do not match {}", self.dims)));
        }
        for i in 0..n {
            if self.myocardium[i] && self.blood_pool[i] {
                return Err(Error::Dataset(format!("voxel {i} is both myocardium and blood pool")));
            }
            if self.defect[i] && !self.myocardium[i] {
                return Err(Error::Dataset(format!("defect voxel {i} lies outside the myocardium")));
            }
        }
        Ok(())
    }
}

const VOLUME_FORMAT: &str = "tipnet-volume";
const PROJECTION_FORMAT: &str = "tipnet-projections";
const MASK_FORMAT: &str = "tipnet-masks";
const F32_LE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    format: String,
    version: u32,
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
    dtype: String,
    layout: String,
    payload: String,
    payload_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectionHeader {
    format: String,
    version: u32,
    n_angles: usize,
    n_modules: usize,
    nu: usize,
    nv: usize,
    angle_ids: Vec<String>,
    dtype: String,
    layout: String,
    payload: String,
    payload_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskHeader {
    format: String,
    version: u32,
    dims: [usize; 3],
    bits: Vec<String>,
    payload: String,
    payload_bytes: usize,
}

/// Resolve `(header, payload)` paths from either a stem or a full header path.
pub(crate) fn pair_paths(path: &Path, kind: &str, payload_ext: &str) -> Result<(PathBuf, PathBuf)> {
    let s = path.to_str().unwrap_or_default();
    if s.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty path"),
        ));
    }
    let header_suffix = format!(".{kind}.json");
    let stem = s.strip_suffix(&header_suffix).unwrap_or(s);
    Ok((
        PathBuf::from(format!("{stem}{header_suffix}")),
        PathBuf::from(format!("{stem}.{kind}.{payload_ext}")),
    ))
}

pub(crate) fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub(crate) fn write_f32_payload(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32_payload(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            "payload",
            format!(
                "{} holds {} bytes, header declares {} values ({} bytes)",
                path.display(),
                bytes.len(),
                expected,
                expected * 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub(crate) fn check_tag(field: &str, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::format(field, format!("expected {expected:?}, found {found:?}")));
    }
    Ok(())
}

pub fn write_volume(path: impl AsRef<Path>, v: &VolumeGrid) -> Result<()> {
    let (header_path, payload_path) = pair_paths(path.as_ref(), "vol", "f32")?;
    let d = v.dims;
    let header = VolumeHeader {
        format: VOLUME_FORMAT.into(),
        version: 1,
        dims: [d.nx, d.ny, d.nz],
        voxel_size_mm: v.voxel_size,
        dtype: F32_LE.into(),
        layout: "x-fastest".into(),
        payload: file_name(&payload_path),
        payload_bytes: d.len() * 4,
    };
    write_f32_payload(&payload_path, &v.values)?;
    write_json(&header_path, &header)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeGrid> {
    let (header_path, payload_path) = pair_paths(path.as_ref(), "vol", "f32")?;
    let h: VolumeHeader = read_json(&header_path)?;
    check_tag("format", &h.format, VOLUME_FORMAT)?;
    check_tag("dtype", &h.dtype, F32_LE)?;
    let dims = Dims3::new(h.dims[0], h.dims[1], h.dims[2]);
    if dims.is_empty() {
        return Err(Error::format("dims", format!("zero-sized dims {dims}")));
    }
    if h.payload_bytes != dims.len() * 4 {
        return Err(Error::format(
            "payload_bytes",
            format!("{} does not match dims {dims} ({} bytes)", h.payload_bytes, dims.len() * 4),
        ));
    }
    let values = read_f32_payload(&payload_path, dims.len())?;
    VolumeGrid::new(dims, h.voxel_size_mm, values)
}

pub fn write_projections(path: impl AsRef<Path>, p: &ProjectionSet) -> Result<()> {
    let (header_path, payload_path) = pair_paths(path.as_ref(), "proj", "f32")?;
    let d = p.dims;
    let header = ProjectionHeader {
        format: PROJECTION_FORMAT.into(),
        version: 1,
        n_angles: d.n_angles,
        n_modules: d.n_modules,
        nu: d.nu,
        nv: d.nv,
        angle_ids: p.angle_ids.clone(),
        dtype: F32_LE.into(),
        layout: "u-fastest,v,module,angle".into(),
        payload: file_name(&payload_path),
        payload_bytes: d.len() * 4,
    };
    write_f32_payload(&payload_path, &p.values)?;
    write_json(&header_path, &header)
}

pub fn read_projections(path: impl AsRef<Path>) -> Result<ProjectionSet> {
    let (header_path, payload_path) = pair_paths(path.as_ref(), "proj", "f32")?;
    let h: ProjectionHeader = read_json(&header_path)?;
    check_tag("format", &h.format, PROJECTION_FORMAT)?;
    check_tag("dtype", &h.dtype, F32_LE)?;
    let dims = ProjDims {
        n_angles: h.n_angles,
        n_modules: h.n_modules,
        nu: h.nu,
        nv: h.nv,
    };
    if h.angle_ids.len() != dims.n_angles {
        return Err(Error::format(
            "angle_ids",
            format!("{} ids for n_angles = {}", h.angle_ids.len(), dims.n_angles),
        ));
    }
    if h.payload_bytes != dims.len() * 4 {
        return Err(Error::format(
            "payload_bytes",
            format!("{} does not match dims ({} bytes)", h.payload_bytes, dims.len() * 4),
        ));
    }
    let values = read_f32_payload(&payload_path, dims.len())?;
    ProjectionSet::new(dims, h.angle_ids, values)
}

const MASK_BITS: [&str; 3] = ["myocardium", "blood_pool", "defect"];

pub fn write_masks(path: impl AsRef<Path>, m: &LabeledMasks) -> Result<()> {
    let (header_path, payload_path) = pair_paths(path.as_ref(), "mask", "u8")?;
    let d = m.dims;
    let payload: Vec<u8> = (0..d.len())
        .map(|i| m.myocardium[i] as u8 | (m.blood_pool[i] as u8) << 1 | (m.defect[i] as u8) << 2)
        .collect();
    let header = MaskHeader {
        format: MASK_FORMAT.into(),
        version: 1,
        dims: [d.nx, d.ny, d.nz],
        bits: MASK_BITS.iter().map(|s| s.to_string()).collect(),
        payload: file_name(&payload_path),
        payload_bytes: payload.len(),
    };
    fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))?;
    write_json(&header_path, &header)
}

pub fn read_masks(path: impl AsRef<Path>) -> Result<LabeledMasks> {
    let (header_path, payload_path) = pair_paths(path.as_ref(), "mask", "u8")?;
    let h: MaskHeader = read_json(&header_path)?;
    check_tag("format", &h.format, MASK_FORMAT)?;
    let dims = Dims3::new(h.dims[0], h.dims[1], h.dims[2]);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if bytes.len() != dims.len() || h.payload_bytes != dims.len() {
        return Err(Error::format(
            "payload",
            format!("mask payload has {} bytes for dims {dims}", bytes.len()),
        ));
    }
    let masks = LabeledMasks {
        dims,
        myocardium: bytes.iter().map(|b| b & 1 != 0).collect(),
        blood_pool: bytes.iter().map(|b| b & 2 != 0).collect(),
        defect: bytes.iter().map(|b| b & 4 != 0).collect(),
    };
    masks.validate()?;
    Ok(masks)
}
