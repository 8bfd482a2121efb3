//! Stationary multi-pinhole scanner geometry and the sparse system matrix.
//!
//! Each detector module is an ideal pinhole camera: a flat `nu × nv` bin array
//! sitting `focal_length` behind an aperture. A bin sees the volume along the
//! line through its centre and the aperture. Matrix weights are the
//! intersection lengths of those lines with the voxels they cross, found by
//! incremental voxel traversal, times an inverse-square factor
//! `(aperture_distance / r)^2` where `r` is the aperture-to-segment distance.
//! Each bin is sampled by `rays_per_bin_axis²` sub-rays whose weights are
//! averaged.
//!
//! Multi-angle acquisitions rigidly move the whole module set
//! ([`apply_angle`]) and stack the per-angle blocks into one operator, rows
//! ordered angle-major, then module, then v, then u.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dims3, ProjDims, ProjectionSet, VolumeGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
    /// Rotation about the z axis by `angle` radians.
    fn rotate_z(self, angle: f64) -> Vec3 {
        let (s, c) = angle.sin_cos();
        Vec3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// A regular voxel grid placed in scanner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: Dims3,
    /// mm per voxel along x, y, z.
    pub voxel_size: [f64; 3],
    /// Position of the grid centre in mm.
    #[serde(default)]
    pub center: [f64; 3],
}

impl GridSpec {
    pub fn desk() -> Self {
        GridSpec {
            dims: Dims3::new(24, 24, 16),
            voxel_size: [4.0; 3],
            center: [0.0; 3],
        }
    }

    pub fn paper() -> Self {
        GridSpec {
            dims: Dims3::new(70, 70, 50),
            voxel_size: [4.0; 3],
            center: [0.0; 3],
        }
    }

    pub fn lower_corner(&self) -> Vec3 {
        let d = [self.dims.nx, self.dims.ny, self.dims.nz];
        Vec3::new(
            self.center[0] - 0.5 * d[0] as f64 * self.voxel_size[0],
            self.center[1] - 0.5 * d[1] as f64 * self.voxel_size[1],
            self.center[2] - 0.5 * d[2] as f64 * self.voxel_size[2],
        )
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let lo = self.lower_corner();
        Vec3::new(
            lo.x + (ix as f64 + 0.5) * self.voxel_size[0],
            lo.y + (iy as f64 + 0.5) * self.voxel_size[1],
            lo.z + (iz as f64 + 0.5) * self.voxel_size[2],
        )
    }

    fn contains(&self, p: Vec3) -> bool {
        let lo = self.lower_corner();
        let d = [self.dims.nx, self.dims.ny, self.dims.nz];
        let p = p.to_array();
        let lo = lo.to_array();
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= lo[a] + d[a] as f64 * self.voxel_size[a])
    }

    pub fn empty_volume(&self) -> VolumeGrid {
        VolumeGrid::zeros(self.dims, self.voxel_size)
    }
}

/// Parameters from which [`build_geometry`] lays out the module arc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub n_modules: usize,
    /// Azimuth of the first module, degrees about +z.
    pub arc_start_deg: f64,
    /// Azimuthal span from the first to the last module.
    pub arc_span_deg: f64,
    /// Modules alternate between elevations `-e, 0, +e` to sample axially.
    pub elevation_deg: f64,
    /// FOV centre to aperture, mm.
    pub aperture_distance: f64,
    /// Aperture to detector plane, mm.
    pub focal_length: f64,
    pub nu: usize,
    pub nv: usize,
    /// Bin pitch, mm.
    pub pitch: f64,
    pub fov_center: [f64; 3],
    pub fov_radius: f64,
    pub rays_per_bin_axis: usize,
}

impl GeometryConfig {
    pub fn desk() -> Self {
        GeometryConfig {
            n_modules: 19,
            arc_start_deg: -90.0,
            arc_span_deg: 180.0,
            elevation_deg: 20.0,
            aperture_distance: 160.0,
            focal_length: 50.0,
            nu: 16,
            nv: 16,
            pitch: 3.0,
            fov_center: [0.0; 3],
            fov_radius: 60.0,
            rays_per_bin_axis: 3,
        }
    }

    pub fn paper() -> Self {
        GeometryConfig {
            n_modules: 19,
            arc_start_deg: -90.0,
            arc_span_deg: 180.0,
            elevation_deg: 20.0,
            aperture_distance: 260.0,
            focal_length: 70.0,
            nu: 32,
            nv: 32,
            pitch: 2.5,
            fov_center: [0.0; 3],
            fov_radius: 125.0,
            rays_per_bin_axis: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_modules == 0 {
            return Err(Error::Config("n_modules must be >= 1".into()));
        }
        if self.nu == 0 || self.nv == 0 {
            return Err(Error::Config(format!("bins must be >= 1, got {}x{}", self.nu, self.nv)));
        }
        if !(self.pitch > 0.0) {
            return Err(Error::Config(format!("pitch must be positive, got {}", self.pitch)));
        }
        if !(self.focal_length > 0.0) || !(self.aperture_distance > 0.0) {
            return Err(Error::Config("focal length and aperture distance must be positive".into()));
        }
        if self.rays_per_bin_axis == 0 {
            return Err(Error::Config("rays_per_bin_axis must be >= 1".into()));
        }
        if !(self.fov_radius > 0.0) || self.fov_radius >= self.aperture_distance {
            return Err(Error::Config(format!(
                "fov_radius {} must lie in (0, aperture_distance)",
                self.fov_radius
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModule {
    pub aperture_pos: Vec3,
    pub detector_center: Vec3,
    /// Unit normal of the detector plane, pointing towards the aperture.
    pub detector_normal: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    pub nu: usize,
    pub nv: usize,
    pub pitch: f64,
}

impl DetectorModule {
    /// Position on the detector plane of fractional bin coordinate `(u, v)`,
    /// measured in bins from the detector's lower corner.
    pub fn bin_point(&self, u: f64, v: f64) -> Vec3 {
        let du = (u - 0.5 * self.nu as f64) * self.pitch;
        let dv = (v - 0.5 * self.nv as f64) * self.pitch;
        self.detector_center + self.u_axis * du + self.v_axis * dv
    }

    fn transformed(&self, f: impl Fn(Vec3) -> Vec3, r: impl Fn(Vec3) -> Vec3) -> Self {
        DetectorModule {
            aperture_pos: f(self.aperture_pos),
            detector_center: f(self.detector_center),
            detector_normal: r(self.detector_normal),
            u_axis: r(self.u_axis),
            v_axis: r(self.v_axis),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScannerGeometry {
    pub modules: Vec<DetectorModule>,
    pub fov_center: Vec3,
    pub fov_radius: f64,
    /// Distance used to normalise the inverse-square factor.
    pub reference_distance: f64,
    pub rays_per_bin_axis: usize,
}

impl ScannerGeometry {
    pub fn n_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn proj_dims(&self, n_angles: usize) -> ProjDims {
        let m = &self.modules[0];
        ProjDims {
            n_angles,
            n_modules: self.modules.len(),
            nu: m.nu,
            nv: m.nv,
        }
    }

    /// Rigidly shift the whole scanner, FOV included.
    pub fn translated(&self, offset: Vec3) -> Self {
        ScannerGeometry {
            modules: self
                .modules
                .iter()
                .map(|m| m.transformed(|p| p + offset, |d| d))
                .collect(),
            fov_center: self.fov_center + offset,
            ..self.clone()
        }
    }
}

/// Place `n_modules` pinhole cameras on an arc, each pinhole axis through the
/// FOV centre.
pub fn build_geometry(cfg: &GeometryConfig) -> Result<ScannerGeometry> {
    cfg.validate()?;
    let center = Vec3::from_array(cfg.fov_center);
    let half_view = (0.5 * cfg.nu.min(cfg.nv) as f64 * cfg.pitch / cfg.focal_length).atan();
    let fov_half = (cfg.fov_radius / cfg.aperture_distance).asin();
    if fov_half > half_view {
        return Err(Error::Config(format!(
            "modules view a {:.1} deg half-cone but the FOV sphere needs {:.1} deg",
            half_view.to_degrees(),
            fov_half.to_degrees()
        )));
    }
    let n = cfg.n_modules;
    let modules = (0..n)
        .map(|k| {
            let frac = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.5 };
            let azimuth = (cfg.arc_start_deg + frac * cfg.arc_span_deg).to_radians();
            let elevation = match k % 3 {
                0 => 0.0,
                1 => cfg.elevation_deg,
                _ => -cfg.elevation_deg,
            }
            .to_radians();
            let outward = Vec3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
            let aperture = center + outward * cfg.aperture_distance;
            let detector_center = aperture + outward * cfg.focal_length;
            let normal = outward * -1.0;
            // tangential axis; falls back to x for modules looking along z
            let z = Vec3::new(0.0, 0.0, 1.0);
            let t = z.cross(outward);
            let u_axis = if t.norm() > 1e-9 { t.normalized() } else { Vec3::new(1.0, 0.0, 0.0) };
            let v_axis = normal.cross(u_axis).normalized();
            DetectorModule {
                aperture_pos: aperture,
                detector_center,
                detector_normal: normal,
                u_axis,
                v_axis,
                nu: cfg.nu,
                nv: cfg.nv,
                pitch: cfg.pitch,
            }
        })
        .collect();
    Ok(ScannerGeometry {
        modules,
        fov_center: center,
        fov_radius: cfg.fov_radius,
        reference_distance: cfg.aperture_distance,
        rays_per_bin_axis: cfg.rays_per_bin_axis,
    })
}

/// One angular position: a rotation of the module set about the z axis
/// through the FOV centre, followed by a displacement of the FOV centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleEntry {
    pub id: String,
    pub rotation_deg: f64,
    #[serde(default)]
    pub fov_displacement: [f64; 3],
}

impl AngleEntry {
    pub fn identity(id: &str) -> Self {
        AngleEntry {
            id: id.into(),
            rotation_deg: 0.0,
            fov_displacement: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleSet {
    pub entries: Vec<AngleEntry>,
}

impl AngleSet {
    pub fn new(entries: Vec<AngleEntry>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::Config("angle set must have at least one entry".into()))?;
        if first.rotation_deg != 0.0 || first.fov_displacement != [0.0; 3] {
            return Err(Error::Config(
                "the first angle entry must be the stationary (identity) position".into(),
            ));
        }
        Ok(AngleSet { entries })
    }

    /// The stationary acquisition.
    pub fn one_angle() -> Self {
        AngleSet {
            entries: vec![AngleEntry::identity("a0")],
        }
    }

    /// Four interleaved gantry positions. With 19 modules over 180 degrees the
    /// module spacing is 10 degrees, so quarter steps fill the gaps.
    pub fn four_angle() -> Self {
        let shifts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]];
        AngleSet {
            entries: (0..4)
                .map(|i| AngleEntry {
                    id: format!("a{i}"),
                    rotation_deg: 2.5 * i as f64,
                    fov_displacement: shifts[i],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }
}

/// Rotate every module about the z axis through the FOV centre, then shift
/// the scanner by the entry's FOV displacement.
pub fn apply_angle(geom: &ScannerGeometry, entry: &AngleEntry) -> ScannerGeometry {
    let c = geom.fov_center;
    let angle = entry.rotation_deg.to_radians();
    let shift = Vec3::from_array(entry.fov_displacement);
    ScannerGeometry {
        modules: geom
            .modules
            .iter()
            .map(|m| m.transformed(|p| (p - c).rotate_z(angle) + c + shift, |d| d.rotate_z(angle)))
            .collect(),
        fov_center: c + shift,
        ..geom.clone()
    }
}

/// Compressed-row sparse operator from voxels to detector bins, with its
/// transpose stored alongside for the back-projector.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrix {
    proj_dims: ProjDims,
    grid: Dims3,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    weights: Vec<f64>,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    t_weights: Vec<f64>,
}

impl SystemMatrix {
    /// Assemble from per-row `(column, weight)` lists. Duplicate columns
    /// within a row are summed.
    pub fn from_rows(proj_dims: ProjDims, grid: Dims3, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != proj_dims.len() {
            return Err(Error::Shape(format!(
                "{} rows supplied for {} detector bins",
                rows.len(),
                proj_dims.len()
            )));
        }
        let n_cols = grid.len();
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, w) in row {
                if c >= n_cols {
                    return Err(Error::Shape(format!("column {c} outside {n_cols} voxels")));
                }
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Numerical(format!("invalid weight {w} at column {c}")));
                }
                if last == Some(c) {
                    *weights.last_mut().unwrap() += w;
                } else {
                    col_idx.push(c as u32);
                    weights.push(w);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self::with_transpose(proj_dims, grid, row_ptr, col_idx, weights))
    }

    fn with_transpose(
        proj_dims: ProjDims,
        grid: Dims3,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
        weights: Vec<f64>,
    ) -> Self {
        let n_cols = grid.len();
        let mut counts = vec![0usize; n_cols + 1];
        for &c in &col_idx {
            counts[c as usize + 1] += 1;
        }
        for i in 0..n_cols {
            counts[i + 1] += counts[i];
        }
        let col_ptr = counts.clone();
        let mut fill = counts;
        let mut row_idx = vec![0u32; col_idx.len()];
        let mut t_weights = vec![0.0; col_idx.len()];
        // rows visited in increasing order, so each column's rows stay sorted
        for r in 0..row_ptr.len() - 1 {
            for k in row_ptr[r]..row_ptr[r + 1] {
                let c = col_idx[k] as usize;
                row_idx[fill[c]] = r as u32;
                t_weights[fill[c]] = weights[k];
                fill[c] += 1;
            }
        }
        SystemMatrix {
            proj_dims,
            grid,
            row_ptr,
            col_idx,
            weights,
            col_ptr,
            row_idx,
            t_weights,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.grid.len()
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn proj_dims(&self) -> ProjDims {
        self.proj_dims
    }

    pub fn grid_dims(&self) -> Dims3 {
        self.grid
    }

    /// `(column, weight)` pairs of one row, sorted by column.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .zip(&self.weights[span])
            .map(|(&c, &w)| (c as usize, w))
    }

    /// `(row, weight)` pairs of one column, sorted by row.
    pub fn column(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[span.clone()]
            .iter()
            .zip(&self.t_weights[span])
            .map(|(&r, &w)| (r as usize, w))
    }

    /// Raw CSR arrays `(row_ptr, col_idx, weights)`.
    pub fn csr(&self) -> (&[usize], &[u32], &[f64]) {
        (&self.row_ptr, &self.col_idx, &self.weights)
    }

    /// `y = S x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_cols() {
            return Err(Error::Shape(format!(
                "forward projection of {} values through a {}-column matrix",
                x.len(),
                self.n_cols()
            )));
        }
        Ok((0..self.n_rows())
            .into_par_iter()
            .map(|r| {
                let span = self.row_ptr[r]..self.row_ptr[r + 1];
                self.col_idx[span.clone()]
                    .iter()
                    .zip(&self.weights[span])
                    .map(|(&c, &w)| w * x[c as usize])
                    .sum()
            })
            .collect())
    }

    /// `x = Sᵀ y`, using the same entries as [`SystemMatrix::apply`].
    pub fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n_rows() {
            return Err(Error::Shape(format!(
                "back projection of {} values through a {}-row matrix",
                y.len(),
                self.n_rows()
            )));
        }
        Ok((0..self.n_cols())
            .into_par_iter()
            .map(|c| {
                let span = self.col_ptr[c]..self.col_ptr[c + 1];
                self.row_idx[span.clone()]
                    .iter()
                    .zip(&self.t_weights[span])
                    .map(|(&r, &w)| w * y[r as usize])
                    .sum()
            })
            .collect())
    }

    /// Column sums `s_j = Σ_i a_ij`.
    pub fn sensitivity(&self) -> Vec<f64> {
        (0..self.n_cols())
            .map(|c| self.t_weights[self.col_ptr[c]..self.col_ptr[c + 1]].iter().sum())
            .collect()
    }

    /// Voxels no detector bin sees.
    pub fn dead_voxels(&self) -> Vec<usize> {
        (0..self.n_cols())
            .filter(|&c| self.col_ptr[c] == self.col_ptr[c + 1])
            .collect()
    }

    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CacheHeader {
            format: CACHE_FORMAT.into(),
            version: 1,
            proj_dims: self.proj_dims,
            grid: self.grid,
            n_rows: self.n_rows(),
            n_cols: self.n_cols(),
            nnz: self.nnz(),
            layout: "row_ptr u64le[n_rows+1], col u32le[nnz], weight f64le[nnz]".into(),
        };
        let mut bytes = Vec::with_capacity(8 * (self.row_ptr.len()) + 12 * self.nnz());
        for &p in &self.row_ptr {
            bytes.extend_from_slice(&(p as u64).to_le_bytes());
        }
        for &c in &self.col_idx {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        for &w in &self.weights {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        let bin = path.with_extension("bin");
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let text = serde_json::to_string_pretty(&header)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let h: CacheHeader = serde_json::from_str(&text)?;
        if h.format != CACHE_FORMAT {
            return Err(Error::format("format", format!("unexpected {:?}", h.format)));
        }
        if h.n_rows != h.proj_dims.len() || h.n_cols != h.grid.len() {
            return Err(Error::format("n_rows", "matrix shape disagrees with declared dims"));
        }
        let bin = path.with_extension("bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let expected = 8 * (h.n_rows + 1) + 12 * h.nnz;
        if bytes.len() != expected {
            return Err(Error::format(
                "payload",
                format!("{} bytes, expected {expected}", bytes.len()),
            ));
        }
        let (ptr_bytes, rest) = bytes.split_at(8 * (h.n_rows + 1));
        let (col_bytes, w_bytes) = rest.split_at(4 * h.nnz);
        let row_ptr: Vec<usize> = ptr_bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let col_idx: Vec<u32> = col_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let weights: Vec<f64> = w_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if row_ptr.first() != Some(&0)
            || row_ptr.last() != Some(&h.nnz)
            || row_ptr.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::format("row_ptr", "row pointers are not monotone"));
        }
        if col_idx.iter().any(|&c| c as usize >= h.n_cols) {
            return Err(Error::format("col", "column index out of range"));
        }
        Ok(Self::with_transpose(h.proj_dims, h.grid, row_ptr, col_idx, weights))
    }
}

const CACHE_FORMAT: &str = "tipnet-system-matrix";

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    proj_dims: ProjDims,
    grid: Dims3,
    n_rows: usize,
    n_cols: usize,
    nnz: usize,
    layout: String,
}

/// One traversed voxel: `(linear index, chord length, parameter at chord midpoint)`.
type Crossing = (usize, f64, f64);

/// Incremental voxel traversal of the ray `origin + t·dir` (`dir` unit length)
/// through the grid box, for `t > 0`.
fn traverse(grid: &GridSpec, origin: Vec3, dir: Vec3, out: &mut Vec<Crossing>) {
    let lo = grid.lower_corner().to_array();
    let n = [grid.dims.nx, grid.dims.ny, grid.dims.nz];
    let vs = grid.voxel_size;
    let o = origin.to_array();
    let d = dir.to_array();

    let mut t_enter = 0.0f64;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        let hi = lo[a] + n[a] as f64 * vs[a];
        if d[a].abs() < 1e-15 {
            if o[a] < lo[a] || o[a] > hi {
                return;
            }
        } else {
            let t0 = (lo[a] - o[a]) / d[a];
            let t1 = (hi - o[a]) / d[a];
            t_enter = t_enter.max(t0.min(t1));
            t_exit = t_exit.min(t0.max(t1));
        }
    }
    if !(t_exit > t_enter) {
        return;
    }

    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let t_mid_entry = t_enter + 0.5 * (t_exit - t_enter).min(1e-9);
    for a in 0..3 {
        let p = o[a] + t_mid_entry * d[a];
        let i = ((p - lo[a]) / vs[a]).floor() as i64;
        idx[a] = i.clamp(0, n[a] as i64 - 1);
        if d[a] > 1e-15 {
            step[a] = 1;
            t_delta[a] = vs[a] / d[a];
            t_next[a] = (lo[a] + (idx[a] + 1) as f64 * vs[a] - o[a]) / d[a];
        } else if d[a] < -1e-15 {
            step[a] = -1;
            t_delta[a] = -vs[a] / d[a];
            t_next[a] = (lo[a] + idx[a] as f64 * vs[a] - o[a]) / d[a];
        }
    }

    // chords this short only arise where a ray grazes a voxel edge
    let min_chord = 1e-9 * vs[0].min(vs[1]).min(vs[2]);
    let mut t = t_enter;
    loop {
        let axis = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        let t_out = t_next[axis].min(t_exit);
        let len = t_out - t;
        if len > min_chord {
            let lin = idx[0] as usize + n[0] * (idx[1] as usize + n[1] * idx[2] as usize);
            out.push((lin, len, 0.5 * (t + t_out)));
        }
        if t_out >= t_exit {
            break;
        }
        t = t_out;
        idx[axis] += step[axis];
        if idx[axis] < 0 || idx[axis] >= n[axis] as i64 {
            break;
        }
        t_next[axis] += t_delta[axis];
    }
}

fn module_rows(geom: &ScannerGeometry, m: &DetectorModule, grid: &GridSpec) -> Vec<Vec<(usize, f64)>> {
    let s = geom.rays_per_bin_axis;
    let sub_weight = 1.0 / (s * s) as f64;
    let d_ref2 = geom.reference_distance * geom.reference_distance;
    let mut crossings = Vec::new();
    let mut rows = Vec::with_capacity(m.nu * m.nv);
    for iv in 0..m.nv {
        for iu in 0..m.nu {
            let mut row: Vec<(usize, f64)> = Vec::new();
            for sv in 0..s {
                for su in 0..s {
                    let u = iu as f64 + (su as f64 + 0.5) / s as f64;
                    let v = iv as f64 + (sv as f64 + 0.5) / s as f64;
                    let b = m.bin_point(u, v);
                    let dir = (m.aperture_pos - b).normalized();
                    crossings.clear();
                    traverse(grid, m.aperture_pos, dir, &mut crossings);
                    for &(j, len, t_mid) in &crossings {
                        row.push((j, sub_weight * len * d_ref2 / (t_mid * t_mid)));
                    }
                }
            }
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (c, w) in row {
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += w,
                    _ => merged.push((c, w)),
                }
            }
            rows.push(merged);
        }
    }
    rows
}

/// Build the joint system matrix for every angle of `angles`.
pub fn build_system_matrix(geom: &ScannerGeometry, angles: &AngleSet, grid: &GridSpec) -> Result<SystemMatrix> {
    if geom.modules.is_empty() {
        return Err(Error::Geometry("geometry has no modules".into()));
    }
    if angles.is_empty() {
        return Err(Error::Geometry("angle set is empty".into()));
    }
    let first = &geom.modules[0];
    if geom.modules.iter().any(|m| m.nu != first.nu || m.nv != first.nv) {
        return Err(Error::Geometry("all modules must share the bin layout".into()));
    }
    let placed: Vec<ScannerGeometry> = angles.entries.iter().map(|e| apply_angle(geom, e)).collect();
    for (a, g) in placed.iter().enumerate() {
        for (k, m) in g.modules.iter().enumerate() {
            if grid.contains(m.aperture_pos) {
                return Err(Error::Geometry(format!(
                    "aperture of module {k} at angle {a} lies inside the voxel grid"
                )));
            }
        }
    }
    let jobs: Vec<(&ScannerGeometry, &DetectorModule)> = placed
        .iter()
        .flat_map(|g| g.modules.iter().map(move |m| (g, m)))
        .collect();
    let rows: Vec<Vec<(usize, f64)>> = jobs
        .par_iter()
        .map(|(g, m)| module_rows(g, m, grid))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let matrix = SystemMatrix::from_rows(geom.proj_dims(angles.len()), grid.dims, rows)?;
    let dead = matrix.dead_voxels();
    if !dead.is_empty() {
        let shown: Vec<String> = dead
            .iter()
            .take(16)
            .map(|&j| format!("{:?}", grid.dims.coords(j)))
            .collect();
        log::warn!(
            "{} of {} voxels are seen by no detector bin: {}{}",
            dead.len(),
            matrix.n_cols(),
            shown.join(", "),
            if dead.len() > shown.len() { ", ..." } else { "" }
        );
    }
    Ok(matrix)
}

/// `y = S x` as a projection set.
pub fn forward_project(s: &SystemMatrix, x: &VolumeGrid, angle_ids: Vec<String>) -> Result<ProjectionSet> {
    if x.dims() != s.grid {
        return Err(Error::Shape(format!(
            "volume {} does not match matrix grid {}",
            x.dims(),
            s.grid
        )));
    }
    let xs: Vec<f64> = x.values().iter().map(|&v| v as f64).collect();
    let y = s.apply(&xs)?;
    ProjectionSet::new(s.proj_dims, angle_ids, y.into_iter().map(|v| v as f32).collect())
}

/// `x = Sᵀ y` as a volume.
pub fn back_project(s: &SystemMatrix, y: &ProjectionSet, voxel_size: [f64; 3]) -> Result<VolumeGrid> {
    if y.dims() != s.proj_dims {
        return Err(Error::Shape(format!(
            "projection dims {:?} do not match matrix rows {:?}",
            y.dims(),
            s.proj_dims
        )));
    }
    let ys: Vec<f64> = y.values().iter().map(|&v| v as f64).collect();
    let x = s.apply_transpose(&ys)?;
    VolumeGrid::new(s.grid, voxel_size, x.into_iter().map(|v| v as f32).collect())
}

/// `|⟨Sx, y⟩ − ⟨x, Sᵀy⟩| / |⟨Sx, y⟩|`, forward and transpose evaluated from
/// their separate storage.
pub fn adjoint_residual(s: &SystemMatrix, x: &[f64], y: &[f64]) -> Result<f64> {
    let sx = s.apply(x)?;
    let sty = s.apply_transpose(y)?;
    let lhs: f64 = sx.iter().zip(y).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.iter().zip(&sty).map(|(a, b)| a * b).sum();
    if lhs == 0.0 && rhs == 0.0 {
        return Ok(0.0);
    }
    Ok((lhs - rhs).abs() / lhs.abs().max(rhs.abs()))
}
