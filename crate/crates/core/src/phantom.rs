//! Procedural cardiac phantoms, Poisson acquisitions and dataset generation.
//!
//! The left ventricle is an ellipsoidal shell around a blood pool, inside an
//! elliptic-cylinder torso of background uptake. An optional defect lowers
//! the uptake of a wedge of the wall bounded in azimuth (about the long axis,
//! which runs along z) and in relative height.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    read_masks, read_projections, read_volume, write_masks, write_projections, write_volume, LabeledMasks, ProjectionSet,
    VolumeGrid,
};
use crate::error::{Error, Result};
use crate::geometry::{
    back_project, build_geometry, build_system_matrix, AngleSet, GeometryConfig, GridSpec, SystemMatrix, Vec3,
};
use crate::metrics;
use crate::mlem::{mlem_reconstruct, MlemConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectSpec {
    /// Azimuth where the defect starts, degrees counter-clockwise from +x.
    pub start_deg: f64,
    pub extent_deg: f64,
    /// Relative height along the long axis where the defect starts, 0 at the
    /// bottom of the shell and 1 at the top.
    pub axial_start: f64,
    pub axial_extent: f64,
    /// 0 leaves the wall untouched, 1 lowers it to the background uptake.
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// Shell centre in scanner coordinates, mm.
    pub center: [f64; 3],
    /// Outer semi-axes of the shell, mm.
    pub semi_axes: [f64; 3],
    pub wall_thickness: f64,
    pub myocardium_uptake: f64,
    pub blood_pool_uptake: f64,
    pub background_uptake: f64,
    /// Semi-axes of the elliptic-cylinder torso in x and y, mm.
    pub torso_semi_axes: [f64; 2],
    pub defect: Option<DefectSpec>,
    /// Relative amplitude of smooth uptake variation along the wall.
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            center: [0.0; 3],
            semi_axes: [20.0, 20.0, 26.0],
            wall_thickness: 8.0,
            myocardium_uptake: 4.0,
            blood_pool_uptake: 1.0,
            background_uptake: 0.4,
            torso_semi_axes: [46.0, 40.0],
            defect: None,
            heterogeneity: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, u) in [
            ("myocardium_uptake", self.myocardium_uptake),
            ("blood_pool_uptake", self.blood_pool_uptake),
            ("background_uptake", self.background_uptake),
        ] {
            if !(u.is_finite() && u >= 0.0) {
                return bad(format!("{name} must be >= 0, got {u}"));
            }
        }
        if self.semi_axes.iter().any(|&a| !(a > 0.0)) {
            return bad("semi-axes must be positive".into());
        }
        if !(self.wall_thickness > 0.0) || self.semi_axes.iter().any(|&a| self.wall_thickness >= a) {
            return bad(format!("wall thickness {} must be positive and below every semi-axis", self.wall_thickness));
        }
        if !(0.0..1.0).contains(&self.heterogeneity) {
            return bad("heterogeneity must lie in [0, 1)".into());
        }
        if let Some(d) = &self.defect {
            if !(0.0..=1.0).contains(&d.severity) {
                return bad(format!("defect severity {} outside [0, 1]", d.severity));
            }
            if !(d.extent_deg > 0.0 && d.axial_extent > 0.0) {
                return bad("defect extents must be positive".into());
            }
        }
        Ok(())
    }

    /// Draw a plausible subject. Half of the draws (on average) carry a defect.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, with_defect: bool) -> Self {
        let mut s = PhantomSpec {
            center: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0)],
            semi_axes: [
                rng.random_range(17.0..23.0),
                rng.random_range(17.0..23.0),
                rng.random_range(22.0..26.0),
            ],
            wall_thickness: rng.random_range(7.0..10.0),
            myocardium_uptake: rng.random_range(3.0..5.0),
            blood_pool_uptake: rng.random_range(0.8..1.2),
            background_uptake: rng.random_range(0.3..0.6),
            torso_semi_axes: [rng.random_range(42.0..47.0), rng.random_range(36.0..42.0)],
            defect: None,
            heterogeneity: rng.random_range(0.0..0.1),
            seed: rng.random(),
        };
        if with_defect {
            s.defect = Some(DefectSpec {
                start_deg: rng.random_range(0.0..360.0),
                extent_deg: rng.random_range(60.0..120.0),
                axial_start: rng.random_range(0.1..0.4),
                axial_extent: rng.random_range(0.4..0.7),
                severity: rng.random_range(0.6..1.0),
            });
        }
        s
    }
}

fn in_ellipsoid(q: Vec3, a: [f64; 3]) -> bool {
    (q.x / a[0]).powi(2) + (q.y / a[1]).powi(2) + (q.z / a[2]).powi(2) <= 1.0
}

fn in_defect(q: Vec3, spec: &PhantomSpec, d: &DefectSpec) -> bool {
    let phi = q.y.atan2(q.x).to_degrees().rem_euclid(360.0);
    let rel = (phi - d.start_deg).rem_euclid(360.0);
    let c = spec.semi_axes[2];
    let h = (q.z + c) / (2.0 * c);
    rel < d.extent_deg && h >= d.axial_start && h <= d.axial_start + d.axial_extent
}

/// Voxelise a phantom by sampling each voxel centre.
pub fn generate_phantom(spec: &PhantomSpec, grid: &GridSpec) -> Result<(VolumeGrid, LabeledMasks)> {
    spec.validate()?;
    let lo = grid.lower_corner();
    let d = grid.dims;
    let hi = [
        lo.x + d.nx as f64 * grid.voxel_size[0],
        lo.y + d.ny as f64 * grid.voxel_size[1],
        lo.z + d.nz as f64 * grid.voxel_size[2],
    ];
    let lo_a = lo.to_array();
    for a in 0..3 {
        if spec.center[a] - spec.semi_axes[a] < lo_a[a] || spec.center[a] + spec.semi_axes[a] > hi[a] {
            return Err(Error::Config(format!("LV shell extends outside the grid along axis {a}")));
        }
    }
    let inner = spec.semi_axes.map(|a| a - spec.wall_thickness);
    let center = Vec3::from_array(spec.center);
    let gc = Vec3::from_array(grid.center);
    // smooth wall variation: a low-order harmonic in azimuth and height
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (p1, p2): (f64, f64) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));

    let mut values = vec![0.0f32; d.len()];
    let mut masks = LabeledMasks::empty(d);
    for iz in 0..d.nz {
        for iy in 0..d.ny {
            for ix in 0..d.nx {
                let i = d.index(ix, iy, iz);
                let p = grid.voxel_center(ix, iy, iz);
                let q = p - center;
                let t = p - gc;
                let mut v = 0.0;
                if (t.x / spec.torso_semi_axes[0]).powi(2) + (t.y / spec.torso_semi_axes[1]).powi(2) <= 1.0 {
                    v = spec.background_uptake;
                }
                if in_ellipsoid(q, inner) {
                    v = spec.blood_pool_uptake;
                    masks.blood_pool[i] = true;
                } else if in_ellipsoid(q, spec.semi_axes) {
                    masks.myocardium[i] = true;
                    let phi = q.y.atan2(q.x);
                    let h = q.z / spec.semi_axes[2];
                    let mut m = spec.myocardium_uptake
                        * (1.0 + spec.heterogeneity * (phi + p1).cos() * (std::f64::consts::PI * h + p2).cos());
                    if let Some(df) = &spec.defect {
                        if in_defect(q, spec, df) {
                            masks.defect[i] = true;
                            m -= df.severity * (m - spec.background_uptake);
                        }
                    }
                    v = m;
                }
                values[i] = v as f32;
            }
        }
    }
    masks.validate()?;
    Ok((VolumeGrid::new(d, grid.voxel_size, values)?, masks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionSpec {
    /// Expected total counts per angular position.
    pub counts_per_angle: f64,
    pub seed: u64,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        AcquisitionSpec {
            counts_per_angle: 5e5,
            seed: 0,
        }
    }
}

/// Expected projections per angle scaled to the requested counts, then
/// independent Poisson draws per bin (in row order, one seeded stream).
pub fn simulate_acquisition(
    x_true: &VolumeGrid,
    s: &SystemMatrix,
    angle_ids: Vec<String>,
    acq: &AcquisitionSpec,
) -> Result<ProjectionSet> {
    if !(acq.counts_per_angle > 0.0 && acq.counts_per_angle.is_finite()) {
        return Err(Error::Config(format!("counts_per_angle must be positive, got {}", acq.counts_per_angle)));
    }
    if x_true.dims() != s.grid_dims() {
        return Err(Error::Shape(format!("volume {} vs matrix grid {}", x_true.dims(), s.grid_dims())));
    }
    let pd = s.proj_dims();
    if angle_ids.len() != pd.n_angles {
        return Err(Error::Shape(format!("{} angle ids for {} angles", angle_ids.len(), pd.n_angles)));
    }
    let xs: Vec<f64> = x_true.values().iter().map(|&v| v as f64).collect();
    let mean = s.apply(&xs)?;
    let per_angle = pd.n_modules * pd.bins_per_module();
    let mut rng = ChaCha8Rng::seed_from_u64(acq.seed);
    let mut out = Vec::with_capacity(mean.len());
    let all_zero = xs.iter().all(|&v| v == 0.0);
    for block in mean.chunks(per_angle) {
        let total: f64 = block.iter().sum();
        if total <= 0.0 {
            if all_zero {
                out.extend(std::iter::repeat_n(0.0f32, block.len()));
                continue;
            }
            return Err(Error::Reconstruction(
                "activity projects to zero counts at an angular position".into(),
            ));
        }
        let scale = acq.counts_per_angle / total;
        for &m in block {
            let lambda = m * scale;
            let c = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| Error::Numerical(format!("poisson rate {lambda}: {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            out.push(c as f32);
        }
    }
    ProjectionSet::new(pd, angle_ids, out)
}

/// Settings for [`make_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_subjects: usize,
    pub seed: u64,
    pub counts_per_angle: f64,
    pub defect_fraction: f64,
    pub mlem_iters_one: usize,
    pub mlem_iters_four: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_subjects: 64,
            seed: 0,
            counts_per_angle: 5e5,
            defect_fraction: 0.5,
            mlem_iters_one: 50,
            mlem_iters_four: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectFiles {
    pub phantom: String,
    pub masks: String,
    pub proj_one: String,
    pub proj_four: String,
    pub mlem_one: String,
    pub bp_one: String,
    pub mlem_four: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub mbp: f64,
    pub defect_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub dir: String,
    pub has_defect: bool,
    pub spec: PhantomSpec,
    pub acquisition_seed: u64,
    pub files: SubjectFiles,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub grid: GridSpec,
    pub geometry: GeometryConfig,
    pub config: DatasetConfig,
    pub one_angle_ids: Vec<String>,
    pub four_angle_ids: Vec<String>,
    pub subjects: Vec<SubjectEntry>,
}

pub const MANIFEST_NAME: &str = "dataset.json";
const MANIFEST_FORMAT: &str = "tipnet-dataset";

fn subject_seed(base: u64, k: usize) -> u64 {
    // splitmix64 of (base, k) so neighbouring subjects get unrelated streams
    let mut z = base ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Simulated reconstructions of one subject.
pub struct SubjectData {
    pub phantom: VolumeGrid,
    pub masks: LabeledMasks,
    pub proj_one: ProjectionSet,
    pub proj_four: ProjectionSet,
    pub mlem_one: VolumeGrid,
    pub bp_one: VolumeGrid,
    pub mlem_four: VolumeGrid,
}

/// System matrices shared by every subject of a dataset.
pub struct Scanner {
    pub grid: GridSpec,
    pub s_one: SystemMatrix,
    pub s_four: SystemMatrix,
    pub one_ids: Vec<String>,
    pub four_ids: Vec<String>,
}

impl Scanner {
    pub fn new(geometry: &GeometryConfig, grid: &GridSpec) -> Result<Self> {
        let geom = build_geometry(geometry)?;
        let one = AngleSet::one_angle();
        let four = AngleSet::four_angle();
        Ok(Scanner {
            grid: *grid,
            s_one: build_system_matrix(&geom, &one, grid)?,
            s_four: build_system_matrix(&geom, &four, grid)?,
            one_ids: one.ids(),
            four_ids: four.ids(),
        })
    }

    /// Acquire four angles; the stationary one-angle data is the first block.
    pub fn simulate(&self, phantom: &VolumeGrid, acq: &AcquisitionSpec, iters_one: usize, iters_four: usize) -> Result<(ProjectionSet, ProjectionSet, VolumeGrid, VolumeGrid, VolumeGrid)> {
        let proj_four = simulate_acquisition(phantom, &self.s_four, self.four_ids.clone(), acq)?;
        let proj_one = proj_four.angle(0)?;
        let vs = self.grid.voxel_size;
        let cfg = |n| MlemConfig {
            n_iters: n,
            ..MlemConfig::default()
        };
        let mlem_one = mlem_reconstruct(&self.s_one, &proj_one, &cfg(iters_one), vs)?;
        let bp_one = back_project(&self.s_one, &proj_one, vs)?;
        let mlem_four = mlem_reconstruct(&self.s_four, &proj_four, &cfg(iters_four), vs)?;
        Ok((proj_one, proj_four, mlem_one, bp_one, mlem_four))
    }
}

/// Generate `cfg.n_subjects` subjects under `out_dir` and write the manifest.
pub fn make_dataset(out_dir: &Path, grid: &GridSpec, geometry: &GeometryConfig, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    if cfg.n_subjects == 0 {
        return Err(Error::Config("n_subjects must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.defect_fraction) {
        return Err(Error::Config("defect_fraction must lie in [0, 1]".into()));
    }
    let scanner = Scanner::new(geometry, grid)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for k in 0..cfg.n_subjects {
        let id = format!("subject_{k:03}");
        let seed = subject_seed(cfg.seed, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let with_defect = rng.random_bool(cfg.defect_fraction);
        let spec = PhantomSpec::random(&mut rng, with_defect);
        let (phantom, masks) = generate_phantom(&spec, grid)?;
        let acq = AcquisitionSpec {
            counts_per_angle: cfg.counts_per_angle,
            seed: rng.random(),
        };
        let (proj_one, proj_four, mlem_one, bp_one, mlem_four) =
            scanner.simulate(&phantom, &acq, cfg.mlem_iters_one, cfg.mlem_iters_four)?;

        let dir = out_dir.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let files = SubjectFiles {
            phantom: format!("{id}/phantom.vol.json"),
            masks: format!("{id}/masks.mask.json"),
            proj_one: format!("{id}/proj_one.proj.json"),
            proj_four: format!("{id}/proj_four.proj.json"),
            mlem_one: format!("{id}/mlem_one.vol.json"),
            bp_one: format!("{id}/bp_one.vol.json"),
            mlem_four: format!("{id}/mlem_four.vol.json"),
        };
        write_volume(out_dir.join(&files.phantom), &phantom)?;
        write_masks(out_dir.join(&files.masks), &masks)?;
        write_projections(out_dir.join(&files.proj_one), &proj_one)?;
        write_projections(out_dir.join(&files.proj_four), &proj_four)?;
        write_volume(out_dir.join(&files.mlem_one), &mlem_one)?;
        write_volume(out_dir.join(&files.bp_one), &bp_one)?;
        write_volume(out_dir.join(&files.mlem_four), &mlem_four)?;
        let truth = GroundTruth {
            mbp: metrics::mbp_ratio(&phantom, &masks.myocardium, &masks.blood_pool)?,
            defect_size: metrics::defect_size(&phantom, &masks.myocardium)?,
        };
        log::info!("{id}: defect={} truth defect size {:.1}%", masks.has_defect(), truth.defect_size);
        subjects.push(SubjectEntry {
            id,
            dir: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            has_defect: masks.has_defect(),
            spec,
            acquisition_seed: acq.seed,
            files,
            truth,
        });
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        grid: *grid,
        geometry: geometry.clone(),
        config: cfg.clone(),
        one_angle_ids: scanner.one_ids.clone(),
        four_angle_ids: scanner.four_ids.clone(),
        subjects,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One subject loaded into memory.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub has_defect: bool,
    pub masks: LabeledMasks,
    pub proj_one: ProjectionSet,
    pub mlem_one: VolumeGrid,
    pub bp_one: VolumeGrid,
    pub mlem_four: VolumeGrid,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    /// Load from a dataset directory or its manifest path.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest_path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::format("format", format!("expected {MANIFEST_FORMAT}, found {}", manifest.format)));
        }
        if manifest.subjects.is_empty() {
            return Err(Error::Dataset("manifest lists no subjects".into()));
        }
        let subjects = manifest
            .subjects
            .iter()
            .map(|e| {
                Ok(Subject {
                    id: e.id.clone(),
                    has_defect: e.has_defect,
                    masks: read_masks(root.join(&e.files.masks))?,
                    proj_one: read_projections(root.join(&e.files.proj_one))?,
                    mlem_one: read_volume(root.join(&e.files.mlem_one))?,
                    bp_one: read_volume(root.join(&e.files.bp_one))?,
                    mlem_four: read_volume(root.join(&e.files.mlem_four))?,
                    truth: e.truth.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { root, manifest, subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}
