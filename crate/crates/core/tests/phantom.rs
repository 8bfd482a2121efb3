use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tipnet::datamodel::{LabeledMasks, VolumeGrid};
use tipnet::geometry::{build_geometry, build_system_matrix, AngleSet, GeometryConfig, GridSpec};
use tipnet::metrics::mbp_ratio;
use tipnet::mlem::{mlem_reconstruct, MlemConfig};
use tipnet::phantom::{
    generate_phantom, make_dataset, simulate_acquisition, AcquisitionSpec, Dataset, DatasetConfig, DefectSpec,
    PhantomSpec,
};

fn with_defect(severity: f64) -> PhantomSpec {
    PhantomSpec {
        defect: Some(DefectSpec {
            start_deg: 30.0,
            extent_deg: 90.0,
            axial_start: 0.2,
            axial_extent: 0.6,
            severity,
        }),
        ..PhantomSpec::default()
    }
}

#[test]
fn severity_zero_leaves_wall_unchanged() {
    let (x, m) = generate_phantom(&with_defect(0.0), &GridSpec::desk()).unwrap();
    assert!(m.has_defect());
    for (i, &d) in m.defect.iter().enumerate() {
        if d {
            assert_eq!(x.values()[i], 4.0);
        }
    }
}

#[test]
fn severity_one_drops_defect_to_background() {
    let spec = with_defect(1.0);
    let (x, m) = generate_phantom(&spec, &GridSpec::desk()).unwrap();
    let bg = spec.background_uptake as f32;
    assert!(m.defect.iter().zip(x.values()).filter(|(d, _)| **d).all(|(_, &v)| v == bg));
    let healthy = m.myocardium.iter().zip(&m.defect).zip(x.values()).filter(|((my, d), _)| **my && !**d);
    assert!(healthy.map(|(_, &v)| v).all(|v| v == 4.0));
}

#[test]
fn ground_truth_mbp_is_uptake_ratio() {
    let (x, m) = generate_phantom(&PhantomSpec::default(), &GridSpec::desk()).unwrap();
    let r = mbp_ratio(&x, &m.myocardium, &m.blood_pool).unwrap();
    assert!((r - 4.0).abs() < 1e-12, "{r}");
}

#[test]
fn shell_outside_grid_is_rejected() {
    let spec = PhantomSpec {
        center: [40.0, 0.0, 0.0],
        ..PhantomSpec::default()
    };
    assert!(generate_phantom(&spec, &GridSpec::desk()).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    let thick = PhantomSpec {
        wall_thickness: 30.0,
        ..PhantomSpec::default()
    };
    assert!(thick.validate().is_err());
    assert!(with_defect(1.5).validate().is_err());
    let neg = PhantomSpec {
        background_uptake: -1.0,
        ..PhantomSpec::default()
    };
    assert!(neg.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn masks_partition(seed in any::<u64>(), defect in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = PhantomSpec::random(&mut rng, defect);
        let (_, m) = generate_phantom(&spec, &GridSpec::desk()).unwrap();
        for i in 0..m.myocardium.len() {
            prop_assert!(!(m.myocardium[i] && m.blood_pool[i]));
            prop_assert!(!m.defect[i] || m.myocardium[i]);
        }
        prop_assert_eq!(m.has_defect(), defect);
        prop_assert!(LabeledMasks::count(&m.myocardium) > 0 && LabeledMasks::count(&m.blood_pool) > 0);
    }
}

#[test]
fn counts_match_poisson_statistics() {
    let grid = GridSpec::desk();
    let geom = build_geometry(&GeometryConfig::desk()).unwrap();
    let s = build_system_matrix(&geom, &AngleSet::one_angle(), &grid).unwrap();
    let (x, _) = generate_phantom(&PhantomSpec::default(), &grid).unwrap();
    let acq = AcquisitionSpec {
        counts_per_angle: 1e6,
        seed: 11,
    };
    let ids = AngleSet::one_angle().ids();
    let y = simulate_acquisition(&x, &s, ids.clone(), &acq).unwrap();
    assert!((y.total() - 1e6).abs() <= 4.0 * 1e3, "total {}", y.total());
    assert!(y.values().iter().all(|&c| c >= 0.0 && c.fract() == 0.0));
    let again = simulate_acquisition(&x, &s, ids.clone(), &acq).unwrap();
    assert_eq!(y.values(), again.values());
    let other = simulate_acquisition(&x, &s, ids.clone(), &AcquisitionSpec { seed: 12, ..acq.clone() }).unwrap();
    assert_ne!(y.values(), other.values());

    let zero = VolumeGrid::zeros(grid.dims, grid.voxel_size);
    let yz = simulate_acquisition(&zero, &s, ids, &acq).unwrap();
    assert!(yz.values().iter().all(|&c| c == 0.0));
}

#[test]
fn four_angle_mlem_beats_one_angle_on_noiseless_data() {
    let grid = GridSpec::desk();
    let geom = build_geometry(&GeometryConfig::desk()).unwrap();
    let (x, _) = generate_phantom(&with_defect(0.8), &grid).unwrap();
    let xs: Vec<f64> = x.values().iter().map(|&v| v as f64).collect();
    let nrmse = |set: AngleSet| {
        let s = build_system_matrix(&geom, &set, &grid).unwrap();
        let y = tipnet::geometry::forward_project(&s, &x, set.ids()).unwrap();
        let cfg = MlemConfig {
            n_iters: 50,
            ..MlemConfig::default()
        };
        let r = mlem_reconstruct(&s, &y, &cfg, grid.voxel_size).unwrap();
        let num: f64 = r.values().iter().zip(&xs).map(|(&a, &b)| (a as f64 - b).powi(2)).sum();
        let den: f64 = xs.iter().map(|b| b * b).sum();
        (num / den).sqrt()
    };
    let one = nrmse(AngleSet::one_angle());
    let four = nrmse(AngleSet::four_angle());
    assert!(four < one, "four {four} one {one}");
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn small_dataset_is_complete_and_reproducible() {
    let cfg = DatasetConfig {
        n_subjects: 4,
        seed: 5,
        mlem_iters_one: 5,
        mlem_iters_four: 5,
        ..DatasetConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let grid = GridSpec::desk();
    let geom = GeometryConfig::desk();
    let manifest = make_dataset(a.path(), &grid, &geom, &cfg).unwrap();
    make_dataset(b.path(), &grid, &geom, &cfg).unwrap();
    assert_eq!(manifest.subjects.len(), 4);
    for s in &manifest.subjects {
        let files = [
            &s.files.phantom,
            &s.files.masks,
            &s.files.proj_one,
            &s.files.proj_four,
            &s.files.mlem_one,
            &s.files.bp_one,
            &s.files.mlem_four,
        ];
        for f in files {
            assert!(a.path().join(f).is_file(), "{f}");
        }
    }
    let ds = Dataset::load(a.path()).unwrap();
    for (entry, subj) in manifest.subjects.iter().zip(&ds.subjects) {
        assert_eq!(entry.has_defect, subj.masks.has_defect());
        assert_eq!(subj.proj_one.dims().n_angles, 1);
    }
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
}
