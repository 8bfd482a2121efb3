use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tipnet::autodiff::{ParamStore, Tape};
use tipnet::datamodel::{Dims3, ProjDims};
use tipnet::error::Error;
use tipnet::model::{Generator, ModelConfig, ModelShapes};

fn desk_shapes() -> ModelShapes {
    ModelShapes::new(
        Dims3::new(24, 24, 16),
        ProjDims {
            n_angles: 1,
            n_modules: 19,
            nu: 16,
            nv: 16,
        },
    )
}

struct Fixture {
    g: Generator,
    store: ParamStore<f32>,
    proj: Vec<f32>,
    bp: Vec<f32>,
    mlem: Vec<f32>,
}

fn fixture(seed: u64) -> Fixture {
    let shapes = desk_shapes();
    let mut store = ParamStore::new();
    let g = Generator::new(&ModelConfig::default(), &shapes, &mut store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.init(&mut rng);
    let nvox = 24 * 24 * 16;
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect::<Vec<_>>();
    Fixture {
        proj: draw(19 * 16 * 16),
        bp: draw(nvox),
        mlem: draw(nvox),
        g,
        store,
    }
}

fn img_p(f: &Fixture, store: &ParamStore<f32>) -> Vec<f32> {
    let mut t = Tape::<f32>::new();
    let x = f.g.inputs(&mut t, &f.proj, &f.bp, &f.mlem).unwrap();
    let o = f.g.forward(&mut t, store, &x).unwrap();
    t.value(o.img_p).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]
    #[test]
    fn perturbing_one_slice_group_changes_only_that_slice(i in 0usize..16) {
        let f = fixture(1);
        let base = img_p(&f, &f.store);
        let mut store = f.store.clone();
        let prefix = format!("pnet.slice{i:03}.");
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(&prefix)).map(|(id, _)| id).collect();
        prop_assert!(!ids.is_empty());
        for id in ids {
            for v in store.get_mut(id).values.iter_mut() {
                *v += 0.05;
            }
        }
        let moved = img_p(&f, &store);
        let plane = 24 * 24;
        for z in 0..16 {
            let same = base[z * plane..(z + 1) * plane] == moved[z * plane..(z + 1) * plane];
            prop_assert_eq!(same, z != i, "slice {}", z);
        }
    }
}

#[test]
fn fused_features_have_modules_plus_two_channels() {
    let f = fixture(2);
    let mut t = Tape::<f32>::new();
    let x = f.g.inputs(&mut t, &f.proj, &f.bp, &f.mlem).unwrap();
    let o = f.g.forward(&mut t, &f.store, &x).unwrap();
    assert_eq!(desk_shapes().fused_channels(), 21);
    assert_eq!(o.slices.len(), 16);
    for s in &o.slices {
        assert_eq!(t.shape(s.fused), &[21, 24, 24]);
        assert_eq!(t.shape(s.transformer_slice), &[1, 24, 24]);
    }
    assert_eq!(t.shape(o.img_p), &[1, 16, 24, 24]);
    assert_eq!(t.shape(o.output), &[1, 16, 24, 24]);
    assert!(t.value(o.output).iter().all(|&v| v >= 0.0));
}

#[test]
fn every_slice_has_its_own_parameters() {
    let f = fixture(3);
    let per_slice: Vec<usize> = (0..16).map(|i| f.store.numel_with_prefix(&format!("pnet.slice{i:03}."))).collect();
    assert!(per_slice.iter().all(|&n| n == per_slice[0] && n > 0));
    assert_eq!(f.store.numel_with_prefix("pnet."), 16 * per_slice[0]);
}

#[test]
fn zero_initialised_branches_return_the_mlem_input() {
    let shapes = desk_shapes();
    let cfg = ModelConfig {
        zero_init_output: true,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let g = Generator::new(&cfg, &shapes, &mut store).unwrap();
    store.init(&mut ChaCha8Rng::seed_from_u64(4));
    let f = fixture(4);
    let mut t = Tape::<f32>::new();
    let x = g.inputs(&mut t, &f.proj, &f.bp, &f.mlem).unwrap();
    let o = g.forward(&mut t, &store, &x).unwrap();
    assert_eq!(t.value(o.output), f.mlem.as_slice());
}

#[test]
fn wrong_input_shapes_are_rejected() {
    let f = fixture(5);
    let mut t = Tape::<f32>::new();
    let r = f.g.inputs(&mut t, &f.proj[1..], &f.bp, &f.mlem);
    assert!(matches!(r, Err(Error::Shape(_))));
    let bad = ModelConfig {
        transformer: tipnet::model::TransformerConfig {
            patch_size: 5,
            ..Default::default()
        },
        ..ModelConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    assert!(matches!(Generator::new(&bad, &desk_shapes(), &mut store), Err(Error::Config(_))));
}
