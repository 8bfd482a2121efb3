//! Generator, critic and their shared parameter store as one unit.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Critic, Generator, ModelConfig, ModelShapes};
use crate::autodiff::{ParamId, ParamStore, Tape};
use crate::datamodel::{check_tag, read_json, write_json, ProjectionSet, VolumeGrid};
use crate::error::{Error, Result};

/// Critic parameter names start with this prefix.
pub const CRITIC_PREFIX: &str = "critic.";
const MODEL_FORMAT: &str = "tipnet-model";

/// One subject's network inputs and target in normalised units.
///
/// Volumes are divided by the maximum of the one-angle MLEM image (the
/// target shares that factor so the output can be mapped back), the
/// back-projection and the projections by their own maxima.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub proj: Vec<f32>,
    pub bp: Vec<f32>,
    pub mlem: Vec<f32>,
    pub target: Option<Vec<f32>>,
    pub scale: f32,
}

fn normalised(v: &[f32], what: &str, id: &str) -> Result<(Vec<f32>, f32)> {
    let m = v.iter().copied().fold(0.0f32, f32::max);
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Dataset(format!("{id}: {what} has no positive values")));
    }
    Ok((v.iter().map(|&x| x / m).collect(), m))
}

impl Prepared {
    pub fn new(
        id: &str,
        proj: &ProjectionSet,
        bp: &VolumeGrid,
        mlem: &VolumeGrid,
        target: Option<&VolumeGrid>,
    ) -> Result<Self> {
        if proj.dims().n_angles != 1 {
            return Err(Error::Shape(format!("{id}: expected one-angle projections, got {} angles", proj.dims().n_angles)));
        }
        if bp.dims() != mlem.dims() || target.is_some_and(|t| t.dims() != mlem.dims()) {
            return Err(Error::Shape(format!("{id}: input volumes differ in size")));
        }
        let (proj, _) = normalised(proj.values(), "projection", id)?;
        let (bp, _) = normalised(bp.values(), "back-projection", id)?;
        let (mlem, scale) = normalised(mlem.values(), "MLEM image", id)?;
        let target = target.map(|t| t.values().iter().map(|&x| x / scale).collect());
        Ok(Prepared {
            id: id.to_string(),
            proj,
            bp,
            mlem,
            target,
            scale,
        })
    }
}

/// Generator outputs mapped back to the input's activity units.
#[derive(Debug, Clone)]
pub struct Inference {
    pub img_p: VolumeGrid,
    pub output: VolumeGrid,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    format: String,
    version: u32,
    config: ModelConfig,
    shapes: ModelShapes,
    checkpoint: String,
}

pub struct TipNet {
    pub config: ModelConfig,
    pub shapes: ModelShapes,
    pub generator: Generator,
    pub critic: Critic,
    pub store: ParamStore<f32>,
}

impl TipNet {
    /// Build and Xavier-initialise from `seed`.
    pub fn new(config: &ModelConfig, shapes: &ModelShapes, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let generator = Generator::new(config, shapes, &mut store)?;
        let critic = Critic::new(config, &mut store)?;
        store.init(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(TipNet {
            config: config.clone(),
            shapes: shapes.clone(),
            generator,
            critic,
            store,
        })
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| !p.name.starts_with(CRITIC_PREFIX))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(CRITIC_PREFIX))
            .map(|(id, _)| id)
            .collect()
    }

    /// `(IMG_p, final output)` in normalised units.
    pub fn forward_prepared(&self, p: &Prepared) -> Result<(Vec<f32>, Vec<f32>)> {
        let mut t = Tape::new();
        let x = self.generator.inputs(&mut t, &p.proj, &p.bp, &p.mlem)?;
        let o = self.generator.forward(&mut t, &self.store, &x)?;
        Ok((t.value(o.img_p).to_vec(), t.value(o.output).to_vec()))
    }

    pub fn infer(&self, proj: &ProjectionSet, bp: &VolumeGrid, mlem: &VolumeGrid) -> Result<Inference> {
        let p = Prepared::new("input", proj, bp, mlem, None)?;
        let (img_p, out) = self.forward_prepared(&p)?;
        let back = |v: Vec<f32>| mlem.with_values(v.into_iter().map(|x| x * p.scale).collect());
        Ok(Inference {
            img_p: back(img_p)?,
            output: back(out)?,
        })
    }

    /// Write `<stem>.model.json` (configuration) and the `<stem>.ckpt.*` pair.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<PathBuf> {
        let stem = stem.as_ref().to_string_lossy().into_owned();
        let ckpt = PathBuf::from(format!("{stem}.ckpt.json"));
        self.store.save_checkpoint(&ckpt)?;
        let path = PathBuf::from(format!("{stem}.model.json"));
        let manifest = ModelManifest {
            format: MODEL_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            shapes: self.shapes.clone(),
            checkpoint: crate::datamodel::file_name(&ckpt),
        };
        write_json(&path, &manifest)?;
        Ok(path)
    }

    /// Load from a `.model.json` written by [`TipNet::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let m: ModelManifest = read_json(path)?;
        check_tag("format", &m.format, MODEL_FORMAT)?;
        let mut net = TipNet::new(&m.config, &m.shapes, 0)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        net.store.load_checkpoint(dir.join(&m.checkpoint))?;
        Ok(net)
    }
}
