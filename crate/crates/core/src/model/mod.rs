//! TIP-Net: the projection-domain transformer (P-net), the image-domain
//! refiner (I-net) and the WGAN critic.
//!
//! Volumes enter the networks as `[1, nz, ny, nx]` tensors and the one-angle
//! projections as `[n_modules, nv, nu]`, both in the crate's x-fastest layout.

pub mod critic;
pub mod inet;
pub mod layers;
pub mod pnet;
pub mod tipnet;

use serde::{Deserialize, Serialize};

pub use critic::{BoundCritic, Critic, CriticFn};
pub use inet::{INet, UNet3d};
pub use pnet::{PNet, SliceTrace};
pub use tipnet::{Inference, Prepared, TipNet, CRITIC_PREFIX};

use crate::autodiff::{ParamStore, Real, Tape, Var};
use crate::datamodel::{Dims3, ProjDims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            patch_size: 4,
            embed_dim: 64,
            n_heads: 2,
            n_layers: 2,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    /// Hidden widths of the per-slice 2D CNN (input is n_modules + 2, output 1).
    pub pnet_cnn_channels: Vec<usize>,
    /// Level widths of each I-net U-net.
    pub inet_channels: Vec<usize>,
    /// Widths of the first four critic convolutions.
    pub critic_channels: Vec<usize>,
    /// Start the last layer of every generator branch at zero.
    pub zero_init_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            transformer: TransformerConfig::default(),
            pnet_cnn_channels: vec![32, 16],
            inet_channels: vec![16, 32, 64],
            critic_channels: vec![16, 32, 64, 64],
            zero_init_output: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, shapes: &ModelShapes) -> Result<()> {
        let tc = &self.transformer;
        let bad = |m: String| Err(Error::Config(m));
        if tc.patch_size == 0 || tc.embed_dim == 0 || tc.n_heads == 0 || tc.n_layers == 0 || tc.mlp_ratio == 0 {
            return bad("transformer sizes must be positive".into());
        }
        if tc.embed_dim % tc.n_heads != 0 {
            return bad(format!("embed_dim {} not divisible by n_heads {}", tc.embed_dim, tc.n_heads));
        }
        if shapes.nu % tc.patch_size != 0 || shapes.nv % tc.patch_size != 0 {
            return bad(format!(
                "patch_size {} does not divide {}x{} bins",
                tc.patch_size, shapes.nu, shapes.nv
            ));
        }
        if self.inet_channels.is_empty() || self.inet_channels.contains(&0) {
            return bad("inet_channels must be nonempty and positive".into());
        }
        if self.pnet_cnn_channels.contains(&0) || self.critic_channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        let levels = self.inet_channels.len() as u32;
        let min = 2usize.pow(levels - 1);
        if shapes.nx < min || shapes.ny < min || shapes.nz < min {
            return bad(format!("grid too small for a {levels}-level U-net"));
        }
        if shapes.nx < 8 || shapes.ny < 8 || shapes.nz < 8 {
            return bad("critic needs at least 8 voxels per axis".into());
        }
        Ok(())
    }
}

/// Sizes the networks are built for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShapes {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub n_modules: usize,
    pub nu: usize,
    pub nv: usize,
}

impl ModelShapes {
    pub fn new(grid: Dims3, proj: ProjDims) -> Self {
        ModelShapes {
            nx: grid.nx,
            ny: grid.ny,
            nz: grid.nz,
            n_modules: proj.n_modules,
            nu: proj.nu,
            nv: proj.nv,
        }
    }

    /// Channels of the per-slice fused feature map.
    pub fn fused_channels(&self) -> usize {
        self.n_modules + 2
    }

    pub fn volume_shape(&self) -> [usize; 4] {
        [1, self.nz, self.ny, self.nx]
    }

    pub fn projection_shape(&self) -> [usize; 3] {
        [self.n_modules, self.nv, self.nu]
    }
}

/// Generator G = I-net ∘ P-net.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: ModelConfig,
    pub shapes: ModelShapes,
    pub pnet: PNet,
    pub inet: INet,
}

/// Inputs of one subject, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorInputs {
    pub proj: Var,
    pub img_bp: Var,
    pub img_mlem: Var,
}

#[derive(Debug, Clone)]
pub struct GeneratorOutputs {
    pub img_p: Var,
    pub output: Var,
    pub slices: Vec<SliceTrace>,
}

impl Generator {
    pub fn new<T: Real>(config: &ModelConfig, shapes: &ModelShapes, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate(shapes)?;
        Self::with_groups(config, shapes, store, shapes.nz)
    }

    /// Build with only `n_groups` P-net slice groups (for shape dry runs
    /// where allocating every group is unnecessary).
    pub fn with_groups<T: Real>(config: &ModelConfig, shapes: &ModelShapes, store: &mut ParamStore<T>, n_groups: usize) -> Result<Self> {
        config.validate(shapes)?;
        let pnet = PNet::new(config, shapes, store, n_groups)?;
        let inet = INet::new(config, store)?;
        Ok(Generator {
            config: config.clone(),
            shapes: shapes.clone(),
            pnet,
            inet,
        })
    }

    /// Place one subject's arrays on the tape as constants.
    pub fn inputs<T: Real>(&self, t: &mut Tape<T>, proj: &[f32], img_bp: &[f32], img_mlem: &[f32]) -> Result<GeneratorInputs> {
        let cast = |v: &[f32]| v.iter().map(|&x| T::of(x as f64)).collect::<Vec<T>>();
        Ok(GeneratorInputs {
            proj: t.constant(cast(proj), &self.shapes.projection_shape())?,
            img_bp: t.constant(cast(img_bp), &self.shapes.volume_shape())?,
            img_mlem: t.constant(cast(img_mlem), &self.shapes.volume_shape())?,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: &GeneratorInputs) -> Result<GeneratorOutputs> {
        let (img_p, slices) = self.pnet.forward(t, s, x.proj, x.img_bp)?;
        let output = self.inet.forward(t, s, img_p, x.img_bp, x.img_mlem)?;
        Ok(GeneratorOutputs { img_p, output, slices })
    }
}
