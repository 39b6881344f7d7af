//! The full detector: Siamese backbone, fusion neck and detection head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{extract_pyramid, BackboneParams, DEFAULT_WIDTHS};
use crate::boxes::Detection;
use crate::data::Episode;
use crate::error::{invalid, Result};
use crate::head::{assign_targets, decode_detections, head_forward, DecodeConfig, HeadOutputs, HeadParams, LevelRanges};
use crate::loss::{combined_loss, LossBreakdown, LossConfig};
use crate::neck::{FeaturePyramid, NeckConfig, NeckParams};
use crate::tensor::{Graph, ParamBuilder, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone_widths: Vec<usize>,
    pub neck: NeckConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_widths: DEFAULT_WIDTHS.to_vec(),
            neck: NeckConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.neck.validate()?;
        let top = *self.neck.pyramid_levels().last().expect("validated levels") as usize;
        if top > self.backbone_widths.len() {
            return invalid(format!(
                "level {top} needs {top} backbone stages, only {} configured",
                self.backbone_widths.len()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: BackboneParams,
    pub neck: NeckParams,
    pub head: HeadParams,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub head: HeadOutputs,
    pub fused: FeaturePyramid,
}

impl Model {
    /// Builds the architecture and a freshly initialised parameter store.
    pub fn new<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let taps = cfg.neck.pyramid_levels();
        let backbone = BackboneParams::new(&mut pb.sub("backbone"), 3, &cfg.backbone_widths, &taps)?;
        let neck = NeckParams::new(&mut pb.sub("neck"), &cfg.neck, &backbone.tap_channels())?;
        let head = HeadParams::new(&mut pb.sub("head"), cfg.neck.attention.dim, &cfg.neck.query_levels)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                neck,
                head,
            },
            store,
        ))
    }

    pub fn forward_vars<T: Scalar>(&self, g: &mut Graph<'_, T>, query: Var, support: Var) -> Result<ModelOutput> {
        let qp = extract_pyramid(g, query, &self.backbone)?;
        let sp = extract_pyramid(g, support, &self.backbone)?;
        let fused = self.neck.forward(g, &qp, &sp)?;
        let head = head_forward(g, &fused, &self.head)?;
        Ok(ModelOutput { head, fused })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, query: &Tensor<T>, support: &Tensor<T>) -> Result<ModelOutput> {
        let q = g.constant(query.clone());
        let s = g.constant(support.clone());
        self.forward_vars(g, q, s)
    }

    /// Loss of one episode, built on `g`.
    pub fn episode_loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        ep: &Episode,
        ranges: &LevelRanges,
        loss: &LossConfig,
    ) -> Result<(Var, LossBreakdown)> {
        let out = self.forward(g, &ep.query.image.to_tensor(), &ep.support.to_tensor())?;
        let grid = out.head.grid(g);
        let norm = ep.query.image.width.max(ep.query.image.height) as f64;
        let targets = assign_targets(&grid, &ep.gts, ranges, norm)?;
        let flat = out.head.flatten(g)?;
        combined_loss(g, &flat, &targets, loss)
    }

    /// Inference on one episode.
    pub fn detect<T: Scalar>(&self, store: &ParamStore<T>, ep: &Episode, decode: &DecodeConfig) -> Result<Vec<Detection>> {
        let mut g = Graph::inference(store);
        let out = self.forward(&mut g, &ep.query.image.to_tensor(), &ep.support.to_tensor())?;
        let values = out.head.values(&g);
        Ok(decode_detections(&values, decode, ep.class_id))
    }
}
