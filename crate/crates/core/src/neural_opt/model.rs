//! The full learned model: feature encoder, context encoder and iteration operator.

use super::operator::{Operator, OperatorConfig};
use crate::autodiff::{ParamStore, Params, Tensor};
use crate::backbone::{prepare, Backbone, BackboneConfig};
use crate::pointcloud::PointCloud;
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub operator: OperatorConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub feature: Backbone,
    pub context: Backbone,
    pub operator: Operator,
}

/// Everything the operator needs from one frame.
#[derive(Debug, Clone)]
pub struct FrameInputs {
    pub points: Arc<Vec<[f64; 3]>>,
    /// `[N, D]` point features used for correlation.
    pub features: Tensor,
    /// `[N, 3H]` context contribution to the GRU.
    pub context: Tensor,
    /// `[N, H]` initial hidden state of edges leaving this frame.
    pub hidden0: Tensor,
}

impl Model {
    /// The operator's context width follows the backbone output width.
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut op = cfg.operator.clone();
        op.context_width = cfg.backbone.out_width();
        Model {
            feature: Backbone::new("fnet.", cfg.backbone.clone()),
            context: Backbone::new("cnet.", cfg.backbone.clone()),
            operator: Operator::new("op.", op),
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.feature.cfg.clone(),
            operator: self.operator.cfg.clone(),
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        self.feature.init(&mut store, rng);
        self.context.init(&mut store, rng);
        self.operator.init(&mut store, rng);
        store
    }

    /// Configuration as stored in checkpoint manifests.
    pub fn architecture(&self) -> serde_json::Value {
        serde_json::to_value(self.config()).expect("config serializes")
    }

    pub fn from_architecture(v: &serde_json::Value) -> std::result::Result<Model, serde_json::Error> {
        Ok(Model::new(&serde_json::from_value(v.clone())?))
    }

    pub fn frame_inputs(&self, p: &Params, cloud: &PointCloud) -> Result<FrameInputs> {
        let prep = prepare(cloud, &self.feature.cfg)?;
        let features = self.feature.extract(p, &prep)?.out;
        let ctx = self.context.extract(p, &prep)?.out;
        Ok(FrameInputs {
            points: Arc::new(cloud.points.clone()),
            features,
            context: self.operator.context_projection(p, &ctx)?,
            hidden0: self.operator.initial_hidden(&ctx)?,
        })
    }
}
