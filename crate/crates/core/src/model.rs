//! End-to-end pose network: offset head, tokenizer + attention stack, and
//! the convolutional prediction heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IvtError, Result};
use crate::igt::{retile_blocks, OffsetHead};
use crate::ivt::{IvtConfig, IvtModel, StageMacs};
use crate::loss::Prediction;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Architecture hyperparameters that are independent of the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scales: Vec<usize>,
    pub heads: usize,
    pub igt_heads: usize,
    pub layers: usize,
    pub causal: bool,
    /// Hidden channels of the 2D offset head.
    pub offset_hidden: usize,
    /// Hidden channels of the prediction heads.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: vec![2, 4, 8],
            heads: 2,
            igt_heads: 1,
            layers: 3,
            causal: false,
            offset_hidden: 8,
            head_hidden: 16,
        }
    }
}

impl ModelConfig {
    /// The attention-stack configuration for a `joints`-joint, `channels`
    /// channel, `height×width` feature grid.
    pub fn ivt(&self, joints: usize, channels: usize, height: usize, width: usize) -> IvtConfig {
        IvtConfig {
            joints,
            channels,
            height,
            width,
            scales: self.scales.clone(),
            heads: self.heads,
            igt_heads: self.igt_heads,
            layers: self.layers,
            causal: self.causal,
        }
    }
}

/// Maps the finest token map, re-tiled to a `(J·C)×H×W` pixel map, to the
/// heatmap (1 channel, squashed by a sigmoid) and the 3D offsets (3J).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionHeads {
    pub prefix: String,
    pub in_channels: usize,
    pub joints: usize,
}

impl PredictionHeads {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: impl Into<String>,
        in_channels: usize,
        hidden: usize,
        joints: usize,
        rng: &mut R,
    ) -> Self {
        let prefix = prefix.into();
        let out = 1 + 3 * joints;
        store.init_uniform(format!("{prefix}.conv1.w"), &[hidden, in_channels, 3, 3], in_channels * 9, rng);
        store.init_zeros(format!("{prefix}.conv1.b"), &[hidden]);
        store.init_uniform(format!("{prefix}.conv2.w"), &[out, hidden, 3, 3], hidden * 9, rng);
        store.init_zeros(format!("{prefix}.conv2.b"), &[out]);
        PredictionHeads {
            prefix,
            in_channels,
            joints,
        }
    }

    /// `(heatmap H×W, offsets 3J×H×W)` from a `C_in×H×W` map.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, map: Var) -> Result<(Var, Var)> {
        let &[c, h, w] = g.shape(map) else {
            return Err(IvtError::Shape {
                op: "prediction heads",
                lhs: g.shape(map).to_vec(),
                rhs: vec![self.in_channels, 0, 0],
            });
        };
        if c != self.in_channels {
            return Err(IvtError::config(format!(
                "prediction heads expect {} channels, got {c}",
                self.in_channels
            )));
        }
        let p = &self.prefix;
        let w1 = g.param(store, &format!("{p}.conv1.w"))?;
        let b1 = g.param(store, &format!("{p}.conv1.b"))?;
        let w2 = g.param(store, &format!("{p}.conv2.w"))?;
        let b2 = g.param(store, &format!("{p}.conv2.b"))?;
        let x = g.conv2d(map, w1, b1)?;
        let x = g.gelu(x)?;
        let x = g.conv2d(x, w2, b2)?;
        let logits = g.slice(x, 0, 0, 1)?;
        let logits = g.reshape(logits, &[h, w])?;
        let heat = g.sigmoid(logits)?;
        let off = g.slice(x, 0, 1, 3 * self.joints)?;
        Ok((heat, off))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseModel {
    pub ivt: IvtModel,
    pub offset_head: OffsetHead,
    pub heads: PredictionHeads,
}

/// Per-frame predictions of one clip plus stage costs.
#[derive(Clone, Debug)]
pub struct ClipOutput {
    pub predictions: Vec<Prediction>,
    pub macs: StageMacs,
}

impl PoseModel {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: IvtConfig, m: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if m.offset_hidden == 0 || m.head_hidden == 0 {
            return Err(IvtError::config("head hidden widths must be positive"));
        }
        let offset_head = OffsetHead::init(store, "offset", cfg.channels, m.offset_hidden, cfg.joints, rng);
        let heads = PredictionHeads::init(store, "head", cfg.map_channels(), m.head_hidden, cfg.joints, rng);
        let ivt = IvtModel::init(store, cfg, rng)?;
        Ok(PoseModel {
            ivt,
            offset_head,
            heads,
        })
    }

    pub fn cfg(&self) -> &IvtConfig {
        &self.ivt.cfg
    }

    /// Runs one clip. `flows` has one field per adjacent frame pair. With
    /// `teacher` set, those 2D offset maps steer the tokenizer; otherwise
    /// the offset head's own predictions do (as constants).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &[Tensor],
        flows: &[Tensor],
        teacher: Option<&[Tensor]>,
    ) -> Result<ClipOutput> {
        let frames: Vec<Var> = features.iter().map(|f| g.input(f.clone())).collect();
        self.forward_vars(g, store, &frames, flows, teacher)
    }

    /// [`PoseModel::forward`] on feature maps already in the graph.
    pub fn forward_vars(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &[Var],
        flows: &[Tensor],
        teacher: Option<&[Tensor]>,
    ) -> Result<ClipOutput> {
        let cfg = self.cfg();
        let offsets2d = frames
            .iter()
            .map(|&f| self.offset_head.forward(g, store, f))
            .collect::<Result<Vec<_>>>()?;
        let gather: Vec<Tensor> = match teacher {
            Some(t) if t.len() == frames.len() => t.to_vec(),
            Some(t) => {
                return Err(IvtError::contract(format!(
                    "{} teacher offset maps for {} frames",
                    t.len(),
                    frames.len()
                )))
            }
            None => offsets2d.iter().map(|&o| g.value(o).clone()).collect(),
        };
        let alignments = self.ivt.alignments(flows, frames.len())?;
        let (tokens, macs) = self.ivt.forward(g, store, frames, &gather, &alignments)?;
        let mut predictions = Vec::with_capacity(tokens.len());
        for (&tok, &off2) in tokens.iter().zip(&offsets2d) {
            let map = retile_blocks(g, tok, cfg.map_channels(), cfg.height, cfg.width, cfg.finest())?;
            let (heatmap, offsets3d) = self.heads.forward(g, store, map)?;
            predictions.push(Prediction {
                heatmap,
                offsets3d,
                offsets2d: off2,
            });
        }
        Ok(ClipOutput { predictions, macs })
    }
}
