//! Training objective: masked L1 on both offset maps plus a weighted L2 on
//! the heatmap.

use crate::codec::Targets;
use crate::error::{IvtError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 10.0 }
    }
}

/// Predicted maps for one frame: heatmap `H×W` (after the sigmoid), 3D
/// offsets `3J×H×W`, 2D offsets `2J×H×W`.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub heatmap: Var,
    pub offsets3d: Var,
    pub offsets2d: Var,
}

/// Scalar graph nodes of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub l1_3d: Var,
    pub l1_2d: Var,
    pub l2_hm: Var,
    pub total: Var,
}

/// Plain values of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub l1_3d: f64,
    pub l1_2d: f64,
    pub l2_hm: f64,
    pub total: f64,
}

impl LossParts {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            l1_3d: g.value(self.l1_3d).item(),
            l1_2d: g.value(self.l1_2d).item(),
            l2_hm: g.value(self.l2_hm).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Mean |pred − target| over the anchor pixels and every channel.
fn masked_l1(g: &mut Graph, pred: Var, target: &Tensor, centers: &[usize], what: &str) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(IvtError::Shape {
            op: "masked_l1",
            lhs: g.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if centers.is_empty() {
        if target.data().iter().any(|&v| v != 0.0) {
            return Err(IvtError::contract(format!(
                "{what} targets are nonzero but no center pixel is marked"
            )));
        }
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let s = target.shape();
    let (ch, plane) = (s[0], s[1] * s[2]);
    let idx: Vec<usize> = (0..ch)
        .flat_map(|c| centers.iter().map(move |&p| c * plane + p))
        .collect();
    let tvals: Vec<f64> = idx.iter().map(|&i| target.data()[i]).collect();
    let n = idx.len();
    let picked = g.take(pred, idx, &[n])?;
    let t = g.input(Tensor::new(&[n], tvals)?);
    let d = g.sub(picked, t)?;
    let a = g.abs(d)?;
    g.mean(a)
}

pub fn total_loss(g: &mut Graph, pred: &Prediction, target: &Targets, w: LossWeights) -> Result<LossParts> {
    if !(w.alpha >= 0.0) {
        return Err(IvtError::config(format!("alpha must be nonnegative, got {}", w.alpha)));
    }
    let l1_3d = masked_l1(g, pred.offsets3d, &target.offsets3d, &target.centers, "3D offset")?;
    let l1_2d = masked_l1(g, pred.offsets2d, &target.offsets2d, &target.centers, "2D offset")?;
    if g.shape(pred.heatmap) != target.heatmap.shape() {
        return Err(IvtError::Shape {
            op: "heatmap loss",
            lhs: g.shape(pred.heatmap).to_vec(),
            rhs: target.heatmap.shape().to_vec(),
        });
    }
    let th = g.input(target.heatmap.clone());
    let d = g.sub(pred.heatmap, th)?;
    let sq = g.square(d)?;
    let l2_hm = g.mean(sq)?;
    let weighted = g.scale(l2_hm, w.alpha)?;
    let offsets = g.add(l1_3d, l1_2d)?;
    let total = g.add(offsets, weighted)?;
    Ok(LossParts {
        l1_3d,
        l1_2d,
        l2_hm,
        total,
    })
}
