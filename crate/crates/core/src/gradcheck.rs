//! Named finite-difference checks of every differentiable unit, on small
//! seeded random instances.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{encode_targets, Pose3D};
use crate::error::{IvtError, Result};
use crate::igt::IgtParams;
use crate::ivt::{isa, ita, Alignment, IvtConfig, IvtLayer, ScaleLayer};
use crate::loss::{total_loss, LossWeights, Prediction};
use crate::model::{ModelConfig, PoseModel, PredictionHeads};
use crate::nn::{AttentionConfig, BlockParams};
use crate::tensor::{grad_check, grad_check_params, Graph, ParamStore, Tensor, Var};

/// Parameter components probed per tensor.
const PROBES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Unit {
    Mhsa,
    FfnLn,
    Igt,
    Isa,
    Ita,
    IvtLayer,
    CisaMita,
    Heads,
    Loss,
    Full,
}

impl Unit {
    pub const ALL: [Unit; 10] = [
        Unit::Mhsa,
        Unit::FfnLn,
        Unit::Igt,
        Unit::Isa,
        Unit::Ita,
        Unit::IvtLayer,
        Unit::CisaMita,
        Unit::Heads,
        Unit::Loss,
        Unit::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Unit::Mhsa => "mhsa",
            Unit::FfnLn => "ffn-ln",
            Unit::Igt => "igt",
            Unit::Isa => "isa",
            Unit::Ita => "ita",
            Unit::IvtLayer => "ivt-layer",
            Unit::CisaMita => "cisa-mita",
            Unit::Heads => "heads",
            Unit::Loss => "loss",
            Unit::Full => "full",
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Unit {
    type Err = IvtError;

    fn from_str(s: &str) -> Result<Self> {
        let alias = match s {
            "nn-blocks" => "mhsa",
            other => other,
        };
        Unit::ALL
            .into_iter()
            .find(|u| u.name() == alias)
            .ok_or_else(|| IvtError::config(format!("unknown gradient-check unit '{s}'")))
    }
}

fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Σ w ⊙ y for a fixed random weight `w` shaped like `y`.
fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.input(w.clone());
    let p = g.mul(y, wv)?;
    g.sum(p)
}

/// Checks input and parameter gradients of `f`; returns the worse error.
fn both<F>(store: &ParamStore, x: &Tensor, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore, Var) -> Result<Var> + Sync,
{
    let e_in = grad_check(|g, v| f(g, store, v), x, eps)?;
    let e_par = grad_check_params(
        store,
        |_| true,
        |g, s| {
            let v = g.input(x.clone());
            f(g, s, v)
        },
        eps,
        PROBES,
    )?;
    Ok(e_in.max(e_par))
}

fn block(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<BlockParams> {
    Ok(BlockParams::init(store, prefix, AttentionConfig::new(d, heads)?, rng))
}

fn random_flows(frames: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (1..frames).map(|_| Tensor::uniform(&[2, h, w], -3.0, 3.0, rng)).collect()
}

/// Splits `[T·N, D]` into T frames of `[N, D]`.
fn frames_of(g: &mut Graph, v: Var, t: usize, n: usize) -> Result<Vec<Var>> {
    (0..t).map(|i| g.slice(v, 0, i * n, n)).collect()
}

/// Sums weighted outputs of several frames.
fn weighted_frames(g: &mut Graph, ys: &[Var], ws: &[Tensor]) -> Result<Var> {
    let mut acc = weighted_sum(g, ys[0], &ws[0])?;
    for (&y, w) in ys.iter().zip(ws).skip(1) {
        let s = weighted_sum(g, y, w)?;
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// Largest relative gradient error of `unit` on the instance drawn from
/// `seed`.
pub fn check_unit(unit: Unit, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut store = ParamStore::new();
    match unit {
        Unit::Mhsa => {
            let b = block(&mut store, "b", 4, 2, &mut rng)?;
            perturb(&mut store, &mut rng);
            let x = rand_t(&[3, 4], &mut rng);
            let w = rand_t(&[3, 4], &mut rng);
            both(&store, &x, eps, |g, s, v| {
                let y = b.mhsa(g, s, v)?;
                weighted_sum(g, y, &w)
            })
        }
        Unit::FfnLn => {
            let b = block(&mut store, "b", 4, 1, &mut rng)?;
            perturb(&mut store, &mut rng);
            let x = rand_t(&[3, 4], &mut rng);
            let w = rand_t(&[3, 4], &mut rng);
            both(&store, &x, eps, |g, s, v| {
                let n = b.ln(g, s, "ln2", v)?;
                let f = b.ffn(g, s, n)?;
                let y = g.add(v, f)?;
                weighted_sum(g, y, &w)
            })
        }
        Unit::Igt => {
            let p = IgtParams::init(&mut store, "igt", 2, 1, 2, 2, &mut rng)?;
            perturb(&mut store, &mut rng);
            let x = rand_t(&[1, 4, 4], &mut rng);
            let offsets = Tensor::uniform(&[4, 4, 4], -3.0, 3.0, &mut rng);
            let w = rand_t(&[4, 8], &mut rng);
            both(&store, &x, eps, |g, s, v| {
                let y = p.frame(g, s, v, &offsets)?;
                weighted_sum(g, y, &w)
            })
        }
        Unit::Isa => {
            let b = block(&mut store, "isa", 4, 2, &mut rng)?;
            store.init_uniform("pos", &[3, 4], 4, &mut rng);
            perturb(&mut store, &mut rng);
            let x = rand_t(&[3, 4], &mut rng);
            let w = rand_t(&[3, 4], &mut rng);
            both(&store, &x, eps, |g, s, v| {
                let y = isa(g, s, &b, "pos", v)?;
                weighted_sum(g, y, &w)
            })
        }
        Unit::Ita => {
            let causal = rng.gen_bool(0.5);
            let b = block(&mut store, "ita", 4, 2, &mut rng)?;
            perturb(&mut store, &mut rng);
            let al = Alignment::from_flows(&random_flows(3, 4, 4, &mut rng), 3, 4, 4, 2)?;
            let x = rand_t(&[12, 4], &mut rng);
            let ws: Vec<Tensor> = (0..3).map(|_| rand_t(&[4, 4], &mut rng)).collect();
            both(&store, &x, eps, |g, s, v| {
                let fr = frames_of(g, v, 3, 4)?;
                let ys = ita(g, s, &b, &fr, &al, causal)?;
                weighted_frames(g, &ys, &ws)
            })
        }
        Unit::IvtLayer => {
            let layer = IvtLayer::init(&mut store, "l", 4, AttentionConfig::new(4, 2)?, &mut rng);
            perturb(&mut store, &mut rng);
            let al = Alignment::from_flows(&random_flows(2, 4, 4, &mut rng), 2, 4, 4, 2)?;
            let x = rand_t(&[8, 4], &mut rng);
            let ws: Vec<Tensor> = (0..2).map(|_| rand_t(&[4, 4], &mut rng)).collect();
            both(&store, &x, eps, |g, s, v| {
                let fr = frames_of(g, v, 2, 4)?;
                let ys = layer.forward(g, s, &fr, &al, false)?;
                weighted_frames(g, &ys, &ws)
            })
        }
        Unit::CisaMita => {
            let cfg = IvtConfig {
                joints: 1,
                channels: 1,
                height: 4,
                width: 4,
                scales: vec![1, 2],
                heads: 1,
                igt_heads: 1,
                layers: 1,
                causal: false,
            };
            let layer = ScaleLayer::init(&mut store, "l", &cfg, &mut rng)?;
            perturb(&mut store, &mut rng);
            let flows = random_flows(2, 4, 4, &mut rng);
            let als = cfg
                .scales
                .iter()
                .map(|&s| Alignment::from_flows(&flows, 2, 4, 4, s))
                .collect::<Result<Vec<_>>>()?;
            // Per frame: fine tokens [16, 1] then coarse tokens [4, 4].
            let x = rand_t(&[64], &mut rng);
            let ws: Vec<Tensor> = (0..2).map(|_| rand_t(&[16, 1], &mut rng)).collect();
            both(&store, &x, eps, |g, s, v| {
                let fine = g.slice(v, 0, 0, 32)?;
                let fine = g.reshape(fine, &[32, 1])?;
                let coarse = g.slice(v, 0, 32, 32)?;
                let coarse = g.reshape(coarse, &[8, 4])?;
                let fine = frames_of(g, fine, 2, 16)?;
                let coarse = frames_of(g, coarse, 2, 4)?;
                let ys = layer.forward(g, s, &cfg, &[fine.clone(), coarse], &fine, &als)?;
                weighted_frames(g, &ys, &ws)
            })
        }
        Unit::Heads => {
            let heads = PredictionHeads::init(&mut store, "head", 2, 3, 1, &mut rng);
            perturb(&mut store, &mut rng);
            let x = rand_t(&[2, 3, 4], &mut rng);
            let w = rand_t(&[4, 3, 4], &mut rng);
            both(&store, &x, eps, |g, s, v| {
                let (hm, off) = heads.forward(g, s, v)?;
                let hm = g.reshape(hm, &[1, 3, 4])?;
                let y = g.concat(&[hm, off], 0)?;
                weighted_sum(g, y, &w)
            })
        }
        Unit::Loss => {
            let poses: Vec<Pose3D> = (0..2)
                .map(|_| {
                    Pose3D::new(
                        (0..2)
                            .map(|_| [rng.gen_range(0.0..4.4), rng.gen_range(0.0..3.4), rng.gen_range(1.0..3.0)])
                            .collect(),
                    )
                })
                .collect();
            let t = encode_targets(&poses, 2, 4, 5, 1.5)?;
            let x = Tensor::uniform(&[11, 4, 5], -2.0, 2.0, &mut rng);
            let alpha = rng.gen_range(0.0..20.0);
            grad_check(
                |g, v| {
                    let hm = g.slice(v, 0, 0, 1)?;
                    let hm = g.reshape(hm, &[4, 5])?;
                    let hm = g.sigmoid(hm)?;
                    let p = Prediction {
                        heatmap: hm,
                        offsets3d: g.slice(v, 0, 1, 6)?,
                        offsets2d: g.slice(v, 0, 7, 4)?,
                    };
                    Ok(total_loss(g, &p, &t, LossWeights { alpha })?.total)
                },
                &x,
                eps,
            )
        }
        Unit::Full => {
            let m = ModelConfig {
                scales: vec![1, 2],
                heads: 1,
                igt_heads: 1,
                layers: 1,
                causal: false,
                offset_hidden: 2,
                head_hidden: 2,
            };
            let cfg = m.ivt(1, 1, 4, 4);
            let model = PoseModel::init(&mut store, cfg, &m, &mut rng)?;
            perturb(&mut store, &mut rng);
            let flows = random_flows(2, 4, 4, &mut rng);
            let pose = |rng: &mut ChaCha8Rng| {
                Pose3D::new(vec![[rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64, rng.gen_range(1.0..3.0)]])
            };
            let targets = (0..2)
                .map(|_| encode_targets(&[pose(&mut rng)], 1, 4, 4, 1.0))
                .collect::<Result<Vec<_>>>()?;
            let teacher: Vec<Tensor> = targets.iter().map(|t| t.offsets2d.clone()).collect();
            let x = rand_t(&[2, 4, 4], &mut rng);
            let f = |g: &mut Graph, s: &ParamStore, v: Var| -> Result<Var> {
                let f0 = g.slice(v, 0, 0, 1)?;
                let f1 = g.slice(v, 0, 1, 1)?;
                let out = model.forward_vars(g, s, &[f0, f1], &flows, Some(&teacher))?;
                let mut acc: Option<Var> = None;
                for (p, t) in out.predictions.iter().zip(&targets) {
                    let l = total_loss(g, p, t, LossWeights::default())?.total;
                    acc = Some(match acc {
                        Some(a) => g.add(a, l)?,
                        None => l,
                    });
                }
                Ok(acc.expect("two frames"))
            };
            both(&store, &x, eps, f)
        }
    }
}

/// Worst error of `unit` over `instances` consecutive seeds from `seed`.
pub fn check_unit_many(unit: Unit, seed: u64, instances: usize, eps: f64) -> Result<f64> {
    (0..instances as u64).try_fold(0.0f64, |m, i| Ok(m.max(check_unit(unit, seed.wrapping_add(i), eps)?)))
}
