//! Toy optimization driver and full-pipeline evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_poses, Pose3D};
use crate::error::{parse_toml, IvtError, Result};
use crate::loss::{total_loss, LossValues, LossWeights};
use crate::metrics::{match_and_evaluate, EvalReport};
use crate::model::{ModelConfig, PoseModel};
use crate::synth::{Scene, SceneSpec};
use crate::tensor::{Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Step fractions at which the learning rate drops tenfold.
    pub milestones: Vec<f64>,
    pub seed: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Frames per training clip.
    pub frames: usize,
    pub alpha: f64,
    /// Steer the tokenizer with ground-truth 2D offsets.
    pub teacher_forcing: bool,
    /// Heatmap confidence threshold for decoding.
    pub threshold: f64,
    pub max_people: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 5e-4,
            milestones: vec![0.6, 0.8],
            seed: 42,
            clip_norm: 1.0,
            frames: 5,
            alpha: 10.0,
            teacher_forcing: true,
            threshold: 0.5,
            max_people: 8,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let t = &self.train;
        if t.steps == 0 {
            return Err(IvtError::config("train.steps must be at least 1"));
        }
        if !(t.lr >= 0.0) || !t.lr.is_finite() {
            return Err(IvtError::config(format!("train.lr must be finite and nonnegative, got {}", t.lr)));
        }
        if t.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(IvtError::config("train.milestones must lie in [0, 1]"));
        }
        if !(t.clip_norm >= 0.0) {
            return Err(IvtError::config("train.clip_norm must be nonnegative"));
        }
        if t.frames == 0 || t.frames > self.scene.frames {
            return Err(IvtError::config(format!(
                "train.frames must be in 1..={} (scene frames), got {}",
                self.scene.frames, t.frames
            )));
        }
        if !(t.alpha >= 0.0) {
            return Err(IvtError::config("train.alpha must be nonnegative"));
        }
        if !(t.threshold > 0.0 && t.threshold < 1.0) || t.max_people == 0 {
            return Err(IvtError::config("train.threshold must be in (0, 1) and max_people ≥ 1"));
        }
        self.model
            .ivt(self.scene.joints, self.scene.channels, self.scene.height, self.scene.width)
            .validate()
    }

    /// Fresh model and parameters seeded by `train.seed`.
    pub fn init_model(&self) -> Result<(PoseModel, ParamStore)> {
        let s = &self.scene;
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        let mut store = ParamStore::new();
        let model = PoseModel::init(&mut store, self.model.ivt(s.joints, s.channels, s.height, s.width), &self.model, &mut rng)?;
        Ok((model, store))
    }

    /// Model structure for a stored parameter set, checking compatibility.
    pub fn model_for(&self, params: &ParamStore) -> Result<PoseModel> {
        let (model, fresh) = self.init_model()?;
        fresh.check_compatible(params)?;
        Ok(model)
    }
}

/// Learning rate in effect at 0-based `step`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let drops = cfg
        .milestones
        .iter()
        .filter(|&&m| step as f64 >= m * cfg.steps as f64)
        .count();
    cfg.lr * 0.1f64.powi(drops as i32)
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..Default::default()
        }
    }

    /// Applies one update from the gradients held by `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (name, p) in store.iter_mut() {
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in store.iter_mut() {
            if let Some(g) = t.grad() {
                let scaled = g.iter().map(|x| x * s).collect();
                t.set_grad(scaled).expect("same length");
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossValues,
    pub grad_norm: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] IvtError),
    /// Training hit a non-finite loss or gradient; `last_good` holds the
    /// parameters before that step.
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite {
        step: usize,
        detail: String,
        last_good: Box<ParamStore>,
        history: Vec<StepRecord>,
    },
}

pub struct TrainRun {
    pub model: PoseModel,
    pub params: ParamStore,
    pub history: Vec<StepRecord>,
}

/// First frame of the clip used at `step`.
fn clip_start(scene_frames: usize, clip: usize, step: usize) -> usize {
    step % (scene_frames - clip + 1)
}

/// Mean loss over the frames of one clip, with per-term means.
fn clip_loss(
    g: &mut Graph,
    model: &PoseModel,
    params: &ParamStore,
    scene: &Scene,
    start: usize,
    cfg: &TrainConfig,
) -> Result<(crate::tensor::Var, LossValues)> {
    let end = start + cfg.frames;
    let teacher: Vec<Tensor> = scene.targets[start..end].iter().map(|t| t.offsets2d.clone()).collect();
    let out = model.forward(
        g,
        params,
        &scene.features[start..end],
        &scene.flows[start..end - 1],
        cfg.teacher_forcing.then_some(&teacher[..]),
    )?;
    let w = LossWeights { alpha: cfg.alpha };
    let mut totals = Vec::with_capacity(cfg.frames);
    let mut sum = LossValues::default();
    for (p, t) in out.predictions.iter().zip(&scene.targets[start..end]) {
        let parts = total_loss(g, p, t, w)?;
        let v = parts.values(g);
        sum.l1_3d += v.l1_3d;
        sum.l1_2d += v.l1_2d;
        sum.l2_hm += v.l2_hm;
        totals.push(parts.total);
    }
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = g.add(acc, t)?;
    }
    let n = cfg.frames as f64;
    let loss = g.scale(acc, 1.0 / n)?;
    let values = LossValues {
        l1_3d: sum.l1_3d / n,
        l1_2d: sum.l1_2d / n,
        l2_hm: sum.l2_hm / n,
        total: g.value(loss).item(),
    };
    Ok((loss, values))
}

/// Trains from fresh parameters.
pub fn train(scene: &Scene, cfg: &RunConfig) -> std::result::Result<TrainRun, TrainError> {
    cfg.validate()?;
    if scene.spec != cfg.scene {
        return Err(IvtError::config("scene does not match the run configuration").into());
    }
    let (model, params) = cfg.init_model()?;
    train_from(scene, cfg, model, params)
}

/// Trains starting from the given parameters.
pub fn train_from(
    scene: &Scene,
    cfg: &RunConfig,
    model: PoseModel,
    mut params: ParamStore,
) -> std::result::Result<TrainRun, TrainError> {
    let t = &cfg.train;
    let mut adam = Adam::new();
    let mut history = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        let fail = |detail: String, params: &ParamStore, history: &[StepRecord]| TrainError::NonFinite {
            step,
            detail,
            last_good: Box::new(params.clone()),
            history: history.to_vec(),
        };
        let mut g = Graph::new();
        let start = clip_start(scene.features.len(), t.frames, step);
        let (loss, values) = match clip_loss(&mut g, &model, &params, scene, start, t) {
            Ok(v) => v,
            Err(IvtError::Numeric { context, index }) => {
                return Err(fail(format!("{context} (component {index})"), &params, &history))
            }
            Err(e) => return Err(e.into()),
        };
        if !values.total.is_finite() {
            return Err(fail(format!("loss {}", values.total), &params, &history));
        }
        match g.backward(loss) {
            Ok(()) => {}
            Err(IvtError::Numeric { context, index }) => {
                return Err(fail(format!("{context} (component {index})"), &params, &history))
            }
            Err(e) => return Err(e.into()),
        }
        let mut next = params.clone();
        next.collect_grads(&g);
        let grad_norm = clip_grad_norm(&mut next, t.clip_norm);
        if !grad_norm.is_finite() {
            return Err(fail(format!("gradient norm {grad_norm}"), &params, &history));
        }
        let lr = lr_at(t, step);
        adam.step(&mut next, lr);
        next.clear_grads();
        if let Some((name, _)) = next.iter().find(|(_, p)| p.first_non_finite().is_some()) {
            return Err(fail(format!("parameter '{name}' after update"), &params, &history));
        }
        params = next;
        history.push(StepRecord {
            step,
            lr,
            loss: values,
            grad_norm,
        });
    }
    Ok(TrainRun { model, params, history })
}

/// Training log CSV: `step, lr, total, l1_3d, l1_2d, l2_hm, grad_norm`.
pub fn write_history_csv<W: Write>(w: W, history: &[StepRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| IvtError::Io(std::io::Error::other(e));
    wr.write_record(["step", "lr", "total", "l1_3d", "l1_2d", "l2_hm", "grad_norm"])
        .map_err(err)?;
    for r in history {
        wr.write_record([
            r.step.to_string(),
            r.lr.to_string(),
            r.loss.total.to_string(),
            r.loss.l1_3d.to_string(),
            r.loss.l1_2d.to_string(),
            r.loss.l2_hm.to_string(),
            r.grad_norm.to_string(),
        ])
        .map_err(err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-frame `(heatmap H×W, 3D offsets 3J×H×W)`.
pub type FrameMaps = (Tensor, Tensor);

/// Clip windows covering a scene: consecutive `clip`-frame windows, the
/// last one shifted back to end at the final frame. Returns
/// `(start, first frame whose predictions are kept)`.
fn windows(frames: usize, clip: usize) -> Vec<(usize, usize)> {
    let clip = clip.min(frames);
    let mut out = Vec::new();
    let mut keep = 0;
    while keep < frames {
        let start = keep.min(frames - clip);
        out.push((start, keep));
        keep = start + clip;
    }
    out
}

/// Runs the model over the whole scene in clip windows.
pub fn predict_maps(model: &PoseModel, params: &ParamStore, scene: &Scene, cfg: &TrainConfig) -> Result<Vec<FrameMaps>> {
    let mut maps = Vec::with_capacity(scene.features.len());
    for (start, keep) in windows(scene.features.len(), cfg.frames) {
        let end = (start + cfg.frames).min(scene.features.len());
        let teacher: Vec<Tensor> = scene.targets[start..end].iter().map(|t| t.offsets2d.clone()).collect();
        let mut g = Graph::new();
        let out = model.forward(
            &mut g,
            params,
            &scene.features[start..end],
            &scene.flows[start..end - 1],
            cfg.teacher_forcing.then_some(&teacher[..]),
        )?;
        for p in &out.predictions[keep - start..] {
            maps.push((g.value(p.heatmap).clone(), g.value(p.offsets3d).clone()));
        }
    }
    Ok(maps)
}

/// Ground-truth maps standing in for predictions.
pub fn oracle_maps(scene: &Scene) -> Vec<FrameMaps> {
    scene
        .targets
        .iter()
        .map(|t| (t.heatmap.clone(), t.offsets3d.clone()))
        .collect()
}

pub fn decode_and_evaluate(
    scene: &Scene,
    maps: &[FrameMaps],
    threshold: f64,
    max_people: usize,
) -> Result<(EvalReport, Vec<Vec<Pose3D>>)> {
    let decoded = maps
        .iter()
        .map(|(hm, off)| decode_poses(hm, off, threshold, max_people))
        .collect::<Result<Vec<_>>>()?;
    Ok((match_and_evaluate(&decoded, &scene.poses)?, decoded))
}

/// Full pipeline: forward, decode and match against the scene's poses.
pub fn evaluate(
    model: &PoseModel,
    params: &ParamStore,
    scene: &Scene,
    cfg: &TrainConfig,
) -> Result<(EvalReport, Vec<Vec<Pose3D>>)> {
    let maps = predict_maps(model, params, scene, cfg)?;
    decode_and_evaluate(scene, &maps, cfg.threshold, cfg.max_people)
}
