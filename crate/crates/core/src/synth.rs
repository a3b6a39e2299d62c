//! Seeded stick-figure video scenes with exact ground truth.
//!
//! Every person is a rigid skeleton whose root follows a sinusoid in x and
//! y, rounded to whole cells each frame, so the true motion between frames
//! is an integer translation. Depth may also oscillate (continuously). Each
//! joint is rendered as an isotropic Gaussian blob whose per-channel
//! amplitude is a fixed joint signature scaled by the joint's depth.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_targets, read_pose_lines, write_pose_lines, Pose3D, Targets};
use crate::error::{parse_toml, IvtError, Result};
use crate::tensor::Tensor;

/// Joint layout of the 15-joint template, in skeleton-height units with y
/// pointing down: (x, y, depth offset).
const TEMPLATE: [[f64; 3]; 15] = [
    [0.0, 0.0, 0.0],      // pelvis
    [0.0, -0.45, 0.02],   // thorax
    [0.0, -0.7, 0.04],    // head
    [-0.2, -0.45, 0.05],  // left shoulder
    [-0.3, -0.2, 0.1],    // left elbow
    [-0.35, 0.0, 0.15],   // left wrist
    [0.2, -0.45, -0.05],  // right shoulder
    [0.3, -0.2, -0.1],    // right elbow
    [0.35, 0.0, -0.15],   // right wrist
    [-0.12, 0.0, 0.03],   // left hip
    [-0.14, 0.3, 0.06],   // left knee
    [-0.15, 0.6, 0.08],   // left ankle
    [0.12, 0.0, -0.03],   // right hip
    [0.14, 0.3, -0.06],   // right knee
    [0.15, 0.6, -0.08],   // right ankle
];

/// Parent of each template joint; the root is its own parent.
pub const PARENTS: [usize; 15] = [0, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13];

pub const MAX_JOINTS: usize = TEMPLATE.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub persons: usize,
    pub joints: usize,
    pub frames: usize,
    /// Feature grid rows.
    pub height: usize,
    /// Feature grid columns.
    pub width: usize,
    pub channels: usize,
    /// Root motion amplitude in cells (x and y).
    pub amplitude: f64,
    /// Frames per motion cycle.
    pub period: f64,
    /// Root depth is drawn uniformly from this range.
    pub depth_range: [f64; 2],
    /// Root depth oscillation amplitude.
    pub depth_amplitude: f64,
    /// Skeleton height in cells.
    pub size: f64,
    pub blob_sigma: f64,
    pub target_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            persons: 1,
            joints: MAX_JOINTS,
            frames: 5,
            height: 16,
            width: 16,
            channels: 16,
            amplitude: 2.0,
            period: 8.0,
            depth_range: [2.0, 4.0],
            depth_amplitude: 0.0,
            size: 6.0,
            blob_sigma: 0.8,
            target_sigma: crate::codec::DEFAULT_SIGMA,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IvtError::config(m));
        if self.joints == 0 || self.joints > MAX_JOINTS {
            return bad(format!("joints must be in 1..={MAX_JOINTS}, got {}", self.joints));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("frames, height, width and channels must be positive".into());
        }
        let finite = [
            self.amplitude,
            self.period,
            self.depth_range[0],
            self.depth_range[1],
            self.depth_amplitude,
            self.size,
            self.blob_sigma,
            self.target_sigma,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("scene parameters must be finite".into());
        }
        if self.amplitude < 0.0 || self.depth_amplitude < 0.0 || self.size < 0.0 {
            return bad("amplitudes and size must be nonnegative".into());
        }
        if self.period <= 0.0 || self.blob_sigma <= 0.0 || self.target_sigma <= 0.0 {
            return bad("period, blob_sigma and target_sigma must be positive".into());
        }
        let [lo, hi] = self.depth_range;
        if lo > hi || lo - self.depth_amplitude <= 0.0 {
            return bad(format!(
                "depth range [{lo}, {hi}] with oscillation {} must stay positive",
                self.depth_amplitude
            ));
        }
        let margin = self.amplitude.ceil() as usize;
        if self.persons > 0 && (self.width <= 2 * margin || self.height <= 2 * margin) {
            return bad(format!(
                "root trajectory with amplitude {} exits the {}×{} grid",
                self.amplitude, self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = parse_toml(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Fixed per-joint channel signature in [0.25, 1].
pub fn signature(joint: usize, channel: usize) -> f64 {
    0.625 + 0.375 * (1.3 * (joint + 1) as f64 * (channel + 1) as f64 + 0.7 * channel as f64).cos()
}

/// Blob amplitude multiplier for a joint at depth `z`.
pub fn depth_gain(z: f64, depth_range: [f64; 2]) -> f64 {
    z / depth_range[1]
}

/// A generated clip with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    /// `C×H×W` per frame.
    pub features: Vec<Tensor>,
    pub poses: Vec<Vec<Pose3D>>,
    /// `2×H×W` per adjacent frame pair (t → t+1); channel 0 is Δx.
    pub flows: Vec<Tensor>,
    pub targets: Vec<Targets>,
}

struct Person {
    root: (i64, i64),
    phase: [f64; 3],
    depth: f64,
    /// Joint offsets from the root (x, y) and depth offsets.
    offsets: Vec<[f64; 3]>,
}

impl Person {
    fn pose(&self, spec: &SceneSpec, t: usize) -> Pose3D {
        let w = TAU * t as f64 / spec.period;
        let rx = self.root.0 as f64 + (spec.amplitude * (w + self.phase[0]).sin()).round();
        let ry = self.root.1 as f64 + (spec.amplitude * (w + self.phase[1]).sin()).round();
        let rz = self.depth + spec.depth_amplitude * (w + self.phase[2]).sin();
        Pose3D::new(self.offsets.iter().map(|o| [rx + o[0], ry + o[1], rz + o[2]]).collect())
    }
}

fn sample_people(spec: &SceneSpec) -> Vec<Person> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let margin = spec.amplitude.ceil() as i64;
    let (w, h) = (spec.width as i64, spec.height as i64);
    let mut people: Vec<Person> = Vec::with_capacity(spec.persons);
    for _ in 0..spec.persons {
        // Prefer roots at least two cells from earlier people; give up after
        // a bounded number of draws.
        let mut root = (0, 0);
        for _ in 0..64 {
            root = (rng.gen_range(margin..w - margin), rng.gen_range(margin..h - margin));
            if people
                .iter()
                .all(|p| (p.root.0 - root.0).abs().max((p.root.1 - root.1).abs()) >= 2)
            {
                break;
            }
        }
        let phase = [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)];
        let depth = rng.gen_range(spec.depth_range[0]..=spec.depth_range[1]);
        let scale = spec.size * rng.gen_range(0.85..1.15);
        let offsets = TEMPLATE[..spec.joints]
            .iter()
            .enumerate()
            .map(|(j, t)| {
                if j == 0 {
                    return [0.0; 3];
                }
                let jit = 0.05 * spec.size;
                [
                    t[0] * scale + rng.gen_range(-jit..=jit),
                    t[1] * scale + rng.gen_range(-jit..=jit),
                    t[2] + rng.gen_range(-0.05..=0.05),
                ]
            })
            .collect();
        people.push(Person {
            root,
            phase,
            depth,
            offsets,
        });
    }
    people
}

/// Renders one frame: the `C×H×W` feature map and each person's total
/// intensity per pixel.
fn render(spec: &SceneSpec, poses: &[Pose3D]) -> (Tensor, Vec<Vec<f64>>) {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut feat = Tensor::zeros(&[c, h, w]);
    let mut owned = vec![vec![0.0; h * w]; poses.len()];
    let two_s2 = 2.0 * spec.blob_sigma * spec.blob_sigma;
    let sig: Vec<Vec<f64>> = (0..spec.joints).map(|j| (0..c).map(|ch| signature(j, ch)).collect()).collect();
    let d = feat.data_mut();
    for (p, pose) in poses.iter().enumerate() {
        for (j, &[x, y, z]) in pose.joints.iter().enumerate() {
            let gain = depth_gain(z, spec.depth_range);
            for row in 0..h {
                for col in 0..w {
                    let b = gain * (-((col as f64 - x).powi(2) + (row as f64 - y).powi(2)) / two_s2).exp();
                    let px = row * w + col;
                    for ch in 0..c {
                        let v = sig[j][ch] * b;
                        d[ch * h * w + px] += v;
                        owned[p][px] += v;
                    }
                }
            }
        }
    }
    (feat, owned)
}

fn flow_field(spec: &SceneSpec, owned: &[Vec<f64>], now: &[Pose3D], next: &[Pose3D]) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let mut flow = Tensor::zeros(&[2, h, w]);
    let d = flow.data_mut();
    for px in 0..h * w {
        let best = (0..owned.len()).fold(None, |acc: Option<usize>, p| match acc {
            Some(q) if owned[q][px] >= owned[p][px] => Some(q),
            _ => Some(p),
        });
        if let Some(p) = best.filter(|&p| owned[p][px] > 0.0) {
            let (a, b) = (now[p].root(), next[p].root());
            d[px] = b[0] - a[0];
            d[h * w + px] = b[1] - a[1];
        }
    }
    flow
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let people = sample_people(spec);
    let poses: Vec<Vec<Pose3D>> = (0..spec.frames)
        .map(|t| people.iter().map(|p| p.pose(spec, t)).collect())
        .collect();
    let rendered: Vec<(Tensor, Vec<Vec<f64>>)> = poses.par_iter().map(|ps| render(spec, ps)).collect();
    let flows = (0..spec.frames - 1)
        .map(|t| flow_field(spec, &rendered[t].1, &poses[t], &poses[t + 1]))
        .collect();
    let targets = poses
        .iter()
        .map(|ps| encode_targets(ps, spec.joints, spec.height, spec.width, spec.target_sigma))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        spec: spec.clone(),
        features: rendered.into_iter().map(|(f, _)| f).collect(),
        poses,
        flows,
        targets,
    })
}

/// Source of per-frame `C×H×W` feature maps for the tokenizer.
pub trait FeatureProvider {
    fn channels(&self) -> usize;
    fn frames(&self) -> usize;
    fn frame(&self, t: usize) -> Result<Tensor>;
}

/// Serves a scene's rendered maps.
pub struct GtFeatures<'a>(&'a Scene);

pub fn gt_feature_provider(scene: &Scene) -> GtFeatures<'_> {
    GtFeatures(scene)
}

impl FeatureProvider for GtFeatures<'_> {
    fn channels(&self) -> usize {
        self.0.spec.channels
    }

    fn frames(&self) -> usize {
        self.0.features.len()
    }

    fn frame(&self, t: usize) -> Result<Tensor> {
        self.0.features.get(t).cloned().ok_or(IvtError::Bounds {
            op: "feature provider",
            index: t,
            len: self.0.features.len(),
        })
    }
}

/// Forward-splats `map` (`C×H×W`) along an integer `flow` (`2×H×W`);
/// destinations outside the grid are dropped and uncovered pixels are 0.
pub fn warp_forward(map: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *map.shape() else {
        return Err(IvtError::Shape {
            op: "warp_forward",
            lhs: map.shape().to_vec(),
            rhs: vec![3],
        });
    };
    if flow.shape() != [2, h, w] {
        return Err(IvtError::Shape {
            op: "warp_forward",
            lhs: flow.shape().to_vec(),
            rhs: vec![2, h, w],
        });
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    let (f, m) = (flow.data(), map.data());
    let o = out.data_mut();
    for row in 0..h {
        for col in 0..w {
            let px = row * w + col;
            let tx = col as i64 + f[px].round() as i64;
            let ty = row as i64 + f[h * w + px].round() as i64;
            if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                continue;
            }
            let dst = ty as usize * w + tx as usize;
            for ch in 0..c {
                o[ch * h * w + dst] = m[ch * h * w + px];
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    poses: String,
    spec: SceneSpec,
}

/// Text manifest: the spec as TOML plus every pose as a pose line.
pub fn write_manifest(scene: &Scene) -> Result<String> {
    let mut lines = Vec::new();
    write_pose_lines(&mut lines, &scene.poses)?;
    let m = Manifest {
        poses: String::from_utf8(lines).expect("pose lines are ASCII"),
        spec: scene.spec.clone(),
    };
    toml::to_string(&m).map_err(|e| IvtError::contract(format!("manifest serialization: {e}")))
}

/// Regenerates the scene described by a manifest and checks that the
/// stored poses agree with it bitwise.
pub fn read_manifest(text: &str) -> Result<Scene> {
    let m: Manifest = parse_toml(text)?;
    let scene = generate(&m.spec)?;
    let stored = read_pose_lines(m.poses.as_bytes(), m.spec.frames)?;
    for (t, (a, b)) in stored.iter().zip(&scene.poses).enumerate() {
        if a != b {
            return Err(IvtError::contract(format!(
                "manifest poses disagree with the regenerated scene at frame {t}"
            )));
        }
    }
    Ok(scene)
}
