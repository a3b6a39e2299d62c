//! Heatmap + offset supervision targets and their decoding back to poses.
//!
//! A person is anchored at the pixel nearest its root joint. The heatmap is
//! the pixel-wise max of one Gaussian per person; offset maps are zero
//! everywhere except at anchor pixels, where they hold the exact vector
//! from the anchor pixel to every joint (x, y in cells; z is the joint's
//! absolute depth, measured from a zero-depth anchor).

use std::io::{BufRead, Write};

use crate::error::{IvtError, Result};
use crate::tensor::Tensor;

/// Index of the joint that anchors a person.
pub const ROOT: usize = 0;
pub const DEFAULT_SIGMA: f64 = 2.0;
pub const NMS_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Pose3D {
    pub joints: Vec<[f64; 3]>,
    pub score: f64,
}

impl Pose3D {
    pub fn new(joints: Vec<[f64; 3]>) -> Self {
        Pose3D { joints, score: 1.0 }
    }

    pub fn root(&self) -> [f64; 3] {
        self.joints[ROOT]
    }

    /// Pixel holding the root, as (row, col), if inside an `h×w` map.
    pub fn anchor(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let [x, y, _] = self.root();
        let (c, r) = (x.round(), y.round());
        (c >= 0.0 && r >= 0.0 && (c as usize) < w && (r as usize) < h).then_some((r as usize, c as usize))
    }
}

/// Supervision targets for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `H×W`.
    pub heatmap: Tensor,
    /// `3J×H×W`.
    pub offsets3d: Tensor,
    /// `2J×H×W`.
    pub offsets2d: Tensor,
    /// Anchor pixels as flat `row·W + col` indices, ascending.
    pub centers: Vec<usize>,
}

pub fn encode_targets(poses: &[Pose3D], joints: usize, h: usize, w: usize, sigma: f64) -> Result<Targets> {
    if !(sigma > 0.0) {
        return Err(IvtError::config(format!("sigma must be positive, got {sigma}")));
    }
    let mut heat = vec![0.0f64; h * w];
    let mut o3 = Tensor::zeros(&[3 * joints, h, w]);
    let mut o2 = Tensor::zeros(&[2 * joints, h, w]);
    // Owner of each anchor pixel: (distance² from pixel to root, pose index).
    let mut owner: Vec<Option<(f64, usize)>> = vec![None; h * w];
    for (pi, pose) in poses.iter().enumerate() {
        if pose.joints.len() != joints {
            return Err(IvtError::contract(format!(
                "pose {pi} has {} joints, expected {joints}",
                pose.joints.len()
            )));
        }
        let (r, c) = pose.anchor(h, w).ok_or_else(|| {
            IvtError::contract(format!("pose {pi}: center {:?} lies outside the {h}×{w} map", pose.root()))
        })?;
        let [x, y, _] = pose.root();
        let two_s2 = 2.0 * sigma * sigma;
        for row in 0..h {
            for col in 0..w {
                let d2 = (col as f64 - x).powi(2) + (row as f64 - y).powi(2);
                let v = (-d2 / two_s2).exp();
                let cell = &mut heat[row * w + col];
                *cell = cell.max(v);
            }
        }
        let d2 = (c as f64 - x).powi(2) + (r as f64 - y).powi(2);
        let p = r * w + c;
        if owner[p].is_none_or(|(best, _)| d2 < best) {
            owner[p] = Some((d2, pi));
        }
    }
    let mut centers = Vec::new();
    for (p, o) in owner.iter().enumerate() {
        let Some((_, pi)) = *o else { continue };
        centers.push(p);
        let (r, c) = (p / w, p % w);
        for (j, &[jx, jy, jz]) in poses[pi].joints.iter().enumerate() {
            let (dx, dy) = (jx - c as f64, jy - r as f64);
            o3.set(&[3 * j, r, c], dx);
            o3.set(&[3 * j + 1, r, c], dy);
            o3.set(&[3 * j + 2, r, c], jz);
            o2.set(&[2 * j, r, c], dx);
            o2.set(&[2 * j + 1, r, c], dy);
        }
    }
    Ok(Targets {
        heatmap: Tensor::new(&[h, w], heat)?,
        offsets3d: o3,
        offsets2d: o2,
        centers,
    })
}

fn hw(hm: &Tensor) -> Result<(usize, usize)> {
    match *hm.shape() {
        [h, w] => Ok((h, w)),
        [1, h, w] => Ok((h, w)),
        ref s => Err(IvtError::Shape {
            op: "heatmap",
            lhs: s.to_vec(),
            rhs: vec![2],
        }),
    }
}

/// Keeps pixels equal to the max of their (border-clamped) window, zeroes
/// the rest. Ties all survive.
pub fn keypoint_nms(hm: &Tensor, window: usize) -> Result<Tensor> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(IvtError::config(format!("NMS window must be odd, got {window}")));
    }
    let (h, w) = hw(hm)?;
    let r = window / 2;
    let d = hm.data();
    let out = Tensor::from_fn(hm.shape(), |p| {
        let (y, x) = (p / w, p % w);
        let mut m = f64::NEG_INFINITY;
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                m = m.max(d[yy * w + xx]);
            }
        }
        if d[p] == m {
            d[p]
        } else {
            0.0
        }
    });
    Ok(out)
}

/// Reads poses at NMS-surviving heatmap peaks with confidence ≥ threshold,
/// strongest first (ties by pixel order), at most `max_people`.
pub fn decode_poses(hm: &Tensor, off3d: &Tensor, threshold: f64, max_people: usize) -> Result<Vec<Pose3D>> {
    let (h, w) = hw(hm)?;
    let ch = off3d.shape().first().copied().unwrap_or(0);
    if off3d.shape().len() != 3 || ch % 3 != 0 || off3d.shape()[1..] != [h, w] {
        return Err(IvtError::Shape {
            op: "decode_poses",
            lhs: hm.shape().to_vec(),
            rhs: off3d.shape().to_vec(),
        });
    }
    let joints = ch / 3;
    let peaks = keypoint_nms(hm, NMS_WINDOW)?;
    let mut cand: Vec<(f64, usize)> = peaks
        .data()
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v >= threshold && v > 0.0)
        .map(|(p, &v)| (v, p))
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cand.truncate(max_people.max(1));
    let o = off3d.data();
    Ok(cand
        .into_iter()
        .map(|(score, p)| {
            let (r, c) = (p / w, p % w);
            let joints = (0..joints)
                .map(|j| {
                    let at = |k: usize| o[(3 * j + k) * h * w + p];
                    [c as f64 + at(0), r as f64 + at(1), at(2)]
                })
                .collect();
            Pose3D { joints, score }
        })
        .collect())
}

/// One line per person: `frame person score j0x j0y j0z …`.
pub fn write_pose_lines<W: Write>(mut w: W, frames: &[Vec<Pose3D>]) -> Result<()> {
    for (f, poses) in frames.iter().enumerate() {
        for (p, pose) in poses.iter().enumerate() {
            write!(w, "{f} {p} {}", pose.score)?;
            for j in &pose.joints {
                write!(w, " {} {} {}", j[0], j[1], j[2])?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Parses one pose line into (frame, person, pose).
pub fn parse_pose_line(line: &str, line_no: usize) -> Result<(usize, usize, Pose3D)> {
    let err = |msg: String| IvtError::Parse { line: line_no, msg };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 6 || !(fields.len() - 3).is_multiple_of(3) {
        return Err(err(format!("expected frame, person, score and joint triples, got {} fields", fields.len())));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
    let real = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
    let frame = int(fields[0])?;
    let person = int(fields[1])?;
    let score = real(fields[2])?;
    let joints = fields[3..]
        .chunks(3)
        .map(|c| Ok([real(c[0])?, real(c[1])?, real(c[2])?]))
        .collect::<Result<Vec<_>>>()?;
    Ok((frame, person, Pose3D { joints, score }))
}

/// Reads pose lines (blank lines skipped) into per-frame lists.
pub fn read_pose_lines<R: BufRead>(r: R, frames: usize) -> Result<Vec<Vec<Pose3D>>> {
    let mut out = vec![Vec::new(); frames];
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (f, p, pose) = parse_pose_line(&line, i + 1)?;
        let slot = out.get_mut(f).ok_or(IvtError::Parse {
            line: i + 1,
            msg: format!("frame {f} out of range"),
        })?;
        if p != slot.len() {
            return Err(IvtError::Parse {
                line: i + 1,
                msg: format!("person {p} out of order"),
            });
        }
        slot.push(pose);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pose_at(x: f64, y: f64, rng: &mut impl Rng, joints: usize) -> Pose3D {
        let mut j = vec![[x, y, rng.gen_range(1.0..3.0)]];
        for _ in 1..joints {
            j.push([x + rng.gen_range(-3.0..3.0), y + rng.gen_range(-3.0..3.0), rng.gen_range(1.0..3.0)]);
        }
        Pose3D::new(j)
    }

    fn max_err(a: &Pose3D, b: &Pose3D) -> f64 {
        a.joints
            .iter()
            .zip(&b.joints)
            .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_person_peak_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = encode_targets(&[pose_at(5.0, 3.0, &mut rng, 4)], 4, 8, 10, 2.0).unwrap();
        assert_eq!(t.heatmap.at(&[3, 5]), 1.0);
        assert_eq!(t.centers, vec![35]);
        assert!(t.heatmap.data().iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn no_people_no_targets() {
        let t = encode_targets(&[], 3, 4, 4, 2.0).unwrap();
        assert!(t.heatmap.data().iter().all(|&v| v == 0.0));
        assert!(t.offsets3d.data().iter().all(|&v| v == 0.0));
        assert!(t.centers.is_empty());
    }

    #[test]
    fn outside_center_names_the_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let poses = [pose_at(1.0, 1.0, &mut rng, 2), pose_at(9.0, 1.0, &mut rng, 2)];
        match encode_targets(&poses, 2, 4, 4, 2.0) {
            Err(IvtError::Contract(m)) => assert!(m.contains("pose 1"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(encode_targets(&[], 2, 4, 4, 0.0), Err(IvtError::Config(_))));
    }

    #[test]
    fn two_person_heatmap_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses = [pose_at(2.0, 3.0, &mut rng, 3), pose_at(6.4, 4.7, &mut rng, 3)];
        let t = encode_targets(&poses, 3, 8, 9, 1.5).unwrap();
        for r in 0..8 {
            for c in 0..9 {
                let g = |x: f64, y: f64| {
                    (-((c as f64 - x).powi(2) + (r as f64 - y).powi(2)) / (2.0 * 1.5 * 1.5)).exp()
                };
                let want = g(2.0, 3.0).max(g(6.4, 4.7));
                assert_eq!(t.heatmap.at(&[r, c]), want);
            }
        }
        assert_eq!(t.centers, vec![3 * 9 + 2, 5 * 9 + 6]);
    }

    #[test]
    fn shared_anchor_goes_to_nearest_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let far = pose_at(3.4, 2.0, &mut rng, 2);
        let near = pose_at(2.9, 2.1, &mut rng, 2);
        let t = encode_targets(&[far, near.clone()], 2, 5, 5, 2.0).unwrap();
        assert_eq!(t.centers, vec![2 * 5 + 3]);
        assert_eq!(t.offsets3d.at(&[3, 2, 3]), near.joints[1][0] - 3.0);
    }

    #[test]
    fn nms_contracts() {
        let mono = Tensor::from_fn(&[4, 5], |i| i as f64);
        let kept = keypoint_nms(&mono, 3).unwrap();
        let nz: Vec<usize> = (0..20).filter(|&i| kept.data()[i] != 0.0).collect();
        assert_eq!(nz, vec![19]);
        let flat = Tensor::full(&[3, 3], 0.7);
        assert!(keypoint_nms(&flat, 3).unwrap().bit_eq(&flat));
        assert!(matches!(keypoint_nms(&flat, 2), Err(IvtError::Config(_))));
        assert!(matches!(keypoint_nms(&flat, 0), Err(IvtError::Config(_))));
    }

    #[test]
    fn nms_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let hm = Tensor::uniform(&[8, 8], 0.0, 1.0, &mut rng);
            let kept = keypoint_nms(&hm, 3).unwrap();
            for r in 0..8i64 {
                for c in 0..8i64 {
                    let v = hm.at(&[r as usize, c as usize]);
                    let mut is_max = true;
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            let (rr, cc) = (r + dr, c + dc);
                            if (0..8).contains(&rr) && (0..8).contains(&cc) && hm.at(&[rr as usize, cc as usize]) > v {
                                is_max = false;
                            }
                        }
                    }
                    assert_eq!(kept.at(&[r as usize, c as usize]), if is_max { v } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn decode_recovers_encoded_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let poses = vec![pose_at(3.0, 3.0, &mut rng, 5), pose_at(12.0, 10.0, &mut rng, 5)];
        let t = encode_targets(&poses, 5, 16, 16, DEFAULT_SIGMA).unwrap();
        let dec = decode_poses(&t.heatmap, &t.offsets3d, 0.5, 10).unwrap();
        assert_eq!(dec.len(), 2);
        for d in &dec {
            let gt = poses.iter().find(|p| max_err(p, d) <= 1e-12).expect("decoded pose matches a person");
            assert_eq!(d.score, 1.0);
            assert!(max_err(gt, d) == 0.0);
        }
        assert!(decode_poses(&t.heatmap, &t.offsets3d, 1.0 + 1e-9, 10).unwrap().is_empty());
        assert_eq!(decode_poses(&t.heatmap, &t.offsets3d, 0.5, 1).unwrap().len(), 1);
    }

    #[test]
    fn pose_lines_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames = vec![
            vec![pose_at(1.0, 2.0, &mut rng, 3), pose_at(0.1, -7.25, &mut rng, 3)],
            vec![],
            vec![pose_at(1e-17, 3.0, &mut rng, 3)],
        ];
        let mut buf = Vec::new();
        write_pose_lines(&mut buf, &frames).unwrap();
        let back = read_pose_lines(&buf[..], 3).unwrap();
        assert_eq!(back, frames);
        assert!(matches!(
            read_pose_lines(&b"0 0 1.0 1 2\n"[..], 1),
            Err(IvtError::Parse { line: 1, .. })
        ));
    }

    fn arb_scene() -> impl Strategy<Value = Vec<Pose3D>> {
        (any::<u64>(), 1usize..5).prop_map(|(seed, people)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut centers: Vec<(usize, usize)> = Vec::new();
            while centers.len() < people {
                let c = (rng.gen_range(0..24), rng.gen_range(0..24));
                // Peaks farther apart than the NMS window never suppress each other.
                if centers.iter().all(|&(r, k)| r.abs_diff(c.0) > 2 || k.abs_diff(c.1) > 2) {
                    centers.push(c);
                }
            }
            centers
                .into_iter()
                .map(|(r, c)| pose_at(c as f64, r as f64, &mut rng, 6))
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_is_exact(poses in arb_scene()) {
            let t = encode_targets(&poses, 6, 24, 24, DEFAULT_SIGMA).unwrap();
            let dec = decode_poses(&t.heatmap, &t.offsets3d, 0.5, 16).unwrap();
            prop_assert_eq!(dec.len(), poses.len());
            for p in &poses {
                let best = dec.iter().map(|d| max_err(p, d)).fold(f64::INFINITY, f64::min);
                prop_assert!(best <= 1e-9);
            }
        }

        #[test]
        fn nms_is_idempotent(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Coarse values force plenty of ties.
            let hm = Tensor::from_fn(&[h, w], |_| (rng.gen_range(0..4) as f64) / 4.0);
            let once = keypoint_nms(&hm, 3).unwrap();
            prop_assert!(keypoint_nms(&once, 3).unwrap().bit_eq(&once));
        }

        #[test]
        fn higher_threshold_never_adds_people(seed in any::<u64>(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hm = Tensor::uniform(&[6, 6], 0.0, 1.0, &mut rng);
            let off = Tensor::zeros(&[6, 6, 6]);
            let (lo, hi) = (a.min(b), a.max(b));
            let n_lo = decode_poses(&hm, &off, lo, 100).unwrap().len();
            let n_hi = decode_poses(&hm, &off, hi, 100).unwrap().len();
            prop_assert!(n_hi <= n_lo);
            prop_assert!(decode_poses(&hm, &off, lo, 2).unwrap().len() <= 2);
        }
    }
}
