//! Pose error metrics and multi-person evaluation reports.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};

use crate::codec::Pose3D;
use crate::error::{IvtError, Result};

fn check_pair(pred: &Pose3D, gt: &Pose3D) -> Result<()> {
    if pred.joints.len() != gt.joints.len() || gt.joints.is_empty() {
        return Err(IvtError::contract(format!(
            "pose joint counts differ: {} vs {}",
            pred.joints.len(),
            gt.joints.len()
        )));
    }
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean per-joint Euclidean distance, optionally after moving both roots
/// to the origin.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D, root_align: bool) -> Result<f64> {
    check_pair(pred, gt)?;
    let (pr, gr) = if root_align {
        (pred.root(), gt.root())
    } else {
        ([0.0; 3], [0.0; 3])
    };
    let sum: f64 = pred
        .joints
        .iter()
        .zip(&gt.joints)
        .map(|(p, g)| {
            dist(
                [p[0] - pr[0], p[1] - pr[1], p[2] - pr[2]],
                [g[0] - gr[0], g[1] - gr[1], g[2] - gr[2]],
            )
        })
        .sum();
    Ok(sum / gt.joints.len() as f64)
}

/// Mean |Δz| after root alignment.
pub fn depth_error(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    check_pair(pred, gt)?;
    let (pz, gz) = (pred.root()[2], gt.root()[2]);
    let sum: f64 = pred
        .joints
        .iter()
        .zip(&gt.joints)
        .map(|(p, g)| ((p[2] - pz) - (g[2] - gz)).abs())
        .sum();
    Ok(sum / gt.joints.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProcrustesMode {
    /// Rotation, translation and uniform scale.
    #[default]
    Similarity,
    /// Rotation and translation only.
    Rigid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaResult {
    pub value: f64,
    /// True when the ground truth is degenerate (fewer than 3 joints or all
    /// joints collinear); alignment was skipped and `value` is the
    /// root-aligned MPJPE.
    pub degenerate: bool,
}

const DEGENERATE_RATIO: f64 = 1e-9;

/// The pose after the least-squares similarity (or rigid) alignment onto
/// `gt`, or `None` for a degenerate ground truth.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D, mode: ProcrustesMode) -> Result<Option<Pose3D>> {
    check_pair(pred, gt)?;
    let n = gt.joints.len();
    if n < 3 {
        return Ok(None);
    }
    let to_v = |j: &[f64; 3]| Vector3::new(j[0], j[1], j[2]);
    let mean = |ps: &[[f64; 3]]| ps.iter().map(to_v).sum::<Vector3<f64>>() / n as f64;
    let (mp, mg) = (mean(&pred.joints), mean(&gt.joints));
    let xs: Vec<Vector3<f64>> = pred.joints.iter().map(|j| to_v(j) - mp).collect();
    let ys: Vec<Vector3<f64>> = gt.joints.iter().map(|j| to_v(j) - mg).collect();

    let gt_spread: Matrix3<f64> = ys.iter().map(|y| y * y.transpose()).sum();
    let sv = gt_spread.symmetric_eigenvalues();
    let mut ev = [sv[0], sv[1], sv[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= DEGENERATE_RATIO * ev[0] {
        return Ok(None);
    }

    // Cross-covariance M = Σ y xᵀ; the optimal rotation is U·D·Vᵀ.
    let m: Matrix3<f64> = xs.iter().zip(&ys).map(|(x, y)| y * x.transpose()).sum();
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("vᵀ requested"));
    let d = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    let dm = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * dm * vt;
    let scale = match mode {
        ProcrustesMode::Rigid => 1.0,
        ProcrustesMode::Similarity => {
            let sx: f64 = xs.iter().map(|x| x.norm_squared()).sum();
            let trace = svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2];
            if sx > 0.0 {
                trace / sx
            } else {
                0.0
            }
        }
    };
    let joints = xs
        .iter()
        .map(|x| {
            let a = r * x * scale + mg;
            [a[0], a[1], a[2]]
        })
        .collect();
    Ok(Some(Pose3D {
        joints,
        score: pred.score,
    }))
}

pub fn pa_mpjpe_with(pred: &Pose3D, gt: &Pose3D, mode: ProcrustesMode) -> Result<PaResult> {
    match procrustes_align(pred, gt, mode)? {
        Some(aligned) => Ok(PaResult {
            value: mpjpe(&aligned, gt, false)?,
            degenerate: false,
        }),
        None => Ok(PaResult {
            value: mpjpe(pred, gt, true)?,
            degenerate: true,
        }),
    }
}

/// MPJPE after similarity Procrustes alignment.
pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<PaResult> {
    pa_mpjpe_with(pred, gt, ProcrustesMode::Similarity)
}

/// Per-frame row of an evaluation report. Means are `None` when nothing
/// was matched.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub frame: usize,
    pub matched: usize,
    pub misses: usize,
    pub false_positives: usize,
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
    pub depth_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameReport>,
    /// Aggregates over all matched pairs (person-weighted means).
    pub matched: usize,
    pub misses: usize,
    pub false_positives: usize,
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
    pub depth_error: Option<f64>,
    /// Pairs whose PA alignment was skipped as degenerate.
    pub degenerate: usize,
}

/// Greedy matching in ascending root distance; ties go to the lower
/// (gt, pred) index pair. Returns (pred index, gt index) pairs.
pub fn greedy_match(pred: &[Pose3D], gt: &[Pose3D]) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(pred.len() * gt.len());
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            pairs.push((dist(p.root(), g.root()), gi, pi));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut pu, mut gu) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut out = Vec::new();
    for (_, gi, pi) in pairs {
        if !pu[pi] && !gu[gi] {
            pu[pi] = true;
            gu[gi] = true;
            out.push((pi, gi));
        }
    }
    out.sort_by_key(|&(_, g)| g);
    out
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn match_and_evaluate(pred: &[Vec<Pose3D>], gt: &[Vec<Pose3D>]) -> Result<EvalReport> {
    let empty = Vec::new();
    let n = pred.len().max(gt.len());
    let (mut all_m, mut all_pa, mut all_d) = (Vec::new(), Vec::new(), Vec::new());
    let mut frames = Vec::with_capacity(n);
    let (mut misses, mut fps, mut degenerate) = (0, 0, 0);
    for f in 0..n {
        let p = pred.get(f).unwrap_or(&empty);
        let g = gt.get(f).unwrap_or(&empty);
        let pairs = greedy_match(p, g);
        let (mut m, mut pa, mut d) = (Vec::new(), Vec::new(), Vec::new());
        for &(pi, gi) in &pairs {
            m.push(mpjpe(&p[pi], &g[gi], true)?);
            let r = pa_mpjpe(&p[pi], &g[gi])?;
            degenerate += r.degenerate as usize;
            pa.push(r.value);
            d.push(depth_error(&p[pi], &g[gi])?);
        }
        let fr = FrameReport {
            frame: f,
            matched: pairs.len(),
            misses: g.len() - pairs.len(),
            false_positives: p.len() - pairs.len(),
            mpjpe: mean(&m),
            pa_mpjpe: mean(&pa),
            depth_error: mean(&d),
        };
        misses += fr.misses;
        fps += fr.false_positives;
        all_m.extend(m);
        all_pa.extend(pa);
        all_d.extend(d);
        frames.push(fr);
    }
    Ok(EvalReport {
        frames,
        matched: all_m.len(),
        misses,
        false_positives: fps,
        mpjpe: mean(&all_m),
        pa_mpjpe: mean(&all_pa),
        depth_error: mean(&all_d),
        degenerate,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// CSV with columns `frame, persons_matched, mpjpe, pa_mpjpe,
    /// depth_error`; absent means are empty fields; a final `all` row
    /// holds the aggregates.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| IvtError::Io(std::io::Error::other(e));
        wr.write_record(["frame", "persons_matched", "mpjpe", "pa_mpjpe", "depth_error"])
            .map_err(csv_err)?;
        for f in &self.frames {
            wr.write_record([
                f.frame.to_string(),
                f.matched.to_string(),
                opt(f.mpjpe),
                opt(f.pa_mpjpe),
                opt(f.depth_error),
            ])
            .map_err(csv_err)?;
        }
        wr.write_record([
            "all".to_string(),
            self.matched.to_string(),
            opt(self.mpjpe),
            opt(self.pa_mpjpe),
            opt(self.depth_error),
        ])
        .map_err(csv_err)?;
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_pose(rng: &mut impl Rng, j: usize) -> Pose3D {
        Pose3D::new((0..j).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect())
    }

    fn rotation(a: f64, b: f64, c: f64) -> Matrix3<f64> {
        nalgebra::Rotation3::from_euler_angles(a, b, c).into_inner()
    }

    fn transform(p: &Pose3D, r: &Matrix3<f64>, s: f64, t: [f64; 3]) -> Pose3D {
        Pose3D::new(
            p.joints
                .iter()
                .map(|j| {
                    let v = r * Vector3::new(j[0], j[1], j[2]) * s;
                    [v[0] + t[0], v[1] + t[1], v[2] + t[2]]
                })
                .collect(),
        )
    }

    #[test]
    fn mpjpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng, 6);
        assert_eq!(mpjpe(&p, &p, false).unwrap(), 0.0);
        let shifted = transform(&p, &Matrix3::identity(), 1.0, [3.0, 4.0, 0.0]);
        assert!((mpjpe(&shifted, &p, false).unwrap() - 5.0).abs() <= 1e-12);
        assert!(mpjpe(&shifted, &p, true).unwrap() <= 1e-12);
        let short = Pose3D::new(vec![[0.0; 3]; 5]);
        assert!(matches!(mpjpe(&short, &p, false), Err(IvtError::Contract(_))));
        assert!(matches!(depth_error(&short, &p), Err(IvtError::Contract(_))));
    }

    #[test]
    fn mpjpe_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (a, b) = (random_pose(&mut rng, 15), random_pose(&mut rng, 15));
            let mut s = 0.0;
            for j in 0..15 {
                let mut d2 = 0.0;
                for k in 0..3 {
                    d2 += (a.joints[j][k] - b.joints[j][k]) * (a.joints[j][k] - b.joints[j][k]);
                }
                s += d2.sqrt();
            }
            assert!((mpjpe(&a, &b, false).unwrap() - s / 15.0).abs() <= 1e-12);
            let mut dz = 0.0;
            for j in 0..15 {
                dz += ((a.joints[j][2] - a.joints[0][2]) - (b.joints[j][2] - b.joints[0][2])).abs();
            }
            assert!((depth_error(&a, &b).unwrap() - dz / 15.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn depth_shift_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_pose(&mut rng, 5);
        let mut pred = gt.clone();
        for j in pred.joints.iter_mut().skip(1) {
            j[2] += 2.0;
        }
        assert_eq!(depth_error(&gt, &gt).unwrap(), 0.0);
        assert!((depth_error(&pred, &gt).unwrap() - 2.0 * 4.0 / 5.0).abs() <= 1e-12);
        // With every joint shifted and the root re-anchored, the error is the full shift.
        let mut lifted = gt.clone();
        lifted.joints.iter_mut().for_each(|j| j[2] += 2.0);
        lifted.joints[0][2] -= 2.0;
        let mut want = lifted.clone();
        want.joints[0][2] = gt.joints[0][2];
        assert!((depth_error(&want, &gt).unwrap() - 2.0 * 4.0 / 5.0).abs() <= 1e-12);
    }

    #[test]
    fn procrustes_on_own_orbit_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let gt = random_pose(&mut rng, 10);
            let r = rotation(rng.gen_range(-3.0..3.0), rng.gen_range(-1.5..1.5), rng.gen_range(-3.0..3.0));
            let pred = transform(&gt, &r, rng.gen_range(0.2..5.0), [rng.gen_range(-9.0..9.0), 1.0, -2.0]);
            let pa = pa_mpjpe(&pred, &gt).unwrap();
            assert!(!pa.degenerate && pa.value <= 1e-9, "{pa:?}");
            assert!(pa_mpjpe(&gt, &gt).unwrap().value <= 1e-12);
        }
    }

    #[test]
    fn reflections_are_not_used() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_pose(&mut rng, 8);
        let mirrored = Pose3D::new(gt.joints.iter().map(|j| [-j[0], j[1], j[2]]).collect());
        assert!(pa_mpjpe(&mirrored, &gt).unwrap().value > 1e-3);
    }

    #[test]
    fn rigid_mode_keeps_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_pose(&mut rng, 6);
        let bigger = transform(&gt, &Matrix3::identity(), 2.0, [0.0; 3]);
        assert!(pa_mpjpe_with(&bigger, &gt, ProcrustesMode::Similarity).unwrap().value <= 1e-9);
        assert!(pa_mpjpe_with(&bigger, &gt, ProcrustesMode::Rigid).unwrap().value > 0.1);
    }

    #[test]
    fn degenerate_ground_truth_is_flagged() {
        let line = Pose3D::new((0..4).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect());
        let pred = Pose3D::new(vec![[0.0, 0.0, 1.0]; 4]);
        let r = pa_mpjpe(&pred, &line).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, mpjpe(&pred, &line, true).unwrap());
        let two = Pose3D::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(pa_mpjpe(&two, &two).unwrap().degenerate);
    }

    /// Sum of squared distances after the best scale/translation for a fixed rotation.
    fn ssd_for_rotation(pred: &Pose3D, gt: &Pose3D, r: &Matrix3<f64>) -> (f64, Vec<[f64; 3]>) {
        let n = gt.joints.len() as f64;
        let c = |ps: &[[f64; 3]]| ps.iter().map(|j| Vector3::new(j[0], j[1], j[2])).sum::<Vector3<f64>>() / n;
        let (mp, mg) = (c(&pred.joints), c(&gt.joints));
        let xs: Vec<Vector3<f64>> = pred.joints.iter().map(|j| r * (Vector3::new(j[0], j[1], j[2]) - mp)).collect();
        let ys: Vec<Vector3<f64>> = gt.joints.iter().map(|j| Vector3::new(j[0], j[1], j[2]) - mg).collect();
        let s = (xs.iter().zip(&ys).map(|(x, y)| x.dot(y)).sum::<f64>() / xs.iter().map(|x| x.norm_squared()).sum::<f64>()).max(0.0);
        let aligned: Vec<[f64; 3]> = xs.iter().map(|x| { let a = x * s + mg; [a[0], a[1], a[2]] }).collect();
        let ssd = aligned.iter().zip(&gt.joints).map(|(a, g)| dist(*a, *g).powi(2)).sum();
        (ssd, aligned)
    }

    #[test]
    fn procrustes_matches_numerical_minimization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..3 {
            let gt = random_pose(&mut rng, 4);
            let pred = random_pose(&mut rng, 4);
            // Grid over Euler angles, then coordinate refinement.
            let mut best = (f64::INFINITY, [0.0; 3]);
            let steps = 24;
            for i in 0..steps {
                for j in 0..steps / 2 {
                    for k in 0..steps {
                        let a = [
                            -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / steps as f64,
                            -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * j as f64 / (steps / 2) as f64,
                            -std::f64::consts::PI + 2.0 * std::f64::consts::PI * k as f64 / steps as f64,
                        ];
                        let (e, _) = ssd_for_rotation(&pred, &gt, &rotation(a[0], a[1], a[2]));
                        if e < best.0 {
                            best = (e, a);
                        }
                    }
                }
            }
            let mut h = 0.3;
            while h > 1e-12 {
                let mut improved = false;
                for axis in 0..3 {
                    for sign in [-1.0, 1.0] {
                        let mut a = best.1;
                        a[axis] += sign * h;
                        let (e, _) = ssd_for_rotation(&pred, &gt, &rotation(a[0], a[1], a[2]));
                        if e < best.0 {
                            best = (e, a);
                            improved = true;
                        }
                    }
                }
                if !improved {
                    h *= 0.5;
                }
            }
            let (_, aligned) = ssd_for_rotation(&pred, &gt, &rotation(best.1[0], best.1[1], best.1[2]));
            let oracle = mpjpe(&Pose3D::new(aligned), &gt, false).unwrap();
            let got = pa_mpjpe(&pred, &gt).unwrap().value;
            assert!((got - oracle).abs() <= 1e-6, "{got} vs {oracle}");
        }
    }

    #[test]
    fn evaluation_reports() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt: Vec<Vec<Pose3D>> = (0..3).map(|_| vec![random_pose(&mut rng, 5), random_pose(&mut rng, 5)]).collect();
        let same = match_and_evaluate(&gt, &gt).unwrap();
        assert_eq!((same.matched, same.misses, same.mpjpe), (6, 0, Some(0.0)));
        let none = match_and_evaluate(&vec![vec![]; 3], &gt).unwrap();
        assert_eq!((none.matched, none.misses, none.mpjpe), (0, 6, None));
        let mut buf = Vec::new();
        none.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "frame,persons_matched,mpjpe,pa_mpjpe,depth_error");
        assert_eq!(text.lines().nth(1).unwrap(), "0,0,,,");
        assert_eq!(text.lines().last().unwrap(), "all,0,,,");
    }

    #[test]
    fn greedy_matching_agrees_with_exhaustive_assignment() {
        let at = |x: f64| Pose3D::new(vec![[x, 0.0, 0.0], [x, 1.0, 0.0]]);
        let gt = vec![at(0.0), at(10.0)];
        let pred = vec![at(9.0), at(0.5)];
        let pairs = greedy_match(&pred, &gt);
        // Exhaustive oracle over both assignments by total root distance.
        let cost = |perm: [usize; 2]| (0..2).map(|g| dist(pred[perm[g]].root(), gt[g].root())).sum::<f64>();
        let best = if cost([0, 1]) < cost([1, 0]) { [0, 1] } else { [1, 0] };
        assert_eq!(pairs, vec![(best[0], 0), (best[1], 1)]);
        let r = match_and_evaluate(&[pred], &[gt]).unwrap();
        assert_eq!(r.frames[0].matched, 2);
        assert!((r.mpjpe.unwrap() - 0.0).abs() <= 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn metric_invariants(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = rng.gen_range(4..16);
            let (a, b, c) = (random_pose(&mut rng, j), random_pose(&mut rng, j), random_pose(&mut rng, j));
            let pa = pa_mpjpe(&a, &b).unwrap().value;
            let m = mpjpe(&a, &b, true).unwrap();
            prop_assert!(pa <= m + 1e-9, "pa {} > mpjpe {}", pa, m);
            prop_assert!(depth_error(&a, &b).unwrap() <= m + 1e-9);
            prop_assert!(mpjpe(&a, &c, false).unwrap() <= mpjpe(&a, &b, false).unwrap() + mpjpe(&b, &c, false).unwrap() + 1e-9);
            let r = rotation(rng.gen_range(-3.0..3.0), rng.gen_range(-1.5..1.5), rng.gen_range(-3.0..3.0));
            let moved = transform(&a, &r, rng.gen_range(0.1..10.0), [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), 0.5]);
            prop_assert!((pa_mpjpe(&moved, &b).unwrap().value - pa).abs() <= 1e-9);
        }
    }
}
