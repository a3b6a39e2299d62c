//! Instance-guided tokenization.
//!
//! A feature map `C×H×W` is cut into a grid of `K×K` blocks. For every
//! anchor block the 2D offset map, read at the block's center pixel, points
//! at the J joints of the instance the anchor belongs to; the blocks holding
//! those joints are gathered, concatenated in joint order, and fused with one
//! self-attention block over the J joint rows.
//!
//! The same block layout doubles as the pixel-space view of a token map: a
//! token map at block size `s` with per-joint segments of `C·s²` values is
//! exactly `extract_blocks` of a `(J·C)×H×W` map. [`retile_tokens`] moves
//! token maps between block sizes through that view.

use rand::Rng;

use crate::error::{IvtError, Result};
use crate::nn::{AttentionConfig, BlockParams};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Grid dimensions `(n_h, n_w)` for block size `k`.
pub fn grid_dims(h: usize, w: usize, k: usize) -> Result<(usize, usize)> {
    if k == 0 || !h.is_multiple_of(k) || !w.is_multiple_of(k) {
        return Err(IvtError::config(format!(
            "feature map {h}×{w} is not divisible by block size {k}"
        )));
    }
    Ok((h / k, w / k))
}

/// Flat feature-map offset for every element of the block grid, in block
/// grid order `(block, channel, ky, kx)`.
pub fn block_index(c: usize, h: usize, w: usize, k: usize) -> Result<Vec<usize>> {
    let (nh, nw) = grid_dims(h, w, k)?;
    let mut idx = Vec::with_capacity(c * h * w);
    for by in 0..nh {
        for bx in 0..nw {
            for ch in 0..c {
                for ky in 0..k {
                    let row = (ch * h + by * k + ky) * w + bx * k;
                    idx.extend(row..row + k);
                }
            }
        }
    }
    Ok(idx)
}

fn invert(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (q, &p) in idx.iter().enumerate() {
        inv[p] = q;
    }
    inv
}

/// `C×H×W` → `N×(C·K·K)`.
pub fn extract_blocks(g: &mut Graph, f: Var, k: usize) -> Result<Var> {
    let (c, h, w) = chw(g, f)?;
    let (nh, nw) = grid_dims(h, w, k)?;
    g.take(f, block_index(c, h, w, k)?, &[nh * nw, c * k * k])
}

/// Inverse of [`extract_blocks`].
pub fn retile_blocks(g: &mut Graph, blocks: Var, c: usize, h: usize, w: usize, k: usize) -> Result<Var> {
    let idx = block_index(c, h, w, k)?;
    if g.value(blocks).numel() != idx.len() {
        return Err(IvtError::Shape {
            op: "retile_blocks",
            lhs: g.shape(blocks).to_vec(),
            rhs: vec![c, h, w],
        });
    }
    g.take(blocks, invert(&idx), &[c, h, w])
}

/// Re-tiles a token map over a `channels×H×W` pixel view from block size
/// `from` to block size `to`. Lossless in both directions.
pub fn retile_tokens(
    g: &mut Graph,
    tokens: Var,
    channels: usize,
    h: usize,
    w: usize,
    from: usize,
    to: usize,
) -> Result<Var> {
    let src = block_index(channels, h, w, from)?;
    if g.value(tokens).numel() != src.len() {
        return Err(IvtError::Shape {
            op: "retile_tokens",
            lhs: g.shape(tokens).to_vec(),
            rhs: vec![channels, h, w],
        });
    }
    let inv = invert(&src);
    let dst = block_index(channels, h, w, to)?;
    let (nh, nw) = grid_dims(h, w, to)?;
    let idx = dst.into_iter().map(|p| inv[p]).collect();
    g.take(tokens, idx, &[nh * nw, channels * to * to])
}

fn chw(g: &Graph, f: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(f) {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(IvtError::Shape {
            op: "feature map",
            lhs: s.to_vec(),
            rhs: vec![3],
        }),
    }
}

/// Source block of every (anchor, joint) pair, anchor-major. The offset for
/// joint j is read at the anchor's center pixel, rounded to the nearest
/// pixel, and the block containing the target pixel is clamped to the grid.
pub fn block_sources(offsets: &Tensor, k: usize, joints: usize) -> Result<Vec<usize>> {
    let (ch, h, w) = match *offsets.shape() {
        [c, h, w] => (c, h, w),
        ref s => {
            return Err(IvtError::Shape {
                op: "offset map",
                lhs: s.to_vec(),
                rhs: vec![2 * joints],
            })
        }
    };
    if ch != 2 * joints {
        return Err(IvtError::config(format!(
            "offset map has {ch} channels, expected {}",
            2 * joints
        )));
    }
    let (nh, nw) = grid_dims(h, w, k)?;
    let mut out = Vec::with_capacity(nh * nw * joints);
    let data = offsets.data();
    for by in 0..nh {
        for bx in 0..nw {
            let (cy, cx) = (by * k + k / 2, bx * k + k / 2);
            for j in 0..joints {
                let ix = ((2 * j) * h + cy) * w + cx;
                let iy = ((2 * j + 1) * h + cy) * w + cx;
                let (dx, dy) = (data[ix], data[iy]);
                if !dx.is_finite() || !dy.is_finite() {
                    let index = if dx.is_finite() { iy } else { ix };
                    return Err(IvtError::Numeric {
                        context: "2D offset map".into(),
                        index,
                    });
                }
                let tx = cx as i64 + dx.round() as i64;
                let ty = cy as i64 + dy.round() as i64;
                let gx = tx.div_euclid(k as i64).clamp(0, nw as i64 - 1) as usize;
                let gy = ty.div_euclid(k as i64).clamp(0, nh as i64 - 1) as usize;
                out.push(gy * nw + gx);
            }
        }
    }
    Ok(out)
}

/// Gathers the J source blocks of every anchor: `N×C_b` → `N×(J·C_b)`.
pub fn gather_instance(g: &mut Graph, blocks: Var, sources: &[usize], joints: usize) -> Result<Var> {
    let (n, cb) = match *g.shape(blocks) {
        [n, cb] => (n, cb),
        ref s => {
            return Err(IvtError::Shape {
                op: "gather_instance",
                lhs: s.to_vec(),
                rhs: vec![sources.len()],
            })
        }
    };
    if sources.len() != n * joints {
        return Err(IvtError::contract(format!(
            "{} gather sources for {n} blocks × {joints} joints",
            sources.len()
        )));
    }
    let rows = g.gather(blocks, sources, 0)?;
    g.reshape(rows, &[n, joints * cb])
}

/// Two stacked 3×3 convolutions with a GELU between them, predicting the
/// `2J`-channel 2D offset map from the feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetHead {
    pub prefix: String,
    pub in_channels: usize,
    pub joints: usize,
}

impl OffsetHead {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: impl Into<String>,
        in_channels: usize,
        hidden: usize,
        joints: usize,
        rng: &mut R,
    ) -> Self {
        let prefix = prefix.into();
        store.init_uniform(format!("{prefix}.conv1.w"), &[hidden, in_channels, 3, 3], in_channels * 9, rng);
        store.init_zeros(format!("{prefix}.conv1.b"), &[hidden]);
        store.init_uniform(format!("{prefix}.conv2.w"), &[2 * joints, hidden, 3, 3], hidden * 9, rng);
        store.init_zeros(format!("{prefix}.conv2.b"), &[2 * joints]);
        OffsetHead {
            prefix,
            in_channels,
            joints,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let (c, _, _) = chw(g, f)?;
        if c != self.in_channels {
            return Err(IvtError::config(format!(
                "offset head expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let p = &self.prefix;
        let w1 = g.param(store, &format!("{p}.conv1.w"))?;
        let b1 = g.param(store, &format!("{p}.conv1.b"))?;
        let w2 = g.param(store, &format!("{p}.conv2.w"))?;
        let b2 = g.param(store, &format!("{p}.conv2.b"))?;
        let h = g.conv2d(f, w1, b1)?;
        let h = g.gelu(h)?;
        g.conv2d(h, w2, b2)
    }
}

/// Tokenizer for one block size: gather + fusion block over J joint rows.
#[derive(Clone, Debug, PartialEq)]
pub struct IgtParams {
    pub block: usize,
    pub joints: usize,
    pub channels: usize,
    pub fuse: BlockParams,
}

impl IgtParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        block: usize,
        channels: usize,
        joints: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cfg = AttentionConfig::new(channels * block * block, heads)?;
        let fuse = BlockParams::init(store, format!("{prefix}.fuse"), cfg, rng);
        Ok(IgtParams {
            block,
            joints,
            channels,
            fuse,
        })
    }

    pub fn block_len(&self) -> usize {
        self.channels * self.block * self.block
    }

    /// Fuses gathered tokens `N×(J·C_b)`: each row is viewed as J joint
    /// rows of length C_b, passed through one self-attention block, and
    /// flattened back.
    pub fn tokenize(&self, g: &mut Graph, store: &ParamStore, gathered: Var) -> Result<Var> {
        let cb = self.block_len();
        let shape = g.shape(gathered).to_vec();
        if shape.len() != 2 || shape[1] != self.joints * cb {
            return Err(IvtError::contract(format!(
                "gathered token shape {shape:?} does not split into {} joints of {cb}",
                self.joints
            )));
        }
        let n = shape[0];
        let rows = g.reshape(gathered, &[n * self.joints, cb])?;
        let fused = self.fuse.self_block_grouped(g, store, rows, n)?;
        g.reshape(fused, &[n, self.joints * cb])
    }

    /// Token map `N×(J·C_b)` of one frame.
    pub fn frame(&self, g: &mut Graph, store: &ParamStore, f: Var, offsets: &Tensor) -> Result<Var> {
        let blocks = extract_blocks(g, f, self.block)?;
        let sources = block_sources(offsets, self.block, self.joints)?;
        let gathered = gather_instance(g, blocks, &sources, self.joints)?;
        self.tokenize(g, store, gathered)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn distinct(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| i as f64)
    }

    fn offsets_const(joints: usize, h: usize, w: usize, dx: f64, dy: f64) -> Tensor {
        Tensor::from_fn(&[2 * joints, h, w], |i| if (i / (h * w)).is_multiple_of(2) { dx } else { dy })
    }

    #[test]
    fn single_block_is_whole_map() {
        let mut g = Graph::new();
        let f = g.input(distinct(2, 4, 4));
        let b = extract_blocks(&mut g, f, 4).unwrap();
        assert_eq!(g.shape(b), &[1, 32]);
        assert_eq!(g.value(b).data(), distinct(2, 4, 4).data());
    }

    #[test]
    fn hand_enumerated_blocks() {
        let mut g = Graph::new();
        let f = g.input(distinct(1, 4, 4));
        let b = extract_blocks(&mut g, f, 2).unwrap();
        let want = [
            [0.0, 1.0, 4.0, 5.0],
            [2.0, 3.0, 6.0, 7.0],
            [8.0, 9.0, 12.0, 13.0],
            [10.0, 11.0, 14.0, 15.0],
        ];
        for (i, row) in want.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(g.value(b).at(&[i, c]), v);
            }
        }
    }

    #[test]
    fn non_divisible_map_is_config_error() {
        let mut g = Graph::new();
        let f = g.input(distinct(1, 6, 4));
        assert!(matches!(extract_blocks(&mut g, f, 4), Err(IvtError::Config(_))));
    }

    #[test]
    fn zero_offsets_repeat_anchor_block() {
        let mut g = Graph::new();
        let f = g.input(distinct(2, 4, 4));
        let b = extract_blocks(&mut g, f, 2).unwrap();
        let src = block_sources(&offsets_const(3, 4, 4, 0.0, 0.0), 2, 3).unwrap();
        let tok = gather_instance(&mut g, b, &src, 3).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                for c in 0..8 {
                    assert_eq!(g.value(tok).at(&[i, j * 8 + c]), g.value(b).at(&[i, c]));
                }
            }
        }
    }

    #[test]
    fn one_block_right_offsets_select_right_neighbour() {
        // 3×3 grid of 2×2 blocks; the center block (4) is interior.
        let src = block_sources(&offsets_const(2, 6, 6, 2.0, 0.0), 2, 2).unwrap();
        assert_eq!(&src[4 * 2..4 * 2 + 2], &[5, 5]);
        let down = block_sources(&offsets_const(2, 6, 6, 0.0, 2.0), 2, 2).unwrap();
        assert_eq!(&down[4 * 2..4 * 2 + 2], &[7, 7]);
    }

    #[test]
    fn far_offsets_clamp_to_border() {
        let src = block_sources(&offsets_const(1, 6, 6, 100.0, -100.0), 2, 1).unwrap();
        assert!(src.iter().all(|&b| b == 2));
        let src = block_sources(&offsets_const(1, 6, 6, -7.4, 9.0), 2, 1).unwrap();
        assert!(src.iter().all(|&b| b == 6));
    }

    #[test]
    fn nan_offsets_are_numeric_errors() {
        let mut off = offsets_const(2, 4, 4, 0.0, 0.0);
        off.set(&[3, 1, 1], f64::NAN);
        assert!(matches!(
            block_sources(&off, 2, 2),
            Err(IvtError::Numeric { index, .. }) if index == (3 * 4 + 1) * 4 + 1
        ));
    }

    #[test]
    fn offset_head_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = OffsetHead::init(&mut store, "off", 3, 4, 2, &mut rng);
        let mut g = Graph::new();
        let f = g.input(Tensor::uniform(&[3, 6, 4], -1.0, 1.0, &mut rng));
        let o = head.forward(&mut g, &store, f).unwrap();
        assert_eq!(g.shape(o), &[4, 6, 4]);
        let mut zero = store.clone();
        zero.zero_where(|_| true);
        let mut g = Graph::new();
        let f = g.input(Tensor::uniform(&[3, 6, 4], -1.0, 1.0, &mut rng));
        let o = head.forward(&mut g, &zero, f).unwrap();
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
        let bad = g.input(Tensor::zeros(&[2, 6, 4]));
        assert!(matches!(head.forward(&mut g, &store, bad), Err(IvtError::Config(_))));
    }

    #[test]
    fn offset_head_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let head = OffsetHead::init(&mut store, "off", 2, 3, 2, &mut rng);
        let x = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let o = head.forward(g, &store, v)?;
                g.sum(o)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    fn igt(block: usize, channels: usize, joints: usize, seed: u64) -> (ParamStore, IgtParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = IgtParams::init(&mut store, "igt", block, channels, joints, 2, &mut rng).unwrap();
        // Move LN gains/biases off their defaults so the oracles exercise them.
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        (store, p)
    }

    #[test]
    fn zero_output_fusion_is_identity() {
        let (mut store, p) = igt(2, 1, 3, 3);
        p.fuse.zero_outputs(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[5, 12], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = p.tokenize(&mut g, &store, xv).unwrap();
        assert!(g.value(y).bit_eq(&x));
        let bad = g.input(Tensor::zeros(&[5, 11]));
        assert!(matches!(p.tokenize(&mut g, &store, bad), Err(IvtError::Contract(_))));
    }

    #[test]
    fn tokenize_matches_per_token_composition() {
        let (store, p) = igt(2, 2, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[4, 24], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x);
        let batched = p.tokenize(&mut g, &store, xv).unwrap();
        for i in 0..4 {
            let row = g.slice(xv, 0, i, 1).unwrap();
            let rows = g.reshape(row, &[3, 8]).unwrap();
            let fused = p.fuse.self_block(&mut g, &store, rows).unwrap();
            let flat = g.reshape(fused, &[1, 24]).unwrap();
            let got = g.slice(batched, 0, i, 1).unwrap();
            assert!(g.value(got).max_abs_diff(g.value(flat)) <= 1e-12);
        }
    }

    #[test]
    fn single_block_grid_is_single_tokenize() {
        let (store, p) = igt(4, 1, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor::uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
        let off = Tensor::uniform(&[4, 4, 4], -3.0, 3.0, &mut rng);
        let mut g = Graph::new();
        let fv = g.input(f.clone());
        let tok = p.frame(&mut g, &store, fv, &off).unwrap();
        assert_eq!(g.shape(tok), &[1, 32]);
        let flat = g.input(Tensor::new(&[1, 16], f.data().to_vec()).unwrap());
        let twice = g.concat(&[flat, flat], 1).unwrap();
        let want = p.tokenize(&mut g, &store, twice).unwrap();
        assert!(g.value(tok).bit_eq(g.value(want)));
    }

    #[test]
    fn hand_traced_two_joint_frame() {
        // 4×4 map, K=2, J=2. Anchor 0 points joint 0 at itself and joint 1
        // one block down; anchor 3 points joint 0 up-left.
        let mut off = Tensor::zeros(&[4, 4, 4]);
        off.set(&[3, 1, 1], 2.0); // anchor 0 (center pixel (1,1)), joint 1 dy
        off.set(&[0, 3, 3], -2.0); // anchor 3 (center (3,3)), joint 0 dx
        off.set(&[1, 3, 3], -2.0); // anchor 3, joint 0 dy
        off.set(&[2, 1, 3], 1.4); // anchor 1 (center (1,3)), joint 1 dx rounds to +1 → stays in block 1
        let src = block_sources(&off, 2, 2).unwrap();
        assert_eq!(src, vec![0, 2, 1, 1, 2, 2, 0, 3]);
        let (store, p) = igt(2, 1, 2, 9);
        let f = distinct(1, 4, 4);
        let mut g = Graph::new();
        let fv = g.input(f);
        let tok = p.frame(&mut g, &store, fv, &off).unwrap();
        let blocks = extract_blocks(&mut g, fv, 2).unwrap();
        let manual = gather_instance(&mut g, blocks, &src, 2).unwrap();
        assert_eq!(
            &g.value(manual).data()[..8],
            &[0.0, 1.0, 4.0, 5.0, 8.0, 9.0, 12.0, 13.0]
        );
        let want = p.tokenize(&mut g, &store, manual).unwrap();
        assert!(g.value(tok).bit_eq(g.value(want)));
    }

    #[test]
    fn token_gradient_support_is_the_gathered_blocks() {
        let (store, p) = igt(2, 1, 2, 10);
        let mut off = Tensor::zeros(&[4, 6, 6]);
        // Anchor 4 (center (3,3)): joint 0 → block 0, joint 1 → block 8.
        off.set(&[0, 3, 3], -2.0);
        off.set(&[1, 3, 3], -2.0);
        off.set(&[2, 3, 3], 2.0);
        off.set(&[3, 3, 3], 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let f = g.leaf(Tensor::uniform(&[1, 6, 6], -1.0, 1.0, &mut rng));
        let tok = p.frame(&mut g, &store, f, &off).unwrap();
        let t4 = g.slice(tok, 0, 4, 1).unwrap();
        let l = g.sum(t4).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(f).unwrap();
        let support = |y: usize, x: usize| (y < 2 && x < 2) || (y >= 4 && x >= 4);
        for y in 0..6 {
            for x in 0..6 {
                let gv = grad[y * 6 + x];
                if support(y, x) {
                    assert!(gv != 0.0, "zero gradient inside gathered block at ({y},{x})");
                } else {
                    assert_eq!(gv, 0.0, "gradient leaked to ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn retile_tokens_between_scales() {
        let mut g = Graph::new();
        let map = g.input(distinct(3, 8, 8));
        let t2 = extract_blocks(&mut g, map, 2).unwrap();
        let t8 = retile_tokens(&mut g, t2, 3, 8, 8, 2, 8).unwrap();
        let direct = extract_blocks(&mut g, map, 8).unwrap();
        assert!(g.value(t8).bit_eq(g.value(direct)));
        let back = retile_tokens(&mut g, t8, 3, 8, 8, 8, 2).unwrap();
        assert!(g.value(back).bit_eq(g.value(t2)));
    }

    proptest! {
        #[test]
        fn tiling_is_lossless(c in 1usize..4, nh in 1usize..4, nw in 1usize..4, k in 1usize..5, seed in any::<u64>()) {
            let (h, w) = (nh * k, nw * k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
            let mut g = Graph::new();
            let fv = g.input(f.clone());
            let b = extract_blocks(&mut g, fv, k).unwrap();
            prop_assert_eq!(g.shape(b), &[nh * nw, c * k * k][..]);
            let back = retile_blocks(&mut g, b, c, h, w, k).unwrap();
            prop_assert!(g.value(back).bit_eq(&f));
        }

        #[test]
        fn joint_permutation_permutes_segments(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
            let off = Tensor::uniform(&[6, 6, 6], -5.0, 5.0, &mut rng);
            let mut permuted = off.clone();
            for (new_j, &old_j) in perm.iter().enumerate() {
                for ch in 0..2 {
                    for p in 0..36 {
                        permuted.data_mut()[(2 * new_j + ch) * 36 + p] = off.data()[(2 * old_j + ch) * 36 + p];
                    }
                }
            }
            let mut g = Graph::new();
            let fv = g.input(f);
            let blocks = extract_blocks(&mut g, fv, 2).unwrap();
            let a = gather_instance(&mut g, blocks, &block_sources(&off, 2, 3).unwrap(), 3).unwrap();
            let b = gather_instance(&mut g, blocks, &block_sources(&permuted, 2, 3).unwrap(), 3).unwrap();
            for i in 0..9 {
                for (new_j, &old_j) in perm.iter().enumerate() {
                    for c in 0..8 {
                        prop_assert_eq!(
                            g.value(b).at(&[i, new_j * 8 + c]).to_bits(),
                            g.value(a).at(&[i, old_j * 8 + c]).to_bits()
                        );
                    }
                }
            }
        }
    }
}
