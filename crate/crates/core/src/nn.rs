//! Transformer primitives: scaled dot-product attention, multi-head
//! attention with learned projections, feed-forward network, layer norm, and
//! pre-norm residual blocks for self- and cross-attention.
//!
//! Parameters live in a [`ParamStore`] under a per-block name prefix; the
//! functions here bind them onto the graph on first use.

use rand::Rng;

use crate::error::{IvtError, Result};
use crate::tensor::{AttentionGroups, Graph, ParamStore, Var};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Width and head split of one attention block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub ln_eps: f64,
}

impl AttentionConfig {
    /// `d_ffn` defaults to 4·d_model.
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if d_model == 0 || heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(IvtError::config(format!(
                "d_model {d_model} is not divisible into {heads} heads"
            )));
        }
        Ok(AttentionConfig {
            d_model,
            heads,
            d_ffn: 4 * d_model,
            ln_eps: DEFAULT_LN_EPS,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Names of a dense layer's weight [in×out] and bias [out].
fn linear_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let (w, b) = linear_names(prefix);
    store.init_uniform(w, &[fan_in, fan_out], fan_in, rng);
    store.init_zeros(b, &[fan_out]);
}

/// x·W + b for x: [n×in].
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let (w, b) = linear_names(prefix);
    let w = g.param(store, &w)?;
    let b = g.param(store, &b)?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Layer norm with the gain/bias named `{prefix}.g` / `{prefix}.b`.
pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.g"))?;
    let bias = g.param(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, eps)
}

/// softmax(Q·Kᵀ/√d)·V, built from primitive tape ops.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
        return Err(IvtError::Shape {
            op: "attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let d = sq[1];
    let logits = g.matmul_nt(q, k)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax_rows(logits)?;
    g.matmul(weights, v)
}

/// Parameters of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub prefix: String,
    pub cfg: AttentionConfig,
}

impl BlockParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: impl Into<String>,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let prefix = prefix.into();
        let d = cfg.d_model;
        for proj in ["q", "k", "v", "out"] {
            init_linear(store, &format!("{prefix}.{proj}"), d, d, rng);
        }
        init_linear(store, &format!("{prefix}.ffn1"), d, cfg.d_ffn, rng);
        init_linear(store, &format!("{prefix}.ffn2"), cfg.d_ffn, d, rng);
        for ln in ["ln1", "ln2"] {
            store.init_ones(format!("{prefix}.{ln}.g"), &[d]);
            store.init_zeros(format!("{prefix}.{ln}.b"), &[d]);
        }
        BlockParams { prefix, cfg }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Zeroes the attention output projection and the second FFN layer,
    /// which turns the residual block into the identity map.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        let out = self.name("out.");
        let ffn2 = self.name("ffn2.");
        store.zero_where(|n| n.starts_with(&out) || n.starts_with(&ffn2));
    }

    /// Sets Q/K/V projections to the identity with zero bias.
    pub fn set_identity_projections(&self, store: &mut ParamStore) {
        let d = self.cfg.d_model;
        for proj in ["q", "k", "v"] {
            let w = store.get_mut(&self.name(&format!("{proj}.w"))).expect("block initialized");
            for i in 0..d {
                for j in 0..d {
                    w.set(&[i, j], if i == j { 1.0 } else { 0.0 });
                }
            }
            store.zero_where(|n| n == self.name(&format!("{proj}.b")));
        }
    }

    fn check_width(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.cfg.d_model {
            return Err(IvtError::Shape {
                op: "block input",
                lhs: s.to_vec(),
                rhs: vec![self.cfg.d_model],
            });
        }
        Ok(())
    }

    /// Multi-head attention over `groups` independent query/key sets:
    /// q_in: [G·nq × d], kv rows: [G·nk × d].
    pub fn mha_grouped(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        groups: usize,
        causal: bool,
    ) -> Result<Var> {
        for x in [q_in, k_in, v_in] {
            self.check_width(g, x)?;
        }
        let nq = g.shape(q_in)[0] / groups.max(1);
        let nk = g.shape(k_in)[0] / groups.max(1);
        let q = linear(g, store, &self.name("q"), q_in)?;
        let k = linear(g, store, &self.name("k"), k_in)?;
        let v = linear(g, store, &self.name("v"), v_in)?;
        let heads = g.grouped_attention(
            q,
            k,
            v,
            AttentionGroups {
                groups,
                queries: nq,
                keys: nk,
                heads: self.cfg.heads,
                causal,
            },
        )?;
        linear(g, store, &self.name("out"), heads)
    }

    /// P_out(Concat(head_1..head_h)) with head_i = attention on the i-th
    /// feature slice of the projected Q, K, V.
    pub fn mha(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var> {
        self.mha_grouped(g, store, q, k, v, 1, false)
    }

    pub fn mhsa(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.mha(g, store, x, x, x)
    }

    /// W2·gelu(W1·x).
    pub fn ffn(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = linear(g, store, &self.name("ffn1"), x)?;
        let h = g.gelu(h)?;
        linear(g, store, &self.name("ffn2"), h)
    }

    /// Layer norm `ln1` or `ln2` of this block.
    pub fn ln(&self, g: &mut Graph, store: &ParamStore, which: &str, x: Var) -> Result<Var> {
        layer_norm(g, store, &self.name(which), x, self.cfg.ln_eps)
    }

    /// One of the block's dense layers: `q`, `k`, `v`, `out`, `ffn1`, `ffn2`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, which: &str, x: Var) -> Result<Var> {
        linear(g, store, &self.name(which), x)
    }

    /// Y = X + MHSA(LN(X)); out = Y + FFN(LN(Y)). With `groups` > 1 the
    /// rows of X form independent attention sets of equal size.
    pub fn self_block_grouped(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        groups: usize,
    ) -> Result<Var> {
        let n = self.ln(g, store, "ln1", x)?;
        let a = self.mha_grouped(g, store, n, n, n, groups, false)?;
        let y = g.add(x, a)?;
        let n2 = self.ln(g, store, "ln2", y)?;
        let f = self.ffn(g, store, n2)?;
        g.add(y, f)
    }

    pub fn self_block(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.self_block_grouped(g, store, x, 1)
    }

    /// Y = Q + MHA(LN(Q), LN(K), LN(V)); out = Y + FFN(LN(Y)).
    #[allow(clippy::too_many_arguments)]
    pub fn cross_block_grouped(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        causal: bool,
    ) -> Result<Var> {
        let nq = self.ln(g, store, "ln1", q)?;
        let nk = self.ln(g, store, "ln1", k)?;
        let nv = if v == k { nk } else { self.ln(g, store, "ln1", v)? };
        let a = self.mha_grouped(g, store, nq, nk, nv, groups, causal)?;
        let y = g.add(q, a)?;
        let n2 = self.ln(g, store, "ln2", y)?;
        let f = self.ffn(g, store, n2)?;
        g.add(y, f)
    }

    pub fn cross_block(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var> {
        self.cross_block_grouped(g, store, q, k, v, 1, false)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, grad_check_params, Tensor};

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, rng)
    }

    /// softmax(QKᵀ/√d)V evaluated with scalar loops.
    fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<Vec<f64>> {
        let (nq, d) = (q.shape()[0], q.shape()[1]);
        let nk = k.shape()[0];
        let mut out = vec![vec![0.0; d]; nq];
        for i in 0..nq {
            let mut logits = vec![0.0; nk];
            for j in 0..nk {
                let mut s = 0.0;
                for c in 0..d {
                    s += q.at(&[i, c]) * k.at(&[j, c]);
                }
                logits[j] = s / (d as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..nk {
                let w = (logits[j] - m).exp() / z;
                for c in 0..d {
                    out[i][c] += w * v.at(&[j, c]);
                }
            }
        }
        out
    }

    fn assert_close(t: &Tensor, want: &[Vec<f64>], tol: f64) {
        for (i, row) in want.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                let got = t.at(&[i, c]);
                assert!((got - w).abs() <= tol, "[{i},{c}] {got} vs {w}");
            }
        }
    }

    fn block(d: usize, heads: usize, seed: u64) -> (ParamStore, BlockParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = BlockParams::init(&mut store, "blk", AttentionConfig::new(d, heads).unwrap(), &mut rng);
        (store, p)
    }

    /// Moves every parameter off its structured initial value.
    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in store.iter_mut() {
            for x in t.data_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        assert!(matches!(AttentionConfig::new(6, 4), Err(IvtError::Config(_))));
        let c = AttentionConfig::new(8, 2).unwrap();
        assert_eq!((c.d_head(), c.d_ffn), (4, 32));
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let q = g.input(rand_t(&[3, 4], &mut rng));
        let k = g.input(rand_t(&[1, 4], &mut rng));
        let vt = rand_t(&[1, 4], &mut rng);
        let v = g.input(vt.clone());
        let out = attention(&mut g, q, k, v).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(g.value(out).at(&[r, c]), vt.at(&[0, c]));
            }
        }
    }

    #[test]
    fn uniform_logits_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let q = g.input(Tensor::zeros(&[2, 3]));
        let k = g.input(rand_t(&[4, 3], &mut rng));
        let vt = rand_t(&[4, 3], &mut rng);
        let v = g.input(vt.clone());
        let out = attention(&mut g, q, k, v).unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|r| vt.at(&[r, c])).sum::<f64>() / 4.0;
            assert!((g.value(out).at(&[0, c]) - mean).abs() <= 1e-15);
        }
    }

    #[test]
    fn attention_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (
            rand_t(&[3, 4], &mut rng),
            rand_t(&[3, 4], &mut rng),
            rand_t(&[3, 4], &mut rng),
        );
        let want = attention_oracle(&q, &k, &v);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v));
        let out = attention(&mut g, qv, kv, vv).unwrap();
        assert_close(g.value(out), &want, 1e-12);
    }

    #[test]
    fn heads_one_is_attention_wrapped_in_output_projection() {
        let (mut store, p) = block(4, 1, 4);
        randomize(&mut store, 40);
        p.set_identity_projections(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (
            rand_t(&[2, 4], &mut rng),
            rand_t(&[3, 4], &mut rng),
            rand_t(&[3, 4], &mut rng),
        );
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v));
        let got = p.mha(&mut g, &store, qv, kv, vv).unwrap();
        let a = attention(&mut g, qv, kv, vv).unwrap();
        let want = linear(&mut g, &store, "blk.out", a).unwrap();
        assert!(g.value(got).max_abs_diff(g.value(want)) <= 1e-12);
    }

    #[test]
    fn two_heads_match_per_head_slice_oracle() {
        let (mut store, p) = block(4, 2, 6);
        randomize(&mut store, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (
            rand_t(&[3, 4], &mut rng),
            rand_t(&[5, 4], &mut rng),
            rand_t(&[5, 4], &mut rng),
        );
        // Oracle: project with explicit loops, slice each head, attend, concat, project.
        let proj = |x: &Tensor, name: &str| -> Tensor {
            let w = store.get(&format!("blk.{name}.w")).unwrap();
            let b = store.get(&format!("blk.{name}.b")).unwrap();
            let (n, din) = (x.shape()[0], x.shape()[1]);
            let dout = w.shape()[1];
            Tensor::from_fn(&[n, dout], |idx| {
                let (r, c) = (idx / dout, idx % dout);
                (0..din).map(|i| x.at(&[r, i]) * w.at(&[i, c])).sum::<f64>() + b.data()[c]
            })
        };
        let (pq, pk, pv) = (proj(&q, "q"), proj(&k, "k"), proj(&v, "v"));
        let slice = |t: &Tensor, h: usize| {
            let n = t.shape()[0];
            Tensor::from_fn(&[n, 2], |idx| t.at(&[idx / 2, h * 2 + idx % 2]))
        };
        let mut concat = Tensor::zeros(&[3, 4]);
        for h in 0..2 {
            let o = attention_oracle(&slice(&pq, h), &slice(&pk, h), &slice(&pv, h));
            for r in 0..3 {
                for c in 0..2 {
                    concat.set(&[r, h * 2 + c], o[r][c]);
                }
            }
        }
        let want = proj(&concat, "out");
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v));
        let got = p.mha(&mut g, &store, qv, kv, vv).unwrap();
        assert!(g.value(got).max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn zero_values_give_output_bias() {
        let (mut store, p) = block(4, 2, 8);
        randomize(&mut store, 80);
        store.zero_where(|n| n == "blk.v.b");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let q = g.input(rand_t(&[3, 4], &mut rng));
        let k = g.input(rand_t(&[2, 4], &mut rng));
        let v = g.input(Tensor::zeros(&[2, 4]));
        let out = p.mha(&mut g, &store, q, k, v).unwrap();
        let bias = store.get("blk.out.b").unwrap().data();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(g.value(out).at(&[r, c]), bias[c]);
            }
        }
    }

    #[test]
    fn mhsa_matches_projection_composition() {
        let (mut store, p) = block(8, 2, 10);
        randomize(&mut store, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_t(&[4, 8], &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x);
        let got = p.mhsa(&mut g, &store, xv).unwrap();
        let q = linear(&mut g, &store, "blk.q", xv).unwrap();
        let k = linear(&mut g, &store, "blk.k", xv).unwrap();
        let v = linear(&mut g, &store, "blk.v", xv).unwrap();
        let mut heads = Vec::new();
        for h in 0..2 {
            let qh = g.slice(q, 1, h * 4, 4).unwrap();
            let kh = g.slice(k, 1, h * 4, 4).unwrap();
            let vh = g.slice(v, 1, h * 4, 4).unwrap();
            heads.push(attention(&mut g, qh, kh, vh).unwrap());
        }
        let cat = g.concat(&heads, 1).unwrap();
        let want = linear(&mut g, &store, "blk.out", cat).unwrap();
        assert!(g.value(got).max_abs_diff(g.value(want)) <= 1e-12);
    }

    #[test]
    fn layer_norm_rows() {
        let mut store = ParamStore::new();
        store.insert("ln.g", Tensor::new(&[4], vec![2.0, -1.0, 0.5, 3.0]).unwrap());
        store.insert("ln.b", Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2, 4], vec![2.0, 2.0, 2.0, 2.0, 1.0, -3.0, 0.5, 7.0]).unwrap());
        let y = layer_norm(&mut g, &store, "ln", x, 1e-5).unwrap();
        for c in 0..4 {
            assert_eq!(g.value(y).at(&[0, c]), store.get("ln.b").unwrap().data()[c]);
        }
        let mut unit = ParamStore::new();
        unit.init_ones("u.g", &[4]);
        unit.init_zeros("u.b", &[4]);
        let z = layer_norm(&mut g, &unit, "u", x, 1e-12).unwrap();
        let row: Vec<f64> = (0..4).map(|c| g.value(z).at(&[1, c])).collect();
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() <= 1e-9 && (var - 1.0).abs() <= 1e-9);
        assert!(matches!(
            layer_norm(&mut g, &unit, "u", x, 0.0),
            Err(IvtError::Config(_))
        ));
    }

    #[test]
    fn ffn_gradient_check() {
        let (mut store, p) = block(4, 2, 12);
        randomize(&mut store, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_t(&[3, 4], &mut rng);
        let err = grad_check(
            |g, v| {
                let y = p.ffn(g, &store, v)?;
                let y = g.square(y)?;
                g.sum(y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn zeroed_outputs_make_blocks_identity() {
        let (mut store, p) = block(6, 3, 14);
        randomize(&mut store, 140);
        p.zero_outputs(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_t(&[5, 6], &mut rng);
        let kv = rand_t(&[3, 6], &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let kvv = g.input(kv);
        let y = p.self_block(&mut g, &store, xv).unwrap();
        assert!(g.value(y).bit_eq(&x));
        let z = p.cross_block(&mut g, &store, xv, kvv, kvv).unwrap();
        assert!(g.value(z).bit_eq(&x));
    }

    #[test]
    fn stacked_blocks_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let b1 = BlockParams::init(&mut store, "b1", cfg, &mut rng);
        let b2 = BlockParams::init(&mut store, "b2", cfg, &mut rng);
        randomize(&mut store, 160);
        let x = rand_t(&[3, 4], &mut rng);
        let w = rand_t(&[3, 4], &mut rng);
        let f = |g: &mut Graph, s: &ParamStore, v: Var| -> Result<Var> {
            let y = b1.self_block(g, s, v)?;
            let y = b2.self_block(g, s, y)?;
            let wv = g.input(w.clone());
            let y = g.mul(y, wv)?;
            g.sum(y)
        };
        let err = grad_check(|g, v| f(g, &store, v), &x, 1e-6).unwrap();
        assert!(err <= 1e-5, "{err}");
        let err = grad_check_params(
            &store,
            |_| true,
            |g, s| {
                let v = g.input(x.clone());
                f(g, s, v)
            },
            1e-6,
            4,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn every_block_parameter_receives_gradient() {
        for seed in 0..5 {
            let (store, p) = block(4, 2, 200 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let x = rand_t(&[3, 4], &mut rng);
            let kv = rand_t(&[2, 4], &mut rng);
            let w = rand_t(&[3, 4], &mut rng);
            for cross in [false, true] {
                let mut g = Graph::new();
                let xv = g.input(x.clone());
                let y = if cross {
                    let kvv = g.input(kv.clone());
                    p.cross_block(&mut g, &store, xv, kvv, kvv).unwrap()
                } else {
                    p.self_block(&mut g, &store, xv).unwrap()
                };
                let wv = g.input(w.clone());
                let y = g.mul(y, wv).unwrap();
                let l = g.sum(y).unwrap();
                g.backward(l).unwrap();
                let mut s = store.clone();
                s.collect_grads(&g);
                for (name, t) in s.iter() {
                    let norm: f64 = t.grad().unwrap().iter().map(|v| v * v).sum();
                    assert!(norm > 0.0, "{name} received no gradient (cross={cross})");
                }
            }
        }
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn softmax_rows_sum_to_one(x in arb_matrix(4, 7)) {
            let mut g = Graph::new();
            let v = g.input(x);
            let s = g.softmax_rows(v).unwrap();
            for r in 0..4 {
                let sum: f64 = (0..7).map(|c| g.value(s).at(&[r, c])).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn attention_is_shift_invariant(
            q in arb_matrix(3, 4), k in arb_matrix(5, 4), v in arb_matrix(5, 4), c in -3.0f64..3.0
        ) {
            // Adding c·q̂ to every key shifts each logit row by a constant.
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
            let base = attention(&mut g, qv, kv, vv).unwrap();
            let logits = g.matmul_nt(qv, kv).unwrap();
            let shifted = g.add_scalar(logits, c).unwrap();
            let scaled = g.scale(shifted, 0.5).unwrap();
            let w = g.softmax_rows(scaled).unwrap();
            let out = g.matmul(w, vv).unwrap();
            prop_assert!(g.value(base).max_abs_diff(g.value(out)) <= 1e-9);
        }

        #[test]
        fn mhsa_is_permutation_equivariant(seed in 0u64..10_000, perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
            let (mut store, p) = block(4, 2, seed);
            randomize(&mut store, seed + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let x = rand_t(&[5, 4], &mut rng);
            let mut g = Graph::new();
            let xv = g.input(x);
            let y = p.mhsa(&mut g, &store, xv).unwrap();
            let xp = g.gather(xv, &perm, 0).unwrap();
            let yp = p.mhsa(&mut g, &store, xp).unwrap();
            let y_then_p = g.gather(y, &perm, 0).unwrap();
            prop_assert!(g.value(yp).max_abs_diff(g.value(y_then_p)) <= 1e-12);
        }

        #[test]
        fn single_key_attention_is_exact(q in arb_matrix(3, 4), v in arb_matrix(1, 4), k in arb_matrix(1, 4)) {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v.clone()));
            let out = attention(&mut g, qv, kv, vv).unwrap();
            for r in 0..3 {
                for c in 0..4 {
                    prop_assert_eq!(g.value(out).at(&[r, c]), v.at(&[0, c]));
                }
            }
        }

        #[test]
        fn heads_one_degeneracy(seed in 0u64..10_000) {
            let (mut store, p) = block(4, 1, seed);
            randomize(&mut store, seed + 7);
            p.set_identity_projections(&mut store);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
            let x = rand_t(&[3, 4], &mut rng);
            let mut g = Graph::new();
            let xv = g.input(x);
            let got = p.mhsa(&mut g, &store, xv).unwrap();
            let a = attention(&mut g, xv, xv, xv).unwrap();
            let want = linear(&mut g, &store, "blk.out", a).unwrap();
            prop_assert!(g.value(got).max_abs_diff(g.value(want)) <= 1e-12);
        }
    }
}
