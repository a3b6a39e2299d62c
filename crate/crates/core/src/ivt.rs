//! Spatial, temporal and cross-scale attention over instance-guided tokens.
//!
//! Token maps are `N×D` graph values, one per frame. A single-scale layer
//! runs spatial self-attention per frame (ISA), aligns every frame onto each
//! query frame with the block-level flow, runs temporal cross-attention per
//! block slot (ITA), and adds the layer input back. A multi-scale layer
//! replaces ISA by attention over the union of all scales' projected tokens
//! (CISA) and runs ITA per scale before merging onto the finest grid (MITA).

use rand::Rng;

use crate::error::{IvtError, Result};
use crate::igt::{grid_dims, retile_tokens, IgtParams};
use crate::nn::{init_linear, linear, AttentionConfig, BlockParams};
use crate::tensor::{AttentionGroups, Graph, ParamStore, Tensor, Var};

/// Architecture of the tokenizer and the attention stack.
#[derive(Clone, Debug, PartialEq)]
pub struct IvtConfig {
    pub joints: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Block sizes; the smallest one is the finest grid.
    pub scales: Vec<usize>,
    pub heads: usize,
    pub igt_heads: usize,
    pub layers: usize,
    pub causal: bool,
}

impl IvtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.channels == 0 || self.scales.is_empty() {
            return Err(IvtError::config("joints, channels and scales must be non-empty"));
        }
        let mut sorted = self.scales.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.scales.len() {
            return Err(IvtError::config(format!("duplicate scales in {:?}", self.scales)));
        }
        for &s in &self.scales {
            grid_dims(self.height, self.width, s)?;
            AttentionConfig::new(self.token_dim(s), self.heads)?;
            AttentionConfig::new(self.channels * s * s, self.igt_heads)?;
        }
        AttentionConfig::new(self.d_common(), self.heads)?;
        Ok(())
    }

    /// Channels of the pixel view of a token map (J·C).
    pub fn map_channels(&self) -> usize {
        self.joints * self.channels
    }

    pub fn token_dim(&self, scale: usize) -> usize {
        self.map_channels() * scale * scale
    }

    pub fn tokens(&self, scale: usize) -> usize {
        (self.height / scale) * (self.width / scale)
    }

    pub fn finest(&self) -> usize {
        *self.scales.iter().min().expect("validated scales")
    }

    /// Entries in the widest square projection matrix of the stack.
    pub fn largest_projection(&self) -> usize {
        let widest = self.scales.iter().map(|&s| self.token_dim(s)).max().unwrap_or(0);
        widest * widest
    }

    /// Token dimension of the middle scale.
    pub fn d_common(&self) -> usize {
        let mut sorted = self.scales.clone();
        sorted.sort_unstable();
        self.token_dim(sorted[sorted.len() / 2])
    }
}

/// For each query frame t and source frame s, the source cell whose token
/// lands in each cell of frame t's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    cells: usize,
    src: Vec<Vec<Vec<usize>>>,
}

impl Alignment {
    pub fn identity(frames: usize, cells: usize) -> Self {
        let id: Vec<usize> = (0..cells).collect();
        Alignment {
            cells,
            src: vec![vec![id; frames]; frames],
        }
    }

    /// Builds the alignment from per-pixel flows between adjacent frames
    /// (`flows[u]` is `2×H×W`, frame u → u+1). Block motion is the mean
    /// pixel flow over the block, chained across intermediate frames and
    /// rounded to whole blocks at the end.
    pub fn from_flows(flows: &[Tensor], frames: usize, h: usize, w: usize, k: usize) -> Result<Self> {
        if frames == 0 || flows.len() + 1 != frames {
            return Err(IvtError::contract(format!(
                "{frames} frames need {} flow fields, got {}",
                frames.saturating_sub(1),
                flows.len()
            )));
        }
        let (nh, nw) = grid_dims(h, w, k)?;
        let means: Vec<Vec<(f64, f64)>> = flows
            .iter()
            .map(|f| block_mean_flow(f, h, w, k))
            .collect::<Result<_>>()?;
        let cell_of = |x: f64, y: f64| -> usize {
            let cx = ((x / k as f64).floor() as i64).clamp(0, nw as i64 - 1) as usize;
            let cy = ((y / k as f64).floor() as i64).clamp(0, nh as i64 - 1) as usize;
            cy * nw + cx
        };
        let mut src = Vec::with_capacity(frames);
        for t in 0..frames {
            let mut per_source = Vec::with_capacity(frames);
            for s in 0..frames {
                let mut best: Vec<Option<(f64, usize)>> = vec![None; nh * nw];
                for b in 0..nh * nw {
                    let (by, bx) = (b / nw, b % nw);
                    let (x0, y0) = ((bx as f64 + 0.5) * k as f64, (by as f64 + 0.5) * k as f64);
                    let (mut x, mut y) = (x0, y0);
                    if s < t {
                        for m in &means[s..t] {
                            let (dx, dy) = m[cell_of(x, y)];
                            x += dx;
                            y += dy;
                        }
                    } else {
                        for m in means[t..s].iter().rev() {
                            let (dx, dy) = m[cell_of(x, y)];
                            x -= dx;
                            y -= dy;
                        }
                    }
                    let (dx, dy) = (x - x0, y - y0);
                    let gx = (bx as i64 + (dx / k as f64).round() as i64).clamp(0, nw as i64 - 1) as usize;
                    let gy = (by as i64 + (dy / k as f64).round() as i64).clamp(0, nh as i64 - 1) as usize;
                    let dest = gy * nw + gx;
                    let mag = dx * dx + dy * dy;
                    if best[dest].is_none_or(|(m, _)| mag >= m) {
                        best[dest] = Some((mag, b));
                    }
                }
                per_source.push(
                    best.iter()
                        .enumerate()
                        .map(|(dest, b)| b.map_or(dest, |(_, src)| src))
                        .collect(),
                );
            }
            src.push(per_source);
        }
        Ok(Alignment { cells: nh * nw, src })
    }

    pub fn frames(&self) -> usize {
        self.src.len()
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Source cell per destination cell for frame `source` aligned onto `target`.
    pub fn sources(&self, target: usize, source: usize) -> &[usize] {
        &self.src[target][source]
    }
}

fn block_mean_flow(flow: &Tensor, h: usize, w: usize, k: usize) -> Result<Vec<(f64, f64)>> {
    if flow.shape() != [2, h, w] {
        return Err(IvtError::Shape {
            op: "flow field",
            lhs: flow.shape().to_vec(),
            rhs: vec![2, h, w],
        });
    }
    if let Some(i) = flow.first_non_finite() {
        return Err(IvtError::Numeric {
            context: "flow field".into(),
            index: i,
        });
    }
    let (nh, nw) = grid_dims(h, w, k)?;
    let d = flow.data();
    let area = (k * k) as f64;
    let mut out = Vec::with_capacity(nh * nw);
    for by in 0..nh {
        for bx in 0..nw {
            let (mut sx, mut sy) = (0.0, 0.0);
            for y in by * k..(by + 1) * k {
                for x in bx * k..(bx + 1) * k {
                    sx += d[y * w + x];
                    sy += d[(h + y) * w + x];
                }
            }
            out.push((sx / area, sy / area));
        }
    }
    Ok(out)
}

/// Relocates every frame's tokens onto the grid of frame `target`.
pub fn align_tokens(g: &mut Graph, frames: &[Var], alignment: &Alignment, target: usize) -> Result<Vec<Var>> {
    check_alignment(g, frames, alignment)?;
    frames
        .iter()
        .enumerate()
        .map(|(s, &f)| g.gather(f, alignment.sources(target, s), 0))
        .collect()
}

fn check_alignment(g: &Graph, frames: &[Var], alignment: &Alignment) -> Result<()> {
    if frames.len() != alignment.frames() {
        return Err(IvtError::contract(format!(
            "alignment covers {} frames, sequence has {}",
            alignment.frames(),
            frames.len()
        )));
    }
    let n = frames.first().map(|&f| g.shape(f)[0]);
    if n != Some(alignment.cells()) {
        return Err(IvtError::config(format!(
            "alignment has {} cells, token map has {:?}",
            alignment.cells(),
            n
        )));
    }
    Ok(())
}

/// Spatial self-attention over the tokens of one frame, with learned
/// per-block positional embeddings `pos` added first.
pub fn isa(g: &mut Graph, store: &ParamStore, block: &BlockParams, pos: &str, tokens: Var) -> Result<Var> {
    let p = g.param(store, pos)?;
    if g.shape(p) != g.shape(tokens) {
        return Err(IvtError::config(format!(
            "positional table {:?} does not match token map {:?}",
            g.shape(p),
            g.shape(tokens)
        )));
    }
    let x = g.add(tokens, p)?;
    block.self_block(g, store, x)
}

/// Temporal cross-attention. For every frame t and slot i the query is
/// token (t, i); keys and values are the tokens of slot i in every frame
/// after alignment onto frame t (frames ≤ t when `causal`). All outputs are
/// computed from the same inputs.
pub fn ita(
    g: &mut Graph,
    store: &ParamStore,
    block: &BlockParams,
    frames: &[Var],
    alignment: &Alignment,
    causal: bool,
) -> Result<Vec<Var>> {
    check_alignment(g, frames, alignment)?;
    let t_len = frames.len();
    let n = alignment.cells();
    let x = g.concat(frames, 0)?;
    let normed = block.ln(g, store, "ln1", x)?;
    let q = block.project(g, store, "q", normed)?;
    let k = block.project(g, store, "k", normed)?;
    let v = block.project(g, store, "v", normed)?;
    let mut outs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let keys = if causal { t + 1 } else { t_len };
        let mut idx = Vec::with_capacity(n * keys);
        for i in 0..n {
            for s in 0..keys {
                idx.push(s * n + alignment.sources(t, s)[i]);
            }
        }
        let kt = g.gather(k, &idx, 0)?;
        let vt = g.gather(v, &idx, 0)?;
        let qt = g.slice(q, 0, t * n, n)?;
        outs.push(g.grouped_attention(
            qt,
            kt,
            vt,
            AttentionGroups {
                groups: n,
                queries: 1,
                keys,
                heads: block.cfg.heads,
                causal: false,
            },
        )?);
    }
    let heads = g.concat(&outs, 0)?;
    let a = block.project(g, store, "out", heads)?;
    let y = g.add(x, a)?;
    let n2 = block.ln(g, store, "ln2", y)?;
    let f = block.ffn(g, store, n2)?;
    let out = g.add(y, f)?;
    (0..t_len).map(|t| g.slice(out, 0, t * n, n)).collect()
}

/// Parameters of one single-scale layer.
#[derive(Clone, Debug, PartialEq)]
pub struct IvtLayer {
    pub isa: BlockParams,
    pub ita: BlockParams,
    pub pos: String,
}

impl IvtLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        tokens: usize,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let pos = format!("{prefix}.pos");
        store.init_zeros(pos.clone(), &[tokens, cfg.d_model]);
        IvtLayer {
            isa: BlockParams::init(store, format!("{prefix}.isa"), cfg, rng),
            ita: BlockParams::init(store, format!("{prefix}.ita"), cfg, rng),
            pos,
        }
    }

    /// ITA(align(ISA(τ))) + τ for every frame.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &[Var],
        alignment: &Alignment,
        causal: bool,
    ) -> Result<Vec<Var>> {
        let spatial: Vec<Var> = frames
            .iter()
            .map(|&f| isa(g, store, &self.isa, &self.pos, f))
            .collect::<Result<_>>()?;
        let temporal = ita(g, store, &self.ita, &spatial, alignment, causal)?;
        frames
            .iter()
            .zip(temporal)
            .map(|(&x, y)| g.add(y, x))
            .collect()
    }
}

/// Parameters of one multi-scale layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleLayer {
    pub prefix: String,
    pub scales: Vec<usize>,
    pub cisa: BlockParams,
    pub ita: Vec<BlockParams>,
}

impl ScaleLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &IvtConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let dc = cfg.d_common();
        let mut ita = Vec::with_capacity(cfg.scales.len());
        for &s in &cfg.scales {
            let d = cfg.token_dim(s);
            store.init_zeros(format!("{prefix}.pos.s{s}"), &[cfg.tokens(s), d]);
            init_linear(store, &format!("{prefix}.proj.s{s}"), d, dc, rng);
            init_linear(store, &format!("{prefix}.back.s{s}"), dc, d, rng);
            ita.push(BlockParams::init(
                store,
                format!("{prefix}.ita.s{s}"),
                AttentionConfig::new(d, cfg.heads)?,
                rng,
            ));
        }
        let cisa = BlockParams::init(store, format!("{prefix}.cisa"), AttentionConfig::new(dc, cfg.heads)?, rng);
        Ok(ScaleLayer {
            prefix: prefix.to_string(),
            scales: cfg.scales.clone(),
            cisa,
            ita,
        })
    }

    /// Cross-scale spatial attention for one frame: project every scale's
    /// tokens (plus positions) to the common width, attend over the union,
    /// split per scale and back-project.
    pub fn cisa(&self, g: &mut Graph, store: &ParamStore, per_scale: &[Var]) -> Result<Vec<Var>> {
        if per_scale.len() != self.scales.len() {
            return Err(IvtError::config(format!(
                "{} token maps for {} scales",
                per_scale.len(),
                self.scales.len()
            )));
        }
        let mut projected = Vec::with_capacity(per_scale.len());
        let mut counts = Vec::with_capacity(per_scale.len());
        for (&s, &x) in self.scales.iter().zip(per_scale) {
            let pos = g.param(store, &format!("{}.pos.s{s}", self.prefix))?;
            if g.shape(pos) != g.shape(x) {
                return Err(IvtError::config(format!(
                    "scale {s} token map {:?} does not match {:?}",
                    g.shape(x),
                    g.shape(pos)
                )));
            }
            let x = g.add(x, pos)?;
            counts.push(g.shape(x)[0]);
            projected.push(linear(g, store, &format!("{}.proj.s{s}", self.prefix), x)?);
        }
        let union = g.concat(&projected, 0)?;
        let mixed = self.cisa.self_block(g, store, union)?;
        let mut out = Vec::with_capacity(per_scale.len());
        let mut start = 0;
        for (&s, &n) in self.scales.iter().zip(&counts) {
            let part = g.slice(mixed, 0, start, n)?;
            out.push(linear(g, store, &format!("{}.back.s{s}", self.prefix), part)?);
            start += n;
        }
        Ok(out)
    }

    /// Per-scale temporal attention, merged onto the finest grid by summing
    /// the re-tiled token maps frame by frame. `per_scale[k][t]` is scale k,
    /// frame t.
    pub fn mita(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &IvtConfig,
        per_scale: &[Vec<Var>],
        alignments: &[Alignment],
    ) -> Result<Vec<Var>> {
        if per_scale.len() != self.scales.len() || alignments.len() != self.scales.len() {
            return Err(IvtError::config("per-scale sequences do not match the scale set"));
        }
        let mut temporal = Vec::with_capacity(per_scale.len());
        for ((block, seq), al) in self.ita.iter().zip(per_scale).zip(alignments) {
            temporal.push(ita(g, store, block, seq, al, cfg.causal)?);
        }
        let frames = temporal[0].len();
        (0..frames)
            .map(|t| {
                let maps: Vec<Var> = temporal.iter().map(|seq| seq[t]).collect();
                merge_scales(g, cfg, &self.scales, &maps)
            })
            .collect()
    }

    /// MITA(CISA(per-scale tokens)) + residual at the finest grid.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &IvtConfig,
        per_scale: &[Vec<Var>],
        residual: &[Var],
        alignments: &[Alignment],
    ) -> Result<Vec<Var>> {
        let frames = residual.len();
        let mut spatial = vec![Vec::with_capacity(frames); self.scales.len()];
        for t in 0..frames {
            let maps: Vec<Var> = per_scale.iter().map(|seq| seq[t]).collect();
            for (k, y) in self.cisa(g, store, &maps)?.into_iter().enumerate() {
                spatial[k].push(y);
            }
        }
        let merged = self.mita(g, store, cfg, &spatial, alignments)?;
        residual
            .iter()
            .zip(merged)
            .map(|(&x, y)| g.add(y, x))
            .collect()
    }
}

/// Sums token maps of several scales after re-tiling each to the finest grid.
pub fn merge_scales(g: &mut Graph, cfg: &IvtConfig, scales: &[usize], maps: &[Var]) -> Result<Var> {
    let finest = cfg.finest();
    let mut acc: Option<Var> = None;
    for (&s, &m) in scales.iter().zip(maps) {
        let r = if s == finest {
            m
        } else {
            retile_tokens(g, m, cfg.map_channels(), cfg.height, cfg.width, s, finest)?
        };
        acc = Some(match acc {
            None => r,
            Some(a) => g.add(a, r)?,
        });
    }
    acc.ok_or_else(|| IvtError::config("no scales to merge"))
}

/// Multiply-accumulate counts of one forward pass, by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageMacs {
    pub tokenize: u64,
    pub spatial: u64,
    pub temporal: u64,
}

/// Tokenizers for every scale plus the stacked attention layers.
#[derive(Clone, Debug, PartialEq)]
pub struct IvtModel {
    pub cfg: IvtConfig,
    pub igt: Vec<IgtParams>,
    pub single: Vec<IvtLayer>,
    pub multi: Vec<ScaleLayer>,
}

impl IvtModel {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: IvtConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let igt = cfg
            .scales
            .iter()
            .map(|&s| IgtParams::init(store, &format!("igt.s{s}"), s, cfg.channels, cfg.joints, cfg.igt_heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let (mut single, mut multi) = (Vec::new(), Vec::new());
        for l in 0..cfg.layers {
            let prefix = format!("ivt.l{l}");
            if cfg.scales.len() == 1 {
                let s = cfg.scales[0];
                let acfg = AttentionConfig::new(cfg.token_dim(s), cfg.heads)?;
                single.push(IvtLayer::init(store, &prefix, cfg.tokens(s), acfg, rng));
            } else {
                multi.push(ScaleLayer::init(store, &prefix, &cfg, rng)?);
            }
        }
        Ok(IvtModel { cfg, igt, single, multi })
    }

    /// One alignment per scale, in scale order.
    pub fn alignments(&self, flows: &[Tensor], frames: usize) -> Result<Vec<Alignment>> {
        self.cfg
            .scales
            .iter()
            .map(|&s| Alignment::from_flows(flows, frames, self.cfg.height, self.cfg.width, s))
            .collect()
    }

    fn finest_index(&self) -> usize {
        let f = self.cfg.finest();
        self.cfg.scales.iter().position(|&s| s == f).expect("finest is a scale")
    }

    /// Final finest-scale token maps per frame. `features[t]` is `C×H×W`;
    /// `gather_offsets[t]` is the `2J×H×W` map steering the tokenizer.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &[Var],
        gather_offsets: &[Tensor],
        alignments: &[Alignment],
    ) -> Result<(Vec<Var>, StageMacs)> {
        let cfg = &self.cfg;
        if features.is_empty() || features.len() != gather_offsets.len() {
            return Err(IvtError::contract(format!(
                "{} feature maps with {} offset maps",
                features.len(),
                gather_offsets.len()
            )));
        }
        if alignments.len() != cfg.scales.len() {
            return Err(IvtError::contract("one alignment per scale required"));
        }
        let mut macs = StageMacs::default();
        let m0 = g.macs();
        let mut tokens: Vec<Vec<Var>> = Vec::with_capacity(self.igt.len());
        for p in &self.igt {
            let seq = features
                .iter()
                .zip(gather_offsets)
                .map(|(&f, off)| p.frame(g, store, f, off))
                .collect::<Result<Vec<_>>>()?;
            tokens.push(seq);
        }
        macs.tokenize = g.macs() - m0;
        let fi = self.finest_index();
        let mut current = tokens[fi].clone();
        for l in 0..cfg.layers {
            if let Some(layer) = self.single.get(l) {
                let m = g.macs();
                let spatial: Vec<Var> = current
                    .iter()
                    .map(|&f| isa(g, store, &layer.isa, &layer.pos, f))
                    .collect::<Result<_>>()?;
                let m1 = g.macs();
                let temporal = ita(g, store, &layer.ita, &spatial, &alignments[0], cfg.causal)?;
                macs.spatial += m1 - m;
                macs.temporal += g.macs() - m1;
                current = current
                    .iter()
                    .zip(temporal)
                    .map(|(&x, y)| g.add(y, x))
                    .collect::<Result<_>>()?;
            } else {
                let layer = &self.multi[l];
                let per_scale: Vec<Vec<Var>> = if l == 0 {
                    tokens.clone()
                } else {
                    let finest = cfg.finest();
                    cfg.scales
                        .iter()
                        .map(|&s| {
                            current
                                .iter()
                                .map(|&x| {
                                    if s == finest {
                                        Ok(x)
                                    } else {
                                        retile_tokens(g, x, cfg.map_channels(), cfg.height, cfg.width, finest, s)
                                    }
                                })
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<_>>()?
                };
                let m = g.macs();
                let mut spatial = vec![Vec::new(); cfg.scales.len()];
                for t in 0..current.len() {
                    let maps: Vec<Var> = per_scale.iter().map(|seq| seq[t]).collect();
                    for (k, y) in layer.cisa(g, store, &maps)?.into_iter().enumerate() {
                        spatial[k].push(y);
                    }
                }
                let m1 = g.macs();
                let merged = layer.mita(g, store, cfg, &spatial, alignments)?;
                macs.spatial += m1 - m;
                macs.temporal += g.macs() - m1;
                current = current
                    .iter()
                    .zip(merged)
                    .map(|(&x, y)| g.add(y, x))
                    .collect::<Result<_>>()?;
            }
        }
        Ok((current, macs))
    }
}
