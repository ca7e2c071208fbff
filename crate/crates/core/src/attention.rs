//! Self-attention over `C×H×W` feature maps: full 2D attention (optionally
//! with relative positions), axial attention along one axis, and the gated
//! axial variant.
//!
//! All variants share one fused kernel. For a query at `(i, j)` and a key at
//! position `s`, head by head:
//!
//! ```text
//! logit_s = q·k_s + g_q·(q·r^q_s) + g_k·(k_s·r^k_s)
//! y       = Σ_s softmax(logit)_s · (v_s + g_v·r^v_s)
//! ```
//!
//! `r^*_s` is looked up by signed offset `key - query` along the attended
//! axis (slot `offset + L - 1` of a `2L-1` table). Full 2D attention sums a
//! height-offset and a width-offset lookup. Ungated layers use unit gates
//! that never enter the graph. There is no `1/√d` logit scaling.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_in_place, CustomOp, Graph, Var};
use crate::bench::FlopCounter;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Initial value of every gate.
pub const GATE_INIT: f64 = 1.0;
/// Relative-position tables start uniform in `[-R_INIT, R_INIT]`.
pub const R_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Height,
    Width,
}

impl Axis {
    fn extent(self, h: usize, w: usize) -> usize {
        match self {
            Axis::Height => h,
            Axis::Width => w,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Axis::Height => "height",
            Axis::Width => "width",
        }
    }
}

/// Keys visible to each query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KeySet {
    /// Same column: `(h, j)` for all `h`.
    Column,
    /// Same row: `(i, w)` for all `w`.
    Row,
    /// Every position.
    All,
}

#[derive(Debug, Clone)]
struct KernelGeom {
    c: usize,
    h: usize,
    w: usize,
    heads: usize,
    d_head: usize,
    keys: KeySet,
    /// Axes of the offset tables summed per component (0, 1 or 2 entries).
    tables: Vec<Axis>,
    gated: bool,
}

impl KernelGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn key_positions(&self, p: usize, out: &mut Vec<usize>) {
        out.clear();
        let (i, j) = (p / self.w, p % self.w);
        match self.keys {
            KeySet::Column => out.extend((0..self.h).map(|h| h * self.w + j)),
            KeySet::Row => out.extend((0..self.w).map(|w| i * self.w + w)),
            KeySet::All => out.extend(0..self.hw()),
        }
    }

    fn table_len(&self, axis: Axis) -> usize {
        2 * axis.extent(self.h, self.w) - 1
    }

    /// Slot of the `key - query` offset along `axis`.
    fn slot(&self, axis: Axis, query: usize, key: usize) -> usize {
        let (qi, qj) = (query / self.w, query % self.w);
        let (ki, kj) = (key / self.w, key % self.w);
        match axis {
            Axis::Height => ki + self.h - 1 - qi,
            Axis::Width => kj + self.w - 1 - qj,
        }
    }

    fn n_tables(&self) -> usize {
        self.tables.len()
    }

    /// Input layout: q, k, v, then `n_tables` tables for each of r_q, r_k,
    /// r_v, then three gates if gated.
    fn table_input(&self, component: usize, t: usize) -> usize {
        3 + component * self.n_tables() + t
    }

    fn gate_input(&self, component: usize) -> usize {
        3 + 3 * self.n_tables() + component
    }

    fn gates(&self, inputs: &[&Tensor]) -> [f64; 3] {
        if self.gated {
            [0, 1, 2].map(|c| inputs[self.gate_input(c)].item())
        } else {
            [1.0; 3]
        }
    }

    /// Sum of the table rows for `component` at (query, key) into `out`.
    fn lookup(&self, inputs: &[&Tensor], component: usize, head: usize, query: usize, key: usize, out: &mut [f64]) {
        out.fill(0.0);
        for (t, &axis) in self.tables.iter().enumerate() {
            let table = inputs[self.table_input(component, t)].data();
            let row = (head * self.table_len(axis) + self.slot(axis, query, key)) * self.d_head;
            for (o, r) in out.iter_mut().zip(&table[row..row + self.d_head]) {
                *o += r;
            }
        }
    }

    fn scatter(&self, grads: &mut [Vec<f64>], component: usize, head: usize, query: usize, key: usize, scale: f64, src: &[f64]) {
        for (t, &axis) in self.tables.iter().enumerate() {
            let row = (head * self.table_len(axis) + self.slot(axis, query, key)) * self.d_head;
            let g = &mut grads[component * self.n_tables() + t];
            for (o, s) in g[row..row + self.d_head].iter_mut().zip(src) {
                *o += scale * s;
            }
        }
    }
}

/// `[C, HW]` channel-major to `[heads, HW, d_head]` position-major.
fn to_position_major(x: &[f64], heads: usize, d_head: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for hd in 0..heads {
        for e in 0..d_head {
            let src = &x[(hd * d_head + e) * hw..(hd * d_head + e + 1) * hw];
            for (p, v) in src.iter().enumerate() {
                out[(hd * hw + p) * d_head + e] = *v;
            }
        }
    }
    out
}

fn to_channel_major(x: &[f64], heads: usize, d_head: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for hd in 0..heads {
        for p in 0..hw {
            for e in 0..d_head {
                out[(hd * d_head + e) * hw + p] = x[(hd * hw + p) * d_head + e];
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct RelAttention {
    geom: KernelGeom,
}

impl RelAttention {
    fn forward(&self, inputs: &[&Tensor], counter: Option<&mut FlopCounter>) -> Vec<f64> {
        let gm = &self.geom;
        let (hw, dh) = (gm.hw(), gm.d_head);
        let q = to_position_major(inputs[0].data(), gm.heads, dh, hw);
        let k = to_position_major(inputs[1].data(), gm.heads, dh, hw);
        let v = to_position_major(inputs[2].data(), gm.heads, dh, hw);
        let [gq, gk, gv] = gm.gates(inputs);
        let positional = gm.n_tables() > 0;

        let mut y = vec![0.0; q.len()];
        let mut keys = Vec::new();
        let mut logits = Vec::new();
        let (mut rq, mut rk, mut rv) = (vec![0.0; dh], vec![0.0; dh], vec![0.0; dh]);
        let (mut score_macs, mut pos_macs) = (0u64, 0u64);

        for hd in 0..gm.heads {
            let base = hd * hw;
            for p in 0..hw {
                gm.key_positions(p, &mut keys);
                let qv = &q[(base + p) * dh..(base + p + 1) * dh];
                logits.clear();
                for &s in &keys {
                    let kv = &k[(base + s) * dh..(base + s + 1) * dh];
                    let mut l = dot(qv, kv);
                    score_macs += dh as u64;
                    if positional {
                        gm.lookup(inputs, 0, hd, p, s, &mut rq);
                        gm.lookup(inputs, 1, hd, p, s, &mut rk);
                        l += gq * dot(qv, &rq) + gk * dot(kv, &rk);
                        pos_macs += 2 * dh as u64;
                    }
                    logits.push(l);
                }
                softmax_in_place(&mut logits);
                let out = &mut y[(base + p) * dh..(base + p + 1) * dh];
                for (&s, &a) in keys.iter().zip(&logits) {
                    let vv = &v[(base + s) * dh..(base + s + 1) * dh];
                    if positional {
                        gm.lookup(inputs, 2, hd, p, s, &mut rv);
                        for e in 0..dh {
                            out[e] += a * (vv[e] + gv * rv[e]);
                        }
                        pos_macs += dh as u64;
                    } else {
                        for e in 0..dh {
                            out[e] += a * vv[e];
                        }
                    }
                    score_macs += dh as u64;
                }
            }
        }
        if let Some(c) = counter {
            c.attention += score_macs;
            c.positional += pos_macs;
        }
        to_channel_major(&y, gm.heads, dh, hw)
    }
}

impl CustomOp for RelAttention {
    fn name(&self) -> &'static str {
        "relative_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gm = &self.geom;
        let (hw, dh) = (gm.hw(), gm.d_head);
        let q = to_position_major(inputs[0].data(), gm.heads, dh, hw);
        let k = to_position_major(inputs[1].data(), gm.heads, dh, hw);
        let v = to_position_major(inputs[2].data(), gm.heads, dh, hw);
        let gy = to_position_major(grad_out, gm.heads, dh, hw);
        let [gq, gk, gv] = gm.gates(inputs);
        let positional = gm.n_tables() > 0;

        let (mut dq, mut dk, mut dv) = (vec![0.0; q.len()], vec![0.0; k.len()], vec![0.0; v.len()]);
        let mut dtables: Vec<Vec<f64>> = (0..3 * gm.n_tables())
            .map(|i| vec![0.0; inputs[3 + i].len()])
            .collect();
        let mut dgates = [0.0f64; 3];

        let mut keys = Vec::new();
        let mut attn = Vec::new();
        let mut dattn = Vec::new();
        let (mut rq, mut rk, mut rv) = (vec![0.0; dh], vec![0.0; dh], vec![0.0; dh]);
        let mut tmp = vec![0.0; dh];

        for hd in 0..gm.heads {
            let base = hd * hw;
            for p in 0..hw {
                gm.key_positions(p, &mut keys);
                let qv = &q[(base + p) * dh..(base + p + 1) * dh];
                let dy = &gy[(base + p) * dh..(base + p + 1) * dh];

                attn.clear();
                for &s in &keys {
                    let kv = &k[(base + s) * dh..(base + s + 1) * dh];
                    let mut l = dot(qv, kv);
                    if positional {
                        gm.lookup(inputs, 0, hd, p, s, &mut rq);
                        gm.lookup(inputs, 1, hd, p, s, &mut rk);
                        l += gq * dot(qv, &rq) + gk * dot(kv, &rk);
                    }
                    attn.push(l);
                }
                softmax_in_place(&mut attn);

                // value side
                dattn.clear();
                for (&s, &a) in keys.iter().zip(&attn) {
                    let vv = &v[(base + s) * dh..(base + s + 1) * dh];
                    let mut da = dot(dy, vv);
                    if positional {
                        gm.lookup(inputs, 2, hd, p, s, &mut rv);
                        let dy_rv = dot(dy, &rv);
                        da += gv * dy_rv;
                        dgates[2] += a * dy_rv;
                        gm.scatter(&mut dtables, 2, hd, p, s, gv * a, dy);
                    }
                    dattn.push(da);
                    for (d, g) in dv[(base + s) * dh..(base + s + 1) * dh].iter_mut().zip(dy) {
                        *d += a * g;
                    }
                }

                // softmax, then logit terms
                let mean: f64 = attn.iter().zip(&dattn).map(|(a, d)| a * d).sum();
                for ((&s, &a), &da) in keys.iter().zip(&attn).zip(&dattn) {
                    let dl = a * (da - mean);
                    let kv = &k[(base + s) * dh..(base + s + 1) * dh];
                    if positional {
                        gm.lookup(inputs, 0, hd, p, s, &mut rq);
                        gm.lookup(inputs, 1, hd, p, s, &mut rk);
                        dgates[0] += dl * dot(qv, &rq);
                        dgates[1] += dl * dot(kv, &rk);
                        gm.scatter(&mut dtables, 0, hd, p, s, dl * gq, qv);
                        gm.scatter(&mut dtables, 1, hd, p, s, dl * gk, kv);
                        for e in 0..dh {
                            tmp[e] = kv[e] + gq * rq[e];
                        }
                        for (d, t) in dq[(base + p) * dh..(base + p + 1) * dh].iter_mut().zip(&tmp) {
                            *d += dl * t;
                        }
                        for e in 0..dh {
                            tmp[e] = qv[e] + gk * rk[e];
                        }
                        for (d, t) in dk[(base + s) * dh..(base + s + 1) * dh].iter_mut().zip(&tmp) {
                            *d += dl * t;
                        }
                    } else {
                        for e in 0..dh {
                            dq[(base + p) * dh + e] += dl * kv[e];
                            dk[(base + s) * dh + e] += dl * qv[e];
                        }
                    }
                }
            }
        }

        let mut out: Vec<Option<Vec<f64>>> = Vec::with_capacity(inputs.len());
        out.push(Some(to_channel_major(&dq, gm.heads, dh, hw)));
        out.push(Some(to_channel_major(&dk, gm.heads, dh, hw)));
        out.push(Some(to_channel_major(&dv, gm.heads, dh, hw)));
        out.extend(dtables.into_iter().map(Some));
        if gm.gated {
            out.extend(dgates.iter().map(|&g| Some(vec![g])));
        }
        for (o, &n) in out.iter_mut().zip(needs) {
            if !n {
                *o = None;
            }
        }
        out
    }
}

/// Offset tables for one axis: r_q, r_k, r_v, each `heads × (2L-1) × d_head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelPosTable {
    pub axis: Axis,
    pub extent: usize,
    pub r_q: ParamId,
    pub r_k: ParamId,
    pub r_v: ParamId,
}

impl RelPosTable {
    fn new(store: &mut ParamStore, prefix: &str, axis: Axis, extent: usize, heads: usize, d_head: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dims = [heads, 2 * extent - 1, d_head];
        let tag = axis.label();
        Ok(RelPosTable {
            axis,
            extent,
            r_q: store.uniform(format!("{prefix}.r_q.{tag}"), &dims, R_INIT, rng)?,
            r_k: store.uniform(format!("{prefix}.r_k.{tag}"), &dims, R_INIT, rng)?,
            r_v: store.uniform(format!("{prefix}.r_v.{tag}"), &dims, R_INIT, rng)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.r_q, self.r_k, self.r_v]
    }
}

/// Scalar gates multiplying the three positional terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gates {
    pub g_q: ParamId,
    pub g_k: ParamId,
    pub g_v: ParamId,
}

impl Gates {
    pub fn ids(&self) -> [ParamId; 3] {
        [self.g_q, self.g_k, self.g_v]
    }
}

/// Pointwise q/k/v projections (no bias) and the output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projections {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl Projections {
    fn new(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dims = [d_model, d_model, 1, 1];
        let bound = 1.0 / (d_model as f64).sqrt();
        Ok(Projections {
            w_q: store.uniform(format!("{prefix}.w_q"), &dims, bound, rng)?,
            w_k: store.uniform(format!("{prefix}.w_k"), &dims, bound, rng)?,
            w_v: store.uniform(format!("{prefix}.w_v"), &dims, bound, rng)?,
            w_out: store.uniform(format!("{prefix}.w_out"), &dims, bound, rng)?,
            b_out: store.uniform(format!("{prefix}.b_out"), &[d_model], bound, rng)?,
        })
    }

    fn qkv(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<[Var; 3]> {
        Ok([
            g.conv2d(x, bound.var(self.w_q), None, 1)?,
            g.conv2d(x, bound.var(self.w_k), None, 1)?,
            g.conv2d(x, bound.var(self.w_v), None, 1)?,
        ])
    }

    fn output(&self, g: &mut Graph, bound: &Bound, y: Var) -> Result<Var> {
        g.conv2d(y, bound.var(self.w_out), Some(bound.var(self.b_out)), 1)
    }
}

fn check_heads(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by heads {heads}"
        )));
    }
    Ok(d_model / heads)
}

fn input_chw(g: &Graph, x: Var, d_model: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = g.shape(x).chw()?;
    if c != d_model {
        return Err(Error::dim("attention channels", g.shape(x).dims(), &[d_model]));
    }
    Ok((c, h, w))
}

#[allow(clippy::too_many_arguments)]
fn run_kernel(
    g: &mut Graph,
    bound: &Bound,
    qkv: [Var; 3],
    (c, h, w): (usize, usize, usize),
    heads: usize,
    keys: KeySet,
    tables: &[RelPosTable],
    gates: Option<&Gates>,
    counter: Option<&mut FlopCounter>,
) -> Result<Var> {
    let geom = KernelGeom {
        c,
        h,
        w,
        heads,
        d_head: c / heads,
        keys,
        tables: tables.iter().map(|t| t.axis).collect(),
        gated: gates.is_some(),
    };
    let mut inputs = qkv.to_vec();
    for component in 0..3 {
        for t in tables {
            let id = t.ids()[component];
            let var = bound.var(id);
            let expect = [heads, geom.table_len(t.axis), geom.d_head];
            if g.shape(var).dims() != expect {
                return Err(Error::dim("relative position table", g.shape(var).dims(), &expect));
            }
            inputs.push(var);
        }
    }
    if let Some(gates) = gates {
        inputs.extend(gates.ids().map(|id| bound.var(id)));
    }
    debug_assert_eq!(geom.c, g.shape(inputs[0]).dims()[0]);
    let op = RelAttention { geom };
    let values: Vec<&Tensor> = inputs.iter().map(|&v| g.value(v)).collect();
    let out = Tensor::new(vec![c, h, w], op.forward(&values, counter))?;
    g.custom(inputs, out, Box::new(op))
}

/// One axial attention layer (height or width), optionally gated.
#[derive(Debug, Clone, PartialEq)]
pub struct AxialAttentionLayer {
    pub axis: Axis,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub proj: Projections,
    pub relpos: RelPosTable,
    pub gates: Option<Gates>,
}

impl AxialAttentionLayer {
    /// Registers the layer's parameters under `prefix`. `extent` is the
    /// length of the attended axis.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        axis: Axis,
        d_model: usize,
        heads: usize,
        extent: usize,
        gated: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d_head = check_heads(d_model, heads)?;
        if extent == 0 {
            return Err(Error::Config("attended extent must be positive".into()));
        }
        let proj = Projections::new(store, prefix, d_model, rng)?;
        let relpos = RelPosTable::new(store, prefix, axis, extent, heads, d_head, rng)?;
        let gates = if gated {
            Some(Gates {
                g_q: store.add(format!("{prefix}.g_q"), Tensor::scalar(GATE_INIT))?,
                g_k: store.add(format!("{prefix}.g_k"), Tensor::scalar(GATE_INIT))?,
                g_v: store.add(format!("{prefix}.g_v"), Tensor::scalar(GATE_INIT))?,
            })
        } else {
            None
        };
        Ok(AxialAttentionLayer {
            axis,
            heads,
            d_model,
            d_head,
            proj,
            relpos,
            gates,
        })
    }

    pub fn gated(&self) -> bool {
        self.gates.is_some()
    }

    /// Gated or plain, according to how the layer was built.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        self.forward_counted(g, bound, x, None)
    }

    pub fn forward_counted(&self, g: &mut Graph, bound: &Bound, x: Var, counter: Option<&mut FlopCounter>) -> Result<Var> {
        self.apply(g, bound, x, self.gates.as_ref(), counter)
    }

    fn apply(&self, g: &mut Graph, bound: &Bound, x: Var, gates: Option<&Gates>, counter: Option<&mut FlopCounter>) -> Result<Var> {
        let chw = input_chw(g, x, self.d_model)?;
        let extent = self.axis.extent(chw.1, chw.2);
        if extent != self.relpos.extent {
            return Err(Error::Dimension {
                op: "axial attention table/axis",
                lhs: g.shape(x).dims().to_vec(),
                rhs: vec![2 * self.relpos.extent - 1],
            });
        }
        let mut counter = counter;
        if let Some(c) = counter.as_deref_mut() {
            c.projection += 4 * (chw.1 * chw.2 * self.d_model * self.d_model) as u64;
        }
        let qkv = self.proj.qkv(g, bound, x)?;
        let keys = match self.axis {
            Axis::Height => KeySet::Column,
            Axis::Width => KeySet::Row,
        };
        let y = run_kernel(g, bound, qkv, chw, self.heads, keys, &[self.relpos], gates, counter)?;
        self.proj.output(g, bound, y)
    }
}

/// Per-axis offset tables for 2D attention; lookups are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelPos2d {
    pub height: RelPosTable,
    pub width: RelPosTable,
}

/// Dense attention over all `H·W` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Full2DAttentionLayer {
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub proj: Projections,
    pub relpos2d: Option<RelPos2d>,
}

impl Full2DAttentionLayer {
    /// `extents` = `Some((H, W))` registers relative-position tables.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        extents: Option<(usize, usize)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d_head = check_heads(d_model, heads)?;
        let proj = Projections::new(store, prefix, d_model, rng)?;
        let relpos2d = match extents {
            Some((h, w)) => Some(RelPos2d {
                height: RelPosTable::new(store, prefix, Axis::Height, h, heads, d_head, rng)?,
                width: RelPosTable::new(store, prefix, Axis::Width, w, heads, d_head, rng)?,
            }),
            None => None,
        };
        Ok(Full2DAttentionLayer {
            heads,
            d_model,
            d_head,
            proj,
            relpos2d,
        })
    }

    /// With relative positions when the layer has tables.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        self.forward_counted(g, bound, x, None)
    }

    pub fn forward_counted(&self, g: &mut Graph, bound: &Bound, x: Var, counter: Option<&mut FlopCounter>) -> Result<Var> {
        let tables: Vec<RelPosTable> = self.relpos2d.iter().flat_map(|r| [r.height, r.width]).collect();
        self.apply(g, bound, x, &tables, counter)
    }

    fn apply(&self, g: &mut Graph, bound: &Bound, x: Var, tables: &[RelPosTable], counter: Option<&mut FlopCounter>) -> Result<Var> {
        let chw = input_chw(g, x, self.d_model)?;
        for t in tables {
            if t.axis.extent(chw.1, chw.2) != t.extent {
                return Err(Error::Dimension {
                    op: "2d relative position table",
                    lhs: g.shape(x).dims().to_vec(),
                    rhs: vec![2 * t.extent - 1],
                });
            }
        }
        let mut counter = counter;
        if let Some(c) = counter.as_deref_mut() {
            c.projection += 4 * (chw.1 * chw.2 * self.d_model * self.d_model) as u64;
        }
        let qkv = self.proj.qkv(g, bound, x)?;
        let y = run_kernel(g, bound, qkv, chw, self.heads, KeySet::All, tables, None, counter)?;
        self.proj.output(g, bound, y)
    }
}

/// Plain dense attention: softmax over all positions of `q·k`, no positional
/// terms even if the layer carries tables.
pub fn full_attention_2d(g: &mut Graph, bound: &Bound, x: Var, layer: &Full2DAttentionLayer) -> Result<Var> {
    layer.apply(g, bound, x, &[], None)
}

/// Dense attention with summed height- and width-offset terms.
pub fn full_attention_2d_relpos(g: &mut Graph, bound: &Bound, x: Var, layer: &Full2DAttentionLayer) -> Result<Var> {
    let rel = layer
        .relpos2d
        .ok_or_else(|| Error::Config("layer has no relative position tables".into()))?;
    layer.apply(g, bound, x, &[rel.height, rel.width], None)
}

/// Axial attention with relative positions and no gates. On a gated layer
/// the gate parameters are left off the graph.
pub fn axial_attention(g: &mut Graph, bound: &Bound, x: Var, layer: &AxialAttentionLayer) -> Result<Var> {
    layer.apply(g, bound, x, None, None)
}

/// Axial attention whose positional terms are scaled by the layer's gates.
pub fn gated_axial_attention(g: &mut Graph, bound: &Bound, x: Var, layer: &AxialAttentionLayer) -> Result<Var> {
    let gates = layer
        .gates
        .ok_or_else(|| Error::Config("gated_axial_attention needs a gated layer".into()))?;
    layer.apply(g, bound, x, Some(&gates), None)
}

/// Splits the channels of a `C×H×W` tensor into `heads` contiguous groups.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = x.shape().chw()?;
    let d_head = check_heads(c, heads)?;
    let chunk = d_head * h * w;
    x.data()
        .chunks(chunk)
        .map(|part| Tensor::new(vec![d_head, h, w], part.to_vec()))
        .collect()
}

/// Inverse of [`split_heads`].
pub fn merge_heads(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Config("no heads to merge".into()))?;
    let (d, h, w) = first.shape().chw()?;
    let mut data = Vec::with_capacity(parts.len() * first.len());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::dim("merge_heads", p.dims(), first.dims()));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![d * parts.len(), h, w], data)
}

/// A layer applied in sequence by [`receptive_field_probe`].
#[derive(Debug, Clone, Copy)]
pub enum AttentionBlock<'a> {
    Axial(&'a AxialAttentionLayer),
    Full(&'a Full2DAttentionLayer),
}

impl AttentionBlock<'_> {
    fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        match self {
            AttentionBlock::Axial(l) => l.forward(g, bound, x),
            AttentionBlock::Full(l) => l.forward(g, bound, x),
        }
    }
}

/// `Σ_{c_out, c_in} |∂y[c_out, sink] / ∂x[c_in, source]|` through the block
/// sequence, with coordinates given as `(row, column)`.
pub fn receptive_field_probe(
    store: &ParamStore,
    blocks: &[AttentionBlock<'_>],
    x: &Tensor,
    source: (usize, usize),
    sink: (usize, usize),
) -> Result<f64> {
    let (c, h, w) = x.shape().chw()?;
    for (r, col) in [source, sink] {
        if r >= h || col >= w {
            return Err(Error::OutOfRange(r, col, h, w));
        }
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let input = g.param(x.clone());
    let mut y = input;
    for b in blocks {
        y = b.forward(&mut g, &bound, y)?;
    }
    let (c_out, ..) = g.shape(y).chw()?;
    let mut total = 0.0;
    for co in 0..c_out {
        let pick = g.index(y, (co * h + sink.0) * w + sink.1)?;
        let grads = g.backward(pick)?;
        let gx = grads.tensor(input);
        total += (0..c).map(|ci| gx.at3(ci, source.0, source.1).abs()).sum::<f64>();
    }
    Ok(total)
}
