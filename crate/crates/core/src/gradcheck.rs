//! Central-difference gradient checking against the tape.
//!
//! The scalar under test is always `sum(output)`. Relative error per
//! coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Coordinates sampled per tensor when it is larger than this; `None`
    /// checks every coordinate. Relative-position tables and gates are
    /// always checked exhaustively.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: DEFAULT_EPS,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn always_exhaustive(name: &str) -> bool {
    name.contains(".r_") || name.rsplit('.').next().is_some_and(|last| last.starts_with("g_"))
}

enum Slot {
    Param(crate::params::ParamId),
    Input(usize),
}

/// Checks `forward` with respect to every unfrozen parameter of `store` and
/// every tensor in `inputs` (bound as tracked leaves, in order).
pub fn gradcheck<F>(store: &ParamStore, inputs: &[(String, Tensor)], forward: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[(String, Tensor)]| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let xs: Vec<Var> = inputs.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let y = forward(&mut g, &bound, &xs)?;
        Ok(g.value(y).data().to_vec())
    };

    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let xs: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let y = forward(&mut g, &bound, &xs)?;
    let loss = g.sum(y)?;
    let grads = g.backward(loss)?;

    let mut targets: Vec<(String, Slot, Tensor)> = Vec::new();
    for (id, p) in store.iter() {
        if !p.frozen {
            targets.push((p.name.clone(), Slot::Param(id), grads.tensor(bound.var(id))));
        }
    }
    for (i, (name, _)) in inputs.iter().enumerate() {
        targets.push((name.clone(), Slot::Input(i), grads.tensor(xs[i])));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut store = store.clone();
    let mut inputs = inputs.to_vec();

    for (name, slot, analytic) in targets {
        let n = analytic.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if n > m && !always_exhaustive(&name) => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let mut probe = |delta: f64| -> Result<Vec<f64>> {
                let cell = match slot {
                    Slot::Param(id) => &mut store.get_mut(id).data_mut()[idx],
                    Slot::Input(i) => &mut inputs[i].1.data_mut()[idx],
                };
                let orig = *cell;
                *cell = orig + delta;
                let out = eval(&store, &inputs);
                let cell = match slot {
                    Slot::Param(id) => &mut store.get_mut(id).data_mut()[idx],
                    Slot::Input(i) => &mut inputs[i].1.data_mut()[idx],
                };
                *cell = orig;
                out
            };
            // difference per output element before reducing, so large
            // eps-independent terms cancel exactly instead of in the sum
            let (plus, minus) = (probe(opts.eps)?, probe(-opts.eps)?);
            let numeric = plus.iter().zip(&minus).map(|(p, m)| p - m).sum::<f64>() / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single attention layers that [`check_layer`] knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Full2d,
    Relpos2d,
    Axial,
    Gated,
}

impl LayerKind {
    pub const ALL: [LayerKind; 4] = [LayerKind::Full2d, LayerKind::Relpos2d, LayerKind::Axial, LayerKind::Gated];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Full2d => "full2d",
            LayerKind::Relpos2d => "relpos2d",
            LayerKind::Axial => "axial",
            LayerKind::Gated => "gated",
        }
    }
}

/// Builds one seeded layer of `kind` on a random `[channels, h, w]` input
/// and checks it. Axial layers attend along the height axis; gated layers
/// get non-unit gates so every gate has a distinct gradient.
pub fn check_layer(kind: LayerKind, channels: usize, h: usize, w: usize, heads: usize, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    use crate::attention::{Axis, AxialAttentionLayer, Full2DAttentionLayer};
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::new();
    let x = Tensor::new(
        vec![channels, h, w],
        (0..channels * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let inputs = [("x".to_string(), x)];
    match kind {
        LayerKind::Full2d | LayerKind::Relpos2d => {
            let extents = (kind == LayerKind::Relpos2d).then_some((h, w));
            let layer = Full2DAttentionLayer::new(&mut store, "attn", channels, heads, extents, &mut rng)?;
            gradcheck(&store, &inputs, |g, b, xs| layer.forward(g, b, xs[0]), opts)
        }
        LayerKind::Axial | LayerKind::Gated => {
            let gated = kind == LayerKind::Gated;
            let layer = AxialAttentionLayer::new(&mut store, "attn", Axis::Height, channels, heads, h, gated, &mut rng)?;
            if let Some(gates) = &layer.gates {
                for (id, v) in gates.ids().into_iter().zip([0.6, 1.3, 0.8]) {
                    store.get_mut(id).data_mut()[0] = v;
                }
            }
            gradcheck(&store, &inputs, |g, b, xs| layer.forward(g, b, xs[0]), opts)
        }
    }
}
