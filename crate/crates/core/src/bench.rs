//! Multiply-add accounting for dense vs axial attention.
//!
//! The attention kernel increments [`FlopCounter::attention`] once per
//! `d_head`-long dot product in the score stage (`q·k`) and once per
//! weighted value accumulation. Counts depend only on shapes. Timings are
//! collected alongside but never asserted on.
//!
//! Per query, dense attention visits `H·W` keys and an axial pair visits
//! `H + W`; totals over all queries are `(H·W)²` vs `H·W·(H+W)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AxialAttentionLayer, Axis, Full2DAttentionLayer};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    /// Score and aggregation multiply-adds.
    pub attention: u64,
    /// Extra multiply-adds from relative-position terms.
    pub positional: u64,
    /// Pointwise q/k/v/out projections.
    pub projection: u64,
}

impl FlopCounter {
    pub fn multiply_adds(&self) -> u64 {
        self.attention
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchVariant {
    /// One dense attention layer without positional terms.
    Full2d,
    /// A height layer followed by a width layer.
    Axial,
}

impl BenchVariant {
    pub const NAMES: &'static [&'static str] = &["full2d", "axial"];

    pub fn name(self) -> &'static str {
        match self {
            BenchVariant::Full2d => "full2d",
            BenchVariant::Axial => "axial",
        }
    }
}

impl fmt::Display for BenchVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full2d" => Ok(BenchVariant::Full2d),
            "axial" => Ok(BenchVariant::Axial),
            _ => Err(Error::UnknownVariant {
                given: s.to_string(),
                valid: Self::NAMES.join(", "),
            }),
        }
    }
}

/// Closed-form counts for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopEstimate {
    pub attention: u64,
    pub projection: u64,
}

pub fn count_flops(variant: BenchVariant, h: usize, w: usize, d_model: usize, _heads: usize) -> FlopEstimate {
    let (h, w, d) = (h as u64, w as u64, d_model as u64);
    let hw = h * w;
    let per_layer_projection = 4 * hw * d * d;
    match variant {
        BenchVariant::Full2d => FlopEstimate {
            attention: 2 * hw * hw * d,
            projection: per_layer_projection,
        },
        BenchVariant::Axial => FlopEstimate {
            attention: 2 * hw * (h + w) * d,
            projection: 2 * per_layer_projection,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub variant: BenchVariant,
    pub h: usize,
    pub w: usize,
    pub d_model: usize,
    pub heads: usize,
    pub flops: u64,
    pub wall_ns: u128,
}

pub const CSV_HEADER: &str = "variant,H,W,d_model,heads,flops,wall_ns_median";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.variant, self.h, self.w, self.d_model, self.heads, self.flops, self.wall_ns
        )
    }
}

/// Runs one instrumented forward pass and returns the counter.
pub fn measure(variant: BenchVariant, h: usize, w: usize, d_model: usize, heads: usize, seed: u64) -> Result<(FlopCounter, u128)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut x = Tensor::zeros(&[d_model, h, w])?;
    x.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));

    let mut counter = FlopCounter::default();
    let mut g = Graph::new();
    let start;
    match variant {
        BenchVariant::Full2d => {
            let layer = Full2DAttentionLayer::new(&mut store, "full", d_model, heads, None, &mut rng)?;
            let bound = store.bind(&mut g);
            let input = g.constant(x);
            start = Instant::now();
            layer.forward_counted(&mut g, &bound, input, Some(&mut counter))?;
        }
        BenchVariant::Axial => {
            let hl = AxialAttentionLayer::new(&mut store, "h", Axis::Height, d_model, heads, h, false, &mut rng)?;
            let wl = AxialAttentionLayer::new(&mut store, "w", Axis::Width, d_model, heads, w, false, &mut rng)?;
            let bound = store.bind(&mut g);
            let input = g.constant(x);
            start = Instant::now();
            let mid = hl.forward_counted(&mut g, &bound, input, Some(&mut counter))?;
            wl.forward_counted(&mut g, &bound, mid, Some(&mut counter))?;
        }
    }
    Ok((counter, start.elapsed().as_nanos()))
}

/// Square sizes `N×N` for each variant; `trials` timed runs each.
pub fn run_sweep(sizes: &[usize], variants: &[BenchVariant], d_model: usize, heads: usize, trials: usize) -> Result<Vec<BenchRecord>> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n < 4) {
        return Err(Error::Config(format!("bench size {n} is below 4")));
    }
    let mut records = Vec::new();
    for &n in sizes {
        for &variant in variants {
            let mut times = Vec::with_capacity(trials);
            let mut flops = None;
            for t in 0..trials {
                let (counter, ns) = measure(variant, n, n, d_model, heads, t as u64)?;
                match flops {
                    None => flops = Some(counter.multiply_adds()),
                    Some(f) => debug_assert_eq!(f, counter.multiply_adds()),
                }
                times.push(ns);
            }
            times.sort_unstable();
            records.push(BenchRecord {
                variant,
                h: n,
                w: n,
                d_model,
                heads,
                flops: flops.expect("trials >= 1"),
                wall_ns: times[times.len() / 2],
            });
        }
    }
    Ok(records)
}

pub fn write_csv(records: &[BenchRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(count_flops(BenchVariant::Full2d, 8, 8, 1, 1).attention, 8192);
        assert_eq!(count_flops(BenchVariant::Axial, 8, 8, 1, 1).attention, 2048);
        let ratio = |v| count_flops(v, 16, 16, 1, 1).attention / count_flops(v, 8, 8, 1, 1).attention;
        assert_eq!(ratio(BenchVariant::Full2d), 16);
        assert_eq!(ratio(BenchVariant::Axial), 8);
        assert_eq!(
            count_flops(BenchVariant::Full2d, 2, 2, 3, 1).attention,
            count_flops(BenchVariant::Axial, 2, 2, 3, 1).attention
        );
    }

    #[test]
    fn unknown_variant_lists_valid_names() {
        let err = "bogus".parse::<BenchVariant>().unwrap_err().to_string();
        assert!(err.contains("full2d, axial"), "{err}");
    }

    #[test]
    fn measured_matches_closed_form_small() {
        for v in [BenchVariant::Full2d, BenchVariant::Axial] {
            let (c, _) = measure(v, 5, 3, 4, 2, 0).unwrap();
            assert_eq!(c.attention, count_flops(v, 5, 3, 4, 2).attention);
            assert_eq!(c.projection, count_flops(v, 5, 3, 4, 2).projection);
        }
    }

    #[test]
    fn sweep_rejects_tiny_sizes() {
        assert!(run_sweep(&[2], &[BenchVariant::Axial], 2, 1, 1).is_err());
        assert!(run_sweep(&[4], &[BenchVariant::Axial], 2, 1, 0).is_err());
    }
}
