#![allow(dead_code)]

use axialseg::attention::Axis;
use axialseg::params::ParamStore;
use axialseg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// Which keys a query sees.
#[derive(Clone, Copy, Debug)]
pub enum Keys {
    Column,
    Row,
    All,
}

/// Plain-loop evaluation of one attention layer, straight from the
/// per-position formulas. Shares nothing with the library kernel.
pub struct Oracle {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wout: Tensor,
    pub bout: Tensor,
    pub heads: usize,
    /// (axis, [r_q, r_k, r_v]) tables, each heads × (2L-1) × d_head.
    pub tables: Vec<(Axis, [Tensor; 3])>,
    pub gates: [f64; 3],
    pub keys: Keys,
}

impl Oracle {
    pub fn from_store(store: &ParamStore, prefix: &str, heads: usize, keys: Keys, tables: &[Axis], gated: bool) -> Self {
        let get = |n: &str| store.get(store.find(&format!("{prefix}.{n}")).unwrap_or_else(|| panic!("{prefix}.{n}"))).clone();
        let tables = tables
            .iter()
            .map(|&a| {
                let tag = match a {
                    Axis::Height => "height",
                    Axis::Width => "width",
                };
                (a, [get(&format!("r_q.{tag}")), get(&format!("r_k.{tag}")), get(&format!("r_v.{tag}"))])
            })
            .collect();
        let gates = if gated {
            [get("g_q").item(), get("g_k").item(), get("g_v").item()]
        } else {
            [1.0; 3]
        };
        Oracle {
            wq: get("w_q"),
            wk: get("w_k"),
            wv: get("w_v"),
            wout: get("w_out"),
            bout: get("b_out"),
            heads,
            tables,
            gates,
            keys,
        }
    }

    fn project(w: &Tensor, x: &Tensor, c: usize, y: usize, xx: usize) -> Vec<f64> {
        (0..c)
            .map(|o| (0..c).map(|i| w.data()[o * c + i] * x.at3(i, y, xx)).sum())
            .collect()
    }

    fn rel(&self, comp: usize, head: usize, dh: usize, (h, w): (usize, usize), (qi, qj): (usize, usize), (ki, kj): (usize, usize)) -> Vec<f64> {
        let mut r = vec![0.0; dh];
        for (axis, tabs) in &self.tables {
            let (len, off) = match axis {
                Axis::Height => (2 * h - 1, (ki as isize - qi as isize) + h as isize - 1),
                Axis::Width => (2 * w - 1, (kj as isize - qj as isize) + w as isize - 1),
            };
            let t = &tabs[comp];
            for e in 0..dh {
                r[e] += t.data()[(head * len + off as usize) * dh + e];
            }
        }
        r
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        let d = x.dims();
        let (c, h, w) = (d[0], d[1], d[2]);
        let dh = c / self.heads;
        let q: Vec<Vec<Vec<f64>>> = (0..h).map(|i| (0..w).map(|j| Self::project(&self.wq, x, c, i, j)).collect()).collect();
        let k: Vec<Vec<Vec<f64>>> = (0..h).map(|i| (0..w).map(|j| Self::project(&self.wk, x, c, i, j)).collect()).collect();
        let v: Vec<Vec<Vec<f64>>> = (0..h).map(|i| (0..w).map(|j| Self::project(&self.wv, x, c, i, j)).collect()).collect();
        let [gq, gk, gv] = self.gates;

        let mut out = vec![0.0; c * h * w];
        for i in 0..h {
            for j in 0..w {
                let keys: Vec<(usize, usize)> = match self.keys {
                    Keys::Column => (0..h).map(|a| (a, j)).collect(),
                    Keys::Row => (0..w).map(|b| (i, b)).collect(),
                    Keys::All => (0..h).flat_map(|a| (0..w).map(move |b| (a, b))).collect(),
                };
                let mut agg = vec![0.0; c];
                for head in 0..self.heads {
                    let sl = head * dh..(head + 1) * dh;
                    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                    let qv = &q[i][j][sl.clone()];
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|&(a, b)| {
                            let kv = &k[a][b][sl.clone()];
                            let rq = self.rel(0, head, dh, (h, w), (i, j), (a, b));
                            let rk = self.rel(1, head, dh, (h, w), (i, j), (a, b));
                            dot(qv, kv) + gq * dot(qv, &rq) + gk * dot(kv, &rk)
                        })
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                    for (n, &(a, b)) in keys.iter().enumerate() {
                        let wgt = (logits[n] - m).exp() / z;
                        let rv = self.rel(2, head, dh, (h, w), (i, j), (a, b));
                        for e in 0..dh {
                            agg[head * dh + e] += wgt * (v[a][b][head * dh + e] + gv * rv[e]);
                        }
                    }
                }
                for o in 0..c {
                    let val: f64 = self.bout.data()[o] + (0..c).map(|i2| self.wout.data()[o * c + i2] * agg[i2]).sum::<f64>();
                    out[(o * h + i) * w + j] = val;
                }
            }
        }
        Tensor::new(vec![c, h, w], out).unwrap()
    }
}

/// Overwrites a parameter by name.
pub fn set_param(store: &mut ParamStore, name: &str, data: &[f64]) {
    let id = store.find(name).unwrap_or_else(|| panic!("no param {name}"));
    store.get_mut(id).data_mut().copy_from_slice(data);
}

pub fn zero_param(store: &mut ParamStore, name: &str) {
    let id = store.find(name).unwrap_or_else(|| panic!("no param {name}"));
    store.get_mut(id).data_mut().fill(0.0);
}
