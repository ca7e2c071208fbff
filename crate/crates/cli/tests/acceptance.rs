//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use axialseg::attention::{
    axial_attention, full_attention_2d, full_attention_2d_relpos, gated_axial_attention, receptive_field_probe, AttentionBlock, Axis,
    AxialAttentionLayer, Full2DAttentionLayer,
};
use axialseg::autodiff::{Graph, Var};
use axialseg::metrics::{confusion, report};
use axialseg::params::{Bound, ParamStore};
use axialseg::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_axialseg");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split_whitespace().find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

fn rand_tensor(r: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn run(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Graph, &Bound, Var) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = f(&mut g, &b, xv).unwrap();
    g.value(y).clone()
}

fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(store.find(name).unwrap_or_else(|| panic!("{name}"))).data().to_vec()
}

fn set(store: &mut ParamStore, name: &str, data: &[f64]) {
    let id = store.find(name).unwrap_or_else(|| panic!("{name}"));
    store.get_mut(id).data_mut().copy_from_slice(data);
}

fn zero_tables(store: &mut ParamStore, prefix: &str, axes: &[&str]) {
    for axis in axes {
        for t in ["r_q", "r_k", "r_v"] {
            let name = format!("{prefix}.{t}.{axis}");
            let n = param(store, &name).len();
            set(store, &name, &vec![0.0; n]);
        }
    }
}

/// Multi-head softmax attention with no positional terms, written as plain
/// loops. `keys(i, j)` lists the positions query `(i, j)` attends to.
fn plain_attention(store: &ParamStore, prefix: &str, heads: usize, x: &Tensor, keys: impl Fn(usize, usize) -> Vec<(usize, usize)>) -> Tensor {
    let d = x.dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    let dh = c / heads;
    let [wq, wk, wv, wo, bo] = ["w_q", "w_k", "w_v", "w_out", "b_out"].map(|n| param(store, &format!("{prefix}.{n}")));
    let proj = |m: &[f64], i: usize, j: usize| -> Vec<f64> { (0..c).map(|o| (0..c).map(|k| m[o * c + k] * x.at3(k, i, j)).sum()).collect() };
    let mut out = vec![0.0; c * h * w];
    for i in 0..h {
        for j in 0..w {
            let q = proj(&wq, i, j);
            let ks = keys(i, j);
            let mut agg = vec![0.0; c];
            for hd in 0..heads {
                let r = hd * dh..(hd + 1) * dh;
                let logits: Vec<f64> = ks
                    .iter()
                    .map(|&(a, b)| {
                        let k = proj(&wk, a, b);
                        r.clone().map(|e| q[e] * k[e]).sum()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (n, &(a, b)) in ks.iter().enumerate() {
                    let v = proj(&wv, a, b);
                    for e in r.clone() {
                        agg[e] += (logits[n] - m).exp() / z * v[e];
                    }
                }
            }
            for o in 0..c {
                out[(o * h + i) * w + j] = bo[o] + (0..c).map(|k| wo[o * c + k] * agg[k]).sum::<f64>();
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

fn gradcheck_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut notes = Vec::new();
    for variant in ["full2d", "relpos2d", "axial", "gated"] {
        for seed in ["0", "1", "2"] {
            let o = cli(&["gradcheck", "--variant", variant, "--seed", seed]);
            let text = stdout(&o);
            let err: f64 = text.lines().find_map(|l| field(l, "max_rel_error")).and_then(|v| v.parse().ok()).unwrap_or(f64::INFINITY);
            worst = worst.max(err);
            if !o.status.success() {
                notes.push(format!("{variant}/{seed} exit {:?}", o.status.code()));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = notes.is_empty() && worst < 1e-4 && elapsed < Duration::from_secs(60);
    outcome(pass, format!("4 variants x 3 seeds on 4x4x6, worst rel err {worst:.2e}, {:.1}s {}", elapsed.as_secs_f64(), notes.join(", ")))
}

fn reduction_identities() -> Outcome {
    let mut gate_diff = 0.0f64;
    let mut zero_r_diff = 0.0f64;
    for inst in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(1000 + inst);
        let (h, w) = (r.random_range(2..=6), r.random_range(2..=6));
        let axis = if inst % 2 == 0 { Axis::Height } else { Axis::Width };
        let extent = if axis == Axis::Height { h } else { w };
        let x = rand_tensor(&mut r, &[4, h, w]);
        let layer_seed: u64 = r.random();

        // gated layer at G=1 vs an ungated layer drawn from the same stream
        let mut sg = ParamStore::new();
        let gated = AxialAttentionLayer::new(&mut sg, "a", axis, 4, 2, extent, true, &mut ChaCha8Rng::seed_from_u64(layer_seed)).unwrap();
        let mut sp = ParamStore::new();
        let plain = AxialAttentionLayer::new(&mut sp, "a", axis, 4, 2, extent, false, &mut ChaCha8Rng::seed_from_u64(layer_seed)).unwrap();
        let yg = run(&sg, &x, |g, b, x| gated_axial_attention(g, b, x, &gated));
        let yp = run(&sp, &x, |g, b, x| axial_attention(g, b, x, &plain));
        gate_diff = gate_diff.max(yg.max_abs_diff(&yp));

        // zero tables: 2D relpos vs plain 2D, axial and gated vs a plain loop
        let mut s = ParamStore::new();
        let full = Full2DAttentionLayer::new(&mut s, "f", 4, 2, Some((h, w)), &mut r).unwrap();
        zero_tables(&mut s, "f", &["height", "width"]);
        let a = run(&s, &x, |g, b, x| full_attention_2d_relpos(g, b, x, &full));
        let b = run(&s, &x, |g, b, x| full_attention_2d(g, b, x, &full));
        zero_r_diff = zero_r_diff.max(a.max_abs_diff(&b));

        let tag = if axis == Axis::Height { "height" } else { "width" };
        zero_tables(&mut sg, "a", &[tag]);
        for (n, v) in [("g_q", 0.3), ("g_k", 1.7), ("g_v", -0.4)] {
            set(&mut sg, &format!("a.{n}"), &[v]);
        }
        let keys = |i: usize, j: usize| -> Vec<(usize, usize)> {
            match axis {
                Axis::Height => (0..h).map(|a| (a, j)).collect(),
                Axis::Width => (0..w).map(|b| (i, b)).collect(),
            }
        };
        let oracle = plain_attention(&sg, "a", 2, &x, keys);
        let ya = run(&sg, &x, |g, b, x| axial_attention(g, b, x, &gated));
        let yg = run(&sg, &x, |g, b, x| gated_axial_attention(g, b, x, &gated));
        zero_r_diff = zero_r_diff.max(ya.max_abs_diff(&oracle)).max(yg.max_abs_diff(&oracle));
    }
    let pass = gate_diff < 1e-12 && zero_r_diff < 1e-12;
    outcome(pass, format!("20 instances each: gate=1 max diff {gate_diff:.1e}, R=0 max diff {zero_r_diff:.1e}"))
}

fn single_row_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let w = 2 + (inst as usize % 7);
        let mut r = ChaCha8Rng::seed_from_u64(2000 + inst);
        let mut s = ParamStore::new();
        let ax = AxialAttentionLayer::new(&mut s, "ax", Axis::Width, 4, 2, w, false, &mut r).unwrap();
        let full = Full2DAttentionLayer::new(&mut s, "f", 4, 2, Some((1, w)), &mut r).unwrap();
        for n in ["w_q", "w_k", "w_v", "w_out", "b_out", "r_q.width", "r_k.width", "r_v.width"] {
            let data = param(&s, &format!("ax.{n}"));
            set(&mut s, &format!("f.{n}"), &data);
        }
        zero_tables(&mut s, "f", &["height"]);
        let x = rand_tensor(&mut r, &[4, 1, w]);
        let a = run(&s, &x, |g, b, x| axial_attention(g, b, x, &ax));
        let b = run(&s, &x, |g, b, x| full_attention_2d_relpos(g, b, x, &full));
        worst = worst.max(a.max_abs_diff(&b));
    }
    outcome(worst < 1e-12, format!("20 instances, W in 2..=8, max diff {worst:.1e}"))
}

fn receptive_field() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(3000);
    let (h, w) = (5, 6);
    let mut s = ParamStore::new();
    let hl = AxialAttentionLayer::new(&mut s, "h", Axis::Height, 4, 2, h, true, &mut r).unwrap();
    let wl = AxialAttentionLayer::new(&mut s, "w", Axis::Width, 4, 2, w, true, &mut r).unwrap();
    let x = rand_tensor(&mut r, &[4, h, w]);

    let single = [AttentionBlock::Axial(&hl)];
    let mut cross_zero = true;
    let mut cross_checked = 0;
    for si in 0..h {
        for sj in 0..w {
            for ti in 0..h {
                for tj in (0..w).filter(|&tj| tj != sj) {
                    let v = receptive_field_probe(&s, &single, &x, (si, sj), (ti, tj)).unwrap();
                    cross_zero &= v.to_bits() == 0.0f64.to_bits();
                    cross_checked += 1;
                }
            }
        }
    }

    let pair = [AttentionBlock::Axial(&hl), AttentionBlock::Axial(&wl)];
    let mut nonzero = 0;
    for _ in 0..50 {
        let src = (r.random_range(0..h), r.random_range(0..w));
        let dst = (r.random_range(0..h), r.random_range(0..w));
        if receptive_field_probe(&s, &pair, &x, src, dst).unwrap() > 0.0 {
            nonzero += 1;
        }
    }
    outcome(
        cross_zero && nonzero == 50,
        format!("height layer: {cross_checked} cross-column entries all exactly 0 = {cross_zero}; height+width: {nonzero}/50 nonzero"),
    )
}

fn complexity_counters(dir: &Path) -> Outcome {
    let csv = dir.join("bench.csv");
    let o = cli(&["bench", "--sizes", "8,16,32,64", "--variants", "full2d,axial", "--trials", "1", "--out", csv.to_str().unwrap()]);
    if !o.status.success() {
        return outcome(false, format!("bench failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut rows = text.lines();
    let header: Vec<&str> = rows.next().unwrap_or("").split(',').collect();
    let col = |n: &str| header.iter().position(|h| *h == n).unwrap();
    let (cv, ch, cw, cd, cf) = (col("variant"), col("H"), col("W"), col("d_model"), col("flops"));
    let mut full = Vec::new();
    let mut axial = Vec::new();
    let mut exact = true;
    for line in rows {
        let f: Vec<&str> = line.split(',').collect();
        let (h, w, d): (u64, u64, u64) = (f[ch].parse().unwrap(), f[cw].parse().unwrap(), f[cd].parse().unwrap());
        let flops: u64 = f[cf].parse().unwrap();
        // one multiply-add per head-dim for every score and every weighted value
        let expect = match f[cv] {
            "full2d" => 2 * (h * w) * (h * w) * d,
            _ => 2 * (h * w) * (h + w) * d,
        };
        exact &= flops == expect;
        if f[cv] == "full2d" { &mut full } else { &mut axial }.push(flops);
    }
    let ratios = |v: &[u64]| v.windows(2).map(|p| p[1] as f64 / p[0] as f64).collect::<Vec<_>>();
    let (rf, ra) = (ratios(&full), ratios(&axial));
    let pass = exact && full.len() == 4 && axial.len() == 4 && rf.iter().all(|&q| q == 16.0) && ra.iter().all(|&q| q == 8.0);
    outcome(pass, format!("closed forms exact = {exact}; full ratios {rf:?}, axial ratios {ra:?}"))
}

fn eval_dice(data: &Path, ckpt: &Path) -> Option<f64> {
    let o = cli(&["eval", "--data", data.to_str()?, "--ckpt", ckpt.to_str()?]);
    let text = stdout(&o);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let row: Vec<&str> = lines.next()?.split(',').collect();
    row.get(header.iter().position(|h| *h == "dice")?)?.parse().ok()
}

fn overfit_run(dir: &Path) -> Outcome {
    let data = dir.join("overfit");
    let o = cli(&["gen-data", "--out", data.to_str().unwrap(), "--count", "8", "--size", "32", "--seed", "7"]);
    if !o.status.success() {
        return outcome(false, "gen-data failed");
    }
    let train = |name: &str| {
        let ck = dir.join(name);
        let t = Instant::now();
        let o = cli(&["train", "--data", data.to_str().unwrap(), "--variant", "gated", "--steps", "500", "--seed", "7", "--out", ck.to_str().unwrap()]);
        (o.status.success(), t.elapsed(), ck)
    };
    let (ok_a, time_a, ck_a) = train("overfit_a.json");
    let (ok_b, _, ck_b) = train("overfit_b.json");
    if !(ok_a && ok_b) {
        return outcome(false, "train failed");
    }
    let identical = std::fs::read(&ck_a).unwrap() == std::fs::read(&ck_b).unwrap();
    let dice = eval_dice(&data, &ck_a).unwrap_or(f64::NAN);
    let pass = dice >= 0.95 && identical && time_a < Duration::from_secs(300);
    outcome(pass, format!("train Dice {dice:.4}, reruns bit-identical = {identical}, one run {:.1}s", time_a.as_secs_f64()))
}

fn metrics_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(4000);
    let mut counts_equal = true;
    let mut ratio_err = 0.0f64;
    let mut f1_dice = 0.0f64;
    for _ in 0..1000 {
        let (dp, dt) = (r.random_range(0.0..=1.0), r.random_range(0.0..=1.0));
        let pred: Vec<f64> = (0..64).map(|_| if r.random_bool(dp) { 1.0 } else { 0.0 }).collect();
        let truth: Vec<f64> = (0..64).map(|_| if r.random_bool(dt) { 1.0 } else { 0.0 }).collect();

        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..8 {
            for x in 0..8 {
                match (pred[y * 8 + x] == 1.0, truth[y * 8 + x] == 1.0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        // both masks empty scores 1.0; otherwise an empty denominator scores 0.0
        let both_empty = tp + fp + fn_ == 0;
        let ratio = |num: u64, den: u64| match (both_empty, den) {
            (true, _) => 1.0,
            (false, 0) => 0.0,
            _ => num as f64 / den as f64,
        };
        let iou = ratio(tp, tp + fp + fn_);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let dice = ratio(2 * tp, 2 * tp + fp + fn_);

        let c = confusion(&pred, &truth).unwrap();
        counts_equal &= (c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn);
        let rep = report(&c);
        for (a, b) in [(rep.iou, iou), (rep.precision, precision), (rep.recall, recall), (rep.dice, dice)] {
            ratio_err = ratio_err.max((a - b).abs());
        }
        f1_dice = f1_dice.max((rep.f1 - rep.dice).abs());
    }
    let pass = counts_equal && ratio_err < 1e-12 && f1_dice < 1e-12;
    outcome(pass, format!("1000 pairs: counts equal = {counts_equal}, max ratio diff {ratio_err:.1e}, max |F1-Dice| {f1_dice:.1e}"))
}

fn comparative(dir: &Path) -> Outcome {
    let data = dir.join("compare");
    let o = cli(&["gen-data", "--out", data.to_str().unwrap(), "--count", "64", "--size", "32", "--seed", "11"]);
    if !o.status.success() {
        return outcome(false, "gen-data failed");
    }
    let val_f1 = |variant: &str| -> Option<f64> {
        let ck = dir.join(format!("compare_{variant}.json"));
        let o = cli(&[
            "train", "--data", data.to_str()?, "--variant", variant, "--steps", "500", "--seed", "11", "--val-fraction", "0.25", "--out", ck.to_str()?,
        ]);
        let text = stdout(&o);
        text.lines().find_map(|l| field(l, "val_f1")).and_then(|v| v.parse().ok())
    };
    match (val_f1("gated"), val_f1("axial")) {
        (Some(g), Some(a)) => outcome(g >= a - 0.02, format!("validation F1 gated {g:.4} vs axial {a:.4} (margin {:+.4})", g - a)),
        _ => outcome(false, "training failed"),
    }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradcheck suite", Box::new(gradcheck_suite)),
        ("reduction identities", Box::new(reduction_identities)),
        ("axial/2D single-row equivalence", Box::new(single_row_equivalence)),
        ("receptive field", Box::new(receptive_field)),
        ("complexity counters", Box::new(|| complexity_counters(dir.path()))),
        ("overfit run", Box::new(|| overfit_run(dir.path()))),
        ("metrics oracle", Box::new(metrics_oracle)),
        ("comparative sanity", Box::new(|| comparative(dir.path()))),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {} [{:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {} criteria, {failed} failed", 8);
    if failed > 0 {
        std::process::exit(1);
    }
}
