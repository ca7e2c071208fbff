use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use axialseg::bench::{self, run_sweep};
use axialseg::data::{self, SynthConfig};
use axialseg::gradcheck::{check_layer, GradcheckOptions, LayerKind, DEFAULT_TOLERANCE};
use axialseg::metrics::{self, dataset_report};
use axialseg::segmodel::{SegModel, SegModelConfig};
use axialseg::training::{self, TrainConfig};
use axialseg::{Error, Result};
use serde_json::json;

use crate::manifest::{sibling, RunManifest};
use crate::{BenchArgs, CheckVariant, EvalArgs, GenDataArgs, GradcheckArgs, TrainArgs};

/// Runs `body`, then writes the manifest whether or not it succeeded.
fn with_manifest<F>(subcommand: &str, seed: Option<u64>, path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut RunManifest) -> Result<()>,
{
    let mut m = RunManifest::start(subcommand, seed);
    let out = body(&mut m);
    m.finish(&out.as_ref().map(|_| ()).map_err(|e| e.to_string()));
    if let Err(e) = m.write(path) {
        eprintln!("warning: could not write manifest {}: {e}", path.display());
    }
    out
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.count, a.size, a.seed);
    cfg.noise_sigma = a.noise;
    cfg.occluder_count = a.occluders;
    cfg.lesion_count_range[1] = a.max_lesions;
    if let Some(r) = a.radius_min {
        cfg.lesion_radius_range[0] = r;
    }
    if let Some(r) = a.radius_max {
        cfg.lesion_radius_range[1] = r;
    }
    with_manifest("gen-data", Some(a.seed), &a.out.join("manifest.json"), |m| {
        m.details = json!({ "synth": cfg });
        let samples = data::generate(&cfg)?;
        data::write_dataset(&a.out, &samples)?;
        m.artifacts.push(a.out.clone());
        println!("wrote {} samples of {}x{} to {}", samples.len(), cfg.size, cfg.size, a.out.display());
        Ok(())
    })
}

pub fn train(a: &TrainArgs) -> Result<()> {
    with_manifest("train", Some(a.seed), &sibling(&a.out, "manifest.json"), |m| {
        let all = data::load_dataset(&a.data)?;
        let first = all.first().ok_or(Error::EmptyDataset)?;
        let (h, w) = (first.image.dims()[1], first.image.dims()[2]);
        if let Some(s) = all.iter().find(|s| s.image.dims() != first.image.dims()) {
            return Err(Error::Config(format!(
                "sample {} is {:?}, expected {:?}",
                s.id,
                s.image.dims(),
                first.image.dims()
            )));
        }
        let (train_set, val_set) = if a.val_fraction > 0.0 {
            data::split(&all, 1.0 - a.val_fraction, a.seed)?
        } else {
            (all, Vec::new())
        };

        let model_cfg = SegModelConfig {
            d_model: a.d_model,
            heads: a.heads,
            num_blocks: a.blocks,
            downsample_factor: a.downsample,
            height: h,
            width: w,
            ..SegModelConfig::desk(a.variant, h, a.seed)
        };
        let mut train_cfg = TrainConfig::new(a.steps, a.seed);
        train_cfg.batch_size = a.batch;
        train_cfg.learning_rate = a.lr;
        train_cfg.loss_mix = a.lambda;
        train_cfg.validate()?;
        m.details = json!({
            "model": model_cfg,
            "training": train_cfg,
            "train_samples": train_set.len(),
            "val_samples": val_set.len(),
        });

        let mut model = SegModel::build(model_cfg)?;
        let val = (!val_set.is_empty()).then_some(val_set.as_slice());
        let log = training::train(&mut model, &train_set, val, &train_cfg)?;

        model.save_checkpoint(&a.out)?;
        m.artifacts.push(a.out.clone());
        let steps_path = sibling(&a.out, "train.csv");
        log.write_steps_csv(create(&steps_path)?).map_err(|e| Error::io(&steps_path, e))?;
        m.artifacts.push(steps_path);
        if !log.validation.is_empty() {
            let val_path = sibling(&a.out, "val.csv");
            log.write_validation_csv(create(&val_path)?).map_err(|e| Error::io(&val_path, e))?;
            m.artifacts.push(val_path);
        }

        let fit = dataset_report(&train_set, &model, metrics::DEFAULT_THRESHOLD)?;
        let first_loss = log.steps.first().map_or(f64::NAN, |r| r.loss);
        let last_loss = log.steps.last().map_or(f64::NAN, |r| r.loss);
        m.details["initial_loss"] = json!(first_loss);
        m.details["final_loss"] = json!(last_loss);
        m.details["train_dice"] = json!(fit.dice);
        let mut line = format!(
            "variant={} steps={} loss {:.4} -> {:.4} train_dice={:.4}",
            a.variant, a.steps, first_loss, last_loss, fit.dice
        );
        if let Some((_, r)) = log.validation.last() {
            m.details["val"] = json!(r);
            line += &format!(" val_iou={:.4} val_f1={:.4}", r.iou, r.f1);
        }
        println!("{line} checkpoint={}", a.out.display());
        Ok(())
    })
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Threshold(a.threshold));
    }
    let model = SegModel::load_checkpoint(&a.ckpt)?;
    let samples = data::load_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let r = dataset_report(&samples, &model, a.threshold)?;
    println!("{}", metrics::CSV_HEADER);
    println!("{}", r.csv_row());
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    with_manifest("bench", None, &sibling(&a.out, "manifest.json"), |m| {
        m.details = json!({
            "sizes": a.sizes,
            "variants": a.variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
            "d_model": a.d_model,
            "heads": a.heads,
            "trials": a.trials,
        });
        let records = run_sweep(&a.sizes, &a.variants, a.d_model, a.heads, a.trials)?;
        bench::write_csv(&records, create(&a.out)?).map_err(|e| Error::io(&a.out, e))?;
        m.artifacts.push(a.out.clone());
        println!("{}", bench::CSV_HEADER);
        for r in &records {
            println!("{}", r.csv_row());
        }
        Ok(())
    })
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let kind = match a.variant {
        CheckVariant::Full2d => LayerKind::Full2d,
        CheckVariant::Relpos2d => LayerKind::Relpos2d,
        CheckVariant::Axial => LayerKind::Axial,
        CheckVariant::Gated => LayerKind::Gated,
    };
    let opts = GradcheckOptions {
        eps: a.eps,
        seed: a.seed,
        ..GradcheckOptions::default()
    };
    let r = check_layer(kind, 4, 4, 6, 2, &opts)?;
    println!(
        "variant={} coords={} max_rel_error={:.3e} worst={}[{}] analytic={:.6e} numeric={:.6e}",
        kind.name(),
        r.coords_checked,
        r.max_rel_error,
        r.worst_param,
        r.worst_index,
        r.analytic,
        r.numeric
    );
    if r.passes(DEFAULT_TOLERANCE) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gradient check failed: {:.3e} >= {DEFAULT_TOLERANCE:e}",
            r.max_rel_error
        )))
    }
}
