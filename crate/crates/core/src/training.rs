//! BCE + Dice loss, Adam, and the seeded training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{dataset_report, MetricsReport, DEFAULT_THRESHOLD};
use crate::params::ParamStore;
use crate::segmodel::SegModel;
use crate::tensor::Tensor;

/// Predictions are clamped to `[PRED_CLAMP, 1 - PRED_CLAMP]` inside BCE.
pub const PRED_CLAMP: f64 = 1e-7;
/// Smoothing term of the Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

struct BceDice {
    target: Vec<f64>,
    mix: f64,
}

impl BceDice {
    fn parts(&self, p: &[f64]) -> (f64, f64, f64, f64) {
        let n = p.len() as f64;
        let mut bce = 0.0;
        let (mut inter, mut sum_p, mut sum_t) = (0.0, 0.0, 0.0);
        for (&pi, &ti) in p.iter().zip(&self.target) {
            let pc = pi.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
            bce -= ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln();
            inter += pi * ti;
            sum_p += pi;
            sum_t += ti;
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = sum_p + sum_t + DICE_SMOOTH;
        (bce / n, 1.0 - num / den, num, den)
    }
}

impl CustomOp for BceDice {
    fn name(&self) -> &'static str {
        "bce_dice_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let p = inputs[0].data();
        let n = p.len() as f64;
        let (_, _, num, den) = self.parts(p);
        let g = grad_out[0];
        let grad = p
            .iter()
            .zip(&self.target)
            .map(|(&pi, &ti)| {
                let d_bce = if (PRED_CLAMP..=1.0 - PRED_CLAMP).contains(&pi) {
                    (-ti / pi + (1.0 - ti) / (1.0 - pi)) / n
                } else {
                    0.0
                };
                let d_dice = -(2.0 * ti * den - num) / (den * den);
                g * (self.mix * d_bce + (1.0 - self.mix) * d_dice)
            })
            .collect();
        vec![Some(grad)]
    }
}

/// `mix · BCE + (1 - mix) · (1 - (2Σpt + 1)/(Σp + Σt + 1))`.
pub fn bce_dice_loss(g: &mut Graph, pred: Var, target: &Tensor, mix: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::Config(format!("loss mix {mix} outside [0, 1]")));
    }
    let p = g.value(pred);
    if p.shape() != target.shape() {
        return Err(Error::dim("bce_dice_loss", p.dims(), target.dims()));
    }
    if let Some(&bad) = p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::PredictionRange(bad));
    }
    if let Some(&bad) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryValue(bad));
    }
    let op = BceDice {
        target: target.data().to_vec(),
        mix,
    };
    let (bce, dice, _, _) = op.parts(p.data());
    let value = mix * bce + (1.0 - mix) * dice;
    g.custom(vec![pred], Tensor::scalar(value), Box::new(op))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of BCE in the loss; Dice gets `1 - loss_mix`.
    pub loss_mix: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch_size: 8,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss_mix: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return Err(Error::Config(format!("loss mix {} outside [0, 1]", self.loss_mix)));
        }
        Ok(())
    }
}

/// Adam with bias correction; frozen parameters are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    }

    /// `grads[i]` pairs with the i-th parameter of `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.frozen)).collect();
        for (i, (id, frozen)) in ids.into_iter().enumerate() {
            let g = &grads[i];
            if g.len() != self.m[i].len() {
                return Err(Error::dim("adam_step", &[self.m[i].len()], &[g.len()]));
            }
            if frozen {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in params.get_mut(id).data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<(usize, MetricsReport)>,
}

impl TrainLog {
    pub fn write_steps_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "step,loss,grad_norm")?;
        for r in &self.steps {
            writeln!(out, "{},{:.17e},{:.17e}", r.step, r.loss, r.grad_norm)?;
        }
        Ok(())
    }

    pub fn write_validation_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,iou,precision,recall,f1,dice")?;
        for (epoch, r) in &self.validation {
            writeln!(out, "{epoch},{}", r.csv_row())?;
        }
        Ok(())
    }
}

/// Loss and per-parameter gradients for one sample.
pub fn sample_gradients(model: &SegModel, sample: &Sample, mix: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);
    let x = g.constant(sample.image.clone());
    let pred = model.forward(&mut g, &bound, x)?;
    let loss = bce_dice_loss(&mut g, pred, &sample.mask, mix)?;
    let grads = g.backward(loss)?;
    let per_param = bound.vars().iter().map(|&v| grads.tensor(v).into_data()).collect();
    Ok((g.value(loss).item(), per_param))
}

/// Trains `model` in place. Batches are drawn from a per-epoch seeded
/// shuffle; per-sample gradients are summed in batch order and averaged.
/// When `val` is given, it is scored after every epoch and at the end.
pub fn train(model: &mut SegModel, data: &[Sample], val: Option<&[Sample]>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::from_config(model.params(), cfg);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut epoch = 0;
    let mut scored_epoch = None;

    for step in 0..cfg.steps {
        if cursor >= data.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(data.len());
        let batch = &order[cursor..end];
        cursor = end;

        let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
            .par_iter()
            .map(|&i| sample_gradients(model, &data[i], cfg.loss_mix))
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut total: Vec<Vec<f64>> = model.params().iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        for r in results {
            let (l, grads) = r.map_err(|e| match e {
                Error::NonFinite { .. } => Error::NanLoss { step },
                other => other,
            })?;
            loss += l * scale;
            for (t, g) in total.iter_mut().zip(grads) {
                t.iter_mut().zip(g).for_each(|(t, g)| *t += g * scale);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NanLoss { step });
        }
        let grad_norm = total.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        adam.step(model.params_mut(), &total)?;
        log.steps.push(StepRecord { step, loss, grad_norm });

        if cursor >= data.len() {
            epoch += 1;
            if let Some(val) = val.filter(|v| !v.is_empty()) {
                log.validation.push((epoch, dataset_report(val, model, DEFAULT_THRESHOLD)?));
                scored_epoch = Some(epoch);
            }
        }
    }
    if let Some(val) = val.filter(|v| !v.is_empty()) {
        if scored_epoch != Some(epoch) || cursor < data.len() {
            log.validation.push((epoch + 1, dataset_report(val, model, DEFAULT_THRESHOLD)?));
        }
    }
    Ok(log)
}
