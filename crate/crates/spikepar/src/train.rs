//! Student training loop, evaluation pass, and the gradient-check harness.

use crate::data::{batch_iter, InMemoryDataset};
use crate::distill::{positive_ratios, AttrWeights, TeacherArtifact};
use crate::error::{Error, Result};
use crate::metrics::{MetricsAccumulator, MetricsReport, ZeroDenominator};
use crate::model::{ModelConfig, Params, Spikingformer};
use crate::neuron::SpikeMode;
use crate::optim::Adam;
use crate::runcfg::RunConfig;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Per-epoch entry of the newline-delimited JSON metric log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub resp_kd: f64,
    pub feat_kd: f64,
    pub total: f64,
    #[serde(rename = "mA")]
    pub ma: f64,
    #[serde(rename = "Acc")]
    pub acc: f64,
    #[serde(rename = "Prec")]
    pub prec: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

pub struct TrainResult {
    pub model: Spikingformer<f32>,
    pub history: Vec<EpochLog>,
    /// Feature-projection parameters when distillation was active.
    pub proj: Option<Params<f32>>,
}

/// Distillation requires the teacher to know every training sample.
pub fn validate_teacher_coverage(
    ds: &InMemoryDataset<f32>,
    teacher: &TeacherArtifact<f32>,
) -> Result<()> {
    let missing: Vec<u64> =
        ds.ids.iter().copied().filter(|&id| teacher.index_of(id).is_err()).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "teacher artifact is missing {} dataset sample ids: {:?}{}",
            missing.len(),
            &missing[..missing.len().min(16)],
            if missing.len() > 16 { " ..." } else { "" }
        )));
    }
    if teacher.num_attributes() != ds.num_attributes() {
        return Err(Error::Validation(format!(
            "teacher has {} attributes, dataset has {}",
            teacher.num_attributes(),
            ds.num_attributes()
        )));
    }
    Ok(())
}

fn shuffle_seed(base: u64, epoch: usize) -> u64 {
    base ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs a full evaluation pass (hard spikes, eval-mode BN) and returns the
/// metrics report.
pub fn evaluate(
    model: &Spikingformer<f32>,
    ds: &InMemoryDataset<f32>,
    batch_size: usize,
    threshold: f64,
    strict: bool,
    mode: ZeroDenominator,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(ds.num_attributes());
    for batch in batch_iter(ds, batch_size, None)? {
        let tape: Tape<f32> = Tape::no_grad();
        let bound = model.bind(&tape, false);
        let out = model.forward(&tape, &bound, &batch.images, false, SpikeMode::Hard, None)?;
        let logits = tape.value(out.logits);
        let probs = Tensor::from_fn(&logits.shape.clone(), |i| logits.data[i].sigmoid());
        acc.accumulate_probs(&probs, &batch.labels, threshold)?;
    }
    acc.report(strict, mode)
}

/// Sigmoid probabilities `[N, M]` for a whole split, in manifest order.
pub fn predict(
    model: &Spikingformer<f32>,
    ds: &InMemoryDataset<f32>,
    batch_size: usize,
) -> Result<Tensor<f32>> {
    let m = ds.num_attributes();
    let mut probs = Vec::with_capacity(ds.len() * m);
    for batch in batch_iter(ds, batch_size, None)? {
        let tape: Tape<f32> = Tape::no_grad();
        let bound = model.bind(&tape, false);
        let out = model.forward(&tape, &bound, &batch.images, false, SpikeMode::Hard, None)?;
        probs.extend(tape.value(out.logits).data.iter().map(|z| z.sigmoid()));
    }
    Tensor::new(vec![ds.len(), m], probs)
}

fn new_projection(d_s: usize, d_t: usize, seed: u64) -> Params<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED_F00D);
    let bound = (6.0 / d_s as f64).sqrt();
    let mut p = Params::new();
    p.add(
        "distill.proj.weight",
        Tensor::from_fn(&[d_s, d_t], |_| rng.gen_range(-bound..bound) as f32),
    );
    // A small nonzero bias keeps the projected vector away from the exact
    // zero vector (cosine similarity is undefined there) even when a sample
    // produces no spikes at all.
    p.add("distill.proj.bias", Tensor::full(&[d_t], 0.1));
    p
}

/// Trains the student. `out_dir`, when given, receives the resolved config,
/// the NDJSON metric log, and a checkpoint per epoch. `resume` continues
/// from a previous checkpoint of the same config.
pub fn train_student(
    cfg: &RunConfig,
    train_ds: &InMemoryDataset<f32>,
    test_ds: &InMemoryDataset<f32>,
    teacher: Option<&TeacherArtifact<f32>>,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
    verbose: bool,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_ds.num_attributes() != cfg.model.num_attributes {
        return Err(Error::Config(format!(
            "dataset has {} attributes, model configured for {}",
            train_ds.num_attributes(),
            cfg.model.num_attributes
        )));
    }
    let distilling = teacher.is_some() && (cfg.distill.alpha > 0.0 || cfg.distill.beta > 0.0);
    if let Some(t) = teacher {
        validate_teacher_coverage(train_ds, t)?;
    }

    let mut start_epoch = 0usize;
    let mut model: Spikingformer<f32>;
    let mut proj: Option<Params<f32>>;
    let mut resume_extras: Vec<(String, Tensor<f32>)> = Vec::new();
    if let Some(ckpt) = resume {
        let (m, extras) = Spikingformer::load_checkpoint(ckpt)?;
        if m.cfg != cfg.model {
            return Err(Error::Config("checkpoint model config differs from run config".into()));
        }
        model = m;
        if let Some((_, t)) = extras.iter().find(|(n, _)| n == "epoch") {
            start_epoch = t.item() as usize;
        }
        proj = {
            let w = extras.iter().find(|(n, _)| n == "distill.proj.weight");
            let b = extras.iter().find(|(n, _)| n == "distill.proj.bias");
            match (w, b) {
                (Some((_, w)), Some((_, b))) => {
                    let mut p = Params::new();
                    p.add("distill.proj.weight", w.clone());
                    p.add("distill.proj.bias", b.clone());
                    Some(p)
                }
                _ => None,
            }
        };
        resume_extras = extras;
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        model = Spikingformer::new(cfg.model.clone(), &mut rng)?;
        model.attr_names = train_ds.attr_names.clone();
        proj = None;
    }
    if distilling && proj.is_none() {
        let d_t = teacher.unwrap().teacher_dim();
        proj = Some(new_projection(cfg.model.embed_dim, d_t, cfg.seed));
    }

    let weights: AttrWeights<f32> = if cfg.uniform_weights {
        AttrWeights::uniform(cfg.model.num_attributes)
    } else {
        AttrWeights::from_ratios(&positive_ratios(&train_ds.labels)?)
    };

    let mut opt_model: Adam<f32> = Adam::new(&model.params, cfg.optimizer.clone());
    let mut opt_proj: Option<Adam<f32>> =
        proj.as_ref().map(|p| Adam::new(p, cfg.optimizer.clone()));
    if !resume_extras.is_empty() {
        let model_state: Vec<(String, Tensor<f32>)> = resume_extras
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("opt_model.").map(|s| (format!("opt.{s}"), t.clone())))
            .collect();
        opt_model.import_state(&model_state);
        if let Some(op) = opt_proj.as_mut() {
            let proj_state: Vec<(String, Tensor<f32>)> = resume_extras
                .iter()
                .filter_map(|(n, t)| n.strip_prefix("opt_proj.").map(|s| (format!("opt.{s}"), t.clone())))
                .collect();
            op.import_state(&proj_state);
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved"), cfg.to_text())?;
    }
    let mut log_file = match out_dir {
        Some(dir) => Some(std::io::BufWriter::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("metrics.ndjson"))?,
        )),
        None => None,
    };

    let alpha = cfg.distill.alpha as f32;
    let beta = cfg.distill.beta as f32;
    let tau = cfg.distill.temperature as f32;
    let mut history = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let mut sums = [0.0f64; 4]; // ce, resp, feat, total
        let mut steps = 0usize;
        for batch in batch_iter(train_ds, cfg.batch_size, Some(shuffle_seed(cfg.seed, epoch)))? {
            let tape: Tape<f32> = Tape::new();
            let bound = model.bind(&tape, true);
            let out = model.forward(&tape, &bound, &batch.images, true, SpikeMode::Hard, None)?;
            let ce = tape.weighted_bce(out.logits, &batch.labels, &weights)?;
            let mut resp = None;
            let mut feat = None;
            let mut proj_vars: Vec<Var> = Vec::new();
            if distilling {
                let t = teacher.unwrap();
                let (t_probs, t_feats) = t.gather(&batch.ids)?;
                if alpha > 0.0 {
                    resp = Some(tape.resp_kd(out.logits, &t_probs, tau)?);
                }
                if beta > 0.0 {
                    let p = proj.as_ref().unwrap();
                    proj_vars = p.tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
                    feat = Some(tape.feat_kd(
                        out.features,
                        proj_vars[0],
                        proj_vars[1],
                        &t.attr_embeddings,
                        &t_feats,
                    )?);
                }
            }
            let total = tape.total_loss(ce, resp, feat, alpha, beta)?;
            let grads = tape.backward(total)?;
            let g_model: Vec<Option<&[f32]>> = bound.iter().map(|&v| grads.get(v)).collect();
            opt_model.step(&mut model.params, &g_model, lr);
            if !proj_vars.is_empty() {
                let g_proj: Vec<Option<&[f32]>> = proj_vars.iter().map(|&v| grads.get(v)).collect();
                opt_proj.as_mut().unwrap().step(proj.as_mut().unwrap(), &g_proj, lr);
            }
            sums[0] += tape.value(ce).item() as f64;
            sums[1] += resp.map(|r| tape.value(r).item() as f64).unwrap_or(0.0);
            sums[2] += feat.map(|f| tape.value(f).item() as f64).unwrap_or(0.0);
            sums[3] += tape.value(total).item() as f64;
            steps += 1;
        }
        let report = evaluate(
            &model,
            test_ds,
            cfg.batch_size.max(64),
            cfg.threshold,
            cfg.eval_strict,
            cfg.zero_denominator,
        )?;
        let n = steps.max(1) as f64;
        let entry = EpochLog {
            epoch,
            lr,
            ce: sums[0] / n,
            resp_kd: sums[1] / n,
            feat_kd: sums[2] / n,
            total: sums[3] / n,
            ma: report.ma,
            acc: report.acc,
            prec: report.prec,
            recall: report.recall,
            f1: report.f1,
        };
        let line = serde_json::to_string(&entry).expect("epoch log");
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        if verbose {
            println!("{line}");
        }
        history.push(entry);
        if let Some(dir) = out_dir {
            save_training_checkpoint(
                &model,
                proj.as_ref(),
                &opt_model,
                opt_proj.as_ref(),
                epoch + 1,
                &dir.join("checkpoint.snpk"),
            )?;
        }
        let stop_ma = cfg.early_stop_ma.map_or(true, |t| report.ma >= t);
        let stop_f1 = cfg.early_stop_f1.map_or(true, |t| report.f1 >= t);
        if (cfg.early_stop_ma.is_some() || cfg.early_stop_f1.is_some()) && stop_ma && stop_f1 {
            break;
        }
    }
    Ok(TrainResult { model, history, proj })
}

pub fn save_training_checkpoint(
    model: &Spikingformer<f32>,
    proj: Option<&Params<f32>>,
    opt_model: &Adam<f32>,
    opt_proj: Option<&Adam<f32>>,
    epoch: usize,
    path: &Path,
) -> Result<()> {
    let mut extras: Vec<(String, Tensor<f32>)> =
        vec![("epoch".into(), Tensor::scalar(epoch as f32))];
    if let Some(p) = proj {
        for (name, t) in p.names.iter().zip(&p.tensors) {
            extras.push((name.clone(), t.clone()));
        }
    }
    for (name, t) in opt_model.export_state() {
        extras.push((format!("opt_model.{}", name.strip_prefix("opt.").unwrap_or(&name)), t));
    }
    if let Some(op) = opt_proj {
        for (name, t) in op.export_state() {
            extras.push((format!("opt_proj.{}", name.strip_prefix("opt.").unwrap_or(&name)), t));
        }
    }
    model.save_checkpoint(path, &extras)
}

// --- gradient check ----------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LayerWorst {
    pub name: String,
    pub coord: usize,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub samples: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub per_layer: Vec<LayerWorst>,
}

impl GradCheckReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "grad-check: {} sampled parameters, max relative error {:.3e} (tolerance {:.0e}) -> {}\n",
            self.samples,
            self.max_rel_err,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        );
        for l in &self.per_layer {
            s.push_str(&format!("  {:<28} worst coord {:>6}  rel err {:.3e}\n", l.name, l.coord, l.rel_err));
        }
        s
    }
}

/// Finite-difference check of the full soft-mode backward pass on the tiny
/// config: analytic parameter gradients of a weighted-BCE loss versus
/// 64-bit central differences over >= `min_samples` sampled coordinates.
/// `corrupt` perturbs the analytic gradients (negative-control fixture).
pub fn grad_check(seed: u64, min_samples: usize, corrupt: bool) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model: Spikingformer<f64> = Spikingformer::new(cfg.clone(), &mut rng)?;
    let b = 2;
    let images = Tensor::from_fn(&[b, cfg.in_channels, cfg.image_h, cfg.image_w], |_| {
        rng.gen_range(0.0..1.0)
    });
    let labels = Tensor::from_fn(&[b, cfg.num_attributes], |_| rng.gen_range(0..2) as f64);
    let weights: AttrWeights<f64> = AttrWeights::from_ratios(&[0.3, 0.5, 0.7]);

    let loss_value = |m: &Spikingformer<f64>| -> Result<f64> {
        let tape: Tape<f64> = Tape::no_grad();
        let bound = m.bind(&tape, false);
        let out = m.forward(&tape, &bound, &images, true, SpikeMode::Soft, None)?;
        let l = tape.weighted_bce(out.logits, &labels, &weights)?;
        Ok(tape.value(l).item())
    };

    // analytic gradients
    let tape: Tape<f64> = Tape::new();
    let bound = model.bind(&tape, true);
    let out = model.forward(&tape, &bound, &images, true, SpikeMode::Soft, None)?;
    let loss = tape.weighted_bce(out.logits, &labels, &weights)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(bound.len());
    for (i, &v) in bound.iter().enumerate() {
        let mut g = grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| {
            vec![0.0; model.params.tensors[i].numel()]
        });
        if corrupt && model.params.names[i] == "head.weight" {
            for x in &mut g {
                *x += 0.05;
            }
        }
        analytic.push(g);
    }

    // sample coordinates: every tensor at least once, then round-robin
    let mut coords: Vec<(usize, usize)> = Vec::new();
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for (i, t) in model.params.tensors.iter().enumerate() {
        coords.push((i, pick_rng.gen_range(0..t.numel())));
    }
    while coords.len() < min_samples {
        let i = pick_rng.gen_range(0..model.params.tensors.len());
        let c = pick_rng.gen_range(0..model.params.tensors[i].numel());
        coords.push((i, c));
    }

    let mut work = model;
    let mut max_rel = 0.0f64;
    let mut per_layer: Vec<LayerWorst> = work
        .params
        .names
        .iter()
        .map(|n| LayerWorst { name: n.clone(), coord: 0, rel_err: 0.0 })
        .collect();
    for &(i, c) in &coords {
        let x0 = work.params.tensors[i].data[c];
        let eps = 1e-5 * x0.abs().max(1.0);
        work.params.tensors[i].data[c] = x0 + eps;
        let lp = loss_value(&work)?;
        work.params.tensors[i].data[c] = x0 - eps;
        let lm = loss_value(&work)?;
        work.params.tensors[i].data[c] = x0;
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[i][c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > per_layer[i].rel_err {
            per_layer[i] = LayerWorst { name: work.params.names[i].clone(), coord: c, rel_err: rel };
        }
        max_rel = max_rel.max(rel);
    }
    let tolerance = 1e-3;
    Ok(GradCheckReport {
        samples: coords.len(),
        max_rel_err: max_rel,
        tolerance,
        pass: max_rel < tolerance,
        per_layer,
    })
}
