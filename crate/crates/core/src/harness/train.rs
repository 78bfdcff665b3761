use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{Method, TrainConfig};
use crate::augment::{AugmentedPair, Augmenter};
use crate::encoders::{checkpoint, Forward, Heads, Modality, ModelBundle, Pooling};
use crate::error::{config_err, Error, Result};
use crate::objectives::{domain_cross_entropy, info_nce, mmd_across_domains};
use crate::synthdata::{Dataset, PairedSample, Split};
use crate::tensor::{io, AdamConfig, AdamState, CosineSchedule, Tensor, Var};
use crate::rng;

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Global input scaling fitted on the training trials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub neural_mean: f64,
    pub neural_std: f64,
    pub pose_std: f64,
}

impl InputNorm {
    pub fn fit(ds: &Dataset, samples: &[PairedSample]) -> Self {
        let mut trials: Vec<usize> = samples.iter().map(|s| s.trial).collect();
        trials.sort_unstable();
        trials.dedup();
        let moments = |vals: &mut dyn Iterator<Item = f64>| {
            let (mut n, mut s, mut s2) = (0.0f64, 0.0f64, 0.0f64);
            for v in vals {
                n += 1.0;
                s += v;
                s2 += v * v;
            }
            let m = s / n.max(1.0);
            (m, (s2 / n.max(1.0) - m * m).max(0.0).sqrt())
        };
        let (neural_mean, neural_std) =
            moments(&mut trials.iter().flat_map(|&t| ds.trials[t].neural.data().iter().map(|&v| f64::from(v))));
        let (_, pose_std) = moments(&mut trials.iter().flat_map(|&t| ds.trials[t].behavior.data().iter().map(|&v| f64::from(v))));
        Self { neural_mean, neural_std: neural_std.max(1e-6), pose_std: pose_std.max(1e-6) }
    }

    pub fn neural(&self, t: &mut Tensor<f32>) {
        let (m, s) = (self.neural_mean as f32, self.neural_std as f32);
        t.data_mut().iter_mut().for_each(|v| *v = (*v - m) / s);
    }

    pub fn pose(&self, t: &mut Tensor<f32>) {
        let s = self.pose_std as f32;
        t.data_mut().iter_mut().for_each(|v| *v /= s);
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub global_step: usize,
    pub lr: f64,
    /// Objective value divided by the batch size.
    pub loss: f64,
    /// Mean per-direction, per-sample InfoNCE (contrastive methods).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nce: Option<f64>,
    /// Discriminator cross-entropy or MMD term.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux: Option<f64>,
}

/// Run metadata stored with every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub train_config: TrainConfig,
    pub input_norm: InputNorm,
    pub labels_read: Vec<u64>,
}

pub struct Trained {
    pub bundle: ModelBundle<f32>,
    pub norm: InputNorm,
    pub config: TrainConfig,
    pub log: Vec<StepLog>,
    pub epochs_done: usize,
    /// Action labels read during training, per domain.
    pub labels_read: Vec<u64>,
}

impl Trained {
    /// Loads a model saved by [`train_to`] (without its optimizer or log).
    pub fn load(dir: &Path) -> Result<Self> {
        let loaded = checkpoint::load::<f32>(dir)?;
        let run: RunInfo = serde_json::from_value(loaded.manifest.run.clone())?;
        Ok(Self {
            bundle: loaded.bundle,
            norm: run.input_norm,
            config: run.train_config,
            log: Vec::new(),
            epochs_done: loaded.manifest.epoch,
            labels_read: run.labels_read,
        })
    }
}

fn heads_for(method: Method, ds: &Dataset) -> Heads {
    let mut h = Heads::default();
    match method {
        Method::Grl => h.discriminator_domains = Some(ds.domains()),
        Method::RegressionConv => {
            h.regression = true;
            h.neural_pooling = Pooling::Mean;
        }
        Method::Supervised => h.classifier_classes = Some(ds.config.n_actions),
        _ => {}
    }
    h
}

/// Trains in memory.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    train_to(ds, cfg, None, None)
}

/// Trains, checkpointing into `out` after every epoch and appending the step
/// log to `out/metrics.jsonl`. With `resume`, training continues from the
/// checkpoint in that directory and follows the same trajectory as an
/// uninterrupted run.
pub fn train_to(ds: &Dataset, cfg: &TrainConfig, out: Option<&Path>, resume: Option<&Path>) -> Result<Trained> {
    train_until(ds, cfg, out, resume, None)
}

/// [`train_to`] that stops once `stop_after` epochs are complete; the schedule
/// still follows `cfg.epochs`, so a later resume continues the same run.
pub fn train_until(
    ds: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<Trained> {
    cfg.validate()?;
    let prepared = cfg.neural_input.prepare(ds)?;
    let ds: &Dataset = &prepared;
    let method = cfg.method;
    let aug_cfg = cfg.augment();
    if aug_cfg.swaps() && ds.domains() < 2 {
        return Err(config_err("swap augmentations need at least 2 domains"));
    }
    let split = Split::new(ds, cfg.window, cfg.split)?;
    let train: Vec<PairedSample> = match &cfg.train_domains {
        Some(keep) => split.train.into_iter().filter(|s| keep.contains(&s.domain)).collect(),
        None => split.train,
    };
    if train.len() < 2 {
        return Err(config_err("fewer than 2 training windows"));
    }
    let norm = InputNorm::fit(ds, &train);
    let encoder = cfg.resolve_encoder(ds)?;
    let aug = Augmenter::new(ds, &train, cfg.window.neural_frames, aug_cfg.clone())?;

    let batch = cfg.batch_size.min(train.len());
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or((train.len() / batch).max(1));
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let adam = AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() };

    let (mut bundle, mut opt, start_epoch, mut labels_read) = match resume {
        Some(dir) => {
            let l = checkpoint::load::<f32>(dir)?;
            let run: RunInfo = serde_json::from_value(l.manifest.run.clone())?;
            if run.train_config != *cfg {
                warn!("resuming with a config that differs from the checkpoint's");
            }
            let opt = l.optimizer.ok_or_else(|| config_err("checkpoint has no optimizer state to resume from"))?;
            (l.bundle, opt, l.manifest.epoch, run.labels_read)
        }
        None => {
            let b = ModelBundle::<f32>::new(encoder, heads_for(method, ds), cfg.seed)?;
            let o = AdamState::new(adam, b.params.tensors());
            (b, o, 0, vec![0; ds.domains()])
        }
    };

    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(METRICS_FILE);
            let f = if resume.is_some() {
                OpenOptions::new().create(true).append(true).open(path)?
            } else {
                fs::File::create(path)?
            };
            Some(f)
        }
        None => None,
    };

    let aug_seed = rng::mix(cfg.seed, &[0xa0]);
    let mut log = Vec::new();
    let end = stop_after.map_or(cfg.epochs, |e| e.min(cfg.epochs)).max(start_epoch);
    for epoch in start_epoch..end {
        let mut perm: Vec<usize> = (0..train.len()).collect();
        perm.shuffle(&mut rng::stream(cfg.seed, &[0x7a, epoch as u64]));
        let mut epoch_loss = 0.0;
        for step in 0..steps_per_epoch {
            let global = epoch * steps_per_epoch + step;
            let ids: Vec<usize> = (0..batch).map(|j| perm[(step * batch + j) % train.len()]).collect();
            let pairs = aug.batch(&ids, aug_seed, global as u64)?;
            let b = Batch::assemble(ds, &train, &ids, pairs, &norm, method)?;
            opt.lr = schedule.lr_at(global);

            let mut bn = std::mem::take(&mut bundle.bn);
            let result = {
                let mut fw = Forward::train(&bundle.params, &mut bn);
                objective(&bundle, &mut fw, &b, cfg, epoch).and_then(|(loss, nce, aux)| {
                    let value = f64::from(fw.tape.item(loss)) / batch as f64;
                    if !value.is_finite() {
                        return Err(Error::NonFinite { op: "loss" });
                    }
                    let grads = fw.tape.backward(loss)?;
                    Ok((value, nce, aux, fw.param_grads(&grads)))
                })
            };
            bundle.bn = bn;
            let (value, nce, aux, grads) = match result {
                Ok(r) => r,
                Err(Error::NonFinite { op }) => {
                    let detail = format!("non-finite value in {op}");
                    if let Some(dir) = out {
                        b.dump(&dir.join(format!("diverged_e{epoch}_s{step}")))?;
                    }
                    return Err(Error::Diverged { epoch, step, detail });
                }
                Err(e) => return Err(e),
            };
            opt.step(bundle.params.tensors_mut(), &grads)?;
            if method == Method::Supervised {
                for s in &b.domains {
                    labels_read[*s] += 1;
                }
            }
            let entry = StepLog { epoch, step, global_step: global, lr: opt.lr, loss: value, nce, aux };
            if let Some(f) = metrics.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            }
            epoch_loss += value;
            log.push(entry);
        }
        info!("{method} epoch {}/{}: loss {:.4}", epoch + 1, cfg.epochs, epoch_loss / steps_per_epoch as f64);
        if let Some(dir) = out {
            let run = RunInfo { train_config: cfg.clone(), input_norm: norm, labels_read: labels_read.clone() };
            checkpoint::save(dir, &bundle, Some(&opt), epoch + 1, serde_json::to_value(&run)?)?;
        }
    }
    Ok(Trained { bundle, norm, config: cfg.clone(), log, epochs_done: end, labels_read })
}

/// A normalized, stacked training batch.
struct Batch {
    behavior: Tensor<f32>,
    neural: Tensor<f32>,
    domains: Vec<usize>,
    labels: Vec<usize>,
    /// Unaugmented pose windows, the regression target.
    target: Option<Tensor<f32>>,
}

impl Batch {
    fn assemble(
        ds: &Dataset,
        samples: &[PairedSample],
        ids: &[usize],
        pairs: Vec<AugmentedPair>,
        norm: &InputNorm,
        method: Method,
    ) -> Result<Self> {
        let domains = pairs.iter().map(|p| p.domain).collect();
        let (bs, ns): (Vec<_>, Vec<_>) = pairs.into_iter().map(|p| (p.behavior, p.neural)).unzip();
        let mut behavior = Tensor::stack(&bs)?;
        let mut neural = Tensor::stack(&ns)?;
        norm.pose(&mut behavior);
        norm.neural(&mut neural);
        let target = if method == Method::RegressionConv {
            let raw: Vec<Tensor<f32>> = ids.iter().map(|&i| ds.behavior_window(&samples[i])).collect();
            let mut t = Tensor::stack(&raw)?;
            norm.pose(&mut t);
            let n = t.shape()[0];
            let rest = t.len() / n;
            Some(t.reshape([n, rest])?)
        } else {
            None
        };
        let labels = ids.iter().map(|&i| samples[i].label).collect();
        Ok(Self { behavior, neural, domains, labels, target })
    }

    fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        io::save(&dir.join("behavior.nswt"), &self.behavior)?;
        io::save(&dir.join("neural.nswt"), &self.neural)?;
        fs::write(dir.join("domains.json"), serde_json::to_string(&self.domains)?)?;
        Ok(())
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor<f32>> {
    let mut t = Tensor::zeros([labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

/// Builds the summed objective for one batch; returns it with the logged
/// InfoNCE and auxiliary terms (per sample).
fn objective(
    m: &ModelBundle<f32>,
    fw: &mut Forward<'_, f32>,
    b: &Batch,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(Var, Option<f64>, Option<f64>)> {
    let n = b.labels.len();
    let xn = fw.input(b.neural.clone());
    let hn = m.encode_neural(fw, xn)?;
    match cfg.method {
        Method::RegressionConv => {
            let pred = m.regress(fw, hn)?;
            let target = fw.input(b.target.clone().expect("regression target"));
            let d = fw.tape.sub(pred, target)?;
            let sq = fw.tape.mul(d, d)?;
            // summed over the batch, averaged over pose coordinates
            let per = fw.tape.shape(sq)[1] as f64;
            let s = fw.tape.sum(sq)?;
            Ok((fw.tape.scale(s, 1.0 / per)?, None, None))
        }
        Method::Supervised => {
            let logits = m.classify(fw, hn)?;
            let lp = fw.tape.log_softmax(logits, 1)?;
            let k = fw.tape.shape(logits)[1];
            let oh = fw.input(one_hot(&b.labels, k)?);
            let picked = fw.tape.mul(lp, oh)?;
            let s = fw.tape.sum(picked)?;
            Ok((fw.tape.neg(s)?, None, None))
        }
        _ => {
            let xb = fw.input(b.behavior.clone());
            let hb = m.encode_behavior(fw, xb)?;
            let zb = m.project(fw, hb, Modality::Behavior)?;
            let zn = m.project(fw, hn, Modality::Neural)?;
            let nce = info_nce(&mut fw.tape, zb, zn, cfg.tau)?;
            let nce_mean = nce.mean(&fw.tape);
            let mut total = nce.total;
            let mut aux = None;
            match cfg.method {
                Method::Grl if epoch >= cfg.da_warmup_epochs => {
                    // reversal node → discriminator → domain cross-entropy, per modality
                    let mut ce_sum = 0.0;
                    for (h, modality) in [(hb, Modality::Behavior), (hn, Modality::Neural)] {
                        let r = fw.tape.grad_reverse(h, cfg.lambda_d)?;
                        let logits = m.discriminate(fw, r, modality)?;
                        let ce = domain_cross_entropy(&mut fw.tape, logits, &b.domains)?;
                        ce_sum += f64::from(fw.tape.item(ce));
                        total = fw.tape.add(total, ce)?;
                    }
                    aux = Some(ce_sum / n as f64);
                }
                Method::Mmd => {
                    let mut terms = Vec::new();
                    for h in [hb, hn] {
                        if let Some(v) = mmd_across_domains(&mut fw.tape, h, &b.domains)? {
                            terms.push(v);
                        }
                    }
                    if !terms.is_empty() {
                        let mut s = terms[0];
                        for &t in &terms[1..] {
                            s = fw.tape.add(s, t)?;
                        }
                        aux = Some(f64::from(fw.tape.item(s)));
                        let w = fw.tape.scale(s, cfg.lambda_mmd * n as f64)?;
                        total = fw.tape.add(total, w)?;
                    }
                }
                _ => {}
            }
            Ok((total, Some(nce_mean), aux))
        }
    }
}
