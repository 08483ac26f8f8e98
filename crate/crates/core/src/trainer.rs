//! Training loop: Adam over the patch stream, per-epoch validation DSC,
//! best/final checkpoints and the step log.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{infer_volume, postprocess, InferenceOptions};
use crate::losses::{combined_loss, LossConfig, LossTerms};
use crate::metrics::{dice_coefficient, evaluate_scan, MetricsRow};
use crate::network::{
    save_checkpoint, BnObservation, Gradients, Network, NetworkConfig, Ops, ParamStore, Tape, Tensor,
};
use crate::phantom::{Manifest, Split};
use crate::pipeline::{batch_stream, CaseSource, PatchSample, SamplerConfig, StreamConfig};
use crate::volgrid::{BinaryMask, VolumeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    /// Its `seed` is replaced by the training seed.
    pub sampler: SamplerConfig,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_id: u32,
    pub workers: usize,
    pub patches_per_case: usize,
    pub bn_momentum: f64,
    /// Stop after the first epoch whose validation DSC reaches this value.
    pub early_stop_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            optimizer: AdamConfig::default(),
            epochs: 20,
            steps_per_epoch: 100,
            batch_size: 7,
            seed: 0,
            split_id: 1,
            workers: 1,
            patches_per_case: 7,
            bn_momentum: 0.1,
            early_stop_dsc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.sampler.validate(self.network.size_multiple())?;
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("epochs and steps_per_epoch must be >= 1".into()));
        }
        if self.batch_size == 0 || self.workers == 0 || self.patches_per_case == 0 {
            return Err(Error::Config(
                "batch_size, workers and patches_per_case must be >= 1".into(),
            ));
        }
        if !(1..=3).contains(&self.split_id) {
            return Err(Error::Config(format!(
                "split_id must be 1, 2 or 3, got {}",
                self.split_id
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "bn_momentum {} outside [0, 1]",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Set on the last step of each epoch.
    pub val_dsc: Option<f64>,
}

/// One record per optimizer step. Wall-clock times are kept apart so the
/// step records of two runs can be compared exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Seconds spent in each epoch, validation included.
    pub epoch_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io("<train log>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<TrainLog> {
        let mut r = csv::Reader::from_reader(input);
        let steps = r.deserialize().collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        Ok(TrainLog {
            steps,
            epoch_seconds: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    pub fn val_dsc(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.val_dsc).collect()
    }
}

/// Adam with bias correction; buffers are skipped.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.entries().iter().map(|e| vec![0.0; e.numel()]).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>) {
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step = (c.lr * (1.0 - c.beta2.powi(self.t)).sqrt() / (1.0 - c.beta1.powi(self.t))) as f32;
        let eps = c.eps as f32;
        for (id, g) in grads.iter() {
            let entry = params.get_mut(id);
            if entry.buffer {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((p, &g), m), v) in entry.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Stack patches into a `[n, 1, pz, py, px]` input.
pub fn batch_input(patches: &[PatchSample]) -> Tensor<f32> {
    let [px, py, pz] = patches[0].size;
    let data = patches.iter().flat_map(|p| p.input.iter().copied()).collect();
    Tensor::from_vec(&[patches.len(), 1, pz, py, px], data)
}

struct Forward {
    terms: LossTerms,
    grads: Gradients<f32>,
    observations: Vec<BnObservation>,
}

fn forward_backward(
    net: &Network<f32>,
    loss: &LossConfig,
    patches: &[PatchSample],
    voxel_volume: f64,
) -> Result<Forward> {
    let input = batch_input(patches);
    net.check_input(input.shape())?;
    let mut tape = Tape::new(net.params());
    let x = tape.input(input);
    let y = net.forward(&mut tape, &x);
    let out = tape.value(&y);
    let sp = out.spatial();
    let probs: Vec<f32> = out
        .data()
        .chunks(2 * sp)
        .flat_map(|c| c[sp..].iter().copied())
        .collect();
    let gt: Vec<bool> = patches.iter().flat_map(|p| p.label.iter().copied()).collect();
    let sdf: Vec<f64> = patches.iter().flat_map(|p| p.sdf.iter().map(|&v| v as f64)).collect();
    let (terms, grad) = combined_loss(loss, &probs, &gt, &sdf, voxel_volume)?;
    let mut seed = Tensor::zeros(out.shape());
    for (n, chunk) in seed.data_mut().chunks_mut(2 * sp).enumerate() {
        for (s, g) in chunk[sp..].iter_mut().zip(&grad[n * sp..(n + 1) * sp]) {
            *s = *g as f32;
        }
    }
    let grads = tape.backward(y, seed);
    Ok(Forward {
        terms,
        grads,
        observations: tape.bn_observations().to_vec(),
    })
}

/// Training-mode loss of one batch, without updating anything.
pub fn batch_loss(
    net: &Network<f32>,
    loss: &LossConfig,
    patches: &[PatchSample],
    voxel_volume: f64,
) -> Result<LossTerms> {
    Ok(forward_backward(net, loss, patches, voxel_volume)?.terms)
}

/// One optimizer step; returns the loss before the update.
pub fn train_step(
    net: &mut Network<f32>,
    adam: &mut Adam,
    loss: &LossConfig,
    patches: &[PatchSample],
    voxel_volume: f64,
    bn_momentum: f64,
) -> Result<LossTerms> {
    let f = forward_backward(net, loss, patches, voxel_volume)?;
    if f.terms.total.is_finite() {
        net.update_running_stats(&f.observations, bn_momentum);
        adam.step(net.params_mut(), &f.grads);
    }
    Ok(f.terms)
}

/// A held-out case: normalized volume and its GTV.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    pub volume: VolumeGrid,
    pub gtv: BinaryMask,
}

impl EvalCase {
    pub fn load(manifest: &Manifest, entry: &crate::phantom::ManifestEntry) -> Result<EvalCase> {
        let case = manifest.load_case(entry)?;
        Ok(EvalCase {
            id: entry.id.clone(),
            volume: case.volume.normalized(),
            gtv: case.gtv,
        })
    }
}

/// Mean DSC of the post-processed prediction over `cases`.
pub fn mean_dsc(net: &Network<f32>, cases: &[EvalCase], opts: &InferenceOptions) -> Result<f64> {
    let mut total = 0.0;
    for c in cases {
        let prob = infer_volume(net, &c.volume, opts)?;
        total += dice_coefficient(&postprocess(&prob, 0.5)?, &c.gtv)?;
    }
    Ok(total / cases.len() as f64)
}

/// A scan's metrics row together with its post-processed prediction.
pub struct ScanEvaluation {
    pub row: MetricsRow,
    pub prediction: BinaryMask,
    pub probability: VolumeGrid,
}

/// Infer, post-process and score every case of `split` in the manifest.
/// `label` fills the `split` column of the rows.
pub fn evaluate_split(
    net: &Network<f32>,
    manifest: &Manifest,
    split: Split,
    label: &str,
    opts: &InferenceOptions,
) -> Result<Vec<ScanEvaluation>> {
    let mut out = Vec::new();
    for entry in manifest.split(split) {
        let case = EvalCase::load(manifest, entry)?;
        let probability = infer_volume(net, &case.volume, opts)?;
        let prediction = postprocess(&probability, 0.5)?;
        let metrics = evaluate_scan(&prediction, &case.gtv)?;
        let tags: Vec<String> = entry.tags.iter().map(|t| t.name().to_string()).collect();
        out.push(ScanEvaluation {
            row: MetricsRow::new(&entry.id, label, &tags, &metrics),
            prediction,
            probability,
        });
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub last: Network<f32>,
    pub best: Network<f32>,
    pub best_val_dsc: f64,
    pub best_epoch: usize,
    pub log: TrainLog,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Train on `train` cases, validating on `val` after every epoch. With an
/// output directory, the best and final checkpoints and the log are written
/// there; on divergence the log is still written.
pub fn train_on(
    cfg: &TrainConfig,
    train: CaseSource,
    val: &[EvalCase],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Parameter(
            "training needs non-empty train and validation sets".into(),
        ));
    }
    let voxel_volume = val[0].volume.geometry().voxel_volume();
    let mut net = Network::<f32>::build(&cfg.network, cfg.seed)?;
    let mut adam = Adam::new(cfg.optimizer.clone(), net.params());
    let sampler = SamplerConfig {
        seed: cfg.seed,
        ..cfg.sampler.clone()
    };
    let stream = batch_stream(
        train,
        sampler,
        StreamConfig {
            batch_size: cfg.batch_size,
            patches_per_case: cfg.patches_per_case,
            workers: cfg.workers,
            epochs: None,
        },
    )?;
    let mut stream = stream.peekable();
    let opts = InferenceOptions::default();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Network<f32>)> = None;
    let write_log = |log: &TrainLog| -> Result<()> {
        match out_dir {
            Some(dir) => log.save(&dir.join(TRAIN_LOG)),
            None => Ok(()),
        }
    };

    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        for _ in 0..cfg.steps_per_epoch {
            let batch = stream.next().expect("endless stream")?;
            let terms = train_step(
                &mut net,
                &mut adam,
                &cfg.loss,
                &batch.patches,
                voxel_volume,
                cfg.bn_momentum,
            )?;
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: terms.total,
                val_dsc: None,
            });
            if !terms.total.is_finite() {
                write_log(&log)?;
                return Err(Error::Diverged {
                    step,
                    loss: terms.total,
                });
            }
            step += 1;
        }
        let dsc = mean_dsc(&net, val, &opts)?;
        log.steps.last_mut().expect("one step per epoch").val_dsc = Some(dsc);
        log.epoch_seconds.push(started.elapsed().as_secs_f64());
        log::info!(
            "epoch {epoch}: loss {:.4}, val DSC {dsc:.4} ({:.1} s)",
            log.steps.last().map_or(f64::NAN, |s| s.loss),
            log.epoch_seconds[epoch]
        );
        if best.as_ref().is_none_or(|(b, _, _)| dsc > *b) {
            if let Some(dir) = out_dir {
                save_checkpoint(&net, &dir.join(BEST_CHECKPOINT))?;
            }
            best = Some((dsc, epoch, net.clone()));
        }
        if cfg.early_stop_dsc.is_some_and(|t| dsc >= t) {
            break 'epochs;
        }
    }
    drop(stream);
    if let Some(dir) = out_dir {
        save_checkpoint(&net, &dir.join(FINAL_CHECKPOINT))?;
    }
    write_log(&log)?;
    let (best_val_dsc, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        last: net,
        best,
        best_val_dsc,
        best_epoch,
        log,
    })
}

/// Train on split `cfg.split_id` of a phantom manifest.
pub fn train(cfg: &TrainConfig, manifest: &Manifest, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let m = Arc::new(manifest.resplit(cfg.split_id)?);
    let train_entries: Vec<_> = m.split(Split::Train).cloned().collect();
    let val = m
        .split(Split::Val)
        .map(|e| EvalCase::load(&m, e))
        .collect::<Result<Vec<_>>>()?;
    if train_entries.is_empty() || val.is_empty() {
        return Err(Error::Parameter(format!(
            "split {} has no train or validation cases",
            cfg.split_id
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    train_on(cfg, CaseSource::manifest(m.clone(), train_entries), &val, out_dir)
}

/// Directory for split `k` under a protocol run directory.
pub fn split_dir(root: &Path, split_id: u32) -> PathBuf {
    root.join(format!("split{split_id}"))
}
