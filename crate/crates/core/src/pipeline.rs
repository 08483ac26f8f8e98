//! Patch sampling, noise augmentation and the concurrent batch stream.
//!
//! The stream has three stages connected by bounded channels: a fetch
//! thread that loads cases and plans the jobs of each epoch, extraction
//! workers that crop and augment patches, and a feed stage that reorders
//! finished patches by job number and groups them into batches. Because
//! every job carries its own seed and the feed stage restores job order, the
//! batch sequence does not depend on the number of workers.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use crossbeam_channel::{bounded, Receiver, Sender};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::signed_distance_map;
use crate::phantom::{Manifest, ManifestEntry, PhantomCase};
use crate::volgrid::{normalize_intensity, Geometry, HU_WINDOW};

/// Voxels above this intensity count as body when drawing background
/// patch centers (everything except the air around the patient).
const BODY_THRESHOLD_HU: f32 = -950.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Patch size `(px, py, pz)` in voxels.
    pub patch_size: [usize; 3],
    /// Probability that a patch is centered on a GTV voxel.
    pub tumor_fraction: f64,
    /// Upper bound of the per-patch noise std σ′, in HU.
    pub noise_sigma_max_hu: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_size: [72, 72, 24],
            tumor_fraction: 0.5,
            noise_sigma_max_hu: 5.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, size_multiple: usize) -> Result<()> {
        if self.patch_size.iter().any(|&p| p == 0 || p % size_multiple != 0) {
            return Err(Error::Config(format!(
                "patch size {:?} must be positive multiples of {size_multiple}",
                self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.tumor_fraction) {
            return Err(Error::Config(format!(
                "tumor_fraction {} outside [0, 1]",
                self.tumor_fraction
            )));
        }
        if !(self.noise_sigma_max_hu.is_finite() && self.noise_sigma_max_hu >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma_max_hu must be >= 0, got {}",
                self.noise_sigma_max_hu
            )));
        }
        Ok(())
    }

    /// σ′ bound in normalized intensity units.
    pub fn noise_sigma_max(&self) -> f64 {
        self.noise_sigma_max_hu / (HU_WINDOW.1 - HU_WINDOW.0) as f64
    }
}

/// A case prepared for patch extraction: normalized intensities, the GTV,
/// its signed distance field and the voxel lists patch centers are drawn from.
#[derive(Debug, Clone)]
pub struct TrainingCase {
    pub id: String,
    pub geom: Geometry,
    pub input: Vec<f32>,
    pub label: Vec<bool>,
    pub sdf: Vec<f32>,
    gtv_voxels: Vec<u32>,
    body_voxels: Vec<u32>,
}

impl TrainingCase {
    pub fn prepare(id: impl Into<String>, case: &PhantomCase) -> Result<TrainingCase> {
        let geom = *case.volume.geometry();
        let sdf = signed_distance_map(&case.gtv)?;
        let raw = case.volume.voxels();
        Ok(TrainingCase {
            id: id.into(),
            geom,
            input: raw.iter().map(|&v| normalize_intensity(v)).collect(),
            label: case.gtv.voxels().to_vec(),
            sdf: sdf.values().iter().map(|&v| v as f32).collect(),
            gtv_voxels: (0..raw.len() as u32)
                .filter(|&i| case.gtv.voxels()[i as usize])
                .collect(),
            body_voxels: (0..raw.len() as u32)
                .filter(|&i| raw[i as usize] > BODY_THRESHOLD_HU)
                .collect(),
        })
    }

    pub fn load(manifest: &Manifest, entry: &ManifestEntry) -> Result<TrainingCase> {
        TrainingCase::prepare(entry.id.clone(), &manifest.load_case(entry)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub size: [usize; 3],
    /// Normalized intensities, x fastest.
    pub input: Vec<f32>,
    pub label: Vec<bool>,
    /// Signed distance (mm) to the case's GTV boundary.
    pub sdf: Vec<f32>,
    pub scan_id: String,
    /// Index of the patch's first voxel in the source grid; may be negative
    /// or overhang the far side, where the patch is padded.
    pub corner: [i64; 3],
    pub seed: u64,
    /// Noise std σ′ applied by augmentation (normalized units).
    pub noise_sigma: f64,
}

/// Crop a patch whose first voxel sits at `corner`. Intensities and labels
/// are zero-padded outside the source; the distance field repeats its edge
/// value.
pub fn extract_patch(case: &TrainingCase, size: [usize; 3], corner: [i64; 3], seed: u64) -> PatchSample {
    let [nx, ny, nz] = case.geom.dims;
    let n = size[0] * size[1] * size[2];
    let mut input = vec![0.0f32; n];
    let mut label = vec![false; n];
    let mut sdf = vec![0.0f32; n];
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut o = 0;
    for k in 0..size[2] {
        let z = corner[2] + k as i64;
        let zin = (0..nz as i64).contains(&z);
        for j in 0..size[1] {
            let y = corner[1] + j as i64;
            let yin = (0..ny as i64).contains(&y);
            for i in 0..size[0] {
                let x = corner[0] + i as i64;
                let xin = (0..nx as i64).contains(&x);
                let src = case.geom.index(clamp(x, nx), clamp(y, ny), clamp(z, nz));
                if xin && yin && zin {
                    input[o] = case.input[src];
                    label[o] = case.label[src];
                }
                sdf[o] = case.sdf[src];
                o += 1;
            }
        }
    }
    PatchSample {
        size,
        input,
        label,
        sdf,
        scan_id: case.id.clone(),
        corner,
        seed,
        noise_sigma: 0.0,
    }
}

/// Draw a patch center (GTV voxel with probability `tumor_fraction`, body
/// voxel otherwise) and crop the patch around it.
pub fn sample_patch(case: &TrainingCase, cfg: &SamplerConfig, rng: &mut impl Rng, seed: u64) -> Result<PatchSample> {
    let tumor = rng.random_bool(cfg.tumor_fraction);
    let pool = if tumor { &case.gtv_voxels } else { &case.body_voxels };
    if pool.is_empty() {
        return Err(Error::Sampling(format!(
            "{}: no {} voxel to center a patch on",
            case.id,
            if tumor { "GTV" } else { "body" }
        )));
    }
    let c = case.geom.coords(pool[rng.random_range(0..pool.len())] as usize);
    let corner = [0, 1, 2].map(|a| c[a] as i64 - (cfg.patch_size[a] / 2) as i64);
    Ok(extract_patch(case, cfg.patch_size, corner, seed))
}

/// Add i.i.d. `N(0, sigma)` noise to the input. The label is untouched.
pub fn add_gaussian_noise(patch: &mut PatchSample, sigma: f64, rng: &mut impl Rng) {
    patch.noise_sigma = sigma;
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in &mut patch.input {
        *v += normal.sample(rng) as f32;
    }
}

/// Draw σ′ ~ U(0, sigma_max) once and add `N(0, σ′)` noise, in the units of
/// the input.
pub fn augment_gaussian_noise(mut patch: PatchSample, sigma_max: f64, rng: &mut impl Rng) -> PatchSample {
    let sigma = if sigma_max > 0.0 {
        rng.random_range(0.0..sigma_max)
    } else {
        0.0
    };
    add_gaussian_noise(&mut patch, sigma, rng);
    patch
}

/// Sample and augment the patch of one job; the result is a pure function
/// of `(case, cfg, seed)`.
pub fn make_patch(case: &TrainingCase, cfg: &SamplerConfig, seed: u64) -> Result<PatchSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch = sample_patch(case, cfg, &mut rng, seed)?;
    Ok(augment_gaussian_noise(patch, cfg.noise_sigma_max(), &mut rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub epoch: usize,
    /// Batch number within its epoch.
    pub index: usize,
    pub patches: Vec<PatchSample>,
    /// Set on the final, incomplete batch of an epoch.
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamConfig {
    pub batch_size: usize,
    pub patches_per_case: usize,
    pub workers: usize,
    /// Number of epochs to produce; `None` streams until dropped.
    pub epochs: Option<usize>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            batch_size: 7,
            patches_per_case: 7,
            workers: 1,
            epochs: None,
        }
    }
}

/// Where the fetch stage gets cases from.
#[derive(Clone)]
pub enum CaseSource {
    Memory(Arc<Vec<Arc<TrainingCase>>>),
    /// Loaded from disk on first use and kept in RAM.
    Manifest {
        manifest: Arc<Manifest>,
        entries: Vec<ManifestEntry>,
        cache: Arc<Mutex<Vec<Option<Arc<TrainingCase>>>>>,
    },
}

impl CaseSource {
    pub fn memory(cases: Vec<TrainingCase>) -> Self {
        CaseSource::Memory(Arc::new(cases.into_iter().map(Arc::new).collect()))
    }

    pub fn manifest(manifest: Arc<Manifest>, entries: Vec<ManifestEntry>) -> Self {
        let cache = Arc::new(Mutex::new(vec![None; entries.len()]));
        CaseSource::Manifest {
            manifest,
            entries,
            cache,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            CaseSource::Memory(c) => c.len(),
            CaseSource::Manifest { entries, .. } => entries.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<Arc<TrainingCase>> {
        match self {
            CaseSource::Memory(c) => Ok(c[i].clone()),
            CaseSource::Manifest {
                manifest,
                entries,
                cache,
            } => {
                if let Some(c) = &cache.lock().expect("cache lock")[i] {
                    return Ok(c.clone());
                }
                let case = Arc::new(TrainingCase::load(manifest, &entries[i])?);
                cache.lock().expect("cache lock")[i] = Some(case.clone());
                Ok(case)
            }
        }
    }
}

/// `(case index, patch seed)` for every job of an epoch, in feed order.
pub fn epoch_jobs(seed: u64, epoch: usize, n_cases: usize, patches_per_case: usize) -> Vec<(usize, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n_cases).collect();
    order.shuffle(&mut rng);
    let mut jobs = Vec::with_capacity(n_cases * patches_per_case);
    for &c in &order {
        for _ in 0..patches_per_case {
            jobs.push((c, rng.random()));
        }
    }
    jobs
}

struct Job {
    epoch: usize,
    seq: usize,
    last: bool,
    case: Arc<TrainingCase>,
    seed: u64,
}

struct Done {
    epoch: usize,
    seq: usize,
    last: bool,
    patch: Result<PatchSample>,
}

/// Iterator over batches; dropping it stops the worker threads.
pub struct BatchStream {
    rx: Option<Receiver<Result<Batch>>>,
    handles: Vec<JoinHandle<()>>,
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        // Closing the output channel makes every stage fail its next send.
        self.rx.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

pub fn batch_stream(source: CaseSource, sampler: SamplerConfig, cfg: StreamConfig) -> Result<BatchStream> {
    if source.is_empty() {
        return Err(Error::Sampling("no cases to stream from".into()));
    }
    if cfg.batch_size == 0 || cfg.patches_per_case == 0 || cfg.workers == 0 {
        return Err(Error::Config(
            "batch size, patches per case and workers must be positive".into(),
        ));
    }
    let depth = 2 * cfg.batch_size;
    let (job_tx, job_rx) = bounded::<Job>(depth);
    let (done_tx, done_rx) = bounded::<Done>(depth);
    let (out_tx, out_rx) = bounded::<Result<Batch>>(2);
    let mut handles = Vec::new();

    let fetch_out = out_tx.clone();
    let fetch_cfg = cfg.clone();
    let seed = sampler.seed;
    handles.push(thread::spawn(move || {
        fetch_stage(source, seed, fetch_cfg, job_tx, fetch_out)
    }));

    let sampler = Arc::new(sampler);
    for _ in 0..cfg.workers {
        let rx = job_rx.clone();
        let tx = done_tx.clone();
        let sampler = sampler.clone();
        handles.push(thread::spawn(move || {
            for job in rx {
                let patch = make_patch(&job.case, &sampler, job.seed);
                let done = Done {
                    epoch: job.epoch,
                    seq: job.seq,
                    last: job.last,
                    patch,
                };
                if tx.send(done).is_err() {
                    return;
                }
            }
        }));
    }
    drop((job_rx, done_tx));

    let batch_size = cfg.batch_size;
    handles.push(thread::spawn(move || feed_stage(done_rx, batch_size, out_tx)));
    Ok(BatchStream {
        rx: Some(out_rx),
        handles,
    })
}

fn fetch_stage(source: CaseSource, seed: u64, cfg: StreamConfig, jobs: Sender<Job>, errors: Sender<Result<Batch>>) {
    let mut epoch = 0;
    while cfg.epochs.is_none_or(|n| epoch < n) {
        let plan = epoch_jobs(seed, epoch, source.len(), cfg.patches_per_case);
        let count = plan.len();
        for (seq, (c, s)) in plan.into_iter().enumerate() {
            let case = match source.get(c) {
                Ok(case) => case,
                Err(e) => {
                    let _ = errors.send(Err(e));
                    return;
                }
            };
            let job = Job {
                epoch,
                seq,
                last: seq + 1 == count,
                case,
                seed: s,
            };
            if jobs.send(job).is_err() {
                return;
            }
        }
        epoch += 1;
    }
}

fn feed_stage(done: Receiver<Done>, batch_size: usize, out: Sender<Result<Batch>>) {
    let mut pending: BTreeMap<(usize, usize), Done> = BTreeMap::new();
    let mut next = (0usize, 0usize);
    let mut current: Vec<PatchSample> = Vec::with_capacity(batch_size);
    let mut index = 0;
    for d in done {
        pending.insert((d.epoch, d.seq), d);
        while let Some(d) = pending.remove(&next) {
            let patch = match d.patch {
                Ok(p) => p,
                Err(e) => {
                    let _ = out.send(Err(e));
                    return;
                }
            };
            current.push(patch);
            if current.len() == batch_size || d.last {
                let batch = Batch {
                    epoch: d.epoch,
                    index,
                    short: current.len() < batch_size,
                    patches: std::mem::replace(&mut current, Vec::with_capacity(batch_size)),
                };
                if out.send(Ok(batch)).is_err() {
                    return;
                }
                index += 1;
            }
            if d.last {
                next = (d.epoch + 1, 0);
                index = 0;
            } else {
                next.1 += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn case() -> TrainingCase {
        let spec = PhantomSpec {
            dims: [32, 32, 16],
            tumor_radius_mm: 6.0,
            esophagus_radius_mm: 3.0,
            curvature_amplitude_mm: 1.0,
            tumor_length_mm: 15.0,
            ..PhantomSpec::default()
        };
        TrainingCase::prepare("c0", &generate_phantom(&spec).unwrap()).unwrap()
    }

    #[test]
    fn tumor_centered_patches_have_tumor_center() {
        let c = case();
        let cfg = SamplerConfig {
            patch_size: [8, 8, 4],
            tumor_fraction: 1.0,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = sample_patch(&c, &cfg, &mut rng, 0).unwrap();
            assert!(p.label[4 + 8 * (4 + 8 * 2)]);
        }
    }

    #[test]
    fn interior_patch_is_a_plain_crop() {
        let c = case();
        let p = extract_patch(&c, [4, 4, 4], [3, 5, 7], 0);
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let src = c.geom.index(3 + i, 5 + j, 7 + k);
                    let dst = i + 4 * (j + 4 * k);
                    assert_eq!(p.input[dst], c.input[src]);
                    assert_eq!(p.label[dst], c.label[src]);
                    assert_eq!(p.sdf[dst], c.sdf[src]);
                }
            }
        }
    }

    #[test]
    fn overhang_pads_with_zeros() {
        let c = case();
        // Source z extent is 16; a 4-slice patch starting at 14 overhangs by 2.
        let p = extract_patch(&c, [4, 4, 4], [10, 10, 14], 0);
        let slice = 16;
        for k in 0..4 {
            for v in &p.input[k * slice..(k + 1) * slice] {
                if k >= 2 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
        assert!(p.input[..2 * slice].iter().any(|v| *v != 0.0));
        assert_eq!(p.sdf[3 * slice], c.sdf[c.geom.index(10, 10, 15)]);
    }

    #[test]
    fn empty_gtv_is_a_sampling_error() {
        let mut c = case();
        c.gtv_voxels.clear();
        let cfg = SamplerConfig {
            tumor_fraction: 1.0,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_patch(&c, &cfg, &mut rng, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn zero_noise_is_identity_and_labels_never_change() {
        let c = case();
        let p = extract_patch(&c, [8, 8, 4], [4, 4, 4], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = augment_gaussian_noise(p.clone(), 0.0, &mut rng);
        assert_eq!(q.input, p.input);
        let r = augment_gaussian_noise(p.clone(), 0.5, &mut rng);
        assert_eq!(r.label, p.label);
        assert_ne!(r.input, p.input);
    }

    #[test]
    fn fourteen_patches_make_two_batches() {
        let src = CaseSource::memory(vec![case(), case()]);
        let sampler = SamplerConfig {
            patch_size: [8, 8, 4],
            ..SamplerConfig::default()
        };
        let cfg = StreamConfig {
            batch_size: 7,
            patches_per_case: 7,
            workers: 2,
            epochs: Some(1),
        };
        let batches: Vec<Batch> = batch_stream(src, sampler, cfg).unwrap().map(|b| b.unwrap()).collect();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.patches.len() == 7 && !b.short));
    }

    #[test]
    fn short_final_batch_is_flagged() {
        let src = CaseSource::memory(vec![case()]);
        let sampler = SamplerConfig {
            patch_size: [8, 8, 4],
            ..SamplerConfig::default()
        };
        let cfg = StreamConfig {
            batch_size: 4,
            patches_per_case: 6,
            workers: 1,
            epochs: Some(2),
        };
        let batches: Vec<Batch> = batch_stream(src, sampler, cfg).unwrap().map(|b| b.unwrap()).collect();
        let shape: Vec<(usize, usize, usize, bool)> = batches
            .iter()
            .map(|b| (b.epoch, b.index, b.patches.len(), b.short))
            .collect();
        assert_eq!(
            shape,
            [(0, 0, 4, false), (0, 1, 2, true), (1, 0, 4, false), (1, 1, 2, true)]
        );
    }

    #[test]
    fn dropping_an_endless_stream_stops_it() {
        let src = CaseSource::memory(vec![case()]);
        let sampler = SamplerConfig {
            patch_size: [8, 8, 4],
            ..SamplerConfig::default()
        };
        let mut s = batch_stream(src, sampler, StreamConfig::default()).unwrap();
        assert!(s.next().unwrap().is_ok());
        drop(s);
    }
}
