//! Synthetic CT-like phantoms of a thoracic cross-section with an esophageal
//! tumor and ground-truth GTV mask.
//!
//! Axes: x left-right, y anterior-posterior, z caudal (0) to cranial (high).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{load_mask, load_scalar, BinaryMask, Geometry, VolumeGrid, WORKING_SPACING};

/// Geometry and intensity constants of the phantom anatomy.
pub mod constants {
    pub const BODY_HU: f32 = 0.0;
    pub const AIR_HU: f32 = -1000.0;
    pub const LUNG_HU: f32 = -800.0;
    pub const ESOPHAGUS_HU: f32 = 40.0;
    pub const FEEDING_TUBE_HU: f32 = 500.0;
    pub const DEFAULT_TUMOR_CONTRAST_HU: f32 = 20.0;
    pub const DEFAULT_NOISE_HU: f64 = 10.0;

    /// Body ellipse semi-axes as fractions of the in-plane extent.
    pub const BODY_SEMI_AXES: [f64; 2] = [0.46, 0.40];
    /// Lung ellipse centers (x offset ±, y offset) and semi-axes, as fractions
    /// of the in-plane extent relative to the volume center.
    pub const LUNG_CENTER: [f64; 2] = [0.25, -0.04];
    pub const LUNG_SEMI_AXES: [f64; 2] = [0.11, 0.24];
    /// Esophagus resting position (y offset from the center, posterior).
    pub const ESOPHAGUS_Y: f64 = 0.08;
    /// Sinusoid period of the centerline as a fraction of the z extent.
    pub const CENTERLINE_PERIOD: f64 = 0.9;
    /// Air pocket radius and length relative to the esophagus radius and
    /// tumor length.
    pub const AIR_POCKET_RADIUS: f64 = 0.5;
    pub const AIR_POCKET_LENGTH: f64 = 0.5;
    pub const FEEDING_TUBE_RADIUS_MM: f64 = 1.2;
    /// Feeding tube offset from the centerline relative to the esophagus radius.
    pub const FEEDING_TUBE_OFFSET: f64 = 0.35;
    /// Lateral displacement for the `dislocated` and `hiatal_hernia` tags.
    pub const DISLOCATION_MM: f64 = 8.0;
    pub const HERNIA_OFFSET_MM: f64 = 2.0;
    /// Tumors at least this long carry the `large_gtv` tag.
    pub const LARGE_GTV_MM: f64 = 50.0;
    /// Tumor centers below / above these height fractions are junction /
    /// proximal tumors.
    pub const JUNCTION_BELOW: f64 = 0.3;
    pub const PROXIMAL_ABOVE: f64 = 0.7;
}

use constants::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    AirPocket,
    FeedingTube,
    JunctionTumor,
    LargeGtv,
    HiatalHernia,
    Dislocated,
    Proximal,
}

impl Tag {
    pub const ALL: [Tag; 7] = [
        Tag::AirPocket,
        Tag::FeedingTube,
        Tag::JunctionTumor,
        Tag::LargeGtv,
        Tag::HiatalHernia,
        Tag::Dislocated,
        Tag::Proximal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tag::AirPocket => "air_pocket",
            Tag::FeedingTube => "feeding_tube",
            Tag::JunctionTumor => "junction_tumor",
            Tag::LargeGtv => "large_gtv",
            Tag::HiatalHernia => "hiatal_hernia",
            Tag::Dislocated => "dislocated",
            Tag::Proximal => "proximal",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Tumor center height as a fraction of the z extent.
    pub tumor_center_z: f64,
    pub tumor_length_mm: f64,
    pub tumor_radius_mm: f64,
    pub esophagus_radius_mm: f64,
    pub curvature_amplitude_mm: f64,
    /// Phase of the centerline sinusoid, radians.
    pub curvature_phase: f64,
    /// In-plane shift of the esophagus from its resting position.
    pub esophagus_offset_mm: [f64; 2],
    /// In-plane shift of the tumor axis from the esophagus centerline.
    pub tumor_offset_mm: [f64; 2],
    pub tumor_contrast_hu: f32,
    pub has_air_pocket: bool,
    pub has_feeding_tube: bool,
    pub tags: BTreeSet<Tag>,
    pub noise_hu: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [96, 96, 48],
            spacing: WORKING_SPACING,
            tumor_center_z: 0.5,
            tumor_length_mm: 30.0,
            tumor_radius_mm: 9.0,
            esophagus_radius_mm: 4.0,
            curvature_amplitude_mm: 3.0,
            curvature_phase: 0.0,
            esophagus_offset_mm: [0.0, 0.0],
            tumor_offset_mm: [0.0, 0.0],
            tumor_contrast_hu: DEFAULT_TUMOR_CONTRAST_HU,
            has_air_pocket: false,
            has_feeding_tube: false,
            tags: BTreeSet::new(),
            noise_hu: DEFAULT_NOISE_HU,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, [0.0; 3]).map_err(|e| Error::Spec(e.to_string()))
    }

    /// Tumor z range `[lo, hi)` in mm.
    pub fn tumor_z_range(&self) -> (f64, f64) {
        let zc = self.tumor_center_z * self.dims[2] as f64 * self.spacing[2];
        (zc - self.tumor_length_mm / 2.0, zc + self.tumor_length_mm / 2.0)
    }

    /// Esophagus centerline (x, y) in mm at height `z` mm.
    pub fn centerline(&self, z: f64) -> [f64; 2] {
        let w = self.dims[0] as f64 * self.spacing[0];
        let h = self.dims[1] as f64 * self.spacing[1];
        let period = CENTERLINE_PERIOD * self.dims[2] as f64 * self.spacing[2];
        let t = 2.0 * std::f64::consts::PI * z / period + self.curvature_phase;
        [
            w / 2.0 + self.esophagus_offset_mm[0] + self.curvature_amplitude_mm * t.sin(),
            h / 2.0 + ESOPHAGUS_Y * h + self.esophagus_offset_mm[1] + 0.5 * self.curvature_amplitude_mm * t.cos(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let geom = self.geometry()?;
        let finite = [
            self.tumor_center_z,
            self.tumor_length_mm,
            self.tumor_radius_mm,
            self.esophagus_radius_mm,
            self.curvature_amplitude_mm,
            self.curvature_phase,
            self.noise_hu,
            self.tumor_contrast_hu as f64,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Spec("all spec values must be finite".into()));
        }
        if !(0.1..=0.9).contains(&self.tumor_center_z) {
            return Err(Error::Spec(format!(
                "tumor_center_z {} outside [0.1, 0.9]",
                self.tumor_center_z
            )));
        }
        if self.tumor_length_mm <= 0.0 || self.esophagus_radius_mm <= 0.0 {
            return Err(Error::Spec("tumor length and esophagus radius must be positive".into()));
        }
        if self.tumor_radius_mm <= self.esophagus_radius_mm {
            return Err(Error::Spec(format!(
                "tumor radius {} must exceed esophagus radius {}",
                self.tumor_radius_mm, self.esophagus_radius_mm
            )));
        }
        let in_plane = self.spacing[0].max(self.spacing[1]);
        if self.tumor_radius_mm < 2.0 * in_plane {
            return Err(Error::Spec(format!(
                "tumor radius {} mm is under two in-plane voxels",
                self.tumor_radius_mm
            )));
        }
        if self.curvature_amplitude_mm < 0.0 || self.noise_hu < 0.0 {
            return Err(Error::Spec("curvature amplitude and noise must be >= 0".into()));
        }
        let off = self.tumor_offset_mm[0].hypot(self.tumor_offset_mm[1]);
        if off + self.esophagus_radius_mm >= self.tumor_radius_mm {
            return Err(Error::Spec(
                "tumor offset pushes the esophagus outside the tumor".into(),
            ));
        }
        for (tag, flag) in [
            (Tag::AirPocket, self.has_air_pocket),
            (Tag::FeedingTube, self.has_feeding_tube),
        ] {
            if self.tags.contains(&tag) != flag {
                return Err(Error::Spec(format!("tag {tag} does not match its flag ({flag})")));
            }
        }
        let ext = geom.extent();
        let (z0, z1) = self.tumor_z_range();
        if z0 < 0.0 || z1 > ext[2] - self.spacing[2] * 0.5 {
            return Err(Error::Spec(format!(
                "tumor z range [{z0:.1}, {z1:.1}) mm outside the volume (0 to {:.1} mm)",
                ext[2]
            )));
        }
        // The tumor cross-section must fit in-plane at every slice it covers.
        let last = (geom.dims[0] - 1) as f64 * self.spacing[0];
        let lasty = (geom.dims[1] - 1) as f64 * self.spacing[1];
        for k in 0..geom.dims[2] {
            let z = k as f64 * self.spacing[2];
            if z < z0 || z >= z1 {
                continue;
            }
            let c = self.tumor_axis(z);
            let r = self.tumor_radius_mm;
            if c[0] - r < 0.0 || c[0] + r > last || c[1] - r < 0.0 || c[1] + r > lasty {
                return Err(Error::Spec(format!("tumor leaves the volume in-plane at slice {k}")));
            }
        }
        Ok(())
    }

    fn tumor_axis(&self, z: f64) -> [f64; 2] {
        let c = self.centerline(z);
        [c[0] + self.tumor_offset_mm[0], c[1] + self.tumor_offset_mm[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub volume: VolumeGrid,
    pub gtv: BinaryMask,
    pub spec: PhantomSpec,
}

fn inside_ellipse(p: [f64; 2], c: [f64; 2], semi: [f64; 2]) -> bool {
    let dx = (p[0] - c[0]) / semi[0];
    let dy = (p[1] - c[1]) / semi[1];
    dx * dx + dy * dy <= 1.0
}

fn within(p: [f64; 2], c: [f64; 2], r: f64) -> bool {
    let dx = p[0] - c[0];
    let dy = p[1] - c[1];
    dx * dx + dy * dy <= r * r
}

/// Render a phantom. Intensities are painted back to front: air, body,
/// lungs, esophagus, tumor, then the air pocket and feeding tube.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let geom = spec.geometry()?;
    let [nx, ny, nz] = geom.dims;
    let [sx, sy, sz] = geom.spacing;
    let w = nx as f64 * sx;
    let h = ny as f64 * sy;
    let center = [w / 2.0, h / 2.0];
    let body = [BODY_SEMI_AXES[0] * w, BODY_SEMI_AXES[1] * h];
    let lung_semi = [LUNG_SEMI_AXES[0] * w, LUNG_SEMI_AXES[1] * h];
    let lungs = [-1.0, 1.0].map(|side| [center[0] + side * LUNG_CENTER[0] * w, center[1] + LUNG_CENTER[1] * h]);
    let (tz0, tz1) = spec.tumor_z_range();
    let air_half = AIR_POCKET_LENGTH * spec.tumor_length_mm / 2.0;
    let tz_mid = (tz0 + tz1) / 2.0;
    let tumor_hu = ESOPHAGUS_HU + spec.tumor_contrast_hu;
    // Air pocket and feeding tube sit on opposite sides of the centerline
    // when both are present.
    let tube_shift = FEEDING_TUBE_OFFSET * spec.esophagus_radius_mm;
    let air_shift = if spec.has_feeding_tube { -0.5 * tube_shift } else { 0.0 };

    let mut hu = vec![AIR_HU; geom.len()];
    let mut gtv = vec![false; geom.len()];
    for k in 0..nz {
        let z = k as f64 * sz;
        let c = spec.centerline(z);
        let t = spec.tumor_axis(z);
        let in_tumor_z = z >= tz0 && z < tz1;
        for j in 0..ny {
            for i in 0..nx {
                let p = [i as f64 * sx, j as f64 * sy];
                let idx = geom.index(i, j, k);
                let mut v = AIR_HU;
                if inside_ellipse(p, center, body) {
                    v = BODY_HU;
                }
                if lungs.iter().any(|&l| inside_ellipse(p, l, lung_semi)) {
                    v = LUNG_HU;
                }
                if within(p, c, spec.esophagus_radius_mm) {
                    v = ESOPHAGUS_HU;
                }
                if in_tumor_z && within(p, t, spec.tumor_radius_mm) {
                    v = tumor_hu;
                    gtv[idx] = true;
                }
                if spec.has_air_pocket
                    && (z - tz_mid).abs() <= air_half
                    && within(
                        p,
                        [c[0] + air_shift, c[1]],
                        AIR_POCKET_RADIUS * spec.esophagus_radius_mm,
                    )
                {
                    v = AIR_HU;
                }
                if spec.has_feeding_tube && within(p, [c[0] + tube_shift, c[1]], FEEDING_TUBE_RADIUS_MM) {
                    v = FEEDING_TUBE_HU;
                }
                hu[idx] = v;
            }
        }
    }
    if spec.noise_hu > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_hu).map_err(|e| Error::Spec(e.to_string()))?;
        for v in &mut hu {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    let volume = VolumeGrid::new(geom, hu)?;
    let gtv = BinaryMask::new(geom, gtv)?;
    if gtv.count() == 0 {
        return Err(Error::Spec("tumor covers no voxel centers".into()));
    }
    Ok(PhantomCase {
        volume,
        gtv,
        spec: spec.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Randomized corpus settings. Ranges are `[lo, hi]` in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n: usize,
    pub split_fractions: [f64; 3],
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub noise_hu: f64,
    pub tumor_contrast_hu: f32,
    pub tumor_length_mm: [f64; 2],
    pub large_tumor_length_mm: [f64; 2],
    pub tumor_radius_mm: [f64; 2],
    pub esophagus_radius_mm: [f64; 2],
    pub curvature_amplitude_mm: [f64; 2],
    pub air_pocket_prevalence: f64,
    pub feeding_tube_prevalence: f64,
    pub large_gtv_prevalence: f64,
    pub hiatal_hernia_prevalence: f64,
    pub dislocated_prevalence: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n: 100,
            split_fractions: [0.6, 0.2, 0.2],
            seed: 0,
            dims: [96, 96, 48],
            spacing: WORKING_SPACING,
            noise_hu: DEFAULT_NOISE_HU,
            tumor_contrast_hu: DEFAULT_TUMOR_CONTRAST_HU,
            tumor_length_mm: [15.0, 45.0],
            large_tumor_length_mm: [50.0, 70.0],
            tumor_radius_mm: [7.0, 11.0],
            esophagus_radius_mm: [3.5, 5.0],
            curvature_amplitude_mm: [0.0, 4.0],
            air_pocket_prevalence: 0.3,
            feeding_tube_prevalence: 0.15,
            large_gtv_prevalence: 0.15,
            hiatal_hernia_prevalence: 0.1,
            dislocated_prevalence: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Parameter(format!(
                "a corpus needs at least 3 cases, got {}",
                self.n
            )));
        }
        let f = self.split_fractions;
        if f.iter().any(|v| !(v.is_finite() && *v > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "split fractions must be positive and sum to 1, got {f:?}"
            )));
        }
        for p in [
            self.air_pocket_prevalence,
            self.feeding_tube_prevalence,
            self.large_gtv_prevalence,
            self.hiatal_hernia_prevalence,
            self.dislocated_prevalence,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("prevalence {p} outside [0, 1]")));
            }
        }
        for r in [
            self.tumor_length_mm,
            self.large_tumor_length_mm,
            self.tumor_radius_mm,
            self.esophagus_radius_mm,
            self.curvature_amplitude_mm,
        ] {
            if !(r[0] <= r[1] && r[0] >= 0.0) {
                return Err(Error::Parameter(format!("bad range {r:?}")));
            }
        }
        Ok(())
    }

    /// Split sizes `(train, val, test)`; every split gets at least one case.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n;
        let train = ((n as f64 * self.split_fractions[0]).round() as usize).clamp(1, n - 2);
        let val = ((n as f64 * self.split_fractions[1]).round() as usize).clamp(1, n - train - 1);
        (train, val, n - train - val)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Draw one random spec. Positional tags are derived from the drawn
/// geometry so they always agree with it.
fn random_spec(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<PhantomSpec> {
    let mut tags = BTreeSet::new();
    let large = rng.random_bool(cfg.large_gtv_prevalence);
    let has_air_pocket = rng.random_bool(cfg.air_pocket_prevalence);
    let has_feeding_tube = rng.random_bool(cfg.feeding_tube_prevalence);
    let hernia = rng.random_bool(cfg.hiatal_hernia_prevalence);
    let dislocated = rng.random_bool(cfg.dislocated_prevalence);
    let z_extent = cfg.dims[2] as f64 * cfg.spacing[2];
    let length = uniform(
        rng,
        if large {
            cfg.large_tumor_length_mm
        } else {
            cfg.tumor_length_mm
        },
    );
    let length = length.min(0.7 * z_extent);
    let esophagus_radius = uniform(rng, cfg.esophagus_radius_mm);
    let tumor_radius = uniform(rng, cfg.tumor_radius_mm).max(esophagus_radius + HERNIA_OFFSET_MM + 1.0);
    let half = length / 2.0 / z_extent;
    let lo = (half + 0.02).max(0.1);
    let hi = (1.0 - half - 0.05).min(0.9);
    let center = if lo < hi { rng.random_range(lo..hi) } else { 0.5 };
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let spec_seed = rng.random();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amplitude = uniform(rng, cfg.curvature_amplitude_mm);
    if length >= LARGE_GTV_MM {
        tags.insert(Tag::LargeGtv);
    }
    if center < JUNCTION_BELOW {
        tags.insert(Tag::JunctionTumor);
    }
    if center > PROXIMAL_ABOVE {
        tags.insert(Tag::Proximal);
    }
    if has_air_pocket {
        tags.insert(Tag::AirPocket);
    }
    if has_feeding_tube {
        tags.insert(Tag::FeedingTube);
    }
    if hernia {
        tags.insert(Tag::HiatalHernia);
    }
    if dislocated {
        tags.insert(Tag::Dislocated);
    }
    Ok(PhantomSpec {
        dims: cfg.dims,
        spacing: cfg.spacing,
        tumor_center_z: center,
        tumor_length_mm: length,
        tumor_radius_mm: tumor_radius,
        esophagus_radius_mm: esophagus_radius,
        curvature_amplitude_mm: amplitude,
        curvature_phase: phase,
        esophagus_offset_mm: [if dislocated { side * DISLOCATION_MM } else { 0.0 }, 0.0],
        tumor_offset_mm: if hernia { [0.0, HERNIA_OFFSET_MM] } else { [0.0, 0.0] },
        tumor_contrast_hu: cfg.tumor_contrast_hu,
        has_air_pocket,
        has_feeding_tube,
        tags,
        noise_hu: cfg.noise_hu,
        seed: spec_seed,
    })
}

/// Specs and split assignment of a corpus, without rendering anything.
/// Test cases come last so that re-splitting train and validation never
/// touches the test set.
pub fn corpus_specs(cfg: &CorpusConfig) -> Result<Vec<(PhantomSpec, Split)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, val, _) = cfg.split_sizes();
    (0..cfg.n)
        .map(|i| {
            let spec = random_spec(cfg, &mut rng)?;
            spec.validate()?;
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            Ok((spec, split))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Volume file, relative to the manifest directory.
    pub path: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub tags: BTreeSet<Tag>,
    pub seed: u64,
    pub spec: PhantomSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub corpus: CorpusConfig,
    pub cases: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn load_case(&self, entry: &ManifestEntry) -> Result<PhantomCase> {
        let volume = load_scalar(self.root.join(&entry.path))?;
        let gtv = load_mask(self.root.join(&entry.mask))?;
        if volume.geometry() != gtv.geometry() {
            return Err(Error::Format(format!(
                "{}: volume and mask geometries differ",
                entry.id
            )));
        }
        Ok(PhantomCase {
            volume,
            gtv,
            spec: entry.spec.clone(),
        })
    }

    /// Reassign train and validation cases for repeat `split_id` (1-based).
    /// The validation share is kept; test cases are left alone. Split 1 is
    /// the original assignment.
    pub fn resplit(&self, split_id: u32) -> Result<Manifest> {
        if split_id == 0 {
            return Err(Error::Parameter("split ids start at 1".into()));
        }
        let mut out = self.clone();
        let pool: Vec<usize> = (0..self.cases.len())
            .filter(|&i| self.cases[i].split != Split::Test)
            .collect();
        let n_val = self.split(Split::Val).count();
        if pool.len() < 2 || n_val == 0 {
            return Err(Error::Parameter("resplitting needs train and validation cases".into()));
        }
        // Rotate the validation window through the pool.
        let offset = ((split_id - 1) as usize * n_val) % pool.len();
        for (rank, &i) in pool.iter().enumerate() {
            let pos = (rank + pool.len() - offset) % pool.len();
            let val_start = pool.len() - n_val;
            out.cases[i].split = if pos >= val_start { Split::Val } else { Split::Train };
        }
        Ok(out)
    }
}

/// Render a corpus into `dir` and write its manifest.
pub fn generate_corpus(cfg: &CorpusConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let specs = corpus_specs(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cases = Vec::with_capacity(specs.len());
    for (i, (spec, split)) in specs.into_iter().enumerate() {
        let id = format!("case{i:04}");
        let case = generate_phantom(&spec)?;
        let path = PathBuf::from(format!("{id}.vol"));
        let mask = PathBuf::from(format!("{id}_gtv.vol"));
        case.volume.save(dir.join(&path))?;
        case.gtv.save(dir.join(&mask))?;
        log::debug!("wrote {id} ({split}, {} gtv voxels)", case.gtv.count());
        cases.push(ManifestEntry {
            id,
            path,
            mask,
            split,
            tags: spec.tags.clone(),
            seed: spec.seed,
            spec,
        });
    }
    let manifest = Manifest {
        corpus: cfg.clone(),
        cases,
        root: dir.to_path_buf(),
    };
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            dims: [48, 48, 24],
            tumor_radius_mm: 7.0,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom(&small()).unwrap();
        let b = generate_phantom(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.volume, c.volume);
        assert_eq!(a.gtv, c.gtv);
    }

    #[test]
    fn tumor_length_sets_slice_extent() {
        let case = generate_phantom(&small()).unwrap();
        let (lo, hi) = case.gtv.slice_range().unwrap();
        assert_eq!(hi - lo + 1, 10);
    }

    #[test]
    fn air_pocket_is_inside_the_gtv() {
        let spec = PhantomSpec {
            has_air_pocket: true,
            tags: [Tag::AirPocket].into(),
            noise_hu: 0.0,
            ..small()
        };
        let case = generate_phantom(&spec).unwrap();
        let n = case
            .volume
            .voxels()
            .iter()
            .zip(case.gtv.voxels())
            .filter(|(v, g)| **g && **v < -900.0)
            .count();
        assert!(n >= 1);
    }

    #[test]
    fn flags_and_tags_must_agree() {
        let spec = PhantomSpec {
            has_feeding_tube: true,
            ..small()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn tumor_outside_the_volume_is_rejected() {
        let spec = PhantomSpec {
            tumor_center_z: 0.1,
            tumor_length_mm: 40.0,
            ..small()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
        let wide = PhantomSpec {
            tumor_radius_mm: 30.0,
            ..small()
        };
        assert!(matches!(generate_phantom(&wide), Err(Error::Spec(_))));
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let cfg = CorpusConfig {
            n: 10,
            ..CorpusConfig::default()
        };
        assert_eq!(cfg.split_sizes(), (6, 2, 2));
        assert!(CorpusConfig {
            n: 2,
            ..CorpusConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn resplit_keeps_test_set_and_validation_size() {
        let cfg = CorpusConfig {
            n: 10,
            dims: [48, 48, 24],
            ..CorpusConfig::default()
        };
        let cases = corpus_specs(&cfg)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, (spec, split))| ManifestEntry {
                id: format!("c{i}"),
                path: PathBuf::new(),
                mask: PathBuf::new(),
                split,
                tags: spec.tags.clone(),
                seed: spec.seed,
                spec,
            })
            .collect();
        let m = Manifest {
            corpus: cfg,
            cases,
            root: PathBuf::new(),
        };
        assert_eq!(m.resplit(1).unwrap(), m);
        let val_sets: Vec<Vec<String>> = (1..=3)
            .map(|k| {
                let r = m.resplit(k).unwrap();
                assert_eq!(r.split(Split::Val).count(), 2);
                let test: Vec<_> = r.split(Split::Test).map(|c| c.id.clone()).collect();
                assert_eq!(test, m.split(Split::Test).map(|c| c.id.clone()).collect::<Vec<_>>());
                r.split(Split::Val).map(|c| c.id.clone()).collect()
            })
            .collect();
        assert_ne!(val_sets[0], val_sets[1]);
        assert_ne!(val_sets[1], val_sets[2]);
    }
}
