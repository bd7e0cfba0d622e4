//! Seeded synthetic cohorts.
//!
//! Each patient gets an ellipsoidal gland, spherical cancer lesions with a
//! grade group, and spherical benign "mimics" that look suspicious on T2w.
//! A simulated radiologist draws an ROI (the sphere dilated by one voxel)
//! around each detected lesion and around every mimic, and a simulated
//! biopsy takes targeted cores inside ROIs plus systematic cores in the rest
//! of the gland.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, patient
//! index, stage)`, so patients can be generated in parallel and still match
//! a serial run bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{
    save_manifest, BiopsyCore, Cohort, CoreKind, GradeGroup, PatientRecord, RoiAnnotation,
    RunLengthMask, ScoreScale, Split, SuspicionScore, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::volume::{save_bundle, Channel, ChannelName, Shape, Spacing, VolumeBundle, VoxelIndex};

pub const TRUTH_FILE: &str = "truth.json";
pub const GENERATOR_LOG_FILE: &str = "generator_log.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    /// Additive signal per grade group 1..=5, in noise standard deviations.
    pub t2w: [f64; 5],
    pub adc: [f64; 5],
    pub dwi_hb: [f64; 5],
    /// Signal of benign mimics, per channel (T2w, ADC, DWI_hb).
    pub mimic: [f64; 3],
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            t2w: [-1.2, -1.8, -2.0, -2.2, -2.4],
            adc: [-0.4, -1.8, -2.0, -2.2, -2.4],
            dwi_hb: [0.4, 1.8, 2.0, 2.2, 2.4],
            mimic: [-1.8, -0.3, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiologistConfig {
    /// Detection probability per lesion grade group 1..=5.
    pub detection_sensitivity: [f64; 5],
    /// Poisson mean of benign mimics per patient; every mimic is read as an ROI.
    pub false_roi_rate: f64,
    pub false_roi_radius_mm: [f64; 2],
    /// Score distribution (over 0..=5) for detected lesions, per grade 1..=5.
    pub score_confusion: [[f64; 6]; 5],
    /// Score distribution (over 0..=5) for false ROIs.
    pub false_roi_scores: [f64; 6],
}

impl Default for RadiologistConfig {
    fn default() -> Self {
        RadiologistConfig {
            detection_sensitivity: [0.5, 0.85, 0.9, 0.95, 0.95],
            false_roi_rate: 2.0,
            false_roi_radius_mm: [3.0, 5.0],
            score_confusion: [
                [0.0, 0.0, 0.2, 0.45, 0.25, 0.1],
                [0.0, 0.0, 0.1, 0.3, 0.35, 0.25],
                [0.0, 0.0, 0.05, 0.25, 0.4, 0.3],
                [0.0, 0.0, 0.05, 0.2, 0.4, 0.35],
                [0.0, 0.0, 0.0, 0.15, 0.4, 0.45],
            ],
            false_roi_scores: [0.0, 0.0, 0.05, 0.25, 0.4, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiopsyConfig {
    pub targeted_cores_per_roi: usize,
    /// Inclusive range of systematic cores per patient, within [3, 30].
    pub systematic_cores: [usize; 2],
    /// Probability that a core's grade is shifted by one group.
    pub misgrade_probability: f64,
}

impl Default for BiopsyConfig {
    fn default() -> Self {
        BiopsyConfig {
            targeted_cores_per_roi: 4,
            systematic_cores: [6, 12],
            misgrade_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_patients: usize,
    pub seed: u64,
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Range of each gland semi-axis.
    pub gland_radius_mm: [f64; 2],
    /// Poisson mean of cancer lesions per patient.
    pub lesions_per_patient: f64,
    /// Upper bound on the Poisson draw.
    pub max_lesions: usize,
    pub lesion_radius_mm: [f64; 2],
    /// Relative frequency of lesion grade groups 1..=5.
    pub lesion_grade_weights: [f64; 5],
    /// Fraction of patients (taken from the end) assigned to the test split.
    pub test_fraction: f64,
    pub contrast: ContrastConfig,
    pub radiologist: RadiologistConfig,
    pub biopsy: BiopsyConfig,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_patients: 100,
            seed: 7,
            shape: [40, 40, 40],
            spacing_mm: [1.5, 1.5, 1.5],
            gland_radius_mm: [16.0, 24.0],
            lesions_per_patient: 1.5,
            max_lesions: 3,
            lesion_radius_mm: [3.0, 6.0],
            lesion_grade_weights: [0.35, 0.3, 0.15, 0.1, 0.1],
            test_fraction: 0.4,
            contrast: ContrastConfig::default(),
            radiologist: RadiologistConfig::default(),
            biopsy: BiopsyConfig::default(),
        }
    }
}

fn probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} is not a probability")))
    }
}

fn weights(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
        Err(Error::Config(format!("{name} must be non-negative with a positive sum")))
    } else {
        Ok(())
    }
}

fn range(name: &str, r: [f64; 2]) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && 0.0 < r[0] && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must satisfy 0 < min <= max, got {r:?}")))
    }
}

impl PhantomConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PhantomConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn shape(&self) -> Shape {
        Shape::from_array(self.shape)
    }

    pub fn spacing(&self) -> Spacing {
        Spacing(self.spacing_mm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|n| *n < 8 || *n > 512) {
            return Err(Error::Config(format!("shape {:?} must be 8..=512 per axis", self.shape)));
        }
        self.spacing()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        range("gland_radius_mm", self.gland_radius_mm)?;
        range("lesion_radius_mm", self.lesion_radius_mm)?;
        range("radiologist.false_roi_radius_mm", self.radiologist.false_roi_radius_mm)?;
        if !(self.lesions_per_patient.is_finite() && self.lesions_per_patient >= 0.0) {
            return Err(Error::Config("lesions_per_patient must be >= 0".into()));
        }
        if !(self.radiologist.false_roi_rate.is_finite() && self.radiologist.false_roi_rate >= 0.0) {
            return Err(Error::Config("radiologist.false_roi_rate must be >= 0".into()));
        }
        probability("test_fraction", self.test_fraction)?;
        probability("biopsy.misgrade_probability", self.biopsy.misgrade_probability)?;
        for p in self.radiologist.detection_sensitivity {
            probability("radiologist.detection_sensitivity", p)?;
        }
        weights("lesion_grade_weights", &self.lesion_grade_weights)?;
        weights("radiologist.false_roi_scores", &self.radiologist.false_roi_scores)?;
        for row in &self.radiologist.score_confusion {
            weights("radiologist.score_confusion", row)?;
        }
        let all_contrast = self
            .contrast
            .t2w
            .iter()
            .chain(&self.contrast.adc)
            .chain(&self.contrast.dwi_hb)
            .chain(&self.contrast.mimic);
        if all_contrast.clone().any(|c| !c.is_finite()) {
            return Err(Error::Config("contrast values must be finite".into()));
        }
        let [lo, hi] = self.biopsy.systematic_cores;
        if !(3 <= lo && lo <= hi && hi <= 30) {
            return Err(Error::Config(format!(
                "biopsy.systematic_cores {:?} must lie within [3, 30]",
                self.biopsy.systematic_cores
            )));
        }
        let half_fov = self
            .shape
            .iter()
            .zip(self.spacing_mm)
            .map(|(n, s)| (*n as f64 / 2.0 - 1.0) * s)
            .fold(f64::INFINITY, f64::min);
        if self.gland_radius_mm[1] > half_fov {
            return Err(Error::Config(format!(
                "gland radius {} mm does not fit the {half_fov} mm half field of view",
                self.gland_radius_mm[1]
            )));
        }
        let widest = self.lesion_radius_mm[1].max(self.radiologist.false_roi_radius_mm[1]);
        if widest >= self.gland_radius_mm[0] {
            return Err(Error::Config(format!(
                "lesion radius {widest} mm exceeds the smallest gland radius {} mm",
                self.gland_radius_mm[0]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Centre in voxel coordinates.
    pub center: [f64; 3],
    pub radii_mm: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, v: VoxelIndex, spacing: Spacing) -> bool {
        let p = [v.i, v.j, v.k];
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) * spacing.0[a] / self.radii_mm[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Inclusive voxel bounds of the ellipsoid, unclamped.
    pub fn voxel_bounds(&self, spacing: Spacing) -> [(f64, f64); 3] {
        [0, 1, 2].map(|a| {
            let r = self.radii_mm[a] / spacing.0[a];
            ((self.center[a] - r).ceil(), (self.center[a] + r).floor())
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius_mm: f64,
}

impl Sphere {
    fn as_ellipsoid(&self) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            radii_mm: [self.radius_mm; 3],
        }
    }

    pub fn contains(&self, v: VoxelIndex, spacing: Spacing) -> bool {
        self.as_ellipsoid().contains(v, spacing)
    }

    /// Linear offsets of voxels inside the sphere.
    pub fn offsets(&self, shape: Shape, spacing: Spacing) -> Vec<usize> {
        ellipsoid_offsets(&self.as_ellipsoid(), shape, spacing)
    }
}

fn ellipsoid_offsets(e: &Ellipsoid, shape: Shape, spacing: Spacing) -> Vec<usize> {
    let dims = shape.as_array();
    let b = e.voxel_bounds(spacing);
    let clamp = |a: usize| {
        let lo = b[a].0.max(0.0) as usize;
        let hi = b[a].1.min(dims[a] as f64 - 1.0);
        (lo, if hi < 0.0 { None } else { Some(hi as usize) })
    };
    let mut out = Vec::new();
    let (x0, x1) = clamp(0);
    let (y0, y1) = clamp(1);
    let (z0, z1) = clamp(2);
    let (Some(x1), Some(y1), Some(z1)) = (x1, y1, z1) else {
        return out;
    };
    for k in z0..=z1 {
        for j in y0..=y1 {
            for i in x0..=x1 {
                let v = VoxelIndex::new(i, j, k);
                if e.contains(v, spacing) {
                    out.push(shape.offset(i, j, k));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub sphere: Sphere,
    pub grade: u8,
}

/// Ground truth for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub gland: Ellipsoid,
    pub lesions: Vec<Lesion>,
    /// Benign look-alikes; each becomes a false radiologist ROI.
    pub mimics: Vec<Sphere>,
}

impl PatientTruth {
    pub fn gland_offsets(&self, shape: Shape, spacing: Spacing) -> Vec<usize> {
        ellipsoid_offsets(&self.gland, shape, spacing)
    }

    /// Per-voxel grade group: the maximum grade of the lesions covering it.
    pub fn grade_map(&self, shape: Shape, spacing: Spacing) -> Vec<u8> {
        let mut map = vec![0u8; shape.voxel_count()];
        for l in &self.lesions {
            for o in l.sphere.offsets(shape, spacing) {
                map[o] = map[o].max(l.grade);
            }
        }
        map
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub patients: Vec<PatientTruth>,
}

impl PhantomTruth {
    pub fn shape(&self) -> Shape {
        Shape::from_array(self.shape)
    }

    pub fn spacing(&self) -> Spacing {
        Spacing(self.spacing_mm)
    }

    pub fn patient(&self, patient_id: &str) -> Option<&PatientTruth> {
        self.patients.iter().find(|p| p.patient_id == patient_id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("truth serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(TRUTH_FILE, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PhantomTruth::from_json(&text)
    }
}

/// Output of the generator: records, their image bundles and the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCohort {
    pub records: Vec<PatientRecord>,
    pub bundles: Vec<VolumeBundle>,
    pub truth: PhantomTruth,
}

#[derive(Clone, Copy)]
enum Stage {
    Anatomy = 0,
    Radiologist = 1,
    Biopsy = 2,
}

fn stream(seed: u64, patient: usize, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((patient as u64) << 2) | stage as u64);
    rng
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("validated mean");
    let n: f64 = d.sample(rng);
    n as usize
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

pub fn patient_id(index: usize) -> String {
    format!("p{index:04}")
}

/// Draws a sphere centre inside `gland` shrunk by `radius_mm`.
fn sample_center(rng: &mut ChaCha8Rng, gland: &Ellipsoid, radius_mm: f64, spacing: Spacing) -> [f64; 3] {
    let inner = [0, 1, 2].map(|a| gland.radii_mm[a] - radius_mm);
    loop {
        let u: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..=1.0));
        if u.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            return [0, 1, 2].map(|a| gland.center[a] + u[a] * inner[a] / spacing.0[a]);
        }
    }
}

fn generate_patient(config: &PhantomConfig, index: usize) -> Result<(PatientTruth, VolumeBundle)> {
    let shape = config.shape();
    let spacing = config.spacing();
    let mut rng = stream(config.seed, index, Stage::Anatomy);

    let gland = Ellipsoid {
        center: [0, 1, 2].map(|a| {
            (config.shape[a] as f64 - 1.0) / 2.0 + rng.random_range(-1.0..=1.0)
        }),
        radii_mm: [0, 1, 2].map(|_| uniform(&mut rng, config.gland_radius_mm)),
    };

    let grade_dist = WeightedIndex::new(config.lesion_grade_weights).map_err(|e| Error::Config(e.to_string()))?;
    let n_lesions = poisson(&mut rng, config.lesions_per_patient).min(config.max_lesions);
    let lesions: Vec<Lesion> = (0..n_lesions)
        .map(|_| {
            let radius_mm = uniform(&mut rng, config.lesion_radius_mm);
            let center = sample_center(&mut rng, &gland, radius_mm, spacing);
            Lesion {
                sphere: Sphere { center, radius_mm },
                grade: grade_dist.sample(&mut rng) as u8 + 1,
            }
        })
        .collect();
    let truth_map = PatientTruth {
        patient_id: patient_id(index),
        gland,
        lesions: lesions.clone(),
        mimics: vec![],
    }
    .grade_map(shape, spacing);

    // Mimics sit entirely in benign tissue; give up on a mimic after a few tries.
    let n_mimics = poisson(&mut rng, config.radiologist.false_roi_rate);
    let mut mimics = Vec::with_capacity(n_mimics);
    for _ in 0..n_mimics {
        let radius_mm = uniform(&mut rng, config.radiologist.false_roi_radius_mm);
        for _attempt in 0..50 {
            let s = Sphere {
                center: sample_center(&mut rng, &gland, radius_mm, spacing),
                radius_mm,
            };
            let dilated = dilate(&s.offsets(shape, spacing), shape);
            if !dilated.is_empty() && dilated.iter().all(|o| truth_map[*o] == 0) {
                mimics.push(s);
                break;
            }
        }
    }

    let truth = PatientTruth {
        patient_id: patient_id(index),
        gland,
        lesions,
        mimics,
    };

    let n = shape.voxel_count();
    let gland_mask: Vec<f32> = {
        let mut m = vec![0.0f32; n];
        for o in truth.gland_offsets(shape, spacing) {
            m[o] = 1.0;
        }
        m
    };
    let mut mimic_mask = vec![false; n];
    for s in &truth.mimics {
        for o in s.offsets(shape, spacing) {
            mimic_mask[o] = true;
        }
    }

    // (gland level, background level) per channel before lesion signal and noise.
    let base = [(0.0, -2.0), (0.0, 1.0), (0.0, -1.0)];
    let lesion_contrast = [&config.contrast.t2w, &config.contrast.adc, &config.contrast.dwi_hb];
    let names = [ChannelName::T2w, ChannelName::Adc, ChannelName::DwiHb];
    let mut images: Vec<Vec<f32>> = vec![Vec::with_capacity(n); 3];
    for o in 0..n {
        for c in 0..3 {
            let mut v = if gland_mask[o] != 0.0 { base[c].0 } else { base[c].1 };
            let g = truth_map[o];
            if g > 0 {
                v += lesion_contrast[c][g as usize - 1];
            } else if mimic_mask[o] {
                v += config.contrast.mimic[c];
            }
            let noise: f64 = StandardNormal.sample(&mut rng);
            images[c].push((v + noise) as f32);
        }
    }
    let mut channels: Vec<Channel> = names
        .into_iter()
        .zip(images)
        .map(|(name, data)| Channel::new(name, data))
        .collect();
    channels.push(Channel::new(ChannelName::GlandMask, gland_mask));
    let bundle = VolumeBundle::new(shape, spacing, channels)?;
    Ok((truth, bundle))
}

/// Generates gland, lesions, mimics and image channels. Records come back
/// without ROIs or cores; see [`simulate_radiologist`] and [`simulate_biopsy`].
pub fn generate_cohort(config: &PhantomConfig) -> Result<(Vec<PatientRecord>, Vec<VolumeBundle>, PhantomTruth)> {
    config.validate()?;
    let generated = (0..config.n_patients)
        .into_par_iter()
        .map(|idx| generate_patient(config, idx))
        .collect::<Result<Vec<_>>>()?;
    let n_train = ((config.n_patients as f64) * (1.0 - config.test_fraction)).round() as usize;
    let mut records = Vec::with_capacity(generated.len());
    let mut bundles = Vec::with_capacity(generated.len());
    let mut truths = Vec::with_capacity(generated.len());
    for (idx, (truth, bundle)) in generated.into_iter().enumerate() {
        records.push(PatientRecord {
            patient_id: truth.patient_id.clone(),
            bundle: PathBuf::from("patients").join(&truth.patient_id),
            rois: vec![],
            cores: vec![],
            split: if idx < n_train { Split::Train } else { Split::Test },
        });
        bundles.push(bundle);
        truths.push(truth);
    }
    Ok((
        records,
        bundles,
        PhantomTruth {
            shape: config.shape,
            spacing_mm: config.spacing_mm,
            patients: truths,
        },
    ))
}

/// 26-neighbourhood dilation by one voxel, clamped to the volume. Sorted output.
pub fn dilate(offsets: &[usize], shape: Shape) -> Vec<usize> {
    let mut mask = vec![false; shape.voxel_count()];
    for &o in offsets {
        let v = shape.index_of(o);
        for dk in -1i64..=1 {
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let (i, j, k) = (v.i as i64 + di, v.j as i64 + dj, v.k as i64 + dk);
                    if i >= 0
                        && j >= 0
                        && k >= 0
                        && (i as usize) < shape.nx
                        && (j as usize) < shape.ny
                        && (k as usize) < shape.nz
                    {
                        mask[shape.offset(i as usize, j as usize, k as usize)] = true;
                    }
                }
            }
        }
    }
    mask.iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(o, _)| o)
        .collect()
}

fn sample_score(rng: &mut ChaCha8Rng, dist: &[f64; 6]) -> u8 {
    WeightedIndex::new(dist)
        .expect("validated weights")
        .sample(rng) as u8
}

/// Radiologist reads for every patient: one ROI per detected lesion and one
/// per mimic, each the sphere dilated by one voxel.
pub fn simulate_radiologist(truth: &PhantomTruth, config: &PhantomConfig) -> Result<Vec<Vec<RoiAnnotation>>> {
    let shape = truth.shape();
    let spacing = truth.spacing();
    let rad = &config.radiologist;
    truth
        .patients
        .par_iter()
        .enumerate()
        .map(|(idx, p)| {
            let mut rng = stream(config.seed, idx, Stage::Radiologist);
            let mut rois = Vec::new();
            for l in &p.lesions {
                let g = l.grade as usize - 1;
                if rng.random_bool(rad.detection_sensitivity[g]) {
                    let score = sample_score(&mut rng, &rad.score_confusion[g]);
                    rois.push((l.sphere, score));
                }
            }
            for m in &p.mimics {
                let score = sample_score(&mut rng, &rad.false_roi_scores);
                rois.push((*m, score));
            }
            rois.into_iter()
                .enumerate()
                .map(|(n, (sphere, score))| {
                    Ok(RoiAnnotation {
                        roi_id: format!("r{n}"),
                        voxels: RunLengthMask::from_offsets(dilate(&sphere.offsets(shape, spacing), shape))?,
                        score: SuspicionScore::new(ScoreScale::Ucla, score)?,
                        pathology: None,
                    })
                })
                .collect()
        })
        .collect()
}

/// Targeted cores inside each ROI plus systematic cores in the gland outside
/// every ROI. Sets each ROI's pathology to the max grade of its targeted cores.
pub fn simulate_biopsy(
    record: &mut PatientRecord,
    truth: &PatientTruth,
    patient_index: usize,
    shape: Shape,
    spacing: Spacing,
    config: &PhantomConfig,
) -> Result<()> {
    let mut rng = stream(config.seed, patient_index, Stage::Biopsy);
    let grades = truth.grade_map(shape, spacing);
    let misgrade = config.biopsy.misgrade_probability;
    let read = |rng: &mut ChaCha8Rng, o: usize| -> Result<GradeGroup> {
        let mut g = grades[o] as i32;
        if misgrade > 0.0 && rng.random_bool(misgrade) {
            g += if rng.random_bool(0.5) { 1 } else { -1 };
        }
        GradeGroup::new(g.clamp(0, 5) as u8)
    };

    let mut cores = Vec::new();
    for roi in &mut record.rois {
        let voxels: Vec<usize> = roi.voxels.offsets().collect();
        let mut worst = GradeGroup::BENIGN;
        for n in 0..config.biopsy.targeted_cores_per_roi {
            let o = voxels[rng.random_range(0..voxels.len())];
            let grade = read(&mut rng, o)?;
            worst = worst.max(grade);
            cores.push(BiopsyCore {
                core_id: format!("{}-t{n}", roi.roi_id),
                kind: CoreKind::Targeted,
                roi_id: Some(roi.roi_id.clone()),
                grade,
                location: shape.index_of(o),
            });
        }
        if config.biopsy.targeted_cores_per_roi > 0 {
            roi.pathology = Some(worst);
        }
    }

    let candidates: Vec<usize> = truth
        .gland_offsets(shape, spacing)
        .into_iter()
        .filter(|o| !record.rois.iter().any(|r| r.voxels.contains(*o)))
        .collect();
    if candidates.is_empty() {
        log::warn!(
            "patient {}: gland fully covered by ROIs, no systematic cores",
            record.patient_id
        );
    } else {
        let [lo, hi] = config.biopsy.systematic_cores;
        let count = rng.random_range(lo..=hi).min(candidates.len());
        let mut picks = rand::seq::index::sample(&mut rng, candidates.len(), count).into_vec();
        picks.sort_unstable();
        for (n, p) in picks.into_iter().enumerate() {
            let o = candidates[p];
            cores.push(BiopsyCore {
                core_id: format!("s{n}"),
                kind: CoreKind::Systematic,
                roi_id: None,
                grade: read(&mut rng, o)?,
                location: shape.index_of(o),
            });
        }
    }
    record.cores = cores;
    Ok(())
}

/// Runs anatomy, radiologist and biopsy simulation.
pub fn build_cohort(config: &PhantomConfig) -> Result<PhantomCohort> {
    let (mut records, bundles, truth) = generate_cohort(config)?;
    let reads = simulate_radiologist(&truth, config)?;
    let shape = truth.shape();
    let spacing = truth.spacing();
    records
        .par_iter_mut()
        .zip(reads)
        .enumerate()
        .try_for_each(|(idx, (record, rois))| {
            record.rois = rois;
            simulate_biopsy(record, &truth.patients[idx], idx, shape, spacing, config)
        })?;
    Ok(PhantomCohort {
        records,
        bundles,
        truth,
    })
}

/// Generator-side bookkeeping written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLog {
    pub seed: u64,
    pub n_patients: usize,
    pub patients: Vec<GeneratorLogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLogEntry {
    pub patient_id: String,
    pub lesions: usize,
    pub rois: usize,
    pub targeted_cores: usize,
    pub systematic_cores: usize,
    /// FNV-1a 64 of each channel's raw bytes, keyed by channel name.
    pub checksums: Vec<(String, String)>,
}

/// 64-bit FNV-1a, hex encoded.
pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl PhantomCohort {
    pub fn cohort(&self) -> Result<Cohort> {
        Cohort::new(ScoreScale::Ucla, self.records.clone())
    }

    pub fn log(&self, config: &PhantomConfig) -> GeneratorLog {
        GeneratorLog {
            seed: config.seed,
            n_patients: self.records.len(),
            patients: self
                .records
                .iter()
                .zip(&self.bundles)
                .zip(&self.truth.patients)
                .map(|((r, b), t)| GeneratorLogEntry {
                    patient_id: r.patient_id.clone(),
                    lesions: t.lesions.len(),
                    rois: r.rois.len(),
                    targeted_cores: r.cores.iter().filter(|c| c.kind == CoreKind::Targeted).count(),
                    systematic_cores: r.cores.iter().filter(|c| c.kind == CoreKind::Systematic).count(),
                    checksums: b
                        .channels()
                        .iter()
                        .map(|c| {
                            (
                                c.name.as_str().to_owned(),
                                fnv1a64_hex(&crate::volume::encode_channel(&c.data)),
                            )
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Writes `cohort.json`, `truth.json`, `generator_log.json` and one bundle
    /// directory per patient under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, config: &PhantomConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (r, b) in self.records.iter().zip(&self.bundles) {
            save_bundle(b, dir.join(&r.bundle))?;
        }
        save_manifest(&self.cohort()?, dir.join(MANIFEST_FILE))?;
        let truth_path = dir.join(TRUTH_FILE);
        fs::write(&truth_path, self.truth.to_json()).map_err(|e| Error::io(&truth_path, e))?;
        let log_path = dir.join(GENERATOR_LOG_FILE);
        let mut log = serde_json::to_string_pretty(&self.log(config)).expect("log serializes");
        log.push('\n');
        fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))
    }
}
