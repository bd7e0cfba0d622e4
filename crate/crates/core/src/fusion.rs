//! Threshold classification of radiologist-positive ROIs and its fusion
//! with the radiologist's own calls.
//!
//! The ML model only ever sees radiologist-positive cases (⁺ROIs). A ⁺ROI is
//! ML-positive when the fraction of its voxels whose most probable class is
//! "positive" exceeds a threshold `t`. The fused reading keeps a case positive
//! only if both the radiologist and the ML call it positive, so
//!
//! ```text
//! TP(Rad+ML) = ⁺TP(ML)            FP(Rad+ML) = ⁺FP(ML)
//! FN(Rad+ML) = FN(Rad) + ⁺FN(ML)  TN(Rad+ML) = TN(Rad) + ⁺TN(ML)
//! ```
//!
//! Zones and patients aggregate existentially: a zone or patient is
//! ML-positive iff any mapped ⁺ROI is.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::cohort::{
    is_significant, patient_truth_label, GradeGroup, PatientRecord, RoiAnnotation, RunLengthMask,
    SignificanceRule,
};
use crate::error::{Error, Result};
use crate::phantom::PatientTruth;
use crate::volume::{gland_bounding_box, Channel, ChannelName, Shape, VolumeBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Roi,
    Zone,
    Patient,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Roi, Level::Zone, Level::Patient];

    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Roi => "roi",
            Level::Zone => "zone",
            Level::Patient => "patient",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Level::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::format("level", format!("unknown level `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Rad,
    MlOnPositives,
    RadPlusMl,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Rad, Source::MlOnPositives, Source::RadPlusMl];

    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Rad => "Rad",
            Source::MlOnPositives => "MLonPositives",
            Source::RadPlusMl => "RadPlusML",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Source::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::format("source", format!("unknown source `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub source: Source,
    pub level: Level,
}

impl ConfusionCounts {
    pub fn new(source: Source, level: Level) -> Self {
        ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
            source,
            level,
        }
    }

    pub fn with_counts(mut self, tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        self.tp = tp;
        self.fp = fp;
        self.tn = tn;
        self.fn_ = fn_;
        self
    }

    pub fn record(&mut self, call: bool, truth: bool) {
        match (call, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn tabulate(
        source: Source,
        level: Level,
        cases: impl IntoIterator<Item = (bool, bool)>,
    ) -> Self {
        let mut c = ConfusionCounts::new(source, level);
        for (call, truth) in cases {
            c.record(call, truth);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn as_array(&self) -> [u64; 4] {
        [self.tp, self.fp, self.tn, self.fn_]
    }
}

/// Real-valued expected counts, produced when ML rates measured on one
/// cohort are applied to radiologist counts from another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedCounts {
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    pub fn_: f64,
    pub level: Level,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiDecision {
    pub roi_id: String,
    pub positive_fraction: f64,
    pub decision: bool,
    pub threshold: f64,
}

/// Per-voxel "positive" flag: `prob_pos` is the argmax, ties resolved
/// positive > negative > background.
pub fn positive_voxels(prob_map: &VolumeBundle) -> Result<Vec<bool>> {
    let p = prob_map.require_channel(ChannelName::ProbPos)?;
    let n = prob_map.require_channel(ChannelName::ProbNeg)?;
    let b = prob_map.require_channel(ChannelName::ProbBg)?;
    Ok(p.iter()
        .zip(n)
        .zip(b)
        .map(|((p, n), b)| p >= n && p >= b)
        .collect())
}

fn fraction_of(positive: &[bool], roi: &RoiAnnotation) -> Result<f64> {
    let size = roi.voxels.voxel_count();
    if size == 0 {
        return Err(Error::DegenerateInput(format!("ROI `{}` is empty", roi.roi_id)));
    }
    if roi.voxels.end() > positive.len() {
        return Err(Error::DegenerateInput(format!(
            "ROI `{}` extends beyond the probability map",
            roi.roi_id
        )));
    }
    let hits = roi.voxels.offsets().filter(|o| positive[*o]).count();
    Ok(hits as f64 / size as f64)
}

pub fn decide(roi_id: &str, positive_fraction: f64, t: f64) -> RoiDecision {
    RoiDecision {
        roi_id: roi_id.to_owned(),
        positive_fraction,
        decision: positive_fraction > t,
        threshold: t,
    }
}

pub fn classify_roi(prob_map: &VolumeBundle, roi: &RoiAnnotation, t: f64) -> Result<RoiDecision> {
    check_threshold(t)?;
    let fraction = fraction_of(&positive_voxels(prob_map)?, roi)?;
    Ok(decide(&roi.roi_id, fraction, t))
}

fn check_threshold(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("threshold {t} outside [0, 1]")))
    }
}

/// Tabulates ML decisions on ⁺ROIs against pathology.
pub fn roi_confusion(
    decisions: &[RoiDecision],
    pathologies: &[Option<GradeGroup>],
    rule: SignificanceRule,
) -> Result<ConfusionCounts> {
    if decisions.len() != pathologies.len() {
        return Err(Error::Domain(format!(
            "{} decisions but {} pathologies",
            decisions.len(),
            pathologies.len()
        )));
    }
    let mut c = ConfusionCounts::new(Source::MlOnPositives, Level::Roi);
    for (d, p) in decisions.iter().zip(pathologies) {
        let g = p.ok_or_else(|| Error::MissingLabel(d.roi_id.clone()))?;
        c.record(d.decision, is_significant(g, rule));
    }
    Ok(c)
}

pub fn combine_with_radiologist(rad: &ConfusionCounts, ml: &ConfusionCounts) -> Result<ConfusionCounts> {
    if ml.tp + ml.fn_ != rad.tp || ml.fp + ml.tn != rad.fp {
        return Err(Error::IncompatibleCounts {
            rad_tp: rad.tp,
            rad_fp: rad.fp,
            ml_pos: ml.tp + ml.fn_,
            ml_neg: ml.fp + ml.tn,
        });
    }
    Ok(ConfusionCounts {
        tp: ml.tp,
        fp: ml.fp,
        tn: rad.tn + ml.tn,
        fn_: rad.fn_ + ml.fn_,
        source: Source::RadPlusMl,
        level: rad.level,
    })
}

/// ML sensitivity and specificity on radiologist-positive cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlRates {
    pub sen: f64,
    pub spc: f64,
}

/// Applies ML rates from one cohort to radiologist counts from another,
/// returning expected (unrounded) fused counts.
pub fn transfer_to_external_cohort(ml: MlRates, rad: &ConfusionCounts) -> Result<ExpectedCounts> {
    for (name, v) in [("sensitivity", ml.sen), ("specificity", ml.spc)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("ML {name} {v} outside [0, 1]")));
        }
    }
    let (tp, fp, tn, fn_) = (rad.tp as f64, rad.fp as f64, rad.tn as f64, rad.fn_ as f64);
    Ok(ExpectedCounts {
        tp: tp * ml.sen,
        fn_: fn_ + tp * (1.0 - ml.sen),
        tn: tn + fp * ml.spc,
        fp: fp * (1.0 - ml.spc),
        level: rad.level,
    })
}

/// Plane-partition stand-in for the Barzell template: the gland bounding box
/// is cut into `splits[0]` lateral (x) × `splits[1]` anteroposterior (y) ×
/// `splits[2]` craniocaudal (z) sectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZoneTemplate {
    pub splits: [usize; 3],
}

impl Default for ZoneTemplate {
    fn default() -> Self {
        ZoneTemplate { splits: [2, 2, 5] }
    }
}

impl ZoneTemplate {
    pub fn zone_count(&self) -> usize {
        self.splits.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarzellZoneMap {
    shape: Shape,
    template: ZoneTemplate,
    /// Zone id per voxel; 0 outside the gland.
    zones: Vec<u32>,
    sizes: Vec<usize>,
}

impl BarzellZoneMap {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn template(&self) -> ZoneTemplate {
        self.template
    }

    pub fn zone_count(&self) -> usize {
        self.template.zone_count()
    }

    pub fn zones(&self) -> &[u32] {
        &self.zones
    }

    pub fn zone_of(&self, offset: usize) -> u32 {
        self.zones[offset]
    }

    /// Voxel count of zone `id` (1-based).
    pub fn zone_size(&self, id: u32) -> usize {
        self.sizes.get(id as usize).copied().unwrap_or(0)
    }

    pub fn to_channel(&self) -> Channel {
        Channel::new(ChannelName::ZoneMap, self.zones.iter().map(|z| *z as f32).collect())
    }
}

pub fn build_zone_map(shape: Shape, gland_mask: &[f32], template: ZoneTemplate) -> Result<BarzellZoneMap> {
    if gland_mask.len() != shape.voxel_count() {
        return Err(Error::InvalidVolume(format!(
            "gland mask has {} voxels, shape {shape} needs {}",
            gland_mask.len(),
            shape.voxel_count()
        )));
    }
    if template.splits.contains(&0) {
        return Err(Error::DegenerateGeometry("zone template has a zero split".into()));
    }
    let bb = gland_bounding_box(shape, gland_mask)
        .ok_or_else(|| Error::DegenerateGeometry("gland mask is empty".into()))?;
    let ext = bb.extent();
    for a in 0..3 {
        if ext[a] < template.splits[a] {
            return Err(Error::DegenerateGeometry(format!(
                "gland spans {} voxels on axis {a}, fewer than {} splits",
                ext[a], template.splits[a]
            )));
        }
    }
    let [sx, sy, _] = template.splits;
    let mut zones = vec![0u32; shape.voxel_count()];
    let mut sizes = vec![0usize; template.zone_count() + 1];
    for (o, m) in gland_mask.iter().enumerate() {
        if *m == 0.0 {
            continue;
        }
        let v = shape.index_of(o);
        let c = [v.i, v.j, v.k];
        let s = [0, 1, 2].map(|a| (c[a] - bb.lo[a]) * template.splits[a] / ext[a]);
        let id = 1 + s[0] + sx * (s[1] + sy * s[2]);
        zones[o] = id as u32;
        sizes[id] += 1;
    }
    Ok(BarzellZoneMap {
        shape,
        template,
        zones,
        sizes,
    })
}

/// Default minimum overlap for an ROI to claim a zone.
pub const DEFAULT_OVERLAP_MIN: f64 = 0.05;

/// Zones claimed by `voxels`: a zone is included when the overlap exceeds
/// `overlap_min` as a fraction of either the zone or the ROI.
pub fn lesion_to_zones(voxels: &RunLengthMask, zone_map: &BarzellZoneMap, overlap_min: f64) -> BTreeSet<u32> {
    let mut hits = vec![0usize; zone_map.zone_count() + 1];
    let n = zone_map.zones.len();
    for o in voxels.offsets().filter(|o| *o < n) {
        hits[zone_map.zones[o] as usize] += 1;
    }
    let roi_size = voxels.voxel_count() as f64;
    hits.iter()
        .enumerate()
        .skip(1)
        .filter(|(z, h)| {
            **h > 0 && {
                let h = **h as f64;
                h / zone_map.zone_size(*z as u32) as f64 > overlap_min || h / roi_size > overlap_min
            }
        })
        .map(|(z, _)| z as u32)
        .collect()
}

/// Zone truth from phantom lesions: a zone is positive iff a significant
/// lesion claims it under the same overlap rule used for ROIs.
pub fn zone_truth_from_phantom(
    truth: &PatientTruth,
    zone_map: &BarzellZoneMap,
    spacing: crate::volume::Spacing,
    rule: SignificanceRule,
    overlap_min: f64,
) -> Result<Vec<bool>> {
    let mut out = vec![false; zone_map.zone_count() + 1];
    for l in &truth.lesions {
        let g = GradeGroup::new(l.grade)?;
        if !is_significant(g, rule) {
            continue;
        }
        let offsets = l.sphere.offsets(zone_map.shape(), spacing);
        if offsets.is_empty() {
            continue;
        }
        for z in lesion_to_zones(&RunLengthMask::from_offsets(offsets)?, zone_map, overlap_min) {
            out[z as usize] = true;
        }
    }
    Ok(out)
}

/// Threshold-independent summary of one ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSummary {
    pub roi_id: String,
    pub score: u8,
    pub pathology: Option<GradeGroup>,
    pub positive_fraction: f64,
    pub zones: BTreeSet<u32>,
}

/// Threshold-independent summary of one patient; sweeps over `t`, cutoff and
/// significance rule only re-count these.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSummary {
    pub patient_id: String,
    pub core_grades: Vec<GradeGroup>,
    pub rois: Vec<RoiSummary>,
    /// Indexed by zone id; entry 0 unused. `None` when no zone truth exists.
    pub zone_truth: Option<Vec<bool>>,
    pub zone_count: usize,
}

/// Inputs for summarising a patient.
pub struct PatientInputs<'a> {
    pub record: &'a PatientRecord,
    pub prob_map: &'a VolumeBundle,
    pub zone_map: Option<&'a BarzellZoneMap>,
    /// Indexed by zone id, entry 0 unused.
    pub zone_truth: Option<&'a [bool]>,
    pub overlap_min: f64,
}

pub fn summarize_patient(inputs: &PatientInputs<'_>) -> Result<CaseSummary> {
    let positive = positive_voxels(inputs.prob_map)?;
    let rois = inputs
        .record
        .rois
        .iter()
        .map(|roi| {
            Ok(RoiSummary {
                roi_id: roi.roi_id.clone(),
                score: roi.score.value(),
                pathology: roi.pathology,
                positive_fraction: fraction_of(&positive, roi)?,
                zones: inputs
                    .zone_map
                    .map(|z| lesion_to_zones(&roi.voxels, z, inputs.overlap_min))
                    .unwrap_or_default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let zone_count = inputs.zone_map.map(|z| z.zone_count()).unwrap_or(0);
    let zone_truth = match (inputs.zone_map, inputs.zone_truth) {
        (Some(_), Some(t)) if t.len() == zone_count + 1 => Some(t.to_vec()),
        (Some(_), Some(t)) => {
            return Err(Error::Domain(format!(
                "patient `{}`: zone truth has {} entries, expected {}",
                inputs.record.patient_id,
                t.len(),
                zone_count + 1
            )))
        }
        _ => None,
    };
    Ok(CaseSummary {
        patient_id: inputs.record.patient_id.clone(),
        core_grades: inputs.record.cores.iter().map(|c| c.grade).collect(),
        rois,
        zone_truth,
        zone_count,
    })
}

/// Radiologist, ML-on-positives and fused counts at one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelCounts {
    pub rad: ConfusionCounts,
    pub ml: ConfusionCounts,
    pub combined: ConfusionCounts,
}

impl LevelCounts {
    pub fn get(&self, source: Source) -> &ConfusionCounts {
        match source {
            Source::Rad => &self.rad,
            Source::MlOnPositives => &self.ml,
            Source::RadPlusMl => &self.combined,
        }
    }
}

fn finish(rad: ConfusionCounts, ml: ConfusionCounts) -> Result<LevelCounts> {
    let combined = combine_with_radiologist(&rad, &ml)?;
    Ok(LevelCounts { rad, ml, combined })
}

/// ROI level. Radiologist counts cover every biopsied ROI (call = score ≥
/// cutoff); ML counts cover ⁺ROIs, each of which must carry pathology.
pub fn roi_counts(cases: &[CaseSummary], rule: SignificanceRule, cutoff: u8, t: f64) -> Result<LevelCounts> {
    check_threshold(t)?;
    let mut rad = ConfusionCounts::new(Source::Rad, Level::Roi);
    let mut ml = ConfusionCounts::new(Source::MlOnPositives, Level::Roi);
    for roi in cases.iter().flat_map(|c| &c.rois) {
        let rad_pos = roi.score >= cutoff;
        let Some(g) = roi.pathology else {
            if rad_pos {
                return Err(Error::MissingLabel(roi.roi_id.clone()));
            }
            continue;
        };
        let truth = is_significant(g, rule);
        rad.record(rad_pos, truth);
        if rad_pos {
            ml.record(roi.positive_fraction > t, truth);
        }
    }
    finish(rad, ml)
}

/// Zone level over every zone of every patient.
pub fn zone_counts(cases: &[CaseSummary], cutoff: u8, t: f64) -> Result<LevelCounts> {
    check_threshold(t)?;
    let missing: Vec<String> = cases
        .iter()
        .filter(|c| c.zone_truth.is_none())
        .map(|c| c.patient_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingZoneTruth(missing));
    }
    let mut rad = ConfusionCounts::new(Source::Rad, Level::Zone);
    let mut ml = ConfusionCounts::new(Source::MlOnPositives, Level::Zone);
    for c in cases {
        let truth = c.zone_truth.as_deref().expect("checked above");
        let mut rad_pos = vec![false; c.zone_count + 1];
        let mut ml_pos = vec![false; c.zone_count + 1];
        for roi in c.rois.iter().filter(|r| r.score >= cutoff) {
            let call = roi.positive_fraction > t;
            for z in &roi.zones {
                rad_pos[*z as usize] = true;
                ml_pos[*z as usize] |= call;
            }
        }
        for z in 1..=c.zone_count {
            rad.record(rad_pos[z], truth[z]);
            if rad_pos[z] {
                ml.record(ml_pos[z], truth[z]);
            }
        }
    }
    finish(rad, ml)
}

/// Patient level over patients with at least one core.
pub fn patient_counts(cases: &[CaseSummary], rule: SignificanceRule, cutoff: u8, t: f64) -> Result<LevelCounts> {
    check_threshold(t)?;
    let mut rad = ConfusionCounts::new(Source::Rad, Level::Patient);
    let mut ml = ConfusionCounts::new(Source::MlOnPositives, Level::Patient);
    for c in cases.iter().filter(|c| !c.core_grades.is_empty()) {
        let truth = c.core_grades.iter().any(|g| is_significant(*g, rule));
        let mut rad_pos = false;
        let mut ml_pos = false;
        for roi in c.rois.iter().filter(|r| r.score >= cutoff) {
            rad_pos = true;
            ml_pos |= roi.positive_fraction > t;
        }
        rad.record(rad_pos, truth);
        if rad_pos {
            ml.record(ml_pos, truth);
        }
    }
    finish(rad, ml)
}

pub fn level_counts(
    level: Level,
    cases: &[CaseSummary],
    rule: SignificanceRule,
    cutoff: u8,
    t: f64,
) -> Result<LevelCounts> {
    match level {
        Level::Roi => roi_counts(cases, rule, cutoff, t),
        Level::Zone => zone_counts(cases, cutoff, t),
        Level::Patient => patient_counts(cases, rule, cutoff, t),
    }
}

fn summarize_all(
    records: &[PatientRecord],
    prob_maps: &[VolumeBundle],
    zone_maps: Option<&[BarzellZoneMap]>,
    zone_truth: Option<&[Vec<bool>]>,
) -> Result<Vec<CaseSummary>> {
    if prob_maps.len() != records.len() {
        return Err(Error::Domain(format!(
            "{} records but {} probability maps",
            records.len(),
            prob_maps.len()
        )));
    }
    records
        .iter()
        .enumerate()
        .map(|(i, record)| {
            summarize_patient(&PatientInputs {
                record,
                prob_map: &prob_maps[i],
                zone_map: zone_maps.and_then(|z| z.get(i)),
                zone_truth: zone_truth.and_then(|z| z.get(i)).map(Vec::as_slice),
                overlap_min: DEFAULT_OVERLAP_MIN,
            })
        })
        .collect()
}

/// Zone-level radiologist and fused counts for a cohort.
pub fn zone_confusion(
    records: &[PatientRecord],
    prob_maps: &[VolumeBundle],
    zone_maps: &[BarzellZoneMap],
    zone_truth: &[Vec<bool>],
    cutoff: u8,
    t: f64,
) -> Result<(ConfusionCounts, ConfusionCounts)> {
    let cases = summarize_all(records, prob_maps, Some(zone_maps), Some(zone_truth))?;
    let c = zone_counts(&cases, cutoff, t)?;
    Ok((c.rad, c.combined))
}

/// Patient-level radiologist and fused counts for a cohort. Patients without
/// cores are excluded.
pub fn patient_confusion(
    records: &[PatientRecord],
    prob_maps: &[VolumeBundle],
    rule: SignificanceRule,
    cutoff: u8,
    t: f64,
) -> Result<(ConfusionCounts, ConfusionCounts)> {
    for r in records.iter().filter(|r| !r.cores.is_empty()) {
        patient_truth_label(r, rule)?;
    }
    let cases = summarize_all(records, prob_maps, None, None)?;
    let c = patient_counts(&cases, rule, cutoff, t)?;
    Ok((c.rad, c.combined))
}
