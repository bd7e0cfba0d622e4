//! Patients, radiologist ROIs, biopsy cores and the `cohort.json` manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Shape, VoxelIndex};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "cohort.json";

/// Radiologist "positive" cutoff used when none is configured.
pub const DEFAULT_CUTOFF: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreScale {
    #[serde(rename = "UCLA")]
    Ucla,
    #[serde(rename = "PIRADS")]
    Pirads,
}

impl ScoreScale {
    pub fn range(&self) -> (u8, u8) {
        match self {
            ScoreScale::Ucla => (0, 5),
            ScoreScale::Pirads => (1, 5),
        }
    }

    pub fn check(&self, value: u8) -> Result<()> {
        let (lo, hi) = self.range();
        if (lo..=hi).contains(&value) {
            Ok(())
        } else {
            Err(Error::Domain(format!("score {value} outside {self:?} range {lo}..={hi}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SuspicionScore {
    scale: ScoreScale,
    value: u8,
}

impl SuspicionScore {
    pub fn new(scale: ScoreScale, value: u8) -> Result<Self> {
        scale.check(value)?;
        Ok(SuspicionScore { scale, value })
    }

    pub fn scale(&self) -> ScoreScale {
        self.scale
    }

    pub fn value(&self) -> u8 {
        self.value
    }
}

/// Histopathology grade group; 0 is benign, 1 is Gleason 3+3, 2 is 3+4, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct GradeGroup(u8);

impl GradeGroup {
    pub const BENIGN: GradeGroup = GradeGroup(0);

    pub fn new(group: u8) -> Result<Self> {
        if group <= 5 {
            Ok(GradeGroup(group))
        } else {
            Err(Error::Domain(format!("grade group {group} outside 0..=5")))
        }
    }

    pub fn get(&self) -> u8 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SignificanceRule {
    min_grade_group: u8,
}

impl SignificanceRule {
    /// Gleason >= 3+4.
    pub const GLEASON_3_PLUS_4: SignificanceRule = SignificanceRule { min_grade_group: 2 };

    pub fn new(min_grade_group: u8) -> Result<Self> {
        if (1..=5).contains(&min_grade_group) {
            Ok(SignificanceRule { min_grade_group })
        } else {
            Err(Error::Domain(format!(
                "significance cutoff {min_grade_group} outside 1..=5"
            )))
        }
    }

    pub fn min_grade_group(&self) -> u8 {
        self.min_grade_group
    }
}

impl Default for SignificanceRule {
    fn default() -> Self {
        SignificanceRule::GLEASON_3_PLUS_4
    }
}

pub fn is_significant(grade: GradeGroup, rule: SignificanceRule) -> bool {
    grade.0 >= rule.min_grade_group
}

/// Sorted, non-overlapping runs of linear voxel offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RunLengthMask {
    runs: Vec<(usize, usize)>,
}

impl RunLengthMask {
    pub fn from_runs(runs: Vec<(usize, usize)>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::format("rle", "voxel set is empty"));
        }
        let mut prev_end = 0usize;
        for (idx, &(start, len)) in runs.iter().enumerate() {
            if len == 0 {
                return Err(Error::format("rle", format!("run {idx} has zero length")));
            }
            let end = start
                .checked_add(len)
                .ok_or_else(|| Error::format("rle", format!("run {idx} overflows")))?;
            if idx > 0 && start < prev_end {
                return Err(Error::format("rle", format!("run {idx} overlaps or is unsorted")));
            }
            prev_end = end;
        }
        Ok(RunLengthMask { runs })
    }

    /// Builds the canonical (maximally merged) encoding of a set of offsets.
    /// Offsets may arrive in any order and with duplicates.
    pub fn from_offsets(offsets: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = offsets.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for o in v {
            match runs.last_mut() {
                Some((s, l)) if *s + *l == o => *l += 1,
                _ => runs.push((o, 1)),
            }
        }
        RunLengthMask::from_runs(runs)
    }

    pub fn from_dense(mask: &[bool]) -> Result<Self> {
        RunLengthMask::from_offsets(mask.iter().enumerate().filter(|(_, m)| **m).map(|(o, _)| o))
    }

    pub fn runs(&self) -> &[(usize, usize)] {
        &self.runs
    }

    pub fn voxel_count(&self) -> usize {
        self.runs.iter().map(|r| r.1).sum()
    }

    pub fn offsets(&self) -> impl Iterator<Item = usize> + '_ {
        self.runs.iter().flat_map(|&(s, l)| s..s + l)
    }

    pub fn contains(&self, offset: usize) -> bool {
        let idx = self.runs.partition_point(|&(s, _)| s <= offset);
        idx > 0 && {
            let (s, l) = self.runs[idx - 1];
            offset < s + l
        }
    }

    /// One past the last covered offset.
    pub fn end(&self) -> usize {
        self.runs.last().map(|&(s, l)| s + l).unwrap_or(0)
    }

    pub fn check_within(&self, shape: Shape) -> Result<()> {
        if self.end() > shape.voxel_count() {
            Err(Error::ManifestIntegrity(format!(
                "RLE extends to offset {} beyond volume {shape}",
                self.end()
            )))
        } else {
            Ok(())
        }
    }

    pub fn to_dense(&self, voxels: usize) -> Vec<bool> {
        let mut out = vec![false; voxels];
        for o in self.offsets().filter(|o| *o < voxels) {
            out[o] = true;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiAnnotation {
    pub roi_id: String,
    pub voxels: RunLengthMask,
    pub score: SuspicionScore,
    pub pathology: Option<GradeGroup>,
}

impl RoiAnnotation {
    pub fn is_radiologist_positive(&self, cutoff: u8) -> bool {
        self.score.value() >= cutoff
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreKind {
    Targeted,
    Systematic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiopsyCore {
    pub core_id: String,
    pub kind: CoreKind,
    pub roi_id: Option<String>,
    pub grade: GradeGroup,
    pub location: VoxelIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Bundle directory, relative to the manifest's directory.
    pub bundle: PathBuf,
    pub rois: Vec<RoiAnnotation>,
    pub cores: Vec<BiopsyCore>,
    pub split: Split,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        for (idx, roi) in self.rois.iter().enumerate() {
            if self.rois[..idx].iter().any(|r| r.roi_id == roi.roi_id) {
                return Err(Error::ManifestIntegrity(format!(
                    "patient `{}`: duplicate ROI id `{}`",
                    self.patient_id, roi.roi_id
                )));
            }
        }
        for core in &self.cores {
            match (core.kind, &core.roi_id) {
                (CoreKind::Targeted, Some(id)) => {
                    if self.roi(id).is_none() {
                        return Err(Error::ManifestIntegrity(format!(
                            "patient `{}`: core `{}` references unknown ROI `{id}`",
                            self.patient_id, core.core_id
                        )));
                    }
                }
                (CoreKind::Targeted, None) => {
                    return Err(Error::ManifestIntegrity(format!(
                        "patient `{}`: targeted core `{}` has no roi_id",
                        self.patient_id, core.core_id
                    )))
                }
                (CoreKind::Systematic, Some(_)) => {
                    return Err(Error::ManifestIntegrity(format!(
                        "patient `{}`: systematic core `{}` references an ROI",
                        self.patient_id, core.core_id
                    )))
                }
                (CoreKind::Systematic, None) => {}
            }
        }
        Ok(())
    }

    pub fn roi(&self, roi_id: &str) -> Option<&RoiAnnotation> {
        self.rois.iter().find(|r| r.roi_id == roi_id)
    }

    pub fn positive_rois(&self, cutoff: u8) -> impl Iterator<Item = &RoiAnnotation> {
        self.rois.iter().filter(move |r| r.is_radiologist_positive(cutoff))
    }
}

/// Patient is positive iff any core, targeted or systematic, is significant.
pub fn patient_truth_label(record: &PatientRecord, rule: SignificanceRule) -> Result<bool> {
    if record.cores.is_empty() {
        return Err(Error::UndefinedTruth(record.patient_id.clone()));
    }
    Ok(record.cores.iter().any(|c| is_significant(c.grade, rule)))
}

/// Patient is radiologist-positive iff any ROI scores at or above `cutoff`.
pub fn radiologist_patient_call(record: &PatientRecord, cutoff: u8) -> bool {
    record.rois.iter().any(|r| r.is_radiologist_positive(cutoff))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub scale: ScoreScale,
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn new(scale: ScoreScale, patients: Vec<PatientRecord>) -> Result<Self> {
        let c = Cohort { scale, patients };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (idx, p) in self.patients.iter().enumerate() {
            if self.patients[..idx].iter().any(|q| q.patient_id == p.patient_id) {
                return Err(Error::ManifestIntegrity(format!(
                    "duplicate patient id `{}`",
                    p.patient_id
                )));
            }
            for roi in &p.rois {
                if roi.score.scale() != self.scale {
                    return Err(Error::ManifestIntegrity(format!(
                        "patient `{}`: ROI `{}` scored on a different scale",
                        p.patient_id, roi.roi_id
                    )));
                }
            }
            p.validate()?;
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatientRecord> {
        self.patients.iter().filter(move |p| p.split == split)
    }

    pub fn to_json(&self) -> String {
        let wire = ManifestWire {
            version: MANIFEST_VERSION,
            scale: self.scale,
            patients: self.patients.iter().map(PatientWire::from).collect(),
        };
        let mut s = serde_json::to_string_pretty(&wire).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Parses and validates a manifest without touching the filesystem.
    pub fn from_json(text: &str) -> Result<Self> {
        let wire: ManifestWire = serde_json::from_str(text)
            .map_err(|e| Error::format("cohort.json", e.to_string()))?;
        if wire.version != MANIFEST_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported manifest version {}", wire.version),
            ));
        }
        let patients = wire
            .patients
            .into_iter()
            .map(|p| p.into_record(wire.scale))
            .collect::<Result<Vec<_>>>()?;
        Cohort::new(wire.scale, patients)
    }
}

pub fn save_manifest(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, cohort.to_json()).map_err(|e| Error::io(path, e))
}

/// Loads a manifest and checks that every referenced bundle directory exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cohort = Cohort::from_json(&text)?;
    for p in &cohort.patients {
        let dir = bundle_dir(path, p);
        if !dir.join("meta.json").is_file() {
            return Err(Error::MissingFile {
                patient: p.patient_id.clone(),
                path: dir,
            });
        }
    }
    Ok(cohort)
}

/// Absolute-or-relative path of a patient's bundle given the manifest location.
pub fn bundle_dir(manifest_path: &Path, record: &PatientRecord) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&record.bundle)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestWire {
    version: u32,
    scale: ScoreScale,
    patients: Vec<PatientWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientWire {
    patient_id: String,
    bundle: PathBuf,
    rois: Vec<RoiWire>,
    cores: Vec<CoreWire>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoiWire {
    roi_id: String,
    score: u8,
    rle: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pathology: Option<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoreWire {
    core_id: String,
    kind: CoreKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    roi_id: Option<String>,
    grade: u8,
    ijk: [usize; 3],
}

impl From<&PatientRecord> for PatientWire {
    fn from(p: &PatientRecord) -> Self {
        PatientWire {
            patient_id: p.patient_id.clone(),
            bundle: p.bundle.clone(),
            rois: p
                .rois
                .iter()
                .map(|r| RoiWire {
                    roi_id: r.roi_id.clone(),
                    score: r.score.value(),
                    rle: r.voxels.runs().to_vec(),
                    pathology: r.pathology.map(|g| g.get()),
                })
                .collect(),
            cores: p
                .cores
                .iter()
                .map(|c| CoreWire {
                    core_id: c.core_id.clone(),
                    kind: c.kind,
                    roi_id: c.roi_id.clone(),
                    grade: c.grade.get(),
                    ijk: [c.location.i, c.location.j, c.location.k],
                })
                .collect(),
            split: p.split,
        }
    }
}

impl PatientWire {
    fn into_record(self, scale: ScoreScale) -> Result<PatientRecord> {
        let pid = self.patient_id;
        let rois = self
            .rois
            .into_iter()
            .map(|r| {
                let ctx = |e: Error| {
                    Error::format(format!("patients[{pid}].rois[{}]", r.roi_id), e.to_string())
                };
                Ok(RoiAnnotation {
                    voxels: RunLengthMask::from_runs(r.rle.clone()).map_err(ctx)?,
                    score: SuspicionScore::new(scale, r.score).map_err(ctx)?,
                    pathology: r.pathology.map(GradeGroup::new).transpose().map_err(ctx)?,
                    roi_id: r.roi_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cores = self
            .cores
            .into_iter()
            .map(|c| {
                let grade = GradeGroup::new(c.grade).map_err(|e| {
                    Error::format(format!("patients[{pid}].cores[{}]", c.core_id), e.to_string())
                })?;
                Ok(BiopsyCore {
                    core_id: c.core_id,
                    kind: c.kind,
                    roi_id: c.roi_id,
                    grade,
                    location: VoxelIndex::new(c.ijk[0], c.ijk[1], c.ijk[2]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PatientRecord {
            patient_id: pid,
            bundle: self.bundle,
            rois,
            cores,
            split: self.split,
        })
    }
}
