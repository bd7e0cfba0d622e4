//! Sensitivity/specificity, threshold sweeps, interpolation at a controlled
//! sensitivity and the CSV report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{ConfusionCounts, ExpectedCounts, Level, Source};

/// `None` marks an undefined rate (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub sen: Option<f64>,
    pub spc: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

pub fn rates(c: &ConfusionCounts) -> Rates {
    rates_from(c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64)
}

pub fn expected_rates(c: &ExpectedCounts) -> Rates {
    rates_from(c.tp, c.fp, c.tn, c.fn_)
}

fn rates_from(tp: f64, fp: f64, tn: f64, fn_: f64) -> Rates {
    Rates {
        sen: ratio(tp, tp + fn_),
        spc: ratio(tn, tn + fp),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// `t` for ML sweeps, the score cutoff for radiologist curves.
    pub threshold: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub counts: Option<ConfusionCounts>,
}

impl OperatingPoint {
    pub fn new(threshold: f64, sensitivity: f64, specificity: f64) -> Self {
        OperatingPoint {
            threshold,
            sensitivity: Some(sensitivity),
            specificity: Some(specificity),
            counts: None,
        }
    }

    pub fn from_counts(threshold: f64, counts: ConfusionCounts) -> Self {
        let r = rates(&counts);
        OperatingPoint {
            threshold,
            sensitivity: r.sen,
            specificity: r.spc,
            counts: Some(counts),
        }
    }
}

/// Operating points sorted by descending sensitivity (undefined last), ties
/// by ascending threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub level: Level,
    pub source: Source,
    pub points: Vec<OperatingPoint>,
}

impl SweepCurve {
    pub fn new(level: Level, source: Source, mut points: Vec<OperatingPoint>) -> Self {
        points.sort_by(|a, b| {
            let sa = a.sensitivity.unwrap_or(f64::NEG_INFINITY);
            let sb = b.sensitivity.unwrap_or(f64::NEG_INFINITY);
            sb.total_cmp(&sa).then(a.threshold.total_cmp(&b.threshold))
        });
        SweepCurve {
            level,
            source,
            points,
        }
    }
}

/// Evaluates `evaluator` at each threshold. Thresholds must be distinct and
/// lie in `[0, 1]`. Level and source are taken from the first tabulation.
pub fn sweep<F>(evaluator: F, thresholds: &[f64]) -> Result<SweepCurve>
where
    F: Fn(f64) -> Result<ConfusionCounts>,
{
    for (i, t) in thresholds.iter().enumerate() {
        if !(0.0..=1.0).contains(t) {
            return Err(Error::Domain(format!("threshold {t} outside [0, 1]")));
        }
        if thresholds[..i].contains(t) {
            return Err(Error::Domain(format!("duplicate threshold {t}")));
        }
    }
    let mut points = Vec::with_capacity(thresholds.len());
    let mut tag = None;
    for &t in thresholds {
        let c = evaluator(t)?;
        tag.get_or_insert((c.level, c.source));
        points.push(OperatingPoint::from_counts(t, c));
    }
    let (level, source) = tag.unwrap_or((Level::Patient, Source::RadPlusMl));
    Ok(SweepCurve::new(level, source, points))
}

/// Linear interpolation of specificity at `target` sensitivity between the
/// tightest bracketing pair of defined points. A point whose sensitivity
/// equals `target` is returned as is; targets outside the observed range are
/// refused.
pub fn interpolate_at_sensitivity(curve: &SweepCurve, target: f64) -> Result<f64> {
    let defined: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| Some((p.sensitivity?, p.specificity?)))
        .collect();
    if defined.is_empty() || !target.is_finite() {
        return Err(Error::Extrapolation {
            target,
            min: f64::NAN,
            max: f64::NAN,
        });
    }
    if let Some((_, spc)) = defined.iter().find(|(s, _)| *s == target) {
        return Ok(*spc);
    }
    let lo = defined
        .iter()
        .filter(|(s, _)| *s < target)
        .fold(None::<(f64, f64)>, |best, p| match best {
            Some(b) if b.0 >= p.0 => Some(b),
            _ => Some(*p),
        });
    let hi = defined
        .iter()
        .filter(|(s, _)| *s > target)
        .fold(None::<(f64, f64)>, |best, p| match best {
            Some(b) if b.0 <= p.0 => Some(b),
            _ => Some(*p),
        });
    match (lo, hi) {
        (Some((sen_lo, spc_lo)), Some((sen_hi, spc_hi))) => {
            Ok(spc_lo + (target - sen_lo) / (sen_hi - sen_lo) * (spc_hi - spc_lo))
        }
        _ => {
            let min = defined.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let max = defined.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            Err(Error::Extrapolation { target, min, max })
        }
    }
}

pub const REPORT_HEADER: &str = "level,source,threshold,tp,fp,tn,fn,sen,spc";
pub const CONTROLLED_MARKER: &str = "# controlled_sen";
pub const CONTROLLED_HEADER: &str = "level,source,target_sen,spc,spc_pct";

/// One line of the confusion CSV. Counts are real-valued so expected counts
/// fit the same schema.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub level: Level,
    pub source: Source,
    pub threshold: f64,
    pub counts: [f64; 4],
    pub sen: Option<f64>,
    pub spc: Option<f64>,
}

impl ReportRow {
    pub fn from_counts(threshold: f64, c: &ConfusionCounts) -> Self {
        let r = rates(c);
        ReportRow {
            level: c.level,
            source: c.source,
            threshold,
            counts: c.as_array().map(|v| v as f64),
            sen: r.sen,
            spc: r.spc,
        }
    }

    pub fn from_expected(threshold: f64, c: &ExpectedCounts) -> Self {
        let r = expected_rates(c);
        ReportRow {
            level: c.level,
            source: Source::RadPlusMl,
            threshold,
            counts: [c.tp, c.fp, c.tn, c.fn_],
            sen: r.sen,
            spc: r.spc,
        }
    }

    fn point(&self) -> OperatingPoint {
        OperatingPoint {
            threshold: self.threshold,
            sensitivity: self.sen,
            specificity: self.spc,
            counts: None,
        }
    }
}

/// Specificity at a controlled sensitivity; `None` when the curve does not
/// reach the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlledRow {
    pub level: Level,
    pub source: Source,
    pub target_sen: f64,
    pub spc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub controlled: Vec<ControlledRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "NaN".into(),
    }
}

impl Report {
    /// Groups rows into curves per `(level, source)` in first-seen order.
    pub fn curves(&self) -> Vec<SweepCurve> {
        let mut keys: Vec<(Level, Source)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.level, r.source)) {
                keys.push((r.level, r.source));
            }
        }
        keys.into_iter()
            .map(|(level, source)| {
                let pts = self
                    .rows
                    .iter()
                    .filter(|r| r.level == level && r.source == source)
                    .map(ReportRow::point)
                    .collect();
                SweepCurve::new(level, source, pts)
            })
            .collect()
    }

    /// Adds one controlled-sensitivity row per curve and target, in curve order.
    pub fn with_controlled(mut self, targets: &[f64]) -> Self {
        let curves = self.curves();
        self.controlled.clear();
        for target in targets {
            for c in curves.iter().filter(|c| c.source != Source::MlOnPositives) {
                self.controlled.push(ControlledRow {
                    level: c.level,
                    source: c.source,
                    target_sen: *target,
                    spc: interpolate_at_sensitivity(c, *target).ok(),
                });
            }
        }
        self
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.level,
                r.source,
                r.threshold,
                r.counts[0],
                r.counts[1],
                r.counts[2],
                r.counts[3],
                fmt_opt(r.sen),
                fmt_opt(r.spc)
            );
        }
        if !self.controlled.is_empty() {
            s.push('\n');
            s.push_str(CONTROLLED_MARKER);
            s.push('\n');
            s.push_str(CONTROLLED_HEADER);
            s.push('\n');
            for c in &self.controlled {
                let pct = match c.spc {
                    Some(v) => format!("{:.4}", v * 100.0),
                    None => "NaN".into(),
                };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    c.level,
                    c.source,
                    c.target_sen,
                    fmt_opt(c.spc),
                    pct
                );
            }
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Report::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == REPORT_HEADER => {}
            _ => return Err(Error::format("header", format!("expected `{REPORT_HEADER}`"))),
        }
        let mut report = Report::default();
        let mut in_controlled = false;
        for (n, line) in lines {
            let line_no = n + 1;
            if line.is_empty() {
                continue;
            }
            if line == CONTROLLED_MARKER {
                in_controlled = true;
                continue;
            }
            if in_controlled && line == CONTROLLED_HEADER {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let field = |i: usize| fields.get(i).copied().unwrap_or("");
            let num = |i: usize, name: &str| -> Result<f64> {
                field(i)
                    .parse::<f64>()
                    .map_err(|_| Error::format(name, format!("line {line_no}: `{}`", field(i))))
            };
            let opt = |i: usize, name: &str| -> Result<Option<f64>> {
                let v = num(i, name)?;
                Ok((!v.is_nan()).then_some(v))
            };
            if in_controlled {
                if fields.len() != 5 {
                    return Err(Error::format("controlled_sen", format!("line {line_no}: expected 5 fields")));
                }
                report.controlled.push(ControlledRow {
                    level: field(0).parse()?,
                    source: field(1).parse()?,
                    target_sen: num(2, "target_sen")?,
                    spc: opt(3, "spc")?,
                });
            } else {
                if fields.len() != 9 {
                    return Err(Error::format("row", format!("line {line_no}: expected 9 fields")));
                }
                report.rows.push(ReportRow {
                    level: field(0).parse()?,
                    source: field(1).parse()?,
                    threshold: num(2, "threshold")?,
                    counts: [num(3, "tp")?, num(4, "fp")?, num(5, "tn")?, num(6, "fn")?],
                    sen: opt(7, "sen")?,
                    spc: opt(8, "spc")?,
                });
            }
        }
        Ok(report)
    }
}
