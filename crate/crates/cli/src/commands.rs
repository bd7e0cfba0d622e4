use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use radpos::classifier::VoxelClassifierModel;
use radpos::cohort::{bundle_dir, load_manifest, Cohort, PatientRecord, ScoreScale, Split, MANIFEST_FILE};
use radpos::fusion::{level_counts, CaseSummary, Level};
use radpos::metrics::{Report, ReportRow};
use radpos::phantom::{build_cohort, PhantomTruth, TRUTH_FILE};
use radpos::pipeline::{infer_all, score_cutoffs, summarize_cohort, train_model};
use radpos::selftest;
use radpos::volume::{load_bundle, save_bundle, VolumeBundle};
use radpos::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, SplitChoice};
use crate::manifest::RunManifest;
use crate::{Command, Common};

pub const MODEL_FILE: &str = "model.bin";
pub const TRAIN_HISTORY_FILE: &str = "train_history.json";
pub const PHANTOM_CONFIG_FILE: &str = "phantom.toml";
pub const FUSION_FILE: &str = "fusion.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const REPORT_FILE: &str = "report.csv";

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Phantom { common, n, out } => phantom(&common, n, &out),
        Command::Train { common, cohort, out } => train(&common, &cohort, &out),
        Command::Infer {
            common,
            cohort,
            model,
            out,
        } => infer(&common, &cohort, &model, &out),
        Command::Fuse {
            common,
            cohort,
            probs,
            out,
        } => evaluate(&common, &cohort, &probs, &out, Mode::Fuse),
        Command::Sweep {
            common,
            cohort,
            probs,
            out,
        } => evaluate(&common, &cohort, &probs, &out, Mode::Sweep),
        Command::Report { common, sweep, out } => report(&common, &sweep, &out),
        Command::Selftest { common, out } => run_selftest(&common, out.as_deref()),
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.phantom.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(l) = common.layout {
        cfg.pipeline.layout = l.into();
    }
    if let Some(c) = common.cutoff {
        cfg.pipeline.cutoff = c;
    }
    if let Some(g) = common.grade_min {
        cfg.pipeline.grade_min = g;
    }
    if let Some(t) = &common.thresholds {
        cfg.pipeline.thresholds = t.clone();
    }
    if let Some(s) = &common.controlled_sen {
        cfg.pipeline.controlled_sen = s.clone();
    }
    if let Some(s) = common.split {
        cfg.pipeline.split = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

struct LoadedCohort {
    manifest: PathBuf,
    cohort: Cohort,
    bundles: Vec<VolumeBundle>,
}

fn load_cohort(path: &Path) -> Result<LoadedCohort> {
    let manifest = manifest_path(path);
    let cohort = load_manifest(&manifest)?;
    let bundles = cohort
        .patients
        .par_iter()
        .map(|p| load_bundle(bundle_dir(&manifest, p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedCohort {
        manifest,
        cohort,
        bundles,
    })
}

fn selected(split: SplitChoice, record: &PatientRecord) -> bool {
    match split {
        SplitChoice::All => true,
        SplitChoice::Train => record.split == Split::Train,
        SplitChoice::Test => record.split != Split::Train,
    }
}

fn phantom(common: &Common, n: Option<usize>, out: &Path) -> Result<ExitCode> {
    let mut cfg = resolve(common)?;
    if let Some(n) = n {
        cfg.phantom.n_patients = n;
    }
    cfg.validate()?;
    let mut m = RunManifest::new("phantom", &cfg, Some(cfg.phantom.seed));
    if let Some(c) = &common.config {
        m.input(c)?;
    }
    let cohort = build_cohort(&cfg.phantom)?;
    cohort.write(out, &cfg.phantom)?;
    let cfg_path = out.join(PHANTOM_CONFIG_FILE);
    write_text(&cfg_path, &cfg.phantom.to_toml_string())?;
    m.output(&out.join(MANIFEST_FILE));
    m.output(&cfg_path);
    m.write(out)?;
    log::info!("wrote {} patients to {}", cohort.records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct HistoryFile<'a> {
    layout: String,
    training_patients: usize,
    losses: &'a [f64],
    final_step: f64,
}

fn train(common: &Common, cohort_path: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let loaded = load_cohort(cohort_path)?;
    let mut m = RunManifest::new("train", &cfg, Some(cfg.train.seed));
    m.input(&loaded.manifest)?;
    let (model, history) = train_model(&loaded.cohort.patients, &loaded.bundles, &cfg.pipeline())?;
    create_dir(out)?;
    let model_path = out.join(MODEL_FILE);
    model.save(&model_path)?;
    let hist = HistoryFile {
        layout: model.layout.to_string(),
        training_patients: loaded
            .cohort
            .patients
            .iter()
            .filter(|p| p.split == Split::Train)
            .count(),
        losses: &history.losses,
        final_step: history.final_step,
    };
    let hist_path = out.join(TRAIN_HISTORY_FILE);
    let mut text = serde_json::to_string_pretty(&hist).expect("history serializes");
    text.push('\n');
    write_text(&hist_path, &text)?;
    m.output(&model_path);
    m.output(&hist_path);
    m.write(out)?;
    Ok(ExitCode::SUCCESS)
}

fn infer(common: &Common, cohort_path: &Path, model_path: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let model = VoxelClassifierModel::load(model_path)?;
    if common.layout.is_some() && cfg.pipeline.layout != model.layout {
        return Err(Error::Layout(format!(
            "--layout {} does not match model layout {}",
            cfg.pipeline.layout, model.layout
        )));
    }
    let loaded = load_cohort(cohort_path)?;
    let mut m = RunManifest::new("infer", &cfg, None);
    m.input(&loaded.manifest)?;
    m.input(model_path)?;
    let (records, bundles): (Vec<PatientRecord>, Vec<VolumeBundle>) = loaded
        .cohort
        .patients
        .iter()
        .zip(&loaded.bundles)
        .filter(|(r, _)| selected(cfg.pipeline.split, r))
        .map(|(r, b)| (r.clone(), b.clone()))
        .unzip();
    let maps = infer_all(&model, &records, &bundles, cfg.pipeline.cutoff)?;
    create_dir(out)?;
    for (r, map) in records.iter().zip(&maps) {
        let dir = out.join(&r.patient_id);
        save_bundle(map, &dir)?;
        m.output(&dir);
    }
    m.write(out)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Fuse,
    Sweep,
}

fn load_cases(
    cfg: &RunConfig,
    cohort_path: &Path,
    probs: &Path,
    m: &mut RunManifest,
) -> Result<(ScoreScale, Vec<CaseSummary>)> {
    let loaded = load_cohort(cohort_path)?;
    m.input(&loaded.manifest)?;
    m.input(probs)?;
    let mut records = Vec::new();
    let mut bundles = Vec::new();
    for (r, b) in loaded.cohort.patients.iter().zip(&loaded.bundles) {
        if selected(cfg.pipeline.split, r) {
            records.push(r.clone());
            bundles.push(b.clone());
        }
    }
    let maps = records
        .par_iter()
        .map(|r| {
            let dir = probs.join(&r.patient_id);
            if !dir.is_dir() {
                return Err(Error::MissingFile {
                    patient: r.patient_id.clone(),
                    path: dir,
                });
            }
            load_bundle(dir)
        })
        .collect::<Result<Vec<_>>>()?;
    let truth_path = loaded.manifest.parent().unwrap_or(Path::new("")).join(TRUTH_FILE);
    let truth = if truth_path.is_file() {
        m.input(&truth_path)?;
        Some(PhantomTruth::load(&truth_path)?)
    } else {
        log::warn!("{} not found: zone level skipped", truth_path.display());
        None
    };
    let cases = summarize_cohort(&records, &bundles, &maps, truth.as_ref(), &cfg.pipeline())?;
    Ok((loaded.cohort.scale, cases))
}

fn evaluate(common: &Common, cohort_path: &Path, probs: &Path, out: &Path, mode: Mode) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let name = match mode {
        Mode::Fuse => "fuse",
        Mode::Sweep => "sweep",
    };
    let mut m = RunManifest::new(name, &cfg, None);
    let (scale, cases) = load_cases(&cfg, cohort_path, probs, &mut m)?;
    let rule = cfg.rule();
    let cutoff = cfg.pipeline.cutoff;
    let with_zones = !cases.is_empty() && cases.iter().all(|c| c.zone_truth.is_some());
    let cutoffs = match mode {
        Mode::Fuse => vec![cutoff],
        Mode::Sweep => score_cutoffs(scale),
    };
    let mut rows = Vec::new();
    for level in Level::ALL {
        if level == Level::Zone && !with_zones {
            continue;
        }
        for &c in &cutoffs {
            let counts = level_counts(level, &cases, rule, c, 0.0)?;
            rows.push(ReportRow::from_counts(c as f64, &counts.rad));
        }
        let per_t = cfg
            .pipeline
            .thresholds
            .iter()
            .map(|&t| Ok((t, level_counts(level, &cases, rule, cutoff, t)?)))
            .collect::<Result<Vec<_>>>()?;
        for (t, c) in &per_t {
            rows.push(ReportRow::from_counts(*t, &c.ml));
        }
        for (t, c) in &per_t {
            rows.push(ReportRow::from_counts(*t, &c.combined));
        }
    }
    let report = Report {
        rows,
        controlled: vec![],
    };
    create_dir(out)?;
    let path = out.join(match mode {
        Mode::Fuse => FUSION_FILE,
        Mode::Sweep => SWEEP_FILE,
    });
    report.write(&path)?;
    m.output(&path);
    m.write(out)?;
    Ok(ExitCode::SUCCESS)
}

fn report(common: &Common, sweep: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let mut m = RunManifest::new("report", &cfg, None);
    m.input(sweep)?;
    let report = Report::read(sweep)?.with_controlled(&cfg.pipeline.controlled_sen);
    for c in &report.controlled {
        match c.spc {
            Some(spc) => println!(
                "{} {} spc@sen{:.4} = {:.4}%",
                c.level,
                c.source,
                c.target_sen,
                spc * 100.0
            ),
            None => println!("{} {} spc@sen{:.4} = n/a", c.level, c.source, c.target_sen),
        }
    }
    create_dir(out)?;
    let path = out.join(REPORT_FILE);
    report.write(&path)?;
    m.output(&path);
    m.write(out)?;
    Ok(ExitCode::SUCCESS)
}

fn run_selftest(common: &Common, out: Option<&Path>) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let checks = selftest::run_all();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(out) = out {
        RunManifest::new("selftest", &cfg, None).write(out)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Domain(format!("selftest failed: {}", failed.join(", "))))
    }
}
