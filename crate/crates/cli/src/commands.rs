//! The `gen`, `train`, `sweep`, `report` and `check` commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use starfm_core::metrics::CalibrationReport;
use starfm_core::selfcheck::{gradient_suite, oracle_suite};
use starfm_core::shiftgen::{
    gen_classification, gen_volumes_with, LabelRule, LabeledVolume, ShiftSpec, ShiftedDataset, SiteParams, SyntheticVolumeSet,
    VolumeSpec,
};
use starfm_core::trainer::{sweep as run_sweep, train as run_train, RunReport, SegmentationData, SweepSummaryRow, Task, TrainData};

use crate::canonical::format_f64;
use crate::config::{ExperimentConfig, ReportFormat};
use crate::error::{CliError, CliResult};
use crate::io::{self, Manifest};

pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const LOSS_CSV: &str = "loss_curve.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const SWEEP_CSV: &str = "sweep_summary.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const RELIABILITY_CSV: &str = "reliability.csv";
pub const BOUNDS_CSV: &str = "bounds_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetFile {
    spec: ShiftSpec,
    rule: LabelRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VolumesFile {
    spec: VolumeSpec,
    site_params: Vec<SiteParams>,
}

fn volume_stem(data: &Path, site: usize, vol: usize) -> (PathBuf, PathBuf) {
    let dir = data.join(format!("site{site}"));
    (dir.join(format!("vol{vol:03}_image.raw")), dir.join(format!("vol{vol:03}_mask.raw")))
}

/// Generates the dataset described by `cfg` under `<output_dir>/data` and
/// writes a checksum manifest of every emitted file.
pub fn gen(cfg: &ExperimentConfig) -> CliResult<Manifest> {
    let data = cfg.data_dir();
    let mut files = Vec::new();
    match cfg.task {
        Task::Vision => {
            let spec = cfg.shift.as_ref().expect("validated config");
            let ds = gen_classification(spec)?;
            let p = data.join("dataset.json");
            io::write_json(&p, &DatasetFile { spec: ds.spec.clone(), rule: ds.rule.clone() })?;
            files.push(p);
            let p = data.join("source.csv");
            io::write_atomic(&p, &io::batch_csv(&ds.source, Some(&ds.source_weights))?)?;
            files.push(p);
            let p = data.join("target.csv");
            io::write_atomic(&p, &io::batch_csv(&ds.target, None)?)?;
            files.push(p);
        }
        Task::Medical => {
            let spec = cfg.volumes.as_ref().expect("validated config");
            let set = gen_volumes_with(spec)?;
            let p = data.join("volumes.json");
            io::write_json(&p, &VolumesFile { spec: set.spec.clone(), site_params: set.site_params.clone() })?;
            files.push(p);
            for (s, site) in set.sites.iter().enumerate() {
                for (v, lv) in site.iter().enumerate() {
                    let (img, mask) = volume_stem(&data, s, v);
                    files.extend(io::write_image(&img, &lv.image)?);
                    files.extend(io::write_mask(&mask, &lv.mask)?);
                }
            }
        }
    }
    let manifest = io::build_manifest(&data, &files)?;
    io::write_json(&data.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub enum LoadedData {
    Classification(ShiftedDataset),
    Segmentation(SegmentationData),
}

impl LoadedData {
    pub fn as_train_data(&self) -> TrainData<'_> {
        match self {
            LoadedData::Classification(d) => TrainData::Classification(d),
            LoadedData::Segmentation(d) => TrainData::Segmentation(d),
        }
    }
}

fn missing_dataset(data: &Path) -> CliError {
    CliError::input(format!("no dataset in {}; run `starfm gen` with this config first", data.display()))
}

/// Reads the dataset written by [`gen`] and checks it matches `cfg`.
pub fn load_data(cfg: &ExperimentConfig) -> CliResult<LoadedData> {
    let data = cfg.data_dir();
    match cfg.task {
        Task::Vision => {
            let meta = data.join("dataset.json");
            if !meta.is_file() {
                return Err(missing_dataset(&data));
            }
            let file: DatasetFile = io::read_json(&meta)?;
            if Some(&file.spec) != cfg.shift.as_ref() {
                return Err(CliError::input(format!("{}: dataset was generated from a different shift spec", meta.display())));
            }
            let (source, weights) = io::read_batch_csv(&data.join("source.csv"), file.spec.dim)?;
            let (target, _) = io::read_batch_csv(&data.join("target.csv"), file.spec.dim)?;
            let source_weights = weights.unwrap_or_default();
            Ok(LoadedData::Classification(ShiftedDataset { spec: file.spec, rule: file.rule, source, target, source_weights }))
        }
        Task::Medical => {
            let meta = data.join("volumes.json");
            if !meta.is_file() {
                return Err(missing_dataset(&data));
            }
            let file: VolumesFile = io::read_json(&meta)?;
            if Some(&file.spec) != cfg.volumes.as_ref() {
                return Err(CliError::input(format!("{}: dataset was generated from a different volume spec", meta.display())));
            }
            let sites = (0..file.spec.n_sites)
                .map(|s| {
                    (0..file.spec.volumes_per_site)
                        .map(|v| {
                            let (img, mask) = volume_stem(&data, s, v);
                            Ok(LabeledVolume { image: io::read_image(&img)?, mask: io::read_mask(&mask)? })
                        })
                        .collect::<CliResult<Vec<_>>>()
                })
                .collect::<CliResult<Vec<_>>>()?;
            let set = SyntheticVolumeSet { spec: file.spec, site_params: file.site_params, sites };
            Ok(LoadedData::Segmentation(SegmentationData::split(&set, cfg.n_train_volumes())?))
        }
    }
}

/// Contents of `report.json`: the effective config and the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub config: ExperimentConfig,
    pub run: RunReport,
}

fn metrics_table(r: &RunReport) -> (Vec<String>, Vec<Vec<String>>) {
    let f = |v: f64| format_f64(v);
    if let Some(c) = &r.classification {
        let header = ["split", "n", "accuracy", "ece", "brier", "cmp"].map(String::from).to_vec();
        let rows = [("source", &c.source), ("target", &c.target)]
            .iter()
            .map(|(name, m)| vec![name.to_string(), m.n.to_string(), f(m.accuracy), f(m.ece), f(m.brier), f(m.cmp)])
            .collect();
        return (header, rows);
    }
    let header = ["site", "volumes", "dsc", "hd95", "hd95_undefined", "ece_voxel", "cmp_3d", "brier"].map(String::from).to_vec();
    let rows = r
        .segmentation
        .iter()
        .flat_map(|s| &s.sites)
        .map(|m| {
            vec![
                m.site.to_string(),
                m.volumes.to_string(),
                f(m.dsc),
                io::opt_f64(m.hd95),
                m.hd95_undefined.to_string(),
                f(m.ece_voxel),
                f(m.cmp_3d),
                f(m.brier),
            ]
        })
        .collect();
    (header, rows)
}

/// Trains on the generated dataset; writes `report.json`, the checkpoint and
/// (with the csv format) per-split metrics and the loss curve.
pub fn train(cfg: &ExperimentConfig) -> CliResult<RunFile> {
    let data = load_data(cfg)?;
    let model = cfg.build_model()?;
    let run = run_train(&model, data.as_train_data(), &cfg.train)?;
    let out = &cfg.output_dir;
    let file = RunFile { config: cfg.clone(), run: run.report };
    io::write_json(&out.join(REPORT), &file)?;
    io::write_atomic(&out.join(CHECKPOINT), &io::checkpoint_bytes(&run.model))?;
    if cfg.wants(ReportFormat::Csv) {
        let (header, rows) = metrics_table(&file.run);
        io::write_atomic(&out.join(METRICS_CSV), &io::csv_bytes(&header, &rows)?)?;
        let rows: Vec<Vec<String>> =
            file.run.loss_curve.iter().enumerate().map(|(e, l)| vec![(e + 1).to_string(), format_f64(*l)]).collect();
        io::write_atomic(&out.join(LOSS_CSV), &io::csv_bytes(&["epoch".into(), "loss".into()], &rows)?)?;
    }
    Ok(file)
}

fn quality_column(task: Task) -> &'static str {
    match task {
        Task::Vision => "accuracy",
        Task::Medical => "dsc",
    }
}

pub fn sweep_header(task: Task) -> Vec<String> {
    let mut h = vec!["lambda1", "lambda2", quality_column(task), "ece"];
    if task == Task::Medical {
        h.push("hd95");
    }
    h.extend(["dgg", "status"]);
    h.into_iter().map(String::from).collect()
}

fn sweep_rows(task: Task, rows: &[SweepSummaryRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            let mut v = vec![format_f64(r.lambda1), format_f64(r.lambda2), io::opt_f64(r.quality), io::opt_f64(r.ece)];
            if task == Task::Medical {
                v.push(io::opt_f64(r.hd95));
            }
            v.extend([io::opt_f64(r.dgg), r.status.clone()]);
            v
        })
        .collect()
}

/// Parses a sweep summary CSV back into rows.
pub fn read_sweep_csv(path: &Path) -> CliResult<Vec<SweepSummaryRow>> {
    let (header, rows) = io::read_csv(path)?;
    let task = if header.iter().any(|h| h == "dsc") { Task::Medical } else { Task::Vision };
    if header != sweep_header(task) {
        return Err(CliError::input(format!("{}: unexpected columns {header:?}", path.display())));
    }
    let opt = |s: &String| -> CliResult<Option<f64>> { if s.is_empty() { Ok(None) } else { io::parse_f64(s, "sweep").map(Some) } };
    rows.iter()
        .map(|r| {
            let medical = task == Task::Medical;
            let off = usize::from(medical);
            Ok(SweepSummaryRow {
                lambda1: io::parse_f64(&r[0], "lambda1")?,
                lambda2: io::parse_f64(&r[1], "lambda2")?,
                quality: opt(&r[2])?,
                ece: opt(&r[3])?,
                hd95: if medical { opt(&r[4])? } else { None },
                dgg: opt(&r[4 + off])?,
                status: r[5 + off].clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    pub config: ExperimentConfig,
    pub rows: Vec<SweepSummaryRow>,
}

/// One training run per grid point (the config's `sweep` or the default
/// one-axis grid). A failing point is marked in its row and does not stop
/// the others.
pub fn sweep(cfg: &ExperimentConfig) -> CliResult<Vec<SweepSummaryRow>> {
    let data = load_data(cfg)?;
    let model = cfg.build_model()?;
    let grid = cfg.sweep.clone().unwrap_or_default();
    let rows: Vec<SweepSummaryRow> = run_sweep(&model, data.as_train_data(), &grid, &cfg.train)?.iter().map(|r| r.summary()).collect();
    let out = &cfg.output_dir;
    if cfg.wants(ReportFormat::Csv) {
        io::write_atomic(&out.join(SWEEP_CSV), &io::csv_bytes(&sweep_header(cfg.task), &sweep_rows(cfg.task, &rows))?)?;
    }
    if cfg.wants(ReportFormat::Json) {
        io::write_json(&out.join(SWEEP_JSON), &SweepFile { config: cfg.clone(), rows: rows.clone() })?;
    }
    Ok(rows)
}

fn calibration_rows(split: &str, c: &CalibrationReport) -> Vec<Vec<String>> {
    c.bins
        .iter()
        .enumerate()
        .map(|(b, s)| {
            vec![
                split.to_string(),
                b.to_string(),
                format_f64(s.lower),
                format_f64(s.upper),
                s.count.to_string(),
                format_f64(s.mean_confidence),
                format_f64(s.accuracy),
            ]
        })
        .collect()
}

pub const RELIABILITY_HEADER: [&str; 7] = ["split", "bin", "lower", "upper", "count", "mean_confidence", "accuracy"];
pub const BOUNDS_HEADER: [&str; 5] = ["kind", "index", "lhs", "rhs", "holds"];

/// Reliability-diagram bins per split or site and a bounds table with one
/// `holds` flag per evaluated inequality.
pub fn report(run_dir: &Path) -> CliResult<(Vec<Vec<String>>, Vec<Vec<String>>)> {
    let path = run_dir.join(REPORT);
    if !path.is_file() {
        return Err(CliError::input(format!("no run report at {}; run `starfm train` first", path.display())));
    }
    let file: RunFile = io::read_json(&path)?;
    let r = &file.run;
    let mut reliability = Vec::new();
    if let Some(c) = &r.classification {
        reliability.extend(calibration_rows("source", &c.source.calibration));
        reliability.extend(calibration_rows("target", &c.target.calibration));
    }
    for s in r.segmentation.iter().flat_map(|s| &s.sites) {
        reliability.extend(calibration_rows(&format!("site{}", s.site), &s.calibration));
    }
    let mut bounds = Vec::new();
    let row = |kind: &str, i: usize, lhs: f64, rhs: f64, holds: bool| {
        vec![kind.to_string(), i.to_string(), format_f64(lhs), format_f64(rhs), holds.to_string()]
    };
    if let Some(b) = &r.risk_bound {
        bounds.push(row("risk_bound", 0, b.risk_tgt, b.bound_value, b.risk_tgt <= b.bound_value));
        bounds.push(row("risk_bound_c0", 0, b.risk_tgt, b.bound_value_c0, b.risk_tgt <= b.bound_value_c0));
        bounds.push(row("cauchy_schwarz", 0, b.cov_term.abs(), b.cauchy_schwarz_bound, b.cauchy_schwarz_holds));
    }
    for (i, e) in r.ece_bounds.iter().enumerate() {
        bounds.push(row("ece_voxel", i, e.ece_measured, e.bound_value, e.holds));
    }
    let header = |h: &[&str]| h.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    io::write_atomic(&run_dir.join(RELIABILITY_CSV), &io::csv_bytes(&header(&RELIABILITY_HEADER), &reliability)?)?;
    io::write_atomic(&run_dir.join(BOUNDS_CSV), &io::csv_bytes(&header(&BOUNDS_HEADER), &bounds)?)?;
    Ok((reliability, bounds))
}

/// One line per property: name, pass/fail and detail.
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The oracle-equivalence and gradient suites.
pub fn check(instances: usize, seed: u64) -> CliResult<Vec<CheckLine>> {
    let mut lines: Vec<CheckLine> = oracle_suite(instances, seed)
        .into_iter()
        .map(|c| CheckLine {
            name: format!("oracle/{}", c.name),
            passed: c.passed(),
            detail: match &c.first_failure {
                Some(f) => format!("{} of {} mismatched; first: {f}", c.mismatches, c.instances),
                None => format!("{} instances, worst relative gap {:.3e}", c.instances, c.worst),
            },
        })
        .collect();
    for g in gradient_suite(100, seed)? {
        lines.push(CheckLine {
            name: format!("gradient/{:?}/{:?}", g.model, g.objective).to_lowercase(),
            passed: g.passed(100),
            detail: format!(
                "{} coordinates ({} skipped at kinks), max relative error {:.3e}",
                g.report.checked_coordinates, g.report.skipped_coordinates, g.report.max_relative_error
            ),
        });
    }
    Ok(lines)
}
