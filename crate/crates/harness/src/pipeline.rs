//! Standard, isotonic and bilevel pipelines, plus grid export and the
//! cross-run comparison table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use selfcal_core::bilevel::{train_bo4sc, train_standard};
use selfcal_core::calibration::{
    apply_isotonic, calibration_report, confidence_histogram, fit_isotonic, IsotonicMap,
    PredictionRecord,
};
use selfcal_core::data::{
    gen_bac_sim, gen_blobs, gen_spirals, split, LabeledDataset, Split, Standardizer,
};
use selfcal_core::model::{fold_standardization, init_params, predict, MlpArchitecture, MlpParams};
use selfcal_core::Tensor;

use crate::config::{DatasetSpec, ExperimentConfig, Method};
use crate::error::{HarnessError, Result};
use crate::io::{self, GridCell};

pub const REPORT_FILE: &str = "report.json";
pub const PARAMS_FILE: &str = "params.json";
pub const ISOTONIC_FILE: &str = "isotonic.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const BINS_FILE: &str = "bins.csv";
pub const HISTOGRAM_FILE: &str = "histogram.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const WEIGHTS_TRACE_FILE: &str = "weights_trace.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const VERDICT_FILE: &str = "verdict.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub dataset: String,
    pub seed: u64,
    pub n_test: usize,
    pub bins: usize,
    pub test_accuracy: f64,
    pub test_ece: f64,
    pub mean_confidence: f64,
    pub wall_clock_seconds: f64,
    /// File names inside the run directory.
    pub artifacts: Vec<String>,
}

/// Generates or reads the configured dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    Ok(match cfg.dataset {
        DatasetSpec::Blobs { n, classes, std } => gen_blobs(n, classes, std, cfg.seed)?,
        DatasetSpec::Spirals { n, noise_std } => gen_spirals(n, noise_std, cfg.seed)?,
        DatasetSpec::BacSim { n } => gen_bac_sim(n, cfg.seed)?,
        DatasetSpec::Csv {
            ref path,
            num_classes,
        } => io::load_csv(path, num_classes)?,
    })
}

/// Split data, standardised on training statistics, and the network shape.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: Split,
    pub standardizer: Standardizer,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub arch: MlpArchitecture,
}

impl Prepared {
    /// Maps parameters trained on standardised features to raw features.
    pub fn fold(&self, params: &MlpParams) -> Result<MlpParams> {
        Ok(fold_standardization(
            params,
            &self.standardizer.mean,
            &self.standardizer.scale,
        )?)
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let data = load_dataset(cfg)?;
    if cfg.split.total() != data.len() {
        return Err(HarnessError::Config(format!(
            "split {}/{}/{} does not add up to the {} samples of {}",
            cfg.split.n_train,
            cfg.split.n_val,
            cfg.split.n_test,
            data.len(),
            cfg.label()
        )));
    }
    let split = split(&data, cfg.split, cfg.seed)?;
    let standardizer = Standardizer::fit(&split.train.features)?;
    let arch = cfg.architecture.build(data.dim(), data.num_classes);
    arch.validate()?;
    Ok(Prepared {
        train: standardizer.apply_dataset(&split.train)?,
        val: standardizer.apply_dataset(&split.val)?,
        standardizer,
        split,
        arch,
    })
}

pub fn records(
    arch: &MlpArchitecture,
    params: &MlpParams,
    data: &LabeledDataset,
) -> Result<Vec<PredictionRecord>> {
    predict(arch, params, &data.features)?
        .into_iter()
        .zip(&data.labels)
        .map(|(out, &y)| {
            Ok(PredictionRecord::new(
                out.confidence,
                out.predicted_class,
                y,
            )?)
        })
        .collect()
}

/// Replaces each confidence by its isotonic value; classes are untouched.
pub fn recalibrate(map: &IsotonicMap, records: &[PredictionRecord]) -> Vec<PredictionRecord> {
    records
        .iter()
        .map(|r| PredictionRecord {
            confidence: apply_isotonic(map, r.confidence),
            ..*r
        })
        .collect()
}

/// Writes predictions, reliability bins, the confidence histogram and the
/// report for `records` into `dir`. `artifacts` lists files already written.
fn finish_run(
    cfg: &ExperimentConfig,
    method: Method,
    dir: &Path,
    records: &[PredictionRecord],
    mut artifacts: Vec<String>,
    started: Instant,
) -> Result<RunReport> {
    let cal = calibration_report(records, cfg.bins)?;
    io::write_predictions(&dir.join(PREDICTIONS_FILE), records)?;
    io::write_bins(&dir.join(BINS_FILE), &cal.bins)?;
    io::write_json(
        &dir.join(HISTOGRAM_FILE),
        &confidence_histogram(records, cfg.bins)?,
    )?;
    artifacts.extend([PREDICTIONS_FILE, BINS_FILE, HISTOGRAM_FILE].map(String::from));
    let report = RunReport {
        method,
        dataset: cfg.label(),
        seed: cfg.seed,
        n_test: records.len(),
        bins: cfg.bins,
        test_accuracy: cal.accuracy,
        test_ece: cal.ece,
        mean_confidence: cal.mean_confidence,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        artifacts,
    };
    io::write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Adam on the unweighted loss; parameters come back in raw feature space.
pub fn train_standard_model(cfg: &ExperimentConfig, prep: &Prepared) -> Result<MlpParams> {
    let theta0 = init_params(&prep.arch, cfg.seed);
    let s = &cfg.standard;
    let trained = train_standard(
        &prep.arch,
        &theta0,
        &prep.train,
        s.adam(),
        s.epochs,
        s.clamp_eps,
    )?;
    prep.fold(&trained)
}

pub fn run_standard(cfg: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    let prep = prepare(cfg)?;
    let params = train_standard_model(cfg, &prep)?;
    let dir = cfg.run_dir(Method::Standard);
    io::save_params(&dir.join(PARAMS_FILE), &prep.arch, &params)?;
    let recs = records(&prep.arch, &params, &prep.split.test)?;
    finish_run(
        cfg,
        Method::Standard,
        &dir,
        &recs,
        vec![PARAMS_FILE.into()],
        started,
    )
}

/// Fits the isotonic map on validation predictions of `params` and
/// evaluates the recalibrated test predictions.
pub fn calibrate_params(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    params: &MlpParams,
    started: Instant,
) -> Result<RunReport> {
    let map = fit_isotonic(&records(&prep.arch, params, &prep.split.val)?)?;
    let dir = cfg.run_dir(Method::Isoreg);
    io::save_params(&dir.join(PARAMS_FILE), &prep.arch, params)?;
    io::write_json(&dir.join(ISOTONIC_FILE), &map)?;
    let recs = recalibrate(&map, &records(&prep.arch, params, &prep.split.test)?);
    finish_run(
        cfg,
        Method::Isoreg,
        &dir,
        &recs,
        vec![PARAMS_FILE.into(), ISOTONIC_FILE.into()],
        started,
    )
}

/// Trains the Standard model afresh, then calibrates it.
pub fn run_isoreg(cfg: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    let prep = prepare(cfg)?;
    let params = train_standard_model(cfg, &prep)?;
    calibrate_params(cfg, &prep, &params, started)
}

/// Calibrates the parameters saved by an earlier Standard run.
pub fn calibrate_saved(cfg: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    let prep = prepare(cfg)?;
    let params = load_run_params(cfg, Method::Standard, &prep.arch)?;
    calibrate_params(cfg, &prep, &params, started)
}

pub fn run_bo4sc(cfg: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    let prep = prepare(cfg)?;
    let out = train_bo4sc(&prep.train, &prep.val, &prep.arch, &cfg.bo4sc, cfg.seed)?;
    let dir = cfg.run_dir(Method::Bo4sc);

    let misclassified: Vec<bool> = records(&prep.arch, &out.params, &prep.train)?
        .iter()
        .map(|r| !r.correct())
        .collect();
    let mut snapshots: Vec<(usize, &[f64])> = out
        .trace
        .snapshots
        .iter()
        .map(|s| (s.outer_iter, s.weights.as_slice()))
        .collect();
    snapshots.push((cfg.bo4sc.outer_iterations, out.weights.as_slice()));
    io::write_trace(&dir.join(TRACE_FILE), &out.trace)?;
    io::write_weights_trace(&dir.join(WEIGHTS_TRACE_FILE), &snapshots, &misclassified)?;

    let params = prep.fold(&out.params)?;
    io::save_params(&dir.join(PARAMS_FILE), &prep.arch, &params)?;
    let recs = records(&prep.arch, &params, &prep.split.test)?;
    finish_run(
        cfg,
        Method::Bo4sc,
        &dir,
        &recs,
        vec![
            TRACE_FILE.into(),
            WEIGHTS_TRACE_FILE.into(),
            PARAMS_FILE.into(),
        ],
        started,
    )
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    match cfg.method {
        Method::Standard => run_standard(cfg),
        Method::Isoreg => run_isoreg(cfg),
        Method::Bo4sc => run_bo4sc(cfg),
    }
}

fn load_run_params(
    cfg: &ExperimentConfig,
    method: Method,
    expected: &MlpArchitecture,
) -> Result<MlpParams> {
    let path = cfg.run_dir(method).join(PARAMS_FILE);
    let (arch, params) = io::load_params(&path)?;
    if &arch != expected {
        return Err(HarnessError::Config(format!(
            "{} was trained for a different architecture than the config describes",
            path.display()
        )));
    }
    Ok(params)
}

/// Re-scores a finished run from its saved artifacts.
pub fn evaluate_saved(cfg: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    let prep = prepare(cfg)?;
    let params = load_run_params(cfg, cfg.method, &prep.arch)?;
    let dir = cfg.run_dir(cfg.method);
    let mut recs = records(&prep.arch, &params, &prep.split.test)?;
    // keep training-time artifacts such as traces listed
    let mut inputs = match io::read_json::<RunReport>(&dir.join(REPORT_FILE)) {
        Ok(previous) => previous.artifacts,
        Err(_) => vec![PARAMS_FILE.to_string()],
    };
    inputs.retain(|a| ![PREDICTIONS_FILE, BINS_FILE, HISTOGRAM_FILE].contains(&a.as_str()));
    if cfg.method == Method::Isoreg {
        let map: IsotonicMap = io::read_json(&dir.join(ISOTONIC_FILE))?;
        recs = recalibrate(&map, &recs);
        if !inputs.iter().any(|a| a == ISOTONIC_FILE) {
            inputs.push(ISOTONIC_FILE.into());
        }
    }
    finish_run(cfg, cfg.method, &dir, &recs, inputs, started)
}

/// Axis-aligned rectangle in raw feature space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Extent of a 2-D feature matrix widened by `pad` of each side length.
    pub fn around(features: &Tensor, pad: f64) -> Result<Self> {
        if features.cols() != 2 || features.rows() == 0 {
            return Err(HarnessError::Config(
                "bounding box needs non-empty 2-D features".into(),
            ));
        }
        let (mut x_min, mut x_max, mut y_min, mut y_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for r in 0..features.rows() {
            let p = features.row(r);
            x_min = x_min.min(p[0]);
            x_max = x_max.max(p[0]);
            y_min = y_min.min(p[1]);
            y_max = y_max.max(p[1]);
        }
        let (dx, dy) = ((x_max - x_min) * pad, (y_max - y_min) * pad);
        Ok(BoundingBox {
            x_min: x_min - dx,
            x_max: x_max + dx,
            y_min: y_min - dy,
            y_max: y_max + dy,
        })
    }
}

fn lattice(lo: f64, hi: f64, resolution: usize) -> Vec<f64> {
    if resolution == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (resolution - 1) as f64;
    (0..resolution).map(|i| lo + step * i as f64).collect()
}

/// Confidence and predicted class on a `resolution x resolution` lattice
/// spanning `bbox`, edges included. Rows run along x fastest.
pub fn export_confidence_grid(
    params: &MlpParams,
    arch: &MlpArchitecture,
    bbox: BoundingBox,
    resolution: usize,
) -> Result<Vec<GridCell>> {
    if arch.input_dim != 2 {
        return Err(HarnessError::Config(format!(
            "confidence grids need a 2-D input, the model takes {}",
            arch.input_dim
        )));
    }
    if resolution == 0 {
        return Err(HarnessError::Config(
            "grid resolution must be at least 1".into(),
        ));
    }
    if !(bbox.x_min <= bbox.x_max && bbox.y_min <= bbox.y_max) {
        return Err(HarnessError::Config(format!("empty bounding box {bbox:?}")));
    }
    let xs = lattice(bbox.x_min, bbox.x_max, resolution);
    let ys = lattice(bbox.y_min, bbox.y_max, resolution);
    let points: Vec<f64> = ys
        .iter()
        .flat_map(|&y| xs.iter().flat_map(move |&x| [x, y]))
        .collect();
    let features = Tensor::matrix(resolution * resolution, 2, points)?;
    let out = predict(arch, params, &features)?;
    Ok(out
        .iter()
        .enumerate()
        .map(|(i, o)| GridCell {
            x: xs[i % resolution],
            y: ys[i / resolution],
            confidence: o.confidence,
            predicted_class: o.predicted_class,
        })
        .collect())
}

/// Grid for a finished run's saved model. The box defaults to the whole
/// dataset widened by 5 %.
pub fn grid_saved(
    cfg: &ExperimentConfig,
    bbox: Option<BoundingBox>,
    resolution: usize,
) -> Result<PathBuf> {
    let (arch, params) = io::load_params(&cfg.run_dir(cfg.method).join(PARAMS_FILE))?;
    let bbox = match bbox {
        Some(b) => b,
        None => BoundingBox::around(&load_dataset(cfg)?.features, 0.05)?,
    };
    let cells = export_confidence_grid(&params, &arch, bbox, resolution)?;
    let path = cfg.run_dir(cfg.method).join(GRID_FILE);
    io::write_grid(&path, &cells)?;
    Ok(path)
}

/// Writes the dataset and its provenance to `<out>/<label>/data/seed-<s>.csv`.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let data = load_dataset(cfg)?;
    let path = cfg
        .output_dir
        .join(cfg.label())
        .join("data")
        .join(format!("seed-{}.csv", cfg.seed));
    io::save_csv(&data, &path)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub method: Method,
    pub runs: usize,
    pub median_accuracy: f64,
    pub median_ece: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetVerdict {
    pub dataset: String,
    /// Every method tied at the minimum.
    pub lowest_ece: Vec<Method>,
    pub highest_accuracy: Vec<Method>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub datasets: Vec<DatasetVerdict>,
    /// Datasets on which each method has the lowest median ECE.
    pub lowest_ece_wins: BTreeMap<Method, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub verdict: Verdict,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn arg_extreme(
    rows: &[&ComparisonRow],
    key: impl Fn(&ComparisonRow) -> f64,
    lowest: bool,
) -> Vec<Method> {
    let pick = |a: f64, b: f64| if lowest { a.min(b) } else { a.max(b) };
    let best = rows.iter().map(|r| key(r)).fold(
        if lowest {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        },
        pick,
    );
    rows.iter()
        .filter(|r| key(r) == best)
        .map(|r| r.method)
        .collect()
}

/// Medians per (dataset, method) and the best method(s) per dataset.
/// Every dataset must have been run with the same set of methods.
pub fn compare(reports: &[RunReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(HarnessError::Compare(format!(
            "need at least 2 reports, got {}",
            reports.len()
        )));
    }
    let mut groups: BTreeMap<(String, Method), Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.dataset.clone(), r.method))
            .or_default()
            .push(r);
    }
    let mut methods_by_dataset: BTreeMap<&str, BTreeSet<Method>> = BTreeMap::new();
    for (dataset, method) in groups.keys() {
        methods_by_dataset
            .entry(dataset)
            .or_default()
            .insert(*method);
    }
    let mut method_sets = methods_by_dataset.values();
    let first = method_sets.next().expect("at least one report");
    if method_sets.any(|s| s != first) {
        let detail: Vec<String> = methods_by_dataset
            .iter()
            .map(|(d, m)| {
                format!(
                    "{d}: {}",
                    m.iter().map(|m| m.as_str()).collect::<Vec<_>>().join("+")
                )
            })
            .collect();
        return Err(HarnessError::Compare(format!(
            "datasets were run with different methods ({})",
            detail.join(", ")
        )));
    }

    let rows: Vec<ComparisonRow> = groups
        .iter()
        .map(|((dataset, method), runs)| ComparisonRow {
            dataset: dataset.clone(),
            method: *method,
            runs: runs.len(),
            median_accuracy: median(&runs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>()),
            median_ece: median(&runs.iter().map(|r| r.test_ece).collect::<Vec<_>>()),
        })
        .collect();

    let mut lowest_ece_wins: BTreeMap<Method, usize> = first.iter().map(|&m| (m, 0)).collect();
    let datasets = methods_by_dataset
        .keys()
        .map(|&dataset| {
            let here: Vec<&ComparisonRow> = rows.iter().filter(|r| r.dataset == dataset).collect();
            let lowest_ece = arg_extreme(&here, |r| r.median_ece, true);
            for m in &lowest_ece {
                *lowest_ece_wins.entry(*m).or_default() += 1;
            }
            DatasetVerdict {
                dataset: dataset.to_string(),
                lowest_ece,
                highest_accuracy: arg_extreme(&here, |r| r.median_accuracy, false),
            }
        })
        .collect();
    Ok(Comparison {
        rows,
        verdict: Verdict {
            datasets,
            lowest_ece_wins,
        },
    })
}

/// Every `report.json` below `root`, in path order.
pub fn collect_reports(root: &Path) -> Result<Vec<RunReport>> {
    fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> std::io::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                walk(&path, found)?;
            } else if path.file_name().is_some_and(|n| n == REPORT_FILE) {
                found.push(path);
            }
        }
        Ok(())
    }
    let mut found = Vec::new();
    walk(root, &mut found).map_err(|source| HarnessError::Unreadable {
        path: root.to_path_buf(),
        source,
    })?;
    found.iter().map(|p| io::read_json(p)).collect()
}

/// Compares every report under `root` and writes the table and verdict
/// next to them.
pub fn compare_dir(root: &Path) -> Result<Comparison> {
    let comparison = compare(&collect_reports(root)?)?;
    let path = root.join(COMPARISON_FILE);
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in &comparison.rows {
        wtr.serialize(row).map_err(|source| HarnessError::Csv {
            path: path.clone(),
            source,
        })?;
    }
    let bytes = wtr.into_inner().map_err(|e| HarnessError::Write {
        path: path.clone(),
        source: e.into_error(),
    })?;
    io::write_atomic(&path, &bytes)?;
    io::write_json(&root.join(VERDICT_FILE), &comparison.verdict)?;
    Ok(comparison)
}

/// Runs `job` over every config, `threads` at a time, and returns the
/// results in input order.
pub fn run_parallel<T, F>(configs: &[ExperimentConfig], threads: usize, job: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(&ExperimentConfig) -> Result<T> + Sync,
{
    let threads = threads.max(1);
    let mut results = Vec::with_capacity(configs.len());
    for chunk in configs.chunks(threads) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|c| s.spawn(|| job(c))).collect();
            results.extend(
                handles
                    .into_iter()
                    .map(|h| h.join().expect("run thread panicked")),
            );
        });
    }
    results
}
