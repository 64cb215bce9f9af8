//! File formats. Every write goes to a temporary sibling first and is then
//! renamed into place.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use selfcal_core::bilevel::TrainingTrace;
use selfcal_core::calibration::{BinStats, PredictionRecord};
use selfcal_core::data::{LabeledDataset, Provenance};
use selfcal_core::model::{DenseLayer, MlpArchitecture, MlpParams};
use selfcal_core::Tensor;

use crate::error::{HarnessError, Result};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| HarnessError::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(wrap)?;
    }
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(
        ".tmp-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(wrap)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            HarnessError::MissingArtifact(path.to_path_buf())
        } else {
            HarnessError::Unreadable {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialises rows through `fill` into an in-memory CSV, then writes it.
fn write_csv(
    path: &Path,
    fill: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    fill(&mut wtr).map_err(csv_error(path))?;
    let bytes = wtr.into_inner().map_err(|e| HarnessError::Write {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    write_atomic(path, &bytes)
}

/// Round-trip text form of a float.
fn num(x: f64) -> String {
    format!("{x:?}")
}

/// `data.csv` -> `data.provenance.json`.
pub fn provenance_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("provenance.json")
}

/// Writes `f0,...,f{d-1},label` plus the provenance sidecar.
pub fn save_csv(data: &LabeledDataset, path: &Path) -> Result<()> {
    let d = data.dim();
    write_csv(path, |w| {
        let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (r, &y) in data.labels.iter().enumerate() {
            let mut row: Vec<String> = data.features.row(r).iter().map(|&x| num(x)).collect();
            row.push(y.to_string());
            w.write_record(&row)?;
        }
        Ok(())
    })?;
    write_json(&provenance_path(path), &data.provenance)
}

/// Reads a dataset written by [`save_csv`] or any CSV with the same header
/// layout. The class count is one more than the largest label unless given.
/// Provenance comes from the sidecar when present.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_error(path))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(HarnessError::NoDataRows(path.to_path_buf()));
    }
    let bad_header = |reason: String| HarnessError::BadHeader {
        path: path.to_path_buf(),
        reason,
    };
    if header.len() < 2 || &header[header.len() - 1] != "label" {
        return Err(bad_header(
            "expected feature columns followed by `label`".into(),
        ));
    }
    let d = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(csv_error(path))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != header.len() {
            return Err(HarnessError::MalformedRow {
                path: path.to_path_buf(),
                row,
                expected: header.len(),
                got: record.len(),
            });
        }
        for column in 0..d {
            let value = &record[column];
            let x: f64 = value.parse().map_err(|_| HarnessError::BadFeature {
                path: path.to_path_buf(),
                row,
                column,
                value: value.to_string(),
            })?;
            features.push(x);
        }
        let value = &record[d];
        let y: usize = value.parse().map_err(|_| HarnessError::BadLabel {
            path: path.to_path_buf(),
            row,
            value: value.to_string(),
        })?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(HarnessError::NoDataRows(path.to_path_buf()));
    }
    let observed = labels.iter().max().map_or(0, |m| m + 1);
    let classes = num_classes.unwrap_or(observed);
    let sidecar = provenance_path(path);
    let provenance = if sidecar.exists() {
        read_json(&sidecar)?
    } else {
        Provenance::external(&path.display().to_string())
    };
    let features = Tensor::matrix(labels.len(), d, features)?;
    Ok(LabeledDataset::new(features, labels, classes, provenance)?)
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    /// `fan_in` rows of `fan_out` values.
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    arch: MlpArchitecture,
    layers: Vec<LayerDoc>,
}

pub fn save_params(path: &Path, arch: &MlpArchitecture, params: &MlpParams) -> Result<()> {
    let layers = params
        .layers
        .iter()
        .map(|l| {
            let fan_out = l.weight.cols();
            LayerDoc {
                w: l.weight
                    .data()
                    .chunks(fan_out.max(1))
                    .map(<[f64]>::to_vec)
                    .collect(),
                b: l.bias.data().to_vec(),
            }
        })
        .collect();
    write_json(
        path,
        &ParamsDoc {
            arch: arch.clone(),
            layers,
        },
    )
}

pub fn load_params(path: &Path) -> Result<(MlpArchitecture, MlpParams)> {
    let doc: ParamsDoc = read_json(path)?;
    doc.arch.validate()?;
    let layers = doc
        .layers
        .into_iter()
        .map(|l| {
            let fan_in = l.w.len();
            let fan_out = l.w.first().map_or(0, Vec::len);
            let flat: Vec<f64> = l.w.into_iter().flatten().collect();
            Ok(DenseLayer {
                weight: Tensor::matrix(fan_in, fan_out, flat)?,
                bias: Tensor::vector(l.b)?,
            })
        })
        .collect::<selfcal_core::Result<Vec<_>>>()?;
    let params = MlpParams { layers };
    params.check(&doc.arch)?;
    Ok((doc.arch, params))
}

pub fn write_bins(path: &Path, bins: &[BinStats]) -> Result<()> {
    write_csv(path, |w| {
        w.write_record(["bin", "lo", "hi", "count", "acc", "conf"])?;
        for b in bins {
            w.write_record([
                b.index.to_string(),
                num(b.lo),
                num(b.hi),
                b.count.to_string(),
                num(b.accuracy),
                num(b.confidence),
            ])?;
        }
        Ok(())
    })
}

/// One row per test sample: `index,confidence,predicted,label`.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_csv(path, |w| {
        w.write_record(["index", "confidence", "predicted", "label"])?;
        for (i, r) in records.iter().enumerate() {
            w.write_record([
                i.to_string(),
                num(r.confidence),
                r.predicted.to_string(),
                r.label.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn write_trace(path: &Path, trace: &TrainingTrace) -> Result<()> {
    write_csv(path, |w| {
        w.write_record(["outer_iter", "inner_loss", "outer_loss", "val_accuracy"])?;
        for r in &trace.records {
            w.write_record([
                r.outer_iter.to_string(),
                num(r.inner_loss),
                num(r.outer_loss),
                num(r.val_accuracy),
            ])?;
        }
        Ok(())
    })
}

/// Long format: one row per (snapshot, training sample). `snapshots` pairs
/// an outer iteration with the weights in effect at it.
pub fn write_weights_trace(
    path: &Path,
    snapshots: &[(usize, &[f64])],
    final_misclassified: &[bool],
) -> Result<()> {
    write_csv(path, |w| {
        w.write_record([
            "outer_iter",
            "sample_index",
            "weight",
            "final_misclassified",
        ])?;
        for &(iter, weights) in snapshots {
            for (i, (&wt, &miss)) in weights.iter().zip(final_misclassified).enumerate() {
                w.write_record([
                    iter.to_string(),
                    i.to_string(),
                    num(wt),
                    u8::from(miss).to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub predicted_class: usize,
}

pub fn write_grid(path: &Path, cells: &[GridCell]) -> Result<()> {
    write_csv(path, |w| {
        w.write_record(["x", "y", "confidence", "predicted_class"])?;
        for c in cells {
            w.write_record([
                num(c.x),
                num(c.y),
                num(c.confidence),
                c.predicted_class.to_string(),
            ])?;
        }
        Ok(())
    })
}
