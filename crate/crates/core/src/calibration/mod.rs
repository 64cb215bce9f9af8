//! Reliability binning, expected calibration error and isotonic
//! post-calibration.

mod isotonic;

pub use isotonic::{apply_isotonic, fit_isotonic, pav, IsotonicMap};

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub confidence: f64,
    pub predicted: usize,
    pub label: usize,
}

impl PredictionRecord {
    pub fn new(confidence: f64, predicted: usize, label: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidArgument(alloc::format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(PredictionRecord {
            confidence,
            predicted,
            label,
        })
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    /// 1-based.
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Zero for an empty bin.
    pub accuracy: f64,
    /// Zero for an empty bin.
    pub confidence: f64,
}

/// 1-based bin of `confidence` among `bins` intervals `((m-1)/M, m/M]`.
/// Zero goes to the first bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let m_total = bins as f64;
    let mut m = (libm::ceil(confidence * m_total) as usize).clamp(1, bins);
    // the product can round across a boundary; settle against the edges
    while m > 1 && confidence <= (m - 1) as f64 / m_total {
        m -= 1;
    }
    while m < bins && confidence > m as f64 / m_total {
        m += 1;
    }
    m
}

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 {
        Err(Error::InvalidArgument(
            "bin count must be at least 1".into(),
        ))
    } else {
        Ok(())
    }
}

/// Per-bin count, accuracy and mean confidence.
pub fn bin_predictions(records: &[PredictionRecord], bins: usize) -> Result<Vec<BinStats>> {
    check_bins(bins)?;
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    for r in records {
        let m = bin_index(r.confidence, bins) - 1;
        count[m] += 1;
        hits[m] += usize::from(r.correct());
        conf[m] += r.confidence;
    }
    Ok((0..bins)
        .map(|m| {
            let n = count[m];
            let (accuracy, confidence) = if n == 0 {
                (0.0, 0.0)
            } else {
                (hits[m] as f64 / n as f64, conf[m] / n as f64)
            };
            BinStats {
                index: m + 1,
                lo: m as f64 / bins as f64,
                hi: (m + 1) as f64 / bins as f64,
                count: n,
                accuracy,
                confidence,
            }
        })
        .collect())
}

/// `sum_m |B_m| / n * |acc(B_m) - conf(B_m)|`.
pub fn ece(records: &[PredictionRecord], bins: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("ece"));
    }
    let n = records.len() as f64;
    Ok(bin_predictions(records, bins)?
        .iter()
        .map(|b| b.count as f64 / n * libm::fabs(b.accuracy - b.confidence))
        .sum())
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    Ok(records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64)
}

pub fn mean_confidence(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("mean confidence"));
    }
    Ok(records.iter().map(|r| r.confidence).sum::<f64>() / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub counts: Vec<usize>,
    pub mean_accuracy: f64,
    pub mean_confidence: f64,
}

impl ConfidenceHistogram {
    /// Average confidence exceeds average accuracy.
    pub fn overconfident(&self) -> bool {
        self.mean_confidence > self.mean_accuracy
    }
}

pub fn confidence_histogram(
    records: &[PredictionRecord],
    bins: usize,
) -> Result<ConfidenceHistogram> {
    Ok(ConfidenceHistogram {
        counts: bin_predictions(records, bins)?
            .iter()
            .map(|b| b.count)
            .collect(),
        mean_accuracy: accuracy(records)?,
        mean_confidence: mean_confidence(records)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<BinStats>,
    pub ece: f64,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

pub fn calibration_report(records: &[PredictionRecord], bins: usize) -> Result<CalibrationReport> {
    Ok(CalibrationReport {
        bins: bin_predictions(records, bins)?,
        ece: ece(records, bins)?,
        accuracy: accuracy(records)?,
        mean_confidence: mean_confidence(records)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(conf: &[f64], correct: &[bool]) -> Vec<PredictionRecord> {
        conf.iter()
            .zip(correct)
            .map(|(&c, &ok)| PredictionRecord::new(c, 0, usize::from(!ok)).unwrap())
            .collect()
    }

    #[test]
    fn half_open_bins() {
        assert_eq!(bin_index(0.5, 10), 5);
        assert_eq!(bin_index(0.0, 10), 1);
        assert_eq!(bin_index(1.0, 10), 10);
        assert_eq!(bin_index(0.30000000000000004, 10), 4);
        assert_eq!(bin_index(0.3, 10), 3);
        for m in 1..=15 {
            assert_eq!(bin_index(m as f64 / 15.0, 15), m);
        }
    }

    #[test]
    fn four_record_fixture() {
        let r = records(&[0.3, 0.4, 0.9, 0.8], &[false, true, true, true]);
        let bins = bin_predictions(&r, 2).unwrap();
        assert_eq!((bins[0].count, bins[1].count), (2, 2));
        assert!((bins[0].accuracy - 0.5).abs() < 1e-15);
        assert!((bins[0].confidence - 0.35).abs() < 1e-15);
        assert!((bins[1].accuracy - 1.0).abs() < 1e-15);
        assert!((bins[1].confidence - 0.85).abs() < 1e-15);
        assert!((ece(&r, 2).unwrap() - 0.15).abs() < 1e-15);
    }

    #[test]
    fn single_bin_is_overall() {
        let r = records(&[0.2, 0.7, 0.9], &[true, false, true]);
        let b = bin_predictions(&r, 1).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b[0].accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!((b[0].confidence - 0.6).abs() < 1e-15);
    }

    #[test]
    fn extreme_ece() {
        let r = records(&[1.0; 5], &[false; 5]);
        assert_eq!(ece(&r, 15).unwrap(), 1.0);
        let r = records(&[1.0, 1.0, 0.5, 0.5], &[true, true, true, false]);
        assert_eq!(ece(&r, 10).unwrap(), 0.0);
        assert!(ece(&[], 10).is_err());
        assert!(bin_predictions(&r, 0).is_err());
    }

    #[test]
    fn histogram_flags_overconfidence() {
        let r = records(&[0.9, 0.9, 0.9, 0.9], &[true, false, true, false]);
        let h = confidence_histogram(&r, 10).unwrap();
        assert!(h.overconfident());
        assert_eq!(h.counts.iter().sum::<usize>(), 4);
        let r = records(&[0.1, 0.35, 0.6, 0.85], &[true; 4]);
        let h = confidence_histogram(&r, 4).unwrap();
        assert_eq!(h.counts, vec![1, 1, 1, 1]);
        assert!(!h.overconfident());
    }

    #[test]
    fn record_rejects_out_of_range() {
        assert!(PredictionRecord::new(1.01, 0, 0).is_err());
        assert!(PredictionRecord::new(-0.1, 0, 0).is_err());
        assert!(PredictionRecord::new(f64::NAN, 0, 0).is_err());
    }
}
