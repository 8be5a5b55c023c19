//! One-class decision layer: per-band thresholds calibrated on pristine
//! scores, band-by-band decisions, and PCA diagnostics of score features.

mod pca;
mod scatter;

pub use pca::{pca_project, score_features, PcaProjection};
pub use scatter::{scatter_export, scatter_svg, scatter_table};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::raster::{Label, BAND_NAMES};

pub const NUM_BANDS: usize = 13;

/// Per-band reconstruction losses of one tile and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    /// Indexed by Sentinel-2 band ordinal; `None` where no model scored it.
    pub band_scores: [Option<f64>; NUM_BANDS],
    pub total_score: f64,
    pub tile_ref: String,
    pub label: Option<Label>,
}

impl ScoreVector {
    /// Builds a score vector whose total is the mean of the present bands.
    pub fn new(band_scores: [Option<f64>; NUM_BANDS], tile_ref: impl Into<String>, label: Option<Label>) -> Result<Self> {
        let present: Vec<f64> = band_scores.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::InvalidParams("score vector without band scores".into()));
        }
        if present.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidParams("band scores must be non-negative".into()));
        }
        Ok(Self {
            total_score: present.iter().sum::<f64>() / present.len() as f64,
            band_scores,
            tile_ref: tile_ref.into(),
            label,
        })
    }

    /// Single-score vector for scalar detectors, stored in `band`.
    pub fn scalar(band: usize, score: f64, tile_ref: impl Into<String>, label: Option<Label>) -> Result<Self> {
        let mut bands = [None; NUM_BANDS];
        bands[band] = Some(score);
        Self::new(bands, tile_ref, label)
    }

    pub fn present_bands(&self) -> Vec<usize> {
        (0..NUM_BANDS).filter(|&b| self.band_scores[b].is_some()).collect()
    }
}

/// Per-band thresholds calibrated at a target false-alarm rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSet {
    pub per_band: [Option<f64>; NUM_BANDS],
    /// Threshold on the total score.
    pub total: Option<f64>,
    pub target_far: f64,
    pub calibration_size: usize,
    pub source: String,
}

/// Smallest observed value `t` with `fraction(score > t) ≤ target_far`.
pub fn calibrate_scalar(scores: &[f64], target_far: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyPool);
    }
    if !(target_far > 0.0 && target_far < 1.0) {
        return Err(Error::InvalidParams(format!("target FAR {target_far} outside (0, 1)")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // walking up the sorted pool, the exceedance count at sorted[i] is the
    // number of entries strictly greater than it
    for (i, &t) in sorted.iter().enumerate() {
        let above = n - sorted[i..].partition_point(|&v| v <= t) - i;
        if above as f64 <= target_far * n as f64 {
            return Ok(t);
        }
    }
    Ok(sorted[n - 1])
}

/// Fraction of `scores` strictly above `threshold`.
pub fn exceedance(scores: &[f64], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s > threshold).count() as f64 / scores.len() as f64
}

/// Calibrates each band independently on a pristine score pool.
pub fn calibrate(pristine: &[ScoreVector], target_far: f64, source: &str) -> Result<ThresholdSet> {
    if pristine.is_empty() {
        return Err(Error::EmptyPool);
    }
    if let Some(s) = pristine.iter().find(|s| s.label == Some(Label::Generated)) {
        return Err(Error::GeneratedInCalibration(s.tile_ref.clone()));
    }
    let mut per_band = [None; NUM_BANDS];
    for (b, slot) in per_band.iter_mut().enumerate() {
        let pool: Vec<f64> = pristine.iter().filter_map(|s| s.band_scores[b]).collect();
        if !pool.is_empty() {
            *slot = Some(calibrate_scalar(&pool, target_far)?);
        }
    }
    let totals: Vec<f64> = pristine.iter().map(|s| s.total_score).collect();
    Ok(ThresholdSet {
        per_band,
        total: Some(calibrate_scalar(&totals, target_far)?),
        target_far,
        calibration_size: pristine.len(),
        source: source.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decision {
    /// `Some(true)` where the band flags the tile as generated.
    pub per_band: [Option<bool>; NUM_BANDS],
    /// Any-band rule; only filled when requested.
    pub aggregated: Option<bool>,
}

/// Band-by-band strict-exceedance decision.
pub fn detect(score: &ScoreVector, thresholds: &ThresholdSet, aggregate: bool) -> Result<Decision> {
    let mut per_band = [None; NUM_BANDS];
    for b in 0..NUM_BANDS {
        if let (Some(s), Some(t)) = (score.band_scores[b], thresholds.per_band[b]) {
            per_band[b] = Some(s > t);
        }
    }
    if per_band.iter().all(Option::is_none) {
        return Err(Error::NoOverlappingBands);
    }
    Ok(Decision {
        aggregated: aggregate.then(|| per_band.contains(&Some(true))),
        per_band,
    })
}

impl ThresholdSet {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# target_far={}\n# source={}\n# calibration_size={}\nband\tthreshold\ttarget_far\tsource\tsize\n",
            self.target_far, self.source, self.calibration_size
        );
        let mut row = |name: &str, t: f64| {
            // {:e} round-trips f64 exactly
            let _ = writeln!(
                out,
                "{name}\t{t:e}\t{}\t{}\t{}",
                self.target_far, self.source, self.calibration_size
            );
        };
        for (b, t) in self.per_band.iter().enumerate() {
            if let Some(t) = t {
                row(BAND_NAMES[b], *t);
            }
        }
        if let Some(t) = self.total {
            row("total", t);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("threshold file: {m}"));
        let mut set = ThresholdSet {
            per_band: [None; NUM_BANDS],
            total: None,
            target_far: f64::NAN,
            calibration_size: 0,
            source: String::new(),
        };
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            let [band, t, far, source, size] = f[..] else {
                return Err(bad(format!("expected 5 fields in `{line}`")));
            };
            let t: f64 = t.parse().map_err(|_| bad(format!("bad threshold `{t}`")))?;
            set.target_far = far.parse().map_err(|_| bad(format!("bad target_far `{far}`")))?;
            set.calibration_size = size.parse().map_err(|_| bad(format!("bad size `{size}`")))?;
            set.source = source.to_string();
            if band == "total" {
                set.total = Some(t);
            } else {
                let b = BAND_NAMES
                    .iter()
                    .position(|n| *n == band)
                    .ok_or_else(|| bad(format!("unknown band `{band}`")))?;
                set.per_band[b] = Some(t);
            }
        }
        if set.target_far.is_nan() {
            return Err(bad("no thresholds".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_text(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}
