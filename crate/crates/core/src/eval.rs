//! Pd@FAR metric, cross-dataset matrices, the unseen-family test and report
//! emission.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::baseline::{score_binary_batch, Classifier};
use crate::detector::{calibrate_scalar, ScoreVector, NUM_BANDS};
use crate::error::{io_err, Error, Result};
use crate::raster::{load_tile, DatasetManifest, Split};
use crate::raster::{sentinel2_bands, Label, MultispectralTile, RGB_BANDS};
use crate::synthgen::PerturbationFamily;
use crate::vqvae2::{score_tiles, OneClassModels, Reconstructor};

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// Fraction of generated-tile scores strictly above `threshold`.
pub fn pd_at_far(generated_scores: &[f64], threshold: f64) -> Result<f64> {
    if generated_scores.is_empty() {
        return Err(Error::EmptyPool);
    }
    let hits = generated_scores.iter().filter(|&&s| s > threshold).count();
    Ok(hits as f64 / generated_scores.len() as f64)
}

/// Wilson score 95% interval for `successes` out of `n` trials.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z95 * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes >= n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// 95% normal-approximation band a rate measured on `n` trials should fall
/// in when its true value is `p`.
pub fn binomial_band(p: f64, n: usize) -> (f64, f64) {
    let half = Z95 * (p * (1.0 - p) / n.max(1) as f64).sqrt();
    ((p - half).max(0.0), (p + half).min(1.0))
}

/// Named score columns for a set of tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreColumns {
    pub names: Vec<String>,
    /// `values[c][i]`: column `c`, tile `i`.
    pub values: Vec<Vec<f64>>,
}

impl ScoreColumns {
    /// One column per band present in every vector, plus `total`.
    pub fn from_vectors(scores: &[ScoreVector]) -> Self {
        let bands = sentinel2_bands();
        let shared: Vec<usize> = (0..NUM_BANDS)
            .filter(|&b| !scores.is_empty() && scores.iter().all(|s| s.band_scores[b].is_some()))
            .collect();
        let mut names: Vec<String> = shared.iter().map(|&b| bands[b].name().to_string()).collect();
        let mut values: Vec<Vec<f64>> = shared
            .iter()
            .map(|&b| scores.iter().map(|s| s.band_scores[b].unwrap_or(0.0)).collect())
            .collect();
        names.push("total".into());
        values.push(scores.iter().map(|s| s.total_score).collect());
        Self { names, values }
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_slice())
    }
}

/// Anything that turns tiles into named score columns, higher meaning more
/// likely generated.
pub trait ScoringDetector {
    fn score(&mut self, tiles: &[MultispectralTile]) -> Result<ScoreColumns>;
}

pub struct OneClassDetector<R> {
    pub models: OneClassModels<R>,
    pub batch_size: usize,
}

impl<R: Reconstructor> ScoringDetector for OneClassDetector<R> {
    fn score(&mut self, tiles: &[MultispectralTile]) -> Result<ScoreColumns> {
        Ok(ScoreColumns::from_vectors(&score_tiles(&mut self.models, tiles, self.batch_size)?))
    }
}

/// The two-class baseline; its single column is `prob`.
pub struct BinaryDetector {
    pub model: Classifier,
    pub batch_size: usize,
}

impl ScoringDetector for BinaryDetector {
    fn score(&mut self, tiles: &[MultispectralTile]) -> Result<ScoreColumns> {
        Ok(ScoreColumns {
            names: vec!["prob".into()],
            values: vec![score_binary_batch(&self.model, tiles, self.batch_size)?],
        })
    }
}

/// Pristine calibration pool and generated test pool of one test dataset.
#[derive(Clone, Debug)]
pub struct TestPools {
    pub id: String,
    pub calibration: Vec<MultispectralTile>,
    pub generated: Vec<MultispectralTile>,
}

impl TestPools {
    /// Pristine tiles of the calibrate split and generated tiles of the test
    /// split; locators resolve against `store`.
    pub fn from_manifest(store: &Path, manifest: &DatasetManifest) -> Result<Self> {
        let load = |split, label| -> Result<Vec<MultispectralTile>> {
            manifest
                .select(split, Some(label))
                .map(|e| {
                    let path = store.join(&e.locator);
                    if !path.exists() {
                        return Err(Error::MissingInput(path));
                    }
                    load_tile(path)
                })
                .collect()
        };
        Ok(Self {
            id: manifest.name.clone(),
            calibration: load(Split::Calibrate, Label::Pristine)?,
            generated: load(Split::Test, Label::Generated)?,
        })
    }

    fn check(&self) -> Result<()> {
        if self.calibration.is_empty() || self.generated.is_empty() {
            return Err(Error::EmptyPool);
        }
        if self.calibration.iter().any(|t| t.label != Label::Pristine) {
            return Err(Error::GeneratedInCalibration(self.id.clone()));
        }
        if self.generated.iter().any(|t| t.label != Label::Generated) {
            return Err(Error::SplitContract(format!("test pool of `{}` holds pristine tiles", self.id)));
        }
        Ok(())
    }
}

/// A trained detector with the training-set id it came from.
pub struct TrainedDetector<'a> {
    pub train_id: String,
    /// Detector family name used in reports, e.g. `vqvae2` or `cnn_nodown`.
    pub name: String,
    pub detector: Box<dyn ScoringDetector + 'a>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub train: String,
    pub test: String,
    pub detector: String,
    pub band: String,
    pub far: f64,
    pub pd: f64,
    pub interval: (f64, f64),
    pub threshold: f64,
    pub n_test: usize,
    pub n_calib: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentMatrix {
    pub title: String,
    pub far: f64,
    pub cells: Vec<Cell>,
    pub metadata: Vec<(String, String)>,
}

impl ExperimentMatrix {
    pub fn cell(&self, train: &str, test: &str, detector: &str, band: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.train == train && c.test == test && c.detector == detector && c.band == band)
    }
}

fn column_cells(
    train: &str,
    detector: &str,
    pools: &TestPools,
    calib: &ScoreColumns,
    test: &ScoreColumns,
    far: f64,
    seed: u64,
    keep: &dyn Fn(&str) -> bool,
) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for (c, name) in calib.names.iter().enumerate() {
        if !keep(name) {
            continue;
        }
        let generated = test
            .column(name)
            .ok_or_else(|| Error::Degenerate(format!("test scores lack column `{name}`")))?;
        let threshold = calibrate_scalar(&calib.values[c], far)?;
        let pd = pd_at_far(generated, threshold)?;
        let hits = generated.iter().filter(|&&s| s > threshold).count();
        cells.push(Cell {
            train: train.to_string(),
            test: pools.id.clone(),
            detector: detector.to_string(),
            band: name.clone(),
            far,
            pd,
            interval: wilson_interval(hits, generated.len()),
            threshold,
            n_test: generated.len(),
            n_calib: calib.values[c].len(),
            seed,
        });
    }
    Ok(cells)
}

/// Calibrates every detector column on each test set's pristine pool at
/// `far` and measures Pd on its generated pool.
pub fn cross_test(detectors: &mut [TrainedDetector<'_>], datasets: &[TestPools], far: f64, seed: u64) -> Result<ExperimentMatrix> {
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::InvalidParams(format!("false alarm rate {far} outside (0, 1)")));
    }
    for d in datasets {
        d.check()?;
    }
    let mut matrix = ExperimentMatrix {
        title: "cross_test".into(),
        far,
        ..Default::default()
    };
    for det in detectors.iter_mut() {
        for pools in datasets {
            let calib = det.detector.score(&pools.calibration)?;
            let test = det.detector.score(&pools.generated)?;
            matrix
                .cells
                .extend(column_cells(&det.train_id, &det.name, pools, &calib, &test, far, seed, &|_| true)?);
        }
    }
    matrix.metadata.push(("seed".into(), seed.to_string()));
    Ok(matrix)
}

/// Training sets behind the two detectors of the unseen-family test.
#[derive(Clone, Debug, PartialEq)]
pub struct UnseenSetup {
    pub oneclass_train: String,
    pub binary_train: String,
    /// Perturbation families present in any training set involved.
    pub train_families: Vec<PerturbationFamily>,
    pub unseen_family: PerturbationFamily,
}

/// Pd of the one-class detector's R, G and B bands and of the binary
/// detector on a family neither was trained on.
pub fn unseen_architecture_test(
    oneclass: &mut dyn ScoringDetector,
    binary: &mut dyn ScoringDetector,
    pools: &TestPools,
    setup: &UnseenSetup,
    far: f64,
    seed: u64,
) -> Result<ExperimentMatrix> {
    if setup.train_families.contains(&setup.unseen_family) {
        return Err(Error::FamilyOverlap(setup.unseen_family.to_string()));
    }
    pools.check()?;
    let bands = sentinel2_bands();
    let rgb: BTreeSet<&str> = RGB_BANDS.iter().map(|&b| bands[b].name()).collect();
    let mut matrix = ExperimentMatrix {
        title: "unseen_family".into(),
        far,
        ..Default::default()
    };
    let calib = oneclass.score(&pools.calibration)?;
    let test = oneclass.score(&pools.generated)?;
    let mut cells = column_cells(&setup.oneclass_train, "vqvae2", pools, &calib, &test, far, seed, &|n| rgb.contains(n))?;
    // red, green, blue order
    cells.sort_by_key(|c| RGB_BANDS.iter().position(|&b| bands[b].name() == c.band));
    if cells.len() != 3 {
        return Err(Error::NoOverlappingBands);
    }
    matrix.cells.extend(cells);
    let calib = binary.score(&pools.calibration)?;
    let test = binary.score(&pools.generated)?;
    matrix
        .cells
        .extend(column_cells(&setup.binary_train, "cnn", pools, &calib, &test, far, seed, &|_| true)?);
    matrix.metadata.push(("unseen_family".into(), setup.unseen_family.to_string()));
    matrix.metadata.push(("seed".into(), seed.to_string()));
    Ok(matrix)
}

/// Merges training sets by taking, for each label, the same number of tiles
/// (the smallest available) from every part.
pub fn equal_count_merge(parts: &[&[MultispectralTile]]) -> Vec<MultispectralTile> {
    let mut out = Vec::new();
    for label in [Label::Pristine, Label::Generated] {
        let n = parts
            .iter()
            .map(|p| p.iter().filter(|t| t.label == label).count())
            .min()
            .unwrap_or(0);
        for p in parts {
            out.extend(p.iter().filter(|t| t.label == label).take(n).cloned());
        }
    }
    out
}

pub const TABLE_HEADER: &str = "train\ttest\tdetector\tband\tfar\tpd\tn_test\tn_calib\tseed\tpd_low\tpd_high\tprotocol";

/// Tab-separated rows, one per cell.
pub fn report_table(matrices: &[ExperimentMatrix]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for m in matrices {
        for c in &m.cells {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:.3}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{}",
                c.train, c.test, c.detector, c.band, c.far, c.pd, c.n_test, c.n_calib, c.seed, c.interval.0, c.interval.1, m.title
            );
        }
    }
    s
}

/// Matrices back from a table written by [`report_table`], one per
/// protocol; thresholds are not stored and come back as NaN.
pub fn parse_report_table(text: &str) -> Result<Vec<ExperimentMatrix>> {
    let mut lines = text.lines();
    if lines.next() != Some(TABLE_HEADER) {
        return Err(Error::Degenerate("result table has an unexpected header".into()));
    }
    let mut matrices: Vec<ExperimentMatrix> = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let (protocol, cell) = {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Degenerate(format!("malformed result row `{line}`"));
            if f.len() != 12 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            let int = |i: usize| f[i].parse::<u64>().map_err(|_| bad());
            let cell = Cell {
                train: f[0].into(),
                test: f[1].into(),
                detector: f[2].into(),
                band: f[3].into(),
                far: num(4)?,
                pd: num(5)?,
                n_test: int(6)? as usize,
                n_calib: int(7)? as usize,
                seed: int(8)?,
                interval: (num(9)?, num(10)?),
                threshold: f64::NAN,
            };
            (f[11].to_string(), cell)
        };
        match matrices.iter_mut().find(|m| m.title == protocol) {
            Some(m) => m.cells.push(cell),
            None => matrices.push(ExperimentMatrix {
                title: protocol,
                far: cell.far,
                cells: vec![cell],
                metadata: Vec::new(),
            }),
        }
    }
    Ok(matrices)
}

fn ordered<'a>(it: impl Iterator<Item = &'a String>) -> Vec<&'a String> {
    let mut seen = Vec::new();
    for v in it {
        if !seen.contains(&v) {
            seen.push(v);
        }
    }
    seen
}

/// Human-readable layout: one train × test grid per detector and band.
pub fn report_summary(matrices: &[ExperimentMatrix]) -> String {
    let mut s = String::new();
    for m in matrices {
        let _ = writeln!(s, "== {} (far {}) ==", m.title, m.far);
        for (k, v) in &m.metadata {
            let _ = writeln!(s, "# {k} = {v}");
        }
        let tests = ordered(m.cells.iter().map(|c| &c.test));
        let detectors = ordered(m.cells.iter().map(|c| &c.detector));
        for det in detectors {
            let bands = ordered(m.cells.iter().filter(|c| &c.detector == det).map(|c| &c.band));
            for band in bands {
                let _ = writeln!(s, "[{det} / {band}]");
                let _ = write!(s, "{:<16}", "train \\ test");
                for t in &tests {
                    let _ = write!(s, "{t:>12}");
                }
                s.push('\n');
                let trains = ordered(
                    m.cells
                        .iter()
                        .filter(|c| &c.detector == det && &c.band == band)
                        .map(|c| &c.train),
                );
                for tr in trains {
                    let _ = write!(s, "{tr:<16}");
                    for t in &tests {
                        match m.cell(tr, t, det, band) {
                            Some(c) => {
                                let _ = write!(s, "{:>12.3}", c.pd);
                            }
                            None => {
                                let _ = write!(s, "{:>12}", "-");
                            }
                        }
                    }
                    s.push('\n');
                }
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub table: PathBuf,
    pub summary: PathBuf,
}

/// Writes `results.tsv` and `summary.txt` into `dir`. The summary carries
/// the config echo, the re-run command and the artifact list.
pub fn emit_report(
    matrices: &[ExperimentMatrix],
    artifacts: &[PathBuf],
    config_echo: &str,
    rerun: &str,
    dir: impl AsRef<Path>,
) -> Result<Report> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let table = dir.join("results.tsv");
    fs::write(&table, report_table(matrices)).map_err(io_err(&table))?;
    let mut text = report_summary(matrices);
    let _ = writeln!(text, "== artifacts ==");
    for a in artifacts {
        let _ = writeln!(text, "{}", a.display());
    }
    let _ = writeln!(text, "\n== rerun ==\n{rerun}\n\n== config ==\n{config_echo}");
    let summary = dir.join("summary.txt");
    fs::write(&summary, text).map_err(io_err(&summary))?;
    Ok(Report { table, summary })
}
