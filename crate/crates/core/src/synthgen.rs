//! Deterministic stand-ins for pristine and generated multispectral tiles.
//!
//! Pristine texture is a stationary Gaussian random field: white noise per
//! latent band, smoothed with a periodic Gaussian kernel, mixed across bands
//! by a factor of the band covariance and quantized to 16 bits. In 13-band
//! tiles the 20 m and 60 m bands are block-averaged and replicated back onto
//! the 10 m grid, like sensor bands resampled from a coarser native grid.
//!
//! Generated tiles carry one of three artifact families:
//! * `checkerboard`: an additive periodic lattice, the signature of
//!   transposed-convolution upsampling;
//! * `spectral_smoothing`: a Gaussian low-pass of every band computed as a
//!   zero-padded convolution, the way generator layers filter, so the rim
//!   loses the energy that falls outside the tile;
//! * `band_shift`: a monotone per-band gamma remapping of intensities.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{io_err, Error, Result};
use crate::raster::{
    bands_for_channels, build_manifest, save_tile, upsample_factor, DatasetManifest, Label,
    MultispectralTile, SplitPlan,
};
use crate::seed::{derive_seed, tile_seed};

/// Checkerboard amplitude per unit strength, relative to the band's sample
/// standard deviation.
pub const CHECKER_GAIN: f64 = 0.5;
/// Smoothing kernel width at strength 1, in pixels.
pub const SMOOTH_MAX_SIGMA: f64 = 2.0;
/// Largest gamma exponent magnitude `|ln γ|` at strength 1.
pub const SHIFT_MAX_LOG_GAMMA: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct TextureParams {
    /// Standard deviation of the smoothing kernel, in pixels.
    pub correlation_length: f64,
    /// Row-major `C×C` covariance of the band intensities (unit diagonal for
    /// a pure correlation structure).
    pub band_covariance: Vec<f64>,
    pub mean_level: f64,
    /// Span of ±3 standard deviations around `mean_level`, in raster units.
    pub dynamic_range: f64,
    pub seed: u64,
}

/// `ρ^|i−j|` correlation between bands `i` and `j`.
pub fn exponential_covariance(channels: usize, rho: f64) -> Vec<f64> {
    let mut m = Vec::with_capacity(channels * channels);
    for i in 0..channels {
        for j in 0..channels {
            m.push(rho.powi((i as i32 - j as i32).abs()));
        }
    }
    m
}

pub fn identity_covariance(channels: usize) -> Vec<f64> {
    exponential_covariance(channels, 0.0)
}

impl TextureParams {
    /// Named texture presets, one per pseudo-dataset role.
    pub fn preset(name: &str, channels: usize) -> Option<Self> {
        let (corr, rho, mean, range) = match name {
            "lc" => (2.5, 0.8, 0.35, 0.50),
            "scand" => (4.0, 0.6, 0.30, 0.40),
            "china" => (3.0, 0.9, 0.45, 0.55),
            "alps" => (3.5, 0.7, 0.50, 0.60),
            _ => return None,
        };
        Some(Self {
            correlation_length: corr,
            band_covariance: exponential_covariance(channels, rho),
            mean_level: mean * 65535.0,
            dynamic_range: range * 65535.0,
            seed: 0,
        })
    }

    /// Validates the parameters for `channels` bands and returns the mixing
    /// factor `A` with `A·Aᵀ = band_covariance`.
    fn mixing_factor(&self, channels: usize) -> Result<DMatrix<f64>> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.band_covariance.len() != channels * channels {
            return bad(format!(
                "covariance has {} entries, {channels} bands need {}",
                self.band_covariance.len(),
                channels * channels
            ));
        }
        if !(self.correlation_length >= 0.0) || !(self.dynamic_range >= 0.0) {
            return bad("correlation length and dynamic range must be non-negative".into());
        }
        let half = self.dynamic_range / 2.0;
        if self.mean_level - half < 0.0 || self.mean_level + half > 65535.0 {
            return bad(format!(
                "mean {} ± {half} leaves the 16-bit range",
                self.mean_level
            ));
        }
        let cov = DMatrix::from_row_slice(channels, channels, &self.band_covariance);
        if (&cov - cov.transpose()).abs().max() > 1e-12 {
            return bad("band covariance is not symmetric".into());
        }
        let eig = SymmetricEigen::new(cov);
        let scale = eig.eigenvalues.abs().max().max(1.0);
        if eig.eigenvalues.min() < -1e-9 * scale {
            return bad(format!(
                "band covariance is not positive semidefinite (eigenvalue {:.3e})",
                eig.eigenvalues.min()
            ));
        }
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
    }
}

pub(crate) fn gaussian_kernel(sigma: f64, max_radius: usize) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = ((3.0 * sigma).ceil() as usize).min(max_radius);
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[derive(Clone, Copy)]
pub(crate) enum Boundary {
    Periodic,
    Zero,
    Replicate,
}

/// Separable convolution of an `n×n` plane with a centered 1-D kernel.
pub(crate) fn convolve_separable(plane: &[f64], n: usize, k: &[f64], boundary: Boundary) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let sample = |line: &dyn Fn(usize) -> f64, i: isize| -> f64 {
        match boundary {
            Boundary::Periodic => line(i.rem_euclid(n as isize) as usize),
            Boundary::Zero if i < 0 || i >= n as isize => 0.0,
            Boundary::Zero => line(i as usize),
            Boundary::Replicate => line(i.clamp(0, n as isize - 1) as usize),
        }
    };
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        let row = |x: usize| plane[y * n + x];
        for x in 0..n {
            tmp[y * n + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * sample(&row, x as isize + j as isize - r))
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for x in 0..n {
        let col = |y: usize| tmp[y * n + x];
        for y in 0..n {
            out[y * n + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * sample(&col, y as isize + j as isize - r))
                .sum();
        }
    }
    out
}

/// Block-averages `plane` over `factor×factor` cells and replicates the
/// means back, simulating a band sampled on a coarser native grid.
fn coarsen(plane: &mut [f64], n: usize, factor: usize) {
    if factor <= 1 {
        return;
    }
    for by in (0..n).step_by(factor) {
        for bx in (0..n).step_by(factor) {
            let (ye, xe) = ((by + factor).min(n), (bx + factor).min(n));
            let mut s = 0.0;
            for y in by..ye {
                s += plane[y * n + bx..y * n + xe].iter().sum::<f64>();
            }
            let m = s / ((ye - by) * (xe - bx)) as f64;
            for y in by..ye {
                plane[y * n + bx..y * n + xe].iter_mut().for_each(|v| *v = m);
            }
        }
    }
}

pub(crate) fn quantize(v: f64) -> u16 {
    v.round().clamp(0.0, 65535.0) as u16
}

/// Pristine tile of `size×size` pixels and `channels` bands (13, 3 or 1).
pub fn gen_pristine_tile(params: &TextureParams, size: usize, channels: usize) -> Result<MultispectralTile> {
    let bands = bands_for_channels(channels)
        .ok_or_else(|| Error::InvalidParams(format!("unsupported channel count {channels}")))?;
    let mix = params.mixing_factor(channels)?;
    let plane = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let kernel = gaussian_kernel(params.correlation_length, size / 2);
    let field_std: f64 = kernel.iter().map(|v| v * v).sum();

    let mut latent = Vec::with_capacity(channels);
    for _ in 0..channels {
        let white: Vec<f64> = (0..plane).map(|_| rng.sample(StandardNormal)).collect();
        let smooth = convolve_separable(&white, size, &kernel, Boundary::Periodic);
        latent.push(smooth.into_iter().map(|v| v / field_std).collect::<Vec<_>>());
    }

    let sigma = params.dynamic_range / 6.0;
    let mut samples = Vec::with_capacity(channels * plane);
    for (b, spec) in bands.iter().enumerate() {
        let mut field: Vec<f64> = (0..plane)
            .map(|i| (0..channels).map(|c| mix[(b, c)] * latent[c][i]).sum())
            .collect();
        if channels == 13 {
            let factor = upsample_factor(spec.native_gsd, spec.effective_gsd).unwrap_or(1);
            coarsen(&mut field, size, factor);
        }
        samples.extend(field.iter().map(|f| quantize(params.mean_level + sigma * f)));
    }
    Ok(MultispectralTile {
        height: size,
        width: size,
        bands,
        samples,
        label: Label::Pristine,
        provenance: "synthetic".into(),
        seed: Some(params.seed),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbationFamily {
    Checkerboard,
    SpectralSmoothing,
    BandShift,
}

impl fmt::Display for PerturbationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Checkerboard => "checkerboard",
            Self::SpectralSmoothing => "spectral_smoothing",
            Self::BandShift => "band_shift",
        })
    }
}

impl FromStr for PerturbationFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "checkerboard" => Ok(Self::Checkerboard),
            "spectral_smoothing" => Ok(Self::SpectralSmoothing),
            "band_shift" => Ok(Self::BandShift),
            other => Err(format!("unknown perturbation family `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationParams {
    pub family: PerturbationFamily,
    /// Dimensionless in `[0, 1]`; 0 leaves samples untouched.
    pub strength: f64,
    /// Lattice period in pixels (checkerboard only).
    pub period: usize,
    pub seed: u64,
}

fn band_std(band: &[u16]) -> f64 {
    let n = band.len() as f64;
    let mean = band.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    (band.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Applies one artifact family to a pristine tile.
pub fn gen_generated_tile(pristine: &MultispectralTile, pert: &PerturbationParams) -> Result<MultispectralTile> {
    if pristine.label != Label::Pristine {
        return Err(Error::InvalidParams("perturbation source must be a pristine tile".into()));
    }
    if !(0.0..=1.0).contains(&pert.strength) {
        return Err(Error::InvalidParams(format!("strength {} outside [0, 1]", pert.strength)));
    }
    if pert.family == PerturbationFamily::Checkerboard && pert.period < 2 {
        return Err(Error::InvalidParams(format!(
            "checkerboard period {} is below 2",
            pert.period
        )));
    }
    let mut out = pristine.clone();
    out.label = Label::Generated;
    out.provenance = format!("{}+{}", pristine.provenance, pert.family);
    if pert.strength == 0.0 {
        return Ok(out);
    }
    let (h, w) = (pristine.height, pristine.width);
    let mut rng = ChaCha8Rng::seed_from_u64(pert.seed);
    match pert.family {
        PerturbationFamily::Checkerboard => {
            let p = pert.period;
            let (py, px) = (rng.gen_range(0..p), rng.gen_range(0..p));
            let wave = |i: usize, phase: usize| if (i + phase) % p < p / 2 { 1.0 } else { -1.0 };
            for c in 0..out.channels() {
                let amp = pert.strength * CHECKER_GAIN * band_std(pristine.band(c)).max(64.0);
                for (i, v) in out.band_mut(c).iter_mut().enumerate() {
                    let (y, x) = (i / w, i % w);
                    *v = quantize(f64::from(*v) + amp * wave(y, py) * wave(x, px));
                }
            }
        }
        PerturbationFamily::SpectralSmoothing => {
            assert_eq!(h, w, "smoothing expects square tiles");
            let kernel = gaussian_kernel(pert.strength * SMOOTH_MAX_SIGMA, h / 2);
            for c in 0..out.channels() {
                let plane: Vec<f64> = out.band(c).iter().map(|&v| f64::from(v)).collect();
                let smooth = convolve_separable(&plane, h, &kernel, Boundary::Zero);
                for (v, s) in out.band_mut(c).iter_mut().zip(smooth) {
                    *v = quantize(s);
                }
            }
        }
        PerturbationFamily::BandShift => {
            for c in 0..out.channels() {
                let mag = rng.gen_range(0.4..1.0) * SHIFT_MAX_LOG_GAMMA;
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let gamma = (sign * mag * pert.strength).exp();
                for v in out.band_mut(c) {
                    *v = quantize(65535.0 * (f64::from(*v) / 65535.0).powf(gamma));
                }
            }
        }
    }
    Ok(out)
}

/// Description of one pseudo-dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDatasetSpec {
    pub name: String,
    pub n_pristine: usize,
    pub n_generated: usize,
    pub texture: TextureParams,
    pub perturbation: PerturbationParams,
    pub seed: u64,
    pub tile_size: usize,
    pub channels: usize,
    /// Split assignment; `None` puts every tile in the test split.
    pub plan: Option<SplitPlan>,
}

impl PseudoDatasetSpec {
    pub fn pristine_tile(&self, index: usize) -> Result<MultispectralTile> {
        let root = derive_seed(self.seed, "pristine");
        let texture = TextureParams {
            seed: tile_seed(root, index as u64),
            ..self.texture.clone()
        };
        let mut t = gen_pristine_tile(&texture, self.tile_size, self.channels)?;
        t.provenance = format!("{}:p{index}", self.name);
        Ok(t)
    }

    /// Generated tile `index`, perturbing a pristine base drawn from a seed
    /// stream disjoint from the pristine tiles.
    pub fn generated_tile(&self, index: usize) -> Result<MultispectralTile> {
        let base_root = derive_seed(self.seed, "generated-base");
        let texture = TextureParams {
            seed: tile_seed(base_root, index as u64),
            ..self.texture.clone()
        };
        let mut base = gen_pristine_tile(&texture, self.tile_size, self.channels)?;
        base.provenance = format!("{}:g{index}", self.name);
        let pert = PerturbationParams {
            seed: tile_seed(derive_seed(self.seed, "perturb"), index as u64),
            ..self.perturbation
        };
        gen_generated_tile(&base, &pert)
    }

    pub fn pristine_tiles(&self, range: std::ops::Range<usize>) -> Result<Vec<MultispectralTile>> {
        range.map(|i| self.pristine_tile(i)).collect()
    }

    pub fn generated_tiles(&self, range: std::ops::Range<usize>) -> Result<Vec<MultispectralTile>> {
        range.map(|i| self.generated_tile(i)).collect()
    }

    fn plan(&self) -> SplitPlan {
        self.plan.unwrap_or_else(|| {
            let mut plan = SplitPlan {
                shuffle_seed: derive_seed(self.seed, "split"),
                ..SplitPlan::default()
            };
            plan.pristine.test = self.n_pristine;
            plan.generated.test = self.n_generated;
            plan
        })
    }
}

/// Locator of tile files relative to the store root.
pub fn tile_locator(name: &str, label: Label, index: usize) -> String {
    let tag = match label {
        Label::Pristine => 'p',
        Label::Generated => 'g',
    };
    format!("{name}/{tag}{index:05}.tile")
}

pub fn manifest_path(store: &Path, name: &str) -> PathBuf {
    store.join(format!("{name}.manifest"))
}

/// Generates, persists and splits a pseudo-dataset under `store`.
///
/// Tiles land in `store/<name>/`, the manifest in `store/<name>.manifest`
/// with locators relative to `store`.
pub fn build_pseudo_dataset(store: &Path, spec: &PseudoDatasetSpec, overwrite: bool) -> Result<DatasetManifest> {
    let dir = store.join(&spec.name);
    let mpath = manifest_path(store, &spec.name);
    if (dir.exists() || mpath.exists()) && !overwrite {
        return Err(Error::NameCollision(spec.name.clone()));
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut listed = Vec::with_capacity(spec.n_pristine + spec.n_generated);
    for i in 0..spec.n_pristine {
        let loc = tile_locator(&spec.name, Label::Pristine, i);
        save_tile(&spec.pristine_tile(i)?, store.join(&loc))?;
        listed.push((loc, Label::Pristine));
    }
    for i in 0..spec.n_generated {
        let loc = tile_locator(&spec.name, Label::Generated, i);
        save_tile(&spec.generated_tile(i)?, store.join(&loc))?;
        listed.push((loc, Label::Generated));
    }
    let manifest = build_manifest(&spec.name, &listed, &spec.plan())?;
    manifest.save(&mpath)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(channels: usize, seed: u64) -> TextureParams {
        TextureParams {
            seed,
            ..TextureParams::preset("lc", channels).unwrap()
        }
    }

    /// Separable naive DFT power spectrum of one plane.
    fn power_spectrum(plane: &[f64], n: usize) -> Vec<f64> {
        let tw: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let a = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect();
        let mut rows = vec![(0.0, 0.0); n * n];
        for y in 0..n {
            for k in 0..n {
                let (mut re, mut im) = (0.0, 0.0);
                for x in 0..n {
                    let (c, s) = tw[(k * x) % n];
                    re += plane[y * n + x] * c;
                    im += plane[y * n + x] * s;
                }
                rows[y * n + k] = (re, im);
            }
        }
        let mut power = vec![0.0; n * n];
        for kx in 0..n {
            for ky in 0..n {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..n {
                    let (c, s) = tw[(ky * y) % n];
                    let (a, b) = rows[y * n + kx];
                    re += a * c - b * s;
                    im += a * s + b * c;
                }
                power[ky * n + kx] = re * re + im * im;
            }
        }
        power
    }

    fn plane_f64(t: &MultispectralTile, c: usize) -> Vec<f64> {
        t.band(c).iter().map(|&v| f64::from(v)).collect()
    }

    fn nyquist_magnitude(t: &MultispectralTile, c: usize) -> f64 {
        let n = t.width;
        power_spectrum(&plane_f64(t, c), n)[(n / 2) * n + n / 2].sqrt()
    }

    /// Energy above half-Nyquist in the Hann-windowed interior, away from
    /// the rim where zero padding leaves its own edge.
    fn high_frequency_energy(t: &MultispectralTile, c: usize) -> f64 {
        let (full, margin) = (t.width, t.width / 8);
        let n = full - 2 * margin;
        let plane = plane_f64(t, c);
        let mut crop: Vec<f64> = (0..n * n)
            .map(|i| plane[(i / n + margin) * full + i % n + margin])
            .collect();
        let mean = crop.iter().sum::<f64>() / crop.len() as f64;
        let hann = |i: usize| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
        for (i, v) in crop.iter_mut().enumerate() {
            *v = (*v - mean) * hann(i / n) * hann(i % n);
        }
        let p = power_spectrum(&crop, n);
        let freq = |k: usize| k.min(n - k);
        let mut e = 0.0;
        for ky in 0..n {
            for kx in 0..n {
                if freq(kx).max(freq(ky)) > n / 4 {
                    e += p[ky * n + kx];
                }
            }
        }
        e
    }

    #[test]
    fn pristine_is_deterministic() {
        let a = gen_pristine_tile(&texture(13, 3), 32, 13).unwrap();
        let b = gen_pristine_tile(&texture(13, 3), 32, 13).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label, Label::Pristine);
        assert_ne!(a, gen_pristine_tile(&texture(13, 4), 32, 13).unwrap());
    }

    #[test]
    fn zero_range_gives_constant_tile() {
        let params = TextureParams {
            dynamic_range: 0.0,
            mean_level: 20000.0,
            ..texture(3, 1)
        };
        let t = gen_pristine_tile(&params, 16, 3).unwrap();
        assert!(t.samples.iter().all(|&s| s == 20000));
    }

    #[test]
    fn rejects_non_psd_and_bad_ranges() {
        let mut p = texture(3, 1);
        p.band_covariance = vec![1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(matches!(gen_pristine_tile(&p, 16, 3), Err(Error::InvalidParams(_))));
        let mut p = texture(3, 1);
        p.band_covariance[1] = 0.5;
        assert!(gen_pristine_tile(&p, 16, 3).is_err(), "asymmetric");
        let p = TextureParams {
            mean_level: 1000.0,
            ..texture(3, 1)
        };
        assert!(gen_pristine_tile(&p, 16, 3).is_err(), "range below zero");
    }

    #[test]
    fn identity_covariance_decorrelates_bands() {
        let (mut sum, mut count) = (0.0f64, 0);
        for seed in 0..100 {
            let p = TextureParams {
                band_covariance: identity_covariance(3),
                ..texture(3, seed)
            };
            let t = gen_pristine_tile(&p, 64, 3).unwrap();
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                sum += correlation(t.band(a), t.band(b));
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!(mean.abs() < 0.1, "mean cross-band correlation {mean}");
    }

    #[test]
    fn correlated_covariance_shows_up() {
        let t = gen_pristine_tile(&texture(3, 9), 64, 3).unwrap();
        assert!(correlation(t.band(0), t.band(1)) > 0.5);
    }

    fn correlation(a: &[u16], b: &[u16]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let mb = b.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn coarse_bands_are_block_constant() {
        let t = gen_pristine_tile(&texture(13, 5), 36, 13).unwrap();
        let b1 = t.band(0); // 60 m
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(b1[y * 36 + x], b1[0]);
            }
        }
        let b5 = t.band(4); // 20 m
        assert_eq!(b5[0], b5[1]);
        assert_eq!(b5[0], b5[36]);
    }

    #[test]
    fn zero_strength_is_identity() {
        let base = gen_pristine_tile(&texture(3, 2), 32, 3).unwrap();
        for family in [
            PerturbationFamily::Checkerboard,
            PerturbationFamily::SpectralSmoothing,
            PerturbationFamily::BandShift,
        ] {
            let g = gen_generated_tile(
                &base,
                &PerturbationParams {
                    family,
                    strength: 0.0,
                    period: 2,
                    seed: 1,
                },
            )
            .unwrap();
            assert_eq!(g.samples, base.samples);
            assert_eq!(g.label, Label::Generated);
        }
    }

    #[test]
    fn perturbation_contract_errors() {
        let base = gen_pristine_tile(&texture(3, 2), 16, 3).unwrap();
        let pert = PerturbationParams {
            family: PerturbationFamily::Checkerboard,
            strength: 0.5,
            period: 1,
            seed: 0,
        };
        assert!(gen_generated_tile(&base, &pert).is_err());
        let generated = gen_generated_tile(&base, &PerturbationParams { period: 2, ..pert }).unwrap();
        assert!(gen_generated_tile(&generated, &PerturbationParams { period: 2, ..pert }).is_err());
    }

    #[test]
    fn checkerboard_raises_nyquist_peak() {
        let base = gen_pristine_tile(&texture(3, 8), 64, 3).unwrap();
        let g = gen_generated_tile(
            &base,
            &PerturbationParams {
                family: PerturbationFamily::Checkerboard,
                strength: 0.5,
                period: 2,
                seed: 4,
            },
        )
        .unwrap();
        for c in 0..3 {
            let (before, after) = (nyquist_magnitude(&base, c), nyquist_magnitude(&g, c));
            let amp = 0.5 * CHECKER_GAIN * band_std(base.band(c));
            // a pure lattice of amplitude `amp` contributes amp·N² at Nyquist
            assert!(after > before + 0.5 * amp * 4096.0, "band {c}: {before} -> {after}");
        }
    }

    #[test]
    fn checkerboard_peak_grows_with_strength() {
        let base = gen_pristine_tile(&texture(1, 12), 32, 1).unwrap();
        let mut last = nyquist_magnitude(&base, 0);
        for strength in [0.25, 0.5, 0.75, 1.0] {
            let g = gen_generated_tile(
                &base,
                &PerturbationParams {
                    family: PerturbationFamily::Checkerboard,
                    strength,
                    period: 2,
                    seed: 0,
                },
            )
            .unwrap();
            let m = nyquist_magnitude(&g, 0);
            assert!(m >= last, "strength {strength}: {m} < {last}");
            last = m;
        }
    }

    #[test]
    fn smoothing_removes_high_frequencies() {
        let base = gen_pristine_tile(&texture(3, 6), 64, 3).unwrap();
        let g = gen_generated_tile(
            &base,
            &PerturbationParams {
                family: PerturbationFamily::SpectralSmoothing,
                strength: 1.0,
                period: 2,
                seed: 0,
            },
        )
        .unwrap();
        for c in 0..3 {
            assert!(high_frequency_energy(&g, c) < high_frequency_energy(&base, c));
        }
    }

    #[test]
    fn band_shift_is_monotone_per_band() {
        let base = gen_pristine_tile(&texture(3, 6), 32, 3).unwrap();
        let g = gen_generated_tile(
            &base,
            &PerturbationParams {
                family: PerturbationFamily::BandShift,
                strength: 1.0,
                period: 2,
                seed: 3,
            },
        )
        .unwrap();
        assert_ne!(g.samples, base.samples);
        for c in 0..3 {
            let mut pairs: Vec<(u16, u16)> = base.band(c).iter().copied().zip(g.band(c).iter().copied()).collect();
            pairs.sort();
            assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    fn spec(name: &str, n_p: usize, n_g: usize) -> PseudoDatasetSpec {
        PseudoDatasetSpec {
            name: name.into(),
            n_pristine: n_p,
            n_generated: n_g,
            texture: texture(3, 0),
            perturbation: PerturbationParams {
                family: PerturbationFamily::Checkerboard,
                strength: 0.5,
                period: 2,
                seed: 0,
            },
            seed: 11,
            tile_size: 16,
            channels: 3,
            plan: None,
        }
    }

    #[test]
    fn pseudo_dataset_build() {
        let dir = tempfile::tempdir().unwrap();
        let empty = build_pseudo_dataset(dir.path(), &spec("empty", 0, 0), false).unwrap();
        assert!(empty.entries.is_empty());

        let m = build_pseudo_dataset(dir.path(), &spec("lc", 100, 100), false).unwrap();
        assert_eq!(m.entries.len(), 200);
        let counts = m.counts();
        assert_eq!(counts.values().sum::<usize>(), 200);
        assert_eq!(m.entries.iter().filter(|e| e.label == Label::Generated).count(), 100);
        for e in m.entries.iter().take(5) {
            let t = crate::raster::load_tile(dir.path().join(&e.locator)).unwrap();
            assert_eq!(t.label, e.label);
        }

        assert!(matches!(
            build_pseudo_dataset(dir.path(), &spec("lc", 1, 1), false),
            Err(Error::NameCollision(_))
        ));

        let other = tempfile::tempdir().unwrap();
        let again = build_pseudo_dataset(other.path(), &spec("lc", 100, 100), false).unwrap();
        assert_eq!(again, m);
        let a = fs::read(dir.path().join("lc/g00007.tile")).unwrap();
        let b = fs::read(other.path().join("lc/g00007.tile")).unwrap();
        assert_eq!(a, b);
    }
}
