//! Multispectral raster model and scene preprocessing.
//!
//! Scenes arrive as one raster per band at the band's native ground sample
//! distance. Every band is brought to the common 10 m grid by an integer
//! upsampling factor, the scene is cut into non-overlapping square tiles,
//! and tiles containing no-data samples are dropped.

mod manifest;
mod tile_io;

pub use manifest::{build_manifest, DatasetManifest, ManifestEntry, Split, SplitCounts, SplitPlan};
pub use tile_io::{decode_tile, encode_tile, load_tile, save_tile};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Common grid every band is resampled to, in meters per pixel.
pub const TARGET_GSD: f64 = 10.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("resolution mismatch: {native} m cannot reach {target} m with an integer factor")]
    ResolutionMismatch { native: f64, target: f64 },
    #[error("inconsistent footprint: band {band} covers {found} m, expected {expected} m")]
    InconsistentFootprint {
        band: usize,
        expected: f64,
        found: f64,
    },
    #[error("bands do not share dimensions: {0}")]
    BandDimensions(String),
    #[error("tile size {0} is below the minimum of 8")]
    TileSizeTooSmall(usize),
    #[error("corrupt tile header: {0}")]
    CorruptHeader(String),
    #[error("tile payload does not match header dimensions: {0}")]
    DimensionMismatch(String),
    #[error("truncated tile payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("insufficient {label} tiles: plan needs {needed}, {available} available")]
    InsufficientTiles {
        label: Label,
        needed: usize,
        available: usize,
    },
}

/// One spectral band of the sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BandSpec {
    /// Ordinal 0..=12 for bands 1,2,3,4,5,6,7,8,8a,9,10,11,12.
    pub index: usize,
    pub native_gsd: f64,
    pub native_size: u32,
    pub bit_depth: u8,
    /// Ground sample distance of the samples as currently held.
    pub effective_gsd: f64,
}

pub const BAND_NAMES: [&str; 13] = [
    "B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12",
];

/// Ordinals of the red, green and blue bands (B4, B3, B2).
pub const RGB_BANDS: [usize; 3] = [3, 2, 1];

impl BandSpec {
    pub fn name(&self) -> &'static str {
        BAND_NAMES.get(self.index).copied().unwrap_or("?")
    }

    /// Ground footprint of one native scene side, in meters.
    pub fn footprint(&self) -> f64 {
        self.native_gsd * f64::from(self.native_size)
    }

    pub fn at_native(index: usize, native_gsd: f64, native_size: u32) -> Self {
        Self {
            index,
            native_gsd,
            native_size,
            bit_depth: 16,
            effective_gsd: native_gsd,
        }
    }
}

/// The 13-band Sentinel-2 layout at native resolution.
pub fn sentinel2_bands() -> Vec<BandSpec> {
    const GSD: [f64; 13] = [
        60.0, 10.0, 10.0, 10.0, 20.0, 20.0, 20.0, 10.0, 20.0, 60.0, 60.0, 20.0, 20.0,
    ];
    GSD.iter()
        .enumerate()
        .map(|(i, &gsd)| {
            let size = match gsd as u32 {
                10 => 10980,
                20 => 5490,
                _ => 1830,
            };
            BandSpec::at_native(i, gsd, size)
        })
        .collect()
}

/// Band specs as held in a tile on the common 10 m grid.
pub fn resampled(mut bands: Vec<BandSpec>) -> Vec<BandSpec> {
    for b in &mut bands {
        b.effective_gsd = TARGET_GSD;
    }
    bands
}

/// Band specs for a tile of `channels` bands: the full 13-band layout,
/// the RGB triple, or a single band (`B4`).
pub fn bands_for_channels(channels: usize) -> Option<Vec<BandSpec>> {
    let all = sentinel2_bands();
    let chosen = match channels {
        13 => all,
        3 => RGB_BANDS.iter().map(|&i| all[i].clone()).collect(),
        1 => vec![all[RGB_BANDS[0]].clone()],
        _ => return None,
    };
    Some(resampled(chosen))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Pristine,
    Generated,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Pristine => "pristine",
            Label::Generated => "generated",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pristine" => Ok(Label::Pristine),
            "generated" => Ok(Label::Generated),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

/// Single-band 2-D raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), height * width, "raster data length");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u16) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }
}

/// H×W×C patch; samples are band-sequential (`[band][row][col]`).
#[derive(Clone, Debug, PartialEq)]
pub struct MultispectralTile {
    pub height: usize,
    pub width: usize,
    pub bands: Vec<BandSpec>,
    pub samples: Vec<u16>,
    pub label: Label,
    pub provenance: String,
    pub seed: Option<u64>,
}

impl MultispectralTile {
    pub fn channels(&self) -> usize {
        self.bands.len()
    }

    pub fn band(&self, c: usize) -> &[u16] {
        let plane = self.height * self.width;
        &self.samples[c * plane..(c + 1) * plane]
    }

    pub fn band_mut(&mut self, c: usize) -> &mut [u16] {
        let plane = self.height * self.width;
        &mut self.samples[c * plane..(c + 1) * plane]
    }

    /// Channel position holding band ordinal `index`, if present.
    pub fn channel_of(&self, index: usize) -> Option<usize> {
        self.bands.iter().position(|b| b.index == index)
    }

    /// New tile keeping only the listed channel positions.
    pub fn select_channels(&self, channels: &[usize]) -> MultispectralTile {
        let mut samples = Vec::with_capacity(channels.len() * self.height * self.width);
        for &c in channels {
            samples.extend_from_slice(self.band(c));
        }
        MultispectralTile {
            height: self.height,
            width: self.width,
            bands: channels.iter().map(|&c| self.bands[c].clone()).collect(),
            samples,
            label: self.label,
            provenance: self.provenance.clone(),
            seed: self.seed,
        }
    }

    /// Samples mapped to `[0, 1]` by dividing by 65535.
    pub fn normalized(&self) -> Vec<f32> {
        self.samples.iter().map(|&s| f32::from(s) / 65535.0).collect()
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|&&s| s == 0).count() as f64 / self.samples.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    #[default]
    Nearest,
    Bilinear,
}

impl FromStr for Interpolation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(format!("unknown interpolation `{other}`")),
        }
    }
}

/// Integer factor taking `native_gsd` to `target_gsd`.
pub fn upsample_factor(native_gsd: f64, target_gsd: f64) -> Result<usize, RasterError> {
    let ratio = native_gsd / target_gsd;
    let rounded = ratio.round();
    if !(rounded >= 1.0) || (ratio - rounded).abs() > 1e-9 {
        return Err(RasterError::ResolutionMismatch {
            native: native_gsd,
            target: target_gsd,
        });
    }
    Ok(rounded as usize)
}

/// Enlarges a raster by an integer `factor` in both directions.
pub fn upsample_band(band: &Raster, factor: usize, mode: Interpolation) -> Raster {
    assert!(factor >= 1, "upsampling factor must be at least 1");
    if factor == 1 {
        return band.clone();
    }
    let (h, w) = (band.height * factor, band.width * factor);
    match mode {
        Interpolation::Nearest => {
            let mut data = Vec::with_capacity(h * w);
            for y in 0..band.height {
                let src = &band.data[y * band.width..(y + 1) * band.width];
                let mut row = Vec::with_capacity(w);
                for &v in src {
                    row.extend(std::iter::repeat_n(v, factor));
                }
                for _ in 0..factor {
                    data.extend_from_slice(&row);
                }
            }
            Raster::new(h, w, data)
        }
        Interpolation::Bilinear => {
            // pixel-center alignment, edges clamped
            let coord = |o: usize, n: usize| -> (usize, usize, f64) {
                let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, s - i0 as f64)
            };
            Raster::from_fn(h, w, |y, x| {
                let (y0, y1, ty) = coord(y, band.height);
                let (x0, x1, tx) = coord(x, band.width);
                let top = f64::from(band.get(y0, x0)) * (1.0 - tx) + f64::from(band.get(y0, x1)) * tx;
                let bot = f64::from(band.get(y1, x0)) * (1.0 - tx) + f64::from(band.get(y1, x1)) * tx;
                (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 65535.0) as u16
            })
        }
    }
}

/// All bands of one scene on a common pixel grid.
#[derive(Clone, Debug)]
pub struct Scene {
    pub bands: Vec<BandSpec>,
    pub planes: Vec<Raster>,
    pub provenance: String,
    pub label: Label,
}

impl Scene {
    /// Resamples native-resolution bands onto the 10 m grid, checking that
    /// every band covers the same ground footprint.
    pub fn from_native_bands(
        bands: Vec<(BandSpec, Raster)>,
        mode: Interpolation,
        provenance: impl Into<String>,
        label: Label,
    ) -> Result<Self, RasterError> {
        let mut specs = Vec::with_capacity(bands.len());
        let mut planes = Vec::with_capacity(bands.len());
        let expected = bands.first().map(|(s, r)| s.native_gsd * r.width as f64);
        for (spec, raster) in bands {
            let expected = expected.expect("non-empty");
            for side in [raster.width, raster.height] {
                let found = spec.native_gsd * side as f64;
                if (found - expected).abs() > 1e-6 * expected.max(1.0) {
                    return Err(RasterError::InconsistentFootprint {
                        band: spec.index,
                        expected,
                        found,
                    });
                }
            }
            let factor = upsample_factor(spec.native_gsd, TARGET_GSD)?;
            planes.push(upsample_band(&raster, factor, mode));
            specs.push(BandSpec {
                effective_gsd: TARGET_GSD,
                ..spec
            });
        }
        Ok(Self {
            bands: specs,
            planes,
            provenance: provenance.into(),
            label,
        })
    }

    fn dims(&self) -> Result<(usize, usize), RasterError> {
        let first = self
            .planes
            .first()
            .ok_or_else(|| RasterError::BandDimensions("scene has no bands".into()))?;
        for p in &self.planes {
            if p.height != first.height || p.width != first.width {
                return Err(RasterError::BandDimensions(format!(
                    "{}x{} vs {}x{}",
                    p.height, p.width, first.height, first.width
                )));
            }
        }
        Ok((first.height, first.width))
    }
}

/// Cuts a scene into non-overlapping `tile_size` squares, row-major from the
/// top-left; partial tiles at the right and bottom edges are discarded.
pub fn retile(scene: &Scene, tile_size: usize) -> Result<Vec<MultispectralTile>, RasterError> {
    if tile_size < 8 {
        return Err(RasterError::TileSizeTooSmall(tile_size));
    }
    let (h, w) = scene.dims()?;
    let (rows, cols) = (h / tile_size, w / tile_size);
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut samples = Vec::with_capacity(scene.planes.len() * tile_size * tile_size);
            for plane in &scene.planes {
                for y in r * tile_size..(r + 1) * tile_size {
                    let start = y * w + c * tile_size;
                    samples.extend_from_slice(&plane.data[start..start + tile_size]);
                }
            }
            tiles.push(MultispectralTile {
                height: tile_size,
                width: tile_size,
                bands: scene.bands.clone(),
                samples,
                label: scene.label,
                provenance: format!("{}:r{r}c{c}", scene.provenance),
                seed: None,
            });
        }
    }
    Ok(tiles)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoDataPolicy {
    /// Drop any tile holding a zero sample in any band.
    Strict,
    /// Drop tiles whose zero-sample fraction exceeds the bound.
    Fraction(f64),
}

pub fn filter_nodata(tiles: Vec<MultispectralTile>, policy: NoDataPolicy) -> Vec<MultispectralTile> {
    tiles
        .into_iter()
        .filter(|t| match policy {
            NoDataPolicy::Strict => !t.samples.contains(&0),
            NoDataPolicy::Fraction(f) => t.zero_fraction() <= f,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tile_with(samples: Vec<u16>, side: usize) -> MultispectralTile {
        MultispectralTile {
            height: side,
            width: side,
            bands: bands_for_channels(1).unwrap(),
            samples,
            label: Label::Pristine,
            provenance: "t".into(),
            seed: None,
        }
    }

    #[test]
    fn sentinel2_layout() {
        let bands = sentinel2_bands();
        assert_eq!(bands.len(), 13);
        for (name, gsd, size) in [
            ("B2", 10.0, 10980),
            ("B3", 10.0, 10980),
            ("B4", 10.0, 10980),
            ("B8", 10.0, 10980),
            ("B5", 20.0, 5490),
            ("B6", 20.0, 5490),
            ("B7", 20.0, 5490),
            ("B8A", 20.0, 5490),
            ("B11", 20.0, 5490),
            ("B12", 20.0, 5490),
            ("B1", 60.0, 1830),
            ("B9", 60.0, 1830),
            ("B10", 60.0, 1830),
        ] {
            let b = bands.iter().find(|b| b.name() == name).unwrap();
            assert_eq!((b.native_gsd, b.native_size, b.bit_depth), (gsd, size, 16));
        }
        let footprint = bands[0].footprint();
        assert!(bands.iter().all(|b| b.footprint() == footprint));
    }

    #[test]
    fn nearest_upsample_replicates_blocks() {
        let r = Raster::new(2, 2, vec![1, 2, 3, 4]);
        let u = upsample_band(&r, 2, Interpolation::Nearest);
        assert_eq!(
            u.data,
            vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]
        );
        assert_eq!(upsample_band(&r, 1, Interpolation::Bilinear), r);
    }

    #[test]
    fn upsample_factors() {
        assert_eq!(upsample_factor(20.0, 10.0).unwrap(), 2);
        assert_eq!(upsample_factor(60.0, 10.0).unwrap(), 6);
        assert_eq!(upsample_factor(10.0, 10.0).unwrap(), 1);
        assert!(matches!(
            upsample_factor(25.0, 10.0),
            Err(RasterError::ResolutionMismatch { .. })
        ));
        assert!(upsample_factor(5.0, 10.0).is_err());
    }

    #[test]
    fn bilinear_stays_in_range() {
        let r = Raster::new(2, 2, vec![0, 65535, 65535, 0]);
        let u = upsample_band(&r, 3, Interpolation::Bilinear);
        assert_eq!((u.height, u.width), (6, 6));
        assert_eq!(u.get(0, 0), 0);
        assert_eq!(u.get(0, 5), 65535);
    }

    #[test]
    fn retile_counts() {
        let scene = |side: usize| Scene {
            bands: bands_for_channels(1).unwrap(),
            planes: vec![Raster::new(side, side, vec![1; side * side])],
            provenance: "s".into(),
            label: Label::Pristine,
        };
        assert_eq!(retile(&scene(1024), 512).unwrap().len(), 4);
        assert_eq!(retile(&scene(500), 512).unwrap().len(), 0);
        assert_eq!(retile(&scene(100), 32).unwrap().len(), 9);
        assert!(matches!(
            retile(&scene(64), 4),
            Err(RasterError::TileSizeTooSmall(4))
        ));
    }

    #[test]
    fn retile_rejects_mismatched_bands() {
        let scene = Scene {
            bands: bands_for_channels(3).unwrap()[..2].to_vec(),
            planes: vec![Raster::new(16, 16, vec![1; 256]), Raster::new(8, 8, vec![1; 64])],
            provenance: "s".into(),
            label: Label::Pristine,
        };
        assert!(matches!(retile(&scene, 8), Err(RasterError::BandDimensions(_))));
    }

    #[test]
    fn nodata_rules() {
        let all_zero = tile_with(vec![0; 64], 8);
        let min_one = tile_with(vec![1; 64], 8);
        let mut one_zero = vec![5; 64];
        one_zero[17] = 0;
        let one_zero = tile_with(one_zero, 8);
        let kept = filter_nodata(
            vec![all_zero.clone(), min_one.clone(), one_zero.clone()],
            NoDataPolicy::Strict,
        );
        assert_eq!(kept, vec![min_one.clone()]);
        let kept = filter_nodata(vec![all_zero, min_one, one_zero], NoDataPolicy::Fraction(0.05));
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn footprint_mismatch_is_rejected() {
        let b10 = BandSpec::at_native(1, 10.0, 60);
        let b20 = BandSpec::at_native(4, 20.0, 31);
        let res = Scene::from_native_bands(
            vec![(b10, Raster::new(60, 60, vec![1; 3600])), (b20, Raster::new(31, 31, vec![1; 961]))],
            Interpolation::Nearest,
            "x",
            Label::Pristine,
        );
        assert!(matches!(res, Err(RasterError::InconsistentFootprint { band: 4, .. })));
    }

    proptest! {
        #[test]
        fn nearest_upsample_composes(h in 1usize..6, w in 1usize..6, a in 1usize..4, b in 1usize..4, seed in any::<u64>()) {
            let r = Raster::from_fn(h, w, |y, x| ((seed >> ((y * w + x) % 48)) & 0xffff) as u16);
            let twice = upsample_band(&upsample_band(&r, a, Interpolation::Nearest), b, Interpolation::Nearest);
            prop_assert_eq!(twice, upsample_band(&r, a * b, Interpolation::Nearest));
        }

        #[test]
        fn filter_is_idempotent(zeros in proptest::collection::vec(0usize..64, 0..4), frac in 0.0f64..0.2) {
            let tiles: Vec<_> = (0..4).map(|i| {
                let mut s = vec![9u16; 64];
                for &z in zeros.iter().take(i) { s[z] = 0; }
                tile_with(s, 8)
            }).collect();
            for policy in [NoDataPolicy::Strict, NoDataPolicy::Fraction(frac)] {
                let once = filter_nodata(tiles.clone(), policy);
                prop_assert_eq!(filter_nodata(once.clone(), policy), once);
            }
        }

        #[test]
        fn kept_tiles_reassemble_scene(h in 8usize..40, w in 8usize..40, size in 8usize..16, seed in any::<u64>()) {
            let plane = Raster::from_fn(h, w, |y, x| (seed.wrapping_mul(31).wrapping_add((y * 977 + x * 131) as u64) % 65535) as u16 + 1);
            let scene = Scene {
                bands: bands_for_channels(1).unwrap(),
                planes: vec![plane.clone()],
                provenance: "s".into(),
                label: Label::Pristine,
            };
            let tiles = retile(&scene, size).unwrap();
            let cols = w / size;
            prop_assert_eq!(tiles.len(), (h / size) * cols);
            for (i, t) in tiles.iter().enumerate() {
                let (r, c) = (i / cols, i % cols);
                for y in 0..size {
                    for x in 0..size {
                        prop_assert_eq!(t.band(0)[y * size + x], plane.get(r * size + y, c * size + x));
                    }
                }
            }
        }
    }
}
