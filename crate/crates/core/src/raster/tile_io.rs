//! Tile file format.
//!
//! `VQDTILE1` magic, a little-endian `u32` header length, a UTF-8 header of
//! `key=value` lines, then the band-sequential payload of 16-bit
//! little-endian samples.
//!
//! ```text
//! height=64
//! width=64
//! channels=13
//! label=pristine
//! seed=1234            (or `none`)
//! provenance=lc:r0c1   (backslash and newline escaped)
//! band=<index> <native_gsd> <native_size> <bit_depth> <effective_gsd>   (one per channel)
//! ```

use std::fs;
use std::path::Path;

use super::{BandSpec, Label, MultispectralTile, RasterError};
use crate::error::{io_err, Result};

const MAGIC: &[u8; 8] = b"VQDTILE1";

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

pub fn encode_tile(tile: &MultispectralTile) -> Vec<u8> {
    let mut header = format!(
        "height={}\nwidth={}\nchannels={}\nlabel={}\nseed={}\nprovenance={}\n",
        tile.height,
        tile.width,
        tile.channels(),
        tile.label,
        tile.seed.map_or_else(|| "none".to_string(), |s| s.to_string()),
        escape(&tile.provenance),
    );
    for b in &tile.bands {
        header.push_str(&format!(
            "band={} {} {} {} {}\n",
            b.index, b.native_gsd, b.native_size, b.bit_depth, b.effective_gsd
        ));
    }
    let mut out = Vec::with_capacity(12 + header.len() + 2 * tile.samples.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for s in &tile.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

fn corrupt(msg: impl Into<String>) -> RasterError {
    RasterError::CorruptHeader(msg.into())
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, RasterError> {
    v.parse().map_err(|_| corrupt(format!("bad value for `{key}`: `{v}`")))
}

fn parse_band(v: &str) -> std::result::Result<BandSpec, RasterError> {
    let f: Vec<&str> = v.split(' ').collect();
    if f.len() != 5 {
        return Err(corrupt(format!("band line needs 5 fields: `{v}`")));
    }
    Ok(BandSpec {
        index: parse("band.index", f[0])?,
        native_gsd: parse("band.native_gsd", f[1])?,
        native_size: parse("band.native_size", f[2])?,
        bit_depth: parse("band.bit_depth", f[3])?,
        effective_gsd: parse("band.effective_gsd", f[4])?,
    })
}

pub fn decode_tile(bytes: &[u8]) -> std::result::Result<MultispectralTile, RasterError> {
    if bytes.len() < 12 {
        return Err(corrupt("file shorter than the fixed preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header = std::str::from_utf8(header).map_err(|_| corrupt("header is not UTF-8"))?;

    let (mut height, mut width, mut channels) = (None, None, None);
    let (mut label, mut seed, mut provenance) = (None, None, None);
    let mut bands = Vec::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("malformed line `{line}`")))?;
        match k {
            "height" => height = Some(parse::<usize>(k, v)?),
            "width" => width = Some(parse::<usize>(k, v)?),
            "channels" => channels = Some(parse::<usize>(k, v)?),
            "label" => label = Some(v.parse::<Label>().map_err(corrupt)?),
            "seed" => {
                seed = Some(if v == "none" {
                    None
                } else {
                    Some(parse::<u64>(k, v)?)
                })
            }
            "provenance" => provenance = Some(unescape(v)),
            "band" => bands.push(parse_band(v)?),
            other => return Err(corrupt(format!("unknown key `{other}`"))),
        }
    }
    let missing = |k: &str| corrupt(format!("missing `{k}`"));
    let height = height.ok_or_else(|| missing("height"))?;
    let width = width.ok_or_else(|| missing("width"))?;
    let channels = channels.ok_or_else(|| missing("channels"))?;
    let label = label.ok_or_else(|| missing("label"))?;
    let seed = seed.ok_or_else(|| missing("seed"))?;
    let provenance = provenance.ok_or_else(|| missing("provenance"))?;
    if bands.len() != channels {
        return Err(RasterError::DimensionMismatch(format!(
            "header declares {channels} channels but lists {} bands",
            bands.len()
        )));
    }

    let payload = &bytes[12 + header_len..];
    let expected = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .and_then(|v| v.checked_mul(2))
        .ok_or_else(|| corrupt("dimensions overflow"))?;
    if payload.len() < expected {
        return Err(RasterError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(RasterError::DimensionMismatch(format!(
            "payload holds {} bytes, header dimensions need {expected}",
            payload.len()
        )));
    }
    let samples = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(MultispectralTile {
        height,
        width,
        bands,
        samples,
        label,
        provenance,
        seed,
    })
}

pub fn save_tile(tile: &MultispectralTile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tile(tile)).map_err(io_err(path))
}

pub fn load_tile(path: impl AsRef<Path>) -> Result<MultispectralTile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(decode_tile(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::bands_for_channels;
    use proptest::prelude::*;

    fn tile(channels: usize, side: usize, seed: u64) -> MultispectralTile {
        MultispectralTile {
            height: side,
            width: side,
            bands: bands_for_channels(channels).unwrap(),
            samples: (0..channels * side * side)
                .map(|i| (seed as usize).wrapping_mul(2654435761).wrapping_add(i * 7919) as u16)
                .collect(),
            label: if seed % 2 == 0 { Label::Pristine } else { Label::Generated },
            provenance: format!("scene\\{seed}\nline two"),
            seed: if seed % 3 == 0 { None } else { Some(seed) },
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = tile(13, 16, 5);
        let path = dir.path().join("a.tile");
        save_tile(&t, &path).unwrap();
        assert_eq!(load_tile(&path).unwrap(), t);
    }

    #[test]
    fn empty_file_is_corrupt_header() {
        assert!(matches!(decode_tile(&[]), Err(RasterError::CorruptHeader(_))));
    }

    #[test]
    fn thirteen_channel_header_over_three_channel_payload_is_truncated() {
        let small = tile(3, 8, 2);
        let mut big = small.clone();
        big.bands = bands_for_channels(13).unwrap();
        let header_bytes = encode_tile(&big);
        let header_len = u32::from_le_bytes(header_bytes[8..12].try_into().unwrap()) as usize;
        let mut bytes = header_bytes[..12 + header_len].to_vec();
        bytes.extend(small.samples.iter().flat_map(|s| s.to_le_bytes()));
        assert!(matches!(
            decode_tile(&bytes),
            Err(RasterError::Truncated { expected, found }) if expected == 13 * 64 * 2 && found == 3 * 64 * 2
        ));
    }

    #[test]
    fn band_count_disagreeing_with_channels_is_dimension_mismatch() {
        let mut t = tile(3, 8, 4);
        t.bands.pop();
        // header now declares 2 channels over 3 planes of payload
        let bytes = encode_tile(&t);
        assert!(matches!(decode_tile(&bytes), Err(RasterError::DimensionMismatch(_))));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(channels in prop::sample::select(vec![1usize, 3, 13]), side in 1usize..12, seed in any::<u64>()) {
            let t = tile(channels, side, seed);
            prop_assert_eq!(decode_tile(&encode_tile(&t)).unwrap(), t);
        }
    }
}
