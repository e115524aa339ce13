//! Binary PPM (P6) and PGM (P5) images as `[C × H × W]` tensors in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel `(x − mean) / std`, applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: vec![0.5],
            std: vec![0.5],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.std.len() {
            return Err(Error::config(
                "data.normalization",
                "mean and std need the same non-zero length",
            ));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config("data.normalization.std", "entries must be positive"));
        }
        Ok(())
    }

    /// A single entry applies to every channel.
    pub fn apply(&self, image: &mut Tensor) -> Result<()> {
        let c = image.shape()[0];
        if self.mean.len() != 1 && self.mean.len() != c {
            return Err(Error::Dimension(format!(
                "normalization has {} channels, image has {c}",
                self.mean.len()
            )));
        }
        let plane = image.numel() / c.max(1);
        for (ch, chunk) in image.data_mut().chunks_mut(plane.max(1)).enumerate() {
            let i = if self.mean.len() == 1 { 0 } else { ch };
            let (m, s) = (self.mean[i], self.std[i]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("not a binary PGM (P5) or PPM (P6) file".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("malformed header near byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("header must end in one whitespace byte".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
        return Err(Error::Format(format!(
            "bad header values {width}x{height} max {maxval}"
        )));
    }
    Ok((
        Header {
            channels,
            width,
            height,
            maxval,
        },
        &bytes[pos + 1..],
    ))
}

/// Decodes a P5/P6 buffer into `[C × H × W]` values in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let (h, payload) = parse_header(bytes)?;
    let wide = h.maxval > 255;
    let samples = h.channels * h.width * h.height;
    let needed = samples * if wide { 2 } else { 1 };
    if payload.len() < needed {
        return Err(Error::Format(format!(
            "payload is truncated: {} of {needed} bytes",
            payload.len()
        )));
    }
    let max = h.maxval as f32;
    let value = |s: usize| -> f32 {
        let raw = if wide {
            u16::from_be_bytes([payload[2 * s], payload[2 * s + 1]]) as f32
        } else {
            payload[s] as f32
        };
        (raw / max).min(1.0)
    };
    let plane = h.width * h.height;
    let mut data = vec![0f32; samples];
    // interleaved RGB on disk, planar in memory
    for p in 0..plane {
        for c in 0..h.channels {
            data[c * plane + p] = value(p * h.channels + c);
        }
    }
    Tensor::new(vec![h.channels, h.height, h.width], data)
}

/// Encodes `[1|3 × H × W]` values in `[0, 1]` as an 8-bit P5/P6 buffer.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Dimension(format!(
            "image must be [C, H, W], got {:?}",
            image.shape()
        )));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Dimension(format!("PNM holds 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(image.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

/// `[0, 1] → 0..=255`, rounding to nearest.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_gray8(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(image)?).map_err(|e| Error::io(path, e))
}

/// Every `.ppm`/`.pgm` in `dir`, sorted by file name, normalized; ids are file stems.
pub fn load_images(dir: impl AsRef<Path>, norm: &Normalization) -> Result<Vec<(String, Tensor)>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| x.eq_ignore_ascii_case("ppm") || x.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let mut img = read_image(&p)?;
            norm.apply(&mut img)?;
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok((id, img))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_pgm_reads_as_ones() {
        let img = decode_pnm(b"P5\n2 2\n255\n\xff\xff\xff\xff").unwrap();
        assert_eq!(img.shape(), &[1, 2, 2]);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn red_ppm_pixel() {
        let img = decode_pnm(b"P6 1 1 255\n\xff\x00\x00").unwrap();
        assert_eq!(img.shape(), &[3, 1, 1]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn comments_and_wide_samples() {
        let img = decode_pnm(b"P5\n# a comment\n2 1\n# another\n65535\n\x00\x00\xff\xff").unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        for bad in [
            &b"P3\n1 1\n255\n\x00"[..],
            b"P5\n1\n255\n\x00",
            b"P5\n2 2\n255\n\x00\x00",
            b"P5\n0 2\n255\n",
            b"P6\n1 1\n255\n\x00\x00",
            b"P5\n1 1\n255",
        ] {
            assert!(matches!(decode_pnm(bad), Err(Error::Format(_))), "{bad:?}");
        }
    }

    #[test]
    fn normalization_defaults_and_channels() {
        let mut img = decode_pnm(b"P6 1 1 255\n\xff\x00\x00").unwrap();
        Normalization::default().apply(&mut img).unwrap();
        assert_eq!(img.data(), &[1.0, -1.0, -1.0]);

        let per = Normalization {
            mean: vec![0.0, 0.5, 1.0],
            std: vec![1.0, 0.25, 2.0],
        };
        let mut img = decode_pnm(b"P6 1 1 255\n\xff\x00\x00").unwrap();
        per.apply(&mut img).unwrap();
        assert_eq!(img.data(), &[1.0, -2.0, -0.5]);
        assert!(Normalization {
            mean: vec![0.0],
            std: vec![0.0]
        }
        .validate()
        .is_err());
    }

    #[test]
    fn load_images_sorts_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path().join("b.ppm"), &Tensor::zeros(vec![3, 2, 2])).unwrap();
        write_image(dir.path().join("a.pgm"), &Tensor::ones(vec![1, 2, 2])).unwrap();
        fs::write(dir.path().join("notes.txt"), "skip").unwrap();
        let imgs = load_images(dir.path(), &Normalization::default()).unwrap();
        let ids: Vec<_> = imgs.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(imgs[1].1.data().iter().all(|&v| v == -1.0));
    }

    proptest! {
        #[test]
        fn round_trip_recovers_quantized_values(
            c in prop_oneof![Just(1usize), Just(3)],
            h in 1usize..6,
            w in 1usize..6,
            seed in proptest::collection::vec(0.0f32..=1.0, 108),
        ) {
            let data: Vec<f32> = seed.into_iter().take(c * h * w).collect();
            let img = Tensor::new(vec![c, h, w], data).unwrap();
            let back = decode_pnm(&encode_pnm(&img).unwrap()).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert_eq!(quantize(*a), quantize(*b));
                prop_assert_eq!(*b, quantize(*a) as f32 / 255.0);
            }
        }
    }
}
