//! Heatmap (PGM) and overlay (PPM) rendering.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::cam::ExplanationMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Map `[0, 1]` to a byte, rounding to nearest.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Linear blue→red ramp.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [quantize(v), 0, quantize(1.0 - v)]
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |d: usize, s: usize, n: usize| -> (usize, usize, f64) {
        let pos = ((d as f64 + 0.5) * s as f64 / n as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(s - 1);
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Source image blended with an upsampled heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayImage {
    pub height: usize,
    pub width: usize,
    /// Heatmap at the source resolution.
    pub heatmap: Vec<f64>,
    pub blend: f64,
    /// Interleaved RGB bytes.
    pub pixels: Vec<u8>,
}

/// Blend `map` over `image` (`[C, H, W]` or `[1, C, H, W]`, values in
/// `[0, 1]`, one or three channels).
pub fn overlay<T: Scalar>(
    map: &ExplanationMap,
    image: &Tensor<T>,
    blend: f64,
) -> Result<OverlayImage> {
    let s = match image.shape() {
        [1, c, h, w] => [*c, *h, *w],
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::invalid(format!(
                "overlay needs a [C, H, W] image, got {other:?}"
            )))
        }
    };
    let [c, h, w] = s;
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!(
            "overlay needs 1 or 3 channels, got {c}"
        )));
    }
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::invalid(format!(
            "blend weight {blend} outside [0, 1]"
        )));
    }
    let heatmap = upsample_bilinear(&map.values, map.height, map.width, h, w);
    let data = image.data();
    let mut pixels = Vec::with_capacity(3 * h * w);
    for (i, &v) in heatmap.iter().enumerate() {
        let color = colormap(v);
        for (ch, &cv) in color.iter().enumerate() {
            let src = data[if c == 1 { i } else { ch * h * w + i }]
                .as_f64()
                .clamp(0.0, 1.0)
                * 255.0;
            pixels.push(((1.0 - blend) * src + blend * cv as f64).round() as u8);
        }
    }
    Ok(OverlayImage {
        height: h,
        width: w,
        heatmap,
        blend,
        pixels,
    })
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_pnm(path.as_ref(), "P5", width, height, pixels, 1)
}

pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_pnm(path.as_ref(), "P6", width, height, rgb, 3)
}

fn write_pnm(
    path: &Path,
    magic: &str,
    width: usize,
    height: usize,
    px: &[u8],
    ch: usize,
) -> Result<()> {
    if px.len() != width * height * ch {
        return Err(Error::invalid(format!(
            "{} bytes for a {width}x{height} image with {ch} channel(s)",
            px.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "{magic}\n{width} {height}\n255\n")?;
    f.write_all(px)?;
    Ok(())
}

/// Read a binary PGM (`P5`) or PPM (`P6`) with maxval 255.
/// Returns `(width, height, channels, bytes)`.
pub fn read_pnm(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PNM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::format(format!("unsupported PNM magic {m}"))),
    };
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad PNM number `{s}`")))
    };
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and raster
    let start = pos + 1;
    let len = width * height * channels;
    if bytes.len() < start + len {
        return Err(Error::format("truncated PNM raster"));
    }
    Ok((width, height, channels, bytes[start..start + len].to_vec()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPaths {
    pub heatmap: PathBuf,
    pub overlay: PathBuf,
}

/// Write `{stem}_heat.pgm` (map at grid resolution) and
/// `{stem}_overlay.ppm` (blended at image resolution) into `dir`.
pub fn render<T: Scalar>(
    map: &ExplanationMap,
    image: &Tensor<T>,
    dir: impl AsRef<Path>,
    stem: &str,
    blend: f64,
) -> Result<RenderedPaths> {
    let dir = dir.as_ref();
    let heat: Vec<u8> = map.values.iter().map(|&v| quantize(v)).collect();
    let heatmap = dir.join(format!("{stem}_heat.pgm"));
    write_pgm(&heatmap, map.width, map.height, &heat)?;
    let ov = overlay(map, image, blend)?;
    let overlay_path = dir.join(format!("{stem}_overlay.ppm"));
    write_ppm(&overlay_path, ov.width, ov.height, &ov.pixels)?;
    Ok(RenderedPaths {
        heatmap,
        overlay: overlay_path,
    })
}
