//! Raster files: raw float32 with a JSON sidecar, and PNG previews.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, Rgb, RgbField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawMeta {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `data` as little-endian float32 plus a `{width, height, channels}` sidecar.
pub fn write_raw(path: &Path, meta: RawMeta, data: &[f32]) -> Result<()> {
    if data.len() != meta.width * meta.height * meta.channels {
        return Err(Error::Shape(format!(
            "raw payload has {} values, header says {}x{}x{}",
            data.len(),
            meta.width,
            meta.height,
            meta.channels
        )));
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_json(&sidecar(path), &meta)
}

pub fn read_raw(path: &Path) -> Result<(RawMeta, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta: RawMeta = read_json(&sidecar(path))?;
    let n = meta.width * meta.height * meta.channels;
    if bytes.len() != 4 * n {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", 4 * n, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((meta, data))
}

pub fn write_field(path: &Path, f: &Field) -> Result<()> {
    let data: Vec<f32> = f.data.iter().map(|&v| v as f32).collect();
    let meta = RawMeta {
        width: f.width,
        height: f.height,
        channels: 1,
    };
    write_raw(path, meta, &data)
}

pub fn read_field(path: &Path) -> Result<Field> {
    let (meta, data) = read_raw(path)?;
    if meta.channels != 1 {
        return Err(Error::format(
            path,
            format!("expected 1 channel, found {}", meta.channels),
        ));
    }
    Ok(Grid {
        width: meta.width,
        height: meta.height,
        data: data.into_iter().map(f64::from).collect(),
    })
}

pub fn write_rgb(path: &Path, f: &RgbField) -> Result<()> {
    let data: Vec<f32> = f.data.iter().flat_map(|p| p.map(|v| v as f32)).collect();
    let meta = RawMeta {
        width: f.width,
        height: f.height,
        channels: 3,
    };
    write_raw(path, meta, &data)
}

pub fn read_rgb(path: &Path) -> Result<RgbField> {
    let (meta, data) = read_raw(path)?;
    if meta.channels != 3 {
        return Err(Error::format(
            path,
            format!("expected 3 channels, found {}", meta.channels),
        ));
    }
    Ok(Grid {
        width: meta.width,
        height: meta.height,
        data: data
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect(),
    })
}

/// Reads an RGB image from raw float32 (`.f32`) or PNG (8 or 16 bit, gray or RGB).
pub fn read_image(path: &Path) -> Result<RgbField> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        _ => read_rgb(path),
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::format(path, e))
}

fn png_encoder<'a, W: Write>(
    w: W,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
) -> png::Encoder<'a, W> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc
}

fn write_png_bytes(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = png_encoder(BufWriter::new(file), width, height, color, depth);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer.write_image_data(bytes).map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

fn unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// 16-bit RGB PNG, values clamped to `[0, 1]`.
pub fn write_png16_rgb(path: &Path, f: &RgbField) -> Result<()> {
    let bytes: Vec<u8> = f
        .data
        .iter()
        .flatten()
        .flat_map(|&v| ((unit(v) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    write_png_bytes(
        path,
        f.width,
        f.height,
        png::ColorType::Rgb,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

pub fn write_png8_rgb(path: &Path, f: &RgbField) -> Result<()> {
    let bytes: Vec<u8> = f
        .data
        .iter()
        .flatten()
        .map(|&v| (unit(v) * 255.0).round() as u8)
        .collect();
    write_png_bytes(
        path,
        f.width,
        f.height,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &bytes,
    )
}

pub fn write_png8_gray(path: &Path, f: &Field) -> Result<()> {
    let bytes: Vec<u8> = f.data.iter().map(|&v| (unit(v) * 255.0).round() as u8).collect();
    write_png_bytes(
        path,
        f.width,
        f.height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &bytes,
    )
}

/// Colour scale used for depth previews.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthScale {
    pub z_min: f64,
    pub z_max: f64,
    pub colormap: String,
    pub invalid: [u8; 3],
}

// a few control points of a perceptually ordered blue-to-yellow ramp
const RAMP: [Rgb; 5] = [
    [0.267, 0.005, 0.329],
    [0.229, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

fn ramp(t: f64) -> Rgb {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    [
        a[0] + f * (b[0] - a[0]),
        a[1] + f * (b[1] - a[1]),
        a[2] + f * (b[2] - a[2]),
    ]
}

/// Colourized depth preview; NaN pixels are black. Writes the scale next to it.
pub fn write_depth_png(path: &Path, z: &Field, z_min: f64, z_max: f64) -> Result<()> {
    let rgb = z.map(|v| {
        if v.is_finite() {
            ramp((v - z_min) / (z_max - z_min))
        } else {
            [0.0; 3]
        }
    });
    write_png8_rgb(path, &rgb)?;
    let scale = DepthScale {
        z_min,
        z_max,
        colormap: "viridis-5".into(),
        invalid: [0, 0, 0],
    };
    write_json(&path.with_extension("scale.json"), &scale)
}

pub fn read_png(path: &Path) -> Result<RgbField> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect(),
        other => return Err(Error::format(path, format!("unsupported bit depth {other:?}"))),
    };
    let ch = info.color_type.samples();
    let data = samples
        .chunks_exact(ch)
        .map(|s| match ch {
            1 | 2 => [s[0]; 3],
            _ => [s[0], s[1], s[2]],
        })
        .collect::<Vec<_>>();
    if data.len() != w * h {
        return Err(Error::format(path, "truncated image data"));
    }
    Ok(Grid {
        width: w,
        height: h,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_roundtrip_keeps_nan_and_inf() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.f32");
        let f = Grid {
            width: 3,
            height: 1,
            data: vec![1.25, f64::NAN, f64::INFINITY],
        };
        write_field(&p, &f).unwrap();
        let g = read_field(&p).unwrap();
        assert_eq!(g.data[0], 1.25);
        assert!(g.data[1].is_nan());
        assert_eq!(g.data[2], f64::INFINITY);
        assert!(read_rgb(&p).is_err());
    }

    #[test]
    fn png16_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let f = Grid::from_fn(4, 3, |x, y| [x as f64 / 3.0, y as f64 / 2.0, 1.5]);
        write_png16_rgb(&p, &f).unwrap();
        let g = read_png(&p).unwrap();
        for (a, b) in f.data.iter().zip(&g.data) {
            assert!((a[0] - b[0]).abs() < 1e-4 && (a[1] - b[1]).abs() < 1e-4);
            assert_eq!(b[2], 1.0);
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_field(Path::new("/nonexistent/x.f32")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.f32"));
    }
}
