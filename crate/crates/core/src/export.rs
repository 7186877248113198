//! Standard-format exports: 3D Gaussian splatting PLY files and PNG maps.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::bundle::{atomic_write, io_err, BundleError};
use crate::config::LOGIT_CAP;
use crate::scene::{GaussianField, GaussianPrimitive, BACKGROUND};

/// Zeroth-order spherical harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Higher-order SH coefficients emitted as zeros (degree 3).
const F_REST: usize = 45;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("ply: {0}")]
    Ply(String),
    #[error("png: {0}")]
    Png(String),
}

impl ExportError {
    pub fn code(&self) -> &'static str {
        match self {
            ExportError::Bundle(e) => e.code(),
            ExportError::Ply(_) => "ply",
            ExportError::Png(_) => "png",
        }
    }
}

fn ply_properties() -> Vec<String> {
    let mut p: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    p.extend((0..F_REST).map(|i| format!("f_rest_{i}")));
    p.push("opacity".into());
    p.extend((0..3).map(|i| format!("scale_{i}")));
    p.extend((0..4).map(|i| format!("rot_{i}")));
    p
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln().clamp(-LOGIT_CAP, LOGIT_CAP)
}

/// Serializes the field. The first three attributes are taken as RGB.
pub fn ply_bytes(field: &GaussianField) -> Result<Vec<u8>, ExportError> {
    if field.attr_dim() < 3 {
        return Err(ExportError::Ply(format!("need RGB attributes, field has {}", field.attr_dim())));
    }
    let props = ply_properties();
    let mut out = String::from("ply\nformat binary_little_endian 1.0\n");
    out += &format!("element vertex {}\n", field.len());
    for p in &props {
        out += &format!("property float {p}\n");
    }
    out += "end_header\n";
    let mut bytes = out.into_bytes();
    for g in field.prims() {
        let mut row = Vec::with_capacity(props.len());
        row.extend(g.mean);
        row.extend([0.0; 3]);
        row.extend(g.attr[..3].iter().map(|c| (c - 0.5) / SH_C0));
        row.extend([0.0; F_REST]);
        row.push(logit(g.opacity));
        row.extend(g.scale.iter().map(|s| s.ln()));
        row.extend(g.rotation);
        for v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn export_ply(field: &GaussianField, path: &Path) -> Result<(), ExportError> {
    atomic_write(path, &ply_bytes(field)?)?;
    Ok(())
}

/// Parses a binary little-endian PLY with float vertex properties into a
/// sparse RGB field. Unknown properties are skipped.
pub fn parse_ply(bytes: &[u8]) -> Result<GaussianField, ExportError> {
    let bad = |m: &str| ExportError::Ply(m.to_string());
    let end = b"end_header\n";
    let header_end = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| bad("no end_header"))?
        + end.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header is not utf-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply signature"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => return Err(bad("only binary_little_endian is supported")),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["element", other, _] => return Err(ExportError::Ply(format!("unsupported element {other}"))),
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, _] => return Err(ExportError::Ply(format!("unsupported property type {ty}"))),
            _ => {}
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element"))?;
    let stride = 4 * props.len();
    let body = &bytes[header_end..];
    if body.len() != n * stride {
        return Err(ExportError::Ply(format!("body has {} bytes, expected {}", body.len(), n * stride)));
    }
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| ExportError::Ply(format!("missing property {name}")))
    };
    let idx = |names: &[&str]| names.iter().map(|n| col(n)).collect::<Result<Vec<_>, _>>();
    let pos = idx(&["x", "y", "z"])?;
    let dc = idx(&["f_dc_0", "f_dc_1", "f_dc_2"])?;
    let op = col("opacity")?;
    let sc = idx(&["scale_0", "scale_1", "scale_2"])?;
    let rot = idx(&["rot_0", "rot_1", "rot_2", "rot_3"])?;
    let prims = body
        .chunks_exact(stride.max(1))
        .take(n)
        .map(|rec| {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            GaussianPrimitive {
                mean: [f(pos[0]), f(pos[1]), f(pos[2])],
                opacity: 1.0 / (1.0 + (-f(op)).exp()),
                rotation: [f(rot[0]), f(rot[1]), f(rot[2]), f(rot[3])],
                scale: [f(sc[0]).exp(), f(sc[1]).exp(), f(sc[2]).exp()],
                attr: dc.iter().map(|&k| f(k) * SH_C0 + 0.5).collect(),
            }
        })
        .collect();
    GaussianField::sparse(3, prims).map_err(|e| ExportError::Ply(e.to_string()))
}

pub fn import_ply(path: &Path) -> Result<GaussianField, ExportError> {
    let bytes = fs::read(path).map_err(io_err(path)).map_err(ExportError::from)?;
    parse_ply(&bytes)
}

fn encode_png<P, C>(img: &ImageBuffer<P, C>) -> Result<Vec<u8>, ExportError>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| ExportError::Png(e.to_string()))?;
    Ok(buf.into_inner())
}

/// 16-bit grayscale id map; background is stored as 0 and id `k` as `k + 1`.
pub fn id_map_png(ids: &Array2<i32>) -> Result<Vec<u8>, ExportError> {
    let (h, w) = ids.dim();
    let mut px = Vec::with_capacity(h * w);
    for &id in ids {
        if id < BACKGROUND || id >= u16::MAX as i32 {
            return Err(ExportError::Png(format!("id {id} does not fit a 16-bit map")));
        }
        px.push((id + 1) as u16);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, px).expect("sized buffer");
    encode_png(&img)
}

/// Reads an id map written by [`id_map_png`].
pub fn read_id_map_png(bytes: &[u8]) -> Result<Array2<i32>, ExportError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ExportError::Png(e.to_string()))?
        .into_luma16();
    let (w, h) = img.dimensions();
    let v = img.into_raw().into_iter().map(|x| x as i32 - 1).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), v).expect("sized buffer"))
}

/// Deterministic distinct-ish color per id; background is black.
pub fn palette(id: i32) -> [u8; 3] {
    if id == BACKGROUND {
        return [0, 0, 0];
    }
    // golden-ratio hue walk, fixed saturation/value
    let h = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.65, 0.95);
    let f = h.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match h as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

pub fn palette_png(ids: &Array2<i32>) -> Result<Vec<u8>, ExportError> {
    let (h, w) = ids.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(palette(ids[[y as usize, x as usize]])));
    encode_png(&img)
}

/// `(3, H, W)` image in `[0, 1]` to 8-bit RGB.
pub fn rgb_png(img: &Array3<f64>) -> Result<Vec<u8>, ExportError> {
    let (k, h, w) = img.dim();
    if k < 3 {
        return Err(ExportError::Png(format!("need 3 channels, got {k}")));
    }
    let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([q(img[[0, y, x]]), q(img[[1, y, x]]), q(img[[2, y, x]])])
    });
    encode_png(&out)
}

/// Linear 16-bit depth preview over `[0, max]`; returns the bytes and `max`.
pub fn depth_png(depth: &Array2<f64>) -> Result<(Vec<u8>, f64), ExportError> {
    let (h, w) = depth.dim();
    let max = depth.iter().cloned().filter(|d| d.is_finite()).fold(0.0, f64::max);
    let scale = if max > 0.0 { u16::MAX as f64 / max } else { 0.0 };
    let px = depth
        .iter()
        .map(|&d| if d.is_finite() { (d.max(0.0) * scale).round() as u16 } else { 0 })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, px).expect("sized buffer");
    Ok((encode_png(&img)?, max))
}

/// Gray image of a square matrix with entries in `[0, 1]`, `cell` pixels
/// per entry.
pub fn matrix_png(m: &Array2<f64>, cell: usize) -> Result<Vec<u8>, ExportError> {
    let (r, c) = m.dim();
    let cell = cell.max(1);
    let img = GrayImage::from_fn((c * cell) as u32, (r * cell) as u32, |x, y| {
        let v = m[[y as usize / cell, x as usize / cell]];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    encode_png(&img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(opacity: f64) -> GaussianField {
        let mut g = GaussianPrimitive::isotropic([1.0, -2.0, 3.5], 0.7, opacity, vec![0.2, 0.5, 0.9]);
        g.rotation = [0.5, 0.5, -0.5, 0.5];
        g.scale = [0.6, 1.1, 2.0];
        GaussianField::sparse(3, vec![g]).unwrap()
    }

    fn field_close(a: &GaussianField, b: &GaussianField, tol: f64) -> bool {
        let close = |x: f64, y: f64| (x - y).abs() <= tol * x.abs().max(1.0);
        a.len() == b.len()
            && a.prims().iter().zip(b.prims()).all(|(p, q)| {
                p.mean.iter().zip(&q.mean).all(|(&x, &y)| close(x, y))
                    && close(p.opacity, q.opacity)
                    && p.rotation.iter().zip(&q.rotation).all(|(&x, &y)| close(x, y))
                    && p.scale.iter().zip(&q.scale).all(|(&x, &y)| close(x, y))
                    && p.attr[..3].iter().zip(&q.attr).all(|(&x, &y)| close(x, y))
            })
    }

    #[test]
    fn single_gaussian_ply() {
        let bytes = ply_bytes(&one(0.5)).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("element vertex 1\n"));
        assert!(text.contains("property float f_rest_44\n"));
        let back = parse_ply(&bytes).unwrap();
        assert!(field_close(&one(0.5), &back, 1e-6));
    }

    #[test]
    fn half_opacity_is_stored_as_zero_logit() {
        let bytes = ply_bytes(&one(0.5)).unwrap();
        let props = ply_properties();
        let header_len = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let k = props.iter().position(|p| p == "opacity").unwrap();
        let at = header_len + 4 * k;
        assert_eq!(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()), 0.0);
    }

    #[test]
    fn rejects_non_rgb_and_garbage() {
        let g = GaussianPrimitive::isotropic([0.0; 3], 1.0, 0.5, vec![1.0]);
        assert!(ply_bytes(&GaussianField::sparse(1, vec![g]).unwrap()).is_err());
        assert!(parse_ply(b"not a ply").is_err());
        let mut bytes = ply_bytes(&one(0.3)).unwrap();
        bytes.pop();
        assert!(parse_ply(&bytes).is_err());
    }

    #[test]
    fn id_map_round_trip() {
        let ids = ndarray::arr2(&[[-1, 0, 7], [300, 65533, -1]]);
        let back = read_id_map_png(&id_map_png(&ids).unwrap()).unwrap();
        assert_eq!(back, ids);
        assert!(id_map_png(&ndarray::arr2(&[[65535]])).is_err());
    }

    #[test]
    fn previews_encode() {
        assert!(palette_png(&ndarray::arr2(&[[-1, 1], [2, 3]])).is_ok());
        assert!(rgb_png(&Array3::from_elem((3, 2, 2), 0.5)).is_ok());
        assert_eq!(depth_png(&ndarray::arr2(&[[1.0, 4.0]])).unwrap().1, 4.0);
        assert!(matrix_png(&Array2::eye(3), 4).is_ok());
        assert_eq!(palette(BACKGROUND), [0, 0, 0]);
        assert_ne!(palette(1), palette(2));
    }

    proptest! {
        #[test]
        fn ply_round_trip_within_tolerance(
            mean in prop::array::uniform3(-100.0f64..100.0),
            opacity in 0.01f64..0.99,
            q in prop::array::uniform4(-1.0f64..1.0),
            scale in prop::array::uniform3(0.5f64..15.0),
            rgb in prop::array::uniform3(0.0f64..1.0),
        ) {
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(n > 0.1);
            let g = GaussianPrimitive {
                mean,
                opacity,
                rotation: [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
                scale,
                attr: rgb.to_vec(),
            };
            let f = GaussianField::sparse(3, vec![g]).unwrap();
            let back = parse_ply(&ply_bytes(&f).unwrap()).unwrap();
            prop_assert!(field_close(&f, &back, 1e-6));
        }
    }
}
