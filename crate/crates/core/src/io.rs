//! File formats: 8-bit colour PNG/JPEG, 16-bit millimeter depth PNG,
//! little-endian PFM, `.flo` flow dumps and 8-bit masks.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, ImageRGB, Raster};

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

pub fn load_rgb(path: &Path) -> Result<ImageRGB> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]).collect();
    Raster::new(w as usize, h as usize, data)
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_buffer(img: &ImageRGB) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let raw = img.data().iter().flat_map(|p| [to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]).collect();
    ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size")
}

/// Writes PNG or JPEG depending on the extension.
pub fn save_rgb(img: &ImageRGB, path: &Path) -> Result<()> {
    rgb_to_buffer(img).save(path).map_err(image_err(path))
}

/// Quantizes an image to 8 bits per channel and back.
pub fn quantize_rgb(img: &ImageRGB) -> ImageRGB {
    img.map(|p| [to_u8(p[0]) as f64 / 255.0, to_u8(p[1]) as f64 / 255.0, to_u8(p[2]) as f64 / 255.0])
}

/// Loads a depth map from a 16-bit PNG (millimeters, 0 = invalid) or a PFM (meters).
pub fn load_depth(path: &Path) -> Result<DepthMap> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if ext.as_deref() == Some("pfm") {
        let (w, h, channels, data) = read_pfm(path)?;
        if channels != 1 {
            return Err(Error::format(path, "depth PFM must be single-channel"));
        }
        let data = data.into_iter().map(|v| v as f64).collect();
        return DepthMap::new(w, h, data);
    }
    let img = image::open(path).map_err(image_err(path))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::format(path, format!("expected 16-bit single-channel PNG, got {:?}", other.color())))
        }
    };
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p[0] as f64 / 1000.0).collect();
    DepthMap::new(w as usize, h as usize, data)
}

/// 16-bit PNG in millimeters; invalid pixels and depths beyond 65.535 m are clamped into range
/// (invalid to 0).
pub fn save_depth_png(depth: &DepthMap, path: &Path) -> Result<()> {
    let raw: Vec<u16> = depth
        .values()
        .iter()
        .zip(depth.valid())
        .map(|(d, v)| if *v { (d * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16 } else { 0 })
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw).expect("buffer size");
    buf.save(path).map_err(image_err(path))
}

/// Depth as single-channel PFM in meters; invalid pixels are written as 0.
pub fn save_depth_pfm(depth: &DepthMap, path: &Path) -> Result<()> {
    let data: Vec<f32> = depth.values().iter().map(|v| *v as f32).collect();
    write_pfm(path, depth.width(), depth.height(), 1, &data)
}

/// Writes a little-endian PFM. `data` is row-major top-to-bottom, channel-interleaved.
pub fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<()> {
    assert!(channels == 1 || channels == 3, "PFM holds 1 or 3 channels");
    assert_eq!(data.len(), width * height * channels);
    let mut out = Vec::with_capacity(32 + data.len() * 4);
    let tag = if channels == 1 { "Pf" } else { "PF" };
    write!(out, "{tag}\n{width} {height}\n-1.0\n").expect("write to vec");
    let row = width * channels;
    for y in (0..height).rev() {
        for v in &data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a PFM of either endianness. Returns `(width, height, channels, top-to-bottom data)`.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format(path, format!("bad PFM tag {other:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PFM size {s:?}")));
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    let scale: f64 = fields[3].parse().map_err(|_| Error::format(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let n = width * height * channels;
    if bytes.len() < pos + n * 4 {
        return Err(Error::format(path, "truncated PFM raster"));
    }
    let row = width * channels;
    let mut data = vec![0f32; n];
    for (k, chunk) in bytes[pos..pos + n * 4].chunks_exact(4).enumerate() {
        let arr = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(arr) } else { f32::from_be_bytes(arr) };
        let file_row = k / row;
        let y = height - 1 - file_row;
        data[y * row + k % row] = v;
    }
    Ok((width, height, channels, data))
}

/// Binary mask as an 8-bit PNG with values 0/255.
pub fn save_mask(mask: &Raster<bool>, path: &Path) -> Result<()> {
    let raw = mask.data().iter().map(|m| if *m { 255u8 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("buffer size");
    buf.save(path).map_err(image_err(path))
}

pub fn load_mask(path: &Path) -> Result<Raster<bool>> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = img.dimensions();
    Raster::new(w as usize, h as usize, img.pixels().map(|p| p[0] >= 128).collect())
}

/// Middlebury `.flo`: magic `PIEH`, i32 width and height, then interleaved f32 (u, v).
pub fn write_flo(path: &Path, width: usize, height: usize, uv: &[(f32, f32)]) -> Result<()> {
    assert_eq!(uv.len(), width * height);
    let mut out = Vec::with_capacity(12 + uv.len() * 8);
    out.extend_from_slice(b"PIEH");
    out.extend_from_slice(&(width as i32).to_le_bytes());
    out.extend_from_slice(&(height as i32).to_le_bytes());
    for (u, v) in uv {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<(usize, usize, Vec<(f32, f32)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != b"PIEH" {
        return Err(Error::format(path, "missing PIEH magic"));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let h = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, "bad .flo dimensions"));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + w * h * 8 {
        return Err(Error::format(path, "bad .flo length"));
    }
    let uv = bytes[12..]
        .chunks_exact(8)
        .map(|c| {
            (
                f32::from_le_bytes(c[0..4].try_into().expect("4 bytes")),
                f32::from_le_bytes(c[4..8].try_into().expect("4 bytes")),
            )
        })
        .collect();
    Ok((w, h, uv))
}

/// `iteration,objective` CSV.
pub fn write_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut s = String::from("iteration,objective\n");
    for (i, v) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.25 - 1.0).collect();
        write_pfm(&p, 4, 3, 1, &data).unwrap();
        let (w, h, c, back) = read_pfm(&p).unwrap();
        assert_eq!((w, h, c), (4, 3, 1));
        assert_eq!(back, data);
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
        // bottom row first
        assert_eq!(&bytes[12..16], &data[8].to_le_bytes());
    }

    #[test]
    fn depth_png_is_millimeters_with_zero_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let d = DepthMap::new(3, 1, vec![1.234, 0.0, 40.0]).unwrap();
        save_depth_png(&d, &p).unwrap();
        let back = load_depth(&p).unwrap();
        assert_eq!(back.valid(), &[true, false, true]);
        assert!((back.values()[0] - 1.234).abs() < 1e-9);
        assert!((back.values()[2] - 40.0).abs() < 1e-9);
    }

    #[test]
    fn flo_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.flo");
        write_flo(&p, 2, 1, &[(1.0, -2.0), (0.5, 0.25)]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(bytes.len(), 12 + 16);
        let (w, h, uv) = read_flo(&p).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(uv, vec![(1.0, -2.0), (0.5, 0.25)]);
    }

    #[test]
    fn rgb_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let img = ImageRGB::from_fn(5, 4, |x, y| [x as f64 / 4.0, y as f64 / 3.0, 0.5]);
        save_rgb(&img, &p).unwrap();
        let back = load_rgb(&p).unwrap();
        assert_eq!(back, quantize_rgb(&img));
    }
}
