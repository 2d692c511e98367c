//! 8-bit PNG input and output. Pixels are quantized as `round(v·255)` on
//! write and restored as `byte / 255` on read.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::{Error, Result, Tensor};

fn png_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

/// Rounds every value to the nearest representable 8-bit level, matching
/// what a write/read cycle produces.
pub fn quantize_tensor(t: &Tensor) -> Tensor {
    t.map(|v| dequantize(quantize(v)))
}

/// Reads an 8-bit RGB image into `[3, H, W]`.
pub fn png_read(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != BitDepth::Eight {
        return Err(png_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    if info.color_type != ColorType::Rgb {
        return Err(png_err(path, format!("unsupported color type {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| png_err(path, e.to_string()))?;
    let bytes = &buf[..frame.buffer_size()];
    let mut out = Tensor::zeros(&[3, h, w]);
    let data = out.data_mut();
    for y in 0..h {
        let row = &bytes[y * frame.line_size..];
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = dequantize(row[x * 3 + c]);
            }
        }
    }
    Ok(out)
}

fn write_raw(path: &Path, w: usize, h: usize, color: ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| png_err(path, e.to_string()))?;
    writer.finish().map_err(|e| png_err(path, e.to_string()))
}

/// Writes a `[3, H, W]` image with values in `[0, 1]`.
pub fn png_write(path: &Path, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(png_err(path, format!("expected [3, H, W], got {:?}", image.shape())));
    }
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(png_err(path, format!("pixel value {v} outside [0, 1]")));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(quantize(d[(c * h + y) * w + x]));
            }
        }
    }
    write_raw(path, w, h, ColorType::Rgb, &bytes)
}

/// Lays a `[C, H, W]` field out as a grayscale strip of `C` tiles, min-max
/// normalized over the whole field (constant fields map to 0).
pub fn png_write_field(path: &Path, field: &Tensor) -> Result<()> {
    let (c, h, w) = match field.shape() {
        &[c, h, w] => (c, h, w),
        &[h, w] => (1, h, w),
        other => return Err(png_err(path, format!("expected [C, H, W], got {other:?}"))),
    };
    let (lo, hi) = (field.min(), field.max());
    let span = hi - lo;
    let d = field.data();
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for ch in 0..c {
            for x in 0..w {
                let v = d[(ch * h + y) * w + x];
                bytes.push(if span > 0.0 { quantize((v - lo) / span) } else { 0 });
            }
        }
    }
    write_raw(path, c * w, h, ColorType::Grayscale, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 101) as f64 / 100.0);
        png_write(&path, &img).unwrap();
        let back = png_read(&path).unwrap();
        assert_eq!(back, quantize_tensor(&img));
        png_write(&path, &back).unwrap();
        assert_eq!(png_read(&path).unwrap(), back);
    }

    #[test]
    fn rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        let gray = dir.path().join("g.png");
        png_write_field(&gray, &Tensor::from_fn(&[4, 8, 8], |i| i as f64)).unwrap();
        let err = png_read(&gray).unwrap_err().to_string();
        assert!(err.contains("unsupported color type"), "{err}");

        let deep = dir.path().join("d.png");
        let file = File::create(&deep).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 2, 2);
        enc.set_color(ColorType::Rgb);
        enc.set_depth(BitDepth::Sixteen);
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(&[0u8; 24]).unwrap();
        wr.finish().unwrap();
        let err = png_read(&deep).unwrap_err().to_string();
        assert!(err.contains("unsupported bit depth"), "{err}");
    }

    #[test]
    fn write_rejects_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let err = png_write(&dir.path().join("x.png"), &Tensor::full(&[3, 2, 2], 1.5));
        assert!(err.is_err());
    }
}
