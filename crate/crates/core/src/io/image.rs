use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || height * width != data.len() {
            return Err(Error::dim("image", format!("{height}×{width} image with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    /// Intensities divided by 255, one channel.
    pub fn to_unit<T: Scalar>(&self) -> Vec<T> {
        let scale = T::from_f64_lossy(1.0 / 255.0);
        self.data.iter().map(|&v| T::from_u8(v).unwrap_or_else(T::zero) * scale).collect()
    }

    /// 1×1×H×W tensor with intensities in [0,1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(vec![1, 1, self.height, self.width], self.to_unit()).expect("dims match")
    }

    /// Zeroes every pixel outside `mask`.
    pub fn masked(&self, mask: &BinaryMask) -> Result<GrayImage> {
        if mask.dims() != self.dims() {
            return Err(Error::dim("mask image", format!("{:?} vs {:?}", self.dims(), mask.dims())));
        }
        Ok(GrayImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(mask.data()).map(|(&v, &m)| v * m).collect(),
        })
    }
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_space_and_comments(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(Error::Parse { offset: start, message: format!("expected {what}") });
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
    let value = text
        .parse::<usize>()
        .map_err(|_| Error::Parse { offset: start, message: format!("{what} `{text}` out of range") })?;
    Ok((value, end))
}

/// Parses a binary portable graymap (`P5`, maxval 255).
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 {
        return Err(Error::Parse { offset: 0, message: "missing magic number".into() });
    }
    if &bytes[..2] != b"P5" {
        return Err(Error::Format(format!(
            "unsupported magic `{}` at byte 0, expected P5",
            String::from_utf8_lossy(&bytes[..2])
        )));
    }
    let (width, pos) = header_number(bytes, 2, "width")?;
    let (height, pos) = header_number(bytes, pos, "height")?;
    let maxval_at = skip_space_and_comments(bytes, pos);
    let (maxval, pos) = header_number(bytes, pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Parse { offset: maxval_at, message: format!("maxval {maxval} unsupported, expected 255") });
    }
    if width == 0 || height == 0 {
        return Err(Error::Parse { offset: 2, message: "zero image dimension".into() });
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Parse { offset: pos, message: "expected single whitespace before raster".into() });
    }
    let start = pos + 1;
    let need = width * height;
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated raster: expected {need} bytes from offset {start}, found {have}"),
        });
    }
    GrayImage::new(height, width, bytes[start..start + need].to_vec())
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("png: image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let px = &buf[..info.buffer_size()];
    let data: Vec<u8> = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => px.chunks(channels).map(|c| c[0]).collect(),
        png::ColorType::Rgb | png::ColorType::Rgba => px
            .chunks(channels)
            .map(|c| ((299 * c[0] as u32 + 587 * c[1] as u32 + 114 * c[2] as u32 + 500) / 1000) as u8)
            .collect(),
        png::ColorType::Indexed => return Err(Error::Format("png: unexpanded palette".into())),
    };
    GrayImage::new(h, w, data)
}

/// Decodes PGM, or PNG when the bytes carry the PNG signature.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else {
        decode_pgm(bytes)
    }
}

pub fn encode_png(image: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(format!("png: {e}")))?;
        writer.write_image_data(&image.data).map_err(|e| Error::Format(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn write_image(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

fn mask_as_image(mask: &BinaryMask) -> GrayImage {
    GrayImage { height: mask.height(), width: mask.width(), data: mask.data().iter().map(|&v| v * 255).collect() }
}

pub fn encode_mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    encode_pgm(&mask_as_image(mask))
}

pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    encode_png(&mask_as_image(mask))
}

/// Nonzero pixels become foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = read_image(path)?;
    BinaryMask::new(img.height, img.width, img.data.iter().map(|&v| (v != 0) as u8).collect())
}

/// Writes foreground as 255 and background as 0.
pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask_pgm(mask)).map_err(|e| Error::io(path, e))
}

/// Colour overlay (binary `P6`): lung outline in green, infection in red.
pub fn write_overlay_ppm(
    path: impl AsRef<Path>,
    image: &GrayImage,
    lung: &BinaryMask,
    infection: &BinaryMask,
) -> Result<()> {
    let path = path.as_ref();
    if lung.dims() != image.dims() || infection.dims() != image.dims() {
        return Err(Error::dim("overlay", "mask and image sizes differ"));
    }
    let (h, w) = image.dims();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for c in 0..w {
            let v = image.get(r, c);
            let edge = lung.get(r, c)
                && [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dr, dc)| {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize || !lung.get(rr as usize, cc as usize)
                });
            let px = if infection.get(r, c) {
                [((v as u16 + 255) / 2) as u8, v / 2, v / 2]
            } else if edge {
                [0, 255, 0]
            } else {
                [v, v, v]
            };
            out.extend_from_slice(&px);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
