use super::GrayImage;
use crate::mask::BinaryMask;

/// Source coordinate and blend weight for half-pixel-centre sampling.
fn sample_axis(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize to `size`×`size` with half-pixel-centre sampling
/// (corners not aligned).
pub fn resize(image: &GrayImage, size: usize) -> GrayImage {
    let (h, w) = image.dims();
    if (h, w) == (size, size) {
        return image.clone();
    }
    let rows: Vec<_> = (0..size).map(|r| sample_axis(r, h, size)).collect();
    let cols: Vec<_> = (0..size).map(|c| sample_axis(c, w, size)).collect();
    let mut data = Vec::with_capacity(size * size);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let p = |y: usize, x: usize| image.get(y, x) as f64;
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(size, size, data).expect("size > 0")
}

/// Nearest-neighbour resize; output stays binary.
pub fn resize_mask(mask: &BinaryMask, size: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(size, size, |r, c| {
        let sr = ((2 * r + 1) * h / (2 * size)).min(h - 1);
        let sc = ((2 * c + 1) * w / (2 * size)).min(w - 1);
        mask.get(sr, sc)
    })
}
