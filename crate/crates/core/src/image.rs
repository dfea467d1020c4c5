//! Binary PPM (P6) frame output and heatmap rendering.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tensor_io::write_atomic;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a `[3, h, w]` or `[1, h, w]` image in `[0, 1]` as P6.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match img.dims() {
        [c @ (1 | 3), h, w] => (*c, *h, *w),
        d => return Err(Error::shape(format!("PPM expects [3|1, h, w], got {d:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            let src = if c == 3 { ch } else { 0 };
            out.push(quantize(img.data()[src * plane + p]));
        }
    }
    Ok(out)
}

pub fn write_ppm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(img)?)
}

/// Decode a P6 file with maxval 255 into a `[3, h, w]` tensor.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Validation(format!("PPM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only P6 with maxval 255 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated payload"))?;
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = body[3 * p + ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Map a single-channel `[h, w]` field to a blue-to-red `[3, h, w]` heatmap,
/// normalised by its own min and max.
pub fn heatmap(field: &Tensor) -> Result<Tensor> {
    let (h, w) = match field.dims() {
        [h, w] => (*h, *w),
        d => return Err(Error::shape(format!("heatmap expects [h, w], got {d:?}"))),
    };
    let lo = field.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = field.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, &v) in field.data().iter().enumerate() {
        let t = (v - lo) / span;
        data[p] = t;
        data[plane + p] = 1.0 - (2.0 * t - 1.0).abs();
        data[2 * plane + p] = 1.0 - t;
    }
    Tensor::new(vec![3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_at_byte_precision() {
        let img = Tensor::from_fn(vec![3, 2, 5], |i| (i * 17 % 256) as f32 / 255.0);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n5 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 30);
        let back = decode_ppm(&bytes).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn clamps_out_of_range() {
        let img = Tensor::new(vec![1, 1, 2], vec![-3.0, 7.0]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn heatmap_extremes() {
        let f = Tensor::new(vec![1, 2], vec![0.0, 4.0]).unwrap();
        let h = heatmap(&f).unwrap();
        assert_eq!(h.data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
