//! Flat-text tensors (exact round trip) and 8-bit PGM/PPM images.
//!
//! A flat tensor is three header lines `height`, `width`, `channels`
//! followed by one value per line in planar order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::Matrix;
use crate::operators::ImageShape;
use crate::scalar::Scalar;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    invalid(format!("{}: {e}", path.display()))
}

pub fn format_tensor<T: Scalar>(data: &[T], shape: ImageShape) -> Result<String> {
    check_len("tensor data", shape.len(), data.len())?;
    let mut out = format!("{}\n{}\n{}\n", shape.height, shape.width, shape.channels);
    for v in data {
        // `{:?}` prints the shortest representation that parses back exactly.
        out.push_str(&format!("{v:?}\n"));
    }
    Ok(out)
}

pub fn parse_tensor<T: Scalar>(text: &str) -> Result<(Vec<T>, ImageShape)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut header = [0usize; 3];
    for h in header.iter_mut() {
        let (i, l) = lines.next().ok_or(Error::Parse {
            line: 0,
            msg: "missing shape header".into(),
        })?;
        *h = l.trim().parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad dimension `{}`", l.trim()),
        })?;
    }
    let shape = ImageShape::new(header[0], header[1], header[2])?;
    let mut data = Vec::with_capacity(shape.len());
    for (i, l) in lines {
        let v: f64 = l.trim().parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad value `{}`", l.trim()),
        })?;
        data.push(T::of(v));
    }
    check_len("tensor data", shape.len(), data.len())?;
    Ok((data, shape))
}

pub fn write_tensor<T: Scalar>(path: &Path, data: &[T], shape: ImageShape) -> Result<()> {
    fs::write(path, format_tensor(data, shape)?).map_err(|e| io_err(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<(Vec<T>, ImageShape)> {
    parse_tensor(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
}

/// A matrix stored as a flat tensor of shape `rows × cols × 1`.
pub fn write_matrix<T: Scalar>(path: &Path, m: &Matrix<T>) -> Result<()> {
    write_tensor(path, m.as_slice(), ImageShape::new(m.rows(), m.cols(), 1)?)
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let (data, shape) = read_tensor(path)?;
    if shape.channels != 1 {
        return Err(invalid("matrix tensors have one channel"));
    }
    Matrix::from_row_major(shape.height, shape.width, data)
}

/// Binary PGM (one channel) or PPM (three channels). Values are mapped
/// from `[lo, hi]` to `0..=255` with clamping.
pub fn encode_pnm<T: Scalar>(data: &[T], shape: ImageShape, lo: T, hi: T) -> Result<Vec<u8>> {
    check_len("image data", shape.len(), data.len())?;
    if !(hi > lo) {
        return Err(invalid("image range must satisfy hi > lo"));
    }
    let magic = match shape.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(invalid(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    for y in 0..shape.height {
        for x in 0..shape.width {
            for c in 0..shape.channels {
                let v = ((data[shape.index(c, y, x)] - lo) / (hi - lo)).to_f64_lossy();
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_pnm<T: Scalar>(bytes: &[u8], lo: T, hi: T) -> Result<(Vec<T>, ImageShape)> {
    let bad = |msg: &str| Error::Parse {
        line: 0,
        msg: msg.to_string(),
    };
    // Header: magic, width, height, maxval, separated by whitespace, with
    // optional `#` comments; one whitespace byte precedes the raster.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PNM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported PNM type {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field `{s}`")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PNM is supported"));
    }
    let shape = ImageShape::new(height, width, channels)?;
    let raster = bytes.get(pos..pos + shape.len()).ok_or_else(|| bad("truncated raster"))?;
    let mut data = vec![T::zero(); shape.len()];
    let scale = T::of_usize(maxval);
    let mut it = raster.iter();
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let b = *it.next().expect("length checked");
                data[shape.index(c, y, x)] = lo + (hi - lo) * T::of(b as f64) / scale;
            }
        }
    }
    Ok((data, shape))
}

pub fn write_pnm<T: Scalar>(path: &Path, data: &[T], shape: ImageShape, lo: T, hi: T) -> Result<()> {
    let bytes = encode_pnm(data, shape, lo, hi)?;
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

pub fn read_pnm<T: Scalar>(path: &Path, lo: T, hi: T) -> Result<(Vec<T>, ImageShape)> {
    decode_pnm(&fs::read(path).map_err(|e| io_err(path, e))?, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal};

    #[test]
    fn tensor_round_trip_is_exact() {
        let shape = ImageShape::new(3, 4, 2).unwrap();
        let mut data: Vec<f64> = standard_normal(&mut seeded(1), shape.len());
        data[0] = 1e-300;
        data[1] = -0.1;
        let text = format_tensor(&data, shape).unwrap();
        let (back, s): (Vec<f64>, _) = parse_tensor(&text).unwrap();
        assert_eq!(s, shape);
        assert_eq!(back, data);
        let f: Vec<f32> = data.iter().map(|v| *v as f32).collect();
        let (back32, _): (Vec<f32>, _) = parse_tensor(&format_tensor(&f, shape).unwrap()).unwrap();
        assert_eq!(back32, f);
    }

    #[test]
    fn tensor_errors_name_the_line() {
        match parse_tensor::<f64>("2\n1\n1\n0.5\nabc\n") {
            Err(Error::Parse { line: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_tensor::<f64>("2\n1\n1\n0.5\n").is_err());
        assert!(parse_tensor::<f64>("2\n1\n").is_err());
    }

    #[test]
    fn pnm_round_trip() {
        let shape = ImageShape::new(2, 3, 3).unwrap();
        let levels: Vec<f64> = (0..shape.len()).map(|i| (i * 13 % 256) as f64).collect();
        let data: Vec<f64> = levels.iter().map(|l| -1.0 + 2.0 * l / 255.0).collect();
        let bytes = encode_pnm(&data, shape, -1.0, 1.0).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let (back, s) = decode_pnm::<f64>(&bytes, -1.0, 1.0).unwrap();
        assert_eq!(s, shape);
        assert!(back.iter().zip(&data).all(|(a, b)| (a - b).abs() < 1e-12));
        let gray = encode_pnm(&[2.0, -3.0], ImageShape::gray(1, 2), 0.0, 1.0).unwrap();
        assert_eq!(&gray[gray.len() - 2..], &[255, 0]);
        assert!(decode_pnm::<f64>(b"P5\n# c\n2 1\n255\n\x00", 0.0, 1.0).is_err());
        let (g, _) = decode_pnm::<f64>(b"P5\n# c\n2 1\n255\n\x00\xff", 0.0, 1.0).unwrap();
        assert_eq!(g, vec![0.0, 1.0]);
    }
}
