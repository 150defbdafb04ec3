//! Binary portable pixmap (P6) and graymap (P5) reading and writing, with
//! optional 8-bit PNG support behind the `png` feature.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Data("truncated image header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((tokens, i + 1))
}

/// Decodes P5/P6 bytes into an `H×W×C` tensor of values in `0..=255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let (tok, offset) = header_tokens(bytes, 4)?;
    let channels = match tok[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Data(format!("unsupported image magic {m:?}"))),
    };
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Data(format!("bad image header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&tok[1])?, parse(&tok[2])?, parse(&tok[3])?);
    if w == 0 || h == 0 || maxval != 255 {
        return Err(Error::Data(format!(
            "unsupported image geometry {w}×{h} with maxval {maxval}"
        )));
    }
    let n = w * h * channels;
    let raster = bytes
        .get(offset..offset + n)
        .ok_or_else(|| Error::Data("truncated image raster".into()))?;
    Tensor::new(vec![h, w, channels], raster.iter().map(|&b| b as f64).collect())
}

/// Encodes an `H×W×C` tensor (C = 1 or 3) as P5/P6, rounding and clamping
/// values to `0..=255`.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = image.dims3()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Data(format!("cannot encode {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn write_pnm(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_pnm(image)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an image by extension: `.ppm`/`.pgm` always, `.png` with the `png` feature.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm") | Some("pgm") | Some("pnm") => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_pnm(&bytes)
        }
        #[cfg(feature = "png")]
        Some("png") => read_png(path),
        _ => Err(Error::Data(format!("unsupported image format for {}", path.display()))),
    }
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Tensor::new(
        vec![h as usize, w as usize, 3],
        img.into_raw().into_iter().map(f64::from).collect(),
    )
}

/// Binary mask (`H×W`, 0/1) as a graymap with damage at 255.
pub fn encode_mask(mask: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = mask.dims2()?;
    encode_pnm(&Tensor::new(
        vec![h, w, 1],
        mask.data().iter().map(|&m| m * 255.0).collect(),
    )?)
}

pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = mask.dims2()?;
    write_pnm(
        path,
        &Tensor::new(vec![h, w, 1], mask.data().iter().map(|&m| m * 255.0).collect())?,
    )
}

/// Reads a graymap mask; any nonzero pixel is damage.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = read_image(path)?;
    let (h, w, c) = img.dims3()?;
    if c != 1 {
        return Err(Error::Data(format!("{} is not a graymap", path.display())));
    }
    Tensor::new(
        vec![h, w],
        img.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
    )
}
