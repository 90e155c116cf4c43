//! Binary PGM (P5) and PPM (P6) decoding and folder ingestion.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{LabeledImageSet, Split};

/// Decoded raster with `channels` interleaved samples per pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    /// Luma `0.299 R + 0.587 G + 0.114 B`; single-channel images pass through.
    pub fn to_luma(&self) -> Vec<f64> {
        match self.channels {
            1 => self.pixels.clone(),
            _ => self
                .pixels
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    /// Planes `[C, H, W]` with `channels` output planes (1 or 3).
    fn planes(&self, channels: usize) -> Vec<Vec<f64>> {
        match (channels, self.channels) {
            (1, _) => vec![self.to_luma()],
            (_, 1) => vec![self.pixels.clone(); channels],
            _ => (0..3)
                .map(|c| self.pixels.iter().skip(c).step_by(3).copied().collect())
                .collect(),
        }
    }
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("PNM", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("PNM", format!("bad header number {:?}", String::from_utf8_lossy(tok))))
}

/// Decode a binary PGM or PPM file with 8-bit or 16-bit samples.
pub fn decode_pnm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos)? {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::format(
                "PNM",
                format!("unsupported magic {:?}", String::from_utf8_lossy(other)),
            ))
        }
    };
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(
            "PNM",
            format!("bad dimensions {width}x{height} maxval {maxval}"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let count = width * height * channels;
    let raster = bytes
        .get(pos..pos + count * bytes_per_sample)
        .ok_or_else(|| Error::format("PNM", "truncated raster"))?;
    let scale = maxval as f64;
    let pixels = if bytes_per_sample == 1 {
        raster.iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0))
            .collect()
    };
    Ok(GrayImage {
        width,
        height,
        channels,
        pixels,
    })
}

/// Smallest multiple of 16 that holds `image_size`.
pub fn padded_size(image_size: usize) -> usize {
    image_size.div_ceil(16) * 16
}

/// Bilinearly resize a `width x height` plane so its longer side equals
/// `target`, then center it on a `canvas x canvas` plane filled with 0.5.
pub fn resize_onto_canvas(plane: &[f64], width: usize, height: usize, target: usize, canvas: usize) -> Vec<f64> {
    let longer = width.max(height) as f64;
    let new_w = ((width as f64 * target as f64 / longer).round() as usize).clamp(1, target);
    let new_h = ((height as f64 * target as f64 / longer).round() as usize).clamp(1, target);
    let off_x = (canvas - new_w) / 2;
    let off_y = (canvas - new_h) / 2;
    let sx = width as f64 / new_w as f64;
    let sy = height as f64 / new_h as f64;
    let mut out = vec![0.5; canvas * canvas];
    for y in 0..new_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let ty = fy - y0 as f64;
        for x in 0..new_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| plane[yy * width + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            out[(y + off_y) * canvas + x + off_x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::file(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Load `root/<class>/<image>.{pgm,ppm}` into a labeled set. Classes are
/// numbered in lexicographic directory order. Images are resized so their
/// longer side is `image_size` and centered on a gray canvas whose side is
/// `image_size` rounded up to a multiple of 16. With `permissive`,
/// unreadable files are skipped with a warning instead of failing.
pub fn load_image_folder(
    root: impl AsRef<Path>,
    image_size: usize,
    channels: usize,
    permissive: bool,
) -> Result<LabeledImageSet> {
    let root = root.as_ref();
    if image_size == 0 {
        return Err(Error::contract("image size must be positive"));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::contract(format!("channels must be 1 or 3, got {channels}")));
    }
    let canvas = padded_size(image_size);
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::contract(format!(
            "{} needs at least 2 class subdirectories, found {}",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut loaded = 0;
        for path in sorted_entries(dir)? {
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm")) {
                continue;
            }
            let decoded = fs::read(&path)
                .map_err(|e| Error::file(&path, e))
                .and_then(|bytes| decode_pnm(&bytes).map_err(|e| Error::contract(format!("{}: {e}", path.display()))));
            let img = match decoded {
                Ok(img) => img,
                Err(e) if permissive => {
                    warn!("skipping {e}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            for plane in img.planes(channels) {
                data.extend(resize_onto_canvas(&plane, img.width, img.height, image_size, canvas));
            }
            labels.push(label);
            loaded += 1;
        }
        if loaded == 0 {
            return Err(Error::contract(format!(
                "class directory {} holds no readable images",
                dir.display()
            )));
        }
    }
    let images = Tensor::new(vec![labels.len(), channels, canvas, canvas], data)?;
    LabeledImageSet::new(images, labels, Split::Test, 0, class_names)
}
