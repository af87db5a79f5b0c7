//! 8-bit PNG / binary PGM input and output.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{GrayImage, ImageBuffer, ImageEncoder, Luma, Rgb, RgbImage};

use crate::color::RgbGrid;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

const EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| image_err(path, e))
}

/// Reads any supported image as 8-bit luminance.
pub fn read_gray(path: &Path) -> Result<ImageGrid> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(ImageGrid::from_fn(h as usize, w as usize, |y, x| {
        img.get_pixel(x as u32, y as u32)[0] as f64
    }))
}

pub fn read_rgb(path: &Path) -> Result<RgbGrid> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let plane = |c: usize| {
        ImageGrid::from_fn(h as usize, w as usize, |y, x| img.get_pixel(x as u32, y as u32)[c] as f64)
    };
    RgbGrid::new(plane(0), plane(1), plane(2))
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn save<P: image::Pixel<Subpixel = u8> + image::PixelWithColorType>(
    path: &Path,
    buf: ImageBuffer<P, Vec<u8>>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let subtype = match ext.as_deref() {
        Some("pgm") => Some(PnmSubtype::Graymap(SampleEncoding::Binary)),
        Some("ppm") => Some(PnmSubtype::Pixmap(SampleEncoding::Binary)),
        _ => None,
    };
    let Some(subtype) = subtype else {
        return buf.save(path).map_err(|e| image_err(path, e));
    };
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (w, h) = buf.dimensions();
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(buf.as_raw(), w, h, P::COLOR_TYPE)
        .map_err(|e| image_err(path, e))
}

/// Writes a grayscale image, rounding and clamping to `[0, 255]`. Format follows the extension.
pub fn write_gray(path: &Path, img: &ImageGrid) -> Result<()> {
    let buf: GrayImage = ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        Luma([quantize(img.get(y as usize, x as usize))])
    });
    save(path, buf)
}

pub fn write_rgb(path: &Path, img: &RgbGrid) -> Result<()> {
    let [r, g, b] = &img.channels;
    let buf: RgbImage = ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb([quantize(r.get(y, x)), quantize(g.get(y, x)), quantize(b.get(y, x))])
    });
    save(path, buf)
}

/// Image files in `dir`, sorted lexicographically by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| Error::Io {
                path: dir.display().to_string(),
                source,
            })?
            .path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
