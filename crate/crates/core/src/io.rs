//! Image files: PNG and binary PPM in, lossless PNG or PPM out.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::network::INPUT_SHAPE;

/// A decoded image in both the classifier's resolution and its own.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub original: ImageRgb,
    pub model_view: ImageRgb,
}

impl LoadedImage {
    pub fn is_resized(&self) -> bool {
        self.original.width() != self.model_view.width() || self.original.height() != self.model_view.height()
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<LoadedImage> {
    let original = read_rgb(path)?;
    let model_view = original.resize_bilinear(INPUT_SHAPE[2], INPUT_SHAPE[1])?;
    Ok(LoadedImage { original, model_view })
}

/// Decodes without resizing.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let decode = |source| Error::Decode {
        path: path.to_path_buf(),
        source,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Pnm) => {}
        other => {
            return Err(Error::InvalidImage(format!(
                "{}: unsupported format {other:?} (expected PNG or PPM)",
                path.display()
            )))
        }
    }
    let decoded = reader.decode().map_err(decode)?.to_rgb32f();
    let (w, h) = decoded.dimensions();
    let data = decoded.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageRgb::new(w as usize, h as usize, data).map_err(|e| match e {
        Error::InvalidImage(msg) => Error::InvalidImage(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn to_rgb8(image: &ImageRgb) -> RgbImage {
    let raw = image.data().iter().map(|&v| quantize(v)).collect();
    RgbImage::from_raw(image.width() as u32, image.height() as u32, raw).expect("buffer matches dimensions")
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes 8-bit RGB: binary PPM (P6) for `.ppm`/`.pnm`, PNG otherwise.
pub fn save_image(image: &ImageRgb, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_ppm = matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("ppm" | "pnm")
    );
    let rgb = to_rgb8(image);
    let written = if is_ppm {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let encoder =
            PnmEncoder::new(std::io::BufWriter::new(file)).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
        rgb.write_with_encoder(encoder)
    } else {
        rgb.save_with_format(path, ImageFormat::Png)
    };
    written.map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })
}

/// Encodes as an 8-bit PNG in memory and decodes it again.
pub fn png_round_trip(image: &ImageRgb) -> Result<ImageRgb> {
    let in_memory = |source| Error::Decode {
        path: "<memory>".into(),
        source,
    };
    let mut bytes = Vec::new();
    to_rgb8(image)
        .write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(in_memory)?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(in_memory)?
        .to_rgb32f();
    ImageRgb::new(image.width(), image.height(), decoded.into_raw())
}

/// The image as it reads back after an 8-bit save.
pub fn quantized(image: &ImageRgb) -> ImageRgb {
    let data = image.data().iter().map(|&v| quantize(v) as f32 / 255.0).collect();
    ImageRgb::new(image.width(), image.height(), data).expect("quantized values stay in range")
}
