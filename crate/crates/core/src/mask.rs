//! Binary mask algebra for inpainting masks: person/skin combination,
//! square 3x3 dilation and PNG I/O.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ColorType, GrayImage, ImageReader, Luma};
use thiserror::Error;

/// 8-bit values above this are foreground.
pub const THRESHOLD: u8 = 127;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("cannot read mask {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("cannot write mask {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error("mask {path} is {color:?}; expected 8-bit single-channel")]
    NotGray8 { path: PathBuf, color: ColorType },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("mask dimensions must be positive and match the raster length")]
    BadShape,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 || bits.len() != width as usize * height as usize {
            return Err(MaskError::BadShape);
        }
        Ok(Self { width, height, bits })
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self::new(width, height, vec![value; width as usize * height as usize]).expect("positive dimensions")
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, bits).expect("positive dimensions")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Pixelwise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(MaskError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ))
        }
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn from_gray_image(img: &GrayImage) -> Result<Self, MaskError> {
        let bits = img.pixels().map(|p| p.0[0] > THRESHOLD).collect();
        Self::new(img.width(), img.height(), bits)
    }
}

/// How the person and skin masks are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CombineMode {
    #[default]
    Intersect,
    Union,
}

impl FromStr for CombineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intersect" => Ok(CombineMode::Intersect),
            "union" => Ok(CombineMode::Union),
            other => Err(format!("unknown combine mode {other:?} (intersect|union)")),
        }
    }
}

/// Pixelwise AND of person and skin masks.
pub fn compose_inpaint_mask(person: &BinaryMask, skin: &BinaryMask) -> Result<BinaryMask, MaskError> {
    combine(person, skin, CombineMode::Intersect)
}

pub fn combine(a: &BinaryMask, b: &BinaryMask, mode: CombineMode) -> Result<BinaryMask, MaskError> {
    a.check_shape(b)?;
    let bits = a
        .bits
        .iter()
        .zip(&b.bits)
        .map(|(&p, &q)| match mode {
            CombineMode::Intersect => p && q,
            CombineMode::Union => p || q,
        })
        .collect();
    Ok(BinaryMask {
        width: a.width,
        height: a.height,
        bits,
    })
}

/// One pass of dilation with a 3x3 square element; out-of-bounds is
/// background. Runs as a horizontal then a vertical 3-wide OR.
pub fn dilate_3x3(mask: &BinaryMask) -> BinaryMask {
    let w = mask.width as usize;
    let h = mask.height as usize;
    let src = &mask.bits;

    let mut horiz = vec![false; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let out = &mut horiz[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            let lo = x.saturating_sub(1);
            let hi = (x + 1).min(w - 1);
            *o = row[lo..=hi].iter().any(|&b| b);
        }
    }

    let mut bits = vec![false; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(1);
        let hi = (y + 1).min(h - 1);
        for x in 0..w {
            bits[y * w + x] = (lo..=hi).any(|yy| horiz[yy * w + x]);
        }
    }
    BinaryMask {
        width: mask.width,
        height: mask.height,
        bits,
    }
}

/// `iterations` successive 3x3 dilations.
pub fn dilate(mask: &BinaryMask, iterations: u32) -> BinaryMask {
    let mut m = mask.clone();
    for _ in 0..iterations {
        m = dilate_3x3(&m);
    }
    m
}

/// Combine then dilate: the final inpainting mask.
pub fn inpaint_mask(
    person: &BinaryMask,
    skin: &BinaryMask,
    mode: CombineMode,
    dilate_iters: u32,
) -> Result<BinaryMask, MaskError> {
    Ok(dilate(&combine(person, skin, mode)?, dilate_iters))
}

/// Foreground fraction in `[0, 1]`.
pub fn coverage(mask: &BinaryMask) -> f64 {
    mask.count() as f64 / mask.bits.len() as f64
}

pub fn decode_mask(path: impl AsRef<Path>) -> Result<BinaryMask, MaskError> {
    let path = path.as_ref();
    let read_err = |message: String| MaskError::Read {
        path: path.to_path_buf(),
        message,
    };
    let img = ImageReader::open(path)
        .map_err(|e| read_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| read_err(e.to_string()))?
        .decode()
        .map_err(|e| read_err(e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma8(gray) => BinaryMask::from_gray_image(&gray),
        other => Err(MaskError::NotGray8 {
            path: path.to_path_buf(),
            color: other.color(),
        }),
    }
}

/// Writes an 8-bit grayscale PNG, foreground 255 and background 0.
pub fn encode_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<(), MaskError> {
    let path = path.as_ref();
    mask.to_gray_image()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| MaskError::Write {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
