//! RGB frames stored channel-first with values normalized to `[0, 1]`.
//!
//! Conversion to and from 8-bit happens only at file I/O; every numeric
//! routine in the crate works on the normalized representation.

use std::fmt::Debug;
use std::path::Path;

use ndarray::{Array3, ArrayView2, ArrayView3, ScalarOperand};
use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type usable by the operators (`f32` for training,
/// `f64` for gradient checks).
pub trait Scalar: Float + ScalarOperand + Send + Sync + Debug + Default + 'static {}

impl<T> Scalar for T where T: Float + ScalarOperand + Send + Sync + Debug + Default + 'static {}

pub const CHANNELS: usize = 3;

/// A 3-channel image, layout `(channel, row, column)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T = f32> {
    data: Array3<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != CHANNELS {
            return Err(Error::dim(format!("image must have 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::dim(format!("image must be non-empty, got {h}x{w}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::dim("image contains non-finite values"));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Image { data })
    }

    /// Wrap an array produced by a trusted operator. Only the channel count
    /// is checked, and only in debug builds.
    pub(crate) fn new_unchecked(data: Array3<T>) -> Self {
        debug_assert_eq!(data.dim().0, CHANNELS);
        Image { data }
    }

    pub fn constant(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0);
        Image {
            data: Array3::from_elem((CHANNELS, height, width), value),
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        assert!(height > 0 && width > 0);
        Image {
            data: Array3::from_shape_fn((CHANNELS, height, width), |(c, y, x)| f(c, y, x)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// `(height, width)`
    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, T> {
        self.data.view()
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, T> {
        self.data.index_axis(ndarray::Axis(0), c)
    }

    pub fn into_array(self) -> Array3<T> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[[c, y, x]]
    }

    pub fn same_size(&self, other: &Image<T>) -> Result<()> {
        if self.size() != other.size() {
            return Err(Error::dim(format!(
                "image sizes differ: {:?} vs {:?}",
                self.size(),
                other.size()
            )));
        }
        Ok(())
    }

    pub fn clamp01(mut self) -> Self {
        self.data.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
        self
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            data: self.data.mapv(|v| U::from(v).expect("float cast")),
        }
    }

    /// Crop a `height`×`width` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if y + height > self.height() || x + width > self.width() || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "crop {height}x{width}@({y},{x}) outside {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Image {
            data: self
                .data
                .slice(ndarray::s![.., y..y + height, x..x + width])
                .to_owned(),
        })
    }
}

impl Image<f32> {
    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Image::from_fn(h as usize, w as usize, |c, y, x| {
            img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        })
    }

    /// Quantize to 8 bits; values are clamped to `[0, 1]` and rounded.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = self.size();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| to_u8(self.data[[c, y as usize, x as usize]]);
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Round-trip through 8 bits, i.e. what a saved frame would contain.
    pub fn quantized(&self) -> Self {
        Image {
            data: self.data.mapv(|v| to_u8(v) as f32 / 255.0),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|e| Error::ImageEncode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
