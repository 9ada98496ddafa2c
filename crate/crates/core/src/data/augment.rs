//! Training-time augmentation: one geometric transform, an optional temporal
//! swap and a random crop, shared by the three frames of a triplet.

use ndarray::{s, Array3, Axis};
use rand::Rng;

use super::Triplet;
use crate::error::{Error, Result};
use crate::image::Image;

pub const TRAINING_CROP: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    FlipHorizontal,
    FlipVertical,
    /// Quarter turn, counter-clockwise when `clockwise` is false.
    Rotate {
        clockwise: bool,
    },
}

impl Transform {
    /// Index of the transform family (the two rotations share one): 0..4.
    pub fn family(self) -> usize {
        match self {
            Transform::Identity => 0,
            Transform::FlipHorizontal => 1,
            Transform::FlipVertical => 2,
            Transform::Rotate { .. } => 3,
        }
    }

    pub fn apply(self, img: &Image) -> Image {
        let d = img.data();
        let out: Array3<f32> = match self {
            Transform::Identity => d.clone(),
            Transform::FlipHorizontal => d.slice(s![.., .., ..;-1]).to_owned(),
            Transform::FlipVertical => d.slice(s![.., ..;-1, ..]).to_owned(),
            // out[y][x] = in[x][W-1-y]
            Transform::Rotate { clockwise: false } => {
                let mut t = d.view();
                t.swap_axes(1, 2);
                t.slice(s![.., ..;-1, ..]).to_owned()
            }
            // out[y][x] = in[H-1-x][y]
            Transform::Rotate { clockwise: true } => {
                let mut t = d.view();
                t.swap_axes(1, 2);
                t.slice(s![.., .., ..;-1]).to_owned()
            }
        };
        Image::new(out).expect("permutation of a valid image")
    }
}

/// Everything random about one augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub transform: Transform,
    /// Exchange the first and last frame.
    pub swap: bool,
    /// Crop origin `(y, x)` in transformed coordinates.
    pub crop_origin: (usize, usize),
    pub crop: usize,
}

/// Draw augmentation parameters for a `size`×`size` input: the four transform
/// families with probability 1/4 each (rotation direction uniform), swap with
/// probability 1/2, crop origin uniform.
pub fn draw_augment<R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    crop: usize,
) -> Result<AugmentParams> {
    if crop == 0 || size < crop {
        return Err(Error::dim(format!(
            "cannot crop {crop}x{crop} from a {size}x{size} patch"
        )));
    }
    let transform = match rng.random_range(0..4) {
        0 => Transform::Identity,
        1 => Transform::FlipHorizontal,
        2 => Transform::FlipVertical,
        _ => Transform::Rotate {
            clockwise: rng.random::<bool>(),
        },
    };
    let swap = rng.random::<bool>();
    let crop_origin = (
        rng.random_range(0..=size - crop),
        rng.random_range(0..=size - crop),
    );
    Ok(AugmentParams {
        transform,
        swap,
        crop_origin,
        crop,
    })
}

fn square_size(t: &Triplet) -> Result<usize> {
    let (h, w) = t.size();
    if h != w {
        return Err(Error::dim(format!(
            "augmentation expects square patches, got {h}x{w}"
        )));
    }
    Ok(h)
}

pub fn apply_augment(t: &Triplet, p: &AugmentParams) -> Result<Triplet> {
    let size = square_size(t)?;
    if p.crop_origin.0 + p.crop > size || p.crop_origin.1 + p.crop > size {
        return Err(Error::dim("crop outside the patch"));
    }
    let f = |img: &Image| {
        p.transform
            .apply(img)
            .crop(p.crop_origin.0, p.crop_origin.1, p.crop, p.crop)
    };
    let (first, last) = if p.swap {
        (&t.last, &t.first)
    } else {
        (&t.first, &t.last)
    };
    Triplet::new(f(first)?, f(&t.middle)?, f(last)?)
}

/// Draw and apply one augmentation producing `crop`×`crop` frames.
pub fn augment<R: Rng + ?Sized>(t: &Triplet, rng: &mut R, crop: usize) -> Result<Triplet> {
    let p = draw_augment(rng, square_size(t)?, crop)?;
    apply_augment(t, &p)
}

/// Deterministic central crop, used for validation.
pub fn center_crop(t: &Triplet, crop: usize) -> Result<Triplet> {
    let (h, w) = t.size();
    if crop == 0 || h < crop || w < crop {
        return Err(Error::dim(format!(
            "cannot crop {crop}x{crop} from {h}x{w}"
        )));
    }
    let (y, x) = ((h - crop) / 2, (w - crop) / 2);
    Triplet::new(
        t.first.crop(y, x, crop, crop)?,
        t.middle.crop(y, x, crop, crop)?,
        t.last.crop(y, x, crop, crop)?,
    )
}

/// Helper for tests and tools: sorted pixel values of an image, per channel.
pub fn value_multiset(img: &Image) -> Vec<Vec<u32>> {
    img.data()
        .axis_iter(Axis(0))
        .map(|ch| {
            let mut v: Vec<u32> = ch.iter().map(|x| x.to_bits()).collect();
            v.sort_unstable();
            v
        })
        .collect()
}
