//! PNG rasterization of the pipeline's artifacts: label maps under a fixed
//! palette, single class planes of probability maps as grayscale, and
//! superpixel boundaries over the first image channel.

use image::{GrayImage, Rgb, RgbImage};

use dmt_core::grid::{LabelMap, MultiChannelImage, ProbabilityMap};
use dmt_core::slic::{slic, SlicParams};
use dmt_core::{Error, Result};

/// Background black, then saturated hues; classes beyond the table cycle.
const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [66, 135, 245],
    [245, 158, 66],
    [224, 58, 62],
    [92, 190, 92],
    [160, 92, 200],
    [240, 220, 80],
    [128, 128, 128],
];

pub fn label_image(labels: &LabelMap) -> RgbImage {
    RgbImage::from_fn(labels.width() as u32, labels.height() as u32, |x, y| {
        let l = labels.labels()[y as usize * labels.width() + x as usize];
        Rgb(PALETTE[l as usize % PALETTE.len()])
    })
}

/// One class plane, 0 black through 1 white.
pub fn prob_image(map: &ProbabilityMap, class: usize) -> Result<GrayImage> {
    if class >= map.classes() {
        return Err(Error::argument(format!(
            "class {class} out of range, map has {} classes",
            map.classes()
        )));
    }
    let plane = map.class_plane(class);
    Ok(GrayImage::from_fn(
        map.width() as u32,
        map.height() as u32,
        |x, y| {
            let v = plane[y as usize * map.width() + x as usize];
            image::Luma([(f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8])
        },
    ))
}

/// Superpixel boundaries in white over the min-max rescaled first channel.
pub fn edge_image(img: &MultiChannelImage, params: &SlicParams) -> Result<RgbImage> {
    let edge_map = slic(img, 0, params)?;
    let (w, h) = (img.width(), img.height());
    let channel = img.channel(0);
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in channel {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let assignment = edge_map.assignment();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let here = assignment[y * w + x];
        let boundary = (x + 1 < w && assignment[y * w + x + 1] != here)
            || (y + 1 < h && assignment[(y + 1) * w + x] != here);
        if boundary {
            Rgb([255, 255, 255])
        } else {
            let g = ((channel[y * w + x] - lo) / span * 200.0).round() as u8;
            Rgb([g, g, g])
        }
    }))
}
