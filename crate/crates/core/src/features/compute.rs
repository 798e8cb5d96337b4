//! Precomputed filter responses and the feature assembly loops.
//!
//! [`FilterMaps`] is the expensive per-image artifact: every filter response
//! plane plus a summed-area table per plane. It depends only on the image and
//! the [`FeatureConfig`](super::FeatureConfig), never on patch geometry or
//! context, so one instance serves every node, phase, and scale that touches
//! the image.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::features::filters::{
    curvatures, difference_of_gaussians, gabor_magnitude, gradient_magnitude, laplacian,
    sobel_magnitude, symmetry_map, window_mean, PlaneSat,
};
use crate::features::FeatureConfig;
use crate::grid::{patch_origin_offset, MultiChannelImage, ProbabilityMap};

struct MapPlane {
    values: Vec<f64>,
    sat: PlaneSat,
}

impl MapPlane {
    fn build(values: Vec<f64>, w: usize, h: usize) -> Self {
        let sat = PlaneSat::build(&values, w, h);
        MapPlane { values, sat }
    }
}

struct ChannelMaps {
    raw: Vec<f32>,
    raw_sat: PlaneSat,
    min: f64,
    max: f64,
    /// Derivative maps: sobel, gradient, laplacian, DoG*, curvature mean,
    /// curvature Gaussian, Gabor*, symmetry.
    maps: Vec<MapPlane>,
}

/// All filter responses for one image under one feature configuration.
/// Clones share the plane storage, so handing the same bank to many
/// consumers costs a reference count, not a copy.
#[derive(Clone)]
pub struct FilterMaps {
    width: usize,
    height: usize,
    cfg: FeatureConfig,
    channels: Arc<Vec<ChannelMaps>>,
}

impl FilterMaps {
    pub fn compute(img: &MultiChannelImage, cfg: &FeatureConfig) -> Result<FilterMaps> {
        cfg.validate()?;
        let (w, h) = (img.width(), img.height());
        let channels = (0..img.channels())
            .map(|c| {
                let raw = img.channel(c).to_vec();
                let raw_sat = PlaneSat::build(&raw, w, h);
                let min = raw.iter().copied().fold(f32::INFINITY, f32::min);
                let max = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut maps = Vec::new();
                maps.push(MapPlane::build(sobel_magnitude(&raw, w, h), w, h));
                maps.push(MapPlane::build(gradient_magnitude(&raw, w, h), w, h));
                maps.push(MapPlane::build(laplacian(&raw, w, h), w, h));
                for &(s1, s2) in &cfg.dog_sigma_pairs {
                    maps.push(MapPlane::build(
                        difference_of_gaussians(&raw, w, h, s1, s2),
                        w,
                        h,
                    ));
                }
                let (mc, gc) = curvatures(&raw, w, h);
                maps.push(MapPlane::build(mc, w, h));
                maps.push(MapPlane::build(gc, w, h));
                for oi in 0..cfg.gabor_orientations {
                    let theta = oi as f64 * std::f64::consts::PI / cfg.gabor_orientations as f64;
                    for &lambda in &cfg.gabor_wavelengths {
                        maps.push(MapPlane::build(
                            gabor_magnitude(&raw, w, h, theta, lambda),
                            w,
                            h,
                        ));
                    }
                }
                maps.push(MapPlane::build(symmetry_map(&raw, w, h), w, h));
                ChannelMaps {
                    raw,
                    raw_sat,
                    min: f64::from(min),
                    max: f64::from(max),
                    maps,
                }
            })
            .collect();
        Ok(FilterMaps {
            width: w,
            height: h,
            cfg: cfg.clone(),
            channels: Arc::new(channels),
        })
    }

    /// The same filter bank relabeled with a context block for `classes`
    /// classes. The planes are context-independent and shared, so this is a
    /// configuration change, not a recomputation.
    pub fn with_context(&self, classes: usize) -> FilterMaps {
        FilterMaps {
            width: self.width,
            height: self.height,
            cfg: self.cfg.with_context(classes),
            channels: Arc::clone(&self.channels),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Length of the context-free block of a patch or superpixel vector.
    pub fn base_len(&self) -> usize {
        super::base_entry_count(&self.cfg, self.channels.len())
    }

    /// Context-free patch features at `center`, written into
    /// `out[..base_len()]`.
    pub fn patch_base_into(&self, cx: usize, cy: usize, side: usize, out: &mut [f64]) {
        debug_assert!(cx < self.width && cy < self.height);
        let mut scratch = Vec::with_capacity(side * side);
        let mut k = 0usize;
        let off = patch_origin_offset(side);
        let x0 = cx as isize + off;
        let y0 = cy as isize + off;
        for ch in self.channels.iter() {
            k = write_channel_stats(
                ch,
                &self.cfg,
                PixelRegion::Rect { x0, y0, side },
                self.width,
                self.height,
                &mut scratch,
                out,
                k,
            );
            // Neighborhood: mean of the 8 surrounding patch tiles' means.
            let mut ring = 0.0f64;
            for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    ring += window_mean(
                        &ch.raw,
                        &ch.raw_sat,
                        self.width,
                        self.height,
                        x0 + dx * side as isize,
                        y0 + dy * side as isize,
                        side,
                    );
                }
            }
            out[k] = ring / 8.0;
            k += 1;
        }
        out[k] = cx as f64 / (self.width - 1).max(1) as f64;
        out[k + 1] = cy as f64 / (self.height - 1).max(1) as f64;
    }

    /// Context-free superpixel features over `pixels`, written into
    /// `out[..base_len()]`. `neighborhood` supplies the per-channel mean
    /// intensity of adjacent superpixels; when absent the region's own mean
    /// stands in.
    pub fn superpixel_base_into(
        &self,
        pixels: &[(usize, usize)],
        neighborhood: Option<&[f64]>,
        out: &mut [f64],
    ) -> Result<()> {
        if pixels.is_empty() {
            return Err(Error::argument("superpixel pixel set is empty"));
        }
        if let Some(nb) = neighborhood {
            if nb.len() != self.channels.len() {
                return Err(Error::argument(format!(
                    "neighborhood has {} entries, expected one per channel ({})",
                    nb.len(),
                    self.channels.len()
                )));
            }
        }
        for &(x, y) in pixels {
            if x >= self.width || y >= self.height {
                return Err(Error::argument(format!(
                    "pixel ({x}, {y}) outside {}x{} image",
                    self.width, self.height
                )));
            }
        }
        let mut scratch = Vec::with_capacity(pixels.len());
        let mut k = 0usize;
        for (ci, ch) in self.channels.iter().enumerate() {
            let before = k;
            k = write_channel_stats(
                ch,
                &self.cfg,
                PixelRegion::Set(pixels),
                self.width,
                self.height,
                &mut scratch,
                out,
                k,
            );
            out[k] = match neighborhood {
                Some(nb) => nb[ci],
                None => out[before], // the region's own mean leads the block
            };
            k += 1;
        }
        let n = pixels.len() as f64;
        let mx: f64 = pixels.iter().map(|&(x, _)| x as f64).sum::<f64>() / n;
        let my: f64 = pixels.iter().map(|&(_, y)| y as f64).sum::<f64>() / n;
        out[k] = mx / (self.width - 1).max(1) as f64;
        out[k + 1] = my / (self.height - 1).max(1) as f64;
        Ok(())
    }
}

/// Either a replicated square patch or an explicit in-bounds pixel set.
enum PixelRegion<'a> {
    Rect { x0: isize, y0: isize, side: usize },
    Set(&'a [(usize, usize)]),
}

/// Writes one channel's statistics block (everything up to but excluding the
/// neighborhood entry) and returns the next write position.
#[allow(clippy::too_many_arguments)]
fn write_channel_stats(
    ch: &ChannelMaps,
    cfg: &FeatureConfig,
    region: PixelRegion<'_>,
    w: usize,
    h: usize,
    scratch: &mut Vec<f64>,
    out: &mut [f64],
    mut k: usize,
) -> usize {
    // Gather raw intensities once; order is irrelevant to every statistic
    // computed from the buffer.
    scratch.clear();
    match region {
        PixelRegion::Rect { x0, y0, side } => {
            for py in 0..side as isize {
                let y = (y0 + py).clamp(0, h as isize - 1) as usize;
                for px in 0..side as isize {
                    let x = (x0 + px).clamp(0, w as isize - 1) as usize;
                    scratch.push(f64::from(ch.raw[y * w + x]));
                }
            }
        }
        PixelRegion::Set(pixels) => {
            for &(x, y) in pixels {
                scratch.push(f64::from(ch.raw[y * w + x]));
            }
        }
    }
    let n = scratch.len() as f64;
    let mean = scratch.iter().sum::<f64>() / n;
    let mut m2 = 0.0f64;
    let mut m3 = 0.0f64;
    let mut m4 = 0.0f64;
    for &v in scratch.iter() {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let std = m2.sqrt();
    scratch.sort_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    let min = scratch[0];
    let max = scratch[scratch.len() - 1];
    let median = if scratch.len() % 2 == 1 {
        scratch[scratch.len() / 2]
    } else {
        (scratch[scratch.len() / 2 - 1] + scratch[scratch.len() / 2]) / 2.0
    };
    let entropy = region_entropy(scratch, ch.min, ch.max, cfg.entropy_bins);

    out[k] = mean;
    out[k + 1] = std;
    out[k + 2] = max;
    out[k + 3] = min;
    out[k + 4] = median;
    k += 5;
    // Map means follow MapIndex order: sobel, gradient, laplacian, DoG*,
    // curvatures, Gabor*, symmetry. Entropy and the shape moments sit between
    // the fixed derivative trio and the curvature pair to keep related
    // statistics adjacent in the dump.
    let mean_of = |mi: usize| -> f64 {
        let mp = &ch.maps[mi];
        match region {
            PixelRegion::Rect { x0, y0, side } => {
                window_mean(&mp.values, &mp.sat, w, h, x0, y0, side)
            }
            PixelRegion::Set(pixels) => {
                pixels.iter().map(|&(x, y)| mp.values[y * w + x]).sum::<f64>()
                    / pixels.len() as f64
            }
        }
    };
    out[k] = mean_of(0); // sobel
    out[k + 1] = mean_of(1); // gradient
    out[k + 2] = mean_of(2); // laplacian
    k += 3;
    let dog_count = cfg.dog_sigma_pairs.len();
    for d in 0..dog_count {
        out[k] = mean_of(3 + d);
        k += 1;
    }
    out[k] = entropy;
    k += 1;
    out[k] = mean_of(3 + dog_count); // mean curvature
    out[k + 1] = mean_of(4 + dog_count); // Gaussian curvature
    k += 2;
    if std < 1e-12 {
        out[k] = 0.0;
        out[k + 1] = 0.0;
    } else {
        out[k] = m4 / (m2 * m2) - 3.0; // excess kurtosis
        out[k + 1] = m3 / (m2 * std); // skewness
    }
    k += 2;
    let gabor_count = cfg.gabor_orientations * cfg.gabor_wavelengths.len();
    for g in 0..gabor_count {
        out[k] = mean_of(5 + dog_count + g);
        k += 1;
    }
    out[k] = mean_of(5 + dog_count + gabor_count); // symmetry
    k += 1;
    k
}

/// Shannon entropy (bits) of the gathered intensities, binned over the
/// channel's whole-image range. A degenerate range carries no information.
fn region_entropy(values: &[f64], ch_min: f64, ch_max: f64, bins: usize) -> f64 {
    let range = ch_max - ch_min;
    if range < 1e-12 {
        return 0.0;
    }
    let mut counts = vec![0u32; bins];
    for &v in values {
        let b = (((v - ch_min) / range) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    let mut ent = 0.0f64;
    for &c in &counts {
        if c > 0 {
            let p = f64::from(c) / n;
            ent -= p * p.log2();
        }
    }
    ent
}

/// Summed-area tables over a probability map's class planes, for O(1) patch
/// context means. Rebuild whenever the map changes (once per flow pass).
pub struct ContextSats {
    classes: usize,
    sats: Vec<PlaneSat>,
}

impl ContextSats {
    pub fn build(map: &ProbabilityMap) -> Self {
        let sats = (0..map.classes())
            .map(|l| PlaneSat::build(map.class_plane(l), map.width(), map.height()))
            .collect();
        ContextSats {
            classes: map.classes(),
            sats,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// Patch context block: per class, the map value at the center then the patch
/// mean of that class plane. Written into `out[..2 * classes]`.
pub fn patch_context_into(
    map: &ProbabilityMap,
    sats: &ContextSats,
    cx: usize,
    cy: usize,
    side: usize,
    out: &mut [f64],
) {
    let off = patch_origin_offset(side);
    let x0 = cx as isize + off;
    let y0 = cy as isize + off;
    for l in 0..map.classes() {
        let plane = map.class_plane(l);
        out[2 * l] = f64::from(plane[cy * map.width() + cx]);
        out[2 * l + 1] = window_mean(
            plane,
            &sats.sats[l],
            map.width(),
            map.height(),
            x0,
            y0,
            side,
        );
    }
}

/// Superpixel context block: per class, the mean map value over the pixel
/// set. Written into `out[..classes]`.
pub fn superpixel_context_into(
    map: &ProbabilityMap,
    pixels: &[(usize, usize)],
    out: &mut [f64],
) {
    let w = map.width();
    let n = pixels.len() as f64;
    for l in 0..map.classes() {
        let plane = map.class_plane(l);
        out[l] = pixels.iter().map(|&(x, y)| f64::from(plane[y * w + x])).sum::<f64>() / n;
    }
}

/// Dense context-free patch features for every pixel of an image: the cache
/// that makes whole-image prediction cheap. Rows are indexed `y * width + x`.
pub struct DenseBase {
    width: usize,
    row_len: usize,
    side: usize,
    rows: Vec<f64>,
}

impl DenseBase {
    pub fn compute(fm: &FilterMaps, side: usize) -> DenseBase {
        let row_len = fm.base_len();
        let (w, h) = (fm.width(), fm.height());
        let mut rows = vec![0.0f64; w * h * row_len];
        for y in 0..h {
            for x in 0..w {
                let at = (y * w + x) * row_len;
                fm.patch_base_into(x, y, side, &mut rows[at..at + row_len]);
            }
        }
        DenseBase {
            width: w,
            row_len,
            side,
            rows,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    #[inline]
    pub fn row(&self, x: usize, y: usize) -> &[f64] {
        let at = (y * self.width + x) * self.row_len;
        &self.rows[at..at + self.row_len]
    }
}
