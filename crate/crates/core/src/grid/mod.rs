//! Core raster types and probability-map algebra.
//!
//! Storage is channel-major: each channel (or class) is a row-major plane,
//! planes concatenated. That matches the `.mdi` payload layout, so file IO is
//! a straight memory copy. All types are immutable after construction and can
//! be shared read-only across workers.

mod mdi;

pub use mdi::{read_mdi, write_mdi, MdiObject};

use crate::error::{Error, Result};

/// Per-pixel probability vectors must sum to one within this tolerance.
pub const PROB_SUM_TOL: f32 = 1e-6;

/// Dense 2D grid with `channels` planes of real intensities, one per
/// modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl MultiChannelImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::argument("image dimensions must be nonzero"));
        }
        if channels == 0 {
            return Err(Error::argument("image needs at least one channel"));
        }
        if data.len() != width * height * channels {
            return Err(Error::argument(format!(
                "payload length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("image intensities must be finite"));
        }
        Ok(MultiChannelImage {
            width,
            height,
            channels,
            data,
        })
    }

    /// All-zero image.
    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Row-major plane of one channel.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Intensity at clamped coordinates; negative or out-of-range positions
    /// replicate the border pixel.
    #[inline]
    pub fn get_clamped(&self, c: usize, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(c, xc, yc)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height
    }
}

/// Per-pixel hard class labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::argument("label map dimensions must be nonzero"));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::argument("class count must be in 1..=256"));
        }
        if labels.len() != width * height {
            return Err(Error::argument(format!(
                "label payload length {} does not match {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::argument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(LabelMap {
            width,
            height,
            classes,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }
}

/// Per-pixel class-probability vectors: the flow currency of the tree.
///
/// Stored as `classes` row-major planes. Every pixel's vector is nonnegative
/// and sums to one within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    classes: usize,
    values: Vec<f32>,
}

impl ProbabilityMap {
    /// Validating constructor; rejects payloads that break the distribution
    /// invariants.
    pub fn new(width: usize, height: usize, classes: usize, values: Vec<f32>) -> Result<Self> {
        let m = Self::new_unchecked(width, height, classes, values)?;
        m.validate()?;
        Ok(m)
    }

    fn new_unchecked(
        width: usize,
        height: usize,
        classes: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::argument("probability map dimensions must be nonzero"));
        }
        if classes == 0 {
            return Err(Error::argument("probability map needs at least one class"));
        }
        if values.len() != width * height * classes {
            return Err(Error::argument(format!(
                "probability payload length {} does not match {}x{}x{}",
                values.len(),
                width,
                height,
                classes
            )));
        }
        Ok(ProbabilityMap {
            width,
            height,
            classes,
            values,
        })
    }

    /// Build from arbitrary nonnegative per-pixel scores, normalizing each
    /// pixel. A pixel whose scores sum to zero becomes uniform.
    pub fn from_scores(
        width: usize,
        height: usize,
        classes: usize,
        mut values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != width * height * classes {
            return Err(Error::argument(format!(
                "score payload length {} does not match {}x{}x{}",
                values.len(),
                width,
                height,
                classes
            )));
        }
        let n = width * height;
        for p in 0..n {
            let mut sum = 0.0f64;
            for l in 0..classes {
                let v = values[l * n + p];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::argument(format!(
                        "score {v} at pixel {p} class {l} is not a nonnegative finite value"
                    )));
                }
                sum += f64::from(v);
            }
            if sum <= 0.0 {
                let u = 1.0 / classes as f32;
                for l in 0..classes {
                    values[l * n + p] = u;
                }
            } else {
                for l in 0..classes {
                    values[l * n + p] = (f64::from(values[l * n + p]) / sum) as f32;
                }
            }
        }
        Self::new_unchecked(width, height, classes, values)
    }

    /// Uniform distribution at every pixel.
    pub fn uniform(width: usize, height: usize, classes: usize) -> Result<Self> {
        let u = 1.0 / classes as f32;
        Self::new_unchecked(width, height, classes, vec![u; width * height * classes])
    }

    /// Every pixel concentrated on one class.
    pub fn delta(width: usize, height: usize, classes: usize, class: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::argument(format!(
                "class {class} out of range for {classes} classes"
            )));
        }
        let mut values = vec![0.0; width * height * classes];
        let n = width * height;
        values[class * n..(class + 1) * n].fill(1.0);
        Self::new_unchecked(width, height, classes, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Row-major plane of one class.
    pub fn class_plane(&self, l: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.values[l * n..(l + 1) * n]
    }

    #[inline]
    pub fn get(&self, l: usize, x: usize, y: usize) -> f32 {
        self.values[(l * self.height + y) * self.width + x]
    }

    /// Copy one pixel's class vector into `out`.
    pub fn pixel_into(&self, x: usize, y: usize, out: &mut [f32]) {
        let n = self.width * self.height;
        let p = y * self.width + x;
        for l in 0..self.classes {
            out[l] = self.values[l * n + p];
        }
    }

    /// Check the distribution invariants: entries in `[0, 1]`, pixel sums
    /// within [`PROB_SUM_TOL`] of one.
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        for p in 0..n {
            let mut sum = 0.0f32;
            for l in 0..self.classes {
                let v = self.values[l * n + p];
                if !(0.0..=1.0 + PROB_SUM_TOL).contains(&v) {
                    return Err(Error::argument(format!(
                        "probability {v} at pixel {p} class {l} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::argument(format!(
                    "pixel {p} probabilities sum to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }
}

/// Patch extents used by the structured forest: a feature patch, a (usually
/// smaller) label patch, and a prediction stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub feature_patch_side: usize,
    pub label_patch_side: usize,
    pub stride: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        PatchGeometry {
            feature_patch_side: 10,
            label_patch_side: 7,
            stride: 1,
        }
    }
}

impl PatchGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.feature_patch_side == 0 || self.label_patch_side == 0 || self.stride == 0 {
            return Err(Error::argument("patch sides and stride must be >= 1"));
        }
        if self.label_patch_side > self.feature_patch_side {
            return Err(Error::argument(format!(
                "label patch side {} exceeds feature patch side {}",
                self.label_patch_side, self.feature_patch_side
            )));
        }
        Ok(())
    }
}

/// Offset of a patch's top-left corner from its center pixel.
///
/// For even sides the center sits at `(side/2, side/2)` inside the patch
/// (top-left-of-center convention), which reduces to the usual symmetric
/// placement for odd sides.
#[inline]
pub fn patch_origin_offset(side: usize) -> isize {
    -((side / 2) as isize)
}

/// A dense `side x side x channels` block of intensities cut out around a
/// center pixel. Out-of-bounds positions replicate the border.
#[derive(Debug, Clone)]
pub struct Patch {
    pub side: usize,
    pub channels: usize,
    /// Channel-major, row-major within each channel.
    pub data: Vec<f32>,
}

impl Patch {
    #[inline]
    pub fn get(&self, c: usize, px: usize, py: usize) -> f32 {
        self.data[(c * self.side + py) * self.side + px]
    }
}

/// Cut a `side x side` patch (all channels) centered at `(cx, cy)`.
pub fn extract_patch(
    img: &MultiChannelImage,
    cx: usize,
    cy: usize,
    side: usize,
) -> Result<Patch> {
    if !img.contains(cx, cy) {
        return Err(Error::argument(format!(
            "patch center ({cx}, {cy}) outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    if side == 0 {
        return Err(Error::argument("patch side must be >= 1"));
    }
    let off = patch_origin_offset(side);
    let mut data = Vec::with_capacity(side * side * img.channels());
    for c in 0..img.channels() {
        for py in 0..side {
            let y = cy as isize + off + py as isize;
            for px in 0..side {
                let x = cx as isize + off + px as isize;
                data.push(img.get_clamped(c, x, y));
            }
        }
    }
    Ok(Patch {
        side,
        channels: img.channels(),
        data,
    })
}

/// Per-pixel argmax. Ties break toward the lowest class id.
pub fn argmax_labels(p: &ProbabilityMap) -> LabelMap {
    let n = p.width() * p.height();
    let mut labels = vec![0u8; n];
    for pix in 0..n {
        let mut best = 0usize;
        let mut best_v = p.values()[pix];
        for l in 1..p.classes() {
            let v = p.values()[l * n + pix];
            if v > best_v {
                best_v = v;
                best = l;
            }
        }
        labels[pix] = best as u8;
    }
    LabelMap::new(p.width(), p.height(), p.classes(), labels)
        .expect("argmax of a valid map is a valid label map")
}

/// Element-wise mean of probability maps, renormalized per pixel to contain
/// floating-point drift.
pub fn average_maps(maps: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::argument("cannot average an empty list of maps"))?;
    for (i, m) in maps.iter().enumerate().skip(1) {
        if m.width() != first.width()
            || m.height() != first.height()
            || m.classes() != first.classes()
        {
            return Err(Error::argument(format!(
                "map {i} has shape {}x{}x{}, expected {}x{}x{}",
                m.width(),
                m.height(),
                m.classes(),
                first.width(),
                first.height(),
                first.classes()
            )));
        }
    }
    let len = first.values().len();
    let inv = 1.0 / maps.len() as f64;
    let mut acc = vec![0.0f64; len];
    for m in maps {
        for (a, &v) in acc.iter_mut().zip(m.values()) {
            *a += f64::from(v);
        }
    }
    // Mean and renormalization both in f64; cast to f32 once at the end.
    let n = first.width() * first.height();
    let classes = first.classes();
    let mut values = vec![0.0f32; len];
    for p in 0..n {
        let total: f64 = (0..classes).map(|l| acc[l * n + p] * inv).sum();
        if total <= 0.0 {
            let u = 1.0 / classes as f32;
            for l in 0..classes {
                values[l * n + p] = u;
            }
        } else {
            for l in 0..classes {
                values[l * n + p] = (acc[l * n + p] * inv / total) as f32;
            }
        }
    }
    ProbabilityMap::new_unchecked(first.width(), first.height(), first.classes(), values)
}
