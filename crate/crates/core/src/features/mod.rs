//! Statistical feature vectors over patches (for the structured forests) and
//! superpixels (for the Bayesian networks).
//!
//! Every vector follows a [`FeatureLayout`], a pure function of the
//! configuration and channel count, so two samples produced under the same
//! setup are always comparable position by position. Models pin the layout by
//! its fingerprint and refuse inputs built under a different one.
//!
//! Heavy callers precompute [`FilterMaps`] once per image and assemble rows
//! through it; [`patch_features`] and [`superpixel_features`] are one-shot
//! conveniences that rebuild the maps on each call.

mod compute;
mod filters;

pub use compute::{
    patch_context_into, superpixel_context_into, ContextSats, DenseBase, FilterMaps,
};

use crate::error::{Error, Result};
use crate::grid::{MultiChannelImage, ProbabilityMap};
use crate::seed::fnv1a;

/// Filter-bank and context parameters. The layout of every feature vector is
/// derived from this plus the channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    /// Gabor orientations, evenly spaced over [0, pi).
    pub gabor_orientations: usize,
    /// Gabor wavelengths in pixels.
    pub gabor_wavelengths: Vec<f64>,
    /// (sigma1, sigma2) pairs for difference-of-Gaussians responses.
    pub dog_sigma_pairs: Vec<(f64, f64)>,
    /// Histogram bins for the entropy feature, spanning the channel's
    /// whole-image intensity range.
    pub entropy_bins: usize,
    /// Whether vectors carry a probability-map context block.
    pub include_context: bool,
    /// Class count of the context map when `include_context` is set.
    pub context_classes: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            gabor_orientations: 4,
            gabor_wavelengths: vec![4.0, 8.0],
            dog_sigma_pairs: vec![(1.0, 2.0)],
            entropy_bins: 32,
            include_context: false,
            context_classes: 0,
        }
    }
}

impl FeatureConfig {
    /// The same bank with the context block enabled for `classes` classes.
    pub fn with_context(&self, classes: usize) -> FeatureConfig {
        FeatureConfig {
            include_context: true,
            context_classes: classes,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gabor_orientations == 0 {
            return Err(Error::argument("need at least one Gabor orientation"));
        }
        if self.gabor_wavelengths.is_empty() {
            return Err(Error::argument("need at least one Gabor wavelength"));
        }
        if self.gabor_wavelengths.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
            return Err(Error::argument("Gabor wavelengths must be positive"));
        }
        if self.dog_sigma_pairs.is_empty() {
            return Err(Error::argument("need at least one DoG sigma pair"));
        }
        for &(s1, s2) in &self.dog_sigma_pairs {
            if !(s1 > 0.0 && s2 > s1) {
                return Err(Error::argument(format!(
                    "DoG sigmas must satisfy 0 < {s1} < {s2}"
                )));
            }
        }
        if self.entropy_bins == 0 {
            return Err(Error::argument("entropy needs at least one bin"));
        }
        if self.include_context && self.context_classes == 0 {
            return Err(Error::argument(
                "context block enabled but context class count is zero",
            ));
        }
        Ok(())
    }
}

/// Whether a layout describes patch vectors or superpixel vectors; their
/// context blocks differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    Patch,
    Superpixel,
}

/// Ordered list of named entries describing one feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    kind: LayoutKind,
    channels: usize,
    entries: Vec<String>,
}

impl FeatureLayout {
    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    /// Stable 64-bit identity of the layout. Models store this and reject
    /// feature vectors assembled under any other layout.
    pub fn fingerprint(&self) -> u64 {
        let mut text = String::new();
        text.push_str(match self.kind {
            LayoutKind::Patch => "patch",
            LayoutKind::Superpixel => "superpixel",
        });
        for e in &self.entries {
            text.push('\n');
            text.push_str(e);
        }
        fnv1a(text.as_bytes())
    }
}

/// Entry names of one channel's statistics block, in assembly order.
fn channel_entries(cfg: &FeatureConfig, c: usize, out: &mut Vec<String>) {
    let p = |name: &str| format!("ch{c}.{name}");
    for name in ["mean", "std", "max", "min", "median", "sobel", "gradient", "laplacian"] {
        out.push(p(name));
    }
    for &(s1, s2) in &cfg.dog_sigma_pairs {
        out.push(p(&format!("dog.s{s1}-{s2}")));
    }
    out.push(p("entropy"));
    out.push(p("curv.mean"));
    out.push(p("curv.gauss"));
    out.push(p("kurtosis"));
    out.push(p("skewness"));
    for oi in 0..cfg.gabor_orientations {
        let deg = oi * 180 / cfg.gabor_orientations;
        for &lambda in &cfg.gabor_wavelengths {
            out.push(p(&format!("gabor.o{deg}.w{lambda}")));
        }
    }
    out.push(p("symmetry"));
    out.push(p("neighborhood"));
}

fn base_entries(cfg: &FeatureConfig, channels: usize) -> Vec<String> {
    let mut out = Vec::new();
    for c in 0..channels {
        channel_entries(cfg, c, &mut out);
    }
    out.push("proj.x".to_string());
    out.push("proj.y".to_string());
    out
}

/// Length of the context-free block shared by both layout kinds.
pub(crate) fn base_entry_count(cfg: &FeatureConfig, channels: usize) -> usize {
    // Per channel: 5 order statistics, 3 fixed derivatives, DoG responses,
    // entropy, 2 curvatures, 2 shape moments, Gabor bank, symmetry,
    // neighborhood. Plus the 2 projection entries.
    let per_channel = 13
        + cfg.dog_sigma_pairs.len()
        + cfg.gabor_orientations * cfg.gabor_wavelengths.len()
        + 2;
    channels * per_channel + 2
}

/// Layout of patch vectors: the per-channel blocks, projection, then (with
/// context) per class a center value and a patch mean.
pub fn patch_layout(cfg: &FeatureConfig, channels: usize) -> FeatureLayout {
    let mut entries = base_entries(cfg, channels);
    if cfg.include_context {
        for l in 0..cfg.context_classes {
            entries.push(format!("ctx.{l}.center"));
            entries.push(format!("ctx.{l}.mean"));
        }
    }
    FeatureLayout {
        kind: LayoutKind::Patch,
        channels,
        entries,
    }
}

/// Layout of superpixel vectors: the same base block, then (with context)
/// per-class means over the pixel set.
pub fn superpixel_layout(cfg: &FeatureConfig, channels: usize) -> FeatureLayout {
    let mut entries = base_entries(cfg, channels);
    if cfg.include_context {
        for l in 0..cfg.context_classes {
            entries.push(format!("ctx.{l}.mean"));
        }
    }
    FeatureLayout {
        kind: LayoutKind::Superpixel,
        channels,
        entries,
    }
}

pub(crate) fn check_context<'a>(
    cfg: &FeatureConfig,
    context: Option<&'a ProbabilityMap>,
    img: &MultiChannelImage,
) -> Result<Option<&'a ProbabilityMap>> {
    match (cfg.include_context, context) {
        (false, None) => Ok(None),
        (true, Some(map)) => {
            if map.width() != img.width() || map.height() != img.height() {
                return Err(Error::argument(format!(
                    "context map is {}x{}, image is {}x{}",
                    map.width(),
                    map.height(),
                    img.width(),
                    img.height()
                )));
            }
            if map.classes() != cfg.context_classes {
                return Err(Error::argument(format!(
                    "context map has {} classes, configuration expects {}",
                    map.classes(),
                    cfg.context_classes
                )));
            }
            Ok(Some(map))
        }
        (false, Some(_)) => Err(Error::argument(
            "context map supplied but the configuration has no context block",
        )),
        (true, None) => Err(Error::argument(
            "configuration has a context block but no context map was supplied",
        )),
    }
}

/// One-shot patch feature vector; recomputes the filter maps on every call.
pub fn patch_features(
    img: &MultiChannelImage,
    context: Option<&ProbabilityMap>,
    center: (usize, usize),
    side: usize,
    cfg: &FeatureConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let context = check_context(cfg, context, img)?;
    if !img.contains(center.0, center.1) {
        return Err(Error::argument(format!(
            "patch center ({}, {}) outside {}x{} image",
            center.0,
            center.1,
            img.width(),
            img.height()
        )));
    }
    if side == 0 {
        return Err(Error::argument("patch side must be >= 1"));
    }
    let fm = FilterMaps::compute(img, cfg)?;
    let layout = patch_layout(cfg, img.channels());
    let mut out = vec![0.0f64; layout.len()];
    let base = fm.base_len();
    fm.patch_base_into(center.0, center.1, side, &mut out[..base]);
    if let Some(map) = context {
        let sats = ContextSats::build(map);
        patch_context_into(map, &sats, center.0, center.1, side, &mut out[base..]);
    }
    Ok(out)
}

/// One-shot superpixel feature vector; recomputes the filter maps on every
/// call. `neighborhood` carries the per-channel mean intensity of adjacent
/// superpixels (from the edge-map adjacency); without it the region's own
/// mean stands in.
pub fn superpixel_features(
    img: &MultiChannelImage,
    context: Option<&ProbabilityMap>,
    pixel_set: &[(usize, usize)],
    neighborhood: Option<&[f64]>,
    cfg: &FeatureConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let context = check_context(cfg, context, img)?;
    let fm = FilterMaps::compute(img, cfg)?;
    let layout = superpixel_layout(cfg, img.channels());
    let mut out = vec![0.0f64; layout.len()];
    let base = fm.base_len();
    fm.superpixel_base_into(pixel_set, neighborhood, &mut out[..base])?;
    if let Some(map) = context {
        superpixel_context_into(map, pixel_set, &mut out[base..]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
