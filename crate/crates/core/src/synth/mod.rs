//! Deterministic phantom generator: multichannel images with three nested,
//! radially perturbed lesion regions on a background, plus exact labels.
//!
//! Each subject draws a lesion center, three nested base radii, and a
//! 5-harmonic radial Fourier perturbation per boundary. Pixels are labeled by
//! which perturbed disc they fall inside; channel intensities are the class
//! contrasts plus Gaussian noise. Subjects are independent streams of one
//! seed, so datasets are reproducible bit for bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{read_mdi, write_mdi, LabelMap, MdiObject, MultiChannelImage};
use crate::seed;

pub const CHANNELS: usize = 3;
pub const CLASSES: usize = 4;
/// Harmonics of the radial boundary perturbation.
pub const HARMONICS: usize = 5;

/// Containment margin between nested boundaries, in pixels. Keeps every ring
/// at least one pixel wide after rasterization.
const NESTING_MARGIN: f64 = 1.0;
/// Dense angular samples of the containment check.
const NESTING_SAMPLES: usize = 720;
/// One initial draw plus this many shrink-and-retry attempts.
const MAX_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    /// Square image side; at least 32.
    pub size: usize,
    pub subjects: usize,
    /// Per-channel, per-class mean intensity; classes are background, edema,
    /// core, enhancing. Must be distinct within each channel.
    pub contrasts: [[f32; CLASSES]; CHANNELS],
    /// Relative amplitude of the radial Fourier perturbation.
    pub boundary_irregularity: f64,
    /// Noise standard deviation as a fraction of each channel's contrast
    /// range.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            size: 128,
            subjects: 10,
            contrasts: [
                [0.10, 0.55, 0.75, 0.95],
                [0.20, 0.45, 0.80, 0.60],
                [0.15, 0.70, 0.40, 0.85],
            ],
            boundary_irregularity: 0.3,
            noise_sigma: 0.05,
            rng_seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::argument("phantom size must be at least 32"));
        }
        if self.subjects == 0 {
            return Err(Error::argument("subject count must be >= 1"));
        }
        for (c, channel) in self.contrasts.iter().enumerate() {
            for a in 0..CLASSES {
                if !channel[a].is_finite() {
                    return Err(Error::argument(format!(
                        "channel {c} contrast for class {a} is not finite"
                    )));
                }
                for b in a + 1..CLASSES {
                    if channel[a] == channel[b] {
                        return Err(Error::argument(format!(
                            "channel {c} contrasts must be distinct; classes {a} and {b} share {}",
                            channel[a]
                        )));
                    }
                }
            }
        }
        // Sum of harmonic amplitude bounds is H(5)-ish; 0.6 keeps radii
        // strictly positive with headroom.
        if !(0.0..=0.6).contains(&self.boundary_irregularity) {
            return Err(Error::argument("boundary irregularity must lie in [0, 0.6]"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::argument("noise sigma must be nonnegative"));
        }
        Ok(())
    }
}

/// The sampled lesion geometry: center, nested base radii (edema, core,
/// enhancing outward-in), per-boundary harmonics as (amplitude, phase), and
/// the perturbation amplitude that survived the containment retries.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGeometry {
    pub center: (f64, f64),
    pub base_radii: [f64; 3],
    pub harmonics: [[(f64, f64); HARMONICS]; 3],
    pub amplitude: f64,
}

impl PhantomGeometry {
    /// Boundary radius of region 0 (edema), 1 (core), or 2 (enhancing) at
    /// angle `theta`.
    pub fn radius(&self, region: usize, theta: f64) -> f64 {
        let mut wobble = 0.0;
        for (h, &(a, phase)) in self.harmonics[region].iter().enumerate() {
            wobble += a * ((h + 1) as f64 * theta + phase).cos();
        }
        self.base_radii[region] * (1.0 + self.amplitude * wobble)
    }

    /// Class of the pixel at (x, y): innermost perturbed disc containing it.
    pub fn label_at(&self, x: usize, y: usize) -> u8 {
        let dx = x as f64 - self.center.0;
        let dy = y as f64 - self.center.1;
        let r = dx.hypot(dy);
        let theta = dy.atan2(dx);
        if r < self.radius(2, theta) {
            3
        } else if r < self.radius(1, theta) {
            2
        } else if r < self.radius(0, theta) {
            1
        } else {
            0
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: MultiChannelImage,
    pub labels: LabelMap,
    pub geometry: PhantomGeometry,
}

fn sample_geometry(params: &PhantomParams, subject: u64) -> Result<PhantomGeometry> {
    let mut rng = seed::stream(params.rng_seed, "phantom", subject);
    let size = params.size as f64;
    let cx = rng.gen_range(0.35..0.65) * size;
    let cy = rng.gen_range(0.35..0.65) * size;
    let r_edema = rng.gen_range(0.28..0.38) * size;
    let r_core = rng.gen_range(0.55..0.70) * r_edema;
    let r_enh = rng.gen_range(0.45..0.65) * r_core;

    for attempt in 0..=MAX_RETRIES {
        let amplitude = params.boundary_irregularity * 0.7f64.powi(attempt as i32);
        let mut harmonics = [[(0.0, 0.0); HARMONICS]; 3];
        for region in harmonics.iter_mut() {
            for (h, slot) in region.iter_mut().enumerate() {
                let a = rng.gen_range(-1.0..1.0) / ((h + 1) * (h + 1)) as f64;
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                *slot = (a, phase);
            }
        }
        let geometry = PhantomGeometry {
            center: (cx, cy),
            base_radii: [r_edema, r_core, r_enh],
            harmonics,
            amplitude,
        };
        let nested = (0..NESTING_SAMPLES).all(|s| {
            let theta = s as f64 / NESTING_SAMPLES as f64 * std::f64::consts::TAU;
            let r0 = geometry.radius(0, theta);
            let r1 = geometry.radius(1, theta);
            let r2 = geometry.radius(2, theta);
            r2 > 0.0 && r2 <= r1 - NESTING_MARGIN && r1 <= r0 - NESTING_MARGIN
        });
        if nested {
            return Ok(geometry);
        }
    }
    Err(Error::generation(format!(
        "subject {subject}: boundaries stayed entangled after {MAX_RETRIES} shrink retries"
    )))
}

fn generate_subject(params: &PhantomParams, subject: u64) -> Result<Phantom> {
    let geometry = sample_geometry(params, subject)?;
    let size = params.size;
    let mut labels = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            labels[y * size + x] = geometry.label_at(x, y);
        }
    }

    // Noise continues the subject's stream after the geometry draws.
    let mut rng = seed::stream(params.rng_seed, "phantom-noise", subject);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut data = vec![0.0f32; CHANNELS * size * size];
    for ch in 0..CHANNELS {
        let contrast = &params.contrasts[ch];
        let lo = contrast.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = contrast.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sigma = params.noise_sigma * f64::from(hi - lo);
        let plane = &mut data[ch * size * size..(ch + 1) * size * size];
        for (slot, &label) in plane.iter_mut().zip(&labels) {
            let clean = f64::from(contrast[usize::from(label)]);
            *slot = (clean + sigma * normal.sample(&mut rng)) as f32;
        }
    }

    Ok(Phantom {
        image: MultiChannelImage::new(size, size, CHANNELS, data)?,
        labels: LabelMap::new(size, size, CLASSES, labels)?,
        geometry,
    })
}

/// Generate all subjects. Deterministic per (seed, subject index); subjects
/// are computed in parallel.
pub fn generate(params: &PhantomParams) -> Result<Vec<Phantom>> {
    params.validate()?;
    (0..params.subjects as u64)
        .into_par_iter()
        .map(|s| generate_subject(params, s))
        .collect()
}

/// One subject's file names inside a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
}

fn float_key(line: usize, key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::config(line, format!("{key} is not a number: {value}")))
}

/// Generate and write a dataset: one image and one label map per subject,
/// plus a line-oriented `key = value` manifest.
pub fn write_dataset(dir: &Path, params: &PhantomParams) -> Result<Vec<DatasetEntry>> {
    let phantoms = generate(params)?;
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut push = |key: &str, value: &str| {
        let _ = writeln!(manifest, "{key} = {value}");
    };
    push("format", "dmt-dataset-1");
    push("size", &params.size.to_string());
    push("subjects", &params.subjects.to_string());
    push("channels", &CHANNELS.to_string());
    push("classes", &CLASSES.to_string());
    push("seed", &params.rng_seed.to_string());
    push(
        "boundary_irregularity",
        &format!("{:?}", params.boundary_irregularity),
    );
    push("noise_sigma", &format!("{:?}", params.noise_sigma));
    for (c, channel) in params.contrasts.iter().enumerate() {
        let joined = channel
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(" ");
        push(&format!("contrast.{c}"), &joined);
    }
    let mut entries = Vec::with_capacity(phantoms.len());
    for (i, phantom) in phantoms.iter().enumerate() {
        let image = PathBuf::from(format!("subject_{i:03}.image.mdi"));
        let labels = PathBuf::from(format!("subject_{i:03}.labels.mdi"));
        write_mdi(&dir.join(&image), &MdiObject::Image(phantom.image.clone()))?;
        write_mdi(&dir.join(&labels), &MdiObject::Labels(phantom.labels.clone()))?;
        push(
            &format!("subject.{i}.image"),
            image.to_str().expect("ascii name"),
        );
        push(
            &format!("subject.{i}.labels"),
            labels.to_str().expect("ascii name"),
        );
        entries.push(DatasetEntry { image, labels });
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(entries)
}

/// Parsed manifest: the generation parameters and the subject file list.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub params: PhantomParams,
    pub entries: Vec<DatasetEntry>,
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path)?;
    let mut params = PhantomParams::default();
    let mut images: Vec<Option<PathBuf>> = Vec::new();
    let mut labels: Vec<Option<PathBuf>> = Vec::new();
    let mut saw_format = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| Error::config(line, format!("expected key = value, found {trimmed}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "format" => {
                if value != "dmt-dataset-1" {
                    return Err(Error::config(line, format!("unknown format {value}")));
                }
                saw_format = true;
            }
            "size" => {
                params.size = value
                    .parse()
                    .map_err(|_| Error::config(line, format!("bad size {value}")))?;
            }
            "subjects" => {
                params.subjects = value
                    .parse()
                    .map_err(|_| Error::config(line, format!("bad subject count {value}")))?;
            }
            "channels" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| Error::config(line, format!("bad channel count {value}")))?;
                if n != CHANNELS {
                    return Err(Error::config(
                        line,
                        format!("dataset has {n} channels, this build expects {CHANNELS}"),
                    ));
                }
            }
            "classes" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| Error::config(line, format!("bad class count {value}")))?;
                if n != CLASSES {
                    return Err(Error::config(
                        line,
                        format!("dataset has {n} classes, this build expects {CLASSES}"),
                    ));
                }
            }
            "seed" => {
                params.rng_seed = value
                    .parse()
                    .map_err(|_| Error::config(line, format!("bad seed {value}")))?;
            }
            "boundary_irregularity" => {
                params.boundary_irregularity = float_key(line, key, value)?;
            }
            "noise_sigma" => {
                params.noise_sigma = float_key(line, key, value)?;
            }
            _ => {
                if let Some(rest) = key.strip_prefix("contrast.") {
                    let c: usize = rest
                        .parse()
                        .map_err(|_| Error::config(line, format!("bad contrast channel {rest}")))?;
                    if c >= CHANNELS {
                        return Err(Error::config(line, format!("contrast channel {c} out of range")));
                    }
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != CLASSES {
                        return Err(Error::config(
                            line,
                            format!("contrast.{c} needs {CLASSES} values, found {}", parts.len()),
                        ));
                    }
                    for (l, part) in parts.iter().enumerate() {
                        params.contrasts[c][l] = part.parse::<f32>().map_err(|_| {
                            Error::config(line, format!("bad contrast value {part}"))
                        })?;
                    }
                } else if let Some(rest) = key.strip_prefix("subject.") {
                    let (index, kind) = rest.split_once('.').ok_or_else(|| {
                        Error::config(line, format!("bad subject key {key}"))
                    })?;
                    let i: usize = index
                        .parse()
                        .map_err(|_| Error::config(line, format!("bad subject index {index}")))?;
                    if images.len() <= i {
                        images.resize(i + 1, None);
                        labels.resize(i + 1, None);
                    }
                    match kind {
                        "image" => images[i] = Some(PathBuf::from(value)),
                        "labels" => labels[i] = Some(PathBuf::from(value)),
                        other => {
                            return Err(Error::config(
                                line,
                                format!("unknown subject field {other}"),
                            ))
                        }
                    }
                } else {
                    return Err(Error::config(line, format!("unknown key {key}")));
                }
            }
        }
    }
    if !saw_format {
        return Err(Error::config(1, "manifest is missing the format line"));
    }
    if images.len() != params.subjects || labels.len() != params.subjects {
        return Err(Error::config(
            1,
            format!(
                "manifest lists {} subjects but declares {}",
                images.len().max(labels.len()),
                params.subjects
            ),
        ));
    }
    let entries: Vec<DatasetEntry> = images
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, pair)| match pair {
            (Some(image), Some(labels)) => Ok(DatasetEntry { image, labels }),
            _ => Err(Error::config(1, format!("subject {i} is missing a file entry"))),
        })
        .collect::<Result<_>>()?;
    Ok(DatasetManifest { params, entries })
}

/// Load every subject of a written dataset in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<(MultiChannelImage, LabelMap)>> {
    let manifest = read_manifest(dir)?;
    manifest
        .entries
        .iter()
        .map(|entry| {
            let image = match read_mdi(&dir.join(&entry.image))? {
                MdiObject::Image(img) => img,
                other => {
                    return Err(Error::contract(format!(
                        "{} holds a {}, expected an image",
                        entry.image.display(),
                        other.kind_name()
                    )))
                }
            };
            let labels = match read_mdi(&dir.join(&entry.labels))? {
                MdiObject::Labels(lab) => lab,
                other => {
                    return Err(Error::contract(format!(
                        "{} holds a {}, expected labels",
                        entry.labels.display(),
                        other.kind_name()
                    )))
                }
            };
            if image.width() != labels.width() || image.height() != labels.height() {
                return Err(Error::contract(format!(
                    "{}: image and labels disagree on dimensions",
                    entry.image.display()
                )));
            }
            Ok((image, labels))
        })
        .collect()
}

#[cfg(test)]
mod tests;
