//! SLIC superpixel oversegmentation and the edge map that defines the
//! Bayesian-network structure.
//!
//! Clustering runs on one reference channel in (intensity, x, y) space with
//! deterministic grid seeding and a fixed iteration count; there is no RNG
//! anywhere in this module, so a given image always produces the same
//! partition. A post-pass enforces 4-connectivity and merges undersized
//! fragments into their most similar neighbor.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{LabelMap, MultiChannelImage};

/// Intensities are rescaled to this range before clustering, so `compactness`
/// weighs space against a fixed intensity scale regardless of input units.
const INTENSITY_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SlicParams {
    pub target_superpixels: usize,
    pub compactness: f64,
    pub iterations: usize,
    /// Regions smaller than this fraction of the nominal superpixel area are
    /// merged away.
    pub min_region_fraction: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            target_superpixels: 1000,
            compactness: 10.0,
            iterations: 10,
            min_region_fraction: 0.25,
        }
    }
}

impl SlicParams {
    pub fn validate(&self) -> Result<()> {
        if self.target_superpixels == 0 {
            return Err(Error::argument("target superpixel count must be >= 1"));
        }
        if !(self.compactness > 0.0) {
            return Err(Error::argument("compactness must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::argument("need at least one clustering iteration"));
        }
        if !(0.0..=1.0).contains(&self.min_region_fraction) {
            return Err(Error::argument("min region fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

/// One region of the partition. Pixels are listed in row-major scan order.
#[derive(Debug, Clone)]
pub struct Superpixel {
    pub id: usize,
    pub pixels: Vec<(usize, usize)>,
    pub centroid: (f64, f64),
}

/// Boundary between two adjacent superpixels: every 4-adjacent pixel pair
/// that straddles it, plus the mean intensity step across those pairs.
#[derive(Debug, Clone)]
pub struct Edge {
    pub id: usize,
    /// Parent superpixel ids, smaller first.
    pub parents: (usize, usize),
    /// (pixel in parents.0, pixel in parents.1) per boundary pair.
    pub boundary: Vec<((usize, usize), (usize, usize))>,
    /// Mean |a - b| of the rescaled reference intensities over the boundary
    /// pairs: the observed edge evidence consumed by the Bayesian network.
    pub strength: f64,
}

/// Superpixel partition of one image plus the adjacency edges between
/// regions.
#[derive(Debug, Clone)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    assignment: Vec<u32>,
    superpixels: Vec<Superpixel>,
    edges: Vec<Edge>,
}

impl EdgeMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Per-pixel superpixel id, row-major.
    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    #[inline]
    pub fn superpixel_at(&self, x: usize, y: usize) -> usize {
        self.assignment[y * self.width + x] as usize
    }

    pub fn superpixels(&self) -> &[Superpixel] {
        &self.superpixels
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Per-superpixel list of (edge id, neighbor superpixel id).
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.superpixels.len()];
        for e in &self.edges {
            adj[e.parents.0].push((e.id, e.parents.1));
            adj[e.parents.1].push((e.id, e.parents.0));
        }
        adj
    }

    /// Check the structural invariants: complete assignment, compact ids,
    /// 4-connected regions, consistent edges. Intended for tests and
    /// debugging, not hot paths.
    pub fn validate(&self) -> Result<()> {
        let n = self.superpixels.len();
        if n == 0 {
            return Err(Error::contract("edge map has no superpixels"));
        }
        let mut seen = vec![0usize; n];
        for (i, &a) in self.assignment.iter().enumerate() {
            if a as usize >= n {
                return Err(Error::contract(format!(
                    "pixel {i} assigned to unknown superpixel {a}"
                )));
            }
            seen[a as usize] += 1;
        }
        for (sp, &count) in self.superpixels.iter().zip(&seen) {
            if sp.pixels.len() != count {
                return Err(Error::contract(format!(
                    "superpixel {} lists {} pixels but {} are assigned",
                    sp.id,
                    sp.pixels.len(),
                    count
                )));
            }
            if sp.pixels.is_empty() {
                return Err(Error::contract(format!("superpixel {} is empty", sp.id)));
            }
            if !self.region_is_connected(sp) {
                return Err(Error::contract(format!(
                    "superpixel {} is not 4-connected",
                    sp.id
                )));
            }
        }
        let mut pairs = std::collections::BTreeSet::new();
        for e in &self.edges {
            if e.parents.0 >= e.parents.1 || e.parents.1 >= n {
                return Err(Error::contract(format!(
                    "edge {} has invalid parents {:?}",
                    e.id, e.parents
                )));
            }
            if !pairs.insert(e.parents) {
                return Err(Error::contract(format!(
                    "duplicate edge for parents {:?}",
                    e.parents
                )));
            }
            if e.boundary.is_empty() {
                return Err(Error::contract(format!("edge {} has no boundary", e.id)));
            }
        }
        Ok(())
    }

    fn region_is_connected(&self, sp: &Superpixel) -> bool {
        let id = sp.id as u32;
        let mut visited = std::collections::BTreeSet::new();
        let mut stack = vec![sp.pixels[0]];
        visited.insert(sp.pixels[0]);
        while let Some((x, y)) = stack.pop() {
            let push = |nx: usize, ny: usize, visited: &mut std::collections::BTreeSet<(usize, usize)>, stack: &mut Vec<(usize, usize)>| {
                if self.assignment[ny * self.width + nx] == id && visited.insert((nx, ny)) {
                    stack.push((nx, ny));
                }
            };
            if x > 0 {
                push(x - 1, y, &mut visited, &mut stack);
            }
            if x + 1 < self.width {
                push(x + 1, y, &mut visited, &mut stack);
            }
            if y > 0 {
                push(x, y - 1, &mut visited, &mut stack);
            }
            if y + 1 < self.height {
                push(x, y + 1, &mut visited, &mut stack);
            }
        }
        visited.len() == sp.pixels.len()
    }
}

/// Rescale a channel to [0, INTENSITY_SCALE]; a constant channel maps to 0.
fn normalize_reference(img: &MultiChannelImage, channel: usize) -> Vec<f64> {
    let plane = img.channel(channel);
    let min = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let max = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = f64::from(max) - f64::from(min);
    if range <= 0.0 {
        return vec![0.0; plane.len()];
    }
    plane
        .iter()
        .map(|&v| (f64::from(v) - f64::from(min)) / range * INTENSITY_SCALE)
        .collect()
}

struct Center {
    x: f64,
    y: f64,
    intensity: f64,
}

/// Oversegment `img` into roughly `params.target_superpixels` regions by
/// clustering the reference channel, then build the adjacency edges.
pub fn slic(
    img: &MultiChannelImage,
    reference_channel: usize,
    params: &SlicParams,
) -> Result<EdgeMap> {
    params.validate()?;
    if reference_channel >= img.channels() {
        return Err(Error::argument(format!(
            "reference channel {} out of range for {} channels",
            reference_channel,
            img.channels()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let k = params.target_superpixels;
    if k > w * h {
        return Err(Error::argument(format!(
            "target superpixel count {k} exceeds pixel count {}",
            w * h
        )));
    }
    let intensity = normalize_reference(img, reference_channel);
    let spacing = ((w * h) as f64 / k as f64).sqrt();

    // Grid seeding: ny * nx ~ k seeds laid out to match the aspect ratio.
    let ny = ((k as f64 * h as f64 / w as f64).sqrt().round() as usize).max(1);
    let nx = ((k as f64 / ny as f64).round() as usize).max(1);
    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * w as f64 / nx as f64;
            let y = (j as f64 + 0.5) * h as f64 / ny as f64;
            let px = (x as usize).min(w - 1);
            let py = (y as usize).min(h - 1);
            centers.push(Center {
                x,
                y,
                intensity: intensity[py * w + px],
            });
        }
    }

    let spatial_weight = (params.compactness / spacing).powi(2);
    let mut label = vec![u32::MAX; w * h];
    let mut dist = vec![f64::INFINITY; w * h];
    for _ in 0..params.iterations {
        dist.fill(f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let x0 = ((c.x - spacing).floor().max(0.0)) as usize;
            let x1 = (((c.x + spacing).ceil()) as usize).min(w - 1);
            let y0 = ((c.y - spacing).floor().max(0.0)) as usize;
            let y1 = (((c.y + spacing).ceil()) as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let di = intensity[p] - c.intensity;
                    let dx = x as f64 - c.x;
                    let dy = y as f64 - c.y;
                    let d = di * di + spatial_weight * (dx * dx + dy * dy);
                    if d < dist[p] {
                        dist[p] = d;
                        label[p] = ci as u32;
                    }
                }
            }
        }
        // Window coverage can miss pixels when seeds are sparse relative to
        // the grid; attach strays to the globally nearest center.
        for p in 0..w * h {
            if label[p] == u32::MAX {
                let (x, y) = (p % w, p / w);
                let mut best = 0u32;
                let mut best_d = f64::INFINITY;
                for (ci, c) in centers.iter().enumerate() {
                    let di = intensity[p] - c.intensity;
                    let dx = x as f64 - c.x;
                    let dy = y as f64 - c.y;
                    let d = di * di + spatial_weight * (dx * dx + dy * dy);
                    if d < best_d {
                        best_d = d;
                        best = ci as u32;
                    }
                }
                label[p] = best;
            }
        }
        // Lloyd update; empty clusters keep their position.
        let mut sums = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); centers.len()];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let s = &mut sums[label[p] as usize];
                s.0 += x as f64;
                s.1 += y as f64;
                s.2 += intensity[p];
                s.3 += 1;
            }
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s.3 > 0 {
                let n = s.3 as f64;
                c.x = s.0 / n;
                c.y = s.1 / n;
                c.intensity = s.2 / n;
            }
        }
    }

    let regions = enforce_connectivity(&label, &intensity, w, h, k, params.min_region_fraction);
    Ok(build_edge_map(regions, &intensity, w, h))
}

/// Relabel connected components, then merge every component smaller than
/// `min_region_fraction` of the nominal superpixel area into its most
/// intensity-similar 4-adjacent neighbor. Returns the compact per-pixel
/// region assignment.
fn enforce_connectivity(
    label: &[u32],
    intensity: &[f64],
    w: usize,
    h: usize,
    target: usize,
    min_region_fraction: f64,
) -> Vec<u32> {
    // Connected-component pass over equal cluster labels.
    let mut region = vec![u32::MAX; w * h];
    let mut sizes: Vec<usize> = Vec::new();
    let mut means: Vec<f64> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if region[start] != u32::MAX {
            continue;
        }
        let rid = sizes.len() as u32;
        let cluster = label[start];
        let mut size = 0usize;
        let mut sum = 0.0f64;
        region[start] = rid;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            sum += intensity[p];
            let (x, y) = (p % w, p / w);
            for (nx, ny) in [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ] {
                if nx < w && ny < h {
                    let q = ny * w + nx;
                    if region[q] == u32::MAX && label[q] == cluster {
                        region[q] = rid;
                        stack.push(q);
                    }
                }
            }
        }
        sizes.push(size);
        means.push(sum / size as f64);
    }

    // Union-find merge of undersized components, smallest first.
    let min_size = min_region_fraction * (w * h) as f64 / target as f64;
    let mut parent: Vec<u32> = (0..sizes.len() as u32).collect();
    fn find(parent: &mut [u32], mut r: u32) -> u32 {
        while parent[r as usize] != r {
            parent[r as usize] = parent[parent[r as usize] as usize];
            r = parent[r as usize];
        }
        r
    }
    // Adjacency over original components; stable and cheap to re-derive
    // through find() after merges.
    let mut adjacent: Vec<std::collections::BTreeSet<u32>> =
        vec![std::collections::BTreeSet::new(); sizes.len()];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w && region[p + 1] != region[p] {
                adjacent[region[p] as usize].insert(region[p + 1]);
                adjacent[region[p + 1] as usize].insert(region[p]);
            }
            if y + 1 < h && region[p + w] != region[p] {
                adjacent[region[p] as usize].insert(region[p + w]);
                adjacent[region[p + w] as usize].insert(region[p]);
            }
        }
    }
    let mut sums: Vec<f64> = means.iter().zip(&sizes).map(|(m, &s)| m * s as f64).collect();
    let mut merged_sizes = sizes.clone();
    loop {
        // Smallest live root below the threshold, ties toward the lower id.
        let mut pick: Option<(usize, u32)> = None;
        for r in 0..merged_sizes.len() as u32 {
            if find(&mut parent, r) != r {
                continue;
            }
            let s = merged_sizes[r as usize];
            if (s as f64) < min_size && pick.map_or(true, |(ps, _)| s < ps) {
                pick = Some((s, r));
            }
        }
        let Some((_, small)) = pick else { break };
        // Most intensity-similar adjacent root.
        let mean_small = sums[small as usize] / merged_sizes[small as usize] as f64;
        let mut best: Option<(f64, u32)> = None;
        let mut neighbor_roots = std::collections::BTreeSet::new();
        for r in 0..sizes.len() as u32 {
            if find(&mut parent, r) == small {
                for &a in &adjacent[r as usize] {
                    let root = find(&mut parent, a);
                    if root != small {
                        neighbor_roots.insert(root);
                    }
                }
            }
        }
        for root in neighbor_roots {
            let mean = sums[root as usize] / merged_sizes[root as usize] as f64;
            let d = (mean - mean_small).abs();
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, root));
            }
        }
        let Some((_, into)) = best else { break }; // single region left
        parent[small as usize] = into;
        merged_sizes[into as usize] += merged_sizes[small as usize];
        sums[into as usize] += sums[small as usize];
    }

    // Compact relabel in scan order of first appearance.
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    let mut out = vec![0u32; w * h];
    for p in 0..w * h {
        let root = find(&mut parent, region[p]);
        let next = remap.len() as u32;
        let id = *remap.entry(root).or_insert(next);
        out[p] = id;
    }
    out
}

fn build_edge_map(assignment: Vec<u32>, intensity: &[f64], w: usize, h: usize) -> EdgeMap {
    let n = assignment.iter().map(|&a| a as usize).max().unwrap_or(0) + 1;
    let mut pixels: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for y in 0..h {
        for x in 0..w {
            pixels[assignment[y * w + x] as usize].push((x, y));
        }
    }
    let superpixels: Vec<Superpixel> = pixels
        .into_iter()
        .enumerate()
        .map(|(id, pixels)| {
            let m = pixels.len() as f64;
            let cx = pixels.iter().map(|&(x, _)| x as f64).sum::<f64>() / m;
            let cy = pixels.iter().map(|&(_, y)| y as f64).sum::<f64>() / m;
            Superpixel {
                id,
                pixels,
                centroid: (cx, cy),
            }
        })
        .collect();

    let mut boundary: BTreeMap<(u32, u32), Vec<((usize, usize), (usize, usize))>> = BTreeMap::new();
    let mut steps: BTreeMap<(u32, u32), (f64, usize)> = BTreeMap::new();
    let note = |a: u32,
                    b: u32,
                    pa: (usize, usize),
                    pb: (usize, usize),
                    boundary: &mut BTreeMap<(u32, u32), Vec<((usize, usize), (usize, usize))>>,
                    steps: &mut BTreeMap<(u32, u32), (f64, usize)>| {
        let (key, pair) = if a < b { ((a, b), (pa, pb)) } else { ((b, a), (pb, pa)) };
        boundary.entry(key).or_default().push(pair);
        let d = (intensity[pa.1 * w + pa.0] - intensity[pb.1 * w + pb.0]).abs();
        let s = steps.entry(key).or_insert((0.0, 0));
        s.0 += d;
        s.1 += 1;
    };
    for y in 0..h {
        for x in 0..w {
            let a = assignment[y * w + x];
            if x + 1 < w {
                let b = assignment[y * w + x + 1];
                if a != b {
                    note(a, b, (x, y), (x + 1, y), &mut boundary, &mut steps);
                }
            }
            if y + 1 < h {
                let b = assignment[(y + 1) * w + x];
                if a != b {
                    note(a, b, (x, y), (x, y + 1), &mut boundary, &mut steps);
                }
            }
        }
    }
    let edges: Vec<Edge> = boundary
        .into_iter()
        .enumerate()
        .map(|(id, (parents, pairs))| {
            let (sum, count) = steps[&parents];
            Edge {
                id,
                parents: (parents.0 as usize, parents.1 as usize),
                boundary: pairs,
                strength: sum / count as f64,
            }
        })
        .collect();
    EdgeMap {
        width: w,
        height: h,
        assignment,
        superpixels,
        edges,
    }
}

/// Reuse an existing partition on another image of the same dimensions: the
/// superpixel pixel sets verbatim, no re-clustering.
pub fn apply_partition(
    edge_map: &EdgeMap,
    other: &MultiChannelImage,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if other.width() != edge_map.width() || other.height() != edge_map.height() {
        return Err(Error::argument(format!(
            "image is {}x{}, partition is {}x{}",
            other.width(),
            other.height(),
            edge_map.width(),
            edge_map.height()
        )));
    }
    Ok(edge_map
        .superpixels()
        .iter()
        .map(|sp| sp.pixels.clone())
        .collect())
}

/// Modal pixel label per superpixel; ties break toward the lowest label id.
pub fn majority_label(edge_map: &EdgeMap, labels: &LabelMap) -> Result<Vec<u8>> {
    if labels.width() != edge_map.width() || labels.height() != edge_map.height() {
        return Err(Error::argument(format!(
            "label map is {}x{}, partition is {}x{}",
            labels.width(),
            labels.height(),
            edge_map.width(),
            edge_map.height()
        )));
    }
    Ok(edge_map
        .superpixels()
        .iter()
        .map(|sp| {
            let mut counts = vec![0usize; labels.classes()];
            for &(x, y) in &sp.pixels {
                counts[labels.get(x, y) as usize] += 1;
            }
            let mut best = 0usize;
            for l in 1..counts.len() {
                if counts[l] > counts[best] {
                    best = l;
                }
            }
            best as u8
        })
        .collect())
}
