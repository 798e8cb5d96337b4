//! Low-level image filters and summed-area tables backing the featurizer.
//!
//! All filters sample out-of-bounds pixels by border replication so the
//! response maps stay image-sized and constant images produce exactly zero
//! derivative responses everywhere, borders included.

#[inline]
fn at(plane: &[f32], w: usize, h: usize, x: isize, y: isize) -> f64 {
    let xc = x.clamp(0, w as isize - 1) as usize;
    let yc = y.clamp(0, h as isize - 1) as usize;
    f64::from(plane[yc * w + xc])
}

/// Plane element types the aggregation helpers accept. Raw image planes are
/// f32; derivative response maps are kept in f64 so feature invariances are
/// not capped at single precision.
pub trait PlaneValue: Copy {
    fn to_f64(self) -> f64;
}

impl PlaneValue for f32 {
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl PlaneValue for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Summed-area table in f64 for O(1) rectangle sums over a plane.
pub struct PlaneSat {
    w: usize,
    sat: Vec<f64>,
}

impl PlaneSat {
    pub fn build<T: PlaneValue>(plane: &[T], w: usize, h: usize) -> Self {
        let mut sat = vec![0.0f64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0f64;
            for x in 0..w {
                row += plane[y * w + x].to_f64();
                sat[(y + 1) * (w + 1) + (x + 1)] = sat[y * (w + 1) + (x + 1)] + row;
            }
        }
        PlaneSat { w, sat }
    }

    /// Sum over the inclusive rectangle [x0, x1] x [y0, y1]; bounds must be
    /// inside the plane.
    #[inline]
    pub fn rect_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let w1 = self.w + 1;
        self.sat[(y1 + 1) * w1 + (x1 + 1)] + self.sat[y0 * w1 + x0]
            - self.sat[y0 * w1 + (x1 + 1)]
            - self.sat[(y1 + 1) * w1 + x0]
    }
}

/// Mean of a side x side window whose top-left corner is (x0, y0), with
/// out-of-bounds samples replicating the border. Uses the table when the
/// window is fully inside, otherwise falls back to a clamped loop.
pub fn window_mean<T: PlaneValue>(
    plane: &[T],
    sat: &PlaneSat,
    w: usize,
    h: usize,
    x0: isize,
    y0: isize,
    side: usize,
) -> f64 {
    let x1 = x0 + side as isize - 1;
    let y1 = y0 + side as isize - 1;
    let n = (side * side) as f64;
    if x0 >= 0 && y0 >= 0 && (x1 as usize) < w && (y1 as usize) < h {
        sat.rect_sum(x0 as usize, y0 as usize, x1 as usize, y1 as usize) / n
    } else {
        let mut sum = 0.0f64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let xc = x.clamp(0, w as isize - 1) as usize;
                let yc = y.clamp(0, h as isize - 1) as usize;
                sum += plane[yc * w + xc].to_f64();
            }
        }
        sum / n
    }
}

/// Sobel gradient magnitude, kernels normalized by 1/8 so a unit ramp gives
/// magnitude 1.
pub fn sobel_magnitude(plane: &[f32], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let tl = at(plane, w, h, x - 1, y - 1);
            let tc = at(plane, w, h, x, y - 1);
            let tr = at(plane, w, h, x + 1, y - 1);
            let ml = at(plane, w, h, x - 1, y);
            let mr = at(plane, w, h, x + 1, y);
            let bl = at(plane, w, h, x - 1, y + 1);
            let bc = at(plane, w, h, x, y + 1);
            let br = at(plane, w, h, x + 1, y + 1);
            let gx = (tr + 2.0 * mr + br - tl - 2.0 * ml - bl) / 8.0;
            let gy = (bl + 2.0 * bc + br - tl - 2.0 * tc - tr) / 8.0;
            out[(y as usize) * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Central-difference gradient magnitude.
pub fn gradient_magnitude(plane: &[f32], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(plane, w, h, x + 1, y) - at(plane, w, h, x - 1, y)) / 2.0;
            let gy = (at(plane, w, h, x, y + 1) - at(plane, w, h, x, y - 1)) / 2.0;
            out[(y as usize) * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// 5-point Laplacian.
pub fn laplacian(plane: &[f32], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let v = at(plane, w, h, x + 1, y)
                + at(plane, w, h, x - 1, y)
                + at(plane, w, h, x, y + 1)
                + at(plane, w, h, x, y - 1)
                - 4.0 * at(plane, w, h, x, y);
            out[(y as usize) * w + x as usize] = v;
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with border replication.
pub fn gaussian_blur(plane: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xs = (x + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * f64::from(plane[y * w + xs]);
            }
            tmp[y * w + x as usize] = acc;
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let ys = (y + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[ys * w + x];
            }
            out[(y as usize) * w + x] = acc;
        }
    }
    out
}

/// Difference of Gaussians: blur at sigma1 minus blur at sigma2.
pub fn difference_of_gaussians(
    plane: &[f32],
    w: usize,
    h: usize,
    sigma1: f64,
    sigma2: f64,
) -> Vec<f64> {
    let a = gaussian_blur(plane, w, h, sigma1);
    let b = gaussian_blur(plane, w, h, sigma2);
    a.iter().zip(&b).map(|(x, y)| x - y).collect()
}

/// Mean and Gaussian curvature of the intensity surface z = I(x, y) from
/// central first and second differences.
pub fn curvatures(plane: &[f32], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean_c = vec![0.0f64; w * h];
    let mut gauss_c = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = at(plane, w, h, x, y);
            let ix = (at(plane, w, h, x + 1, y) - at(plane, w, h, x - 1, y)) / 2.0;
            let iy = (at(plane, w, h, x, y + 1) - at(plane, w, h, x, y - 1)) / 2.0;
            let ixx = at(plane, w, h, x + 1, y) - 2.0 * c + at(plane, w, h, x - 1, y);
            let iyy = at(plane, w, h, x, y + 1) - 2.0 * c + at(plane, w, h, x, y - 1);
            let ixy = (at(plane, w, h, x + 1, y + 1) - at(plane, w, h, x + 1, y - 1)
                - at(plane, w, h, x - 1, y + 1)
                + at(plane, w, h, x - 1, y - 1))
                / 4.0;
            let g = 1.0 + ix * ix + iy * iy;
            let idx = (y as usize) * w + x as usize;
            mean_c[idx] = ((1.0 + iy * iy) * ixx - 2.0 * ix * iy * ixy + (1.0 + ix * ix) * iyy)
                / (2.0 * g.powf(1.5));
            gauss_c[idx] = (ixx * iyy - ixy * ixy) / (g * g);
        }
    }
    (mean_c, gauss_c)
}

/// Quadrature Gabor pair for one orientation and wavelength. Both kernels are
/// mean-removed (zero response to constants) and L2-normalized.
fn gabor_kernels(theta_rad: f64, lambda: f64) -> (Vec<f64>, Vec<f64>, isize) {
    let sigma = 0.56 * lambda;
    let gamma = 0.5;
    let r = (2.5 * sigma).ceil() as isize;
    let side = (2 * r + 1) as usize;
    let (sin_t, cos_t) = theta_rad.sin_cos();
    let mut even = Vec::with_capacity(side * side);
    let mut odd = Vec::with_capacity(side * side);
    for dy in -r..=r {
        for dx in -r..=r {
            let xp = dx as f64 * cos_t + dy as f64 * sin_t;
            let yp = -(dx as f64) * sin_t + dy as f64 * cos_t;
            let env = (-(xp * xp + gamma * gamma * yp * yp) / (2.0 * sigma * sigma)).exp();
            let phase = 2.0 * std::f64::consts::PI * xp / lambda;
            even.push(env * phase.cos());
            odd.push(env * phase.sin());
        }
    }
    for k in [&mut even, &mut odd] {
        let mean = k.iter().sum::<f64>() / k.len() as f64;
        for v in k.iter_mut() {
            *v -= mean;
        }
        let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in k.iter_mut() {
                *v /= norm;
            }
        }
    }
    (even, odd, r)
}

/// Gabor magnitude response: sqrt(even^2 + odd^2) of the quadrature pair.
pub fn gabor_magnitude(plane: &[f32], w: usize, h: usize, theta_rad: f64, lambda: f64) -> Vec<f64> {
    let (even, odd, r) = gabor_kernels(theta_rad, lambda);
    let side = (2 * r + 1) as usize;
    let mut out = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut e = 0.0f64;
            let mut o = 0.0f64;
            // Hot loop: split interior from border so the common case has no
            // per-tap clamping.
            if x >= r && y >= r && x + r < w as isize && y + r < h as isize {
                let mut k = 0usize;
                for dy in -r..=r {
                    let row = ((y + dy) as usize) * w + (x - r) as usize;
                    for i in 0..side {
                        let v = f64::from(plane[row + i]);
                        e += even[k] * v;
                        o += odd[k] * v;
                        k += 1;
                    }
                }
            } else {
                let mut k = 0usize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let v = at(plane, w, h, x + dx, y + dy);
                        e += even[k] * v;
                        o += odd[k] * v;
                        k += 1;
                    }
                }
            }
            out[(y as usize) * w + x as usize] = (e * e + o * o).sqrt();
        }
    }
    out
}

/// Per-pixel mirror asymmetry about the vertical image midline:
/// |I(x, y) - I(w-1-x, y)|.
pub fn symmetry_map(plane: &[f32], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = f64::from((plane[y * w + x] - plane[y * w + (w - 1 - x)]).abs());
        }
    }
    out
}
