//! Simulated domain shifts and the histogram-matching baseline.
//!
//! Geometric shifts (rotation, scaling) resample intensities trilinearly
//! and labels nearest-neighbour with the same sampled transform;
//! out-of-field voxels become zero intensity / background label.
//! Intensity shifts (smoothing, gamma) never touch the labels. All draws
//! are per-call via an explicit seed; zero magnitude short-circuits to a
//! bit-identical copy.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::rng::rng_from;
use crate::volume::{LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Draw the concrete parameter from the magnitude range.
    Sampled,
    /// Use the magnitude itself as the concrete parameter (every axis for
    /// per-axis transforms).
    Exact,
}

/// A domain-shift generator with the sampling conventions used
/// throughout: rotation angles and per-axis log scale factors are drawn
/// from [-x, x], log gamma from [-x, x], and the smoothing sigma from
/// [0, x].
#[derive(Debug, Clone, PartialEq)]
pub enum ShiftSpec {
    Rotation { x_deg: f32, mode: SampleMode },
    Scaling { x: f32, mode: SampleMode },
    GaussianSmooth { x: f32, mode: SampleMode },
    Gamma { x: f32, mode: SampleMode },
    Compose(Vec<ShiftSpec>),
}

impl ShiftSpec {
    pub fn rotation(x_deg: f32) -> Self {
        ShiftSpec::Rotation {
            x_deg,
            mode: SampleMode::Sampled,
        }
    }

    pub fn scaling(x: f32) -> Self {
        ShiftSpec::Scaling {
            x,
            mode: SampleMode::Sampled,
        }
    }

    pub fn smooth(x: f32) -> Self {
        ShiftSpec::GaussianSmooth {
            x,
            mode: SampleMode::Sampled,
        }
    }

    pub fn gamma(x: f32) -> Self {
        ShiftSpec::Gamma {
            x,
            mode: SampleMode::Sampled,
        }
    }

    pub fn kind_label(&self) -> &'static str {
        match self {
            ShiftSpec::Rotation { .. } => "rotation",
            ShiftSpec::Scaling { .. } => "scaling",
            ShiftSpec::GaussianSmooth { .. } => "smoothing",
            ShiftSpec::Gamma { .. } => "gamma",
            ShiftSpec::Compose(_) => "compose",
        }
    }

    pub fn magnitude(&self) -> f32 {
        match self {
            ShiftSpec::Rotation { x_deg, .. } => *x_deg,
            ShiftSpec::Scaling { x, .. }
            | ShiftSpec::GaussianSmooth { x, .. }
            | ShiftSpec::Gamma { x, .. } => *x,
            ShiftSpec::Compose(_) => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let x = match self {
            ShiftSpec::Compose(list) => {
                for s in list {
                    s.validate()?;
                }
                return Ok(());
            }
            _ => self.magnitude(),
        };
        if !(x >= 0.0 && x.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "shift magnitude must be finite and nonnegative, got {x}"
            )));
        }
        Ok(())
    }
}

/// Concrete sampled transform parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AppliedParams {
    Rotation { angles_deg: [f32; 3] },
    Scaling { log_factors: [f32; 3] },
    Smooth { sigma: f32 },
    Gamma { log_gamma: f32 },
}

#[derive(Debug, Clone)]
pub struct ShiftedSample {
    pub volume: Volume,
    pub labels: LabelMap,
    pub applied: Vec<AppliedParams>,
}

/// Apply a shift spec, drawing parameters from `seed`.
pub fn apply_shift(
    spec: &ShiftSpec,
    volume: &Volume,
    labels: &LabelMap,
    seed: u64,
) -> Result<ShiftedSample> {
    spec.validate()?;
    match spec {
        ShiftSpec::Rotation { x_deg, mode } => {
            let angles = match mode {
                SampleMode::Exact => [*x_deg; 3],
                SampleMode::Sampled => {
                    let mut rng = rng_from(seed);
                    [0; 3].map(|_| rng.random_range(-x_deg..=*x_deg))
                }
            };
            let (v, l) = rotate_exact(volume, labels, angles)?;
            Ok(ShiftedSample {
                volume: v,
                labels: l,
                applied: vec![AppliedParams::Rotation { angles_deg: angles }],
            })
        }
        ShiftSpec::Scaling { x, mode } => {
            let factors = match mode {
                SampleMode::Exact => [*x; 3],
                SampleMode::Sampled => {
                    let mut rng = rng_from(seed);
                    [0; 3].map(|_| rng.random_range(-x..=*x))
                }
            };
            let (v, l) = scale_exact(volume, labels, factors)?;
            Ok(ShiftedSample {
                volume: v,
                labels: l,
                applied: vec![AppliedParams::Scaling {
                    log_factors: factors,
                }],
            })
        }
        ShiftSpec::GaussianSmooth { x, mode } => {
            let sigma = match mode {
                SampleMode::Exact => *x,
                SampleMode::Sampled => rng_from(seed).random_range(0.0..=*x),
            };
            let v = smooth_exact(volume, sigma);
            Ok(ShiftedSample {
                volume: v,
                labels: labels.clone(),
                applied: vec![AppliedParams::Smooth { sigma }],
            })
        }
        ShiftSpec::Gamma { x, mode } => {
            let log_gamma = match mode {
                SampleMode::Exact => *x,
                SampleMode::Sampled => rng_from(seed).random_range(-x..=*x),
            };
            let v = gamma_exact(volume, log_gamma);
            Ok(ShiftedSample {
                volume: v,
                labels: labels.clone(),
                applied: vec![AppliedParams::Gamma { log_gamma }],
            })
        }
        ShiftSpec::Compose(list) => {
            let mut v = volume.clone();
            let mut l = labels.clone();
            let mut applied = Vec::new();
            for (i, s) in list.iter().enumerate() {
                let out = apply_shift(s, &v, &l, seed.wrapping_add(i as u64 + 1))?;
                v = out.volume;
                l = out.labels;
                applied.extend(out.applied);
            }
            Ok(ShiftedSample {
                volume: v,
                labels: l,
                applied,
            })
        }
    }
}

/// Rotation with per-axis angles drawn from [-x, x] degrees.
pub fn apply_rotation(
    volume: &Volume,
    labels: &LabelMap,
    x_deg: f32,
    seed: u64,
) -> Result<ShiftedSample> {
    apply_shift(&ShiftSpec::rotation(x_deg), volume, labels, seed)
}

/// Scaling with per-axis log factors drawn from [-x, x].
pub fn apply_scaling(
    volume: &Volume,
    labels: &LabelMap,
    x: f32,
    seed: u64,
) -> Result<ShiftedSample> {
    apply_shift(&ShiftSpec::scaling(x), volume, labels, seed)
}

/// Gaussian smoothing with sigma drawn from [0, x] voxels.
pub fn apply_gaussian_smooth(
    volume: &Volume,
    labels: &LabelMap,
    x: f32,
    seed: u64,
) -> Result<ShiftedSample> {
    apply_shift(&ShiftSpec::smooth(x), volume, labels, seed)
}

/// Gamma correction with log gamma drawn from [-x, x].
pub fn apply_gamma(
    volume: &Volume,
    labels: &LabelMap,
    x: f32,
    seed: u64,
) -> Result<ShiftedSample> {
    apply_shift(&ShiftSpec::gamma(x), volume, labels, seed)
}

/// Intrinsic rotations about the (depth, height, width) axes, in that
/// order, about the volume center.
pub fn rotate_exact(
    volume: &Volume,
    labels: &LabelMap,
    angles_deg: [f32; 3],
) -> Result<(Volume, LabelMap)> {
    if volume.dims != labels.dims {
        return Err(CoreError::ShapeMismatch(format!(
            "volume {:?} vs labels {:?}",
            volume.dims, labels.dims
        )));
    }
    if angles_deg.iter().all(|&a| a == 0.0) {
        return Ok((volume.clone(), labels.clone()));
    }
    // Inverse map: rotate output coordinates by the transposed matrix.
    let r = rotation_matrix(angles_deg);
    let rt = transpose(r);
    resample(volume, labels, |p, c| {
        let q = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        [
            rt[0][0] * q[0] + rt[0][1] * q[1] + rt[0][2] * q[2] + c[0],
            rt[1][0] * q[0] + rt[1][1] * q[1] + rt[1][2] * q[2] + c[1],
            rt[2][0] * q[0] + rt[2][1] * q[1] + rt[2][2] * q[2] + c[2],
        ]
    })
}

/// Center-anchored per-axis scaling by exp(log_factors).
pub fn scale_exact(
    volume: &Volume,
    labels: &LabelMap,
    log_factors: [f32; 3],
) -> Result<(Volume, LabelMap)> {
    if volume.dims != labels.dims {
        return Err(CoreError::ShapeMismatch(format!(
            "volume {:?} vs labels {:?}",
            volume.dims, labels.dims
        )));
    }
    if log_factors.iter().all(|&f| f == 0.0) {
        return Ok((volume.clone(), labels.clone()));
    }
    let inv_scale = log_factors.map(|f| (-f).exp());
    resample(volume, labels, move |p, c| {
        [
            c[0] + (p[0] - c[0]) * inv_scale[0],
            c[1] + (p[1] - c[1]) * inv_scale[1],
            c[2] + (p[2] - c[2]) * inv_scale[2],
        ]
    })
}

/// Separable Gaussian smoothing, kernel radius ceil(3 sigma), kernel
/// renormalized where truncated at the borders.
pub fn smooth_exact(volume: &Volume, sigma: f32) -> Volume {
    if sigma <= 1e-6 {
        return volume.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|j| (-(j * j) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / ksum).collect();

    let [d, h, w] = volume.dims;
    let mut cur = volume.data.clone();
    // axis strides for (depth, height, width)
    for (axis_len, stride) in [(d, h * w), (h, w), (w, 1)] {
        let mut next = vec![0.0f32; cur.len()];
        let lines = cur.len() / axis_len;
        for line in 0..lines {
            // starting offset of this line in the flattened array
            let base = line_base(line, stride, [d, h, w]);
            for i in 0..axis_len {
                let mut acc = 0.0f32;
                let mut weight = 0.0f32;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let j = i as isize + ki as isize - radius;
                    if j < 0 || j >= axis_len as isize {
                        continue;
                    }
                    acc += kv * cur[base + j as usize * stride];
                    weight += kv;
                }
                next[base + i * stride] = acc / weight;
            }
        }
        cur = next;
    }
    Volume {
        dims: volume.dims,
        voxel_mm: volume.voxel_mm,
        data: cur,
    }
}

fn line_base(line: usize, stride: usize, dims: [usize; 3]) -> usize {
    let [_d, h, w] = dims;
    if stride == h * w {
        // depth axis: lines indexed by (y, x)
        line
    } else if stride == w {
        // height axis: lines indexed by (z, x)
        let z = line / w;
        let x = line % w;
        z * h * w + x
    } else {
        // width axis: lines indexed by (z, y)
        line * w
    }
}

/// Gamma correction on the min-max normalized intensities, mapped back to
/// the original range. Constant volumes pass through unchanged.
pub fn gamma_exact(volume: &Volume, log_gamma: f32) -> Volume {
    if log_gamma == 0.0 {
        return volume.clone();
    }
    let (lo, hi) = volume.min_max();
    if hi <= lo {
        return volume.clone();
    }
    let gamma = log_gamma.exp();
    let range = hi - lo;
    let data = volume
        .data
        .iter()
        .map(|&v| lo + range * ((v - lo) / range).powf(gamma))
        .collect();
    Volume {
        dims: volume.dims,
        voxel_mm: volume.voxel_mm,
        data,
    }
}

fn rotation_matrix(angles_deg: [f32; 3]) -> [[f32; 3]; 3] {
    let [ad, ah, aw] = angles_deg.map(|a| a.to_radians());
    // about the depth axis: rotates the (height, width) plane
    let rd = [
        [1.0, 0.0, 0.0],
        [0.0, ad.cos(), -ad.sin()],
        [0.0, ad.sin(), ad.cos()],
    ];
    // about the height axis: rotates the (depth, width) plane
    let rh = [
        [ah.cos(), 0.0, ah.sin()],
        [0.0, 1.0, 0.0],
        [-ah.sin(), 0.0, ah.cos()],
    ];
    // about the width axis: rotates the (depth, height) plane
    let rw = [
        [aw.cos(), -aw.sin(), 0.0],
        [aw.sin(), aw.cos(), 0.0],
        [0.0, 0.0, 1.0],
    ];
    mat_mul(mat_mul(rd, rh), rw)
}

fn mat_mul(a: [[f32; 3]; 3], b: [[f32; 3]; 3]) -> [[f32; 3]; 3] {
    let mut out = [[0.0f32; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(m: [[f32; 3]; 3]) -> [[f32; 3]; 3] {
    let mut out = [[0.0f32; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

/// Pull-back resampling: for every output voxel, `map` yields the source
/// coordinate; intensities are sampled trilinearly, labels by nearest
/// neighbour.
fn resample<F>(volume: &Volume, labels: &LabelMap, map: F) -> Result<(Volume, LabelMap)>
where
    F: Fn([f32; 3], [f32; 3]) -> [f32; 3],
{
    let [d, h, w] = volume.dims;
    let center = [
        (d as f32 - 1.0) / 2.0,
        (h as f32 - 1.0) / 2.0,
        (w as f32 - 1.0) / 2.0,
    ];
    let mut out_v = Volume::zeros(volume.dims, volume.voxel_mm);
    let mut out_l = LabelMap::zeros(labels.dims, labels.voxel_mm);
    let mut i = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let src = map([z as f32, y as f32, x as f32], center);
                out_v.data[i] = trilinear(volume, src);
                out_l.data[i] = nearest_label(labels, src);
                i += 1;
            }
        }
    }
    Ok((out_v, out_l))
}

fn trilinear(volume: &Volume, p: [f32; 3]) -> f32 {
    let [d, h, w] = volume.dims;
    let (z, y, x) = (p[0], p[1], p[2]);
    let z0 = z.floor();
    let y0 = y.floor();
    let x0 = x.floor();
    let (fz, fy, fx) = (z - z0, y - y0, x - x0);
    let mut acc = 0.0f32;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        if wz == 0.0 {
            continue;
        }
        let zz = z0 as isize + dz;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            let yy = y0 as isize + dy;
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                let xx = x0 as isize + dx;
                let v = if zz < 0
                    || yy < 0
                    || xx < 0
                    || zz >= d as isize
                    || yy >= h as isize
                    || xx >= w as isize
                {
                    0.0
                } else {
                    volume.data[(zz as usize * h + yy as usize) * w + xx as usize]
                };
                acc += wz * wy * wx * v;
            }
        }
    }
    acc
}

fn nearest_label(labels: &LabelMap, p: [f32; 3]) -> u8 {
    let [d, h, w] = labels.dims;
    let z = p[0].round() as isize;
    let y = p[1].round() as isize;
    let x = p[2].round() as isize;
    if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
        return 0;
    }
    labels.data[(z as usize * h + y as usize) * w + x as usize]
}

/// CDF matching of `target` intensities onto `reference`'s distribution.
///
/// The target side uses the exact empirical CDF (ranks, with runs of
/// equal values sharing their mid-rank), so a compressed intensity peak
/// is still spread correctly; the reference CDF is inverted from an
/// `n_bins` histogram with linear interpolation inside bins.
/// Deterministic; the output range lies within the reference range.
pub fn histogram_match(target: &Volume, reference: &Volume, n_bins: usize) -> Result<Volume> {
    if n_bins < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "histogram matching needs at least 2 bins, got {n_bins}"
        )));
    }
    if target.data.is_empty() || reference.data.is_empty() {
        return Err(CoreError::InvalidConfig("empty volume".into()));
    }
    let (r_lo, r_hi) = reference.min_max();
    if r_hi <= r_lo {
        return Err(CoreError::DegenerateReference);
    }

    let mut r_hist = vec![0u64; n_bins];
    let r_range = r_hi - r_lo;
    for &v in &reference.data {
        let bin = (((v - r_lo) / r_range * n_bins as f32) as usize).min(n_bins - 1);
        r_hist[bin] += 1;
    }
    let r_total = reference.data.len() as f64;
    let mut r_cdf = Vec::with_capacity(n_bins);
    let mut acc = 0u64;
    for &c in &r_hist {
        acc += c;
        r_cdf.push(acc as f64 / r_total);
    }

    // Invert the reference CDF with linear interpolation inside bins.
    let r_bin_width = r_range / n_bins as f32;
    let invert = |q: f64| -> f32 {
        let idx = r_cdf.partition_point(|&c| c < q);
        if idx >= n_bins {
            return r_hi;
        }
        let c_lo = if idx == 0 { 0.0 } else { r_cdf[idx - 1] };
        let c_hi = r_cdf[idx];
        let frac = if c_hi > c_lo {
            ((q - c_lo) / (c_hi - c_lo)) as f32
        } else {
            1.0
        };
        r_lo + (idx as f32 + frac) * r_bin_width
    };

    // Exact empirical quantile per target voxel.
    let n = target.data.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| {
        target.data[a as usize]
            .partial_cmp(&target.data[b as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut quantile = vec![0.0f64; n];
    let mut start = 0usize;
    while start < n {
        let value = target.data[order[start] as usize];
        let mut end = start + 1;
        while end < n && target.data[order[end] as usize] == value {
            end += 1;
        }
        let q = (start as f64 + 0.5 * (end - start) as f64) / n as f64;
        for &idx in &order[start..end] {
            quantile[idx as usize] = q;
        }
        start = end;
    }

    let data: Vec<f32> = quantile
        .iter()
        .map(|&q| invert(q).clamp(r_lo, r_hi))
        .collect();
    Ok(Volume {
        dims: target.dims,
        voxel_mm: target.voxel_mm,
        data,
    })
}
