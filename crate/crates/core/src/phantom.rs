//! Synthetic labeled phantoms and the normative atlas built from them.
//!
//! A phantom carries four foreground structures (three ellipsoids and one
//! curved tube) over a dark background. Sizes and positions vary smoothly
//! with a growth parameter `g` in [0, 1] plus per-seed jitter; intensity
//! is a per-class base level modulated by multiplicative speckle and a
//! smooth bias field. Classes 1 and 4 share nearly the same base level
//! and are distinguishable mainly by size, so models trained on a narrow
//! growth band degrade towards the extremes.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::loss::ClassRatioPrior;
use crate::rng::rng_for;
use crate::shift::smooth_exact;
use crate::volume::{LabelMap, Volume};

pub const NUM_STRUCTURES: usize = 4;
pub const NUM_CLASSES: usize = NUM_STRUCTURES + 1;

/// Base intensity per class (background first). Classes 1 and 4 are
/// intentionally close.
pub const CLASS_INTENSITY: [f32; NUM_CLASSES] = [0.12, 0.55, 0.80, 0.35, 0.50];

const GROWTH_SCALE_MIN: f32 = 0.72;
const GROWTH_SCALE_SPAN: f32 = 0.56;
const BORDER_MARGIN: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Cubic grid extent; must be even.
    pub grid: usize,
    pub voxel_mm: f32,
    /// Growth parameter in [0, 1]; larger structures at 1.
    pub growth: f32,
    /// Multiplicative speckle amplitude.
    pub noise: f32,
    /// Multiplicative smooth bias-field amplitude.
    pub bias: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: 64,
            voxel_mm: 0.6,
            growth: 0.5,
            noise: 0.06,
            bias: 0.08,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        if self.grid % 2 != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "grid extent must be even, got {}",
                self.grid
            )));
        }
        if !(0.0..=1.0).contains(&self.growth) {
            return Err(CoreError::InvalidConfig(format!(
                "growth must be in [0, 1], got {}",
                self.growth
            )));
        }
        if self.noise < 0.0 || self.bias < 0.0 {
            return Err(CoreError::InvalidConfig(
                "noise and bias must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

enum Shape {
    Ellipsoid { semi: [f32; 3] },
    /// Circular arc of `radius` in the (height, width) plane with a round
    /// tube cross-section; `span_deg` limits the angular extent.
    Arc {
        radius: f32,
        tube: f32,
        span_deg: [f32; 2],
    },
}

struct Template {
    center: [f32; 3],
    drift: [f32; 3],
    shape: Shape,
}

fn templates() -> [Template; NUM_STRUCTURES] {
    [
        Template {
            center: [0.36, 0.38, 0.40],
            drift: [0.010, -0.012, 0.008],
            shape: Shape::Ellipsoid {
                semi: [0.115, 0.095, 0.105],
            },
        },
        Template {
            center: [0.40, 0.66, 0.62],
            drift: [-0.008, 0.010, 0.010],
            shape: Shape::Arc {
                radius: 0.115,
                tube: 0.050,
                span_deg: [15.0, 165.0],
            },
        },
        Template {
            center: [0.66, 0.38, 0.64],
            drift: [0.012, 0.008, -0.010],
            shape: Shape::Ellipsoid {
                semi: [0.085, 0.130, 0.095],
            },
        },
        Template {
            center: [0.64, 0.66, 0.34],
            drift: [-0.010, -0.008, 0.012],
            shape: Shape::Ellipsoid {
                semi: [0.075, 0.070, 0.080],
            },
        },
    ]
}

struct PlacedStructure {
    center: [f32; 3],
    shape: Shape,
    size_factor: f32,
}

impl PlacedStructure {
    /// Normalized field: < 1 inside the structure, grows with distance.
    fn field(&self, p: [f32; 3]) -> f32 {
        match &self.shape {
            Shape::Ellipsoid { semi } => {
                let mut s = 0.0f32;
                for i in 0..3 {
                    let d = (p[i] - self.center[i]) / (semi[i] * self.size_factor);
                    s += d * d;
                }
                s.sqrt()
            }
            Shape::Arc {
                radius,
                tube,
                span_deg,
            } => {
                let r = radius * self.size_factor;
                let t = tube * self.size_factor;
                let dy = p[1] - self.center[1];
                let dx = p[2] - self.center[2];
                let theta = dx.atan2(dy).to_degrees();
                let clamped = theta.clamp(span_deg[0], span_deg[1]).to_radians();
                let ay = self.center[1] + r * clamped.cos();
                let ax = self.center[2] + r * clamped.sin();
                let dz = p[0] - self.center[0];
                let dist =
                    ((p[1] - ay).powi(2) + (p[2] - ax).powi(2) + dz * dz).sqrt();
                dist / t
            }
        }
    }

    fn max_reach(&self) -> f32 {
        match &self.shape {
            Shape::Ellipsoid { semi } => {
                semi.iter().fold(0.0f32, |a, &b| a.max(b)) * self.size_factor
            }
            Shape::Arc { radius, tube, .. } => (radius + tube) * self.size_factor,
        }
    }
}

/// Deterministic labeled phantom for the given spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let n = spec.grid;
    let scale = GROWTH_SCALE_MIN + GROWTH_SCALE_SPAN * spec.growth;

    let mut jitter_rng = rng_for(spec.seed, "phantom.jitter", 0);
    let placed: Vec<PlacedStructure> = templates()
        .into_iter()
        .map(|t| {
            let jc: [f32; 3] = [0; 3].map(|_| jitter_rng.random_range(-0.025..0.025f32));
            let js: f32 = jitter_rng.random_range(0.94..1.06);
            let center = [
                t.center[0] + jc[0] + t.drift[0] * (spec.growth - 0.5),
                t.center[1] + jc[1] + t.drift[1] * (spec.growth - 0.5),
                t.center[2] + jc[2] + t.drift[2] * (spec.growth - 0.5),
            ];
            PlacedStructure {
                center,
                shape: t.shape,
                size_factor: scale * js,
            }
        })
        .collect();

    // Fit check: stay inside the grid with a margin, never overlap.
    for s in &placed {
        let reach = s.max_reach();
        for c in s.center {
            if c - reach < BORDER_MARGIN || c + reach > 1.0 - BORDER_MARGIN {
                return Err(CoreError::PhantomDoesNotFit(n));
            }
        }

    }

    let mut labels = LabelMap::zeros([n, n, n], spec.voxel_mm);
    let inv = 1.0 / n as f32;
    let mut idx = 0usize;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [
                    (z as f32 + 0.5) * inv,
                    (y as f32 + 0.5) * inv,
                    (x as f32 + 0.5) * inv,
                ];
                let mut best = f32::INFINITY;
                let mut second = f32::INFINITY;
                let mut arg = 0usize;
                for (si, s) in placed.iter().enumerate() {
                    let f = s.field(p);
                    if f < best {
                        second = best;
                        best = f;
                        arg = si;
                    } else if f < second {
                        second = f;
                    }
                }
                if best < 1.0 {
                    if second < 1.0 {
                        return Err(CoreError::PhantomDoesNotFit(n));
                    }
                    labels.data[idx] = (arg + 1) as u8;
                }
                idx += 1;
            }
        }
    }

    // a structure that received no voxels does not fit at this resolution
    let counts = labels.class_counts(NUM_CLASSES);
    if counts[1..].iter().any(|&c| c == 0) {
        return Err(CoreError::PhantomDoesNotFit(n));
    }

    let mut volume = Volume::zeros([n, n, n], spec.voxel_mm);
    for (v, &l) in volume.data.iter_mut().zip(&labels.data) {
        *v = CLASS_INTENSITY[l as usize];
    }

    if spec.noise > 0.0 {
        let mut noise_rng = rng_for(spec.seed, "phantom.speckle", 0);
        let mut field = Volume::zeros([n, n, n], spec.voxel_mm);
        for v in &mut field.data {
            *v = noise_rng.random_range(-1.0..1.0f32);
        }
        // blur then rescale so the speckle keeps roughly unit amplitude
        let field = smooth_exact(&field, 0.8);
        for (v, &s) in volume.data.iter_mut().zip(&field.data) {
            *v *= 1.0 + spec.noise * 2.5 * s;
        }
    }

    if spec.bias > 0.0 {
        let mut bias_rng = rng_for(spec.seed, "phantom.bias", 0);
        let c: [f32; 6] = [0; 6].map(|_| bias_rng.random_range(-1.0..1.0f32));
        let mut idx = 0usize;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let u = (z as f32 + 0.5) * inv - 0.5;
                    let v = (y as f32 + 0.5) * inv - 0.5;
                    let w = (x as f32 + 0.5) * inv - 0.5;
                    let poly =
                        c[0] * u + c[1] * v + c[2] * w + c[3] * u * v + c[4] * v * w
                            + c[5] * u * w;
                    volume.data[idx] *= 1.0 + spec.bias * 0.75 * poly;
                    idx += 1;
                }
            }
        }
    }

    for v in &mut volume.data {
        *v = v.max(0.0);
    }
    Ok((volume, labels))
}

/// Cohort-averaged reference: mean intensity, per-voxel label
/// frequencies, and class-ratio proportions per growth bin.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub dims: [usize; 3],
    pub num_classes: usize,
    pub mean_intensity: Volume,
    /// Per-voxel class frequencies, class-major: class c occupies
    /// `[c * voxels, (c + 1) * voxels)`.
    pub label_freq: Vec<f32>,
    pub growth_bins: usize,
    /// Raw per-bin class proportions (argmax voxel fractions); `None` for
    /// bins with no cohort members.
    pub bin_tau: Vec<Option<Vec<f32>>>,
    pub bin_counts: Vec<usize>,
}

impl Atlas {
    pub fn bin_of(&self, growth: f32) -> usize {
        ((growth * self.growth_bins as f32) as usize).min(self.growth_bins - 1)
    }

    /// Global argmax label map (ties resolve to the lower class).
    pub fn argmax_labels(&self) -> LabelMap {
        let voxels = self.dims[0] * self.dims[1] * self.dims[2];
        let mut labels = LabelMap::zeros(self.dims, self.mean_intensity.voxel_mm);
        for k in 0..voxels {
            labels.data[k] = argmax_class(&self.label_freq, self.num_classes, voxels, k);
        }
        labels
    }
}

fn argmax_class(freq: &[f32], num_classes: usize, voxels: usize, k: usize) -> u8 {
    let mut best = freq[k];
    let mut arg = 0u8;
    for c in 1..num_classes {
        let f = freq[c * voxels + k];
        if f > best {
            best = f;
            arg = c as u8;
        }
    }
    arg
}

/// Voxelwise averaging over a pre-aligned cohort of (volume, labels,
/// growth) triples.
pub fn build_atlas(cohort: &[(Volume, LabelMap, f32)], growth_bins: usize) -> Result<Atlas> {
    if cohort.is_empty() {
        return Err(CoreError::InvalidConfig("empty atlas cohort".into()));
    }
    if growth_bins == 0 {
        return Err(CoreError::InvalidConfig("growth_bins must be positive".into()));
    }
    let dims = cohort[0].0.dims;
    let voxels = dims[0] * dims[1] * dims[2];
    let mut num_classes = 2usize;
    for (v, l, g) in cohort {
        if v.dims != dims || l.dims != dims {
            return Err(CoreError::ShapeMismatch(format!(
                "atlas cohort mixes dims {:?} and {:?}",
                dims, v.dims
            )));
        }
        if !(0.0..=1.0).contains(g) {
            return Err(CoreError::InvalidConfig(format!(
                "growth {g} outside [0, 1]"
            )));
        }
        let max = l.data.iter().copied().max().unwrap_or(0) as usize + 1;
        num_classes = num_classes.max(max);
    }

    let mut mean = vec![0.0f64; voxels];
    let mut freq = vec![0.0f64; num_classes * voxels];
    for (v, l, _) in cohort {
        for k in 0..voxels {
            mean[k] += v.data[k] as f64;
            freq[l.data[k] as usize * voxels + k] += 1.0;
        }
    }
    let inv = 1.0 / cohort.len() as f64;
    let mean_intensity = Volume {
        dims,
        voxel_mm: cohort[0].0.voxel_mm,
        data: mean.iter().map(|&v| (v * inv) as f32).collect(),
    };
    let label_freq: Vec<f32> = freq.iter().map(|&v| (v * inv) as f32).collect();

    // Per-bin argmax label maps over the bin members only.
    let mut bin_tau = vec![None; growth_bins];
    let mut bin_counts = vec![0usize; growth_bins];
    for bin in 0..growth_bins {
        let members: Vec<&(Volume, LabelMap, f32)> = cohort
            .iter()
            .filter(|(_, _, g)| {
                ((g * growth_bins as f32) as usize).min(growth_bins - 1) == bin
            })
            .collect();
        bin_counts[bin] = members.len();
        if members.is_empty() {
            continue;
        }
        let mut bin_freq = vec![0.0f32; num_classes * voxels];
        for (_, l, _) in &members {
            for k in 0..voxels {
                bin_freq[l.data[k] as usize * voxels + k] += 1.0;
            }
        }
        let mut counts = vec![0u64; num_classes];
        for k in 0..voxels {
            counts[argmax_class(&bin_freq, num_classes, voxels, k) as usize] += 1;
        }
        bin_tau[bin] = Some(
            counts
                .iter()
                .map(|&c| c as f32 / voxels as f32)
                .collect(),
        );
    }

    Ok(Atlas {
        dims,
        num_classes,
        mean_intensity,
        label_freq,
        growth_bins,
        bin_tau,
        bin_counts,
    })
}

/// Floored, renormalized class-ratio prior for one growth bin.
pub fn class_ratio_prior(atlas: &Atlas, growth_bin: usize) -> Result<ClassRatioPrior> {
    let raw = atlas
        .bin_tau
        .get(growth_bin)
        .ok_or_else(|| {
            CoreError::InvalidConfig(format!(
                "growth bin {growth_bin} out of range ({} bins)",
                atlas.growth_bins
            ))
        })?
        .as_ref()
        .ok_or_else(|| {
            CoreError::InvalidConfig(format!("growth bin {growth_bin} has no cohort members"))
        })?;
    ClassRatioPrior::new(raw)
}
