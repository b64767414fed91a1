use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 7;

/// Appearance parameters of one imaging domain. Class-defining geometry is
/// not part of the domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainParams {
    pub background_mean: f32,
    /// Amplitude of the smooth background illumination gradient.
    pub background_std: f32,
    /// Per-channel multiplier on the background.
    pub tint: [f32; 3],
    /// Particle type A: elongated striated flakes.
    pub flake_color: [f32; 3],
    /// Particle type B: dark irregular patches.
    pub patch_color: [f32; 3],
    /// Particle type C: bright round spheres.
    pub sphere_color: [f32; 3],
    /// Contrast of the stripe texture on flakes.
    pub texture_amp: f32,
    pub noise_std: f32,
}

impl Default for DomainParams {
    fn default() -> Self {
        Self {
            background_mean: 0.35,
            background_std: 0.05,
            tint: [1.0, 1.0, 1.0],
            flake_color: [0.85, 0.45, 0.15],
            patch_color: [0.08, 0.08, 0.10],
            sphere_color: [0.95, 0.95, 0.90],
            texture_amp: 0.15,
            noise_std: 0.03,
        }
    }
}

/// Differences applied at full shift (`shift_magnitude = 1`).
pub fn max_domain_delta() -> DomainParams {
    DomainParams {
        background_mean: 0.25,
        background_std: 0.08,
        tint: [-0.30, 0.10, 0.35],
        flake_color: [-0.35, 0.25, 0.45],
        patch_color: [0.22, 0.18, 0.08],
        sphere_color: [-0.30, -0.05, 0.05],
        texture_amp: 0.15,
        noise_std: 0.06,
    }
}

impl DomainParams {
    fn shifted(&self, delta: &DomainParams, t: f32) -> Self {
        let add3 = |a: [f32; 3], d: [f32; 3]| [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]];
        Self {
            background_mean: self.background_mean + t * delta.background_mean,
            background_std: self.background_std + t * delta.background_std,
            tint: add3(self.tint, delta.tint),
            flake_color: add3(self.flake_color, delta.flake_color),
            patch_color: add3(self.patch_color, delta.patch_color),
            sphere_color: add3(self.sphere_color, delta.sphere_color),
            texture_amp: self.texture_amp + t * delta.texture_amp,
            noise_std: self.noise_std + t * delta.noise_std,
        }
    }
}

/// A generative task: domain appearance, particle size range and image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub domain: DomainParams,
    /// Particle radius range as a fraction of the image side.
    pub size_range: (f32, f32),
    pub image_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            domain: DomainParams::default(),
            size_range: (0.09, 0.15),
            image_size: 32,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} < 16", self.image_size)));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo < hi && hi <= 0.5) {
            return Err(Error::Config(format!("size_range ({lo}, {hi}) must satisfy 0 < lo < hi <= 0.5")));
        }
        let d = &self.domain;
        let scalars = [d.background_mean, d.background_std, d.texture_amp, d.noise_std];
        let colors = d.tint.iter().chain(&d.flake_color).chain(&d.patch_color).chain(&d.sphere_color);
        if scalars.iter().chain(colors).any(|v| !v.is_finite()) {
            return Err(Error::Config("domain parameters must be finite".into()));
        }
        if d.background_std < 0.0 || d.noise_std < 0.0 || d.texture_amp < 0.0 {
            return Err(Error::Config("domain spreads must be non-negative".into()));
        }
        Ok(())
    }
}

/// Source and target tasks sharing geometry (`seed`, sizes) whose appearance
/// differs by `shift_magnitude` times [`max_domain_delta`].
pub fn make_source_target_pair(shift_magnitude: f32, seed: u64) -> (TaskSpec, TaskSpec) {
    make_source_target_pair_for(&TaskSpec { seed, ..TaskSpec::default() }, shift_magnitude)
}

/// Same as [`make_source_target_pair`], starting from an explicit source.
pub fn make_source_target_pair_for(source: &TaskSpec, shift_magnitude: f32) -> (TaskSpec, TaskSpec) {
    let t = shift_magnitude.clamp(0.0, 1.0);
    let target = TaskSpec {
        domain: source.domain.shifted(&max_domain_delta(), t),
        ..source.clone()
    };
    (source.clone(), target)
}
