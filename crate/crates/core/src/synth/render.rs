//! Procedural particle images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::TaskSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Particle {
    Flake,
    Patch,
    Sphere,
}

/// Particle types present in each class: 0=background, 1=A, 2=B, 3=C,
/// 4=A+B, 5=A+C, 6=B+C.
pub fn class_particles(label: usize) -> &'static [Particle] {
    use Particle::*;
    match label {
        0 => &[],
        1 => &[Flake],
        2 => &[Patch],
        3 => &[Sphere],
        4 => &[Flake, Patch],
        5 => &[Flake, Sphere],
        6 => &[Patch, Sphere],
        _ => panic!("label {label} outside 0..7"),
    }
}

/// RNG for sample `index` of a given stream.
pub(crate) fn sample_rng(spec_seed: u64, seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec_seed ^ seed.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(stream);
    rng
}

struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn paint(&mut self, inside: impl Fn(f32, f32) -> Option<[f32; 3]>) {
        for y in 0..self.size {
            for x in 0..self.size {
                if let Some(c) = inside(x as f32 + 0.5, y as f32 + 0.5) {
                    self.px[y * self.size + x] = c;
                }
            }
        }
    }
}

fn draw_particle(canvas: &mut Canvas, kind: Particle, spec: &TaskSpec, rng: &mut ChaCha8Rng) {
    let s = spec.image_size as f32;
    let (lo, hi) = spec.size_range;
    let r = rng.random_range(lo..hi) * s;
    let margin = r * 1.2;
    let cx = rng.random_range(margin..s - margin);
    let cy = rng.random_range(margin..s - margin);
    let d = &spec.domain;
    match kind {
        Particle::Flake => {
            let angle = rng.random_range(0.0..std::f32::consts::PI);
            let (sin, cos) = angle.sin_cos();
            let (major, minor) = (1.8 * r, 0.6 * r);
            let period = rng.random_range(0.5..0.8) * r;
            let (col, amp) = (d.flake_color, d.texture_amp);
            canvas.paint(|x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if (u / major).powi(2) + (v / minor).powi(2) > 1.0 {
                    return None;
                }
                let stripe = 1.0 + amp * (std::f32::consts::TAU * u / period).sin();
                Some([col[0] * stripe, col[1] * stripe, col[2] * stripe])
            });
        }
        Particle::Patch => {
            let lobes: Vec<(f32, f32, f32)> = (0..3)
                .map(|_| {
                    let a = rng.random_range(0.0..std::f32::consts::TAU);
                    let off = rng.random_range(0.2..0.6) * r;
                    (cx + off * a.cos(), cy + off * a.sin(), rng.random_range(0.55..0.8) * r)
                })
                .collect();
            let col = d.patch_color;
            canvas.paint(|x, y| {
                lobes
                    .iter()
                    .any(|&(lx, ly, lr)| (x - lx).powi(2) + (y - ly).powi(2) <= lr * lr)
                    .then_some(col)
            });
        }
        Particle::Sphere => {
            let rad = 0.8 * r;
            let col = d.sphere_color;
            canvas.paint(|x, y| {
                let q = ((x - cx).powi(2) + (y - cy).powi(2)) / (rad * rad);
                if q > 1.0 {
                    return None;
                }
                let shade = 0.8 + 0.3 * (1.0 - q);
                Some([col[0] * shade, col[1] * shade, col[2] * shade])
            });
        }
    }
}

/// Renders one `[3, S, S]` image in `[0, 1]` for `label`.
pub fn render_sample(spec: &TaskSpec, label: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let size = spec.image_size;
    let d = &spec.domain;
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let level = d.background_mean + rng.random_range(-0.5f32..0.5) * d.background_std;
    let mut canvas = Canvas { size, px: vec![[0.0; 3]; size * size] };
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 / size as f32 - 0.5) * gx + (y as f32 / size as f32 - 0.5) * gy;
            let v = level + 2.0 * d.background_std * u;
            canvas.px[y * size + x] = [v * d.tint[0], v * d.tint[1], v * d.tint[2]];
        }
    }
    for &kind in class_particles(label) {
        let count = rng.random_range(1..=2);
        for _ in 0..count {
            draw_particle(&mut canvas, kind, spec, rng);
        }
    }
    let noise = Normal::new(0.0f32, d.noise_std.max(0.0)).expect("non-negative std");
    let mut data = vec![0.0f32; 3 * size * size];
    for (i, p) in canvas.px.iter().enumerate() {
        for c in 0..3 {
            data[c * size * size + i] = (p[c] + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, size, size], data).expect("canvas shape")
}
