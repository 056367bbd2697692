//! Rasterizing radial polygons into 16x16 frames.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const RADII: usize = 8;
pub const SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Style {
    Outline,
    Filled,
    Textured,
}

impl Style {
    pub fn name(self) -> &'static str {
        match self {
            Style::Outline => "outline",
            Style::Filled => "filled",
            Style::Textured => "textured",
        }
    }
}

/// Star-convex outline given by radii at equally spaced angles.
pub type Prototype = [f64; RADII];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Centre in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Radius scale in pixels.
    pub scale: f64,
    pub rotation: f64,
}

fn radius_at(proto: &Prototype, angle: f64) -> f64 {
    let seg = std::f64::consts::TAU / RADII as f64;
    let a = angle.rem_euclid(std::f64::consts::TAU) / seg;
    let i = (a.floor() as usize) % RADII;
    let f = a - a.floor();
    proto[i] * (1.0 - f) + proto[(i + 1) % RADII] * f
}

/// Renders `proto` at `pose` into a single-channel frame with values in [0,1].
pub fn render<R: Rng + ?Sized>(proto: &Prototype, pose: Pose, style: Style, rng: &mut R) -> Vec<f32> {
    let mut img = vec![0f32; SIDE * SIDE];
    let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let noise = Normal::new(0.0, 0.12).expect("valid std");
    for y in 0..SIDE {
        for x in 0..SIDE {
            let dx = x as f64 + 0.5 - pose.cx;
            let dy = y as f64 + 0.5 - pose.cy;
            let d = (dx * dx + dy * dy).sqrt();
            let edge = pose.scale * radius_at(proto, dy.atan2(dx) - pose.rotation);
            let v = match style {
                Style::Outline => 1.0 - (d - edge).abs(),
                Style::Filled => edge - d + 0.5,
                Style::Textured => {
                    let inside = (edge - d + 0.5).clamp(0.0, 1.0);
                    let stripes = 0.6 + 0.4 * (0.9 * (x as f64 + y as f64) + phase).sin();
                    inside * stripes + noise.sample(rng)
                }
            };
            img[y * SIDE + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn circle_is_filled_around_centre() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = Pose { cx: 8.0, cy: 8.0, scale: 4.0, rotation: 0.0 };
        let img = render(&[1.0; RADII], pose, Style::Filled, &mut rng);
        assert_eq!(img[8 * SIDE + 8], 1.0);
        assert_eq!(img[0], 0.0);
        let outline = render(&[1.0; RADII], pose, Style::Outline, &mut rng);
        assert_eq!(outline[8 * SIDE + 8], 0.0);
        assert!(outline.iter().all(|v| (0.0..=1.0).contains(v)));
        let tex = render(&[1.0; RADII], pose, Style::Textured, &mut rng);
        assert!(tex.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn radius_interpolates_between_vertices() {
        let mut p = [0.5; RADII];
        p[1] = 1.0;
        let seg = std::f64::consts::TAU / RADII as f64;
        assert!((radius_at(&p, seg) - 1.0).abs() < 1e-12);
        assert!((radius_at(&p, 0.5 * seg) - 0.75).abs() < 1e-12);
        assert!((radius_at(&p, -0.5 * seg) - 0.5).abs() < 1e-12);
    }
}
