//! Fan-beam acquisition geometry.
//!
//! Equiangular detector on a full circular orbit. Pixel `(row, col)` sits at
//! world coordinates `x = (col - W/2)·p`, `y = (H/2 - row)·p` so that pixel
//! `(H/2, W/2)` is the isocenter. For view angle `θ` the source is at
//! `R·(sin θ, cos θ)` and detector bin `i` receives the ray at fan angle
//! `(i - D/2)·γ_d` from the central ray.

mod fbp;
mod project;

pub use fbp::{build_index_table, classic_fbp, ramp_filter_matrix, BackprojIndexTable};
pub(crate) use fbp::backproject_table;
pub use project::{backproject_adjoint, forward_project};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanBeamGeometry {
    pub views: usize,
    pub detectors: usize,
    /// Angular width of one detector bin, radians.
    pub detector_interval: f64,
    /// Source-to-isocenter distance, same units as `pixel_size`.
    pub source_radius: f64,
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
}

impl FanBeamGeometry {
    /// Geometry with the default detector layout: `D = ceil(1.5·W)` bins,
    /// source at twice the image width, fan covering the image diagonal.
    pub fn new(views: usize, width: usize, height: usize) -> Result<Self> {
        let pixel_size = 1.0;
        let detectors = (1.5 * width as f64).ceil() as usize;
        let source_radius = 2.0 * width.max(height) as f64 * pixel_size;
        let half_diag = 0.5 * ((width * width + height * height) as f64).sqrt() * pixel_size;
        let half_fan = ((half_diag + pixel_size) / source_radius).min(0.999).asin();
        let g = FanBeamGeometry {
            views,
            detectors,
            detector_interval: 2.0 * half_fan / detectors as f64,
            source_radius,
            width,
            height,
            pixel_size,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { section: "geometry".into(), msg });
        if self.views < 2 {
            return bad(format!("views must be >= 2, got {}", self.views));
        }
        if self.detectors < 2 {
            return bad(format!("detectors must be >= 2, got {}", self.detectors));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.pixel_size > 0.0) || !(self.detector_interval > 0.0) {
            return bad("pixel_size and detector_interval must be positive".into());
        }
        if self.source_radius <= 0.5 * self.width.max(self.height) as f64 * self.pixel_size {
            return bad("source must lie outside the image".into());
        }
        if self.detector_interval * self.detectors as f64 >= std::f64::consts::PI {
            return bad("fan angle must be below 180 degrees".into());
        }
        Ok(())
    }

    pub fn theta(&self, j: usize) -> f64 {
        std::f64::consts::TAU * j as f64 / self.views as f64
    }

    pub fn thetas(&self) -> Vec<f64> {
        (0..self.views).map(|j| self.theta(j)).collect()
    }

    /// Angle of view `j` in degrees.
    pub fn angle_deg(&self, j: usize) -> f64 {
        360.0 * j as f64 / self.views as f64
    }

    /// Fan angle of detector bin `i`.
    pub fn gamma(&self, i: usize) -> f64 {
        (i as f64 - (self.detectors / 2) as f64) * self.detector_interval
    }

    /// Number of sinogram entries, `V·D`.
    pub fn sino_len(&self) -> usize {
        self.views * self.detectors
    }

    /// Number of pixels, `W·H`.
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 - (self.width / 2) as f64) * self.pixel_size,
            ((self.height / 2) as f64 - row as f64) * self.pixel_size,
        )
    }

    /// Coordinates `(a, b)` of world point `(x, y)` in the frame of view `θ`:
    /// `a` across the central ray, `b` toward the source.
    pub fn view_frame(theta: f64, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = theta.sin_cos();
        (x * c - y * s, x * s + y * c)
    }

    /// Same geometry with a different number of views.
    pub fn with_views(&self, views: usize) -> Self {
        FanBeamGeometry {
            views,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_image() {
        let g = FanBeamGeometry::new(90, 64, 64).unwrap();
        assert_eq!(g.detectors, 96);
        let half_diag = 32.0 * 2f64.sqrt();
        let fan_edge = (g.detectors / 2) as f64 * g.detector_interval;
        assert!(g.source_radius * fan_edge.sin() > half_diag);
        assert_eq!(g.theta(0), 0.0);
        assert!((1..g.views).all(|j| g.theta(j) > g.theta(j - 1)));
        assert!(g.theta(g.views - 1) < std::f64::consts::TAU);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(FanBeamGeometry::new(1, 16, 16).is_err());
        let mut g = FanBeamGeometry::new(8, 16, 16).unwrap();
        g.source_radius = 7.0;
        assert!(g.validate().is_err());
    }
}
