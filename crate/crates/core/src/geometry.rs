//! Planar rigid transforms.
//!
//! Poses compose as `a ⊕ b = (t_a + R(θ_a) t_b, θ_a + θ_b)` and every
//! constructor wraps the heading into (−π, π].

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

/// Wrap an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// A planar rotation stored as its angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot2 {
    angle: f64,
}

impl Rot2 {
    pub fn new(angle: f64) -> Self {
        Self { angle: wrap_angle(angle) }
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        rot(self.angle)
    }

    pub fn rotate(&self, v: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.angle.sin_cos();
        Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn inverse(&self) -> Self {
        Self::new(-self.angle)
    }
}

/// Rotation matrix for angle `a`.
pub fn rot(a: f64) -> Matrix2<f64> {
    let (s, c) = a.sin_cos();
    Matrix2::new(c, -s, s, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose2D {
    pub const IDENTITY: Pose2D = Pose2D { x: 0.0, y: 0.0, theta: 0.0 };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Rot2 {
        Rot2::new(self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn oplus(&self, b: &Pose2D) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(
            self.x + c * b.x - s * b.y,
            self.y + s * b.x + c * b.y,
            self.theta + b.theta,
        )
    }

    pub fn ominus(&self) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)
    }

    /// Pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (other.x - self.x, other.y - self.y);
        Pose2D::new(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)
    }

    /// Map a point from this frame into the parent frame.
    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// Componentwise difference with the heading difference wrapped.
    pub fn delta(&self, other: &Pose2D) -> [f64; 3] {
        [self.x - other.x, self.y - other.y, wrap_angle(self.theta - other.theta)]
    }
}

pub fn oplus(a: &Pose2D, b: &Pose2D) -> Pose2D {
    a.oplus(b)
}

pub fn ominus(a: &Pose2D) -> Pose2D {
    a.ominus()
}

pub fn relative_pose(a: &Pose2D, b: &Pose2D) -> Pose2D {
    a.between(b)
}
