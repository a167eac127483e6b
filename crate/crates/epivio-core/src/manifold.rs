//! Quaternion algebra and SO(3) manifold helpers shared by every other module.
//!
//! One convention everywhere: Hamilton quaternions, passive, body-to-global
//! (`q` rotates body-frame vectors into the global frame), with tangent
//! increments applied on the right, `q ⊞ δθ = q ⊗ exp(δθ)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Angle below which exp/log switch to their 4th-order Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;

/// Unit quaternion with canonical sign (`w >= 0`).
///
/// Every constructor and operation renormalizes and restores the canonical
/// sign, so the unit-norm invariant holds to 1e-12 through arbitrarily long
/// compose chains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuat {
    pub fn identity() -> Self {
        UnitQuat {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Build from raw components, normalizing and canonicalizing the sign.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n2 = w * w + x * x + y * y + z * z;
        if !n2.is_finite() || n2 < 1e-24 {
            return Err(Error::InvalidQuaternion);
        }
        let inv = 1.0 / n2.sqrt();
        Ok(Self::canonical(w * inv, x * inv, y * inv, z * inv))
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        if w < 0.0 {
            UnitQuat {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            UnitQuat { w, x, y, z }
        }
    }

    /// Components already unit-norm; only the sign is fixed up.
    fn from_normalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n2 = w * w + x * x + y * y + z * z;
        let inv = 1.0 / n2.sqrt();
        Self::canonical(w * inv, x * inv, y * inv, z * inv)
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    /// Vector (imaginary) part.
    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    /// Hamilton product `self ⊗ rhs`, renormalized.
    pub fn compose(&self, rhs: &UnitQuat) -> UnitQuat {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (rhs.w, rhs.x, rhs.y, rhs.z);
        UnitQuat::from_normalized(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )
    }

    pub fn inverse(&self) -> UnitQuat {
        UnitQuat::canonical(self.w, -self.x, -self.y, -self.z)
    }

    /// Rotate a body-frame vector into the global frame.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        // q v q* expanded as v + 2 w (u × v) + 2 u × (u × v)
        let u = self.vec();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    /// Rotation matrix form; satisfies RᵀR = I and det R = +1 to 1e-12.
    pub fn rotation_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Rotation angle in [0, π] (canonical sign keeps it there).
    pub fn angle(&self) -> f64 {
        2.0 * self.vec().norm().atan2(self.w)
    }
}

/// Skew-symmetric matrix realizing the cross product: `skew(v) * u = v × u`.
///
/// Constructed from components, never by differencing, so antisymmetry is
/// bit-exact.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential map: rotation vector (rad) to unit quaternion.
pub fn so3_exp(phi: &Vec3) -> UnitQuat {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let half = 0.5 * theta;
    let (w, k) = if theta < SMALL_ANGLE {
        // sin(t/2)/t and cos(t/2) to 4th order
        let h2 = half * half;
        (
            1.0 - h2 / 2.0 + h2 * h2 / 24.0,
            0.5 * (1.0 - h2 / 6.0 + h2 * h2 / 120.0),
        )
    } else {
        (half.cos(), half.sin() / theta)
    };
    UnitQuat::from_normalized(w, k * phi.x, k * phi.y, k * phi.z)
}

/// SO(3) logarithm: unit quaternion to rotation vector with ‖phi‖ ≤ π.
pub fn so3_log(q: &UnitQuat) -> Vec3 {
    let v = q.vec();
    let vn = v.norm();
    if vn < SMALL_ANGLE {
        // theta/sin(theta/2) ≈ 2/w · (1 − vn²/(3w²) + ...) with vn = sin(theta/2)
        let s = vn / q.w();
        let k = (2.0 / q.w()) * (1.0 - s * s / 3.0 + s * s * s * s / 5.0);
        k * v
    } else {
        let theta = 2.0 * vn.atan2(q.w());
        (theta / vn) * v
    }
}

/// SO(3) right Jacobian `Jr(phi)`: `exp(phi + d) ≈ exp(phi) ⊗ exp(Jr(phi) d)`.
pub fn so3_right_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let px = skew(phi);
    let (a, b) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() - a * px + b * (px * px)
}

/// Inverse of the SO(3) right Jacobian, `Jr⁻¹(phi)`: maps a right tangent
/// perturbation of `exp(phi)` to the change of `phi` itself.
pub fn so3_right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let px = skew(phi);
    let k = if theta < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Mat3::identity() + 0.5 * px + k * (px * px)
}

/// Right-tangent retraction `q ⊞ δθ = q ⊗ exp(δθ)`.
pub fn boxplus(q: &UnitQuat, dtheta: &Vec3) -> UnitQuat {
    q.compose(&so3_exp(dtheta))
}

/// Right-tangent difference: `boxminus(a, b)` is the δθ with `b ⊞ δθ = a`.
pub fn boxminus(a: &UnitQuat, b: &UnitQuat) -> Vec3 {
    so3_log(&b.inverse().compose(a))
}
