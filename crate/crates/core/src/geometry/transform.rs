use nalgebra::{Matrix3, Vector3, Vector6};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this rotation angle (radians) the exponential map uses its series expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Orthonormality drift tolerated before a composed rotation is re-projected onto SO(3).
const ORTHO_DRIFT: f64 = 1e-12;

/// Proper rigid motion `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally), no translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let twist = Twist::new(axis.normalize() * angle, Vec3::zeros());
        se3_exp(&twist)
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut out = RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        if out.orthonormality_error() > ORTHO_DRIFT {
            out.rotation = orthonormalize(&out.rotation);
        }
        out
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Largest element of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).amax()
    }

    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation)
            .amax()
            .max((self.translation - other.translation).amax())
    }
}

/// Nearest rotation matrix (in Frobenius norm) to `m`, with determinant +1.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Minimal se(3) coordinates: rotational part (radians) then translational part (meters).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Twist {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl Twist {
    pub fn new(rotation: Vec3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Packs as `[ω; v]`.
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rotation: Vec3::new(v[0], v[1], v[2]),
            translation: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let (w, v) = (self.rotation, self.translation);
        Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;

    fn neg(self) -> Twist {
        Twist {
            rotation: -self.rotation,
            translation: -self.translation,
        }
    }
}

#[inline]
pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// SE(3) exponential map: Rodrigues for the rotation, the left Jacobian for the translation.
pub fn se3_exp(xi: &Twist) -> RigidTransform {
    let w = xi.rotation;
    let theta = w.norm();
    let k = skew(&w);
    let k2 = k * k;
    let (a, b, c) = if theta < SMALL_ANGLE {
        // sin θ/θ, (1 − cos θ)/θ², (θ − sin θ)/θ³ to leading order.
        (
            1.0 - theta * theta / 6.0,
            0.5 - theta * theta / 24.0,
            1.0 / 6.0 - theta * theta / 120.0,
        )
    } else {
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    let rotation = Mat3::identity() + k * a + k2 * b;
    let left_jacobian = Mat3::identity() + k * b + k2 * c;
    RigidTransform {
        rotation,
        translation: left_jacobian * xi.translation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn exp_of_zero_is_exact_identity() {
        assert_eq!(se3_exp(&Twist::zero()), RigidTransform::identity());
    }

    #[test]
    fn exp_of_pure_translation() {
        let t = se3_exp(&Twist::new(Vec3::zeros(), Vec3::new(0.1, 0.0, 0.0)));
        assert_eq!(t.rotation, Mat3::identity());
        assert!((t.translation - Vec3::new(0.1, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = se3_exp(&Twist::new(Vec3::new(0.0, 0.0, FRAC_PI_2), Vec3::zeros()));
        let p = t.apply(&Vec3::new(1.0, 0.0, 0.0));
        assert!((p - Vec3::new(0.0, 1.0, 0.0)).amax() < 1e-9);
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let v = Vec3::new(0.3, -0.2, 0.5);
        let below = se3_exp(&Twist::new(Vec3::new(0.0, 0.0, 0.9e-8), v));
        let above = se3_exp(&Twist::new(Vec3::new(0.0, 0.0, 1.1e-8), v));
        // the arguments differ by 2e-9 rad; anything beyond that first-order change is a jump
        assert!(below.max_abs_diff(&above) < 2e-9);
    }

    #[test]
    fn long_composition_chain_stays_orthonormal() {
        let step = se3_exp(&Twist::new(
            Vec3::new(0.013, -0.021, 0.007),
            Vec3::new(0.01, 0.0, -0.02),
        ));
        let mut acc = RigidTransform::identity();
        for _ in 0..1000 {
            acc = acc.compose(&step);
            assert!(acc.orthonormality_error() < 1e-9);
            assert!((acc.rotation.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn orthonormalize_recovers_rotation() {
        let r = se3_exp(&Twist::new(Vec3::new(0.4, 0.1, -0.3), Vec3::zeros())).rotation;
        let noisy = r + Mat3::from_element(1e-4);
        let fixed = orthonormalize(&noisy);
        assert!((fixed.transpose() * fixed - Mat3::identity()).amax() < 1e-12);
        assert!((fixed - r).amax() < 1e-3);
    }

    fn twist_strategy(bound: f64) -> impl Strategy<Value = Twist> {
        prop::array::uniform6(-bound..bound).prop_map(move |a| {
            let tw = Twist::new(Vec3::new(a[0], a[1], a[2]), Vec3::new(a[3], a[4], a[5]));
            // keep |xi| ≤ bound
            let n = tw.norm();
            if n > bound {
                let s = bound / n;
                Twist::new(tw.rotation * s, tw.translation * s)
            } else {
                tw
            }
        })
    }

    proptest! {
        #[test]
        fn exp_of_negated_twist_is_inverse(xi in twist_strategy(1.0)) {
            let a = se3_exp(&-xi);
            let b = se3_exp(&xi).inverse();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }

        #[test]
        fn compose_with_inverse_is_identity(xi in twist_strategy(3.0)) {
            let t = se3_exp(&xi);
            prop_assert!(t.compose(&t.inverse()).max_abs_diff(&RigidTransform::identity()) < 1e-9);
        }

        #[test]
        fn composition_is_associative(a in twist_strategy(2.0), b in twist_strategy(2.0), c in twist_strategy(2.0)) {
            let (a, b, c) = (se3_exp(&a), se3_exp(&b), se3_exp(&c));
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }
    }
}
