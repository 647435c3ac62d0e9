//! Small numeric helpers: activations, quaternions and their backward passes.
//!
//! Quaternions are stored unnormalized (w, x, y, z) so that optimizers can
//! treat them as plain 4-vectors; every consumer normalizes first and the
//! backward passes chain through that normalization.

use nalgebra::{Matrix3, Vector3};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// d sigmoid / dx expressed through the activated value.
pub fn sigmoid_grad_from_value(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Inverse sigmoid with the logit clamped to [-50, 50] so that opacity 1.0
/// round-trips to exactly 1.0 in f64 without producing infinities.
pub fn logit_clamped(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if p <= 0.0 {
        return -50.0;
    }
    if p >= 1.0 {
        return 50.0;
    }
    (p / (1.0 - p)).ln().clamp(-50.0, 50.0)
}

pub fn lerp(a: f64, b: f64, u: f64) -> f64 {
    (1.0 - u) * a + u * b
}

/// Nearest-rank percentile of an unsorted slice; `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Quaternion as (w, x, y, z). Not kept normalized; see module docs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (angle * 0.5).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn scaled(&self, c: f64) -> Quat {
        Quat::new(self.w * c, self.x * c, self.y * c, self.z * c)
    }

    pub fn add(&self, o: &Quat) -> Quat {
        Quat::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn neg(&self) -> Quat {
        self.scaled(-1.0)
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        assert!(n > 0.0, "cannot normalize zero quaternion");
        self.scaled(1.0 / n)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let q = self.normalized();
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        Matrix3::new(
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

    /// Rotate a vector by the normalized quaternion.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * v
    }
}

/// Backward through q̂ = q/|q|: maps a gradient w.r.t. the unit quaternion to
/// a gradient w.r.t. the raw one.
pub fn quat_normalize_backward(raw: &Quat, grad_unit: &Quat) -> Quat {
    let n = raw.norm();
    let unit = raw.scaled(1.0 / n);
    let proj = unit.dot(grad_unit);
    grad_unit.add(&unit.scaled(-proj)).scaled(1.0 / n)
}

/// Backward of `rotation_matrix` at a **unit** quaternion: accumulates
/// dL/dq_unit from dL/dR. Chain `quat_normalize_backward` afterwards for raw
/// parameters.
pub fn rotation_matrix_backward(unit: &Quat, grad_r: &Matrix3<f64>) -> Quat {
    let (w, x, y, z) = (unit.w, unit.x, unit.y, unit.z);
    let g = grad_r;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)]
            + z * g[(0, 2)]
            + y * g[(1, 0)]
            + (-2.0 * x) * g[(1, 1)]
            + (-w) * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            + (-2.0 * x) * g[(2, 2)]);
    let dy = 2.0
        * ((-2.0 * y) * g[(0, 0)]
            + x * g[(0, 1)]
            + w * g[(0, 2)]
            + x * g[(1, 0)]
            + z * g[(1, 2)]
            + (-w) * g[(2, 0)]
            + z * g[(2, 1)]
            + (-2.0 * y) * g[(2, 2)]);
    let dz = 2.0
        * ((-2.0 * z) * g[(0, 0)]
            + (-w) * g[(0, 1)]
            + x * g[(0, 2)]
            + w * g[(1, 0)]
            + (-2.0 * z) * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Quat::new(dw, dx, dy, dz)
}

/// Below this angular separation slerp falls back to normalized lerp.
const SLERP_PARALLEL_EPS: f64 = 1e-9;

/// Spherical linear interpolation taking the shorter arc. Inputs need not be
/// normalized; the result is unit-norm.
pub fn slerp(a: &Quat, b: &Quat, u: f64) -> Quat {
    slerp_forward(a, b, u).0
}

/// Saved state for `slerp_backward`.
#[derive(Debug, Clone, Copy)]
pub struct SlerpTape {
    a_raw: Quat,
    b_raw: Quat,
    u: f64,
    flipped: bool,
}

pub fn slerp_with_tape(a: &Quat, b: &Quat, u: f64) -> (Quat, SlerpTape) {
    let (out, flipped) = slerp_forward(a, b, u);
    (
        out,
        SlerpTape {
            a_raw: *a,
            b_raw: *b,
            u,
            flipped,
        },
    )
}

fn slerp_forward(a: &Quat, b: &Quat, u: f64) -> (Quat, bool) {
    let ahat = a.normalized();
    let bhat = b.normalized();
    let dot = ahat.dot(&bhat);
    let flipped = dot < 0.0;
    let btil = if flipped { bhat.neg() } else { bhat };
    let d = dot.abs().min(1.0);
    if d > 1.0 - SLERP_PARALLEL_EPS {
        let mix = ahat.scaled(1.0 - u).add(&btil.scaled(u));
        (mix.normalized(), flipped)
    } else {
        let theta = d.acos();
        let s = theta.sin();
        let c0 = ((1.0 - u) * theta).sin() / s;
        let c1 = (u * theta).sin() / s;
        (ahat.scaled(c0).add(&btil.scaled(c1)), flipped)
    }
}

/// Gradients of slerp w.r.t. both raw input quaternions.
pub fn slerp_backward(tape: &SlerpTape, grad_out: &Quat) -> (Quat, Quat) {
    let ahat = tape.a_raw.normalized();
    let bhat = tape.b_raw.normalized();
    let btil = if tape.flipped { bhat.neg() } else { bhat };
    let d = ahat.dot(&btil).min(1.0);
    let u = tape.u;

    let (g_ahat, g_btil) = if d > 1.0 - SLERP_PARALLEL_EPS {
        // nlerp branch: out = mix / |mix|
        let mix = ahat.scaled(1.0 - u).add(&btil.scaled(u));
        let g_mix = quat_normalize_backward(&mix, grad_out);
        (g_mix.scaled(1.0 - u), g_mix.scaled(u))
    } else {
        let theta = d.acos();
        let s = theta.sin();
        let c = theta.cos();
        let c0 = ((1.0 - u) * theta).sin() / s;
        let c1 = (u * theta).sin() / s;
        let dc0_dtheta = ((1.0 - u) * ((1.0 - u) * theta).cos() * s - ((1.0 - u) * theta).sin() * c)
            / (s * s);
        let dc1_dtheta = (u * (u * theta).cos() * s - (u * theta).sin() * c) / (s * s);
        let dtheta_dd = -1.0 / s;
        let g_c0 = grad_out.dot(&ahat);
        let g_c1 = grad_out.dot(&btil);
        let g_d = (g_c0 * dc0_dtheta + g_c1 * dc1_dtheta) * dtheta_dd;
        // out = c0 âhat + c1 b̃, d = âhat·b̃
        let g_ahat = grad_out.scaled(c0).add(&btil.scaled(g_d));
        let g_btil = grad_out.scaled(c1).add(&ahat.scaled(g_d));
        (g_ahat, g_btil)
    };

    let g_bhat = if tape.flipped { g_btil.neg() } else { g_btil };
    let g_a = quat_normalize_backward(&tape.a_raw, &g_ahat);
    let g_b = quat_normalize_backward(&tape.b_raw, &g_bhat);
    (g_a, g_b)
}
