//! Explicit scene representation: static/dynamic decomposition, anchor-based
//! temporal parameterization, and gradient-statistics classification.

use crate::error::{Error, Result};
use crate::math::{self, Quat, SlerpTape};
use nalgebra::{Matrix3, Vector3};

/// One anisotropic 3D Gaussian. Scale is stored log-parameterized and opacity
/// as a logit; `rotation` is kept unit-norm after every optimizer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    /// Build from activated values (positive scale, opacity in [0,1]).
    pub fn new(
        position: Vector3<f64>,
        rotation: Quat,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        assert!(
            scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0,
            "scale components must be positive"
        );
        GaussianPrimitive {
            position,
            rotation: rotation.normalized(),
            log_scale: scale.map(f64::ln),
            opacity_logit: math::logit_clamped(opacity),
            color,
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        math::sigmoid(self.opacity_logit)
    }

    /// Σ = R diag(s²) Rᵀ of the normalized rotation.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.rotation_matrix();
        let s = self.scale();
        let d = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        r * d * r.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.is_finite()
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// Gradient of a loss w.r.t. one primitive's stored parameters.
#[derive(Debug, Clone, Copy)]
pub struct PrimitiveGrads {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl PrimitiveGrads {
    pub fn zero() -> Self {
        PrimitiveGrads {
            position: Vector3::zeros(),
            rotation: Quat::new(0.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        }
    }

    pub fn add_assign(&mut self, o: &PrimitiveGrads) {
        self.position += o.position;
        self.rotation = self.rotation.add(&o.rotation);
        self.log_scale += o.log_scale;
        self.opacity_logit += o.opacity_logit;
        self.color += o.color;
    }

    pub fn scaled(&self, c: f64) -> Self {
        PrimitiveGrads {
            position: self.position * c,
            rotation: self.rotation.scaled(c),
            log_scale: self.log_scale * c,
            opacity_logit: self.opacity_logit * c,
            color: self.color * c,
        }
    }
}

/// Time-invariant field G_s.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaticField {
    pub primitives: Vec<GaussianPrimitive>,
    /// Stable identity per primitive, preserved through pruning and edits.
    pub ids: Vec<u64>,
}

/// Anchor-parameterized dynamic field G_d: explicit states at nodal
/// timestamps, interpolated in between. Every anchor holds the same
/// primitives (by id) in the same order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorTrack {
    pub anchor_times: Vec<f64>,
    pub anchor_states: Vec<Vec<GaussianPrimitive>>,
    pub ids: Vec<u64>,
}

impl AnchorTrack {
    pub fn new(anchor_times: Vec<f64>) -> Self {
        assert!(
            anchor_times.windows(2).all(|w| w[0] < w[1]),
            "anchor times must be strictly increasing"
        );
        let states = vec![Vec::new(); anchor_times.len()];
        AnchorTrack {
            anchor_times,
            anchor_states: states,
            ids: Vec::new(),
        }
    }

    pub fn primitive_count(&self) -> usize {
        self.ids.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_times.len()
    }

    /// Append one primitive, replicated across all anchors (zero-motion
    /// initialization).
    pub fn push_replicated(&mut self, prim: GaussianPrimitive, id: u64) {
        assert!(!self.anchor_times.is_empty(), "track has no anchors");
        for state in &mut self.anchor_states {
            state.push(prim);
        }
        self.ids.push(id);
    }

    pub fn remove_indices(&mut self, sorted_indices: &[usize]) {
        for &i in sorted_indices.iter().rev() {
            for state in &mut self.anchor_states {
                state.remove(i);
            }
            self.ids.remove(i);
        }
    }
}

/// Tape for backpropagating through `interpolate_dynamic`.
#[derive(Debug, Clone)]
pub struct InterpTape {
    /// Left bracketing anchor index.
    pub k: usize,
    /// Normalized position in [0,1] inside the bracket.
    pub u: f64,
    /// Some(k) when t hit anchor k exactly and states were copied bitwise.
    pub exact_anchor: Option<usize>,
    slerp_tapes: Vec<SlerpTape>,
}

impl InterpTape {
    /// Distribute gradients on the interpolated primitives back to the two
    /// bracketing anchor states. Returns (grads at anchor k, grads at k+1);
    /// the second is empty for exact anchor hits.
    pub fn backward(&self, grads: &[PrimitiveGrads]) -> (Vec<PrimitiveGrads>, Vec<PrimitiveGrads>) {
        if self.exact_anchor.is_some() {
            return (grads.to_vec(), Vec::new());
        }
        let u = self.u;
        let mut ga = Vec::with_capacity(grads.len());
        let mut gb = Vec::with_capacity(grads.len());
        for (i, g) in grads.iter().enumerate() {
            let (rot_a, rot_b) = math::slerp_backward(&self.slerp_tapes[i], &g.rotation);
            let mut a = g.scaled(1.0 - u);
            a.rotation = rot_a;
            let mut b = g.scaled(u);
            b.rotation = rot_b;
            ga.push(a);
            gb.push(b);
        }
        (ga, gb)
    }
}

/// Φ: linear in position/color/opacity-logit, log-linear in scale, slerp in
/// rotation. Exact (bitwise) at anchor timestamps.
pub fn interpolate_dynamic(track: &AnchorTrack, t: f64) -> Result<Vec<GaussianPrimitive>> {
    interpolate_dynamic_with_tape(track, t).map(|(prims, _)| prims)
}

pub fn interpolate_dynamic_with_tape(
    track: &AnchorTrack,
    t: f64,
) -> Result<(Vec<GaussianPrimitive>, InterpTape)> {
    if track.anchor_times.is_empty() {
        return Err(Error::EmptyTrack);
    }
    let t0 = track.anchor_times[0];
    let tk = *track.anchor_times.last().unwrap();
    if t < t0 || t > tk {
        return Err(Error::TimeOutOfRange {
            t,
            min: t0,
            max: tk,
        });
    }
    // exact anchor hit: bitwise copy
    if let Some(k) = track.anchor_times.iter().position(|&a| a == t) {
        return Ok((
            track.anchor_states[k].clone(),
            InterpTape {
                k,
                u: 0.0,
                exact_anchor: Some(k),
                slerp_tapes: Vec::new(),
            },
        ));
    }
    let k = track
        .anchor_times
        .partition_point(|&a| a < t)
        .saturating_sub(1);
    let (ta, tb) = (track.anchor_times[k], track.anchor_times[k + 1]);
    let u = (t - ta) / (tb - ta);
    let state_a = &track.anchor_states[k];
    let state_b = &track.anchor_states[k + 1];
    let mut prims = Vec::with_capacity(state_a.len());
    let mut tapes = Vec::with_capacity(state_a.len());
    for (a, b) in state_a.iter().zip(state_b) {
        let (rot, tape) = math::slerp_with_tape(&a.rotation, &b.rotation, u);
        prims.push(GaussianPrimitive {
            position: a.position.lerp(&b.position, u),
            rotation: rot,
            log_scale: a.log_scale.lerp(&b.log_scale, u),
            opacity_logit: math::lerp(a.opacity_logit, b.opacity_logit, u),
            color: a.color.lerp(&b.color, u),
        });
        tapes.push(tape);
    }
    Ok((
        prims,
        InterpTape {
            k,
            u,
            exact_anchor: None,
            slerp_tapes: tapes,
        },
    ))
}

/// Which field an assembled primitive came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveSource {
    Static { index: usize, id: u64 },
    Dynamic { index: usize, id: u64 },
}

impl PrimitiveSource {
    pub fn id(&self) -> u64 {
        match self {
            PrimitiveSource::Static { id, .. } | PrimitiveSource::Dynamic { id, .. } => *id,
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, PrimitiveSource::Dynamic { .. })
    }
}

/// G(t) = G_s ∪ G_d(t) with per-primitive source tags.
#[derive(Debug, Clone)]
pub struct AssembledScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub sources: Vec<PrimitiveSource>,
    pub interp_tape: Option<InterpTape>,
}

/// Static field plus anchor track, evaluable at any time in `time_range`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub static_field: StaticField,
    pub dynamic_field: AnchorTrack,
    pub time_range: (f64, f64),
    pub next_id: u64,
}

impl SceneModel {
    pub fn new(time_range: (f64, f64), anchor_times: Vec<f64>) -> Self {
        SceneModel {
            static_field: StaticField::default(),
            dynamic_field: AnchorTrack::new(anchor_times),
            time_range,
            next_id: 0,
        }
    }

    pub fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn add_static(&mut self, prim: GaussianPrimitive) -> u64 {
        let id = self.fresh_id();
        self.static_field.primitives.push(prim);
        self.static_field.ids.push(id);
        id
    }

    pub fn add_dynamic_replicated(&mut self, prim: GaussianPrimitive) -> u64 {
        let id = self.fresh_id();
        self.dynamic_field.push_replicated(prim, id);
        id
    }

    pub fn static_count(&self) -> usize {
        self.static_field.primitives.len()
    }

    pub fn dynamic_count(&self) -> usize {
        self.dynamic_field.primitive_count()
    }

    pub fn total_count(&self) -> usize {
        self.static_count() + self.dynamic_count()
    }

    pub fn assemble(&self, t: f64) -> Result<AssembledScene> {
        if t < self.time_range.0 || t > self.time_range.1 {
            return Err(Error::TimeOutOfRange {
                t,
                min: self.time_range.0,
                max: self.time_range.1,
            });
        }
        let mut primitives = self.static_field.primitives.clone();
        let mut sources: Vec<PrimitiveSource> = self
            .static_field
            .ids
            .iter()
            .enumerate()
            .map(|(index, &id)| PrimitiveSource::Static { index, id })
            .collect();
        let mut interp_tape = None;
        if self.dynamic_field.primitive_count() > 0 {
            let (dyn_prims, tape) = interpolate_dynamic_with_tape(&self.dynamic_field, t)?;
            sources.extend(
                self.dynamic_field
                    .ids
                    .iter()
                    .enumerate()
                    .map(|(index, &id)| PrimitiveSource::Dynamic { index, id }),
            );
            primitives.extend(dyn_prims);
            interp_tape = Some(tape);
        }
        Ok(AssembledScene {
            primitives,
            sources,
            interp_tape,
        })
    }

    /// Move the masked static primitives into the dynamic field, replicating
    /// the current parameters across every anchor. Returns the moved ids.
    pub fn promote_to_dynamic(&mut self, static_mask: &[bool]) -> Vec<u64> {
        assert_eq!(static_mask.len(), self.static_count());
        let mut moved = Vec::new();
        for i in (0..static_mask.len()).rev() {
            if static_mask[i] {
                let prim = self.static_field.primitives.remove(i);
                let id = self.static_field.ids.remove(i);
                self.dynamic_field.push_replicated(prim, id);
                moved.push(id);
            }
        }
        moved.reverse();
        moved
    }
}

/// Per-primitive accumulated positional-gradient statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientStats {
    pub accum_grad_norm: Vec<f64>,
    pub observation_count: Vec<u64>,
}

impl GradientStats {
    pub fn new(n: usize) -> Self {
        GradientStats {
            accum_grad_norm: vec![0.0; n],
            observation_count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.accum_grad_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accum_grad_norm.is_empty()
    }

    pub fn reset(&mut self, n: usize) {
        self.accum_grad_norm.clear();
        self.accum_grad_norm.resize(n, 0.0);
        self.observation_count.clear();
        self.observation_count.resize(n, 0);
    }

    /// Normalized per-primitive value: accumulated norm over visibility count.
    pub fn values(&self) -> Vec<f64> {
        self.accum_grad_norm
            .iter()
            .zip(&self.observation_count)
            .map(|(&a, &c)| a / (c.max(1) as f64))
            .collect()
    }
}

/// accum_grad_norm[i] += ‖grads[i]‖₂; observation_count[i] += 1 where visible.
pub fn accumulate_gradient_stats(
    stats: &mut GradientStats,
    grads: &[Vector3<f64>],
    visible: &[bool],
) -> Result<()> {
    if grads.len() != stats.len() || visible.len() != stats.len() {
        return Err(Error::ShapeMismatch(format!(
            "stats length {} vs grads {} / visible {}",
            stats.len(),
            grads.len(),
            visible.len()
        )));
    }
    for i in 0..grads.len() {
        stats.accum_grad_norm[i] += grads[i].norm();
        if visible[i] {
            stats.observation_count[i] += 1;
        }
    }
    Ok(())
}

/// mask[i] = value_i > mean + kappa·std (population std, strict inequality).
pub fn classify_dynamic(stats: &GradientStats, kappa: f64) -> Vec<bool> {
    if stats.is_empty() {
        return Vec::new();
    }
    let values = stats.values();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let threshold = mean + kappa * std;
    values.iter().map(|&v| v > threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_prim(rng: &mut ChaCha8Rng) -> GaussianPrimitive {
        GaussianPrimitive {
            position: Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ),
            rotation: Quat::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() + 0.5,
            )
            .normalized(),
            log_scale: Vector3::new(
                rng.random::<f64>() - 2.0,
                rng.random::<f64>() - 2.0,
                rng.random::<f64>() - 2.0,
            ),
            opacity_logit: rng.random::<f64>() * 2.0 - 1.0,
            color: Vector3::new(rng.random(), rng.random(), rng.random()),
        }
    }

    fn two_anchor_track(a: Vec<GaussianPrimitive>, b: Vec<GaussianPrimitive>) -> AnchorTrack {
        let n = a.len();
        AnchorTrack {
            anchor_times: vec![0.0, 1.0],
            anchor_states: vec![a, b],
            ids: (0..n as u64).collect(),
        }
    }

    #[test]
    fn endpoint_is_bitwise_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(1..4);
            let a: Vec<_> = (0..n).map(|_| rand_prim(&mut rng)).collect();
            let b: Vec<_> = (0..n).map(|_| rand_prim(&mut rng)).collect();
            let track = two_anchor_track(a.clone(), b.clone());
            let at0 = interpolate_dynamic(&track, 0.0).unwrap();
            let at1 = interpolate_dynamic(&track, 1.0).unwrap();
            assert_eq!(at0, a);
            assert_eq!(at1, b);
        }
    }

    #[test]
    fn midpoint_position_is_linear() {
        let mut a = rand_prim(&mut ChaCha8Rng::seed_from_u64(1));
        let mut b = a;
        a.position = Vector3::new(0.0, 0.0, 0.0);
        b.position = Vector3::new(2.0, 0.0, 0.0);
        let track = two_anchor_track(vec![a], vec![b]);
        let mid = interpolate_dynamic(&track, 0.5).unwrap();
        assert_eq!(mid[0].position, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn midpoint_rotation_is_slerp() {
        // identity and 90° about z -> 45° about z, unit norm
        let mut a = rand_prim(&mut ChaCha8Rng::seed_from_u64(2));
        let mut b = a;
        a.rotation = Quat::IDENTITY;
        b.rotation = Quat::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
        let track = two_anchor_track(vec![a], vec![b]);
        let mid = interpolate_dynamic(&track, 0.5).unwrap();
        let expect = Quat::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_4);
        assert_relative_eq!(mid[0].rotation.w, expect.w, epsilon = 1e-12);
        assert_relative_eq!(mid[0].rotation.z, expect.z, epsilon = 1e-12);
        assert_relative_eq!(mid[0].rotation.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_and_empty_track_error() {
        let track = two_anchor_track(vec![], vec![]);
        assert!(matches!(
            interpolate_dynamic(&track, 1.5),
            Err(Error::TimeOutOfRange { .. })
        ));
        let empty = AnchorTrack::default();
        assert!(matches!(
            interpolate_dynamic(&empty, 0.0),
            Err(Error::EmptyTrack)
        ));
    }

    #[test]
    fn continuity_at_anchor_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = 2;
            let track = AnchorTrack {
                anchor_times: vec![0.0, 0.7, 1.9],
                anchor_states: (0..3)
                    .map(|_| (0..n).map(|_| rand_prim(&mut rng)).collect())
                    .collect(),
                ids: vec![0, 1],
            };
            let eps = 1e-9;
            for &t in &[0.7f64] {
                let left = interpolate_dynamic(&track, t - eps).unwrap();
                let at = interpolate_dynamic(&track, t).unwrap();
                let right = interpolate_dynamic(&track, t + eps).unwrap();
                for i in 0..n {
                    assert!((left[i].position - at[i].position).norm() < 1e-6);
                    assert!((right[i].position - at[i].position).norm() < 1e-6);
                    assert!(left[i].rotation.dot(&at[i].rotation).abs() > 1.0 - 1e-6);
                    assert!(right[i].rotation.dot(&at[i].rotation).abs() > 1.0 - 1e-6);
                }
            }
        }
    }

    #[test]
    fn interpolation_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let a = vec![rand_prim(&mut rng)];
            let b = vec![rand_prim(&mut rng)];
            let track = two_anchor_track(a, b);
            let t = 0.1 + 0.8 * rng.random::<f64>();
            // random linear functional over all interpolated parameters
            let w: Vec<f64> = (0..14).map(|_| rng.random::<f64>() - 0.5).collect();
            let eval = |track: &AnchorTrack| -> f64 {
                let p = &interpolate_dynamic(track, t).unwrap()[0];
                w[0] * p.position.x
                    + w[1] * p.position.y
                    + w[2] * p.position.z
                    + w[3] * p.rotation.w
                    + w[4] * p.rotation.x
                    + w[5] * p.rotation.y
                    + w[6] * p.rotation.z
                    + w[7] * p.log_scale.x
                    + w[8] * p.log_scale.y
                    + w[9] * p.log_scale.z
                    + w[10] * p.opacity_logit
                    + w[11] * p.color.x
                    + w[12] * p.color.y
                    + w[13] * p.color.z
            };
            let (_, tape) = interpolate_dynamic_with_tape(&track, t).unwrap();
            let g = PrimitiveGrads {
                position: Vector3::new(w[0], w[1], w[2]),
                rotation: Quat::new(w[3], w[4], w[5], w[6]),
                log_scale: Vector3::new(w[7], w[8], w[9]),
                opacity_logit: w[10],
                color: Vector3::new(w[11], w[12], w[13]),
            };
            let (ga, gb) = tape.backward(&[g]);
            let h = 1e-6;
            // check position + opacity of anchor 0 and rotation of anchor 1
            for (anchor, grads) in [(0usize, &ga), (1usize, &gb)] {
                let perturb = |set: &dyn Fn(&mut GaussianPrimitive, f64),
                                   get: f64,
                                   analytic: f64| {
                    let mut tp = track.clone();
                    set(&mut tp.anchor_states[anchor][0], get + h);
                    let fp = eval(&tp);
                    let mut tm = track.clone();
                    set(&mut tm.anchor_states[anchor][0], get - h);
                    let fm = eval(&tm);
                    let fd = (fp - fm) / (2.0 * h);
                    assert_relative_eq!(analytic, fd, epsilon = 1e-5, max_relative = 1e-4);
                };
                let base = track.anchor_states[anchor][0];
                perturb(
                    &|p, v| p.position.x = v,
                    base.position.x,
                    grads[0].position.x,
                );
                perturb(
                    &|p, v| p.opacity_logit = v,
                    base.opacity_logit,
                    grads[0].opacity_logit,
                );
                perturb(
                    &|p, v| p.rotation.y = v,
                    base.rotation.y,
                    grads[0].rotation.y,
                );
                perturb(
                    &|p, v| p.log_scale.z = v,
                    base.log_scale.z,
                    grads[0].log_scale.z,
                );
            }
        }
    }

    #[test]
    fn assemble_counts_and_tags() {
        let mut scene = SceneModel::new((0.0, 1.0), vec![0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3 {
            scene.add_static(rand_prim(&mut rng));
        }
        for _ in 0..2 {
            scene.add_dynamic_replicated(rand_prim(&mut rng));
        }
        let asm = scene.assemble(0.4).unwrap();
        assert_eq!(asm.primitives.len(), 5);
        assert_eq!(asm.sources.iter().filter(|s| s.is_dynamic()).count(), 2);
        // disjoint identities
        let mut ids: Vec<u64> = asm.sources.iter().map(|s| s.id()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 5);
    }

    #[test]
    fn assemble_empty_dynamic_returns_static_only() {
        let mut scene = SceneModel::new((0.0, 1.0), vec![0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..4 {
            scene.add_static(rand_prim(&mut rng));
        }
        let asm = scene.assemble(0.3).unwrap();
        assert_eq!(asm.primitives.len(), 4);
        assert!(asm.interp_tape.is_none());
    }

    #[test]
    fn assemble_at_tmin_is_static_union_first_anchor() {
        let mut scene = SceneModel::new((0.0, 1.0), vec![0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        scene.add_static(rand_prim(&mut rng));
        let d = rand_prim(&mut rng);
        scene.add_dynamic_replicated(d);
        // move the second anchor so the interpolation is nontrivial
        scene.dynamic_field.anchor_states[1][0].position += Vector3::new(1.0, 0.0, 0.0);
        let asm = scene.assemble(0.0).unwrap();
        assert_eq!(asm.primitives[1], scene.dynamic_field.anchor_states[0][0]);
    }

    #[test]
    fn gradient_stats_accumulation() {
        let mut stats = GradientStats::new(1);
        accumulate_gradient_stats(&mut stats, &[Vector3::new(3.0, 4.0, 0.0)], &[true]).unwrap();
        assert_eq!(stats.accum_grad_norm[0], 5.0);
        assert_eq!(stats.observation_count[0], 1);
        // second accumulation of norm 7
        accumulate_gradient_stats(&mut stats, &[Vector3::new(0.0, 0.0, 7.0)], &[true]).unwrap();
        assert_eq!(stats.accum_grad_norm[0], 12.0);
        // zero gradients leave values unchanged except counts
        accumulate_gradient_stats(&mut stats, &[Vector3::zeros()], &[true]).unwrap();
        assert_eq!(stats.accum_grad_norm[0], 12.0);
        assert_eq!(stats.observation_count[0], 3);
        // shape error
        assert!(accumulate_gradient_stats(&mut stats, &[], &[]).is_err());
    }

    #[test]
    fn classification_five_value_oracle() {
        // values {1,1,1,1,10}: mean 2.8, population std 3.6, threshold (κ=1) 6.4
        let stats = GradientStats {
            accum_grad_norm: vec![1.0, 1.0, 1.0, 1.0, 10.0],
            observation_count: vec![1; 5],
        };
        let mask = classify_dynamic(&stats, 1.0);
        assert_eq!(mask, vec![false, false, false, false, true]);
    }

    #[test]
    fn classification_degenerate_distribution() {
        let stats = GradientStats {
            accum_grad_norm: vec![2.0; 6],
            observation_count: vec![1; 6],
        };
        assert!(classify_dynamic(&stats, 3.0).iter().all(|&m| !m));
        assert!(classify_dynamic(&GradientStats::default(), 3.0).is_empty());
    }

    #[test]
    fn classification_monotone_in_kappa_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n = rng.random_range(2..20);
            let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
            let stats = GradientStats {
                accum_grad_norm: values.clone(),
                observation_count: vec![1; n],
            };
            let k1 = rng.random::<f64>() * 2.0;
            let k2 = k1 + rng.random::<f64>() * 2.0;
            let m1 = classify_dynamic(&stats, k1);
            let m2 = classify_dynamic(&stats, k2);
            for i in 0..n {
                assert!(!m2[i] || m1[i], "raising kappa grew the dynamic set");
            }
            let c = 0.1 + rng.random::<f64>() * 10.0;
            let scaled = GradientStats {
                accum_grad_norm: values.iter().map(|v| v * c).collect(),
                observation_count: vec![1; n],
            };
            assert_eq!(m1, classify_dynamic(&scaled, k1));
        }
    }

    #[test]
    fn promote_moves_primitives_with_ids() {
        let mut scene = SceneModel::new((0.0, 1.0), vec![0.0, 0.5, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let ids: Vec<u64> = (0..4).map(|_| scene.add_static(rand_prim(&mut rng))).collect();
        let moved = scene.promote_to_dynamic(&[false, true, false, true]);
        assert_eq!(moved, vec![ids[1], ids[3]]);
        assert_eq!(scene.static_count(), 2);
        assert_eq!(scene.dynamic_count(), 2);
        assert_eq!(scene.dynamic_field.anchor_states.len(), 3);
        for state in &scene.dynamic_field.anchor_states {
            assert_eq!(state.len(), 2);
        }
    }
}
