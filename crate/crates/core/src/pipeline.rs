//! The two-stage progressive driver: Stage-1 geometric purification, Stage-2
//! generative distillation with the hybrid objective, plus adaptive density
//! control plumbing. Fully reproducible from a single master seed: every
//! stochastic draw uses a seed derived from (master, label, iteration).

use crate::camera::{sample_novel_views, ViewSample};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::math::Quat;
use crate::metrics::{psnr, ssim};
use crate::opt::Adam;
use crate::purify::{
    anneal_factors, extract_dynamic_mask, knn_density, stage1_loss, survival_and_mask,
    AnnealSchedule, DropoutTracker, DynamicMaskConfig, PruneSchedule, ScoreWeights,
};
use crate::rectifier::{RectifyContext, Rectifier};
use crate::render::{
    render_no_tape, render_with, OpacityOverride, RenderOptions,
};
use crate::scene::{
    accumulate_gradient_stats, classify_dynamic, GaussianPrimitive, GradientStats,
    PrimitiveGrads, PrimitiveSource, SceneModel,
};
use crate::seeding;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::sync::Arc;

/// Every schedule and weight of the closed loop.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dynamic-classification threshold factor κ.
    pub kappa: f64,
    /// SSIM weight inside the photometric loss.
    pub lambda_s: f64,
    /// ROI (dynamic-mask) weight in the Stage-1 loss.
    pub lambda_dy: f64,
    /// Coupling factor for rectified pseudo-supervision in Stage 2.
    pub lambda_rect: f64,
    pub prune: PruneSchedule,
    pub anneal: AnnealSchedule,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub novel_views_per_iter: usize,
    /// Fixed pool of novel views sampled once at the start of Stage 2.
    pub novel_view_pool: usize,
    /// Rectified targets are cached per pool entry and refreshed this often.
    pub rectify_refresh_interval: usize,
    /// Spatial/temporal reference budget handed to the rectifier.
    pub rectify_spatial_refs: usize,
    pub rectify_temporal_window: usize,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    /// Hard cap on the primitive budget; densification stops growing the
    /// scene beyond it (pruning still applies).
    pub max_primitives: usize,
    /// KNN density is recomputed every this many Stage-1 iterations.
    pub density_refresh_interval: usize,
    pub opacity_prune_floor: f64,
    /// World-unit scale above which a selected splat splits instead of clones.
    pub split_scale_threshold: f64,
    pub lr_position: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub master_seed: u64,
    pub knn_k: usize,
    pub rho_max: f64,
    pub score_weights: ScoreWeights,
    /// Consecutive masked-out applications before permanent removal.
    pub dropout_removal_streak: u32,
    /// Masked primitives are excluded from the update entirely.
    pub exclude_masked_from_update: bool,
    pub reset_stats_after_classify: bool,
    /// One anchor every this many frames.
    pub anchor_spacing: f64,
    pub checkpoint_interval: usize,
    pub roi_mask: DynamicMaskConfig,
    pub render: RenderOptions,
    /// Random-init splat budget and placement box half-width.
    pub init_splat_count: usize,
    pub init_extent: f64,
    pub init_scale: f64,
    pub init_opacity: f64,
    /// Stage-1 toggles used by the ablation matrix.
    pub enable_pruning: bool,
    pub enable_annealing: bool,
    pub enable_roi: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            kappa: 3.0,
            lambda_s: 0.2,
            lambda_dy: 0.2,
            lambda_rect: 0.1,
            prune: PruneSchedule::default(),
            anneal: AnnealSchedule::default(),
            stage1_iters: 20_000,
            stage2_iters: 20_000,
            novel_views_per_iter: 1,
            novel_view_pool: 8,
            rectify_refresh_interval: 500,
            rectify_spatial_refs: 2,
            rectify_temporal_window: 2,
            densify_interval: 100,
            densify_grad_threshold: 8e-3,
            max_primitives: 2500,
            density_refresh_interval: 10,
            opacity_prune_floor: 0.03,
            split_scale_threshold: 0.25,
            lr_position: 2e-3,
            lr_rotation: 3e-3,
            lr_scale: 3e-3,
            lr_opacity: 3e-2,
            lr_color: 1e-2,
            master_seed: 0,
            knn_k: 8,
            rho_max: 1e6,
            score_weights: ScoreWeights::default(),
            dropout_removal_streak: 50,
            exclude_masked_from_update: true,
            reset_stats_after_classify: true,
            anchor_spacing: 10.0,
            checkpoint_interval: 100,
            roi_mask: DynamicMaskConfig::default(),
            render: RenderOptions::default(),
            init_splat_count: 250,
            init_extent: 1.0,
            init_scale: 0.12,
            init_opacity: 0.4,
            enable_pruning: true,
            enable_annealing: true,
            enable_roi: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    Purify,
    Distill,
}

/// One run-log line.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub loss: f64,
    pub holdout_psnr: f64,
    pub holdout_ssim: f64,
    pub primitive_count: usize,
    pub dynamic_count: usize,
}

/// Observed training views (with images) plus held-out views for metrics.
#[derive(Clone)]
pub struct TrainData {
    pub observed: Vec<ViewSample>,
    pub holdout: Vec<ViewSample>,
}

impl TrainData {
    pub fn validate(&self) -> Result<()> {
        if self.observed.is_empty() {
            return Err(Error::EmptyDataset("no observed views".into()));
        }
        for v in &self.observed {
            if v.gt_image.is_none() {
                return Err(Error::EmptyDataset(format!(
                    "observed view {} has no image",
                    v.label()
                )));
            }
        }
        Ok(())
    }

    pub fn time_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.observed {
            lo = lo.min(v.timestamp);
            hi = hi.max(v.timestamp);
        }
        (lo, hi)
    }
}

pub struct TrainState {
    pub scene: SceneModel,
    pub stats: GradientStats,
    pub iteration: usize,
    pub stage: Stage,
    pub metric_history: Vec<CheckpointRecord>,
    pub master_seed: u64,
    dropout: DropoutTracker,
    optimizer: SceneOptimizer,
}

impl TrainState {
    /// Random splat initialization inside a box, anchors spaced uniformly
    /// over the data's time range.
    pub fn init(data: &TrainData, cfg: &PipelineConfig) -> Result<TrainState> {
        data.validate()?;
        let (t0, t1) = data.time_range();
        let span = (t1 - t0).max(0.0);
        let n_anchors = (span / cfg.anchor_spacing).ceil() as usize + 1;
        let anchor_times: Vec<f64> = if span == 0.0 {
            vec![t0]
        } else {
            (0..n_anchors)
                .map(|i| t0 + span * i as f64 / (n_anchors - 1) as f64)
                .collect()
        };
        let mut scene = SceneModel::new((t0, t1), anchor_times);
        let mut rng =
            ChaCha20Rng::seed_from_u64(seeding::derive(cfg.master_seed, "scene-init", 0));
        for _ in 0..cfg.init_splat_count {
            let pos = Vector3::new(
                (rng.random::<f64>() - 0.5) * 2.0 * cfg.init_extent,
                (rng.random::<f64>() - 0.5) * 2.0 * cfg.init_extent,
                (rng.random::<f64>() - 0.5) * 2.0 * cfg.init_extent,
            );
            let axis = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            let prim = GaussianPrimitive::new(
                pos,
                Quat::from_axis_angle(axis, rng.random::<f64>() * std::f64::consts::TAU),
                Vector3::new(cfg.init_scale, cfg.init_scale, cfg.init_scale),
                cfg.init_opacity,
                Vector3::new(rng.random(), rng.random(), rng.random()),
            );
            scene.add_static(prim);
        }
        Ok(TrainState::from_scene(scene, cfg))
    }

    /// Wrap an existing scene (used by experiments that start from a known
    /// geometry).
    pub fn from_scene(scene: SceneModel, cfg: &PipelineConfig) -> TrainState {
        let n = scene.total_count();
        let optimizer = SceneOptimizer::new(&scene, cfg);
        TrainState {
            stats: GradientStats::new(n),
            dropout: DropoutTracker::new(n, cfg.dropout_removal_streak),
            iteration: 0,
            stage: Stage::Purify,
            metric_history: Vec::new(),
            master_seed: cfg.master_seed,
            scene,
            optimizer,
        }
    }

    /// The single Purify → Distill transition.
    pub fn begin_distill(&mut self) {
        assert_eq!(self.stage, Stage::Purify, "stage transitions exactly once");
        self.stage = Stage::Distill;
    }
}

/// Per-group Adam over the scene's parameter slots: static primitives first,
/// then every anchor of the dynamic field.
struct SceneOptimizer {
    pos: Adam,
    rot: Adam,
    scale: Adam,
    opacity: Adam,
    color: Adam,
    n_static: usize,
    n_dynamic: usize,
    n_anchors: usize,
}

impl SceneOptimizer {
    fn slot_count(scene: &SceneModel) -> usize {
        scene.static_count() + scene.dynamic_field.anchor_count() * scene.dynamic_count()
    }

    fn new(scene: &SceneModel, cfg: &PipelineConfig) -> Self {
        let slots = Self::slot_count(scene);
        SceneOptimizer {
            pos: Adam::new(3 * slots, cfg.lr_position),
            rot: Adam::new(4 * slots, cfg.lr_rotation),
            scale: Adam::new(3 * slots, cfg.lr_scale),
            opacity: Adam::new(slots, cfg.lr_opacity),
            color: Adam::new(3 * slots, cfg.lr_color),
            n_static: scene.static_count(),
            n_dynamic: scene.dynamic_count(),
            n_anchors: scene.dynamic_field.anchor_count(),
        }
    }

    /// Optimizer slot of a static primitive / an (anchor, dynamic) pair.
    fn static_slot(&self, i: usize) -> usize {
        i
    }

    fn dynamic_slot(&self, anchor: usize, d: usize) -> usize {
        self.n_static + anchor * self.n_dynamic + d
    }

    /// One Adam step over the whole scene given per-slot gradients; slots
    /// absent from `grads` (None) are left untouched.
    fn step(&mut self, scene: &mut SceneModel, grads: &[Option<PrimitiveGrads>]) {
        let slots = self.n_static + self.n_anchors * self.n_dynamic;
        assert_eq!(grads.len(), slots);
        let mut pos = vec![0.0; 3 * slots];
        let mut rot = vec![0.0; 4 * slots];
        let mut scale = vec![0.0; 3 * slots];
        let mut opacity = vec![0.0; slots];
        let mut color = vec![0.0; 3 * slots];
        let prim_at = |scene: &SceneModel, slot: usize| -> GaussianPrimitive {
            if slot < self.n_static {
                scene.static_field.primitives[slot]
            } else {
                let rel = slot - self.n_static;
                scene.dynamic_field.anchor_states[rel / self.n_dynamic][rel % self.n_dynamic]
            }
        };
        for slot in 0..slots {
            let p = prim_at(scene, slot);
            pos[3 * slot..3 * slot + 3].copy_from_slice(&[p.position.x, p.position.y, p.position.z]);
            rot[4 * slot..4 * slot + 4]
                .copy_from_slice(&[p.rotation.w, p.rotation.x, p.rotation.y, p.rotation.z]);
            scale[3 * slot..3 * slot + 3]
                .copy_from_slice(&[p.log_scale.x, p.log_scale.y, p.log_scale.z]);
            opacity[slot] = p.opacity_logit;
            color[3 * slot..3 * slot + 3].copy_from_slice(&[p.color.x, p.color.y, p.color.z]);
        }
        let mut g_pos = vec![0.0; 3 * slots];
        let mut g_rot = vec![0.0; 4 * slots];
        let mut g_scale = vec![0.0; 3 * slots];
        let mut g_opacity = vec![0.0; slots];
        let mut g_color = vec![0.0; 3 * slots];
        let mut active1 = vec![false; slots];
        for (slot, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                active1[slot] = true;
                g_pos[3 * slot..3 * slot + 3]
                    .copy_from_slice(&[g.position.x, g.position.y, g.position.z]);
                g_rot[4 * slot..4 * slot + 4]
                    .copy_from_slice(&[g.rotation.w, g.rotation.x, g.rotation.y, g.rotation.z]);
                g_scale[3 * slot..3 * slot + 3]
                    .copy_from_slice(&[g.log_scale.x, g.log_scale.y, g.log_scale.z]);
                g_opacity[slot] = g.opacity_logit;
                g_color[3 * slot..3 * slot + 3].copy_from_slice(&[g.color.x, g.color.y, g.color.z]);
            }
        }
        let expand = |a: &[bool], w: usize| -> Vec<bool> {
            a.iter().flat_map(|&b| std::iter::repeat_n(b, w)).collect()
        };
        self.pos.step_selective(&mut pos, &g_pos, &expand(&active1, 3));
        self.rot.step_selective(&mut rot, &g_rot, &expand(&active1, 4));
        self.scale
            .step_selective(&mut scale, &g_scale, &expand(&active1, 3));
        self.opacity.step_selective(&mut opacity, &g_opacity, &active1);
        self.color
            .step_selective(&mut color, &g_color, &expand(&active1, 3));

        // write back with the post-step projections: unit quaternion,
        // clamped color/opacity/scale
        let write = |slot: usize, scene: &mut SceneModel| {
            let p = GaussianPrimitive {
                position: Vector3::new(pos[3 * slot], pos[3 * slot + 1], pos[3 * slot + 2]),
                rotation: Quat::new(
                    rot[4 * slot],
                    rot[4 * slot + 1],
                    rot[4 * slot + 2],
                    rot[4 * slot + 3],
                )
                .normalized(),
                log_scale: Vector3::new(
                    scale[3 * slot].clamp(-9.0, 2.0),
                    scale[3 * slot + 1].clamp(-9.0, 2.0),
                    scale[3 * slot + 2].clamp(-9.0, 2.0),
                ),
                opacity_logit: opacity[slot].clamp(-50.0, 50.0),
                color: Vector3::new(
                    color[3 * slot].clamp(0.0, 1.0),
                    color[3 * slot + 1].clamp(0.0, 1.0),
                    color[3 * slot + 2].clamp(0.0, 1.0),
                ),
            };
            if slot < self.n_static {
                scene.static_field.primitives[slot] = p;
            } else {
                let rel = slot - self.n_static;
                scene.dynamic_field.anchor_states[rel / self.n_dynamic][rel % self.n_dynamic] = p;
            }
        };
        for slot in 0..slots {
            if active1[slot] {
                write(slot, scene);
            }
        }
    }

    /// Rebuild after a topology change. `assembled_map[new] = Some(old)`
    /// maps assembled primitive indices (static block then dynamic block).
    fn remap(
        &self,
        scene: &SceneModel,
        cfg: &PipelineConfig,
        old_n_static: usize,
        assembled_map: &[Option<usize>],
    ) -> SceneOptimizer {
        let new_n_static = scene.static_count();
        let new_n_dynamic = scene.dynamic_count();
        let n_anchors = scene.dynamic_field.anchor_count();
        assert_eq!(assembled_map.len(), new_n_static + new_n_dynamic);
        // map optimizer slots new -> old
        let slot_map = |new_slot: usize| -> Option<usize> {
            if new_slot < new_n_static {
                match assembled_map[new_slot] {
                    Some(old_asm) if old_asm < old_n_static => Some(old_asm),
                    _ => None,
                }
            } else {
                let rel = new_slot - new_n_static;
                let (anchor, d) = (rel / new_n_dynamic, rel % new_n_dynamic);
                match assembled_map[new_n_static + d] {
                    Some(old_asm) if old_asm >= old_n_static => {
                        let old_d = old_asm - old_n_static;
                        Some(old_n_static + anchor * self.n_dynamic + old_d)
                    }
                    // promoted static -> its anchors are fresh parameters
                    _ => None,
                }
            }
        };
        let slots = new_n_static + n_anchors * new_n_dynamic;
        let vec_map = |w: usize| {
            move |i: usize| -> Option<usize> { slot_map(i / w).map(|s| s * w + i % w) }
        };
        SceneOptimizer {
            pos: self.pos.remap(3 * slots, vec_map(3)),
            rot: self.rot.remap(4 * slots, vec_map(4)),
            scale: self.scale.remap(3 * slots, vec_map(3)),
            opacity: self.opacity.remap(slots, vec_map(1)),
            color: self.color.remap(3 * slots, vec_map(3)),
            n_static: new_n_static,
            n_dynamic: new_n_dynamic,
            n_anchors,
        }
        .with_lrs(cfg)
    }

    fn with_lrs(mut self, cfg: &PipelineConfig) -> Self {
        self.pos.lr = cfg.lr_position;
        self.rot.lr = cfg.lr_rotation;
        self.scale.lr = cfg.lr_scale;
        self.opacity.lr = cfg.lr_opacity;
        self.color.lr = cfg.lr_color;
        self
    }
}

/// Photometric loss L_color = (1−λ_s)·L1 + λ_s·(1−SSIM), weighted by the
/// stage-2 coupling: (1−λ_rect) for observed targets, λ_rect for rectified
/// ones. Returns the weighted loss and its gradient buffer.
pub fn hybrid_loss(
    render: &ImageRgb,
    target: &ImageRgb,
    is_rectified: bool,
    cfg: &PipelineConfig,
) -> Result<(f64, ImageRgb)> {
    let zero_mask = crate::image::ImageGray::new(render.width, render.height);
    let (color_loss, mut grad) = stage1_loss(render, target, &zero_mask, cfg.lambda_s, 0.0)?;
    let weight = if is_rectified {
        cfg.lambda_rect
    } else {
        1.0 - cfg.lambda_rect
    };
    for g in &mut grad.data {
        *g *= weight;
    }
    Ok((weight * color_loss, grad))
}

/// Distance of every assembled primitive to the camera center.
fn camera_depths(prims: &[GaussianPrimitive], view: &ViewSample) -> Vec<f64> {
    let center = view.pose.center();
    prims.iter().map(|p| (p.position - center).norm()).collect()
}

/// Map per-rendered-primitive gradients back onto optimizer slots: static
/// slots directly, dynamic through the interpolation tape onto the two
/// bracketing anchors (or the exact anchor).
fn distribute_grads(
    scene: &SceneModel,
    sources: &[PrimitiveSource],
    tape: Option<&crate::scene::InterpTape>,
    grads: &[PrimitiveGrads],
    active: &[bool],
    optimizer: &SceneOptimizer,
) -> Vec<Option<PrimitiveGrads>> {
    let slots = optimizer.n_static + optimizer.n_anchors * optimizer.n_dynamic;
    let mut out: Vec<Option<PrimitiveGrads>> = vec![None; slots];
    // collect dynamic gradients in dynamic-index order for the tape backward
    let n_dyn = scene.dynamic_count();
    let mut dyn_grads = vec![PrimitiveGrads::zero(); n_dyn];
    let mut dyn_active = vec![false; n_dyn];
    for (i, src) in sources.iter().enumerate() {
        match src {
            PrimitiveSource::Static { index, .. } => {
                if active[i] {
                    let slot = optimizer.static_slot(*index);
                    out[slot] = Some(grads[i]);
                }
            }
            PrimitiveSource::Dynamic { index, .. } => {
                dyn_grads[*index] = grads[i];
                dyn_active[*index] = active[i];
            }
        }
    }
    if n_dyn > 0 {
        if let Some(tape) = tape {
            if let Some(k) = tape.exact_anchor {
                for d in 0..n_dyn {
                    if dyn_active[d] {
                        out[optimizer.dynamic_slot(k, d)] = Some(dyn_grads[d]);
                    }
                }
            } else {
                let (ga, gb) = tape.backward(&dyn_grads);
                for d in 0..n_dyn {
                    if dyn_active[d] {
                        out[optimizer.dynamic_slot(tape.k, d)] = Some(ga[d]);
                        out[optimizer.dynamic_slot(tape.k + 1, d)] = Some(gb[d]);
                    }
                }
            }
        }
    }
    out
}

struct RenderOutcome {
    loss: f64,
    slot_grads: Vec<Option<PrimitiveGrads>>,
    position_grads: Vec<Vector3<f64>>,
    visible: Vec<bool>,
}

/// Render one observed view with optional purification state and compute the
/// Stage-1 loss and its distribution onto optimizer slots.
#[allow(clippy::too_many_arguments)]
fn stage1_step(
    scene: &SceneModel,
    view: &ViewSample,
    cfg: &PipelineConfig,
    optimizer: &SceneOptimizer,
    survive: &[bool],
    overrides: Option<&[OpacityOverride]>,
    roi_mask: &crate::image::ImageGray,
) -> Result<RenderOutcome> {
    let asm = scene.assemble(view.timestamp)?;
    let n = asm.primitives.len();
    // masked primitives are excluded from the render entirely
    let mut kept = Vec::with_capacity(n);
    let mut kept_overrides = Vec::with_capacity(n);
    let mut kept_to_asm = Vec::with_capacity(n);
    for i in 0..n {
        if survive[i] {
            kept.push(asm.primitives[i]);
            if let Some(ov) = overrides {
                kept_overrides.push(ov[i]);
            }
            kept_to_asm.push(i);
        }
    }
    let frame = render_with(
        &kept,
        view,
        &cfg.render,
        overrides.map(|_| kept_overrides.as_slice()),
        true,
    )?;
    let gt = view
        .gt_image
        .as_ref()
        .ok_or_else(|| Error::EmptyDataset(format!("view {} has no image", view.label())))?;
    let (loss, grad_buffer) = stage1_loss(
        &frame.color,
        gt,
        roi_mask,
        cfg.lambda_s,
        if cfg.enable_roi { cfg.lambda_dy } else { 0.0 },
    )?;
    let kept_grads = crate::render::render_backward(&frame, &grad_buffer)?;
    // scatter back to assembled indexing
    let mut grads = vec![PrimitiveGrads::zero(); n];
    let mut visible = vec![false; n];
    let mut active = vec![false; n];
    for (ki, &ai) in kept_to_asm.iter().enumerate() {
        grads[ai] = kept_grads[ki];
        visible[ai] = frame.visible[ki];
        active[ai] = !cfg.exclude_masked_from_update;
    }
    for &ai in &kept_to_asm {
        active[ai] = true;
    }
    let position_grads: Vec<Vector3<f64>> = grads.iter().map(|g| g.position).collect();
    let slot_grads = distribute_grads(
        scene,
        &asm.sources,
        asm.interp_tape.as_ref(),
        &grads,
        &active,
        optimizer,
    );
    Ok(RenderOutcome {
        loss,
        slot_grads,
        position_grads,
        visible,
    })
}

/// Checkpoint: loss plus PSNR/SSIM against a middle held-out view.
fn record_checkpoint(
    state: &mut TrainState,
    holdout: &[ViewSample],
    cfg: &PipelineConfig,
    loss: f64,
) -> Result<()> {
    let (h_psnr, h_ssim) = if holdout.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let view = &holdout[holdout.len() / 2];
        let asm = state.scene.assemble(view.timestamp)?;
        let frame = render_no_tape(&asm.primitives, view, &cfg.render)?;
        let gt = view
            .gt_image
            .as_ref()
            .ok_or_else(|| Error::EmptyDataset("holdout view without image".into()))?;
        (psnr(&frame.color, gt)?, ssim(&frame.color, gt)?)
    };
    state.metric_history.push(CheckpointRecord {
        iteration: state.iteration,
        stage: state.stage,
        loss,
        holdout_psnr: h_psnr,
        holdout_ssim: h_ssim,
        primitive_count: state.scene.total_count(),
        dynamic_count: state.scene.dynamic_count(),
    });
    Ok(())
}

/// Remove primitives (by assembled index) and remap every piece of
/// per-primitive state.
fn apply_removals(state: &mut TrainState, cfg: &PipelineConfig, removals: &[usize]) {
    if removals.is_empty() {
        return;
    }
    let n_static = state.scene.static_count();
    let n_dynamic = state.scene.dynamic_count();
    let old_total = n_static + n_dynamic;
    let removed: std::collections::BTreeSet<usize> = removals.iter().copied().collect();
    let static_removed: Vec<usize> = removed.iter().copied().filter(|&i| i < n_static).collect();
    let dynamic_removed: Vec<usize> = removed
        .iter()
        .copied()
        .filter(|&i| i >= n_static)
        .map(|i| i - n_static)
        .collect();
    for &i in static_removed.iter().rev() {
        state.scene.static_field.primitives.remove(i);
        state.scene.static_field.ids.remove(i);
    }
    state.scene.dynamic_field.remove_indices(&dynamic_removed);
    // assembled map: new index -> old index
    let mut map = Vec::with_capacity(old_total - removed.len());
    for old in 0..old_total {
        if !removed.contains(&old) {
            map.push(Some(old));
        }
    }
    rebuild_state(state, cfg, n_static, &map);
}

fn rebuild_state(
    state: &mut TrainState,
    cfg: &PipelineConfig,
    old_n_static: usize,
    assembled_map: &[Option<usize>],
) {
    state.optimizer = state
        .optimizer
        .remap(&state.scene, cfg, old_n_static, assembled_map);
    let mut stats = GradientStats::new(assembled_map.len());
    for (new, old) in assembled_map.iter().enumerate() {
        if let Some(old) = old {
            if *old < state.stats.len() {
                stats.accum_grad_norm[new] = state.stats.accum_grad_norm[*old];
                stats.observation_count[new] = state.stats.observation_count[*old];
            }
        }
    }
    state.stats = stats;
    state.dropout = state.dropout.remap(assembled_map);
}

/// Stage-1 geometric purification: stochastic pruning, opacity annealing,
/// ROI-weighted photometric training, periodic dynamic classification and
/// densification. The generative coupling λ is held at 0 throughout.
pub fn stage1_purify(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &PipelineConfig,
) -> Result<()> {
    data.validate()?;
    assert_eq!(state.stage, Stage::Purify);
    let mut density_cache: Vec<f64> = Vec::new();
    let mut density_epoch = usize::MAX;
    for local in 0..cfg.stage1_iters {
        let iter = state.iteration;
        let mut pick_rng =
            ChaCha20Rng::seed_from_u64(seeding::derive(state.master_seed, "s1-view", iter as u64));
        let view = &data.observed[pick_rng.random_range(0..data.observed.len())];
        let t = view.timestamp;

        let asm = state.scene.assemble(t)?;
        let n = asm.primitives.len();
        if n == 0 {
            return Err(Error::EmptyDataset("scene lost all primitives".into()));
        }

        // distribution-guided stochastic pruning; the KNN density is
        // refreshed periodically and on topology changes
        let survive: Vec<bool> = if cfg.enable_pruning && n > 1 {
            let epoch = local / cfg.density_refresh_interval.max(1);
            if density_cache.len() != n || density_epoch != epoch {
                let centers: Vec<Vector3<f64>> =
                    asm.primitives.iter().map(|p| p.position).collect();
                let k = cfg.knn_k.min(n - 1).max(1);
                density_cache = knn_density(&centers, k, cfg.rho_max)?;
                density_epoch = epoch;
            }
            let depths = camera_depths(&asm.primitives, view);
            let eta = cfg.prune.eta(local);
            let (_, mask) = survival_and_mask(
                &depths,
                &density_cache,
                eta,
                cfg.score_weights,
                seeding::derive(state.master_seed, "s1-prune", iter as u64),
            )?;
            mask
        } else {
            vec![true; n]
        };

        // stochastic opacity annealing (forward only; gradients flow to the
        // unperturbed logits with the noise factor treated as constant)
        let sigma = if cfg.enable_annealing {
            cfg.anneal.sigma(local)
        } else {
            0.0
        };
        let overrides: Option<Vec<OpacityOverride>> = if sigma > 0.0 {
            let factors = anneal_factors(
                n,
                sigma,
                seeding::derive(state.master_seed, "s1-anneal", iter as u64),
            );
            Some(
                asm.primitives
                    .iter()
                    .zip(&factors)
                    .map(|(p, &f)| {
                        let a = p.opacity();
                        let perturbed = a * f;
                        if (0.0..=1.0).contains(&perturbed) {
                            OpacityOverride {
                                alpha: perturbed,
                                dalpha_dlogit: f * crate::math::sigmoid_grad_from_value(a),
                            }
                        } else {
                            OpacityOverride {
                                alpha: perturbed.clamp(0.0, 1.0),
                                dalpha_dlogit: 0.0,
                            }
                        }
                    })
                    .collect(),
            )
        } else {
            None
        };

        // ROI mask from the dynamic field
        let roi = if cfg.enable_roi {
            extract_dynamic_mask(&state.scene, t, view, &cfg.render, &cfg.roi_mask)?.mask
        } else {
            crate::image::ImageGray::new(
                view.intrinsics.resolution.0 as usize,
                view.intrinsics.resolution.1 as usize,
            )
        };

        let outcome = stage1_step(
            &state.scene,
            view,
            cfg,
            &state.optimizer,
            &survive,
            overrides.as_deref(),
            &roi,
        )?;
        state.optimizer.step(&mut state.scene, &outcome.slot_grads);
        accumulate_gradient_stats(&mut state.stats, &outcome.position_grads, &outcome.visible)?;

        // soft-dropout bookkeeping and permanent removal
        let mut removals = if cfg.enable_pruning {
            state.dropout.apply(&survive)
        } else {
            Vec::new()
        };
        // never remove everything
        if removals.len() >= n {
            removals.truncate(n - 1);
        }

        state.iteration += 1;
        if state.iteration % cfg.checkpoint_interval == 0 {
            record_checkpoint(state, &data.holdout, cfg, outcome.loss)?;
        }

        apply_removals(state, cfg, &removals);

        // periodic dynamic classification and density control
        if cfg.densify_interval > 0 && (local + 1) % cfg.densify_interval == 0 {
            maintenance_event(state, cfg);
        }
    }
    Ok(())
}

/// Classification (κ-threshold migration to the dynamic field) followed by
/// clone/split/opacity-prune density control; rebuilds per-primitive state.
fn maintenance_event(state: &mut TrainState, cfg: &PipelineConfig) {
    let n_static = state.scene.static_count();
    let mask = classify_dynamic(&state.stats, cfg.kappa);
    let static_mask: Vec<bool> = mask.iter().take(n_static).copied().collect();
    let promoted = state.scene.promote_to_dynamic(&static_mask);
    // assembled map after promotion: statics keep order; promoted append to
    // the dynamic block in ascending original order
    let old_total = mask.len();
    let mut map: Vec<Option<usize>> = Vec::with_capacity(old_total);
    for (old, &m) in static_mask.iter().enumerate() {
        if !m {
            map.push(Some(old));
        }
    }
    for old in n_static..old_total {
        map.push(Some(old));
    }
    for (old, &m) in static_mask.iter().enumerate() {
        if m {
            map.push(Some(old));
        }
    }
    let _ = promoted;
    rebuild_state(state, cfg, n_static, &map);

    densify_and_prune(state, cfg);
    if cfg.reset_stats_after_classify {
        state.stats.reset(state.scene.total_count());
    }
}

/// Adaptive density control: clone small high-gradient primitives, split
/// large ones, and drop primitives whose activated opacity sits below the
/// floor. Dynamic-field edits replicate across all anchors.
pub fn densify_and_prune(state: &mut TrainState, cfg: &PipelineConfig) {
    let values = state.stats.values();
    let n_static = state.scene.static_count();
    let n_dynamic = state.scene.dynamic_count();
    if values.len() != n_static + n_dynamic {
        return; // stats out of date; skip this round
    }
    let may_grow = n_static + n_dynamic < cfg.max_primitives;

    let seen = |i: usize| state.stats.observation_count[i] > 0;
    let max_scale = |p: &GaussianPrimitive| p.scale().max();
    let split_offset = |p: &GaussianPrimitive| -> Vector3<f64> {
        let s = p.scale();
        let rot = p.rotation.rotation_matrix();
        let (mut axis, mut len) = (rot.column(0).into_owned(), s.x);
        if s.y > len {
            axis = rot.column(1).into_owned();
            len = s.y;
        }
        if s.z > len {
            axis = rot.column(2).into_owned();
            len = s.z;
        }
        axis * (0.5 * len)
    };
    const SPLIT_SCALE_SHRINK: f64 = 1.6;

    let mut map: Vec<Option<usize>> = Vec::new();

    // statics: keep / split / clone, then opacity prune
    let mut new_static = Vec::new();
    let mut new_static_ids = Vec::new();
    let mut appended: Vec<(GaussianPrimitive, Option<usize>)> = Vec::new();
    for i in 0..n_static {
        let p = state.scene.static_field.primitives[i];
        let id = state.scene.static_field.ids[i];
        // drop primitives below the opacity floor or invisible from every
        // training view over the whole stats window
        if p.opacity() < cfg.opacity_prune_floor || !seen(i) {
            continue;
        }
        let hot = may_grow && values[i] > cfg.densify_grad_threshold;
        if hot && max_scale(&p) > cfg.split_scale_threshold {
            // split into two shrunken children along the major axis
            let off = split_offset(&p);
            let mut a = p;
            a.log_scale -= Vector3::repeat(SPLIT_SCALE_SHRINK.ln());
            let mut b = a;
            a.position += off;
            b.position -= off;
            appended.push((a, None));
            appended.push((b, None));
        } else {
            new_static.push(p);
            new_static_ids.push(id);
            map.push(Some(i));
            if hot {
                appended.push((p, None));
            }
        }
    }
    for (p, src) in appended {
        new_static.push(p);
        new_static_ids.push(state.scene.next_id);
        state.scene.next_id += 1;
        map.push(src);
    }
    state.scene.static_field.primitives = new_static;
    state.scene.static_field.ids = new_static_ids;

    // dynamics: same policy, edits replicated across anchors
    let n_anchors = state.scene.dynamic_field.anchor_count();
    let mut keep: Vec<usize> = Vec::new();
    let mut dyn_clone: Vec<usize> = Vec::new();
    let mut dyn_split: Vec<usize> = Vec::new();
    for d in 0..n_dynamic {
        let max_opacity = (0..n_anchors)
            .map(|a| state.scene.dynamic_field.anchor_states[a][d].opacity())
            .fold(0.0f64, f64::max);
        if max_opacity < cfg.opacity_prune_floor || !seen(n_static + d) {
            continue;
        }
        let hot = may_grow && values[n_static + d] > cfg.densify_grad_threshold;
        let scale_big = max_scale(&state.scene.dynamic_field.anchor_states[0][d])
            > cfg.split_scale_threshold;
        if hot && scale_big {
            dyn_split.push(d);
        } else {
            keep.push(d);
            if hot {
                dyn_clone.push(d);
            }
        }
    }
    let old_states = state.scene.dynamic_field.anchor_states.clone();
    let old_ids = state.scene.dynamic_field.ids.clone();
    let mut new_states: Vec<Vec<GaussianPrimitive>> = vec![Vec::new(); n_anchors];
    let mut new_ids = Vec::new();
    for &d in &keep {
        for a in 0..n_anchors {
            new_states[a].push(old_states[a][d]);
        }
        new_ids.push(old_ids[d]);
        map.push(Some(n_static + d));
    }
    for &d in &dyn_clone {
        for a in 0..n_anchors {
            new_states[a].push(old_states[a][d]);
        }
        new_ids.push(state.scene.next_id);
        state.scene.next_id += 1;
        map.push(None);
    }
    for &d in &dyn_split {
        for sign in [1.0, -1.0] {
            for (a, new_state) in new_states.iter_mut().enumerate() {
                let mut p = old_states[a][d];
                let off = split_offset(&p);
                p.log_scale -= Vector3::repeat(SPLIT_SCALE_SHRINK.ln());
                p.position += off * (0.5 * sign);
                new_state.push(p);
            }
            new_ids.push(state.scene.next_id);
            state.scene.next_id += 1;
            map.push(None);
        }
    }
    state.scene.dynamic_field.anchor_states = new_states;
    state.scene.dynamic_field.ids = new_ids;

    rebuild_state(state, cfg, n_static, &map);
}

/// Stage-2 generative distillation: observed views stay supervised by ground
/// truth with weight (1−λ_rect); pooled novel views are rendered, rectified,
/// and supervise with weight λ_rect. Rectified targets are cached per pool
/// entry and refreshed periodically. Purification is disabled.
pub fn stage2_distill(
    state: &mut TrainState,
    data: &TrainData,
    rectifier: &dyn Rectifier,
    cfg: &PipelineConfig,
) -> Result<()> {
    data.validate()?;
    assert_eq!(state.stage, Stage::Distill, "stage2 requires Distill stage");

    let use_novel = cfg.lambda_rect > 0.0
        && cfg.novel_views_per_iter > 0
        && cfg.novel_view_pool > 0
        && !rectifier.is_identity();
    let pool: Vec<ViewSample> = if use_novel {
        sample_novel_views(
            &data.observed,
            cfg.novel_view_pool,
            seeding::derive(state.master_seed, "novel-pool", 0),
        )?
    } else {
        Vec::new()
    };
    let mut cache: Vec<Option<ImageRgb>> = vec![None; pool.len()];
    let mut cache_epoch: Vec<usize> = vec![usize::MAX; pool.len()];

    // distinct observed timestamps, for temporal references
    let mut timestamps: Vec<f64> = data.observed.iter().map(|v| v.timestamp).collect();
    timestamps.sort_by(|a, b| a.total_cmp(b));
    timestamps.dedup();

    for local in 0..cfg.stage2_iters {
        let iter = state.iteration;
        let mut pick_rng =
            ChaCha20Rng::seed_from_u64(seeding::derive(state.master_seed, "s2-view", iter as u64));
        let view = &data.observed[pick_rng.random_range(0..data.observed.len())];

        // observed term, weight (1−λ_rect)
        let asm = state.scene.assemble(view.timestamp)?;
        let frame = render_with(&asm.primitives, view, &cfg.render, None, true)?;
        let gt = view
            .gt_image
            .as_ref()
            .ok_or_else(|| Error::EmptyDataset("observed view without image".into()))?;
        let (obs_loss, obs_grad) = hybrid_loss(&frame.color, gt, false, cfg)?;
        let prim_grads = crate::render::render_backward(&frame, &obs_grad)?;
        let all_active = vec![true; asm.primitives.len()];
        let mut slot_grads = distribute_grads(
            &state.scene,
            &asm.sources,
            asm.interp_tape.as_ref(),
            &prim_grads,
            &all_active,
            &state.optimizer,
        );
        let mut total_loss = obs_loss;

        // novel-view pseudo-supervision, weight λ_rect; the rectified target
        // is a constant (no gradient flows through the rectifier)
        if use_novel {
            let mut novel_rng = ChaCha20Rng::seed_from_u64(seeding::derive(
                state.master_seed,
                "s2-novel",
                iter as u64,
            ));
            for _ in 0..cfg.novel_views_per_iter {
                let pi = novel_rng.random_range(0..pool.len());
                let nview = &pool[pi];
                let epoch = local / cfg.rectify_refresh_interval.max(1);
                if cache_epoch[pi] != epoch {
                    let target = rectify_novel(state, data, rectifier, cfg, nview, &timestamps)
                        .map_err(|e| Error::Rectify {
                            view: nview.label(),
                            t: nview.timestamp,
                            source: Box::new(e),
                        })?;
                    cache[pi] = Some(target);
                    cache_epoch[pi] = epoch;
                }
                let target = cache[pi].as_ref().unwrap();
                let nasm = state.scene.assemble(nview.timestamp)?;
                let nframe = render_with(&nasm.primitives, nview, &cfg.render, None, true)?;
                let (nloss, ngrad) = hybrid_loss(&nframe.color, target, true, cfg)?;
                let nprim_grads = crate::render::render_backward(&nframe, &ngrad)?;
                let nactive = vec![true; nasm.primitives.len()];
                let nslot = distribute_grads(
                    &state.scene,
                    &nasm.sources,
                    nasm.interp_tape.as_ref(),
                    &nprim_grads,
                    &nactive,
                    &state.optimizer,
                );
                for (dst, src) in slot_grads.iter_mut().zip(nslot) {
                    match (dst.as_mut(), src) {
                        (Some(d), Some(s)) => d.add_assign(&s),
                        (None, Some(s)) => *dst = Some(s),
                        _ => {}
                    }
                }
                total_loss += nloss;
            }
        }

        state.optimizer.step(&mut state.scene, &slot_grads);
        state.iteration += 1;
        if state.iteration % cfg.checkpoint_interval == 0 {
            record_checkpoint(state, &data.holdout, cfg, total_loss)?;
        }
    }
    Ok(())
}

/// Render the novel view from the current scene and rectify it, providing
/// spatial (other cameras, same timestamp) and temporal (same pose, frame
/// window) renders as references.
fn rectify_novel(
    state: &TrainState,
    data: &TrainData,
    rectifier: &dyn Rectifier,
    cfg: &PipelineConfig,
    nview: &ViewSample,
    timestamps: &[f64],
) -> Result<ImageRgb> {
    let t = nview.timestamp;
    let render_at = |view: &ViewSample, time: f64| -> Result<ImageRgb> {
        let asm = state.scene.assemble(time)?;
        Ok(render_no_tape(&asm.primitives, view, &cfg.render)?.color)
    };
    let degraded = render_at(nview, t)?;
    // spatial: first观 distinct observed cameras at the same timestamp
    let mut spatial = Vec::new();
    let mut seen = Vec::new();
    for v in &data.observed {
        if v.timestamp == t && !seen.contains(&v.camera_index) {
            seen.push(v.camera_index);
            spatial.push(render_at(v, t)?);
            if spatial.len() >= cfg.rectify_spatial_refs {
                break;
            }
        }
    }
    // temporal: the same novel pose at neighboring observed timestamps
    let mut temporal = Vec::new();
    let idx = timestamps.partition_point(|&x| x < t);
    let w = cfg.rectify_temporal_window as i64;
    for off in -w..=w {
        if off == 0 {
            continue;
        }
        let j = idx as i64 + off;
        if j >= 0 && (j as usize) < timestamps.len() {
            temporal.push(render_at(nview, timestamps[j as usize])?);
        }
    }
    let ctx = RectifyContext {
        view: nview,
        timestamp: t,
        spatial_images: &spatial,
        temporal_images: &temporal,
    };
    rectifier.rectify(&degraded, &ctx)
}

/// Stage 1 followed by Stage 2; returns the final state and the held-out
/// metric report over all holdout frames.
pub fn run_closed_loop(
    data: &TrainData,
    cfg: &PipelineConfig,
    rectifier: &dyn Rectifier,
) -> Result<(TrainState, crate::metrics::MetricReport)> {
    let mut state = TrainState::init(data, cfg)?;
    stage1_purify(&mut state, data, cfg)?;
    state.begin_distill();
    stage2_distill(&mut state, data, rectifier, cfg)?;
    let report = evaluate_holdout(&state.scene, &data.holdout, cfg)?;
    Ok((state, report))
}

pub fn evaluate_holdout(
    scene: &SceneModel,
    holdout: &[ViewSample],
    cfg: &PipelineConfig,
) -> Result<crate::metrics::MetricReport> {
    if holdout.is_empty() {
        return Err(Error::EmptyDataset("no holdout views".into()));
    }
    let mut rendered = Vec::with_capacity(holdout.len());
    let mut reference = Vec::with_capacity(holdout.len());
    for v in holdout {
        let asm = scene.assemble(v.timestamp)?;
        rendered.push(render_no_tape(&asm.primitives, v, &cfg.render)?.color);
        reference.push(
            v.gt_image
                .as_ref()
                .ok_or_else(|| Error::EmptyDataset("holdout view without image".into()))?
                .as_ref()
                .clone(),
        );
    }
    crate::metrics::evaluate_sequence(&rendered, &reference)
}

/// Build TrainData from a synthetic dataset, attaching images.
pub fn train_data_from_synthetic(data: &crate::synth::SyntheticDataset) -> TrainData {
    TrainData {
        observed: data.train_views(),
        holdout: data.holdout_views(),
    }
}

/// Build TrainData from a loaded on-disk dataset.
pub fn train_data_from_dataset(data: &crate::synth::Dataset) -> TrainData {
    TrainData {
        observed: data.train_views(),
        holdout: data.holdout_views(),
    }
}

pub fn arc_image(img: ImageRgb) -> Arc<ImageRgb> {
    Arc::new(img)
}
