//! Stage-1 stabilization: distribution-guided stochastic pruning, stochastic
//! opacity annealing, ROI dynamic-mask extraction, and the Stage-1 loss.

use crate::error::{Error, Result};
use crate::image::{ImageGray, ImageRgb};
use crate::math::{self, percentile};
use crate::metrics::ssim_with_grad;
use crate::render::{render_dynamic_alpha, RenderOptions};
use crate::scene::SceneModel;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// Dropout pressure η(t), linear in the iteration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PruneSchedule {
    pub eta_start: f64,
    pub eta_end: f64,
    pub total_iterations: usize,
}

impl PruneSchedule {
    pub fn eta(&self, iteration: usize) -> f64 {
        if self.total_iterations == 0 {
            return self.eta_end.clamp(0.0, 1.0);
        }
        let u = (iteration as f64 / self.total_iterations as f64).clamp(0.0, 1.0);
        math::lerp(self.eta_start, self.eta_end, u).clamp(0.0, 1.0)
    }
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            eta_start: 0.0,
            eta_end: 0.9,
            total_iterations: 20_000,
        }
    }
}

/// Opacity-noise standard deviation σ(t), linear in the iteration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnnealSchedule {
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub total_iterations: usize,
}

impl AnnealSchedule {
    pub fn sigma(&self, iteration: usize) -> f64 {
        if self.total_iterations == 0 {
            return self.sigma_end.max(0.0);
        }
        let u = (iteration as f64 / self.total_iterations as f64).clamp(0.0, 1.0);
        math::lerp(self.sigma_start, self.sigma_end, u).max(0.0)
    }
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            sigma_start: 0.3,
            sigma_end: 0.0,
            total_iterations: 20_000,
        }
    }
}

/// Per-primitive local density ρ and camera depth d.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    pub k: usize,
    pub rho: Vec<f64>,
    pub depth: Vec<f64>,
}

/// ρ_i = 1 / mean distance to the k nearest other centers (exact neighbors),
/// capped at `rho_max` for degenerate duplicates.
pub fn knn_density(centers: &[Vector3<f64>], k: usize, rho_max: f64) -> Result<Vec<f64>> {
    if centers.len() <= k {
        return Err(Error::InsufficientPoints {
            k,
            n: centers.len(),
        });
    }
    let rho = centers
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut dists: Vec<f64> = centers
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| (o - c).norm())
                .collect();
            dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            let mean = dists[..k].iter().sum::<f64>() / k as f64;
            if mean <= 1.0 / rho_max {
                rho_max
            } else {
                1.0 / mean
            }
        })
        .collect();
    Ok(rho)
}

/// Weights of the combined inverse-depth/density score (sum to 1).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreWeights {
    pub depth: f64,
    pub density: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            depth: 0.5,
            density: 0.5,
        }
    }
}

/// Min–max normalized w_d·(1/d) + w_ρ·ρ. A constant raw score maps to all
/// zeros (no pruning signal).
pub fn combined_score(depth: &[f64], density: &[f64], weights: ScoreWeights) -> Vec<f64> {
    let raw: Vec<f64> = depth
        .iter()
        .zip(density)
        .map(|(&d, &r)| weights.depth / d.max(1e-9) + weights.density * r)
        .collect();
    if raw.is_empty() {
        return raw;
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Survival probabilities p_i = clamp(1 − η·ω(d_i)·s_i, 0, 1) with
/// ω(d) = clamp(1 − d/d_max, 0, 1), d_max the 95th depth percentile, and a
/// seeded Bernoulli existence mask (true = survives this step).
pub fn survival_and_mask(
    depth: &[f64],
    density: &[f64],
    eta: f64,
    weights: ScoreWeights,
    rng_seed: u64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if depth.len() != density.len() {
        return Err(Error::ShapeMismatch(format!(
            "depth {} vs density {}",
            depth.len(),
            density.len()
        )));
    }
    if depth.iter().any(|v| !v.is_finite()) || density.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "non-finite depth or density in survival_and_mask".into(),
        ));
    }
    if !eta.is_finite() || !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidInput(format!("eta {eta} outside [0,1]")));
    }
    if depth.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let d_max = percentile(depth, 0.95);
    let score = combined_score(depth, density, weights);
    let p: Vec<f64> = depth
        .iter()
        .zip(&score)
        .map(|(&d, &s)| {
            let omega = if d_max > 0.0 {
                (1.0 - d / d_max).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (1.0 - eta * omega * s).clamp(0.0, 1.0)
        })
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mask: Vec<bool> = p.iter().map(|&pi| rng.random::<f64>() < pi).collect();
    Ok((p, mask))
}

/// Multiplicative factors (1 + n_i), n_i ~ N(0, σ²), from a seeded generator.
pub fn anneal_factors(count: usize, sigma: f64, rng_seed: u64) -> Vec<f64> {
    assert!(sigma >= 0.0);
    if sigma == 0.0 {
        return vec![1.0; count];
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, sigma).expect("sigma >= 0");
    (0..count).map(|_| 1.0 + normal.sample(&mut rng)).collect()
}

/// α̂_i = clamp(α_i·(1+n_i), 0, 1). σ = 0 returns the input bitwise.
pub fn anneal_opacity(opacities: &[f64], sigma: f64, rng_seed: u64) -> Vec<f64> {
    if sigma == 0.0 {
        return opacities.to_vec();
    }
    let factors = anneal_factors(opacities.len(), sigma, rng_seed);
    opacities
        .iter()
        .zip(&factors)
        .map(|(&a, &f)| (a * f).clamp(0.0, 1.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DynamicMaskConfig {
    /// Binarization threshold on the dynamic-only alpha render.
    pub threshold: f64,
    /// Connected components (4-connectivity) smaller than this are dropped.
    pub min_component_area: usize,
}

impl Default for DynamicMaskConfig {
    fn default() -> Self {
        DynamicMaskConfig {
            threshold: 0.5,
            min_component_area: 4,
        }
    }
}

/// Binary ROI mask of dynamic coverage with small outlier components removed.
#[derive(Debug, Clone)]
pub struct DynamicMask {
    pub mask: ImageGray,
    pub threshold: f64,
    pub min_component_area: usize,
}

pub fn extract_dynamic_mask(
    scene: &SceneModel,
    t: f64,
    view: &crate::camera::ViewSample,
    render_opts: &RenderOptions,
    cfg: &DynamicMaskConfig,
) -> Result<DynamicMask> {
    let alpha = render_dynamic_alpha(scene, t, view, render_opts)?;
    let mut mask = ImageGray::new(alpha.width, alpha.height);
    for (m, &a) in mask.data.iter_mut().zip(&alpha.data) {
        *m = if a >= cfg.threshold { 1.0 } else { 0.0 };
    }
    filter_small_components(&mut mask, cfg.min_component_area);
    Ok(DynamicMask {
        mask,
        threshold: cfg.threshold,
        min_component_area: cfg.min_component_area,
    })
}

/// Remove 4-connected components of ones smaller than `min_area`, in place.
pub fn filter_small_components(mask: &mut ImageGray, min_area: usize) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut next = 1u32;
    let mut areas: Vec<usize> = vec![0]; // area[label]
    let mut stack = Vec::new();
    for start in 0..w * h {
        if mask.data[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        let label = next;
        next += 1;
        let mut area = 0usize;
        stack.push(start);
        labels[start] = label;
        while let Some(p) = stack.pop() {
            area += 1;
            let (x, y) = (p % w, p / w);
            let mut try_push = |q: usize| {
                if mask.data[q] != 0.0 && labels[q] == 0 {
                    labels[q] = label;
                    stack.push(q);
                }
            };
            if x > 0 {
                try_push(p - 1);
            }
            if x + 1 < w {
                try_push(p + 1);
            }
            if y > 0 {
                try_push(p - w);
            }
            if y + 1 < h {
                try_push(p + w);
            }
        }
        areas.push(area);
    }
    for p in 0..w * h {
        if labels[p] != 0 && areas[labels[p] as usize] < min_area {
            mask.data[p] = 0.0;
        }
    }
}

/// Tracks consecutive masked-out applications per primitive; primitives
/// masked out `removal_streak` times in a row are flagged for permanent
/// removal.
#[derive(Debug, Clone, Default)]
pub struct DropoutTracker {
    consecutive: Vec<u32>,
    pub removal_streak: u32,
}

impl DropoutTracker {
    pub fn new(n: usize, removal_streak: u32) -> Self {
        DropoutTracker {
            consecutive: vec![0; n],
            removal_streak,
        }
    }

    pub fn len(&self) -> usize {
        self.consecutive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.consecutive.is_empty()
    }

    /// `survives[i] = false` counts a masked-out application. Returns sorted
    /// indices whose streak reached the removal threshold.
    pub fn apply(&mut self, survives: &[bool]) -> Vec<usize> {
        assert_eq!(survives.len(), self.consecutive.len());
        let mut removals = Vec::new();
        for (i, &alive) in survives.iter().enumerate() {
            if alive {
                self.consecutive[i] = 0;
            } else {
                self.consecutive[i] += 1;
                if self.consecutive[i] >= self.removal_streak {
                    removals.push(i);
                }
            }
        }
        removals
    }

    pub fn remove_indices(&mut self, sorted_indices: &[usize]) {
        for &i in sorted_indices.iter().rev() {
            self.consecutive.remove(i);
        }
    }

    pub fn push(&mut self, count: usize) {
        self.consecutive.extend(std::iter::repeat_n(0, count));
    }

    /// Rebuild after a topology change; new entries start at streak 0.
    pub fn remap(&self, map: &[Option<usize>]) -> DropoutTracker {
        DropoutTracker {
            consecutive: map
                .iter()
                .map(|old| old.map_or(0, |o| self.consecutive.get(o).copied().unwrap_or(0)))
                .collect(),
            removal_streak: self.removal_streak,
        }
    }
}

/// Stage-1 objective: (1−λ_s)·L1 + λ_s·(1−SSIM) + λ_dy·‖M ⊙ (render−gt)‖₁,
/// every term mean-reduced over pixels·channels. Returns the loss and its
/// pixelwise gradient w.r.t. the render.
pub fn stage1_loss(
    render: &ImageRgb,
    gt: &ImageRgb,
    mask: &ImageGray,
    lambda_s: f64,
    lambda_dy: f64,
) -> Result<(f64, ImageRgb)> {
    if !render.same_shape(gt) || mask.width != render.width || mask.height != render.height {
        return Err(Error::ShapeMismatch(format!(
            "stage1_loss render {}x{} gt {}x{} mask {}x{}",
            render.width, render.height, gt.width, gt.height, mask.width, mask.height
        )));
    }
    let n = render.data.len() as f64;
    let mut grad = ImageRgb::new(render.width, render.height);
    let mut l1 = 0.0;
    let mut roi = 0.0;
    for p in 0..render.width * render.height {
        let m = mask.data[p];
        for c in 0..3 {
            let i = p * 3 + c;
            let diff = render.data[i] - gt.data[i];
            l1 += diff.abs();
            roi += m * diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad.data[i] = ((1.0 - lambda_s) * sign + lambda_dy * m * sign) / n;
        }
    }
    l1 /= n;
    roi /= n;
    let (ssim_val, ssim_grad) = ssim_with_grad(render, gt)?;
    let loss = (1.0 - lambda_s) * l1 + lambda_s * (1.0 - ssim_val) + lambda_dy * roi;
    for i in 0..grad.data.len() {
        grad.data[i] -= lambda_s * ssim_grad.data[i];
    }
    Ok((loss, grad))
}
