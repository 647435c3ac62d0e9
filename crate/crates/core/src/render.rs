//! Differentiable alpha-compositing Gaussian splatting with an analytic
//! backward pass, plus auxiliary depth and dynamic-only alpha renders.
//!
//! Each primitive is projected to a 2D Gaussian via the local affine (EWA)
//! approximation J Σ Jᵀ, splats are sorted front-to-back with primitive-id
//! tie-breaking, and pixels composite c = Σ f_i α̂_i Π_{j<i}(1−α̂_j). The
//! forward pass retains per-pixel contribution lists; the backward pass
//! replays them instead of re-rasterizing.

use crate::camera::{CameraIntrinsics, CameraPose, ViewSample};
use crate::error::{Error, Result};
use crate::image::{ImageGray, ImageRgb};
use crate::math;
use crate::scene::{GaussianPrimitive, PrimitiveGrads, SceneModel};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub background_color: [f64; 3],
    pub tile_size: usize,
    /// Per-splat contributions below this are skipped.
    pub alpha_cutoff: f64,
    pub max_splats_per_pixel: usize,
    /// Screen-space low-pass added to the projected covariance diagonal.
    pub screen_dilation: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background_color: [0.0, 0.0, 0.0],
            tile_size: 16,
            alpha_cutoff: 1.0 / 255.0,
            max_splats_per_pixel: 4096,
            screen_dilation: 0.3,
        }
    }
}

/// Training-forward opacity replacement (stochastic annealing): the value
/// used in compositing plus its derivative w.r.t. the stored logit.
#[derive(Debug, Clone, Copy)]
pub struct OpacityOverride {
    pub alpha: f64,
    pub dalpha_dlogit: f64,
}

/// Screen-space state of one projected splat.
#[derive(Debug, Clone)]
struct SplatProjection {
    prim: usize,
    mean2: Vector2<f64>,
    /// Inverse of the dilated 2D covariance.
    conic: Matrix2<f64>,
    depth: f64,
    alpha: f64,
    color: Vector3<f64>,
    /// Inclusive pixel-index bounds of the cutoff footprint.
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
}

struct RenderTape {
    primitives: Vec<GaussianPrimitive>,
    overrides: Option<Vec<OpacityOverride>>,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    opts: RenderOptions,
    /// Front-to-back sorted.
    projected: Vec<SplatProjection>,
    /// Per pixel: (index into `projected`, α̂) in composite order.
    contrib: Vec<Vec<(u32, f64)>>,
}

/// Color/alpha/depth buffers plus (optionally) the tape for the backward pass.
pub struct RenderedFrame {
    pub color: ImageRgb,
    pub alpha: ImageGray,
    pub depth: ImageGray,
    /// True where the primitive contributed to at least one pixel.
    pub visible: Vec<bool>,
    tape: Option<RenderTape>,
}

impl RenderedFrame {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

/// Forward render retaining the backward tape.
pub fn render(
    primitives: &[GaussianPrimitive],
    view: &ViewSample,
    opts: &RenderOptions,
) -> Result<RenderedFrame> {
    render_with(primitives, view, opts, None, true)
}

/// Forward render without the backward tape (evaluation only).
pub fn render_no_tape(
    primitives: &[GaussianPrimitive],
    view: &ViewSample,
    opts: &RenderOptions,
) -> Result<RenderedFrame> {
    render_with(primitives, view, opts, None, false)
}

pub fn render_with(
    primitives: &[GaussianPrimitive],
    view: &ViewSample,
    opts: &RenderOptions,
    overrides: Option<&[OpacityOverride]>,
    keep_tape: bool,
) -> Result<RenderedFrame> {
    let (w, h) = (
        view.intrinsics.resolution.0 as usize,
        view.intrinsics.resolution.1 as usize,
    );
    if let Some(o) = overrides {
        if o.len() != primitives.len() {
            return Err(Error::ShapeMismatch(format!(
                "opacity overrides {} vs primitives {}",
                o.len(),
                primitives.len()
            )));
        }
    }

    let projected = project_splats(primitives, view, opts, overrides)?;

    let tile = opts.tile_size.max(1);
    let tiles_x = w.div_ceil(tile);
    let tiles_y = h.div_ceil(tile);

    // tile -> sorted splat indices whose footprint overlaps the tile
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, sp) in projected.iter().enumerate() {
        let tx0 = (sp.x0.max(0) as usize) / tile;
        let tx1 = (sp.x1.min(w as i64 - 1) as usize) / tile;
        let ty0 = (sp.y0.max(0) as usize) / tile;
        let ty1 = (sp.y1.min(h as i64 - 1) as usize) / tile;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tile_lists[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    struct TileOut {
        /// (x0, y0, tw, th) pixel rect
        rect: (usize, usize, usize, usize),
        color: Vec<f64>,
        alpha: Vec<f64>,
        depth: Vec<f64>,
        contrib: Vec<Vec<(u32, f64)>>,
    }

    let bg = Vector3::new(
        opts.background_color[0],
        opts.background_color[1],
        opts.background_color[2],
    );

    let tile_outputs: Vec<TileOut> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let tx = ti % tiles_x;
            let ty = ti / tiles_x;
            let x0 = tx * tile;
            let y0 = ty * tile;
            let tw = tile.min(w - x0);
            let th = tile.min(h - y0);
            let list = &tile_lists[ti];
            let mut color = vec![0.0; tw * th * 3];
            let mut alpha = vec![0.0; tw * th];
            let mut depth = vec![0.0; tw * th];
            let mut contrib: Vec<Vec<(u32, f64)>> = vec![Vec::new(); tw * th];
            for py in 0..th {
                for px in 0..tw {
                    let (ix, iy) = ((x0 + px) as i64, (y0 + py) as i64);
                    let pix = Vector2::new(ix as f64, iy as f64);
                    let mut t_acc = 1.0f64;
                    let mut out = Vector3::zeros();
                    let mut depth_acc = 0.0;
                    let mut weight_acc = 0.0;
                    let local = &mut contrib[py * tw + px];
                    for &si in list {
                        let sp = &projected[si as usize];
                        if ix < sp.x0 || ix > sp.x1 || iy < sp.y0 || iy > sp.y1 {
                            continue;
                        }
                        let d = pix - sp.mean2;
                        let maha = (sp.conic * d).dot(&d);
                        let g = (-0.5 * maha).exp();
                        let a_hat = sp.alpha * g;
                        if a_hat < opts.alpha_cutoff {
                            continue;
                        }
                        let wgt = t_acc * a_hat;
                        out += sp.color * wgt;
                        depth_acc += sp.depth * wgt;
                        weight_acc += wgt;
                        local.push((si, a_hat));
                        t_acc *= 1.0 - a_hat;
                        if t_acc <= 0.0 || local.len() >= opts.max_splats_per_pixel {
                            break;
                        }
                    }
                    out += bg * t_acc;
                    let o = (py * tw + px) * 3;
                    color[o] = out.x;
                    color[o + 1] = out.y;
                    color[o + 2] = out.z;
                    alpha[py * tw + px] = 1.0 - t_acc;
                    depth[py * tw + px] = if weight_acc > 0.0 {
                        depth_acc / weight_acc
                    } else {
                        0.0
                    };
                }
            }
            TileOut {
                rect: (x0, y0, tw, th),
                color,
                alpha,
                depth,
                contrib,
            }
        })
        .collect();

    // merge in tile order (pixels are disjoint, so this is a plain copy)
    let mut color = ImageRgb::new(w, h);
    let mut alpha = ImageGray::new(w, h);
    let mut depth = ImageGray::new(w, h);
    let mut contrib: Vec<Vec<(u32, f64)>> = vec![Vec::new(); w * h];
    let mut visible = vec![false; primitives.len()];
    for t in tile_outputs {
        let (x0, y0, tw, th) = t.rect;
        for py in 0..th {
            for px in 0..tw {
                let src = py * tw + px;
                let dst = (y0 + py) * w + (x0 + px);
                color.data[dst * 3..dst * 3 + 3].copy_from_slice(&t.color[src * 3..src * 3 + 3]);
                alpha.data[dst] = t.alpha[src];
                depth.data[dst] = t.depth[src];
            }
        }
        for (src, list) in t.contrib.into_iter().enumerate() {
            let py = src / tw;
            let px = src % tw;
            for &(si, _) in &list {
                visible[projected[si as usize].prim] = true;
            }
            contrib[(y0 + py) * w + (x0 + px)] = list;
        }
    }

    let tape = keep_tape.then(|| RenderTape {
        primitives: primitives.to_vec(),
        overrides: overrides.map(|o| o.to_vec()),
        pose: view.pose,
        intrinsics: view.intrinsics,
        opts: *opts,
        projected,
        contrib,
    });

    Ok(RenderedFrame {
        color,
        alpha,
        depth,
        visible,
        tape,
    })
}

fn project_splats(
    primitives: &[GaussianPrimitive],
    view: &ViewSample,
    opts: &RenderOptions,
    overrides: Option<&[OpacityOverride]>,
) -> Result<Vec<SplatProjection>> {
    let intr = &view.intrinsics;
    let w_mat = view.pose.rotation.rotation_matrix();
    let mut projected = Vec::with_capacity(primitives.len());
    for (i, prim) in primitives.iter().enumerate() {
        if !prim.is_finite() {
            return Err(Error::InvalidPrimitive { id: i as u64 });
        }
        let alpha = match overrides {
            Some(o) => o[i].alpha,
            None => prim.opacity(),
        };
        if alpha < opts.alpha_cutoff {
            continue;
        }
        let p_cam = view.pose.to_camera(&prim.position);
        if p_cam.z <= intr.near_plane {
            continue;
        }
        let (mean2, cov2) = project_covariance(prim, &p_cam, &w_mat, intr, opts.screen_dilation);
        let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
        if det <= 1e-12 {
            continue;
        }
        let conic = Matrix2::new(
            cov2[(1, 1)] / det,
            -cov2[(0, 1)] / det,
            -cov2[(1, 0)] / det,
            cov2[(0, 0)] / det,
        );
        // footprint: pixels where α·exp(-½ r²) can still reach the cutoff
        let maha_max = 2.0 * (alpha / opts.alpha_cutoff).ln();
        let rx = (cov2[(0, 0)] * maha_max).max(0.0).sqrt();
        let ry = (cov2[(1, 1)] * maha_max).max(0.0).sqrt();
        let x0 = (mean2.x - rx).ceil() as i64;
        let x1 = (mean2.x + rx).floor() as i64;
        let y0 = (mean2.y - ry).ceil() as i64;
        let y1 = (mean2.y + ry).floor() as i64;
        if x1 < 0 || y1 < 0 || x0 >= intr.resolution.0 as i64 || y0 >= intr.resolution.1 as i64 {
            continue;
        }
        projected.push(SplatProjection {
            prim: i,
            mean2,
            conic,
            depth: p_cam.z,
            alpha,
            color: prim.color,
            x0,
            x1,
            y0,
            y1,
        });
    }
    // front-to-back, ties broken by primitive id for determinism
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.prim.cmp(&b.prim)));
    Ok(projected)
}

/// EWA local-affine projection: mean and dilated 2D covariance J W Σ Wᵀ Jᵀ.
fn project_covariance(
    prim: &GaussianPrimitive,
    p_cam: &Vector3<f64>,
    w_mat: &Matrix3<f64>,
    intr: &CameraIntrinsics,
    dilation: f64,
) -> (Vector2<f64>, Matrix2<f64>) {
    let (fx, fy) = intr.focal;
    let z = p_cam.z;
    let mean2 = Vector2::new(
        fx * p_cam.x / z + intr.principal_point.0,
        fy * p_cam.y / z + intr.principal_point.1,
    );
    let j = ewa_jacobian(p_cam, fx, fy);
    let cov_cam = w_mat * prim.covariance() * w_mat.transpose();
    let mut cov2 = j * cov_cam * j.transpose();
    cov2[(0, 0)] += dilation;
    cov2[(1, 1)] += dilation;
    (mean2, cov2)
}

fn ewa_jacobian(p_cam: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let z = p_cam.z;
    Matrix2x3::new(
        fx / z,
        0.0,
        -fx * p_cam.x / (z * z),
        0.0,
        fy / z,
        -fy * p_cam.y / (z * z),
    )
}

/// Screen-space gradient accumulator for one projected splat.
#[derive(Clone)]
struct SplatGradAccum {
    mean2: Vector2<f64>,
    conic: Matrix2<f64>,
    alpha: f64,
    color: Vector3<f64>,
}

impl SplatGradAccum {
    fn zero() -> Self {
        SplatGradAccum {
            mean2: Vector2::zeros(),
            conic: Matrix2::zeros(),
            alpha: 0.0,
            color: Vector3::zeros(),
        }
    }

    fn add(&mut self, o: &SplatGradAccum) {
        self.mean2 += o.mean2;
        self.conic += o.conic;
        self.alpha += o.alpha;
        self.color += o.color;
    }
}

/// Analytic gradients of a scalar loss (given its per-pixel color gradient)
/// w.r.t. every primitive's stored parameters. Culled or skipped primitives
/// receive zero gradient.
pub fn render_backward(frame: &RenderedFrame, loss_grad: &ImageRgb) -> Result<Vec<PrimitiveGrads>> {
    let tape = frame.tape.as_ref().ok_or(Error::MissingTape)?;
    let (w, h) = (frame.width(), frame.height());
    if loss_grad.width != w || loss_grad.height != h {
        return Err(Error::ShapeMismatch(format!(
            "loss grad {}x{} vs frame {}x{}",
            loss_grad.width, loss_grad.height, w, h
        )));
    }
    let bg = Vector3::new(
        tape.opts.background_color[0],
        tape.opts.background_color[1],
        tape.opts.background_color[2],
    );
    let tile = tape.opts.tile_size.max(1);
    let tiles_x = w.div_ceil(tile);
    let tiles_y = h.div_ceil(tile);
    let n_splats = tape.projected.len();

    // per-tile dense accumulators, merged in tile order for determinism
    let tile_grads: Vec<Vec<SplatGradAccum>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let tx = ti % tiles_x;
            let ty = ti / tiles_x;
            let x0 = tx * tile;
            let y0 = ty * tile;
            let tw = tile.min(w - x0);
            let th = tile.min(h - y0);
            let mut acc = vec![SplatGradAccum::zero(); n_splats];
            for py in 0..th {
                for px in 0..tw {
                    let (ix, iy) = (x0 + px, y0 + py);
                    let pix_idx = iy * w + ix;
                    let g = Vector3::new(
                        loss_grad.data[pix_idx * 3],
                        loss_grad.data[pix_idx * 3 + 1],
                        loss_grad.data[pix_idx * 3 + 2],
                    );
                    let contribs = &tape.contrib[pix_idx];
                    if contribs.is_empty() || (g.x == 0.0 && g.y == 0.0 && g.z == 0.0) {
                        continue;
                    }
                    let pix = Vector2::new(ix as f64, iy as f64);
                    // replay transmittances exactly as the forward computed them
                    let n = contribs.len();
                    let mut trans = Vec::with_capacity(n);
                    let mut t_acc = 1.0f64;
                    for &(_, a_hat) in contribs {
                        trans.push(t_acc);
                        t_acc *= 1.0 - a_hat;
                    }
                    // reverse scan; out = Σ T_i α̂_i c_i + T_n · bg
                    let mut g_t_next = g.dot(&bg);
                    for i in (0..n).rev() {
                        let (si, a_hat) = contribs[i];
                        let sp = &tape.projected[si as usize];
                        let t_i = trans[i];
                        let slot = &mut acc[si as usize];
                        slot.color += g * (t_i * a_hat);
                        let g_ahat = g.dot(&sp.color) * t_i - g_t_next * t_i;
                        g_t_next = g.dot(&sp.color) * a_hat + g_t_next * (1.0 - a_hat);
                        // α̂ = α·G, G = exp(-½ dᵀCd), d = pix − mean2
                        let d = pix - sp.mean2;
                        let maha = (sp.conic * d).dot(&d);
                        let gauss = (-0.5 * maha).exp();
                        slot.alpha += g_ahat * gauss;
                        let g_gauss = g_ahat * sp.alpha;
                        let cd = sp.conic * d;
                        slot.mean2 += cd * (g_gauss * gauss);
                        slot.conic += (d * d.transpose()) * (-0.5 * g_gauss * gauss);
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen_grads = vec![SplatGradAccum::zero(); n_splats];
    for tg in &tile_grads {
        for (dst, src) in screen_grads.iter_mut().zip(tg) {
            dst.add(src);
        }
    }

    // chain screen-space gradients back to primitive parameters
    let w_mat = tape.pose.rotation.rotation_matrix();
    let intr = &tape.intrinsics;
    let grads: Vec<(usize, PrimitiveGrads)> = tape
        .projected
        .par_iter()
        .zip(&screen_grads)
        .map(|(sp, sg)| {
            let prim = &tape.primitives[sp.prim];
            let mut out = PrimitiveGrads::zero();
            out.color = sg.color;

            // opacity chain: override derivative or sigmoid
            out.opacity_logit = match &tape.overrides {
                Some(o) => sg.alpha * o[sp.prim].dalpha_dlogit,
                None => {
                    let a = math::sigmoid(prim.opacity_logit);
                    sg.alpha * math::sigmoid_grad_from_value(a)
                }
            };

            let p_cam = tape.pose.to_camera(&prim.position);
            let z = p_cam.z;
            let (fx, fy) = intr.focal;
            let j = ewa_jacobian(&p_cam, fx, fy);

            // conic = inv(Σ'); dL/dΣ' = -C·g_C·C
            let g_cov2 = -(sp.conic * sg.conic * sp.conic);
            // Σ' = J Σcam Jᵀ + dilation·I
            let unit_quat = prim.rotation.normalized();
            let rot = unit_quat.rotation_matrix();
            let s = prim.scale();
            let m = rot * Matrix3::from_diagonal(&s);
            let sigma = m * m.transpose();
            let cov_cam = w_mat * sigma * w_mat.transpose();
            let g_cov_cam = j.transpose() * g_cov2 * j;
            let g_j = (g_cov2 + g_cov2.transpose()) * j * cov_cam;
            let g_sigma = w_mat.transpose() * g_cov_cam * w_mat;
            // Σ = M Mᵀ
            let g_m = (g_sigma + g_sigma.transpose()) * m;
            // M = R diag(s)
            let mut g_scale: Vector3<f64> = Vector3::zeros();
            let mut g_rot: Matrix3<f64> = Matrix3::zeros();
            for jcol in 0..3 {
                for irow in 0..3 {
                    g_scale[jcol] += g_m[(irow, jcol)] * rot[(irow, jcol)];
                    g_rot[(irow, jcol)] = g_m[(irow, jcol)] * s[jcol];
                }
            }
            out.log_scale = Vector3::new(g_scale.x * s.x, g_scale.y * s.y, g_scale.z * s.z);
            let g_unit = math::rotation_matrix_backward(&unit_quat, &g_rot);
            out.rotation = math::quat_normalize_backward(&prim.rotation, &g_unit);

            // position: through the projected mean and through J itself
            let mut g_p_cam = j.transpose() * sg.mean2;
            let dfxz2 = -fx / (z * z);
            let dfyz2 = -fy / (z * z);
            g_p_cam.x += g_j[(0, 2)] * dfxz2;
            g_p_cam.y += g_j[(1, 2)] * dfyz2;
            g_p_cam.z += g_j[(0, 0)] * dfxz2
                + g_j[(1, 1)] * dfyz2
                + g_j[(0, 2)] * (2.0 * fx * p_cam.x / (z * z * z))
                + g_j[(1, 2)] * (2.0 * fy * p_cam.y / (z * z * z));
            out.position = w_mat.transpose() * g_p_cam;

            (sp.prim, out)
        })
        .collect();

    let mut result = vec![PrimitiveGrads::zero(); tape.primitives.len()];
    for (prim, g) in grads {
        result[prim].add_assign(&g);
    }
    Ok(result)
}

/// Alpha channel of a render containing only the dynamic field, over a black
/// background.
pub fn render_dynamic_alpha(
    scene: &SceneModel,
    t: f64,
    view: &ViewSample,
    opts: &RenderOptions,
) -> Result<ImageGray> {
    let prims = if scene.dynamic_field.primitive_count() == 0 {
        Vec::new()
    } else {
        crate::scene::interpolate_dynamic(&scene.dynamic_field, t)?
    };
    let mut o = *opts;
    o.background_color = [0.0, 0.0, 0.0];
    let frame = render_no_tape(&prims, view, &o)?;
    Ok(frame.alpha)
}
