//! Rectifier training on paired degraded/ground-truth renders with a
//! pixel-perceptual objective. Only the adapters, skip projections, γ, and
//! attention weights receive updates; the base convs stay frozen.

use super::net::{NetGrads, RectifierArch, RectifierNet, ReferenceSet};
use crate::camera::ViewSample;
use crate::error::{Error, Result};
use crate::image::{sobel_xy, sobel_xy_adjoint, ImageRgb};
use crate::opt::Adam;
use crate::render::{render_no_tape, RenderOptions};
use crate::scene::SceneModel;
use crate::seeding;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RectifierTrainConfig {
    pub arch: RectifierArch,
    pub lambda_pix: f64,
    pub lambda_per: f64,
    /// Bridge strength during training (held at 1).
    pub lambda_res_train: f64,
    /// Bridge strength at inference, adjustable to balance enhancement
    /// against structural fidelity.
    pub lambda_res_infer: f64,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for RectifierTrainConfig {
    fn default() -> Self {
        RectifierTrainConfig {
            arch: RectifierArch::default(),
            lambda_pix: 1.0,
            lambda_per: 1.0,
            lambda_res_train: 1.0,
            lambda_res_infer: 1.0,
            steps: 400,
            batch: 4,
            learning_rate: 1e-3,
        }
    }
}

/// One training sample: a degraded render, its ground truth, and the images
/// whose latents form the reference set.
#[derive(Debug, Clone)]
pub struct DegradationPair {
    pub degraded: ImageRgb,
    pub ground_truth: ImageRgb,
    pub spatial_images: Vec<ImageRgb>,
    pub temporal_images: Vec<ImageRgb>,
}

/// Per-step batch losses plus the running best (non-increasing).
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub best_so_far: Vec<f64>,
}

impl TrainTrace {
    fn push(&mut self, loss: f64) {
        let best = self
            .best_so_far
            .last()
            .copied()
            .unwrap_or(f64::INFINITY)
            .min(loss);
        self.losses.push(loss);
        self.best_so_far.push(best);
    }
}

fn image_to_array(img: &ImageRgb) -> Array3<f64> {
    let (w, h) = (img.width, img.height);
    Array3::from_shape_fn((3, h, w), |(c, y, x)| img.data[(y * w + x) * 3 + c])
}

const EDGE_EPS: f64 = 1e-6;

/// Per-channel Sobel gradient-magnitude map scaled into [0,1].
fn edge_magnitude(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (gx, gy) = sobel_xy(plane, w, h);
    let s: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| ((x * x + y * y + EDGE_EPS).sqrt()) / std::f64::consts::SQRT_2)
        .collect();
    (s, gx, gy)
}

/// Edge-based perceptual proxy: mean L1 distance between Sobel
/// gradient-magnitude maps, in [0,1].
pub fn perceptual_proxy(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("perceptual proxy shapes".into()));
    }
    Ok(perceptual_proxy_arrays(&image_to_array(a), &image_to_array(b)).0)
}

/// Proxy value and its gradient w.r.t. `a` (both as (3,H,W) arrays).
pub fn perceptual_proxy_arrays(a: &Array3<f64>, b: &Array3<f64>) -> (f64, Array3<f64>) {
    let (c, h, w) = a.dim();
    let n = (c * h * w) as f64;
    let mut total = 0.0;
    let mut grad = Array3::zeros((c, h, w));
    for ci in 0..c {
        let pa: Vec<f64> = a
            .index_axis(ndarray::Axis(0), ci)
            .iter()
            .copied()
            .collect();
        let pb: Vec<f64> = b
            .index_axis(ndarray::Axis(0), ci)
            .iter()
            .copied()
            .collect();
        let (sa, gxa, gya) = edge_magnitude(&pa, w, h);
        let (sb, _, _) = edge_magnitude(&pb, w, h);
        let mut g_gx = vec![0.0; w * h];
        let mut g_gy = vec![0.0; w * h];
        for p in 0..w * h {
            let diff = sa[p] - sb[p];
            total += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            // s = sqrt(gx²+gy²+eps)/√2
            let q = (gxa[p] * gxa[p] + gya[p] * gya[p] + EDGE_EPS).sqrt();
            let scale = sign / (n * std::f64::consts::SQRT_2 * q);
            g_gx[p] = scale * gxa[p];
            g_gy[p] = scale * gya[p];
        }
        let g_plane = sobel_xy_adjoint(&g_gx, &g_gy, w, h);
        for y in 0..h {
            for x in 0..w {
                grad[(ci, y, x)] = g_plane[y * w + x];
            }
        }
    }
    (total / n, grad)
}

/// λ_pix·L1 + λ_per·P on an unclamped output; returns loss and d/d(output).
fn pair_loss(
    out: &Array3<f64>,
    gt: &Array3<f64>,
    lambda_pix: f64,
    lambda_per: f64,
) -> (f64, Array3<f64>) {
    let n = out.len() as f64;
    let mut l1 = 0.0;
    let mut grad = Array3::zeros(out.dim());
    ndarray::Zip::from(&mut grad).and(out).and(gt).for_each(|g, &o, &t| {
        let diff = o - t;
        l1 += diff.abs();
        *g = lambda_pix * diff.signum() / n;
    });
    l1 /= n;
    let (per, per_grad) = perceptual_proxy_arrays(out, gt);
    let loss = lambda_pix * l1 + lambda_per * per;
    grad.zip_mut_with(&per_grad, |g, &pg| *g += lambda_per * pg);
    (loss, grad)
}

/// Minimize the pixel-perceptual objective over the trainable parameters.
/// Deterministic under a fixed seed; returns the net and its loss trace.
pub fn train_rectifier(
    pairs: &[DegradationPair],
    cfg: &RectifierTrainConfig,
    rng_seed: u64,
) -> Result<(RectifierNet, TrainTrace)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("rectifier training pairs".into()));
    }
    let mut net = RectifierNet::new(cfg.arch, seeding::derive(rng_seed, "rectifier-init", 0));
    let trace = train_rectifier_in_place(&mut net, pairs, cfg, rng_seed)?;
    Ok((net, trace))
}

/// Same as `train_rectifier` but continues from an existing net.
pub fn train_rectifier_in_place(
    net: &mut RectifierNet,
    pairs: &[DegradationPair],
    cfg: &RectifierTrainConfig,
    rng_seed: u64,
) -> Result<TrainTrace> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("rectifier training pairs".into()));
    }
    for p in pairs {
        if !p.degraded.same_shape(&p.ground_truth) {
            return Err(Error::ShapeMismatch(
                "degraded/ground-truth resolution mismatch".into(),
            ));
        }
    }
    // reference latents are constants: the encoder is frozen
    let refs: Vec<ReferenceSet> = pairs
        .iter()
        .map(|p| ReferenceSet::from_images(net, &p.spatial_images, &p.temporal_images))
        .collect::<Result<_>>()?;
    let gts: Vec<Array3<f64>> = pairs.iter().map(|p| image_to_array(&p.ground_truth)).collect();

    let mut theta = net.trainable_flat();
    let mut adam = Adam::new(theta.len(), cfg.learning_rate);
    let mut sampler = ChaCha20Rng::seed_from_u64(seeding::derive(rng_seed, "rectifier-batch", 0));
    let mut trace = TrainTrace::default();

    for _step in 0..cfg.steps {
        let mut grads = NetGrads::default();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch.max(1) {
            let idx = sampler.random_range(0..pairs.len());
            let cache = net.forward_train(&pairs[idx].degraded, &refs[idx], cfg.lambda_res_train)?;
            let (loss, g_y) = pair_loss(&cache.y, &gts[idx], cfg.lambda_pix, cfg.lambda_per);
            batch_loss += loss;
            net.backward_train(&cache, &g_y, &mut grads);
        }
        let b = cfg.batch.max(1) as f64;
        let mut flat = grads.to_flat(net);
        for g in &mut flat {
            *g /= b;
        }
        adam.step(&mut theta, &flat);
        net.set_trainable_flat(&theta);
        trace.push(batch_loss / b);
    }
    Ok(trace)
}

/// Paired samples rendered at the given viewpoints: degraded from the
/// sparse-trained scene, ground truth from the reference scene. Reference
/// sets hold same-timestamp renders of other cameras (spatial) and a ±w frame
/// window of the same camera (temporal), clipped at sequence boundaries.
pub fn make_degradation_pairs(
    reference_scene: &SceneModel,
    sparse_scene: &SceneModel,
    views: &[ViewSample],
    opts: &RenderOptions,
    temporal_window: usize,
) -> Result<Vec<DegradationPair>> {
    let render_scene = |scene: &SceneModel, view: &ViewSample| -> Result<ImageRgb> {
        let assembled = scene.assemble(view.timestamp)?;
        Ok(render_no_tape(&assembled.primitives, view, opts)?.color)
    };
    // render the degraded domain once per view
    let degraded: Vec<ImageRgb> = views
        .iter()
        .map(|v| render_scene(sparse_scene, v))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(views.len());
    for (i, view) in views.iter().enumerate() {
        let ground_truth = render_scene(reference_scene, view)?;
        let mut spatial = Vec::new();
        let mut temporal = Vec::new();
        for (j, other) in views.iter().enumerate() {
            if i == j {
                continue;
            }
            if other.timestamp == view.timestamp {
                spatial.push(degraded[j].clone());
            } else if other.camera_index == view.camera_index
                && (other.timestamp - view.timestamp).abs() <= temporal_window as f64
            {
                temporal.push(degraded[j].clone());
            }
        }
        pairs.push(DegradationPair {
            degraded: degraded[i].clone(),
            ground_truth,
            spatial_images: spatial,
            temporal_images: temporal,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rectifier::{rectify, ReferenceSet};
    use rand::Rng;

    fn tiny_cfg() -> RectifierTrainConfig {
        RectifierTrainConfig {
            arch: RectifierArch {
                base_channels: 4,
                latent_channels: 8,
                rank: 4,
            },
            steps: 60,
            batch: 2,
            learning_rate: 2e-3,
            ..Default::default()
        }
    }

    fn checkerboard(w: usize, h: usize, cell: usize, seed: u64) -> ImageRgb {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c1: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let c2: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let mut img = ImageRgb::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = if (x / cell + y / cell) % 2 == 0 { c1 } else { c2 };
                img.set_pixel(x, y, v);
            }
        }
        img
    }

    fn gaussian_blur3(img: &ImageRgb, sigma: f64) -> ImageRgb {
        let mut taps = [0.0f64; 9];
        let mut sum = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                taps[((dy + 1) * 3 + dx + 1) as usize] = v;
                sum += v;
            }
        }
        for t in &mut taps {
            *t /= sum;
        }
        let (w, h) = (img.width as i64, img.height as i64);
        let mut out = ImageRgb::new(img.width, img.height);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (sx, sy) = ((x + dx).clamp(0, w - 1), (y + dy).clamp(0, h - 1));
                        let p = img.pixel(sx as usize, sy as usize);
                        let t = taps[((dy + 1) * 3 + dx + 1) as usize];
                        for c in 0..3 {
                            acc[c] += t * p[c];
                        }
                    }
                }
                out.set_pixel(x as usize, y as usize, acc);
            }
        }
        out
    }

    #[test]
    fn perceptual_proxy_zero_on_identical_and_grad_matches_fd() {
        let img = checkerboard(12, 12, 3, 1);
        assert_eq!(perceptual_proxy(&img, &img).unwrap(), 0.0);

        let a = image_to_array(&checkerboard(8, 8, 2, 2));
        let b = image_to_array(&checkerboard(8, 8, 4, 3));
        let (_, grad) = perceptual_proxy_arrays(&a, &b);
        let h = 1e-6;
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..20 {
            let idx = (
                rng.random_range(0..3),
                rng.random_range(0..8),
                rng.random_range(0..8),
            );
            let mut ap = a.clone();
            ap[idx] += h;
            let mut am = a.clone();
            am[idx] -= h;
            let fp = perceptual_proxy_arrays(&ap, &b).0;
            let fm = perceptual_proxy_arrays(&am, &b).0;
            let fd = (fp - fm) / (2.0 * h);
            let g = grad[idx];
            assert!(
                (g - fd).abs() < 1e-7,
                "proxy grad mismatch at {idx:?}: {g} vs {fd}"
            );
        }
    }

    #[test]
    fn empty_pairs_is_an_error() {
        assert!(matches!(
            train_rectifier(&[], &tiny_cfg(), 1),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn no_degradation_keeps_loss_at_codec_floor() {
        let imgs: Vec<ImageRgb> = (0..3).map(|i| checkerboard(16, 16, 4, 10 + i)).collect();
        let pairs: Vec<DegradationPair> = imgs
            .iter()
            .map(|img| DegradationPair {
                degraded: img.clone(),
                ground_truth: img.clone(),
                spatial_images: vec![],
                temporal_images: vec![],
            })
            .collect();
        let cfg = tiny_cfg();
        let (net, trace) = train_rectifier(&pairs, &cfg, 5).unwrap();
        // initialization is a near-identity, so the very first loss is small
        assert!(
            trace.losses[0] < 0.1,
            "initial loss {} should sit at the codec floor",
            trace.losses[0]
        );
        // and training an already-perfect mapping does not make it worse
        let last_best = *trace.best_so_far.last().unwrap();
        assert!(last_best <= trace.losses[0] + 1e-9);
        let out = rectify(&imgs[0], &ReferenceSet::empty(), &net, 0.0).unwrap();
        assert!(out.mean_abs_diff(&imgs[0]) < 0.1);
    }

    #[test]
    fn best_so_far_trace_is_monotone() {
        let pairs = vec![DegradationPair {
            degraded: checkerboard(16, 16, 2, 20),
            ground_truth: checkerboard(16, 16, 2, 21),
            spatial_images: vec![],
            temporal_images: vec![],
        }];
        let (_, trace) = train_rectifier(&pairs, &tiny_cfg(), 6).unwrap();
        for w in trace.best_so_far.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(trace.losses.len(), tiny_cfg().steps);
    }

    #[test]
    fn training_halves_blur_l1_on_checkerboards() {
        // oracle baseline: the untrained forward pass fixes the initial L1
        let mut pairs = Vec::new();
        for i in 0..6 {
            let sharp = checkerboard(24, 24, 4 + (i as usize % 3), 30 + i);
            let blurred = gaussian_blur3(&sharp, 0.6);
            pairs.push(DegradationPair {
                degraded: blurred,
                ground_truth: sharp,
                spatial_images: vec![],
                temporal_images: vec![],
            });
        }
        let cfg = RectifierTrainConfig {
            arch: RectifierArch {
                base_channels: 8,
                latent_channels: 16,
                rank: 8,
            },
            steps: 700,
            batch: 3,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let initial_net = RectifierNet::new(cfg.arch, seeding::derive(7, "rectifier-init", 0));
        let measure = |net: &RectifierNet| -> f64 {
            pairs
                .iter()
                .map(|p| {
                    let out = rectify(&p.degraded, &ReferenceSet::empty(), net, 1.0).unwrap();
                    out.mean_abs_diff(&p.ground_truth)
                })
                .sum::<f64>()
                / pairs.len() as f64
        };
        let initial_l1 = measure(&initial_net);
        let (net, _) = train_rectifier(&pairs, &cfg, 7).unwrap();
        let final_l1 = measure(&net);
        assert!(
            final_l1 <= 0.5 * initial_l1,
            "final {final_l1} vs initial {initial_l1}"
        );
    }

    #[test]
    fn degradation_pairs_shapes_and_references() {
        use crate::camera::{CameraIntrinsics, CameraPose};
        use crate::math::Quat;
        use crate::scene::{GaussianPrimitive, SceneModel};
        use nalgebra::Vector3;

        let mut scene = SceneModel::new((0.0, 4.0), vec![0.0, 4.0]);
        scene.add_static(GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, 1.5),
            Quat::IDENTITY,
            Vector3::new(0.1, 0.1, 0.1),
            0.9,
            Vector3::new(0.8, 0.3, 0.2),
        ));
        let mut sparse = scene.clone();
        sparse.static_field.primitives[0].color = Vector3::new(0.2, 0.2, 0.2);

        let intr = CameraIntrinsics::new((40.0, 40.0), (7.5, 7.5), (16, 16));
        let mut views = Vec::new();
        for cam in 0..2u32 {
            for frame in 0..5 {
                views.push(ViewSample {
                    pose: CameraPose::identity(),
                    intrinsics: intr,
                    timestamp: frame as f64,
                    is_observed: true,
                    camera_index: Some(cam),
                    gt_image: None,
                });
            }
        }
        let opts = RenderOptions::default();
        let pairs = make_degradation_pairs(&scene, &sparse, &views, &opts, 2).unwrap();
        assert_eq!(pairs.len(), views.len());
        // camera 0, frame 0: one spatial ref (cam 1 same frame), temporal
        // window clipped to frames {1, 2}
        assert_eq!(pairs[0].spatial_images.len(), 1);
        assert_eq!(pairs[0].temporal_images.len(), 2);
        // interior frame 2: temporal refs {0,1,3,4}
        assert_eq!(pairs[2].temporal_images.len(), 4);
        // degraded differs from ground truth; identical scenes give zero diff
        assert!(pairs[0].degraded.mean_abs_diff(&pairs[0].ground_truth) > 0.0);
        let same = make_degradation_pairs(&scene, &scene, &views[..2], &opts, 2).unwrap();
        assert_eq!(same[0].degraded, same[0].ground_truth);
    }

    #[test]
    fn temporal_references_suppress_flicker_after_training() {
        // static content with per-frame global flicker; train WITH temporal
        // references, then A/B the trained net with refs vs without
        let clean = checkerboard(16, 16, 4, 50);
        let n_frames = 8;
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let noisy: Vec<ImageRgb> = (0..n_frames)
            .map(|_| {
                let delta = 0.25 * (rng.random::<f64>() - 0.5);
                let mut img = clean.clone();
                for v in &mut img.data {
                    *v = (*v + delta).clamp(0.0, 1.0);
                }
                img
            })
            .collect();
        let pairs: Vec<DegradationPair> = (0..n_frames)
            .map(|t| DegradationPair {
                degraded: noisy[t].clone(),
                ground_truth: clean.clone(),
                spatial_images: vec![],
                temporal_images: vec![
                    noisy[(t + n_frames - 1) % n_frames].clone(),
                    noisy[(t + 1) % n_frames].clone(),
                ],
            })
            .collect();
        let cfg = RectifierTrainConfig {
            arch: RectifierArch {
                base_channels: 8,
                latent_channels: 16,
                rank: 8,
            },
            steps: 400,
            batch: 2,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (net, _) = train_rectifier(&pairs, &cfg, 52).unwrap();

        let outputs = |with_refs: bool| -> Vec<ImageRgb> {
            (0..n_frames)
                .map(|t| {
                    let refs = if with_refs {
                        ReferenceSet::from_images(&net, &[], &pairs[t].temporal_images).unwrap()
                    } else {
                        ReferenceSet::empty()
                    };
                    rectify(&noisy[t], &refs, &net, 1.0).unwrap()
                })
                .collect()
        };
        let frame_variance = |frames: &[ImageRgb]| -> f64 {
            let n = frames.len() as f64;
            let len = frames[0].data.len();
            let mut total = 0.0;
            for i in 0..len {
                let mean = frames.iter().map(|f| f.data[i]).sum::<f64>() / n;
                total += frames
                    .iter()
                    .map(|f| (f.data[i] - mean) * (f.data[i] - mean))
                    .sum::<f64>()
                    / n;
            }
            total / len as f64
        };
        let with_refs = frame_variance(&outputs(true));
        let without = frame_variance(&outputs(false));
        assert!(
            with_refs < without,
            "temporal refs should lower frame variance: {with_refs} vs {without}"
        );
    }
}

