//! Synthetic scene generation: seeded ground-truth scenes with parametric
//! splat trajectories, a camera ring, dense renders, and the sparse/holdout
//! split. Supplies the ground truth that real capture datasets would provide.

use crate::camera::{self, CameraIntrinsics, CameraPose, ViewSample};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::math::Quat;
use crate::render::{render_no_tape, RenderOptions};
use crate::scene::{GaussianPrimitive, SceneModel};
use crate::seeding;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Linear,
    Circular,
    Sinusoidal,
}

/// Parametric trajectory of one dynamic splat around its base position.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Trajectory {
    pub kind: MotionKind,
    pub base: [f64; 3],
    pub direction: [f64; 3],
    pub amplitude: f64,
    pub period: f64,
}

impl Trajectory {
    /// Position at (possibly fractional) frame t.
    pub fn position(&self, t: f64) -> Vector3<f64> {
        let base = Vector3::from(self.base);
        let dir = Vector3::from(self.direction).normalize();
        match self.kind {
            MotionKind::Linear => {
                // back and forth over one period
                let phase = (t / self.period).rem_euclid(1.0);
                let s = if phase < 0.5 {
                    4.0 * phase - 1.0
                } else {
                    3.0 - 4.0 * phase
                };
                base + dir * (self.amplitude * s)
            }
            MotionKind::Circular => {
                let theta = std::f64::consts::TAU * t / self.period;
                // orthonormal frame around dir
                let u = orthogonal_to(&dir);
                let v = dir.cross(&u);
                base + (u * theta.cos() + v * theta.sin()) * self.amplitude
            }
            MotionKind::Sinusoidal => {
                let theta = std::f64::consts::TAU * t / self.period;
                base + dir * (self.amplitude * theta.sin())
            }
        }
    }
}

fn orthogonal_to(d: &Vector3<f64>) -> Vector3<f64> {
    let candidate = if d.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    d.cross(&candidate).normalize()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub static_splat_count: usize,
    pub dynamic_splat_count: usize,
    /// Cycled over dynamic splats.
    pub motion_kinds: Vec<MotionKind>,
    pub motion_amplitude: f64,
    pub motion_period: f64,
    pub frame_count: usize,
    pub camera_count: usize,
    pub camera_radius: f64,
    pub camera_height: f64,
    pub look_at: [f64; 3],
    pub resolution: (u32, u32),
    pub focal: f64,
    /// Half-width of the box holding splat centers.
    pub extent: f64,
    pub splat_scale: f64,
    pub background: [f64; 3],
    pub seed: u64,
    /// Training cameras: every `train_stride`-th camera starting at
    /// `train_offset`, capped at `train_count`.
    pub train_offset: usize,
    pub train_stride: usize,
    pub train_count: usize,
    pub holdout_camera: u32,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            static_splat_count: 48,
            dynamic_splat_count: 6,
            motion_kinds: vec![
                MotionKind::Linear,
                MotionKind::Circular,
                MotionKind::Sinusoidal,
            ],
            motion_amplitude: 0.45,
            motion_period: 30.0,
            frame_count: 30,
            camera_count: 8,
            camera_radius: 3.0,
            camera_height: 0.6,
            look_at: [0.0, 0.0, 0.0],
            resolution: (96, 96),
            focal: 0.0,
            extent: 0.85,
            splat_scale: 0.16,
            background: [0.02, 0.02, 0.03],
            seed: 0,
            train_offset: 1,
            train_stride: 2,
            train_count: 4,
            holdout_camera: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn train_cameras(&self) -> Vec<u32> {
        (0..self.camera_count as u32)
            .skip(self.train_offset)
            .step_by(self.train_stride.max(1))
            .take(self.train_count)
            .collect()
    }

    /// Focal length; non-positive means auto (scaled to the resolution so
    /// the splat box fits every ring camera's frustum).
    pub fn effective_focal(&self) -> f64 {
        if self.focal > 0.0 {
            self.focal
        } else {
            1.15 * self.resolution.0.min(self.resolution.1) as f64
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let (w, h) = self.resolution;
        let f = self.effective_focal();
        CameraIntrinsics::new(
            (f, f),
            ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
            (w, h),
        )
    }

    pub fn camera_pose(&self, index: u32) -> CameraPose {
        let angle = index as f64 / self.camera_count as f64 * std::f64::consts::TAU;
        let eye = Vector3::new(
            self.camera_radius * angle.cos(),
            self.camera_height,
            self.camera_radius * angle.sin(),
        );
        CameraPose::look_at(eye, Vector3::from(self.look_at), Vector3::new(0.0, 1.0, 0.0))
    }
}

/// The generated ground truth: the scene, every (camera, frame) view with its
/// image attached, the trajectories, and the train/holdout split.
pub struct SyntheticDataset {
    pub spec: SyntheticSceneSpec,
    pub gt_scene: SceneModel,
    pub trajectories: Vec<Trajectory>,
    /// All views, camera-major: views[cam * frame_count + frame].
    pub views: Vec<ViewSample>,
    pub train_cameras: Vec<u32>,
    pub holdout_camera: u32,
}

impl SyntheticDataset {
    pub fn view(&self, camera: u32, frame: usize) -> &ViewSample {
        &self.views[camera as usize * self.spec.frame_count + frame]
    }

    pub fn train_views(&self) -> Vec<ViewSample> {
        self.views
            .iter()
            .filter(|v| self.train_cameras.contains(&v.camera_index.unwrap()))
            .cloned()
            .collect()
    }

    pub fn holdout_views(&self) -> Vec<ViewSample> {
        self.views
            .iter()
            .filter(|v| v.camera_index == Some(self.holdout_camera))
            .cloned()
            .collect()
    }
}

/// Deterministic under the spec seed. Trajectories are verified to stay in
/// every camera's frustum for all frames.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticDataset> {
    if spec.frame_count == 0 || spec.camera_count == 0 {
        return Err(Error::Config {
            key: "frame_count/camera_count".into(),
            message: "must be positive".into(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seeding::derive(spec.seed, "synth", 0));
    let t_max = (spec.frame_count - 1) as f64;
    let anchor_times: Vec<f64> = (0..spec.frame_count).map(|f| f as f64).collect();
    let mut scene = SceneModel::new((0.0, t_max), anchor_times);

    let rand_unit = |rng: &mut ChaCha20Rng| {
        Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        )
        .normalize()
    };

    for _ in 0..spec.static_splat_count {
        let pos = Vector3::new(
            (rng.random::<f64>() - 0.5) * 2.0 * spec.extent,
            (rng.random::<f64>() - 0.5) * 2.0 * spec.extent,
            (rng.random::<f64>() - 0.5) * 2.0 * spec.extent,
        );
        let axis = rand_unit(&mut rng);
        let angle = rng.random::<f64>() * std::f64::consts::TAU;
        let scale = spec.splat_scale * (0.6 + 0.8 * rng.random::<f64>());
        let prim = GaussianPrimitive::new(
            pos,
            Quat::from_axis_angle(axis, angle),
            Vector3::new(
                scale,
                scale * (0.5 + rng.random::<f64>()),
                scale * (0.5 + rng.random::<f64>()),
            ),
            0.75 + 0.2 * rng.random::<f64>(),
            Vector3::new(rng.random(), rng.random(), rng.random()),
        );
        scene.add_static(prim);
    }

    // dynamic splats: trajectory bases kept away from the box border so the
    // motion stays in the shared frustum
    let mut trajectories = Vec::with_capacity(spec.dynamic_splat_count);
    for i in 0..spec.dynamic_splat_count {
        let kind = spec.motion_kinds[i % spec.motion_kinds.len().max(1)];
        let safe = (spec.extent - spec.motion_amplitude).max(0.1);
        let base = Vector3::new(
            (rng.random::<f64>() - 0.5) * 2.0 * safe,
            (rng.random::<f64>() - 0.5) * 2.0 * safe,
            (rng.random::<f64>() - 0.5) * 2.0 * safe,
        );
        let traj = Trajectory {
            kind,
            base: [base.x, base.y, base.z],
            direction: rand_unit(&mut rng).into(),
            amplitude: spec.motion_amplitude,
            period: spec.motion_period,
        };
        let scale = spec.splat_scale * (0.7 + 0.6 * rng.random::<f64>());
        let prim = GaussianPrimitive::new(
            traj.position(0.0),
            Quat::from_axis_angle(rand_unit(&mut rng), rng.random::<f64>()),
            Vector3::new(scale, scale, scale),
            0.85 + 0.12 * rng.random::<f64>(),
            Vector3::new(rng.random(), rng.random(), rng.random()),
        );
        scene.add_dynamic_replicated(prim);
        trajectories.push(traj);
    }
    // write exact trajectory positions into every anchor
    for (a, &t) in scene.dynamic_field.anchor_times.clone().iter().enumerate() {
        for (d, traj) in trajectories.iter().enumerate() {
            scene.dynamic_field.anchor_states[a][d].position = traj.position(t);
        }
    }

    // frustum validation for every trajectory, frame, and camera
    let intr = spec.intrinsics();
    let margin = 2.0;
    for (cam, _) in (0..spec.camera_count as u32).enumerate() {
        let pose = spec.camera_pose(cam as u32);
        for frame in 0..spec.frame_count {
            for (i, traj) in trajectories.iter().enumerate() {
                let p = traj.position(frame as f64);
                let ok = match camera::project_point(&p, &pose, &intr) {
                    Some((pix, _)) => {
                        pix.x >= margin
                            && pix.y >= margin
                            && pix.x <= intr.resolution.0 as f64 - 1.0 - margin
                            && pix.y <= intr.resolution.1 as f64 - 1.0 - margin
                    }
                    None => false,
                };
                if !ok {
                    return Err(Error::FrustumViolation {
                        index: i,
                        frame,
                        view: cam,
                    });
                }
            }
        }
    }

    // render every (camera, frame) pair
    let opts = RenderOptions {
        background_color: spec.background,
        ..Default::default()
    };
    let mut views = Vec::with_capacity(spec.camera_count * spec.frame_count);
    for cam in 0..spec.camera_count as u32 {
        let pose = spec.camera_pose(cam);
        for frame in 0..spec.frame_count {
            let t = frame as f64;
            let mut view = ViewSample {
                pose,
                intrinsics: intr,
                timestamp: t,
                is_observed: true,
                camera_index: Some(cam),
                gt_image: None,
            };
            let assembled = scene.assemble(t)?;
            let img = render_no_tape(&assembled.primitives, &view, &opts)?.color;
            view.gt_image = Some(Arc::new(img));
            views.push(view);
        }
    }

    Ok(SyntheticDataset {
        spec: spec.clone(),
        gt_scene: scene,
        trajectories,
        views,
        train_cameras: spec.train_cameras(),
        holdout_camera: spec.holdout_camera,
    })
}

/// On-disk layout: cameras.txt, split.txt, gt_scene.gr4d, spec.json, and
/// images/cam{c:02}_f{f:04}.ppm.
pub fn write_dataset(dir: &Path, data: &SyntheticDataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    camera::write_camera_file(&dir.join("cameras.txt"), &data.views)?;
    checkpoint::save_scene(&dir.join("gt_scene.gr4d"), &data.gt_scene)?;
    let split = format!(
        "train {}\nholdout {}\n",
        data.train_cameras
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" "),
        data.holdout_camera
    );
    std::fs::write(dir.join("split.txt"), split)?;
    let spec_json = serde_json::to_string_pretty(&data.spec)
        .map_err(|e| Error::Format(format!("spec serialization: {e}")))?;
    std::fs::write(dir.join("spec.json"), spec_json)?;
    for v in &data.views {
        let cam = v.camera_index.unwrap();
        let frame = v.timestamp as usize;
        let img = v.gt_image.as_ref().expect("synthetic views carry images");
        img.write_ppm(&dir.join(format!("images/cam{cam:02}_f{frame:04}.ppm")))?;
    }
    Ok(())
}

/// A dataset reloaded from disk (images attached, split applied).
pub struct Dataset {
    pub views: Vec<ViewSample>,
    pub train_cameras: Vec<u32>,
    pub holdout_camera: u32,
    pub gt_scene: Option<SceneModel>,
    pub frame_count: usize,
}

impl Dataset {
    pub fn train_views(&self) -> Vec<ViewSample> {
        self.views
            .iter()
            .filter(|v| {
                v.camera_index
                    .map(|c| self.train_cameras.contains(&c))
                    .unwrap_or(false)
            })
            .cloned()
            .collect()
    }

    pub fn holdout_views(&self) -> Vec<ViewSample> {
        self.views
            .iter()
            .filter(|v| v.camera_index == Some(self.holdout_camera))
            .cloned()
            .collect()
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut views = camera::read_camera_file(&dir.join("cameras.txt"))?;
    let split = std::fs::read_to_string(dir.join("split.txt"))?;
    let mut train_cameras = Vec::new();
    let mut holdout_camera = 0u32;
    for line in split.lines() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("train") => {
                train_cameras = it
                    .map(|s| {
                        s.parse()
                            .map_err(|_| Error::Format("bad split.txt train index".into()))
                    })
                    .collect::<Result<_>>()?;
            }
            Some("holdout") => {
                holdout_camera = it
                    .next()
                    .ok_or_else(|| Error::Format("split.txt holdout missing index".into()))?
                    .parse()
                    .map_err(|_| Error::Format("bad split.txt holdout index".into()))?;
            }
            _ => {}
        }
    }
    let mut frame_count = 0usize;
    for v in &mut views {
        let cam = v.camera_index.unwrap();
        let frame = v.timestamp as usize;
        frame_count = frame_count.max(frame + 1);
        let path = dir.join(format!("images/cam{cam:02}_f{frame:04}.ppm"));
        v.gt_image = Some(Arc::new(ImageRgb::read_ppm(&path)?));
        v.is_observed = true;
    }
    let gt_path = dir.join("gt_scene.gr4d");
    let gt_scene = if gt_path.exists() {
        Some(checkpoint::load_scene(&gt_path)?)
    } else {
        None
    };
    Ok(Dataset {
        views,
        train_cameras,
        holdout_camera,
        gt_scene,
        frame_count,
    })
}
