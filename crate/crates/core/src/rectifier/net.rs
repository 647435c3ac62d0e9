//! The learned rectifier network: a small encoder–decoder with projected
//! skips (structural locking), a frozen latent residual predictor carrying
//! low-rank adapters (the residual bridge), and spatio-temporal coordinated
//! attention over a reference latent set.
//!
//! Only the adapters, the skip projections, γ, and the attention weights
//! train; every base conv is frozen after initialization. The initialization
//! makes the whole net a near-identity: the stem carries the image through
//! dedicated channels, the final skip projection routes it to the output
//! conv, the attention output projection and the last residual-predictor
//! conv start at zero.

use super::nn::*;
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Latent feature map (C, H', W') at a fixed downsample factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub data: Array3<f64>,
    pub downsample_factor: usize,
}

impl LatentTensor {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Reference latents: other views at the same timestamp (spatial) and a short
/// window of neighboring frames (temporal).
#[derive(Debug, Clone, Default)]
pub struct ReferenceSet {
    pub spatial_refs: Vec<LatentTensor>,
    pub temporal_refs: Vec<LatentTensor>,
}

impl ReferenceSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.spatial_refs.len() + self.temporal_refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_images(
        net: &RectifierNet,
        spatial: &[ImageRgb],
        temporal: &[ImageRgb],
    ) -> Result<Self> {
        Ok(ReferenceSet {
            spatial_refs: spatial
                .iter()
                .map(|img| net.encode_latent(img))
                .collect::<Result<_>>()?,
            temporal_refs: temporal
                .iter()
                .map(|img| net.encode_latent(img))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RectifierArch {
    /// Stem width; encoder levels use (base, 2·base, 4·base).
    pub base_channels: usize,
    pub latent_channels: usize,
    /// Adapter rank on the residual predictor's convs.
    pub rank: usize,
}

impl Default for RectifierArch {
    fn default() -> Self {
        RectifierArch {
            base_channels: 16,
            latent_channels: 16,
            rank: 8,
        }
    }
}

pub const DOWNSAMPLE_FACTOR: usize = 4;
/// Number of skip levels (Eq.-style encoder/decoder pairing).
pub const SKIP_LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RectifierNet {
    pub arch: RectifierArch,
    // frozen codec
    stem: Conv2d,      // 3 -> b
    enc1: Conv2d,      // b -> 2b, stride 2
    enc2: Conv2d,      // 2b -> 4b, stride 2
    to_latent: Conv2d, // 4b -> latent
    up1: Conv2d,       // latent -> latent
    up2: Conv2d,       // latent -> b
    out: Conv2d,       // b -> 3
    // frozen residual predictor ε_θ, adapted via LoRA
    eps1: Conv2d, // latent -> 2·latent
    eps2: Conv2d, // 2·latent -> 2·latent
    eps3: Conv2d, // 2·latent -> latent, zero-initialized base
    // trainable
    pub proj1: Conv2d, // 4b -> latent, 1x1
    pub proj2: Conv2d, // latent -> latent, 1x1
    pub proj3: Conv2d, // b -> b, 1x1
    pub attention: AttentionParams,
    pub gamma: f64,
}

impl RectifierNet {
    pub fn new(arch: RectifierArch, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let b = arch.base_channels;
        let lat = arch.latent_channels;

        let mut stem = Conv2d::new(3, b, 3, 1, 1, true);
        stem.init_random(0.5, &mut rng);
        // carrier: channels 0..2 copy the image exactly (inputs are >= 0, so
        // the leaky relu is transparent on them)
        for co in 0..3.min(b) {
            for wi in 0..stem.n_in() {
                stem.w[(co, wi)] = 0.0;
            }
            stem.w[(co, co * 9 + 4)] = 1.0;
        }
        // remaining channels: signed edge-filter pairs (±laplacian, ±sobel);
        // a ± pair spans the exact linear filter through the leaky relu
        let basis: [[f64; 9]; 4] = [
            [0.0, -0.5, 0.0, -0.5, 2.0, -0.5, 0.0, -0.5, 0.0], // laplacian
            [-0.25, 0.0, 0.25, -0.5, 0.0, 0.5, -0.25, 0.0, 0.25], // sobel x
            [-0.25, -0.5, -0.25, 0.0, 0.0, 0.0, 0.25, 0.5, 0.25], // sobel y
            [-0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0],    // diagonal
        ];
        for co in 3..b {
            let j = co - 3;
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let kind = (j / 2) % basis.len();
            let in_ch = (j / 2) / basis.len() % 3;
            for wi in 0..stem.n_in() {
                stem.w[(co, wi)] = 0.0;
            }
            for tap in 0..9 {
                stem.w[(co, in_ch * 9 + tap)] = sign * basis[kind][tap];
            }
        }

        let kaiming = |c_in: usize| (2.0 / (c_in as f64 * 9.0)).sqrt();
        let mut enc1 = Conv2d::new(b, 2 * b, 3, 2, 1, true);
        enc1.init_random(kaiming(b), &mut rng);
        let mut enc2 = Conv2d::new(2 * b, 4 * b, 3, 2, 1, true);
        enc2.init_random(kaiming(2 * b), &mut rng);
        let mut to_latent = Conv2d::new(4 * b, lat, 3, 1, 1, true);
        to_latent.init_random(kaiming(4 * b), &mut rng);

        // decoder kept weak at init so the skip carrier dominates
        let mut up1 = Conv2d::new(lat, lat, 3, 1, 1, true);
        up1.init_random(0.25 * kaiming(lat), &mut rng);
        let mut up2 = Conv2d::new(lat, b, 3, 1, 1, true);
        up2.init_random(0.25 * kaiming(lat), &mut rng);
        let mut out = Conv2d::new(b, 3, 3, 1, 1, true);
        out.init_random(0.15, &mut rng);
        for co in 0..3 {
            for ci in 0..3.min(b) {
                for tap in 0..9 {
                    out.w[(co, ci * 9 + tap)] = 0.0;
                }
            }
            out.w[(co, co * 9 + 4)] = 1.0;
        }

        let mut eps1 = Conv2d::new(lat, 2 * lat, 3, 1, 1, true);
        eps1.init_random(kaiming(lat), &mut rng);
        let mut eps2 = Conv2d::new(2 * lat, 2 * lat, 3, 1, 1, true);
        eps2.init_random(kaiming(2 * lat), &mut rng);
        let mut eps3 = Conv2d::new(2 * lat, lat, 3, 1, 1, true);
        // zero base: the predictor starts as ε ≡ 0, so the bridge is an
        // identity at any λ_res until the adapters learn
        eps3.w.fill(0.0);
        eps1.lora = Some(LowRankAdapter::new(eps1.n_in(), eps1.c_out, arch.rank, 1.0, &mut rng));
        eps2.lora = Some(LowRankAdapter::new(eps2.n_in(), eps2.c_out, arch.rank, 1.0, &mut rng));
        eps3.lora = Some(LowRankAdapter::new(eps3.n_in(), eps3.c_out, arch.rank, 1.0, &mut rng));

        let proj1 = Conv2d::new(4 * b, lat, 1, 1, 0, false);
        let proj2 = Conv2d::new(2 * b, lat, 1, 1, 0, false);
        let mut proj3 = Conv2d::new(b, b, 1, 1, 0, false);
        for c in 0..3.min(b) {
            proj3.w[(c, c)] = 1.0;
        }

        let attention = AttentionParams::new(lat, &mut rng);

        RectifierNet {
            arch,
            stem,
            enc1,
            enc2,
            to_latent,
            up1,
            up2,
            out,
            eps1,
            eps2,
            eps3,
            proj1,
            proj2,
            proj3,
            attention,
            gamma: 1.0,
        }
    }

    pub fn check_resolution(&self, img: &ImageRgb) -> Result<()> {
        if img.width % DOWNSAMPLE_FACTOR != 0 || img.height % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} not divisible by downsample factor {DOWNSAMPLE_FACTOR}",
                img.width, img.height
            )));
        }
        Ok(())
    }

    fn image_to_array(img: &ImageRgb) -> Array3<f64> {
        let (w, h) = (img.width, img.height);
        Array3::from_shape_fn((3, h, w), |(c, y, x)| img.data[(y * w + x) * 3 + c])
    }

    fn array_to_image(arr: &Array3<f64>, clamp: bool) -> ImageRgb {
        let (_, h, w) = arr.dim();
        let mut img = ImageRgb::new(w, h);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = arr[(c, y, x)];
                    img.data[(y * w + x) * 3 + c] = if clamp { v.clamp(0.0, 1.0) } else { v };
                }
            }
        }
        img
    }

    /// Encoder feature pyramid (e1, e2, e3) and latent z_deg.
    fn encode(&self, x: &Array3<f64>) -> EncodeCache {
        let pre1 = self.stem.forward(x);
        let e1 = leaky_relu(&pre1);
        let pre2 = self.enc1.forward(&e1);
        let e2 = leaky_relu(&pre2);
        let pre3 = self.enc2.forward(&e2);
        let e3 = leaky_relu(&pre3);
        let z = self.to_latent.forward(&e3);
        EncodeCache {
            x: x.clone(),
            pre1,
            e1,
            pre2,
            e2,
            pre3,
            e3,
            z,
        }
    }

    pub fn encode_latent(&self, img: &ImageRgb) -> Result<LatentTensor> {
        self.check_resolution(img)?;
        let enc = self.encode(&Self::image_to_array(img));
        Ok(LatentTensor {
            data: enc.z,
            downsample_factor: DOWNSAMPLE_FACTOR,
        })
    }

    /// ε_θ(z): frozen conv stack with low-rank adapters.
    fn eps_forward(&self, z: &Array3<f64>) -> EpsCache {
        let p1 = self.eps1.forward(z);
        let a1 = leaky_relu(&p1);
        let p2 = self.eps2.forward(&a1);
        let a2 = leaky_relu(&p2);
        let out = self.eps3.forward(&a2);
        EpsCache {
            z: z.clone(),
            p1,
            a1,
            p2,
            a2,
            out,
        }
    }

    /// Full forward with every intermediate retained for the backward pass.
    /// Reference latents are constants (the encoder is frozen).
    pub fn forward_train(
        &self,
        input: &ImageRgb,
        refs: &ReferenceSet,
        lambda_res: f64,
    ) -> Result<ForwardCache> {
        self.check_resolution(input)?;
        let x = Self::image_to_array(input);
        let enc = self.encode(&x);

        let (z_att, attn) = stc_attention_internal(
            &LatentTensor {
                data: enc.z.clone(),
                downsample_factor: DOWNSAMPLE_FACTOR,
            },
            refs,
            &self.attention,
        )?;

        let eps = self.eps_forward(&z_att.data);
        let z_rect = &z_att.data - &(&eps.out * lambda_res);

        let skip3 = &enc.e3 * self.gamma;
        let m1 = &z_rect + &self.proj1.forward(&skip3);
        let m1_up = upsample2(&m1);
        let d1_pre = self.up1.forward(&m1_up);
        let d1 = leaky_relu(&d1_pre);

        let skip2 = &enc.e2 * self.gamma;
        let m2 = &d1 + &self.proj2.forward(&skip2);
        let m2_up = upsample2(&m2);
        let d2_pre = self.up2.forward(&m2_up);
        let d2 = leaky_relu(&d2_pre);

        let skip1 = &enc.e1 * self.gamma;
        let m3 = &d2 + &self.proj3.forward(&skip1);
        let y = self.out.forward(&m3);

        Ok(ForwardCache {
            enc,
            attn,
            z_att: z_att.data,
            eps,
            lambda_res,
            m1,
            m1_up,
            d1_pre,
            d1,
            m2,
            m2_up,
            d2_pre,
            d2,
            m3,
            y,
        })
    }

    /// Backward from a gradient on the (unclamped) output image; accumulates
    /// gradients for every trainable parameter group.
    pub fn backward_train(&self, cache: &ForwardCache, g_y: &Array3<f64>, grads: &mut NetGrads) {
        let enc = &cache.enc;
        // output conv is frozen, we only need its input gradient
        let g_m3 = self.out.backward(&cache.m3, g_y, None);

        let skip1 = &enc.e1 * self.gamma;
        let mut proj3_store = ConvGrads::default();
        let g_skip1 = self.proj3.backward(&skip1, &g_m3, Some(&mut proj3_store));
        grads.add_proj(2, proj3_store);
        grads.gamma += (&g_skip1 * &enc.e1).sum();

        let g_d2 = g_m3;
        let g_d2_pre = leaky_relu_backward(&cache.d2_pre, &g_d2);
        let g_m2_up = self.up2.backward(&cache.m2_up, &g_d2_pre, None);
        let g_m2 = upsample2_backward(&g_m2_up);

        let skip2 = &enc.e2 * self.gamma;
        let mut proj2_store = ConvGrads::default();
        let g_skip2 = self.proj2.backward(&skip2, &g_m2, Some(&mut proj2_store));
        grads.add_proj(1, proj2_store);
        grads.gamma += (&g_skip2 * &enc.e2).sum();

        let g_d1 = g_m2;
        let g_d1_pre = leaky_relu_backward(&cache.d1_pre, &g_d1);
        let g_m1_up = self.up1.backward(&cache.m1_up, &g_d1_pre, None);
        let g_m1 = upsample2_backward(&g_m1_up);

        let skip3 = &enc.e3 * self.gamma;
        let mut proj1_store = ConvGrads::default();
        let g_skip3 = self.proj1.backward(&skip3, &g_m1, Some(&mut proj1_store));
        grads.add_proj(0, proj1_store);
        grads.gamma += (&g_skip3 * &enc.e3).sum();

        // bridge: z_rect = z_att − λ·ε(z_att)
        let g_z_rect = g_m1;
        let g_eps_out = &g_z_rect * (-cache.lambda_res);
        // ε stack backward: adapters train, bases are frozen
        let mut eps3_store = ConvGrads::default();
        let g_a2 = self
            .eps3
            .backward(&cache.eps.a2, &g_eps_out, Some(&mut eps3_store));
        grads.add_eps(2, eps3_store);
        let g_p2 = leaky_relu_backward(&cache.eps.p2, &g_a2);
        let mut eps2_store = ConvGrads::default();
        let g_a1 = self
            .eps2
            .backward(&cache.eps.a1, &g_p2, Some(&mut eps2_store));
        grads.add_eps(1, eps2_store);
        let g_p1 = leaky_relu_backward(&cache.eps.p1, &g_a1);
        let mut eps1_store = ConvGrads::default();
        let g_z_att_from_eps = self
            .eps1
            .backward(&cache.eps.z, &g_p1, Some(&mut eps1_store));
        grads.add_eps(0, eps1_store);

        let g_z_att = &g_z_rect + &g_z_att_from_eps;

        // attention: parameter grads only (the encoder upstream is frozen)
        let (c, h, w) = g_z_att.dim();
        let mut g_target_tokens = Array2::zeros((h * w, c));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    g_target_tokens[(y * w + x, ci)] = g_z_att[(ci, y, x)];
                }
            }
        }
        self::attention_param_backward(&cache.attn, &self.attention, &g_target_tokens, grads);
    }

    /// Inference: encode, attend, bridge, decode; output clamped to [0,1].
    pub fn rectify_image(
        &self,
        input: &ImageRgb,
        refs: &ReferenceSet,
        lambda_res: f64,
    ) -> Result<ImageRgb> {
        let cache = self.forward_train(input, refs, lambda_res)?;
        Ok(Self::array_to_image(&cache.y, true))
    }

    /// Canonical order of trainable parameters (flattened).
    pub fn trainable_flat(&self) -> Vec<f64> {
        let mut out = vec![self.gamma];
        for p in [&self.proj1, &self.proj2, &self.proj3] {
            out.extend(p.w.iter());
        }
        for a in [
            &self.attention.wq,
            &self.attention.wk,
            &self.attention.wv,
            &self.attention.wo,
        ] {
            out.extend(a.iter());
        }
        for e in [&self.eps1, &self.eps2, &self.eps3] {
            let l = e.lora.as_ref().expect("eps convs carry adapters");
            out.extend(l.down.iter());
            out.extend(l.up.iter());
        }
        out
    }

    pub fn set_trainable_flat(&mut self, flat: &[f64]) {
        let mut idx = 0usize;
        let mut take = |n: usize| {
            let s = &flat[idx..idx + n];
            idx += n;
            s
        };
        self.gamma = take(1)[0];
        for p in [&mut self.proj1, &mut self.proj2, &mut self.proj3] {
            let n = p.w.len();
            p.w.as_slice_mut().unwrap().copy_from_slice(take(n));
        }
        for a in [
            &mut self.attention.wq,
            &mut self.attention.wk,
            &mut self.attention.wv,
            &mut self.attention.wo,
        ] {
            let n = a.len();
            a.as_slice_mut().unwrap().copy_from_slice(take(n));
        }
        for e in [&mut self.eps1, &mut self.eps2, &mut self.eps3] {
            let l = e.lora.as_mut().unwrap();
            let n = l.down.len();
            l.down.as_slice_mut().unwrap().copy_from_slice(take(n));
            let n = l.up.len();
            l.up.as_slice_mut().unwrap().copy_from_slice(take(n));
        }
        assert_eq!(idx, flat.len(), "trainable parameter count mismatch");
    }

    /// Every parameter (frozen and trainable) in a fixed order, for bit-exact
    /// checkpointing.
    pub fn all_params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for conv in self.all_convs() {
            out.extend(conv.w.iter());
            if let Some(b) = &conv.bias {
                out.extend(b.iter());
            }
            if let Some(l) = &conv.lora {
                out.extend(l.down.iter());
                out.extend(l.up.iter());
                out.push(l.scaling);
            }
        }
        for a in [
            &self.attention.wq,
            &self.attention.wk,
            &self.attention.wv,
            &self.attention.wo,
        ] {
            out.extend(a.iter());
        }
        out.push(self.gamma);
        out
    }

    pub fn set_all_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.all_params_flat().len();
        if flat.len() != expected {
            return Err(Error::Format(format!(
                "net parameter count {} does not match architecture ({expected})",
                flat.len()
            )));
        }
        let mut idx = 0usize;
        macro_rules! take {
            ($n:expr) => {{
                let s = &flat[idx..idx + $n];
                idx += $n;
                s
            }};
        }
        for conv in self.all_convs_mut() {
            let n = conv.w.len();
            conv.w.as_slice_mut().unwrap().copy_from_slice(take!(n));
            if let Some(b) = &mut conv.bias {
                let n = b.len();
                b.as_slice_mut().unwrap().copy_from_slice(take!(n));
            }
            if let Some(l) = &mut conv.lora {
                let n = l.down.len();
                l.down.as_slice_mut().unwrap().copy_from_slice(take!(n));
                let n = l.up.len();
                l.up.as_slice_mut().unwrap().copy_from_slice(take!(n));
                l.scaling = take!(1)[0];
            }
        }
        for a in [
            &mut self.attention.wq,
            &mut self.attention.wk,
            &mut self.attention.wv,
            &mut self.attention.wo,
        ] {
            let n = a.len();
            a.as_slice_mut().unwrap().copy_from_slice(take!(n));
        }
        self.gamma = take!(1)[0];
        debug_assert_eq!(idx, flat.len());
        Ok(())
    }

    fn all_convs(&self) -> [&Conv2d; 13] {
        [
            &self.stem,
            &self.enc1,
            &self.enc2,
            &self.to_latent,
            &self.eps1,
            &self.eps2,
            &self.eps3,
            &self.up1,
            &self.up2,
            &self.out,
            &self.proj1,
            &self.proj2,
            &self.proj3,
        ]
    }

    fn all_convs_mut(&mut self) -> [&mut Conv2d; 13] {
        [
            &mut self.stem,
            &mut self.enc1,
            &mut self.enc2,
            &mut self.to_latent,
            &mut self.eps1,
            &mut self.eps2,
            &mut self.eps3,
            &mut self.up1,
            &mut self.up2,
            &mut self.out,
            &mut self.proj1,
            &mut self.proj2,
            &mut self.proj3,
        ]
    }
}

pub struct EncodeCache {
    pub x: Array3<f64>,
    pub pre1: Array3<f64>,
    pub e1: Array3<f64>,
    pub pre2: Array3<f64>,
    pub e2: Array3<f64>,
    pub pre3: Array3<f64>,
    pub e3: Array3<f64>,
    pub z: Array3<f64>,
}

pub struct EpsCache {
    pub z: Array3<f64>,
    pub p1: Array3<f64>,
    pub a1: Array3<f64>,
    pub p2: Array3<f64>,
    pub a2: Array3<f64>,
    pub out: Array3<f64>,
}

pub struct StcCache {
    pub inner: AttentionCache,
    pub total_tokens: usize,
    pub target_tokens: usize,
    pub spatial: (usize, usize),
}

pub struct ForwardCache {
    pub enc: EncodeCache,
    pub attn: StcCache,
    pub z_att: Array3<f64>,
    pub eps: EpsCache,
    pub lambda_res: f64,
    pub m1: Array3<f64>,
    pub m1_up: Array3<f64>,
    pub d1_pre: Array3<f64>,
    pub d1: Array3<f64>,
    pub m2: Array3<f64>,
    pub m2_up: Array3<f64>,
    pub d2_pre: Array3<f64>,
    pub d2: Array3<f64>,
    pub m3: Array3<f64>,
    pub y: Array3<f64>,
}

/// Gradients for every trainable group, mirroring `trainable_flat` order.
#[derive(Default)]
pub struct NetGrads {
    pub gamma: f64,
    pub proj: [ConvGrads; 3],
    pub attn: AttentionGrads,
    pub eps: [ConvGrads; 3],
}

impl NetGrads {
    fn add_proj(&mut self, i: usize, g: ConvGrads) {
        merge_conv_grads(&mut self.proj[i], g);
    }

    fn add_eps(&mut self, i: usize, g: ConvGrads) {
        merge_conv_grads(&mut self.eps[i], g);
    }

    /// Flatten in the canonical trainable order of `RectifierNet`.
    pub fn to_flat(&self, net: &RectifierNet) -> Vec<f64> {
        let mut out = vec![self.gamma];
        for (i, p) in [&net.proj1, &net.proj2, &net.proj3].iter().enumerate() {
            match &self.proj[i].w {
                Some(g) => out.extend(g.iter()),
                None => out.extend(std::iter::repeat_n(0.0, p.w.len())),
            }
        }
        for (g, p) in [
            (&self.attn.wq, &net.attention.wq),
            (&self.attn.wk, &net.attention.wk),
            (&self.attn.wv, &net.attention.wv),
            (&self.attn.wo, &net.attention.wo),
        ] {
            match g {
                Some(g) => out.extend(g.iter()),
                None => out.extend(std::iter::repeat_n(0.0, p.len())),
            }
        }
        for (i, e) in [&net.eps1, &net.eps2, &net.eps3].iter().enumerate() {
            let l = e.lora.as_ref().unwrap();
            match &self.eps[i].lora_down {
                Some(g) => out.extend(g.iter()),
                None => out.extend(std::iter::repeat_n(0.0, l.down.len())),
            }
            match &self.eps[i].lora_up {
                Some(g) => out.extend(g.iter()),
                None => out.extend(std::iter::repeat_n(0.0, l.up.len())),
            }
        }
        out
    }
}

fn merge_conv_grads(dst: &mut ConvGrads, src: ConvGrads) {
    let merge2 = |d: &mut Option<Array2<f64>>, s: Option<Array2<f64>>| {
        if let Some(s) = s {
            match d {
                Some(existing) => *existing += &s,
                None => *d = Some(s),
            }
        }
    };
    merge2(&mut dst.w, src.w);
    merge2(&mut dst.lora_down, src.lora_down);
    merge2(&mut dst.lora_up, src.lora_up);
    if let Some(s) = src.bias {
        match &mut dst.bias {
            Some(existing) => *existing += &s,
            None => dst.bias = Some(s),
        }
    }
}

fn latent_to_tokens(lat: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = lat.dim();
    let mut t = Array2::zeros((h * w, c));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                t[(y * w + x, ci)] = lat[(ci, y, x)];
            }
        }
    }
    t
}

/// Joint self-attention over the target latent and its reference set:
/// flatten views and spatial tokens, attend globally, return the target
/// view's slice with a pre-norm residual connection.
pub fn stc_attention(
    target: &LatentTensor,
    refs: &ReferenceSet,
    params: &AttentionParams,
) -> Result<LatentTensor> {
    Ok(stc_attention_internal(target, refs, params)?.0)
}

fn stc_attention_internal(
    target: &LatentTensor,
    refs: &ReferenceSet,
    params: &AttentionParams,
) -> Result<(LatentTensor, StcCache)> {
    let (c, h, w) = target.data.dim();
    let n = h * w;
    for r in refs.spatial_refs.iter().chain(&refs.temporal_refs) {
        if r.data.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "reference latent {:?} vs target {:?}",
                r.data.dim(),
                target.data.dim()
            )));
        }
    }
    let views = 1 + refs.len();
    let mut tokens = Array2::zeros((views * n, c));
    tokens
        .slice_mut(ndarray::s![0..n, ..])
        .assign(&latent_to_tokens(&target.data));
    for (vi, r) in refs
        .spatial_refs
        .iter()
        .chain(&refs.temporal_refs)
        .enumerate()
    {
        tokens
            .slice_mut(ndarray::s![(vi + 1) * n..(vi + 2) * n, ..])
            .assign(&latent_to_tokens(&r.data));
    }
    let normed = layer_norm_rows(&tokens);
    let (mixed, inner) = self_attention_tokens(&normed, params);
    let mut out = target.data.clone();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci, y, x)] += mixed[(y * w + x, ci)];
            }
        }
    }
    Ok((
        LatentTensor {
            data: out,
            downsample_factor: target.downsample_factor,
        },
        StcCache {
            inner,
            total_tokens: views * n,
            target_tokens: n,
            spatial: (h, w),
        },
    ))
}

fn attention_param_backward(
    cache: &StcCache,
    params: &AttentionParams,
    g_target_tokens: &Array2<f64>,
    grads: &mut NetGrads,
) {
    // the residual path contributes only to the (frozen) encoder; the
    // attention path carries all parameter gradients
    let mut g_out = Array2::zeros((cache.total_tokens, g_target_tokens.ncols()));
    g_out
        .slice_mut(ndarray::s![0..cache.target_tokens, ..])
        .assign(g_target_tokens);
    self_attention_backward(&cache.inner, params, &g_out, &mut grads.attn);
}

/// The latent residual bridge z_gt = z_deg − λ_res·ε; affine in λ_res and an
/// exact identity at λ_res = 0.
pub fn residual_bridge(z_deg: &LatentTensor, eps: &Array3<f64>, lambda_res: f64) -> LatentTensor {
    if lambda_res == 0.0 {
        return z_deg.clone();
    }
    LatentTensor {
        data: &z_deg.data - &(eps * lambda_res),
        downsample_factor: z_deg.downsample_factor,
    }
}
