//! Minimal hand-rolled layers for the rectifier: conv (optionally low-rank
//! adapted), leaky ReLU, nearest upsampling, token layer norm, and scaled
//! dot-product self-attention. Every layer has an explicit backward pass.

use ndarray::{Array1, Array2, Array3};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v })
}

/// g_in from g_out, using the layer input saved at forward time.
pub fn leaky_relu_backward(input: &Array3<f64>, g_out: &Array3<f64>) -> Array3<f64> {
    let mut g = g_out.clone();
    g.zip_mut_with(input, |gv, &iv| {
        if iv < 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    });
    g
}

pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[(ci, y, xx)];
                out[(ci, 2 * y, 2 * xx)] = v;
                out[(ci, 2 * y + 1, 2 * xx)] = v;
                out[(ci, 2 * y, 2 * xx + 1)] = v;
                out[(ci, 2 * y + 1, 2 * xx + 1)] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward(g_out: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = g_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut g = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                g[(ci, y, xx)] = g_out[(ci, 2 * y, 2 * xx)]
                    + g_out[(ci, 2 * y + 1, 2 * xx)]
                    + g_out[(ci, 2 * y, 2 * xx + 1)]
                    + g_out[(ci, 2 * y + 1, 2 * xx + 1)];
            }
        }
    }
    g
}

/// Low-rank delta on a conv/linear weight: effective = base + scaling·(down·up)ᵀ.
/// `up` starts at zero so a fresh adapter is an exact identity delta.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    /// (n_in, r)
    pub down: Array2<f64>,
    /// (r, c_out)
    pub up: Array2<f64>,
    pub scaling: f64,
}

impl LowRankAdapter {
    pub fn new(n_in: usize, c_out: usize, rank: usize, scaling: f64, rng: &mut ChaCha20Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (n_in as f64).sqrt()).unwrap();
        let down = Array2::from_shape_fn((n_in, rank), |_| normal.sample(rng));
        let up = Array2::zeros((rank, c_out));
        LowRankAdapter { down, up, scaling }
    }

    pub fn rank(&self) -> usize {
        self.down.ncols()
    }

    /// (c_out, n_in) delta to add onto the base weight.
    pub fn delta(&self) -> Array2<f64> {
        self.down.dot(&self.up).t().to_owned() * self.scaling
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConvGrads {
    pub w: Option<Array2<f64>>,
    pub bias: Option<Array1<f64>>,
    pub lora_down: Option<Array2<f64>>,
    pub lora_up: Option<Array2<f64>>,
}

/// 2D convolution with zero padding. Weights are (c_out, c_in·k·k).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: Array2<f64>,
    pub bias: Option<Array1<f64>>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub lora: Option<LowRankAdapter>,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Self {
        Conv2d {
            w: Array2::zeros((c_out, c_in * k * k)),
            bias: bias.then(|| Array1::zeros(c_out)),
            c_in,
            c_out,
            k,
            stride,
            pad,
            lora: None,
        }
    }

    pub fn init_random(&mut self, std: f64, rng: &mut ChaCha20Rng) {
        let normal = Normal::new(0.0, std).unwrap();
        for v in self.w.iter_mut() {
            *v = normal.sample(rng);
        }
    }

    pub fn n_in(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn effective_weight(&self) -> Array2<f64> {
        match &self.lora {
            Some(a) => &self.w + &a.delta(),
            None => self.w.clone(),
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn padded(&self, x: &Array3<f64>) -> Array3<f64> {
        if self.pad == 0 {
            return x.clone();
        }
        let (c, h, w) = x.dim();
        let mut xp = Array3::zeros((c, h + 2 * self.pad, w + 2 * self.pad));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    xp[(ci, y + self.pad, xx + self.pad)] = x[(ci, y, xx)];
                }
            }
        }
        xp
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let weff = self.effective_weight();
        let (c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "conv input channels");
        let (oh, ow) = self.out_spatial(h, w);
        let xp = self.padded(x);
        let (_, hp, wp) = xp.dim();
        let xs = xp.as_slice().unwrap();
        let ws = weff.as_slice().unwrap();
        let n_in = self.n_in();
        let mut out = Array3::zeros((self.c_out, oh, ow));
        let os = out.as_slice_mut().unwrap();
        for co in 0..self.c_out {
            let wrow = &ws[co * n_in..(co + 1) * n_in];
            let b = self.bias.as_ref().map_or(0.0, |b| b[co]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    let mut wi = 0usize;
                    for ci in 0..self.c_in {
                        let base = ci * hp * wp + oy * self.stride * wp + ox * self.stride;
                        for ky in 0..self.k {
                            let row = base + ky * wp;
                            for kx in 0..self.k {
                                acc += wrow[wi] * xs[row + kx];
                                wi += 1;
                            }
                        }
                    }
                    os[co * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    /// Returns g_input; parameter gradients (effective-weight, bias, adapter)
    /// go into `grads` when requested.
    pub fn backward(
        &self,
        x: &Array3<f64>,
        g_out: &Array3<f64>,
        grads: Option<&mut ConvGrads>,
    ) -> Array3<f64> {
        let weff = self.effective_weight();
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let xp = self.padded(x);
        let (_, hp, wp) = xp.dim();
        let xs = xp.as_slice().unwrap();
        let ws = weff.as_slice().unwrap();
        let gs = g_out.as_slice().unwrap();
        let n_in = self.n_in();
        let mut g_xp = Array3::<f64>::zeros((self.c_in, hp, wp));
        let gx = g_xp.as_slice_mut().unwrap();
        let mut g_weff = Array2::<f64>::zeros(weff.dim());
        let gw = g_weff.as_slice_mut().unwrap();
        let mut g_bias = Array1::<f64>::zeros(self.c_out);

        for co in 0..self.c_out {
            let wrow = &ws[co * n_in..(co + 1) * n_in];
            let gwrow = &mut gw[co * n_in..(co + 1) * n_in];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gs[co * oh * ow + oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    g_bias[co] += g;
                    let mut wi = 0usize;
                    for ci in 0..self.c_in {
                        let base = ci * hp * wp + oy * self.stride * wp + ox * self.stride;
                        for ky in 0..self.k {
                            let row = base + ky * wp;
                            for kx in 0..self.k {
                                gwrow[wi] += g * xs[row + kx];
                                gx[row + kx] += g * wrow[wi];
                                wi += 1;
                            }
                        }
                    }
                }
            }
        }

        if let Some(store) = grads {
            if let Some(a) = &self.lora {
                // Δ = scaling·(down·up)ᵀ
                let g_delta_t = g_weff.t().to_owned() * a.scaling; // (n_in, c_out)
                let g_down = g_delta_t.dot(&a.up.t());
                let g_up = a.down.t().dot(&g_delta_t);
                match &mut store.lora_down {
                    Some(acc) => *acc += &g_down,
                    None => store.lora_down = Some(g_down),
                }
                match &mut store.lora_up {
                    Some(acc) => *acc += &g_up,
                    None => store.lora_up = Some(g_up),
                }
            }
            match &mut store.w {
                Some(acc) => *acc += &g_weff,
                None => store.w = Some(g_weff),
            }
            if self.bias.is_some() {
                match &mut store.bias {
                    Some(acc) => *acc += &g_bias,
                    None => store.bias = Some(g_bias),
                }
            }
        }

        // unpad
        let mut g_x = Array3::zeros((self.c_in, h, w));
        for ci in 0..self.c_in {
            for y in 0..h {
                for xx in 0..w {
                    g_x[(ci, y, xx)] = g_xp[(ci, y + self.pad, xx + self.pad)];
                }
            }
        }
        g_x
    }
}

const LN_EPS: f64 = 1e-5;

/// Per-token layer norm over channels, no learnable affine.
pub fn layer_norm_rows(tokens: &Array2<f64>) -> Array2<f64> {
    let c = tokens.ncols() as f64;
    let mut out = tokens.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// In-place row softmax; rows sum to 1.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    /// Zero-initialized so a fresh attention block is an exact pass-through
    /// inside its residual connection.
    pub wo: Array2<f64>,
}

impl AttentionParams {
    pub fn new(channels: usize, rng: &mut ChaCha20Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).unwrap();
        let mut mk = || Array2::from_shape_fn((channels, channels), |_| normal.sample(rng));
        let wq = mk();
        let wk = mk();
        let wv = mk();
        AttentionParams {
            wq,
            wk,
            wv,
            wo: Array2::zeros((channels, channels)),
        }
    }

    pub fn identity_mixing(channels: usize, strength: f64) -> Self {
        // uniform attention: zero Q/K make every token attend equally
        AttentionParams {
            wq: Array2::zeros((channels, channels)),
            wk: Array2::zeros((channels, channels)),
            wv: Array2::eye(channels),
            wo: Array2::eye(channels) * strength,
        }
    }
}

pub struct AttentionCache {
    pub tokens: Array2<f64>,
    pub normed: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn: Array2<f64>,
    pub mixed: Array2<f64>,
}

/// Scaled dot-product self-attention over already-normalized tokens:
/// softmax(QKᵀ/√C)·V·Wo. No residual here; callers add it.
pub fn self_attention_tokens(
    normed: &Array2<f64>,
    params: &AttentionParams,
) -> (Array2<f64>, AttentionCache) {
    let c = normed.ncols() as f64;
    let q = normed.dot(&params.wq);
    let k = normed.dot(&params.wk);
    let v = normed.dot(&params.wv);
    let mut attn = q.dot(&k.t()) / c.sqrt();
    softmax_rows(&mut attn);
    let mixed = attn.dot(&v);
    let out = mixed.dot(&params.wo);
    let cache = AttentionCache {
        tokens: Array2::zeros((0, 0)),
        normed: normed.clone(),
        q,
        k,
        v,
        attn,
        mixed,
    };
    (out, cache)
}

#[derive(Debug, Clone, Default)]
pub struct AttentionGrads {
    pub wq: Option<Array2<f64>>,
    pub wk: Option<Array2<f64>>,
    pub wv: Option<Array2<f64>>,
    pub wo: Option<Array2<f64>>,
}

/// Parameter gradients of `self_attention_tokens`. The gradient w.r.t. the
/// input tokens is not propagated (the encoder feeding them is frozen).
pub fn self_attention_backward(
    cache: &AttentionCache,
    params: &AttentionParams,
    g_out: &Array2<f64>,
    grads: &mut AttentionGrads,
) {
    let c = cache.normed.ncols() as f64;
    let g_wo = cache.mixed.t().dot(g_out);
    let g_mixed = g_out.dot(&params.wo.t());
    let g_attn = g_mixed.dot(&cache.v.t());
    let g_v = cache.attn.t().dot(&g_mixed);
    // softmax rows: g_s = a ⊙ (g_a − rowsum(g_a ⊙ a))
    let mut g_scores = Array2::zeros(cache.attn.dim());
    for r in 0..cache.attn.nrows() {
        let a = cache.attn.row(r);
        let ga = g_attn.row(r);
        let dot: f64 = a.iter().zip(ga.iter()).map(|(x, y)| x * y).sum();
        for cc in 0..a.len() {
            g_scores[(r, cc)] = a[cc] * (ga[cc] - dot);
        }
    }
    g_scores /= c.sqrt();
    let g_q = g_scores.dot(&cache.k);
    let g_k = g_scores.t().dot(&cache.q);
    let acc = |slot: &mut Option<Array2<f64>>, val: Array2<f64>| match slot {
        Some(existing) => *existing += &val,
        None => *slot = Some(val),
    };
    acc(&mut grads.wq, cache.normed.t().dot(&g_q));
    acc(&mut grads.wk, cache.normed.t().dot(&g_k));
    acc(&mut grads.wv, cache.normed.t().dot(&g_v));
    acc(&mut grads.wo, g_wo);
}
