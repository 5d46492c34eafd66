//! Small convolutional encoder-decoder with an explicit flat parameter
//! vector and hand-written reverse-mode gradients.
//!
//! Architecture for depth `D`: each encoder stage is conv3x3 → leaky ReLU →
//! (skip tap) → 2x2 average pool; a conv3x3 bottleneck; each decoder stage is
//! nearest-neighbor 2x upsample → channel concat with the matching encoder
//! skip → conv3x3 → leaky ReLU; then a final 1x1 linear conv back to one
//! channel. No normalization layers. All convolutions are zero-padded "same".

use crate::error::{CoreError, Result};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Architecture descriptor; the parameter count is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetDescriptor {
    /// Number of downsampling (and upsampling) stages, 1..=5.
    pub depth: usize,
    /// Output channels of each encoder stage, length == depth.
    pub channels: Vec<usize>,
    pub leaky_slope: f32,
}

impl Default for NetDescriptor {
    fn default() -> Self {
        Self {
            depth: 2,
            channels: vec![16, 32],
            leaky_slope: 0.1,
        }
    }
}

impl NetDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 5 {
            return Err(CoreError::InvalidParam(format!(
                "network depth must be 1..=5, got {}",
                self.depth
            )));
        }
        if self.channels.len() != self.depth {
            return Err(CoreError::InvalidParam(format!(
                "channels length {} != depth {}",
                self.channels.len(),
                self.depth
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(CoreError::InvalidParam("zero channel count".into()));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return Err(CoreError::InvalidParam(format!(
                "leaky slope must be finite and >= 0, got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Total number of parameters (weights + biases of every conv).
    pub fn param_count(&self) -> usize {
        conv_specs(self).1
    }
}

/// One convolution's shape and its slot in the flat parameter vector.
/// Weight layout: [out_channel][in_channel][ky][kx], then `cout` biases.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvSpec {
    fn w_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

/// Convolutions in execution order: encoder stages 0..D, bottleneck,
/// decoder stages D-1 down to 0, final 1x1.
pub(crate) fn conv_specs(desc: &NetDescriptor) -> (Vec<ConvSpec>, usize) {
    let d = desc.depth;
    let ch = &desc.channels;
    let mut specs = Vec::with_capacity(2 * d + 2);
    let mut off = 0;
    let mut push = |cin: usize, cout: usize, k: usize| {
        let spec = ConvSpec {
            cin,
            cout,
            k,
            w_off: off,
            b_off: off + cout * cin * k * k,
        };
        off = spec.b_off + cout;
        specs.push(spec);
    };
    for s in 0..d {
        let cin = if s == 0 { 1 } else { ch[s - 1] };
        push(cin, ch[s], 3);
    }
    push(ch[d - 1], ch[d - 1], 3);
    for s in (0..d).rev() {
        let prev = if s == d - 1 { ch[d - 1] } else { ch[s + 1] };
        push(prev + ch[s], ch[s], 3);
    }
    push(ch[0], 1, 1);
    (specs, off)
}

/// Execution-order index of the decoder conv for encoder stage `s`.
fn dec_index(depth: usize, s: usize) -> usize {
    depth + 1 + (depth - 1 - s)
}

/// Dense CHW tensor; idx = x + w*(y + h*c).
#[derive(Debug, Clone)]
pub(crate) struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    fn empty() -> Self {
        Self {
            c: 0,
            h: 0,
            w: 0,
            data: Vec::new(),
        }
    }
}

fn conv_forward<T: Float>(input: &Tensor<T>, w: &[T], b: &[T], spec: &ConvSpec) -> Tensor<T> {
    let (h, wid) = (input.h, input.w);
    let k = spec.k;
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(spec.cout, h, wid);
    let plane = h * wid;
    for oc in 0..spec.cout {
        let bias = b[oc];
        for y in 0..h as isize {
            for x in 0..wid as isize {
                let mut acc = bias;
                for ic in 0..spec.cin {
                    let in_base = ic * plane;
                    let w_base = (oc * spec.cin + ic) * k * k;
                    for ky in 0..k as isize {
                        let yy = y + ky - pad;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let row = in_base + yy as usize * wid;
                        for kx in 0..k as isize {
                            let xx = x + kx - pad;
                            if xx < 0 || xx >= wid as isize {
                                continue;
                            }
                            acc = acc
                                + w[w_base + (ky * k as isize + kx) as usize]
                                    * input.data[row + xx as usize];
                        }
                    }
                }
                out.data[oc * plane + y as usize * wid + x as usize] = acc;
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into the flat grad vector and returns
/// the gradient with respect to the conv input.
fn conv_backward<T: Float>(
    input: &Tensor<T>,
    w: &[T],
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    grads: &mut [T],
) -> Tensor<T> {
    let (h, wid) = (input.h, input.w);
    let k = spec.k;
    let pad = (k / 2) as isize;
    let plane = h * wid;
    let mut grad_in = Tensor::zeros(spec.cin, h, wid);
    for oc in 0..spec.cout {
        let mut gb = T::zero();
        for y in 0..h as isize {
            for x in 0..wid as isize {
                let go = grad_out.data[oc * plane + y as usize * wid + x as usize];
                if go == T::zero() {
                    continue;
                }
                gb = gb + go;
                for ic in 0..spec.cin {
                    let in_base = ic * plane;
                    let w_base = (oc * spec.cin + ic) * k * k;
                    for ky in 0..k as isize {
                        let yy = y + ky - pad;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let row = in_base + yy as usize * wid;
                        for kx in 0..k as isize {
                            let xx = x + kx - pad;
                            if xx < 0 || xx >= wid as isize {
                                continue;
                            }
                            let wi = w_base + (ky * k as isize + kx) as usize;
                            grads[spec.w_off + wi] =
                                grads[spec.w_off + wi] + go * input.data[row + xx as usize];
                            grad_in.data[row + xx as usize] =
                                grad_in.data[row + xx as usize] + go * w[wi];
                        }
                    }
                }
            }
        }
        grads[spec.b_off + oc] = grads[spec.b_off + oc] + gb;
    }
    grad_in
}

fn lrelu_forward<T: Float>(t: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut out = t.clone();
    for v in &mut out.data {
        if *v < T::zero() {
            *v = *v * slope;
        }
    }
    out
}

fn lrelu_backward<T: Float>(grad: &mut Tensor<T>, pre: &Tensor<T>, slope: T) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        if p < T::zero() {
            *g = *g * slope;
        }
    }
}

fn avgpool2_forward<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (t.c, t.h, t.w);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from(0.25).unwrap();
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = ch * h * w + 2 * y * w + 2 * x;
                let sum = t.data[base] + t.data[base + 1] + t.data[base + w] + t.data[base + w + 1];
                out.data[ch * oh * ow + y * ow + x] = sum * quarter;
            }
        }
    }
    out
}

fn avgpool2_backward<T: Float>(grad: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let c = grad.c;
    let (oh, ow) = (grad.h, grad.w);
    let quarter = T::from(0.25).unwrap();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = grad.data[ch * oh * ow + y * ow + x] * quarter;
                let base = ch * h * w + 2 * y * w + 2 * x;
                out.data[base] = g;
                out.data[base + 1] = g;
                out.data[base + w] = g;
                out.data[base + w + 1] = g;
            }
        }
    }
    out
}

fn upsample2_forward<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (t.c, t.h, t.w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out.data[ch * oh * ow + y * ow + x] = t.data[ch * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}

fn upsample2_backward<T: Float>(grad: &Tensor<T>) -> Tensor<T> {
    let c = grad.c;
    let (oh, ow) = (grad.h, grad.w);
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let i = ch * h * w + (y / 2) * w + x / 2;
                out.data[i] = out.data[i] + grad.data[ch * oh * ow + y * ow + x];
            }
        }
    }
    out
}

fn concat_channels<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity((a.c + b.c) * a.h * a.w);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

fn split_channels<T: Float>(t: &Tensor<T>, c_first: usize) -> (Tensor<T>, Tensor<T>) {
    let plane = t.h * t.w;
    let cut = c_first * plane;
    (
        Tensor {
            c: c_first,
            h: t.h,
            w: t.w,
            data: t.data[..cut].to_vec(),
        },
        Tensor {
            c: t.c - c_first,
            h: t.h,
            w: t.w,
            data: t.data[cut..].to_vec(),
        },
    )
}

/// Intermediate activations retained by the forward pass for reverse mode.
pub(crate) struct ForwardCache<T> {
    enc_in: Vec<Tensor<T>>,
    enc_pre: Vec<Tensor<T>>,
    enc_act: Vec<Tensor<T>>,
    bott_in: Tensor<T>,
    bott_pre: Tensor<T>,
    dec_cat: Vec<Tensor<T>>,
    dec_pre: Vec<Tensor<T>>,
    final_in: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DenoiserNet<T> {
    pub desc: NetDescriptor,
    pub params: Vec<T>,
}

impl<T: Float> DenoiserNet<T> {
    /// He-style random initialization, deterministic for a given seed.
    pub fn new_seeded(desc: NetDescriptor, seed: u64) -> Result<Self> {
        desc.validate()?;
        let (specs, total) = conv_specs(&desc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); total];
        for spec in &specs {
            let std = (2.0 / (spec.cin * spec.k * spec.k) as f64).sqrt();
            for i in 0..spec.w_len() {
                let g: f64 = rng.sample(StandardNormal);
                params[spec.w_off + i] = T::from(g * std).unwrap();
            }
            // biases stay zero
        }
        Ok(Self { desc, params })
    }

    /// Exact pass-through construction for non-negative inputs: the input is
    /// routed through the first encoder skip, the matching decoder conv, and
    /// the final 1x1; every other weight is zero. Useful as a sane starting
    /// point for identity-regime training and as a test fixture.
    pub fn identity_like(desc: NetDescriptor) -> Result<Self> {
        desc.validate()?;
        let (specs, total) = conv_specs(&desc);
        let mut params = vec![T::zero(); total];
        let one = T::one();
        // encoder stage 0: out channel 0 = center tap of the single input channel
        let enc0 = &specs[0];
        params[enc0.w_off + 4] = one; // [oc=0][ic=0][ky=1][kx=1] in a 3x3 kernel
        // decoder stage 0: out channel 0 = center tap of skip channel 0
        let d = desc.depth;
        let dec0 = &specs[dec_index(d, 0)];
        let prev = if d == 1 { desc.channels[0] } else { desc.channels[1] };
        params[dec0.w_off + prev * 9 + 4] = one;
        // final 1x1: pick channel 0
        let fin = &specs[2 * d + 1];
        params[fin.w_off] = one;
        Ok(Self { desc, params })
    }

    pub fn param_count(&self) -> usize {
        self.desc.param_count()
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.desc.depth;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(CoreError::InvalidParam(format!(
                "input {h}x{w} not divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }

    fn slope(&self) -> T {
        T::from(self.desc.leaky_slope).unwrap()
    }

    pub(crate) fn forward_cached(&self, input: Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_dims(input.h, input.w)?;
        let (specs, total) = conv_specs(&self.desc);
        if self.params.len() != total {
            return Err(CoreError::InvalidParam(format!(
                "parameter vector length {} != descriptor count {}",
                self.params.len(),
                total
            )));
        }
        let d = self.desc.depth;
        let slope = self.slope();
        let p = &self.params;

        let mut enc_in = Vec::with_capacity(d);
        let mut enc_pre = Vec::with_capacity(d);
        let mut enc_act = Vec::with_capacity(d);
        let mut cur = input;
        for s in 0..d {
            let spec = &specs[s];
            let pre = conv_forward(&cur, &p[spec.w_off..spec.b_off], &p[spec.b_off..spec.b_off + spec.cout], spec);
            let act = lrelu_forward(&pre, slope);
            let pooled = avgpool2_forward(&act);
            enc_in.push(cur);
            enc_pre.push(pre);
            enc_act.push(act);
            cur = pooled;
        }

        let bspec = &specs[d];
        let bott_in = cur;
        let bott_pre = conv_forward(
            &bott_in,
            &p[bspec.w_off..bspec.b_off],
            &p[bspec.b_off..bspec.b_off + bspec.cout],
            bspec,
        );
        let mut cur = lrelu_forward(&bott_pre, slope);

        let mut dec_cat = vec![Tensor::empty(); d];
        let mut dec_pre = vec![Tensor::empty(); d];
        for s in (0..d).rev() {
            let spec = &specs[dec_index(d, s)];
            let up = upsample2_forward(&cur);
            let cat = concat_channels(&up, &enc_act[s]);
            let pre = conv_forward(&cat, &p[spec.w_off..spec.b_off], &p[spec.b_off..spec.b_off + spec.cout], spec);
            cur = lrelu_forward(&pre, slope);
            dec_cat[s] = cat;
            dec_pre[s] = pre;
        }

        let fspec = &specs[2 * d + 1];
        let final_in = cur;
        let out = conv_forward(
            &final_in,
            &p[fspec.w_off..fspec.b_off],
            &p[fspec.b_off..fspec.b_off + fspec.cout],
            fspec,
        );
        Ok((
            out,
            ForwardCache {
                enc_in,
                enc_pre,
                enc_act,
                bott_in,
                bott_pre,
                dec_cat,
                dec_pre,
                final_in,
            },
        ))
    }

    /// Reverse-mode gradient of a scalar loss with respect to all parameters,
    /// given dLoss/dOutput. Returns the flat parameter gradient.
    pub(crate) fn backward(&self, cache: &ForwardCache<T>, grad_out: Tensor<T>) -> Vec<T> {
        let (specs, total) = conv_specs(&self.desc);
        let d = self.desc.depth;
        let slope = self.slope();
        let p = &self.params;
        let mut grads = vec![T::zero(); total];

        let fspec = &specs[2 * d + 1];
        let mut g = conv_backward(&cache.final_in, &p[fspec.w_off..fspec.b_off], fspec, &grad_out, &mut grads);

        // decoder stages, reversing execution order (stage 0 ran last)
        let mut skip_grads = vec![Tensor::<T>::empty(); d];
        for s in 0..d {
            let spec = &specs[dec_index(d, s)];
            lrelu_backward(&mut g, &cache.dec_pre[s], slope);
            let g_cat = conv_backward(&cache.dec_cat[s], &p[spec.w_off..spec.b_off], spec, &g, &mut grads);
            let prev = if s == d - 1 {
                self.desc.channels[d - 1]
            } else {
                self.desc.channels[s + 1]
            };
            let (g_up, g_skip) = split_channels(&g_cat, prev);
            skip_grads[s] = g_skip;
            g = upsample2_backward(&g_up);
        }

        // bottleneck
        let bspec = &specs[d];
        lrelu_backward(&mut g, &cache.bott_pre, slope);
        let g_pool = conv_backward(&cache.bott_in, &p[bspec.w_off..bspec.b_off], bspec, &g, &mut grads);
        let act = &cache.enc_act[d - 1];
        let mut g_down = avgpool2_backward(&g_pool, act.h, act.w);

        // encoder stages, deepest first
        for s in (0..d).rev() {
            let mut g_act = g_down;
            for (a, b) in g_act.data.iter_mut().zip(&skip_grads[s].data) {
                *a = *a + *b;
            }
            lrelu_backward(&mut g_act, &cache.enc_pre[s], slope);
            let spec = &specs[s];
            let g_in = conv_backward(&cache.enc_in[s], &p[spec.w_off..spec.b_off], spec, &g_act, &mut grads);
            if s > 0 {
                let below = &cache.enc_act[s - 1];
                g_down = avgpool2_backward(&g_in, below.h, below.w);
            } else {
                g_down = g_in; // gradient w.r.t. the image; unused
            }
        }
        let _ = g_down;
        grads
    }

    /// Forward pass on a single-channel image stored row-major (h rows of w).
    pub fn forward_image(&self, data: &[T], h: usize, w: usize) -> Result<Vec<T>> {
        if data.len() != h * w {
            return Err(CoreError::InvalidParam(format!(
                "image data length {} != {h}x{w}",
                data.len()
            )));
        }
        let input = Tensor {
            c: 1,
            h,
            w,
            data: data.to_vec(),
        };
        let (out, _) = self.forward_cached(input)?;
        Ok(out.data)
    }

    /// Mean absolute error between f(input) and target, plus the flat
    /// parameter gradient via reverse mode. Subgradient sign(0) = 0.
    pub fn loss_grad(&self, input: &[T], target: &[T], h: usize, w: usize) -> Result<(T, Vec<T>)> {
        if input.len() != h * w || target.len() != h * w {
            return Err(CoreError::InvalidParam(format!(
                "loss_grad: input/target lengths {}/{} != {h}x{w}",
                input.len(),
                target.len()
            )));
        }
        let tin = Tensor {
            c: 1,
            h,
            w,
            data: input.to_vec(),
        };
        let (out, cache) = self.forward_cached(tin)?;
        let n = T::from(h * w).unwrap();
        let inv_n = T::one() / n;
        let mut loss = T::zero();
        let mut grad_out = Tensor::zeros(1, h, w);
        for i in 0..h * w {
            let r = out.data[i] - target[i];
            loss = loss + r.abs();
            grad_out.data[i] = if r > T::zero() {
                inv_n
            } else if r < T::zero() {
                -inv_n
            } else {
                T::zero()
            };
        }
        loss = loss * inv_n;
        let grads = self.backward(&cache, grad_out);
        Ok((loss, grads))
    }
}
