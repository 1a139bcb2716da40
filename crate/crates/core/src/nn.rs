//! Hand-rolled differentiable layers: 3×3 same-padding convolution, 2×2
//! max-pooling, dense layers, (leaky-)ReLU, stabilized softmax with
//! cross-entropy, and an adaptive-moment optimizer.
//!
//! Everything is 32-bit floats over flat slices with explicit shapes, all
//! loops sequential and deterministic. Networks keep their parameters in a
//! single flat vector in declaration order, which makes content digests and
//! checkpoint serialization direct reads of that buffer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Stabilized softmax: subtracts the max logit before exponentiation.
pub fn softmax_stable(logits: &[f32], probs: &mut [f32]) {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (p, &z) in probs.iter_mut().zip(logits) {
        let e = ((z - max) as f64).exp();
        *p = e as f32;
        sum += e;
    }
    for p in probs.iter_mut() {
        *p = (*p as f64 / sum) as f32;
    }
}

/// Cross-entropy of `softmax(logits)` against `label`. Writes the gradient
/// with respect to the logits (`probs - onehot`) into `grad` and returns the
/// loss.
pub fn softmax_cross_entropy(logits: &[f32], label: usize, grad: &mut [f32]) -> f32 {
    softmax_stable(logits, grad);
    let p = grad[label].max(1e-12);
    let loss = -(p as f64).ln() as f32;
    grad[label] -= 1.0;
    loss
}

pub fn relu(xs: &mut [f32]) {
    for x in xs {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Backward through ReLU given the *activated* output (sign of the output
/// matches the sign of the pre-activation).
pub fn relu_backward(activated: &[f32], grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn leaky_relu(xs: &mut [f32], slope: f32) {
    for x in xs {
        if *x < 0.0 {
            *x *= slope;
        }
    }
}

pub fn leaky_relu_backward(activated: &[f32], slope: f32, grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g *= slope;
        }
    }
}

/// 3×3 convolution with zero ("same") padding, stride 1.
///
/// `input` is `in_c × h × w`, `weight` is `out_c × in_c × 3 × 3`, `bias` is
/// `out_c`, `output` is `out_c × h × w` and is overwritten.
pub fn conv3x3_forward(
    input: &[f32],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    out_c: usize,
    output: &mut [f32],
) {
    let plane = h * w;
    for oc in 0..out_c {
        let out_plane = &mut output[oc * plane..][..plane];
        out_plane.fill(bias[oc]);
        for ic in 0..in_c {
            let in_plane = &input[ic * plane..][..plane];
            for dy in 0..3 {
                let y0 = 1usize.saturating_sub(dy);
                let y1 = (h + 1 - dy).min(h);
                for dx in 0..3 {
                    let wv = weight[((oc * in_c + ic) * 3 + dy) * 3 + dx];
                    let x0 = 1usize.saturating_sub(dx);
                    let x1 = (w + 1 - dx).min(w);
                    let run = x1 - x0;
                    for y in y0..y1 {
                        let iy = y + dy - 1;
                        let in_row = &in_plane[iy * w + x0 + dx - 1..][..run];
                        let out_row = &mut out_plane[y * w + x0..][..run];
                        for i in 0..run {
                            out_row[i] += wv * in_row[i];
                        }
                    }
                }
            }
        }
    }
}

/// Backward pass of [`conv3x3_forward`]. Weight/bias gradients and the input
/// gradient are *accumulated* (`+=`); callers zero the buffers they pass.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f32],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    out_c: usize,
    grad_out: &[f32],
    mut grad_weight: Option<&mut [f32]>,
    mut grad_bias: Option<&mut [f32]>,
    mut grad_input: Option<&mut [f32]>,
) {
    let plane = h * w;
    for oc in 0..out_c {
        let gout_plane = &grad_out[oc * plane..][..plane];
        if let Some(gb) = grad_bias.as_deref_mut() {
            gb[oc] += gout_plane.iter().sum::<f32>();
        }
        for ic in 0..in_c {
            let in_plane = &input[ic * plane..][..plane];
            for dy in 0..3 {
                let y0 = 1usize.saturating_sub(dy);
                let y1 = (h + 1 - dy).min(h);
                for dx in 0..3 {
                    let x0 = 1usize.saturating_sub(dx);
                    let x1 = (w + 1 - dx).min(w);
                    let run = x1 - x0;
                    let widx = ((oc * in_c + ic) * 3 + dy) * 3 + dx;
                    if let Some(gw) = grad_weight.as_deref_mut() {
                        let mut acc = 0.0f32;
                        for y in y0..y1 {
                            let iy = y + dy - 1;
                            let in_row = &in_plane[iy * w + x0 + dx - 1..][..run];
                            let go_row = &gout_plane[y * w + x0..][..run];
                            for i in 0..run {
                                acc += go_row[i] * in_row[i];
                            }
                        }
                        gw[widx] += acc;
                    }
                    if let Some(gi) = grad_input.as_deref_mut() {
                        let wv = weight[widx];
                        for y in y0..y1 {
                            let iy = y + dy - 1;
                            let gi_row = &mut gi[ic * plane + iy * w + x0 + dx - 1..][..run];
                            let go_row = &gout_plane[y * w + x0..][..run];
                            for i in 0..run {
                                gi_row[i] += wv * go_row[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 max-pool with stride 2. `h` and `w` must be even. Records the flat
/// input index of every winning element (scan order, so ties keep the first)
/// for the backward pass.
pub fn maxpool2_forward(
    input: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    output: &mut [f32],
    winners: &mut [u32],
) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    for c in 0..channels {
        let base = c * h * w;
        for py in 0..oh {
            for px in 0..ow {
                let mut best_idx = base + (2 * py) * w + 2 * px;
                let mut best = input[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = base + (2 * py + dy) * w + 2 * px + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                let o = c * oh * ow + py * ow + px;
                output[o] = best;
                winners[o] = best_idx as u32;
            }
        }
    }
}

/// Routes output gradients back to the recorded winners (accumulating).
pub fn maxpool2_backward(grad_out: &[f32], winners: &[u32], grad_input: &mut [f32]) {
    for (&g, &idx) in grad_out.iter().zip(winners) {
        grad_input[idx as usize] += g;
    }
}

/// Fully-connected layer: `output[o] = bias[o] + Σᵢ weight[o·in+i]·input[i]`.
pub fn dense_forward(input: &[f32], weight: &[f32], bias: &[f32], output: &mut [f32]) {
    let n_in = input.len();
    for (o, out) in output.iter_mut().enumerate() {
        let row = &weight[o * n_in..][..n_in];
        let mut acc = bias[o];
        for i in 0..n_in {
            acc += row[i] * input[i];
        }
        *out = acc;
    }
}

/// Backward pass of [`dense_forward`]; gradients are accumulated.
pub fn dense_backward(
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    mut grad_weight: Option<&mut [f32]>,
    mut grad_bias: Option<&mut [f32]>,
    mut grad_input: Option<&mut [f32]>,
) {
    let n_in = input.len();
    if let Some(gi) = grad_input.as_deref_mut() {
        gi.fill(0.0);
    }
    for (o, &g) in grad_out.iter().enumerate() {
        if let Some(gb) = grad_bias.as_deref_mut() {
            gb[o] += g;
        }
        let row = &weight[o * n_in..][..n_in];
        if let Some(gw) = grad_weight.as_deref_mut() {
            let grow = &mut gw[o * n_in..][..n_in];
            for i in 0..n_in {
                grow[i] += g * input[i];
            }
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            for i in 0..n_in {
                gi[i] += g * row[i];
            }
        }
    }
}

/// Fills `out` with draws from U(−√(1/fan_in), √(1/fan_in)).
pub fn init_fan_in_uniform(out: &mut [f32], fan_in: usize, rng: &mut ChaCha8Rng) {
    let limit = (1.0 / fan_in as f64).sqrt() as f32;
    for v in out {
        *v = rng.gen_range(-limit..limit);
    }
}

/// Adaptive-moment gradient descent over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, eps: f32, param_len: usize) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] as f64 / bc1;
            let vhat = self.v[i] as f64 / bc2;
            params[i] -= (self.lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
        }
    }
}

// ---------------------------------------------------------------------------
// Multi-layer perceptron
// ---------------------------------------------------------------------------

/// Dense stack with leaky-ReLU on every layer except the last (the last is
/// linear). Parameters live in one flat vector, per layer weight-then-bias.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    leak: f32,
    pub params: Vec<f32>,
}

/// Reusable activation and gradient buffers for one [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpScratch {
    acts: Vec<Vec<f32>>,
    ga: Vec<f32>,
    gb: Vec<f32>,
}

impl Mlp {
    pub fn new(sizes: &[usize], leak: f32, rng: &mut ChaCha8Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "dense stack needs at least two nonzero layer sizes, got {sizes:?}"
            )));
        }
        let mut params = vec![0.0f32; Self::param_count_for(sizes)];
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            init_fan_in_uniform(&mut params[off..off + n_in * n_out], n_in, rng);
            off += n_in * n_out + n_out; // biases stay zero
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            leak,
            params,
        })
    }

    pub fn param_count_for(sizes: &[usize]) -> usize {
        sizes
            .windows(2)
            .map(|pair| pair[0] * pair[1] + pair[1])
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        let mut off = 0;
        for l in 0..layer {
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        off
    }

    pub fn scratch(&self) -> MlpScratch {
        let widest = *self.sizes.iter().max().unwrap();
        MlpScratch {
            acts: self.sizes.iter().map(|&s| vec![0.0; s]).collect(),
            ga: vec![0.0; widest],
            gb: vec![0.0; widest],
        }
    }

    /// Forward pass; returns the final (linear) output slice, which stays
    /// valid inside `scratch` for a subsequent [`Mlp::backward`].
    pub fn forward<'s>(&self, x: &[f32], scratch: &'s mut MlpScratch) -> &'s [f32] {
        assert_eq!(x.len(), self.sizes[0]);
        scratch.acts[0].copy_from_slice(x);
        let last = self.sizes.len() - 2;
        for l in 0..=last {
            let off = self.layer_offset(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (head, tail) = scratch.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            dense_forward(
                input,
                &self.params[off..off + n_in * n_out],
                &self.params[off + n_in * n_out..off + n_in * n_out + n_out],
                out,
            );
            if l != last {
                leaky_relu(out, self.leak);
            }
        }
        &scratch.acts[self.sizes.len() - 1]
    }

    /// Backward pass from `grad_out` (gradient on the final output).
    /// Parameter gradients are accumulated into `grads` (same layout as
    /// `params`); the gradient on the input is written to `grad_input` when
    /// requested. Must follow a `forward` on the same scratch.
    pub fn backward(
        &self,
        scratch: &mut MlpScratch,
        grad_out: &[f32],
        mut grads: Option<&mut [f32]>,
        grad_input: Option<&mut [f32]>,
    ) {
        let last = self.sizes.len() - 2;
        scratch.ga[..grad_out.len()].copy_from_slice(grad_out);
        for l in (0..=last).rev() {
            let off = self.layer_offset(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l != last {
                let g = &mut scratch.ga[..n_out];
                leaky_relu_backward(&scratch.acts[l + 1], self.leak, g);
            }
            let (gw, gbias) = match grads.as_deref_mut() {
                Some(buf) => {
                    let (w, rest) = buf[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                    (Some(w), Some(rest))
                }
                None => (None, None),
            };
            dense_backward(
                &scratch.acts[l],
                &self.params[off..off + n_in * n_out],
                &scratch.ga[..n_out],
                gw,
                gbias,
                Some(&mut scratch.gb[..n_in]),
            );
            let n_copy = n_in;
            let (ga, gb) = (&mut scratch.ga, &mut scratch.gb);
            ga[..n_copy].copy_from_slice(&gb[..n_copy]);
        }
        if let Some(gi) = grad_input {
            gi.copy_from_slice(&scratch.ga[..self.sizes[0]]);
        }
    }
}

// ---------------------------------------------------------------------------
// Small convolutional network
// ---------------------------------------------------------------------------

/// conv(3×3, c1) + ReLU → 2×2 pool → conv(3×3, c2) + ReLU → 2×2 pool →
/// dense(out_dim). Input sides must be divisible by 4 (two pooling stages).
/// Parameter layout: conv1 weight, conv1 bias, conv2 weight, conv2 bias,
/// dense weight, dense bias.
#[derive(Debug, Clone)]
pub struct ConvNet {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub c1: usize,
    pub c2: usize,
    pub out_dim: usize,
    pub params: Vec<f32>,
}

/// Reusable forward/backward buffers for one [`ConvNet`].
#[derive(Debug, Clone)]
pub struct ConvNetScratch {
    input: Vec<f32>,
    a1: Vec<f32>,
    p1: Vec<f32>,
    win1: Vec<u32>,
    a2: Vec<f32>,
    p2: Vec<f32>,
    win2: Vec<u32>,
    out: Vec<f32>,
    g_p2: Vec<f32>,
    g_a2: Vec<f32>,
    g_p1: Vec<f32>,
    g_a1: Vec<f32>,
}

impl ConvNet {
    pub fn new(
        in_c: usize,
        h: usize,
        w: usize,
        c1: usize,
        c2: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_c == 0 || c1 == 0 || c2 == 0 || out_dim == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "input sides must be positive multiples of 4 for two pooling stages, got {h}×{w}"
            )));
        }
        let flat = c2 * (h / 4) * (w / 4);
        let mut params = vec![0.0f32; Self::param_count_for(in_c, h, w, c1, c2, out_dim)];
        let w1 = c1 * in_c * 9;
        let w2 = c2 * c1 * 9;
        let mut off = 0;
        init_fan_in_uniform(&mut params[off..off + w1], in_c * 9, rng);
        off += w1 + c1;
        init_fan_in_uniform(&mut params[off..off + w2], c1 * 9, rng);
        off += w2 + c2;
        init_fan_in_uniform(&mut params[off..off + out_dim * flat], flat, rng);
        Ok(ConvNet {
            in_c,
            h,
            w,
            c1,
            c2,
            out_dim,
            params,
        })
    }

    pub fn param_count_for(
        in_c: usize,
        h: usize,
        w: usize,
        c1: usize,
        c2: usize,
        out_dim: usize,
    ) -> usize {
        let flat = c2 * (h / 4) * (w / 4);
        c1 * in_c * 9 + c1 + c2 * c1 * 9 + c2 + out_dim * flat + out_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_len(&self) -> usize {
        self.in_c * self.h * self.w
    }

    fn offsets(&self) -> (usize, usize, usize, usize, usize, usize) {
        let w1 = 0;
        let b1 = w1 + self.c1 * self.in_c * 9;
        let w2 = b1 + self.c1;
        let b2 = w2 + self.c2 * self.c1 * 9;
        let wd = b2 + self.c2;
        let bd = wd + self.out_dim * self.c2 * (self.h / 4) * (self.w / 4);
        (w1, b1, w2, b2, wd, bd)
    }

    pub fn scratch(&self) -> ConvNetScratch {
        let (h, w) = (self.h, self.w);
        let (h2, w2) = (h / 2, w / 2);
        let (h4, w4) = (h / 4, w / 4);
        ConvNetScratch {
            input: vec![0.0; self.in_c * h * w],
            a1: vec![0.0; self.c1 * h * w],
            p1: vec![0.0; self.c1 * h2 * w2],
            win1: vec![0; self.c1 * h2 * w2],
            a2: vec![0.0; self.c2 * h2 * w2],
            p2: vec![0.0; self.c2 * h4 * w4],
            win2: vec![0; self.c2 * h4 * w4],
            out: vec![0.0; self.out_dim],
            g_p2: vec![0.0; self.c2 * h4 * w4],
            g_a2: vec![0.0; self.c2 * h2 * w2],
            g_p1: vec![0.0; self.c1 * h2 * w2],
            g_a1: vec![0.0; self.c1 * h * w],
        }
    }

    /// Forward pass; the returned output slice stays valid inside `scratch`
    /// for a subsequent [`ConvNet::backward`].
    pub fn forward<'s>(&self, x: &[f32], scratch: &'s mut ConvNetScratch) -> &'s [f32] {
        assert_eq!(x.len(), self.input_len());
        let (w1, b1, w2, b2, wd, bd) = self.offsets();
        let (h, w) = (self.h, self.w);
        let (h2, ww2) = (h / 2, w / 2);
        scratch.input.copy_from_slice(x);
        conv3x3_forward(
            &scratch.input,
            self.in_c,
            h,
            w,
            &self.params[w1..b1],
            &self.params[b1..w2],
            self.c1,
            &mut scratch.a1,
        );
        relu(&mut scratch.a1);
        maxpool2_forward(&scratch.a1, self.c1, h, w, &mut scratch.p1, &mut scratch.win1);
        conv3x3_forward(
            &scratch.p1,
            self.c1,
            h2,
            ww2,
            &self.params[w2..b2],
            &self.params[b2..wd],
            self.c2,
            &mut scratch.a2,
        );
        relu(&mut scratch.a2);
        maxpool2_forward(&scratch.a2, self.c2, h2, ww2, &mut scratch.p2, &mut scratch.win2);
        dense_forward(
            &scratch.p2,
            &self.params[wd..bd],
            &self.params[bd..],
            &mut scratch.out,
        );
        &scratch.out
    }

    /// Backward pass from `grad_out` (gradient on the network output).
    /// Parameter gradients are accumulated into `grads`; the input gradient
    /// is written to `grad_input` when requested. Must follow a `forward` on
    /// the same scratch.
    pub fn backward(
        &self,
        scratch: &mut ConvNetScratch,
        grad_out: &[f32],
        grads: Option<&mut [f32]>,
        grad_input: Option<&mut [f32]>,
    ) {
        let (w1, b1, w2, b2, wd, bd) = self.offsets();
        let (h, w) = (self.h, self.w);
        let (h2, ww2) = (h / 2, w / 2);
        let (gw1, gb1, gw2, gb2, gwd, gbd) = match grads {
            None => (None, None, None, None, None, None),
            Some(buf) => {
                let (gw1, rest) = buf.split_at_mut(b1 - w1);
                let (gb1, rest) = rest.split_at_mut(w2 - b1);
                let (gw2, rest) = rest.split_at_mut(b2 - w2);
                let (gb2, rest) = rest.split_at_mut(wd - b2);
                let (gwd, gbd) = rest.split_at_mut(bd - wd);
                (
                    Some(gw1),
                    Some(gb1),
                    Some(gw2),
                    Some(gb2),
                    Some(gwd),
                    Some(gbd),
                )
            }
        };

        dense_backward(
            &scratch.p2,
            &self.params[wd..bd],
            grad_out,
            gwd,
            gbd,
            Some(&mut scratch.g_p2),
        );
        scratch.g_a2.fill(0.0);
        maxpool2_backward(&scratch.g_p2, &scratch.win2, &mut scratch.g_a2);
        relu_backward(&scratch.a2, &mut scratch.g_a2);
        scratch.g_p1.fill(0.0);
        conv3x3_backward(
            &scratch.p1,
            self.c1,
            h2,
            ww2,
            &self.params[w2..b2],
            self.c2,
            &scratch.g_a2,
            gw2,
            gb2,
            Some(&mut scratch.g_p1),
        );
        scratch.g_a1.fill(0.0);
        maxpool2_backward(&scratch.g_p1, &scratch.win1, &mut scratch.g_a1);
        relu_backward(&scratch.a1, &mut scratch.g_a1);
        let grad_input = grad_input.map(|gi| {
            gi.fill(0.0);
            gi
        });
        conv3x3_backward(
            &scratch.input,
            self.in_c,
            h,
            w,
            &self.params[w1..b1],
            self.c1,
            &scratch.g_a1,
            gw1,
            gb1,
            grad_input,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;

    /// Naive f64 reference convolution used as the oracle for the fast path.
    fn conv_reference(
        input: &[f32],
        in_c: usize,
        h: usize,
        w: usize,
        weight: &[f64],
        bias: &[f64],
        out_c: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; out_c * h * w];
        for oc in 0..out_c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..in_c {
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let iy = y as isize + dy as isize - 1;
                                let ix = x as isize + dx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += weight[((oc * in_c + ic) * 3 + dy) * 3 + dx]
                                    * input[ic * h * w + iy as usize * w + ix as usize] as f64;
                            }
                        }
                    }
                    out[oc * h * w + y * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let (h, w) = (4, 5);
        let input: Vec<f32> = (0..h * w).map(|i| i as f32 * 0.1).collect();
        let mut weight = vec![0.0f32; 9];
        weight[4] = 1.0; // center tap
        let mut out = vec![0.0f32; h * w];
        conv3x3_forward(&input, 1, h, w, &weight, &[0.0], 1, &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn shift_kernel_shifts_with_zero_border() {
        let (h, w) = (3, 3);
        let input = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        // Tap at (dy=1, dx=2) reads the pixel to the right.
        let mut weight = vec![0.0f32; 9];
        weight[5] = 1.0;
        let mut out = vec![0.0f32; h * w];
        conv3x3_forward(&input, 1, h, w, &weight, &[0.0], 1, &mut out);
        assert_eq!(out, vec![2.0, 3.0, 0.0, 5.0, 6.0, 0.0, 8.0, 9.0, 0.0]);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = rng_from_seed(7);
        let (in_c, out_c, h, w) = (2, 3, 5, 4);
        let input: Vec<f32> = (0..in_c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weight: Vec<f32> = (0..out_c * in_c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f32> = (0..out_c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut fast = vec![0.0f32; out_c * h * w];
        conv3x3_forward(&input, in_c, h, w, &weight, &bias, out_c, &mut fast);
        let wf: Vec<f64> = weight.iter().map(|&v| v as f64).collect();
        let bf: Vec<f64> = bias.iter().map(|&v| v as f64).collect();
        let slow = conv_reference(&input, in_c, h, w, &wf, &bf, out_c);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = rng_from_seed(11);
        let (in_c, out_c, h, w) = (1, 2, 4, 4);
        let input: Vec<f32> = (0..in_c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weight: Vec<f32> = (0..out_c * in_c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f32> = (0..out_c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Scalar objective: fixed random projection of the output.
        let coeff: Vec<f64> = (0..out_c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coeff_f32: Vec<f32> = coeff.iter().map(|&v| v as f32).collect();

        let mut gw = vec![0.0f32; weight.len()];
        let mut gb = vec![0.0f32; bias.len()];
        let mut gi = vec![0.0f32; input.len()];
        conv3x3_backward(
            &input, in_c, h, w, &weight, out_c, &coeff_f32,
            Some(&mut gw), Some(&mut gb), Some(&mut gi),
        );

        let objective = |wts: &[f64], bs: &[f64], inp: &[f32]| -> f64 {
            let out = conv_reference(inp, in_c, h, w, wts, bs, out_c);
            out.iter().zip(&coeff).map(|(o, c)| o * c).sum()
        };
        let wf: Vec<f64> = weight.iter().map(|&v| v as f64).collect();
        let bf: Vec<f64> = bias.iter().map(|&v| v as f64).collect();
        let eps = 1e-4;
        for k in 0..weight.len() {
            let mut hi = wf.clone();
            let mut lo = wf.clone();
            hi[k] += eps;
            lo[k] -= eps;
            let fd = (objective(&hi, &bf, &input) - objective(&lo, &bf, &input)) / (2.0 * eps);
            assert!((gw[k] as f64 - fd).abs() < 1e-3, "weight {k}: {} vs {fd}", gw[k]);
        }
        for k in 0..input.len() {
            let mut hi = input.clone();
            let mut lo = input.clone();
            hi[k] += eps as f32;
            lo[k] -= eps as f32;
            let fd = (objective(&wf, &bf, &hi) - objective(&wf, &bf, &lo)) / (2.0 * eps);
            assert!((gi[k] as f64 - fd).abs() < 1e-2, "input {k}: {} vs {fd}", gi[k]);
        }
        for k in 0..bias.len() {
            let mut hi = bf.clone();
            let mut lo = bf.clone();
            hi[k] += eps;
            lo[k] -= eps;
            let fd = (objective(&wf, &hi, &input) - objective(&wf, &lo, &input)) / (2.0 * eps);
            assert!((gb[k] as f64 - fd).abs() < 1e-3, "bias {k}: {} vs {fd}", gb[k]);
        }
    }

    #[test]
    fn maxpool_selects_first_on_ties_and_routes_gradients() {
        let input = vec![
            1.0, 1.0, 0.0, 2.0, //
            0.5, 0.3, 2.0, 1.0, //
            3.0, 0.0, 0.0, 0.0, //
            0.0, 3.0, 0.0, 4.0,
        ];
        let mut out = vec![0.0f32; 4];
        let mut winners = vec![0u32; 4];
        maxpool2_forward(&input, 1, 4, 4, &mut out, &mut winners);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
        // Ties (two 1.0s, a 2.0 pair, a 3.0 pair) resolve to the earliest
        // index in scan order.
        assert_eq!(winners, vec![0, 3, 8, 15]);
        let mut gi = vec![0.0f32; 16];
        maxpool2_backward(&[1.0, 2.0, 3.0, 4.0], &winners, &mut gi);
        assert_eq!(gi[0], 1.0);
        assert_eq!(gi[3], 2.0);
        assert_eq!(gi[8], 3.0);
        assert_eq!(gi[15], 4.0);
        assert_eq!(gi.iter().filter(|&&g| g != 0.0).count(), 4);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let mut probs = vec![0.0f32; 3];
        softmax_stable(&[2.0, 1.0, 0.0], &mut probs);
        let expected = [0.665241, 0.244728, 0.090031];
        for (p, e) in probs.iter().zip(expected) {
            assert!((p - e).abs() < 1e-5, "{p} vs {e}");
        }
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_shift_invariant_under_stabilization() {
        // Exact binary fractions so the +1000 shift itself is lossless in
        // f32; what's under test is the stabilization, not representation.
        let logits = [0.5f32, -1.25, 2.5, 0.0];
        let shifted: Vec<f32> = logits.iter().map(|&z| z + 1000.0).collect();
        let mut p1 = vec![0.0f32; 4];
        let mut p2 = vec![0.0f32; 4];
        softmax_stable(&logits, &mut p1);
        softmax_stable(&shifted, &mut p2);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(argmax(&p1), argmax(&p2));
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let logits = [0.5f32, -0.25, 1.5];
        let mut grad = vec![0.0f32; 3];
        let loss = softmax_cross_entropy(&logits, 2, &mut grad);
        let mut probs = vec![0.0f32; 3];
        softmax_stable(&logits, &mut probs);
        assert!((loss + probs[2].ln()).abs() < 1e-6);
        assert!((grad[0] - probs[0]).abs() < 1e-6);
        assert!((grad[1] - probs[1]).abs() < 1e-6);
        assert!((grad[2] - (probs[2] - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
    }

    /// f64 mirror of the MLP forward used as a gradient oracle.
    fn mlp_reference(mlp: &Mlp, x: &[f64], params: &[f64]) -> Vec<f64> {
        let sizes = mlp.sizes();
        let mut a = x.to_vec();
        let mut off = 0;
        let last = sizes.len() - 2;
        for l in 0..=last {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let mut z = vec![0.0; n_out];
            for o in 0..n_out {
                let mut acc = params[off + n_in * n_out + o];
                for i in 0..n_in {
                    acc += params[off + o * n_in + i] * a[i];
                }
                z[o] = acc;
            }
            if l != last {
                for v in &mut z {
                    if *v < 0.0 {
                        *v *= 0.01;
                    }
                }
            }
            a = z;
            off += n_in * n_out + n_out;
        }
        a
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(3);
        let mlp = Mlp::new(&[3, 5, 2], 0.01, &mut rng).unwrap();
        let x: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let coeff: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coeff_f32: Vec<f32> = coeff.iter().map(|&v| v as f32).collect();

        let mut scratch = mlp.scratch();
        mlp.forward(&x, &mut scratch);
        let mut grads = vec![0.0f32; mlp.param_count()];
        let mut ginput = vec![0.0f32; 3];
        mlp.backward(&mut scratch, &coeff_f32, Some(&mut grads), Some(&mut ginput));

        let params: Vec<f64> = mlp.params.iter().map(|&v| v as f64).collect();
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let objective = |p: &[f64], input: &[f64]| -> f64 {
            mlp_reference(&mlp, input, p)
                .iter()
                .zip(&coeff)
                .map(|(o, c)| o * c)
                .sum()
        };
        let eps = 1e-5;
        for k in 0..params.len() {
            let mut hi = params.clone();
            let mut lo = params.clone();
            hi[k] += eps;
            lo[k] -= eps;
            let fd = (objective(&hi, &xf) - objective(&lo, &xf)) / (2.0 * eps);
            assert!(
                (grads[k] as f64 - fd).abs() < 1e-3,
                "param {k}: {} vs {fd}",
                grads[k]
            );
        }
        for k in 0..x.len() {
            let mut hi = xf.clone();
            let mut lo = xf.clone();
            hi[k] += eps;
            lo[k] -= eps;
            let fd = (objective(&params, &hi) - objective(&params, &lo)) / (2.0 * eps);
            assert!(
                (ginput[k] as f64 - fd).abs() < 1e-3,
                "input {k}: {} vs {fd}",
                ginput[k]
            );
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = vec![5.0f32, -3.0];
        let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8, 2);
        for _ in 0..2000 {
            let grads: Vec<f32> = params.iter().map(|&p| 2.0 * p).collect();
            opt.step(&mut params, &grads);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-3), "{params:?}");
    }

    #[test]
    fn convnet_shapes_and_dead_relu_gradient() {
        let mut rng = rng_from_seed(5);
        let mut net = ConvNet::new(1, 8, 8, 2, 3, 4, &mut rng).unwrap();
        // Force every conv-1 pre-activation negative: large negative biases.
        let (_, b1, w2, ..) = net.offsets();
        for b in &mut net.params[b1..w2] {
            *b = -100.0;
        }
        let x = vec![0.5f32; 64];
        let mut scratch = net.scratch();
        let out = net.forward(&x, &mut scratch).to_vec();
        assert_eq!(out.len(), 4);
        let mut grad_input = vec![0.0f32; 64];
        let grad_out = vec![1.0f32; 4];
        net.backward(&mut scratch, &grad_out, None, Some(&mut grad_input));
        assert!(grad_input.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn convnet_rejects_bad_sides() {
        let mut rng = rng_from_seed(1);
        assert!(matches!(
            ConvNet::new(1, 6, 8, 2, 3, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
