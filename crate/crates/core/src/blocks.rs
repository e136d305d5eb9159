//! The decoder's three building blocks.
//!
//! * [`Spam`] — spatial-position attention: a transformer branch for
//!   long-range context, a 3x3 convolution branch for local detail, and a
//!   learned-dictionary (codebook) branch for recurring spatial patterns,
//!   run in parallel on the same input and fused back to the input shape.
//! * [`Afam`] — adaptive feature aggregation: squeeze-style channel
//!   attention, then a multi-kernel convolution path ending in a [`RepConv`]
//!   and a per-position (cross-channel max + mean) spatial-attention path,
//!   concatenated and projected.
//! * [`RepConv`] — parallel 3x3 and 1x1 convolutions with batch norm that
//!   fold into a single biased 3x3 convolution for inference.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::tensor::{Elem, TensorRef};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FuseMode {
    /// Elementwise sum of the three branches followed by a 1x1 projection.
    Sum,
    /// Channel concat of the three branches, projected back by 1x1.
    ConcatProject,
}

#[derive(Clone, Copy, Debug)]
pub struct SpamConfig {
    pub channels: usize,
    pub heads: usize,
    pub codebook_size: usize,
    pub fuse: FuseMode,
}

impl SpamConfig {
    pub fn new(channels: usize) -> Self {
        SpamConfig {
            channels,
            heads: 2,
            codebook_size: 32,
            fuse: FuseMode::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "spam channels {} must be divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.codebook_size == 0 {
            return Err(Error::invalid("spam codebook_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AfamConfig {
    pub channels: usize,
    pub reduction: usize,
    pub kernel_a: usize,
    pub kernel_b: usize,
    /// When true the two paths receive channel-split halves of the weighted
    /// features instead of the full map.
    pub split_paths: bool,
}

impl AfamConfig {
    pub fn new(channels: usize) -> Self {
        AfamConfig {
            channels,
            reduction: 4,
            kernel_a: 3,
            kernel_b: 5,
            split_paths: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::invalid(format!(
                "afam channels {} must be divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        if self.kernel_a.is_multiple_of(2) || self.kernel_b.is_multiple_of(2) {
            return Err(Error::invalid("afam kernels must be odd"));
        }
        if self.split_paths && !self.channels.is_multiple_of(2) {
            return Err(Error::invalid("afam split_paths needs even channels"));
        }
        Ok(())
    }
}

/// Attention/assignment values captured during a probed forward pass, used
/// by the normalization-invariant checks.
#[derive(Default)]
pub struct SpamProbe {
    /// One `(tokens, tokens)` attention matrix per head.
    pub attention: Vec<Array2<f64>>,
    /// `(tokens, K)` codebook assignment weights.
    pub codebook: Option<Array2<f64>>,
}

#[derive(Default)]
pub struct AfamProbe {
    /// Per-channel sigmoid gates.
    pub channel_gates: Vec<f64>,
    /// Per-position sigmoid gates, flattened row-major.
    pub spatial_gates: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Transformer branch

struct TransformerBranch {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    heads: usize,
    channels: usize,
}

impl TransformerBranch {
    fn new<F: Elem>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Self {
        TransformerBranch {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), channels),
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), channels, 3 * channels),
            out: Linear::new(store, rng, &format!("{name}.out"), channels, channels),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), channels),
            ffn1: Linear::new(store, rng, &format!("{name}.ffn1"), channels, 2 * channels),
            ffn2: Linear::new(store, rng, &format!("{name}.ffn2"), 2 * channels, channels),
            heads,
            channels,
        }
    }

    /// Pre-norm self-attention + feed-forward over `(T,C)` tokens.
    fn forward<F: Elem>(
        &self,
        sess: &mut Session<F>,
        tokens: TensorRef,
        probe: Option<&mut SpamProbe>,
    ) -> TensorRef {
        let c = self.channels;
        let dh = c / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let normed = self.ln1.forward(sess, tokens);
        let qkv = self.qkv.forward(sess, normed);
        let q = sess.tape.slice_axis_op(qkv, 1, 0, c);
        let k = sess.tape.slice_axis_op(qkv, 1, c, c);
        let v = sess.tape.slice_axis_op(qkv, 1, 2 * c, c);

        let mut head_outs = Vec::with_capacity(self.heads);
        let mut attn_copies = Vec::new();
        for h in 0..self.heads {
            let qh = sess.tape.slice_axis_op(q, 1, h * dh, dh);
            let kh = sess.tape.slice_axis_op(k, 1, h * dh, dh);
            let vh = sess.tape.slice_axis_op(v, 1, h * dh, dh);
            let kt = sess.tape.transpose2(kh);
            let scores = sess.tape.matmul(qh, kt);
            let scores = sess.tape.scale(scores, scale);
            let attn = sess.tape.softmax_rows(scores);
            if probe.is_some() {
                let a = sess.tape.value(attn);
                let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                attn_copies.push(a2.mapv(|x| x.to_f64()));
            }
            head_outs.push(sess.tape.matmul(attn, vh));
        }
        if let Some(p) = probe {
            p.attention = attn_copies;
        }
        let merged = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            sess.tape.concat(&head_outs, 1)
        };
        let projected = self.out.forward(sess, merged);
        let after_attn = sess.tape.add(tokens, projected);

        let normed2 = self.ln2.forward(sess, after_attn);
        let hidden = self.ffn1.forward(sess, normed2);
        let hidden = sess.tape.relu(hidden);
        let ffn_out = self.ffn2.forward(sess, hidden);
        sess.tape.add(after_attn, ffn_out)
    }

    fn n_params(&self) -> usize {
        4 * self.channels
            + self.qkv.n_params()
            + self.out.n_params()
            + self.ffn1.n_params()
            + self.ffn2.n_params()
    }

    fn madds(&self, tokens: usize) -> u128 {
        let attn = 2 * tokens * tokens * self.channels;
        self.qkv.madds(tokens)
            + self.out.madds(tokens)
            + self.ffn1.madds(tokens)
            + self.ffn2.madds(tokens)
            + attn as u128
    }
}

// ---------------------------------------------------------------------------
// SPAM

pub struct Spam {
    cfg: SpamConfig,
    transformer: TransformerBranch,
    conv: Conv2d,
    codes: ParamId,
    proj_transformer: Conv2d,
    proj_conv: Conv2d,
    proj_codebook: Conv2d,
    proj_out: Conv2d,
}

impl Spam {
    pub fn new<F: Elem>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: SpamConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let transformer =
            TransformerBranch::new(store, rng, &format!("{name}.transformer"), c, cfg.heads);
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), c, c, 3, true);
        let codes = store.add(
            format!("{name}.codebook.codes"),
            crate::nn::gaussian(rng, &[cfg.codebook_size, c], (1.0 / c as f64).sqrt()),
            true,
        );
        let proj_transformer = Conv2d::new(
            store,
            rng,
            &format!("{name}.proj_transformer"),
            c,
            c,
            1,
            true,
        );
        let proj_conv = Conv2d::new(store, rng, &format!("{name}.proj_conv"), c, c, 1, true);
        let proj_codebook =
            Conv2d::new(store, rng, &format!("{name}.proj_codebook"), c, c, 1, true);
        let proj_in = match cfg.fuse {
            FuseMode::Sum => c,
            FuseMode::ConcatProject => 3 * c,
        };
        let proj_out = Conv2d::new(store, rng, &format!("{name}.proj_out"), proj_in, c, 1, true);
        Ok(Spam {
            cfg,
            transformer,
            conv,
            codes,
            proj_transformer,
            proj_conv,
            proj_codebook,
            proj_out,
        })
    }

    pub fn config(&self) -> &SpamConfig {
        &self.cfg
    }

    fn check_input<F: Elem>(&self, sess: &Session<F>, x: TensorRef) -> Result<(usize, usize)> {
        let shape = sess.tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.channels {
            return Err(Error::shape(format!(
                "spam expects ({},H,W) input, got {shape:?}",
                self.cfg.channels
            )));
        }
        Ok((shape[1], shape[2]))
    }

    /// Token-sequence self-attention branch; shape preserving.
    pub fn transformer_branch<F: Elem>(
        &self,
        sess: &mut Session<F>,
        x: TensorRef,
        probe: Option<&mut SpamProbe>,
    ) -> Result<TensorRef> {
        let (h, w) = self.check_input(sess, x)?;
        let tokens = to_tokens(sess, x, self.cfg.channels, h, w);
        let out = self.transformer.forward(sess, tokens, probe);
        Ok(to_spatial(sess, out, self.cfg.channels, h, w))
    }

    /// Soft assignment onto the learned dictionary with a residual:
    /// `y = x + softmax(x . codes^T / sqrt(C)) . codes`.
    pub fn codebook_branch<F: Elem>(
        &self,
        sess: &mut Session<F>,
        x: TensorRef,
        probe: Option<&mut SpamProbe>,
    ) -> Result<TensorRef> {
        let (h, w) = self.check_input(sess, x)?;
        let c = self.cfg.channels;
        let codes = sess.param(self.codes);
        if sess.tape.value(codes).shape()[1] != c {
            return Err(Error::shape("codebook dimension mismatch"));
        }
        let tokens = to_tokens(sess, x, c, h, w);
        let codes_t = sess.tape.transpose2(codes);
        let sims = sess.tape.matmul(tokens, codes_t);
        let sims = sess.tape.scale(sims, F::from_f64(1.0 / (c as f64).sqrt()));
        let weights = sess.tape.softmax_rows(sims);
        if let Some(p) = probe {
            let wv = sess.tape.value(weights);
            let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            p.codebook = Some(w2.mapv(|x| x.to_f64()));
        }
        let recon = sess.tape.matmul(weights, codes);
        let recon = to_spatial(sess, recon, c, h, w);
        Ok(sess.tape.add(x, recon))
    }

    pub fn forward<F: Elem>(
        &self,
        sess: &mut Session<F>,
        x: TensorRef,
        mut probe: Option<&mut SpamProbe>,
    ) -> Result<TensorRef> {
        self.check_input(sess, x)?;
        let t_raw = self.transformer_branch(sess, x, probe.as_deref_mut())?;
        let c_pre = self.conv.forward(sess, x);
        let c_raw = sess.tape.relu(c_pre);
        let b_raw = self.codebook_branch(sess, x, probe)?;
        let t_p = self.proj_transformer.forward(sess, t_raw);
        let c_p = self.proj_conv.forward(sess, c_raw);
        let b_p = self.proj_codebook.forward(sess, b_raw);
        let fused = match self.cfg.fuse {
            FuseMode::Sum => {
                let s = sess.tape.add(t_p, c_p);
                sess.tape.add(s, b_p)
            }
            FuseMode::ConcatProject => sess.tape.concat(&[t_p, c_p, b_p], 0),
        };
        Ok(self.proj_out.forward(sess, fused))
    }

    pub fn n_params(&self) -> usize {
        self.transformer.n_params()
            + self.conv.n_params()
            + self.cfg.codebook_size * self.cfg.channels
            + self.proj_transformer.n_params()
            + self.proj_conv.n_params()
            + self.proj_codebook.n_params()
            + self.proj_out.n_params()
    }

    pub fn madds(&self, h: usize, w: usize) -> u128 {
        let t = h * w;
        let codebook = 2 * t * self.cfg.codebook_size * self.cfg.channels;
        self.transformer.madds(t)
            + self.conv.madds(h, w)
            + codebook as u128
            + self.proj_transformer.madds(h, w)
            + self.proj_conv.madds(h, w)
            + self.proj_codebook.madds(h, w)
            + self.proj_out.madds(h, w)
    }
}

fn to_tokens<F: Elem>(
    sess: &mut Session<F>,
    x: TensorRef,
    c: usize,
    h: usize,
    w: usize,
) -> TensorRef {
    let flat = sess.tape.reshape(x, &[c, h * w]);
    sess.tape.transpose2(flat)
}

fn to_spatial<F: Elem>(
    sess: &mut Session<F>,
    tokens: TensorRef,
    c: usize,
    h: usize,
    w: usize,
) -> TensorRef {
    let t = sess.tape.transpose2(tokens);
    sess.tape.reshape(t, &[c, h, w])
}

// ---------------------------------------------------------------------------
// RepConv

/// Parallel 3x3/1x1 convolutions with batch norm, foldable into one biased
/// 3x3 convolution. ReLU follows in both forms.
pub struct RepConv {
    pub cin: usize,
    pub cout: usize,
    name: String,
    conv3: Option<ParamId>,
    bn3: Option<BatchNorm2d>,
    conv1: Option<ParamId>,
    bn1: Option<BatchNorm2d>,
    fused_w: Option<ParamId>,
    fused_b: Option<ParamId>,
}

impl RepConv {
    pub fn new<F: Elem>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        fused: bool,
    ) -> Self {
        let mut rep = RepConv {
            cin,
            cout,
            name: name.to_string(),
            conv3: None,
            bn3: None,
            conv1: None,
            bn1: None,
            fused_w: None,
            fused_b: None,
        };
        if fused {
            rep.fused_w = Some(store.add(
                format!("{name}.fused.weight"),
                crate::nn::he_normal::<F>(rng, &[cout, cin, 3, 3], cin * 9),
                true,
            ));
            rep.fused_b = Some(store.add(
                format!("{name}.fused.bias"),
                ArrayD::zeros(IxDyn(&[cout])),
                true,
            ));
        } else {
            rep.conv3 = Some(store.add(
                format!("{name}.conv3.weight"),
                crate::nn::he_normal::<F>(rng, &[cout, cin, 3, 3], cin * 9),
                true,
            ));
            rep.bn3 = Some(BatchNorm2d::new(store, &format!("{name}.bn3"), cout));
            rep.conv1 = Some(store.add(
                format!("{name}.conv1.weight"),
                crate::nn::he_normal::<F>(rng, &[cout, cin, 1, 1], cin),
                true,
            ));
            rep.bn1 = Some(BatchNorm2d::new(store, &format!("{name}.bn1"), cout));
        }
        rep
    }

    pub fn is_fused(&self) -> bool {
        self.fused_w.is_some()
    }

    /// Forward in the requested structural mode: `fused = false` runs the
    /// two-branch form, `fused = true` requires folded parameters.
    pub fn forward_mode<F: Elem>(
        &self,
        sess: &mut Session<F>,
        x: TensorRef,
        fused: bool,
    ) -> Result<TensorRef> {
        if fused {
            let (Some(w), Some(b)) = (self.fused_w, self.fused_b) else {
                return Err(Error::invalid(format!(
                    "{}: fused forward requested but parameters are not fused",
                    self.name
                )));
            };
            let w = sess.param(w);
            let b = sess.param(b);
            let y = sess.tape.conv2d(x, w, Some(b), (1, 1));
            Ok(sess.tape.relu(y))
        } else {
            let (Some(c3), Some(bn3), Some(c1), Some(bn1)) =
                (self.conv3, self.bn3.as_ref(), self.conv1, self.bn1.as_ref())
            else {
                return Err(Error::invalid(format!(
                    "{}: branch forward requested on fused parameters",
                    self.name
                )));
            };
            let w3 = sess.param(c3);
            let y3 = sess.tape.conv2d(x, w3, None, (1, 1));
            let y3 = bn3.forward(sess, y3);
            let w1 = sess.param(c1);
            let y1 = sess.tape.conv2d(x, w1, None, (0, 0));
            let y1 = bn1.forward(sess, y1);
            let y = sess.tape.add(y3, y1);
            Ok(sess.tape.relu(y))
        }
    }

    pub fn forward<F: Elem>(&self, sess: &mut Session<F>, x: TensorRef) -> Result<TensorRef> {
        self.forward_mode(sess, x, self.is_fused())
    }

    /// Fold both branch batch norms into their convolutions and sum into a
    /// single biased 3x3 kernel; removes the branch parameters.
    pub fn fuse<F: Elem>(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        let (w, b) = self.folded_kernel(store)?;
        let (c3, bn3) = (self.conv3.take().unwrap(), self.bn3.take().unwrap());
        let (c1, bn1) = (self.conv1.take().unwrap(), self.bn1.take().unwrap());
        store.remove(c3);
        store.remove(c1);
        for id in [bn3.gamma, bn3.beta, bn3.running_mean, bn3.running_var] {
            store.remove(id);
        }
        for id in [bn1.gamma, bn1.beta, bn1.running_mean, bn1.running_var] {
            store.remove(id);
        }
        self.fused_w = Some(store.add(format!("{}.fused.weight", self.name), w, true));
        self.fused_b = Some(store.add(format!("{}.fused.bias", self.name), b.into_dyn(), true));
        Ok(())
    }

    /// The folded `(weight, bias)` pair. Fold arithmetic runs in f64: each
    /// batch norm becomes a per-output-channel scale `gamma/sqrt(var+eps)`
    /// and shift, the 1x1 kernel zero-pads to the 3x3 center, kernels and
    /// biases sum.
    pub fn folded_kernel<F: Elem>(&self, store: &ParamStore<F>) -> Result<(ArrayD<F>, Array1<F>)> {
        let (Some(c3), Some(bn3), Some(c1), Some(bn1)) =
            (self.conv3, self.bn3.as_ref(), self.conv1, self.bn1.as_ref())
        else {
            return Err(Error::invalid(format!(
                "{}: parameters are already fused",
                self.name
            )));
        };
        let k3 = store.array(c3);
        let k1 = store.array(c1);
        let fold = |bn: &BatchNorm2d| -> Result<(Vec<f64>, Vec<f64>)> {
            let gamma = store.array(bn.gamma);
            let beta = store.array(bn.beta);
            let mean = store.array(bn.running_mean);
            let var = store.array(bn.running_var);
            let mut scale = Vec::with_capacity(self.cout);
            let mut shift = Vec::with_capacity(self.cout);
            for i in 0..self.cout {
                let v = var.as_slice().unwrap()[i].to_f64() + bn.eps;
                if v <= 0.0 {
                    return Err(Error::invalid(format!(
                        "{}: batch norm variance + eps is not positive ({v})",
                        self.name
                    )));
                }
                let s = gamma.as_slice().unwrap()[i].to_f64() / v.sqrt();
                scale.push(s);
                shift.push(
                    beta.as_slice().unwrap()[i].to_f64() - mean.as_slice().unwrap()[i].to_f64() * s,
                );
            }
            Ok((scale, shift))
        };
        let (s3, sh3) = fold(bn3)?;
        let (s1, sh1) = fold(bn1)?;
        let mut w = ArrayD::<F>::zeros(IxDyn(&[self.cout, self.cin, 3, 3]));
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let mut acc = k3[[co, ci, dy, dx]].to_f64() * s3[co];
                        if dy == 1 && dx == 1 {
                            acc += k1[[co, ci, 0, 0]].to_f64() * s1[co];
                        }
                        w[[co, ci, dy, dx]] = F::from_f64(acc);
                    }
                }
            }
        }
        let b = Array1::from_shape_fn(self.cout, |co| F::from_f64(sh3[co] + sh1[co]));
        Ok((w, b))
    }

    pub fn n_params(&self) -> usize {
        if self.is_fused() {
            self.cout * self.cin * 9 + self.cout
        } else {
            self.cout * self.cin * 9 + self.cout * self.cin + 4 * self.cout
        }
    }

    pub fn madds(&self, h: usize, w: usize) -> u128 {
        if self.is_fused() {
            (self.cout * self.cin * 9) as u128 * (h * w) as u128
        } else {
            (self.cout * self.cin * 10) as u128 * (h * w) as u128
        }
    }

    pub fn bn_handles(&self) -> Option<(&BatchNorm2d, &BatchNorm2d)> {
        Some((self.bn3.as_ref()?, self.bn1.as_ref()?))
    }

    pub fn branch_weights(&self) -> Option<(ParamId, ParamId)> {
        Some((self.conv3?, self.conv1?))
    }

    pub fn fused_params(&self) -> Option<(ParamId, ParamId)> {
        Some((self.fused_w?, self.fused_b?))
    }
}

// ---------------------------------------------------------------------------
// AFAM

pub struct Afam {
    cfg: AfamConfig,
    se_fc1: Linear,
    se_fc2: Linear,
    conv_a: Conv2d,
    conv_b: Conv2d,
    pub repconv: RepConv,
    proj_out: Conv2d,
}

impl Afam {
    pub fn new<F: Elem>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AfamConfig,
        fused: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let path_c = if cfg.split_paths { c / 2 } else { c };
        let se_fc1 = Linear::new(store, rng, &format!("{name}.se.fc1"), c, c / cfg.reduction);
        let se_fc2 = Linear::new(store, rng, &format!("{name}.se.fc2"), c / cfg.reduction, c);
        let conv_a = Conv2d::new(
            store,
            rng,
            &format!("{name}.branch_a"),
            path_c,
            path_c,
            cfg.kernel_a,
            true,
        );
        let conv_b = Conv2d::new(
            store,
            rng,
            &format!("{name}.branch_b"),
            path_c,
            path_c,
            cfg.kernel_b,
            true,
        );
        let repconv = RepConv::new(
            store,
            rng,
            &format!("{name}.repconv"),
            2 * path_c,
            path_c,
            fused,
        );
        let proj_out = Conv2d::new(
            store,
            rng,
            &format!("{name}.proj_out"),
            2 * path_c,
            c,
            1,
            true,
        );
        Ok(Afam {
            cfg,
            se_fc1,
            se_fc2,
            conv_a,
            conv_b,
            repconv,
            proj_out,
        })
    }

    pub fn config(&self) -> &AfamConfig {
        &self.cfg
    }

    pub fn forward<F: Elem>(
        &self,
        sess: &mut Session<F>,
        x: TensorRef,
        probe: Option<&mut AfamProbe>,
    ) -> Result<TensorRef> {
        let shape = sess.tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.channels {
            return Err(Error::shape(format!(
                "afam expects ({},H,W) input, got {shape:?}",
                self.cfg.channels
            )));
        }
        let c = self.cfg.channels;

        // Channel attention: squeeze spatial info, bottleneck, sigmoid gates.
        let descriptor = sess.tape.spatial_mean(x);
        let descriptor = sess.tape.reshape(descriptor, &[1, c]);
        let hidden = self.se_fc1.forward(sess, descriptor);
        let hidden = sess.tape.relu(hidden);
        let gates = self.se_fc2.forward(sess, hidden);
        let gates = sess.tape.sigmoid(gates);
        let gates = sess.tape.reshape(gates, &[c, 1, 1]);
        let weighted = sess.tape.mul_bcast(x, gates);

        let (path_a_in, path_b_in) = if self.cfg.split_paths {
            let half = c / 2;
            (
                sess.tape.slice_axis_op(weighted, 0, 0, half),
                sess.tape.slice_axis_op(weighted, 0, half, half),
            )
        } else {
            (weighted, weighted)
        };

        // Path A: two parallel convolutions, concat, RepConv.
        let a1 = self.conv_a.forward(sess, path_a_in);
        let a2 = self.conv_b.forward(sess, path_a_in);
        let cat_a = sess.tape.concat(&[a1, a2], 0);
        let path_a = self.repconv.forward(sess, cat_a)?;

        // Path B: cross-channel max + mean added, sigmoid, per-position gates.
        let mx = sess.tape.channel_max(path_b_in);
        let mn = sess.tape.channel_mean(path_b_in);
        let s = sess.tape.add(mx, mn);
        let s = sess.tape.sigmoid(s);
        let path_b = sess.tape.mul_bcast(path_b_in, s);

        if let Some(p) = probe {
            let gv = sess.tape.value(gates);
            p.channel_gates = gv.iter().map(|&v| Elem::to_f64(v)).collect();
            let sv = sess.tape.value(s);
            p.spatial_gates = sv.iter().map(|&v| Elem::to_f64(v)).collect();
        }

        let cat = sess.tape.concat(&[path_a, path_b], 0);
        Ok(self.proj_out.forward(sess, cat))
    }

    pub fn n_params(&self) -> usize {
        self.se_fc1.n_params()
            + self.se_fc2.n_params()
            + self.conv_a.n_params()
            + self.conv_b.n_params()
            + self.repconv.n_params()
            + self.proj_out.n_params()
    }

    pub fn madds(&self, h: usize, w: usize) -> u128 {
        self.se_fc1.madds(1)
            + self.se_fc2.madds(1)
            + self.conv_a.madds(h, w)
            + self.conv_b.madds(h, w)
            + self.repconv.madds(h, w)
            + self.proj_out.madds(h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rand_input(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(dims), |_| rng.random_range(-scale..scale))
    }

    /// Deterministic non-uniform weights so the scalar reduction in gradient
    /// checks is sensitive to every output position.
    fn probe_weights(dims: &[usize]) -> ArrayD<f64> {
        let mut i = 0usize;
        ArrayD::from_shape_fn(IxDyn(dims), |_| {
            i += 1;
            ((i as f64) * 0.7).sin() + 0.1
        })
    }

    /// Central finite differences over the block input and selected named
    /// parameters, against one analytic backward pass.
    fn fd_check_block<Fwd>(
        store: &mut ParamStore<f64>,
        x0: &ArrayD<f64>,
        check_params: &[&str],
        fwd: Fwd,
        tol: f64,
    ) where
        Fwd: Fn(&mut Session<f64>, TensorRef) -> TensorRef,
    {
        let eval = |store: &mut ParamStore<f64>, xa: &ArrayD<f64>| -> f64 {
            let mut sess = Session::new(store, true);
            let x = sess.tape.leaf(xa.clone(), false);
            let y = fwd(&mut sess, x);
            let w = sess
                .tape
                .constant(probe_weights(sess.tape.value(y).shape()));
            let p = sess.tape.mul(y, w);
            let loss = sess.tape.mean_all(p);
            *sess.tape.value(loss).first().unwrap()
        };

        let mut sess = Session::new(store, true);
        let x = sess.tape.leaf(x0.clone(), true);
        let y = fwd(&mut sess, x);
        let w = sess
            .tape
            .constant(probe_weights(sess.tape.value(y).shape()));
        let p = sess.tape.mul(y, w);
        let loss = sess.tape.mean_all(p);
        let grads = sess.backward(loss);
        let dx = grads.nodes.get(x).cloned().expect("input grad");
        let mut param_grads = std::collections::BTreeMap::new();
        for (pid, g) in &grads.params {
            param_grads.insert(sess.store.name(*pid).to_string(), g.clone());
        }
        drop(sess);

        let mut max_rel = 0.0f64;
        let mut assess = |analytic: f64, fd: f64| {
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        };

        let mut xw = x0.clone();
        for flat in 0..xw.len() {
            let orig = xw.as_slice().unwrap()[flat];
            let h = 1e-6 * (1.0 + orig.abs());
            xw.as_slice_mut().unwrap()[flat] = orig + h;
            let fp = eval(store, &xw);
            xw.as_slice_mut().unwrap()[flat] = orig - h;
            let fm = eval(store, &xw);
            xw.as_slice_mut().unwrap()[flat] = orig;
            assess(dx.as_slice().unwrap()[flat], (fp - fm) / (2.0 * h));
        }

        for pname in check_params {
            let pid = store
                .lookup(pname)
                .unwrap_or_else(|| panic!("param {pname}"));
            let base = store.array(pid).clone();
            let analytic = param_grads
                .get(*pname)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(base.raw_dim()));
            for flat in 0..base.len() {
                let orig = base.as_slice().unwrap()[flat];
                let h = 1e-6 * (1.0 + orig.abs());
                let mut pert = base.clone();
                pert.as_slice_mut().unwrap()[flat] = orig + h;
                store.set(pid, pert.clone());
                let fp = eval(store, x0);
                pert.as_slice_mut().unwrap()[flat] = orig - h;
                store.set(pid, pert);
                let fm = eval(store, x0);
                store.set(pid, base.clone());
                assess(analytic.as_slice().unwrap()[flat], (fp - fm) / (2.0 * h));
            }
        }
        assert!(
            max_rel <= tol,
            "block gradient check failed: max rel err {max_rel:.3e} > {tol:.1e}"
        );
    }

    #[test]
    fn spam_shape_preserving_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut store = ParamStore::<f64>::new();
        let spam = Spam::new(&mut store, &mut rng, "s", SpamConfig::new(32)).unwrap();
        let x = rand_input(&mut rng, &[32, 8, 8], 1.0);
        let mut sess = Session::new(&mut store, false);
        let xr = sess.input(x);
        let mut probe = SpamProbe::default();
        let y = spam.forward(&mut sess, xr, Some(&mut probe)).unwrap();
        assert_eq!(sess.tape.value(y).shape(), &[32, 8, 8]);
        assert_eq!(probe.attention.len(), 2);
        for a in &probe.attention {
            for row in a.rows() {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() <= 1e-6, "attention row sums to {s}");
            }
        }
        let cw = probe.codebook.expect("codebook weights");
        assert_eq!(cw.dim(), (64, 32));
        for row in cw.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() <= 1e-6, "codebook row sums to {s}");
        }
    }

    #[test]
    fn spam_single_token_attention_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let mut store = ParamStore::<f64>::new();
        let spam = Spam::new(&mut store, &mut rng, "s", SpamConfig::new(8)).unwrap();
        let x = rand_input(&mut rng, &[8, 1, 1], 1.0);
        let mut sess = Session::new(&mut store, false);
        let xr = sess.input(x);
        let mut probe = SpamProbe::default();
        let _ = spam
            .transformer_branch(&mut sess, xr, Some(&mut probe))
            .unwrap();
        for a in &probe.attention {
            assert_eq!(a.dim(), (1, 1));
            assert_eq!(
                a[[0, 0]],
                1.0,
                "single token attends to itself with weight 1"
            );
        }
    }

    #[test]
    fn codebook_k1_broadcasts_single_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let mut store = ParamStore::<f64>::new();
        let mut cfg = SpamConfig::new(8);
        cfg.codebook_size = 1;
        let spam = Spam::new(&mut store, &mut rng, "s", cfg).unwrap();
        let code = store
            .array(store.lookup("s.codebook.codes").unwrap())
            .clone();
        let x = rand_input(&mut rng, &[8, 3, 3], 1.0);
        let mut sess = Session::new(&mut store, false);
        let xr = sess.input(x.clone());
        let y = spam.codebook_branch(&mut sess, xr, None).unwrap();
        let got = sess.tape.value(y);
        for c in 0..8 {
            for py in 0..3 {
                for px in 0..3 {
                    let want = x[[c, py, px]] + code[[0, c]];
                    assert_eq!(got[[c, py, px]], want);
                }
            }
        }
    }

    #[test]
    fn codebook_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let mut store = ParamStore::<f64>::new();
        let mut cfg = SpamConfig::new(8);
        cfg.codebook_size = 5;
        let spam = Spam::new(&mut store, &mut rng, "s", cfg).unwrap();
        let x = rand_input(&mut rng, &[8, 3, 3], 1.0);
        let run = |store: &mut ParamStore<f64>| -> ArrayD<f64> {
            let mut sess = Session::new(store, false);
            let xr = sess.input(x.clone());
            let y = spam.codebook_branch(&mut sess, xr, None).unwrap();
            sess.tape.value(y).clone()
        };
        let before = run(&mut store);
        let codes_id = store.lookup("s.codebook.codes").unwrap();
        let codes = store.array(codes_id).clone();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = ArrayD::from_shape_fn(codes.raw_dim(), |ix| codes[[perm[ix[0]], ix[1]]]);
        store.set(codes_id, permuted);
        let after = run(&mut store);
        let diff = crate::tensor::max_abs_diff(&before, &after);
        assert!(diff < 1e-12, "permuting codes changed output by {diff}");
    }

    #[test]
    fn spam_zeroed_projections_reduce_to_conv_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let mut store = ParamStore::<f64>::new();
        let spam = Spam::new(&mut store, &mut rng, "s", SpamConfig::new(8)).unwrap();
        for name in [
            "s.proj_transformer.weight",
            "s.proj_transformer.bias",
            "s.proj_codebook.weight",
            "s.proj_codebook.bias",
        ] {
            let id = store.lookup(name).unwrap();
            let zeros = ArrayD::zeros(store.array(id).raw_dim());
            store.set(id, zeros);
        }
        let x = rand_input(&mut rng, &[8, 4, 4], 1.0);
        let mut sess = Session::new(&mut store, false);
        let xr = sess.input(x.clone());
        let full = spam.forward(&mut sess, xr, None).unwrap();
        let conv_only = {
            let pre = spam.conv.forward(&mut sess, xr);
            let act = sess.tape.relu(pre);
            let proj = spam.proj_conv.forward(&mut sess, act);
            spam.proj_out.forward(&mut sess, proj)
        };
        let diff = crate::tensor::max_abs_diff(sess.tape.value(full), sess.tape.value(conv_only));
        assert_eq!(
            diff, 0.0,
            "additive fusion should be exact with zeroed branches"
        );
    }

    #[test]
    fn spam_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(127);
        let mut store = ParamStore::<f64>::new();
        let mut cfg = SpamConfig::new(8);
        cfg.codebook_size = 4;
        let spam = Spam::new(&mut store, &mut rng, "s", cfg).unwrap();
        let x = rand_input(&mut rng, &[8, 4, 4], 1.0);
        fd_check_block(
            &mut store,
            &x,
            &[
                "s.codebook.codes",
                "s.transformer.qkv.weight",
                "s.conv.weight",
            ],
            |sess, x| spam.forward(sess, x, None).unwrap(),
            1e-4,
        );
    }

    #[test]
    fn afam_shape_gates_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        let mut store = ParamStore::<f64>::new();
        let afam = Afam::new(&mut store, &mut rng, "a", AfamConfig::new(32), false).unwrap();
        let x = rand_input(&mut rng, &[32, 8, 8], 1.0);
        let mut sess = Session::new(&mut store, false);
        let xr = sess.input(x);
        let mut probe = AfamProbe::default();
        let y = afam.forward(&mut sess, xr, Some(&mut probe)).unwrap();
        assert_eq!(sess.tape.value(y).shape(), &[32, 8, 8]);
        assert_eq!(probe.channel_gates.len(), 32);
        assert_eq!(probe.spatial_gates.len(), 64);
        for &g in probe.channel_gates.iter().chain(probe.spatial_gates.iter()) {
            assert!(g > 0.0 && g < 1.0, "sigmoid gate {g} outside (0,1)");
        }
        // Zero input: outputs are the biases' deterministic images.
        let zr = sess.input(ArrayD::zeros(IxDyn(&[32, 8, 8])));
        let yz = afam.forward(&mut sess, zr, None).unwrap();
        for &v in sess.tape.value(yz).iter() {
            assert!(v.is_finite(), "zero input produced non-finite output");
        }
    }

    #[test]
    fn afam_split_paths_shape_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(137);
        let mut store = ParamStore::<f64>::new();
        let mut cfg = AfamConfig::new(16);
        cfg.split_paths = true;
        let afam = Afam::new(&mut store, &mut rng, "a", cfg, false).unwrap();
        let x = rand_input(&mut rng, &[16, 6, 6], 1.0);
        let mut sess = Session::new(&mut store, false);
        let xr = sess.input(x);
        let y = afam.forward(&mut sess, xr, None).unwrap();
        assert_eq!(sess.tape.value(y).shape(), &[16, 6, 6]);
    }

    #[test]
    fn afam_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(139);
        let mut store = ParamStore::<f64>::new();
        let afam = Afam::new(&mut store, &mut rng, "a", AfamConfig::new(8), false).unwrap();
        let x = rand_input(&mut rng, &[8, 4, 4], 1.0);
        fd_check_block(
            &mut store,
            &x,
            &[
                "a.se.fc1.weight",
                "a.repconv.conv3.weight",
                "a.repconv.bn3.gamma",
            ],
            |sess, x| afam.forward(sess, x, None).unwrap(),
            1e-4,
        );
    }

    #[test]
    fn blocks_reject_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(149);
        let mut store = ParamStore::<f64>::new();
        let spam = Spam::new(&mut store, &mut rng, "s", SpamConfig::new(8)).unwrap();
        let afam = Afam::new(&mut store, &mut rng, "a", AfamConfig::new(8), false).unwrap();
        let mut sess = Session::new(&mut store, false);
        let bad = sess.input(ArrayD::zeros(IxDyn(&[9, 4, 4])));
        assert!(spam.forward(&mut sess, bad, None).is_err());
        assert!(afam.forward(&mut sess, bad, None).is_err());
    }

    /// Populate a RepConv's batch norm buffers with non-trivial statistics,
    /// as if it had been trained.
    fn randomize_bn_stats<F: Elem>(store: &mut ParamStore<F>, rep: &RepConv, rng: &mut ChaCha8Rng) {
        let (bn3, bn1) = rep.bn_handles().unwrap();
        for bn in [bn3, bn1] {
            for (id, lo, hi) in [
                (bn.gamma, 0.5, 1.5),
                (bn.beta, -0.5, 0.5),
                (bn.running_mean, -1.0, 1.0),
                (bn.running_var, 0.25, 4.0),
            ] {
                let dims = store.array(id).raw_dim();
                let arr = ArrayD::from_shape_fn(dims, |_| F::from_f64(rng.random_range(lo..hi)));
                store.set(id, arr);
            }
        }
    }

    /// Draw branch kernels at trained-network scale (|w| ~ 5e-2); the fp32
    /// agreement bound assumes activations of unit order, not raw He-init
    /// magnitudes against full-range inputs.
    fn randomize_weights_trained_scale<F: Elem>(
        store: &mut ParamStore<F>,
        rep: &RepConv,
        rng: &mut ChaCha8Rng,
    ) {
        let (c3, c1) = rep.branch_weights().unwrap();
        for id in [c3, c1] {
            let dims = store.array(id).raw_dim();
            let arr = ArrayD::from_shape_fn(dims, |_| F::from_f64(rng.random_range(-0.05..0.05)));
            store.set(id, arr);
        }
    }

    #[test]
    fn repconv_unfused_vs_folded_forward_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(151);
        for trial in 0..20 {
            let mut store = ParamStore::<f32>::new();
            let rep = RepConv::new(&mut store, &mut rng, "r", 16, 8, false);
            randomize_bn_stats(&mut store, &rep, &mut rng);
            randomize_weights_trained_scale(&mut store, &rep, &mut rng);
            let x = ArrayD::from_shape_fn(IxDyn(&[16, 8, 8]), |_| rng.random_range(-10.0f32..10.0));
            let mut sess = Session::new(&mut store, false);
            let xr = sess.input(x);
            let unfused = rep.forward_mode(&mut sess, xr, false).unwrap();
            let (w, b) = rep.folded_kernel(sess.store).unwrap();
            let wr = sess.tape.constant(w);
            let br = sess.tape.constant(b.into_dyn());
            let conv = sess.tape.conv2d(xr, wr, Some(br), (1, 1));
            let fused = sess.tape.relu(conv);
            let diff =
                crate::tensor::max_abs_diff(sess.tape.value(unfused), sess.tape.value(fused));
            assert!(
                diff <= 1e-5,
                "trial {trial}: |unfused - fused| = {diff:.3e}"
            );
        }
    }

    #[test]
    fn repconv_identity_fold_returns_k3_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(157);
        let mut store = ParamStore::<f64>::new();
        let rep = RepConv::new(&mut store, &mut rng, "r", 4, 4, false);
        let (c3, c1) = rep.branch_weights().unwrap();
        let k3 = store.array(c3).clone();
        store.set(c1, ArrayD::zeros(IxDyn(&[4, 4, 1, 1])));
        // Identity batch norm: gamma 1, beta 0, mean 0, var such that
        // var + eps == 1 exactly.
        let (bn3, bn1) = rep.bn_handles().unwrap();
        for bn in [bn3, bn1] {
            let v = 1.0 - bn.eps;
            assert_eq!(v + bn.eps, 1.0);
            store.set(bn.running_var, ArrayD::from_elem(IxDyn(&[4]), v));
        }
        let (w, b) = rep.folded_kernel(&store).unwrap();
        assert_eq!(crate::tensor::max_abs_diff(&w, &k3), 0.0);
        for &bv in b.iter() {
            assert_eq!(bv, 0.0);
        }
    }

    #[test]
    fn repconv_fold_places_1x1_kernel_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(163);
        let mut store = ParamStore::<f64>::new();
        let rep = RepConv::new(&mut store, &mut rng, "r", 3, 2, false);
        let (c3, c1) = rep.branch_weights().unwrap();
        store.set(c3, ArrayD::zeros(IxDyn(&[2, 3, 3, 3])));
        let k1 = store.array(c1).clone();
        let (bn3, bn1) = rep.bn_handles().unwrap();
        for bn in [bn3, bn1] {
            let v = 1.0 - bn.eps;
            store.set(bn.running_var, ArrayD::from_elem(IxDyn(&[2]), v));
        }
        let (w, _) = rep.folded_kernel(&store).unwrap();
        for co in 0..2 {
            for ci in 0..3 {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let want = if dy == 1 && dx == 1 {
                            k1[[co, ci, 0, 0]]
                        } else {
                            0.0
                        };
                        assert_eq!(w[[co, ci, dy, dx]], want);
                    }
                }
            }
        }
    }

    #[test]
    fn repconv_fused_zero_input_yields_activated_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(167);
        let mut store = ParamStore::<f32>::new();
        let mut rep = RepConv::new(&mut store, &mut rng, "r", 4, 4, false);
        randomize_bn_stats(&mut store, &rep, &mut rng);
        rep.fuse(&mut store).unwrap();
        let (_, bid) = rep.fused_params().unwrap();
        let bias = store.array(bid).clone();
        let mut sess = Session::new(&mut store, false);
        let x = sess.input(ArrayD::zeros(IxDyn(&[4, 5, 5])));
        let y = rep.forward(&mut sess, x).unwrap();
        let v = sess.tape.value(y);
        for c in 0..4 {
            let want = bias.as_slice().unwrap()[c].max(0.0);
            for &got in v.index_axis(ndarray::Axis(0), c).iter() {
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn repconv_mode_and_fuse_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(173);
        let mut store = ParamStore::<f64>::new();
        let mut rep = RepConv::new(&mut store, &mut rng, "r", 4, 4, false);
        {
            let mut sess = Session::new(&mut store, false);
            let x = sess.input(ArrayD::zeros(IxDyn(&[4, 4, 4])));
            // Fused mode before fusing is an error.
            assert!(rep.forward_mode(&mut sess, x, true).is_err());
        }
        rep.fuse(&mut store).unwrap();
        assert!(rep.is_fused());
        // Second fuse is an error.
        assert!(rep.fuse(&mut store).is_err());
        // Negative running variance is rejected during folding.
        let mut store2 = ParamStore::<f64>::new();
        let rep2 = RepConv::new(&mut store2, &mut rng, "r", 4, 4, false);
        let (bn3, _) = rep2.bn_handles().unwrap();
        store2.set(bn3.running_var, ArrayD::from_elem(IxDyn(&[4]), -1.0));
        assert!(rep2.folded_kernel(&store2).is_err());
    }

    #[test]
    fn repconv_fuse_reduces_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(179);
        let mut store = ParamStore::<f64>::new();
        let mut rep = RepConv::new(&mut store, &mut rng, "r", 8, 8, false);
        let before = store.element_count(false);
        rep.fuse(&mut store).unwrap();
        let after = store.element_count(false);
        assert!(after < before, "fused {after} should be < unfused {before}");
        assert_eq!(after, 8 * 8 * 9 + 8);
    }
}
