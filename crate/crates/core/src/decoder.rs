//! Multi-scale attentive decoder and the stride-2 prediction head.
//!
//! The decoder projects the stride-16 tap, runs the attention block, and
//! walks up the pyramid: upsample 2x, add the projected skip, apply the
//! aggregation block, ending in a stride-2 feature map. Ablation switches
//! replace either block with a plain 3x3 convolution.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{FeaturePyramid, OrigSize};
use crate::blocks::{Afam, AfamConfig, AfamProbe, Spam, SpamConfig, SpamProbe};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore, Session};
use crate::tensor::{sigmoid_scalar, Elem, TensorRef};

#[derive(Clone, Copy, Debug)]
pub struct DecoderConfig {
    /// Internal channel width of the decoder.
    pub width: usize,
    pub use_spam: bool,
    pub use_afam: bool,
}

impl DecoderConfig {
    pub fn new(width: usize) -> Self {
        DecoderConfig {
            width,
            use_spam: true,
            use_afam: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("decoder width must be positive"));
        }
        Ok(())
    }
}

/// Offset/logit nodes still on the tape.
pub struct DenseNodes {
    pub offsets: TensorRef,
    pub logits: TensorRef,
}

/// Materialized head output: per-cell offsets (pixels) and logits on the
/// stride-2 grid of the padded input.
#[derive(Clone, Debug)]
pub struct DenseOutput<F: Elem> {
    pub offsets: Array3<F>,
    pub logits: Array3<F>,
}

impl<F: Elem> DenseOutput<F> {
    pub fn from_nodes(sess: &Session<F>, nodes: &DenseNodes) -> Self {
        let to3 = |t: TensorRef| {
            sess.tape
                .value(t)
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("(c,h,w) head output")
                .to_owned()
        };
        DenseOutput {
            offsets: to3(nodes.offsets),
            logits: to3(nodes.logits),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.offsets.dim().1, self.offsets.dim().2)
    }
}

enum StageBlock {
    Spam(Spam),
    Afam(Afam),
    Conv(Conv2d),
}

impl StageBlock {
    fn forward<F: Elem>(
        &self,
        sess: &mut Session<F>,
        x: TensorRef,
        probes: Option<&mut MsadProbe>,
    ) -> Result<TensorRef> {
        match self {
            StageBlock::Spam(s) => {
                let probe = probes.map(|p| &mut p.spam);
                s.forward(sess, x, probe)
            }
            StageBlock::Afam(a) => {
                let probe = probes.map(|p| {
                    p.afam.push(AfamProbe::default());
                    p.afam.last_mut().unwrap()
                });
                a.forward(sess, x, probe)
            }
            StageBlock::Conv(c) => {
                let y = c.forward(sess, x);
                Ok(sess.tape.relu(y))
            }
        }
    }

    fn n_params(&self) -> usize {
        match self {
            StageBlock::Spam(s) => s.n_params(),
            StageBlock::Afam(a) => a.n_params(),
            StageBlock::Conv(c) => c.n_params(),
        }
    }

    fn madds(&self, h: usize, w: usize) -> u128 {
        match self {
            StageBlock::Spam(s) => s.madds(h, w),
            StageBlock::Afam(a) => a.madds(h, w),
            StageBlock::Conv(c) => c.madds(h, w),
        }
    }
}

/// Attention/gate values captured across the decoder when probing.
#[derive(Default)]
pub struct MsadProbe {
    pub spam: SpamProbe,
    pub afam: Vec<AfamProbe>,
}

pub struct Msad {
    cfg: DecoderConfig,
    proj16: Conv2d,
    proj8: Conv2d,
    proj4: Conv2d,
    stage16: StageBlock,
    stage8: StageBlock,
    stage4: StageBlock,
}

impl Msad {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Elem>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: DecoderConfig,
        spam_cfg: SpamConfig,
        afam_cfg: AfamConfig,
        tap_widths: (usize, usize, usize),
        fused: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let (c4, c8, c16) = tap_widths;
        let proj16 = Conv2d::new(store, rng, "decoder.proj16", c16, w, 1, true);
        let proj8 = Conv2d::new(store, rng, "decoder.proj8", c8, w, 1, true);
        let proj4 = Conv2d::new(store, rng, "decoder.proj4", c4, w, 1, true);
        let stage16 = if cfg.use_spam {
            StageBlock::Spam(Spam::new(store, rng, "decoder.stage16.spam", spam_cfg)?)
        } else {
            StageBlock::Conv(Conv2d::new(
                store,
                rng,
                "decoder.stage16.conv",
                w,
                w,
                3,
                true,
            ))
        };
        let mk_afam = |store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str| {
            if cfg.use_afam {
                Ok::<_, Error>(StageBlock::Afam(Afam::new(
                    store, rng, name, afam_cfg, fused,
                )?))
            } else {
                let conv_name = name.replace(".afam", ".conv");
                Ok(StageBlock::Conv(Conv2d::new(
                    store, rng, &conv_name, w, w, 3, true,
                )))
            }
        };
        let stage8 = mk_afam(store, rng, "decoder.stage8.afam")?;
        let stage4 = mk_afam(store, rng, "decoder.stage4.afam")?;
        Ok(Msad {
            cfg,
            proj16,
            proj8,
            proj4,
            stage16,
            stage8,
            stage4,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn repconvs_mut(&mut self) -> Vec<&mut crate::blocks::RepConv> {
        let mut out = Vec::new();
        for stage in [&mut self.stage8, &mut self.stage4] {
            if let StageBlock::Afam(a) = stage {
                out.push(&mut a.repconv);
            }
        }
        out
    }

    /// Decode the pyramid into the stride-2 feature map.
    pub fn forward<F: Elem>(
        &self,
        sess: &mut Session<F>,
        pyramid: &FeaturePyramid,
        mut probes: Option<&mut MsadProbe>,
    ) -> Result<TensorRef> {
        let p16 = self.proj16.forward(sess, pyramid.f16);
        let b16 = self.stage16.forward(sess, p16, probes.as_deref_mut())?;
        let u8_ = sess.tape.upsample_bilinear2(b16);
        let p8 = self.proj8.forward(sess, pyramid.f8);
        if sess.tape.value(u8_).shape() != sess.tape.value(p8).shape() {
            return Err(Error::shape(format!(
                "pyramid mismatch: upsampled stride-16 {:?} vs stride-8 {:?}",
                sess.tape.value(u8_).shape(),
                sess.tape.value(p8).shape()
            )));
        }
        let s8 = sess.tape.add(u8_, p8);
        let b8 = self.stage8.forward(sess, s8, probes.as_deref_mut())?;
        let u4 = sess.tape.upsample_bilinear2(b8);
        let p4 = self.proj4.forward(sess, pyramid.f4);
        if sess.tape.value(u4).shape() != sess.tape.value(p4).shape() {
            return Err(Error::shape("pyramid mismatch at stride 4"));
        }
        let s4 = sess.tape.add(u4, p4);
        let b4 = self.stage4.forward(sess, s4, probes)?;
        Ok(sess.tape.upsample_bilinear2(b4))
    }

    pub fn n_params(&self) -> usize {
        self.proj16.n_params()
            + self.proj8.n_params()
            + self.proj4.n_params()
            + self.stage16.n_params()
            + self.stage8.n_params()
            + self.stage4.n_params()
    }

    /// Multiply-accumulate count for a padded `h x w` input.
    pub fn madds(&self, h: usize, w: usize) -> u128 {
        let (h16, w16) = (h / 16, w / 16);
        let (h8, w8) = (h / 8, w / 8);
        let (h4, w4) = (h / 4, w / 4);
        self.proj16.madds(h16, w16)
            + self.stage16.madds(h16, w16)
            + self.proj8.madds(h8, w8)
            + self.stage8.madds(h8, w8)
            + self.proj4.madds(h4, w4)
            + self.stage4.madds(h4, w4)
    }
}

/// Two sibling 3x3 heads over the stride-2 map: point offsets (2 channels,
/// pixels) and confidence logits (1 channel).
pub struct Head {
    offsets: Conv2d,
    logits: Conv2d,
    pub width: usize,
}

impl Head {
    pub fn new<F: Elem>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, width: usize) -> Self {
        let offsets = Conv2d::new(store, rng, "head.offsets", width, 2, 3, true);
        let logits = Conv2d::new(store, rng, "head.logits", width, 1, 3, true);
        // Start confidences low so early training predicts background.
        let bias = store.lookup("head.logits.bias").expect("just added");
        store.set(
            bias,
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), F::from_f64(-2.0)),
        );
        Head {
            offsets,
            logits,
            width,
        }
    }

    pub fn forward<F: Elem>(&self, sess: &mut Session<F>, decoded: TensorRef) -> DenseNodes {
        DenseNodes {
            offsets: self.offsets.forward(sess, decoded),
            logits: self.logits.forward(sess, decoded),
        }
    }

    pub fn n_params(&self) -> usize {
        self.offsets.n_params() + self.logits.n_params()
    }

    pub fn madds(&self, h: usize, w: usize) -> u128 {
        self.offsets.madds(h / 2, w / 2) + self.logits.madds(h / 2, w / 2)
    }
}

/// Anchor reference point in pixel coordinates.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
}

/// One decoded prediction.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct PredPoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Cell-center anchors on a stride-`s` lattice over an `h x w` image,
/// row-major: `(s*(j+0.5), s*(i+0.5))`.
pub fn make_anchors(h: usize, w: usize, stride: usize) -> Result<Vec<Anchor>> {
    if stride == 0 || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
        return Err(Error::invalid(format!(
            "anchor grid: {h}x{w} not divisible by stride {stride}"
        )));
    }
    let (gh, gw) = (h / stride, w / stride);
    let mut anchors = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            anchors.push(Anchor {
                x: stride as f64 * (j as f64 + 0.5),
                y: stride as f64 * (i as f64 + 0.5),
            });
        }
    }
    Ok(anchors)
}

/// Threshold and decode head output into predicted points: keep cells with
/// `sigmoid(logit) >= tau` whose decoded point lands inside the original
/// (unpadded) extent.
pub fn decode_points<F: Elem>(
    dense: &DenseOutput<F>,
    anchors: &[Anchor],
    tau: f64,
    valid: OrigSize,
) -> Result<Vec<PredPoint>> {
    let (gh, gw) = dense.grid();
    if anchors.len() != gh * gw {
        return Err(Error::shape(format!(
            "anchor count {} does not match {}x{} grid",
            anchors.len(),
            gh,
            gw
        )));
    }
    let mut out = Vec::new();
    for i in 0..gh {
        for j in 0..gw {
            let idx = i * gw + j;
            let score = sigmoid_scalar(dense.logits[[0, i, j]]).to_f64();
            if score < tau {
                continue;
            }
            let x = anchors[idx].x + dense.offsets[[0, i, j]].to_f64();
            let y = anchors[idx].y + dense.offsets[[1, i, j]].to_f64();
            if x >= 0.0 && x < valid.w as f64 && y >= 0.0 && y < valid.h as f64 {
                out.push(PredPoint { x, y, score });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, Variant};
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn build_and_run(
        use_spam: bool,
        use_afam: bool,
        hw: usize,
        seed: u64,
    ) -> (Vec<String>, Vec<usize>, ArrayD<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, &mut rng, Variant::Tiny);
        let mut dcfg = DecoderConfig::new(16);
        dcfg.use_spam = use_spam;
        dcfg.use_afam = use_afam;
        let msad = Msad::new(
            &mut store,
            &mut rng,
            dcfg,
            SpamConfig::new(16),
            AfamConfig::new(16),
            Variant::Tiny.tap_widths(),
            false,
        )
        .unwrap();
        let mut sess = Session::new(&mut store, false);
        let img = sess.input(ArrayD::from_shape_fn(IxDyn(&[3, hw, hw]), |ix| {
            ((ix[0] + ix[1] * 3 + ix[2] * 7) % 13) as f32 / 13.0
        }));
        let pyr = bb.encode(&mut sess, img).unwrap();
        let out = msad.forward(&mut sess, &pyr, None).unwrap();
        let shape = sess.tape.value(out).shape().to_vec();
        let value = sess.tape.value(out).clone();
        (store.names(), shape, value)
    }

    #[test]
    fn msad_outputs_stride2_map() {
        let (_, shape, _) = build_and_run(true, true, 64, 3);
        assert_eq!(shape, vec![16, 32, 32]);
    }

    #[test]
    fn head_shapes_and_zero_input_bias_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut store = ParamStore::<f32>::new();
        let head = Head::new(&mut store, &mut rng, 16);
        let mut sess = Session::new(&mut store, false);
        let decoded = sess.input(ArrayD::from_shape_fn(IxDyn(&[16, 32, 32]), |ix| {
            ((ix[0] + ix[1] + ix[2]) % 5) as f32 / 5.0
        }));
        let dense = head.forward(&mut sess, decoded);
        assert_eq!(sess.tape.value(dense.offsets).shape(), &[2, 32, 32]);
        assert_eq!(sess.tape.value(dense.logits).shape(), &[1, 32, 32]);
        // Confidences land strictly inside (0,1).
        let out = DenseOutput::from_nodes(&sess, &dense);
        let anchors = make_anchors(64, 64, 2).unwrap();
        for p in decode_points(&out, &anchors, 0.0, OrigSize { h: 64, w: 64 }).unwrap() {
            assert!(p.score > 0.0 && p.score < 1.0);
        }

        // Zero decoded input: outputs are spatially constant bias maps.
        let zeros = sess.input(ArrayD::zeros(IxDyn(&[16, 8, 8])));
        let dense0 = head.forward(&mut sess, zeros);
        for node in [dense0.offsets, dense0.logits] {
            let v = sess.tape.value(node);
            for lane in v.axis_iter(ndarray::Axis(0)) {
                let first = lane[[0, 0]];
                assert!(
                    lane.iter().all(|&x| x == first),
                    "bias map must be constant"
                );
            }
        }
    }

    #[test]
    fn msad_baseline_has_no_attention_params() {
        let (names, shape, _) = build_and_run(false, false, 64, 3);
        assert_eq!(shape, vec![16, 32, 32]);
        for name in &names {
            assert!(
                !name.contains("spam") && !name.contains("afam"),
                "baseline configuration leaked block parameter {name}"
            );
            assert!(
                !name.contains("transformer") && !name.contains("codebook"),
                "baseline configuration leaked attention parameter {name}"
            );
        }
        assert!(names.iter().any(|n| n == "decoder.stage16.conv.weight"));
        assert!(names.iter().any(|n| n == "decoder.stage8.conv.weight"));
    }

    #[test]
    fn msad_deterministic_for_seed() {
        let (_, _, a) = build_and_run(true, true, 32, 11);
        let (_, _, b) = build_and_run(true, true, 32, 11);
        assert_eq!(a, b);
    }

    #[test]
    fn anchors_match_center_formula() {
        let anchors = make_anchors(4, 4, 2).unwrap();
        let want = [(1.0, 1.0), (3.0, 1.0), (1.0, 3.0), (3.0, 3.0)];
        assert_eq!(anchors.len(), 4);
        for (a, (x, y)) in anchors.iter().zip(want) {
            assert_eq!((a.x, a.y), (x, y));
        }
        assert_eq!(
            make_anchors(2, 2, 2).unwrap(),
            vec![Anchor { x: 1.0, y: 1.0 }]
        );
        assert_eq!(make_anchors(64, 64, 2).unwrap().len(), 1024);
        assert!(make_anchors(5, 4, 2).is_err());
    }

    fn logit(p: f64) -> f32 {
        (p / (1.0 - p)).ln() as f32
    }

    #[test]
    fn decode_points_thresholds_scores() {
        let mut dense = DenseOutput {
            offsets: Array3::<f32>::zeros((2, 1, 3)),
            logits: Array3::<f32>::zeros((1, 1, 3)),
        };
        dense.logits[[0, 0, 0]] = logit(0.9);
        dense.logits[[0, 0, 1]] = logit(0.3);
        dense.logits[[0, 0, 2]] = logit(0.8);
        let anchors = make_anchors(2, 6, 2).unwrap();
        let pts = decode_points(&dense, &anchors, 0.5, OrigSize { h: 2, w: 6 }).unwrap();
        assert_eq!(pts.len(), 2);
    }

    #[test]
    fn decode_points_zero_offsets_hit_anchor_centers() {
        let dense = DenseOutput {
            offsets: Array3::<f32>::zeros((2, 2, 2)),
            logits: Array3::<f32>::from_elem((1, 2, 2), 40.0),
        };
        let anchors = make_anchors(4, 4, 2).unwrap();
        let pts = decode_points(&dense, &anchors, 0.5, OrigSize { h: 4, w: 4 }).unwrap();
        assert_eq!(pts.len(), 4);
        for (p, a) in pts.iter().zip(&anchors) {
            assert_eq!((p.x, p.y), (a.x, a.y));
        }
    }

    #[test]
    fn decode_points_tau_one_keeps_nothing() {
        let dense = DenseOutput {
            offsets: Array3::<f32>::zeros((2, 2, 2)),
            logits: Array3::<f32>::from_elem((1, 2, 2), 12.0),
        };
        let anchors = make_anchors(4, 4, 2).unwrap();
        let pts = decode_points(&dense, &anchors, 1.0, OrigSize { h: 4, w: 4 }).unwrap();
        assert!(pts.is_empty(), "sigmoid stays below 1");
    }

    #[test]
    fn decode_points_discards_padding_margin() {
        // Grid covers a padded 4x4 image, but the original extent was 3x4:
        // anchors in the padded row decode outside and are dropped.
        let dense = DenseOutput {
            offsets: Array3::<f32>::zeros((2, 2, 2)),
            logits: Array3::<f32>::from_elem((1, 2, 2), 40.0),
        };
        let anchors = make_anchors(4, 4, 2).unwrap();
        let pts = decode_points(&dense, &anchors, 0.5, OrigSize { h: 3, w: 4 }).unwrap();
        assert_eq!(pts.len(), 2);
        for p in &pts {
            assert!(p.y < 3.0);
        }
    }

    #[test]
    fn decode_count_matches_direct_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        use rand::Rng;
        let dense = DenseOutput {
            offsets: Array3::<f32>::from_shape_fn((2, 8, 8), |_| rng.random_range(-3.0..3.0)),
            logits: Array3::<f32>::from_shape_fn((1, 8, 8), |_| rng.random_range(-4.0..4.0)),
        };
        let anchors = make_anchors(16, 16, 2).unwrap();
        let valid = OrigSize { h: 13, w: 16 };
        let tau = 0.5;
        let pts = decode_points(&dense, &anchors, tau, valid).unwrap();
        let mut recount = 0usize;
        for i in 0..8 {
            for j in 0..8 {
                let score = 1.0 / (1.0 + (-dense.logits[[0, i, j]] as f64).exp());
                let x = anchors[i * 8 + j].x + dense.offsets[[0, i, j]] as f64;
                let y = anchors[i * 8 + j].y + dense.offsets[[1, i, j]] as f64;
                if score >= tau && (0.0..16.0).contains(&x) && (0.0..13.0).contains(&y) {
                    recount += 1;
                }
            }
        }
        assert_eq!(pts.len(), recount);
    }
}
