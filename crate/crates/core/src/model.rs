//! The assembled point-regression network: backbone -> decoder -> head,
//! plus whole-model fusion, inference, and analytic profiling.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{image_to_input, pad_to_multiple, Backbone, BackboneConfig, Variant};
use crate::blocks::{AfamConfig, SpamConfig};
use crate::decoder::{
    decode_points, make_anchors, Anchor, DecoderConfig, DenseNodes, DenseOutput, Head, Msad,
    MsadProbe, PredPoint,
};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::tensor::Elem;

/// Everything needed to rebuild the network topology.
#[derive(Clone, Debug)]
pub struct NetConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub spam: SpamConfig,
    pub afam: AfamConfig,
    /// RepConv branches folded into single kernels.
    pub fused: bool,
}

impl NetConfig {
    /// Desk-scale default: tiny backbone, width-32 decoder, both blocks on.
    pub fn tiny() -> Self {
        let decoder = DecoderConfig::new(32);
        NetConfig {
            backbone: BackboneConfig::tiny(),
            decoder,
            spam: SpamConfig::new(decoder.width),
            afam: AfamConfig::new(decoder.width),
            fused: false,
        }
    }

    pub fn full() -> Self {
        let decoder = DecoderConfig::new(64);
        NetConfig {
            backbone: BackboneConfig::full(),
            decoder,
            spam: SpamConfig::new(decoder.width),
            afam: AfamConfig::new(decoder.width),
            fused: false,
        }
    }

    /// Block channel counts follow the decoder width.
    pub fn normalized(mut self) -> Self {
        self.spam.channels = self.decoder.width;
        self.afam.channels = self.decoder.width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.decoder.use_spam {
            self.spam.validate()?;
        }
        if self.decoder.use_afam {
            self.afam.validate()?;
        }
        Ok(())
    }
}

/// Anchor stride of the prediction head.
pub const ANCHOR_STRIDE: usize = 2;

pub struct PointNet {
    pub backbone: Backbone,
    pub msad: Msad,
    pub head: Head,
    cfg: NetConfig,
}

impl PointNet {
    pub fn new<F: Elem>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: &NetConfig,
    ) -> Result<Self> {
        let cfg = cfg.clone().normalized();
        cfg.validate()?;
        let backbone = Backbone::new(store, rng, cfg.backbone.variant);
        let msad = Msad::new(
            store,
            rng,
            cfg.decoder,
            cfg.spam,
            cfg.afam,
            cfg.backbone.variant.tap_widths(),
            cfg.fused,
        )?;
        let head = Head::new(store, rng, cfg.decoder.width);
        Ok(PointNet {
            backbone,
            msad,
            head,
            cfg,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn is_fused(&self) -> bool {
        self.cfg.fused
    }

    /// Forward over a padded `(3,H,W)` input node already on the session.
    pub fn forward<F: Elem>(
        &self,
        sess: &mut Session<F>,
        image: crate::tensor::TensorRef,
        probes: Option<&mut MsadProbe>,
    ) -> Result<DenseNodes> {
        let pyramid = self.backbone.encode(sess, image)?;
        let decoded = self.msad.forward(sess, &pyramid, probes)?;
        Ok(self.head.forward(sess, decoded))
    }

    /// Fold every RepConv in the network; errors when already fused or when
    /// the configuration contains no RepConv parameters.
    pub fn fuse<F: Elem>(&mut self, store: &mut ParamStore<F>) -> Result<usize> {
        if self.cfg.fused {
            return Err(Error::invalid("model is already fused"));
        }
        let reps = self.msad.repconvs_mut();
        if reps.is_empty() {
            return Err(Error::invalid(
                "configuration has no RepConv parameters to fuse (afam disabled)",
            ));
        }
        let mut n = 0usize;
        for rep in reps {
            rep.fuse(store)?;
            n += 1;
        }
        self.cfg.fused = true;
        Ok(n)
    }

    /// Analytic profile: separate encoder/decoder parameter counts and the
    /// convolution/linear/attention multiply-add count for an `h x w` input
    /// (padded internally to 32).
    pub fn profile(&self, h: usize, w: usize) -> ProfileReport {
        let ph = h.div_ceil(32) * 32;
        let pw = w.div_ceil(32) * 32;
        let encoder_params = self.backbone.n_params();
        let decoder_params = self.msad.n_params();
        let head_params = self.head.n_params();
        ProfileReport {
            encoder_params,
            decoder_params,
            head_params,
            total_params: encoder_params + decoder_params + head_params,
            madds: self.backbone.madds(ph, pw) + self.msad.madds(ph, pw) + self.head.madds(ph, pw),
            input: (h, w),
            padded: (ph, pw),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProfileReport {
    pub encoder_params: usize,
    pub decoder_params: usize,
    pub head_params: usize,
    pub total_params: usize,
    /// Multiply-accumulate count of convolutions, linears, and attention
    /// products for one forward pass.
    pub madds: u128,
    pub input: (usize, usize),
    pub padded: (usize, usize),
}

/// Run one image through an eval-mode model: pad, forward, decode at `tau`.
pub fn infer_image<F: Elem>(
    model: &PointNet,
    store: &mut ParamStore<F>,
    image: &Array3<f32>,
    tau: f64,
) -> Result<Vec<PredPoint>> {
    let (dense, anchors, orig) = dense_forward(model, store, image)?;
    decode_points(&dense, &anchors, tau, orig)
}

/// Pad + forward an image in eval mode, returning the dense head output,
/// the matching anchor grid, and the original extent.
pub fn dense_forward<F: Elem>(
    model: &PointNet,
    store: &mut ParamStore<F>,
    image: &Array3<f32>,
) -> Result<(DenseOutput<F>, Vec<Anchor>, crate::backbone::OrigSize)> {
    let input = image_to_input::<F>(image);
    let input3 = input
        .into_dimensionality::<ndarray::Ix3>()
        .expect("image rank");
    let (padded, orig) = pad_to_multiple(&input3, 32)?;
    let (_, ph, pw) = padded.dim();
    let mut sess = Session::new(store, false);
    let node = sess.input(padded.into_dyn());
    let dense = model.forward(&mut sess, node, None)?;
    let output = DenseOutput::from_nodes(&sess, &dense);
    let anchors = make_anchors(ph, pw, ANCHOR_STRIDE)?;
    Ok((output, anchors, orig))
}

/// Load pretrained backbone weights when requested. Returns a warning
/// string (to log) when the file is absent and initialization stays random.
pub fn maybe_load_pretrained<F: Elem>(
    store: &mut ParamStore<F>,
    cfg: &BackboneConfig,
) -> Result<Option<String>> {
    if !cfg.pretrained {
        return Ok(None);
    }
    let path = cfg
        .weights_path
        .clone()
        .unwrap_or_else(|| format!("backbone_{}.ckpt", cfg.variant.as_str()).into());
    if !path.exists() {
        return Ok(Some(format!(
            "pretrained weights not found at {}; using random initialization",
            path.display()
        )));
    }
    let ckpt = crate::checkpoint::load::<F>(&path)?;
    let backbone_values: std::collections::BTreeMap<String, ndarray::ArrayD<F>> = ckpt
        .values
        .iter()
        .filter(|(name, _)| name.starts_with("backbone."))
        .map(|(name, (value, _))| (name.clone(), value.clone()))
        .collect();
    let expected: Vec<String> = store
        .names()
        .into_iter()
        .filter(|n| n.starts_with("backbone."))
        .collect();
    let mut missing = Vec::new();
    for name in &expected {
        match backbone_values.get(name) {
            Some(v) => {
                let id = store.lookup(name).expect("listed");
                if store.array(id).shape() != v.shape() {
                    return Err(Error::Checkpoint(format!(
                        "pretrained weight {name} has shape {:?}, expected {:?}",
                        v.shape(),
                        store.array(id).shape()
                    )));
                }
                store.set(id, v.clone());
            }
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "pretrained file {} lacks parameters: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(None)
}

/// Parse helpers shared by config handling.
impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::parse(s)
    }
}
