//! Checkpoint persistence: model parameters keyed by hierarchical names, a
//! config snapshot, the epoch counter, and optimizer state, in a
//! deterministic little-endian binary layout. Serialization iterates sorted
//! names, so save -> load -> save round-trips byte-identically.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::backbone::{BackboneConfig, Variant};
use crate::blocks::{AfamConfig, FuseMode, SpamConfig};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::model::NetConfig;
use crate::nn::{Adam, ParamStore};
use crate::tensor::Elem;

const MAGIC: &[u8; 4] = b"CPTK";
const VERSION: u8 = 1;

/// Serializable optimizer state, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamState<F: Elem> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub m: BTreeMap<String, ArrayD<F>>,
    pub v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Elem> AdamState<F> {
    pub fn from_optimizer(opt: &Adam<F>) -> Self {
        AdamState {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            step_count: opt.step_count,
            m: opt.m.clone(),
            v: opt.v.clone(),
        }
    }

    pub fn into_optimizer(self) -> Adam<F> {
        let mut opt = Adam::new(self.lr);
        opt.beta1 = self.beta1;
        opt.beta2 = self.beta2;
        opt.eps = self.eps;
        opt.weight_decay = self.weight_decay;
        opt.step_count = self.step_count;
        opt.m = self.m;
        opt.v = self.v;
        opt
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<F: Elem> {
    pub net: NetConfig,
    pub epoch: u32,
    /// Run configuration echo (flat `key = value` text).
    pub config_text: String,
    /// Parameter name -> (value, trainable).
    pub values: BTreeMap<String, (ArrayD<F>, bool)>,
    pub optimizer: Option<AdamState<F>>,
}

impl<F: Elem> Checkpoint<F> {
    pub fn from_store(
        net: &NetConfig,
        store: &ParamStore<F>,
        epoch: u32,
        config_text: &str,
        optimizer: Option<&Adam<F>>,
    ) -> Self {
        let values = store
            .iter_sorted()
            .map(|(name, value, trainable)| (name.to_string(), (value.clone(), trainable)))
            .collect();
        Checkpoint {
            net: net.clone(),
            epoch,
            config_text: config_text.to_string(),
            values,
            optimizer: optimizer.map(AdamState::from_optimizer),
        }
    }

    pub fn is_fused(&self) -> bool {
        self.net.fused
    }
}

// ---------------------------------------------------------------------------
// Encoding

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor<F: Elem>(&mut self, a: &ArrayD<F>) {
        self.u8(a.ndim() as u8);
        for &d in a.shape() {
            self.u32(d as u32);
        }
        let slice = a.as_slice().expect("store tensors are standard layout");
        F::write_le(slice, &mut self.buf);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }

    fn tensor<F: Elem>(&mut self) -> Result<ArrayD<F>> {
        let ndim = self.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let bytes = self.take(len * F::BYTES)?;
        let data = F::read_le(bytes);
        ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
    }
}

fn encode_net(w: &mut Writer, net: &NetConfig) {
    w.u8(match net.backbone.variant {
        Variant::Full => 0,
        Variant::Tiny => 1,
    });
    w.u8(net.backbone.pretrained as u8);
    w.u32(net.decoder.width as u32);
    w.u8(net.decoder.use_spam as u8);
    w.u8(net.decoder.use_afam as u8);
    w.u32(net.spam.heads as u32);
    w.u32(net.spam.codebook_size as u32);
    w.u8(match net.spam.fuse {
        FuseMode::Sum => 0,
        FuseMode::ConcatProject => 1,
    });
    w.u32(net.afam.reduction as u32);
    w.u32(net.afam.kernel_a as u32);
    w.u32(net.afam.kernel_b as u32);
    w.u8(net.afam.split_paths as u8);
    w.u8(net.fused as u8);
}

fn decode_net(r: &mut Reader) -> Result<NetConfig> {
    let variant = match r.u8()? {
        0 => Variant::Full,
        1 => Variant::Tiny,
        v => {
            return Err(Error::Checkpoint(format!(
                "unknown backbone variant tag {v}"
            )))
        }
    };
    let pretrained = r.u8()? != 0;
    let width = r.u32()? as usize;
    let use_spam = r.u8()? != 0;
    let use_afam = r.u8()? != 0;
    let heads = r.u32()? as usize;
    let codebook_size = r.u32()? as usize;
    let fuse = match r.u8()? {
        0 => FuseMode::Sum,
        1 => FuseMode::ConcatProject,
        v => return Err(Error::Checkpoint(format!("unknown fuse mode tag {v}"))),
    };
    let reduction = r.u32()? as usize;
    let kernel_a = r.u32()? as usize;
    let kernel_b = r.u32()? as usize;
    let split_paths = r.u8()? != 0;
    let fused = r.u8()? != 0;
    let mut decoder = DecoderConfig::new(width);
    decoder.use_spam = use_spam;
    decoder.use_afam = use_afam;
    Ok(NetConfig {
        backbone: BackboneConfig {
            variant,
            pretrained,
            weights_path: None,
        },
        decoder,
        spam: SpamConfig {
            channels: width,
            heads,
            codebook_size,
            fuse,
        },
        afam: AfamConfig {
            channels: width,
            reduction,
            kernel_a,
            kernel_b,
            split_paths,
        },
        fused,
    })
}

pub fn to_bytes<F: Elem>(ckpt: &Checkpoint<F>) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u8(VERSION);
    w.u8(F::DTYPE_TAG);
    w.u32(ckpt.epoch);
    encode_net(&mut w, &ckpt.net);
    w.str(&ckpt.config_text);
    w.u32(ckpt.values.len() as u32);
    for (name, (value, trainable)) in &ckpt.values {
        w.str(name);
        w.u8(*trainable as u8);
        w.tensor(value);
    }
    match &ckpt.optimizer {
        None => w.u8(0),
        Some(opt) => {
            w.u8(1);
            w.f64(opt.lr);
            w.f64(opt.beta1);
            w.f64(opt.beta2);
            w.f64(opt.eps);
            w.f64(opt.weight_decay);
            w.u64(opt.step_count);
            w.u32(opt.m.len() as u32);
            for (name, m) in &opt.m {
                w.str(name);
                w.tensor(m);
                w.tensor(opt.v.get(name).expect("optimizer m/v keys match"));
            }
        }
    }
    w.buf
}

pub fn from_bytes<F: Elem>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dtype = r.u8()?;
    if dtype != F::DTYPE_TAG {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype tag {dtype} does not match requested element type"
        )));
    }
    let epoch = r.u32()?;
    let net = decode_net(&mut r)?;
    let config_text = r.str()?;
    let n = r.u32()? as usize;
    let mut values = BTreeMap::new();
    for _ in 0..n {
        let name = r.str()?;
        let trainable = r.u8()? != 0;
        let value = r.tensor::<F>()?;
        values.insert(name, (value, trainable));
    }
    let optimizer = if r.u8()? == 1 {
        let lr = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let weight_decay = r.f64()?;
        let step_count = r.u64()?;
        let count = r.u32()? as usize;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..count {
            let name = r.str()?;
            m.insert(name.clone(), r.tensor::<F>()?);
            v.insert(name, r.tensor::<F>()?);
        }
        Some(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count,
            m,
            v,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        net,
        epoch,
        config_text,
        values,
        optimizer,
    })
}

pub fn save<F: Elem>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
    }
    let bytes = to_bytes(ckpt);
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(&bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn load<F: Elem>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    from_bytes(&bytes)
}

/// Rebuild a model + store from a checkpoint.
pub fn restore_model<F: Elem>(
    ckpt: &Checkpoint<F>,
) -> Result<(crate::model::PointNet, ParamStore<F>)> {
    use rand::SeedableRng;
    let mut store = ParamStore::<F>::new();
    // Init values are irrelevant; every parameter is overwritten by name.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = crate::model::PointNet::new(&mut store, &mut rng, &ckpt.net)?;
    let values: BTreeMap<String, ArrayD<F>> = ckpt
        .values
        .iter()
        .map(|(k, (v, _))| (k.clone(), v.clone()))
        .collect();
    crate::nn::load_named(&mut store, &values)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PointNet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_ckpt() -> Checkpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let net = NetConfig::tiny();
        let model = PointNet::new(&mut store, &mut rng, &net).unwrap();
        let mut adam = Adam::new(1e-4);
        // Populate some optimizer state.
        let pid = store.lookup("head.offsets.weight").unwrap();
        let g = store.array(pid).clone();
        adam.step(&mut store, &[(pid, g)]);
        Checkpoint::from_store(model.config(), &store, 3, "seed = 7\n", Some(&adam))
    }

    #[test]
    fn roundtrip_byte_identical() {
        let ckpt = small_ckpt();
        let bytes = to_bytes(&ckpt);
        let loaded = from_bytes::<f32>(&bytes).unwrap();
        let bytes2 = to_bytes(&loaded);
        assert_eq!(bytes, bytes2, "save -> load -> save must be byte-identical");
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.config_text, "seed = 7\n");
        assert!(loaded.optimizer.is_some());
    }

    #[test]
    fn restore_rebuilds_identical_model() {
        let ckpt = small_ckpt();
        let (model, store) = restore_model(&ckpt).unwrap();
        assert!(!model.is_fused());
        for (name, (value, _)) in &ckpt.values {
            let id = store.lookup(name).expect("restored param");
            assert_eq!(store.array(id), value);
        }
    }

    #[test]
    fn dtype_and_magic_guards() {
        let ckpt = small_ckpt();
        let bytes = to_bytes(&ckpt);
        assert!(from_bytes::<f64>(&bytes).is_err(), "dtype tag must match");
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(from_bytes::<f32>(&corrupt).is_err());
    }

    #[test]
    fn restore_reports_mismatched_names() {
        let mut ckpt = small_ckpt();
        // Drop one tensor: restoration must name it.
        ckpt.values.remove("head.offsets.weight").unwrap();
        let err = match restore_model(&ckpt) {
            Ok(_) => panic!("restore should fail on a missing parameter"),
            Err(e) => e.to_string(),
        };
        assert!(
            err.contains("head.offsets.weight"),
            "error should list the missing parameter: {err}"
        );
    }

    #[test]
    fn fused_checkpoint_restores_fused_topology() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let net = NetConfig::tiny();
        let mut model = PointNet::new(&mut store, &mut rng, &net).unwrap();
        model.fuse(&mut store).unwrap();
        let ckpt = Checkpoint::from_store(model.config(), &store, 0, "", None);
        assert!(ckpt.is_fused());
        let (restored, rstore) = restore_model(&ckpt).unwrap();
        assert!(restored.is_fused());
        assert!(rstore
            .lookup("decoder.stage8.afam.repconv.fused.weight")
            .is_some());
        assert!(rstore
            .lookup("decoder.stage8.afam.repconv.conv3.weight")
            .is_none());
    }
}
