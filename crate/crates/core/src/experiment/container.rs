//! Versioned little-endian binary containers for checkpoints and datasets.
//!
//! Layout: 8 magic bytes, a `u32` format version, then the payload. Floats
//! are stored as raw IEEE-754 bits, so a save/load/save cycle reproduces the
//! file byte for byte.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::constellation::ConstellationParams;
use crate::error::{Error, Result};
use crate::neural::{Activation, Adam, AdamConfig, GaussianEncoder, LayerSpec, Mlp, NetworkSpec};
use crate::rng::RngState;
use crate::task_env::{Dataset, DatasetSpec, FrozenAgent, Split};

use super::config::Seeds;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"JSCCCKPT";
pub const DATASET_MAGIC: [u8; 8] = *b"JSCCDATA";
pub const FORMAT_VERSION: u32 = 1;

/// How far through the training pipeline a checkpoint is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Init = 0,
    Pretrained = 1,
    Fitted = 2,
    Finetuned = 3,
}

impl Phase {
    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Phase::Init,
            1 => Phase::Pretrained,
            2 => Phase::Fitted,
            3 => Phase::Finetuned,
            _ => return Err(Error::Format(format!("unknown phase code {c}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Pretrained => "pretrained",
            Phase::Fitted => "fitted",
            Phase::Finetuned => "finetuned",
        }
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    /// Optimizer steps taken in the phase that produced the checkpoint.
    pub step: u64,
    pub seeds: Seeds,
    pub encoder: GaussianEncoder,
    pub encoder_opt: Adam,
    pub reshaper: Mlp,
    pub reshaper_opt: Adam,
    pub agent: FrozenAgent,
    pub constellation: Option<ConstellationParams>,
    /// Positions of the random streams of the phase, in a fixed order.
    pub rng: Vec<RngState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: [u8; 8]) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u32(FORMAT_VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.write_u32::<LE>(v).expect("vec write");
    }

    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LE>(v).expect("vec write");
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.0.write_f64::<LE>(v).expect("vec write");
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }

    fn array(&mut self, a: &Array2<f64>) {
        self.usize(a.nrows());
        self.usize(a.ncols());
        for &x in a.iter() {
            self.f64(x);
        }
    }

    fn net(&mut self, net: &Mlp) {
        let spec = net.spec();
        self.usize(spec.input_dim);
        self.usize(spec.layers.len());
        for l in &spec.layers {
            self.usize(l.out_dim);
            self.u8(l.activation.code());
        }
        self.u64(spec.seed);
        self.f64s(&net.params());
    }

    fn adam(&mut self, a: &Adam) {
        let c = &a.config;
        for v in [c.lr, c.beta1, c.beta2, c.eps] {
            self.f64(v);
        }
        self.u64(a.t);
        self.f64s(&a.m);
        self.f64s(&a.v);
    }

    fn rng(&mut self, s: &RngState) {
        self.0.extend_from_slice(&s.seed);
        self.u64(s.stream);
        self.0.write_u128::<LE>(s.word_pos).expect("vec write");
    }
}

struct Reader<'a>(Cursor<&'a [u8]>);

fn truncated(_: std::io::Error) -> Error {
    Error::Format("unexpected end of data".into())
}

/// Upper bound on any stored length, guarding allocations against corrupt
/// headers.
const MAX_LEN: u64 = 1 << 32;

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: [u8; 8]) -> Result<Self> {
        let mut r = Reader(Cursor::new(bytes));
        let mut m = [0u8; 8];
        r.0.read_exact(&mut m).map_err(truncated)?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(&magic)
            )));
        }
        let v = r.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {v}")));
        }
        Ok(r)
    }

    fn finish(self) -> Result<()> {
        let pos = self.0.position() as usize;
        let len = self.0.get_ref().len();
        if pos != len {
            return Err(Error::Format(format!("{} trailing bytes", len - pos)));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().map_err(truncated)
    }

    fn u32(&mut self) -> Result<u32> {
        self.0.read_u32::<LE>().map_err(truncated)
    }

    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LE>().map_err(truncated)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(Error::Format(format!("length {v} out of range")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        self.0.read_f64::<LE>().map_err(truncated)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn array(&mut self) -> Result<Array2<f64>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n as u64 <= MAX_LEN)
            .ok_or_else(|| Error::Format("array too large".into()))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }

    fn net(&mut self) -> Result<Mlp> {
        let input_dim = self.usize()?;
        let n_layers = self.usize()?;
        let mut layers = Vec::with_capacity(n_layers.min(64));
        for _ in 0..n_layers {
            let out_dim = self.usize()?;
            let code = self.u8()?;
            let activation = Activation::from_code(code)
                .ok_or_else(|| Error::Format(format!("unknown activation code {code}")))?;
            layers.push(LayerSpec { out_dim, activation });
        }
        let seed = self.u64()?;
        let spec = NetworkSpec {
            input_dim,
            layers,
            seed,
        };
        spec.validate().map_err(|e| Error::Format(format!("network spec: {e}")))?;
        let params = self.f64s()?;
        let mut net = Mlp::zeros(spec)?;
        net.set_params(&params)
            .map_err(|e| Error::Format(format!("network parameters: {e}")))?;
        Ok(net)
    }

    fn adam(&mut self, n_params: usize) -> Result<Adam> {
        let config = AdamConfig {
            lr: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
        };
        let t = self.u64()?;
        let m = self.f64s()?;
        let v = self.f64s()?;
        if m.len() != n_params || v.len() != n_params {
            return Err(Error::Format("optimizer state does not match the network".into()));
        }
        Ok(Adam { config, t, m, v })
    }

    fn rng(&mut self) -> Result<RngState> {
        let mut seed = [0u8; 32];
        self.0.read_exact(&mut seed).map_err(truncated)?;
        let stream = self.u64()?;
        let word_pos = self.0.read_u128::<LE>().map_err(truncated)?;
        Ok(RngState {
            seed,
            stream,
            word_pos,
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.u8(self.phase as u8);
        w.u64(self.step);
        for s in [self.seeds.dataset, self.seeds.init, self.seeds.channel] {
            w.u64(s);
        }
        w.net(&self.encoder.net);
        w.adam(&self.encoder_opt);
        w.net(&self.reshaper);
        w.adam(&self.reshaper_opt);
        w.net(self.agent.net());
        match self.constellation {
            Some(c) => {
                w.u8(1);
                w.usize(c.order);
                w.f64(c.r);
            }
            None => w.u8(0),
        }
        w.usize(self.rng.len());
        for s in &self.rng {
            w.rng(s);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
        let phase = Phase::from_code(r.u8()?)?;
        let step = r.u64()?;
        let seeds = Seeds {
            dataset: r.u64()?,
            init: r.u64()?,
            channel: r.u64()?,
        };
        let enc_net = r.net()?;
        let encoder_opt = r.adam(enc_net.param_count())?;
        let encoder = GaussianEncoder::from_net(enc_net).map_err(|e| Error::Format(e.to_string()))?;
        let reshaper = r.net()?;
        let reshaper_opt = r.adam(reshaper.param_count())?;
        let agent = FrozenAgent::freeze(r.net()?);
        let constellation = match r.u8()? {
            0 => None,
            1 => {
                let order = r.usize()?;
                let r_val = r.f64()?;
                Some(ConstellationParams { order, r: r_val })
            }
            f => return Err(Error::Format(format!("bad constellation flag {f}"))),
        };
        let n = r.usize()?;
        let rng = (0..n).map(|_| r.rng()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            phase,
            step,
            seeds,
            encoder,
            encoder_opt,
            reshaper,
            reshaper_opt,
            agent,
            constellation,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(DATASET_MAGIC);
    let s = &ds.spec;
    w.u64(s.seed);
    for v in [s.n_train, s.n_test, s.l, s.d, s.latent_dim] {
        w.usize(v);
    }
    w.f64(s.clutter_ratio);
    w.f64(s.noise_std);
    for a in [&ds.train.x, &ds.train.a, &ds.test.x, &ds.test.a] {
        w.array(a);
    }
    w.0
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, DATASET_MAGIC)?;
    let spec = DatasetSpec {
        seed: r.u64()?,
        n_train: r.usize()?,
        n_test: r.usize()?,
        l: r.usize()?,
        d: r.usize()?,
        latent_dim: r.usize()?,
        clutter_ratio: r.f64()?,
        noise_std: r.f64()?,
    };
    let train = Split {
        x: r.array()?,
        a: r.array()?,
    };
    let test = Split {
        x: r.array()?,
        a: r.array()?,
    };
    r.finish()?;
    let shapes_ok = train.x.dim() == (spec.n_train, spec.l)
        && train.a.dim() == (spec.n_train, spec.d)
        && test.x.dim() == (spec.n_test, spec.l)
        && test.a.dim() == (spec.n_test, spec.d);
    if !shapes_ok {
        return Err(Error::Format("dataset arrays do not match the stored spec".into()));
    }
    Ok(Dataset { spec, train, test })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &dataset_to_bytes(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
