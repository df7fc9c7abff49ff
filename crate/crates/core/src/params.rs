//! Named parameter storage, deterministic initialisation and checkpoints.
//!
//! A checkpoint is a directory holding one `DDMPT1` file per parameter and
//! a `manifest.txt` of flat `key=value` lines:
//!
//! ```text
//! config.channels=8
//! param.ddmp1.alpha=tensors/ddmp1.alpha.ddmpt
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvOptions, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, DType, Tensor};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    /// Marks a parameter as fixed: it is bound as a constant and never
    /// updated by the optimiser.
    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Binds a parameter on `tape`; frozen parameters become constants.
    pub fn bind(&self, tape: &Tape, name: &str) -> Result<Var> {
        let t = self.get(name)?;
        if self.is_frozen(name) {
            Ok(tape.constant(t.clone()))
        } else {
            Ok(tape.param(name, t))
        }
    }

    pub fn save(&self, dir: &Path, config: &BTreeMap<String, String>) -> Result<()> {
        let tdir = dir.join("tensors");
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        let mut manifest = String::new();
        for (k, v) in config {
            manifest.push_str(&format!("config.{k}={v}\n"));
        }
        for name in &self.frozen {
            manifest.push_str(&format!("frozen.{name}=1\n"));
        }
        for (name, t) in &self.tensors {
            let rel = format!("tensors/{name}.ddmpt");
            write_tensor(&dir.join(&rel), t, DType::F64)?;
            manifest.push_str(&format!("param.{name}={rel}\n"));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint, returning the parameters and the recorded config.
    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut store = ParamStore::new();
        let mut config = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            if let Some(k) = key.strip_prefix("config.") {
                config.insert(k.to_string(), value.to_string());
            } else if let Some(name) = key.strip_prefix("param.") {
                store.insert(name, read_tensor(&dir.join(value))?);
            } else if let Some(name) = key.strip_prefix("frozen.") {
                store.freeze(name);
            } else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("unknown manifest key `{key}`"),
                });
            }
        }
        Ok((store, config))
    }
}

/// Per-parameter RNG: the stream depends only on `(seed, name)`, so adding
/// or removing other parameters never shifts an initialisation.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// He-normal with fan-in `cin/groups · k · k`.
    He,
    /// Normal with a fixed standard deviation.
    Normal(f64),
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// Identity map for square 1×1 (or per-group) kernels.
    Identity,
}

/// Shape of a convolution layer stored under `prefix.weight` / `prefix.bias`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            groups: 1,
            bias: true,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin / self.groups, self.kernel, self.kernel]
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, seed: u64, init: Init, bias: f64) {
        let name = format!("{prefix}.weight");
        let shape = self.weight_shape();
        let mut rng = param_rng(seed, &name);
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let w = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::He => Tensor::normal(&shape, (2.0 / fan_in).sqrt(), &mut rng),
            Init::Normal(std) => Tensor::normal(&shape, std, &mut rng),
            Init::Uniform(a) => Tensor::uniform(&shape, -a, a, &mut rng),
            Init::Identity => {
                let per = shape[1] * shape[2] * shape[3];
                let centre = (shape[2] / 2) * shape[3] + shape[3] / 2;
                Tensor::from_fn(&shape, |i| {
                    let (oc, rest) = (i / per, i % per);
                    let ic = rest / (shape[2] * shape[3]);
                    let pos = rest % (shape[2] * shape[3]);
                    let local = oc % shape[1];
                    if ic == local && pos == centre {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
        };
        store.insert(name, w);
        if self.bias {
            store.insert(format!("{prefix}.bias"), Tensor::full(&[self.cout], bias));
        }
    }
}

/// Bound weights of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl ConvVars {
    pub fn bind(tape: &Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let weight = store.bind(tape, &format!("{prefix}.weight"))?;
        let bname = format!("{prefix}.bias");
        let bias = if store.contains(&bname) {
            Some(store.bind(tape, &bname)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &Tape, x: Var, opts: ConvOptions) -> Result<Var> {
        tape.conv2d(x, self.weight, self.bias, opts)
    }

    /// Kernel size read from the bound weight.
    pub fn kernel(&self, tape: &Tape) -> usize {
        tape.shape(self.weight)[2]
    }

    /// "Same"-padded stride-1 application.
    pub fn same(&self, tape: &Tape, x: Var) -> Result<Var> {
        let k = self.kernel(tape);
        self.forward(tape, x, ConvOptions::same(k, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_other_params() {
        let spec = ConvSpec::new(3, 4, 3);
        let mut a = ParamStore::new();
        spec.init(&mut a, "x", 7, Init::He, 0.0);
        let mut b = ParamStore::new();
        ConvSpec::new(5, 5, 1).init(&mut b, "other", 7, Init::He, 0.0);
        spec.init(&mut b, "x", 7, Init::He, 0.0);
        assert_eq!(a.get("x.weight").unwrap(), b.get("x.weight").unwrap());
    }

    #[test]
    fn identity_init_is_identity() {
        let mut s = ParamStore::new();
        ConvSpec::new(3, 3, 1).no_bias().init(&mut s, "p", 0, Init::Identity, 0.0);
        assert_eq!(
            s.get("p.weight").unwrap().data(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        ConvSpec::new(2, 3, 3).init(&mut s, "conv", 1, Init::He, 0.25);
        s.insert("beta", Tensor::ones(&[3]));
        s.freeze("beta");
        let mut cfg = BTreeMap::new();
        cfg.insert("k".to_string(), "9".to_string());
        s.save(dir.path(), &cfg).unwrap();
        let (loaded, lcfg) = ParamStore::load(dir.path()).unwrap();
        assert_eq!(loaded, s);
        assert_eq!(lcfg, cfg);
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::ones(&[2]));
        s.freeze("b");
        let tape = Tape::new();
        let v = s.bind(&tape, "b").unwrap();
        assert!(!tape.requires_grad(v));
    }
}
