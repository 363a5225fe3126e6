//! Feature extractor, age regressor and site discriminator as small MLPs.
//!
//! Parameters live in a [`ParamSet`], an ordered list of named tensors tagged
//! with the [`Group`] they belong to. Weights are stored `[fan_in × fan_out]`
//! so a layer is `x · W + b`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    FeatureExtractor,
    Regressor,
    Discriminator,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::FeatureExtractor, Group::Regressor, Group::Discriminator];

    fn prefix(self) -> &'static str {
        match self {
            Group::FeatureExtractor => "fe",
            Group::Regressor => "reg",
            Group::Discriminator => "disc",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Group::FeatureExtractor => 0,
            Group::Regressor => 1,
            Group::Discriminator => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Group::FeatureExtractor),
            1 => Ok(Group::Regressor),
            2 => Ok(Group::Discriminator),
            other => Err(Error::data(format!("unknown parameter group tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor,
}

/// Named parameter tensors partitioned into feature extractor, regressor and
/// discriminator groups. Entry order is significant and fixed by
/// [`init_params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

const CONTAINER_MAGIC: &[u8; 4] = b"FDPS";
const CONTAINER_VERSION: u32 = 1;

impl ParamSet {
    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::config(format!("duplicate parameter name {}", e.name)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|e| e.name == name).map(|e| &mut e.tensor)
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.entries.iter().any(|e| e.group == group)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Copy with every entry of `group` removed.
    pub fn without_group(&self, group: Group) -> Self {
        Self { entries: self.entries.iter().filter(|e| e.group != group).cloned().collect() }
    }

    /// Same names, groups and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    tensor: Tensor::zeros(e.tensor.shape().to_vec()),
                })
                .collect(),
        }
    }

    /// True when names, groups and shapes agree entry by entry.
    pub fn same_architecture(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.tensor.shape() == b.tensor.shape())
    }

    pub fn check_same_architecture(&self, other: &ParamSet) -> Result<()> {
        if self.same_architecture(other) {
            Ok(())
        } else {
            Err(Error::config("parameter sets have different architectures"))
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.tensor.data().iter().copied()).collect()
    }

    /// Rebuilds a set shaped like `self` from a flat buffer produced by
    /// [`ParamSet::flatten`].
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_values() {
            return Err(Error::dim(format!(
                "flat buffer has {} values, architecture needs {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let n = e.tensor.numel();
            entries.push(ParamEntry {
                name: e.name.clone(),
                group: e.group,
                tensor: Tensor::new(e.tensor.shape().to_vec(), flat[offset..offset + n].to_vec())?,
            });
            offset += n;
        }
        Ok(ParamSet { entries })
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.data().iter().all(|v| v.is_finite()))
    }

    /// Writes the binary container: magic, version, entry count, then per
    /// entry the name, group tag, shape and little-endian `f64` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.group.tag()])?;
            w.write_all(&(e.tensor.shape().len() as u32).to_le_bytes())?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::data("not a parameter container"));
        }
        let version = read_u32(&mut r)?;
        if version != CONTAINER_VERSION {
            return Err(Error::data(format!("unsupported container version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::data("parameter name is not utf-8"))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let group = Group::from_tag(tag[0])?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                shape.push(u64::from_le_bytes(buf) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            entries.push(ParamEntry { name, group, tensor: Tensor::new(shape, data)? });
        }
        ParamSet::from_entries(entries)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Architecture of the three-part model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub fe_hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Hidden widths of the age head; empty means a linear head.
    pub reg_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub n_sites: usize,
    /// Fixed output affine: `age = target_offset + target_scale · head(features)`.
    pub target_offset: f64,
    pub target_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            fe_hidden: vec![32],
            feature_dim: 16,
            reg_hidden: Vec::new(),
            disc_hidden: vec![1024],
            n_sites: 15,
            target_offset: 22.0,
            target_scale: 6.0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let widths = std::iter::once(self.input_dim)
            .chain(self.fe_hidden.iter().copied())
            .chain(std::iter::once(self.feature_dim))
            .chain(self.reg_hidden.iter().copied())
            .chain(self.disc_hidden.iter().copied());
        if widths.into_iter().any(|w| w == 0) {
            return Err(Error::config("all layer widths must be >= 1"));
        }
        if self.n_sites < 2 {
            return Err(Error::config("discriminator needs n_sites >= 2"));
        }
        if !self.target_scale.is_finite() || self.target_scale == 0.0 || !self.target_offset.is_finite() {
            return Err(Error::config("target_scale must be finite and nonzero"));
        }
        Ok(())
    }

    /// `(group, fan_in, fan_out)` for every layer, in parameter order.
    fn layers(&self) -> Vec<(Group, usize, usize)> {
        let mut out = Vec::new();
        let mut chain = |group, widths: Vec<usize>| {
            for w in widths.windows(2) {
                out.push((group, w[0], w[1]));
            }
        };
        let mut fe = vec![self.input_dim];
        fe.extend(&self.fe_hidden);
        fe.push(self.feature_dim);
        chain(Group::FeatureExtractor, fe);

        let mut reg = vec![self.feature_dim];
        reg.extend(&self.reg_hidden);
        reg.push(1);
        chain(Group::Regressor, reg);

        let mut disc = vec![self.feature_dim];
        disc.extend(&self.disc_hidden);
        disc.push(self.n_sites);
        chain(Group::Discriminator, disc);
        out
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut index = [0usize; 3];
    for (group, fan_in, fan_out) in spec.layers() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        let i = &mut index[group.tag() as usize];
        entries.push(ParamEntry {
            name: format!("{}.{}.weight", group.prefix(), i),
            group,
            tensor: Tensor::matrix(fan_in, fan_out, weights)?,
        });
        entries.push(ParamEntry {
            name: format!("{}.{}.bias", group.prefix(), i),
            group,
            tensor: Tensor::vector(vec![0.0; fan_out]),
        });
        *i += 1;
    }
    ParamSet::from_entries(entries)
}

/// A [`ParamSet`] recorded on a tape, ready for forward passes.
#[derive(Debug, Clone)]
pub struct Network<'a> {
    spec: &'a ModelSpec,
    vars: Vec<Var>,
    groups: Vec<Group>,
}

impl<'a> Network<'a> {
    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(tape: &mut Tape, spec: &'a ModelSpec, params: &ParamSet, trainable: bool) -> Self {
        let mut vars = Vec::with_capacity(params.len());
        let mut groups = Vec::with_capacity(params.len());
        for e in params.entries() {
            let v = if trainable { tape.param(e.tensor.clone()) } else { tape.constant(e.tensor.clone()) };
            vars.push(v);
            groups.push(e.group);
        }
        Self { spec, vars, groups }
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.groups.contains(&group)
    }

    /// `(weight, bias)` pairs of one group, in order.
    fn layers(&self, group: Group) -> Vec<(Var, Var)> {
        let vars: Vec<Var> =
            self.vars.iter().zip(&self.groups).filter(|(_, g)| **g == group).map(|(v, _)| *v).collect();
        vars.chunks(2).map(|c| (c[0], c[1])).collect()
    }

    fn dense(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }

    /// tanh MLP from raw inputs to the shared feature space.
    pub fn forward_features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (_, width) = tape.value(x).dims2()?;
        if width != self.spec.input_dim {
            return Err(Error::dim(format!("input width {width} does not match input_dim {}", self.spec.input_dim)));
        }
        let mut h = x;
        for layer in self.layers(Group::FeatureExtractor) {
            let z = Self::dense(tape, h, layer)?;
            h = tape.tanh(z);
        }
        Ok(h)
    }

    /// Age prediction `[batch × 1]` in years.
    pub fn forward_age(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let layers = self.layers(Group::Regressor);
        let Some((last, hidden)) = layers.split_last() else {
            return Err(Error::config("parameter set has no regressor"));
        };
        let mut h = features;
        for &layer in hidden {
            let z = Self::dense(tape, h, layer)?;
            h = tape.tanh(z);
        }
        let out = Self::dense(tape, h, *last)?;
        let scaled = tape.scale(out, self.spec.target_scale);
        let (rows, _) = tape.value(scaled).dims2()?;
        let offset = tape.constant(Tensor::vector(vec![self.spec.target_offset]));
        debug_assert!(rows > 0);
        tape.add_bias(scaled, offset)
    }

    /// Site logits `[batch × n_sites]`. The features pass through a gradient
    /// reversal with strength `lambda` before reaching the discriminator.
    pub fn forward_site(&self, tape: &mut Tape, features: Var, lambda: f64) -> Result<Var> {
        let layers = self.layers(Group::Discriminator);
        let Some((last, hidden)) = layers.split_last() else {
            return Err(Error::config("parameter set has no discriminator"));
        };
        let mut h = tape.grad_reverse(features, lambda)?;
        for &layer in hidden {
            let z = Self::dense(tape, h, layer)?;
            h = tape.relu(z);
        }
        Self::dense(tape, h, *last)
    }

    /// Gradients of every bound parameter, shaped like `params`.
    pub fn grads(&self, tape: &Tape, params: &ParamSet) -> Result<ParamSet> {
        let mut out = params.zeros_like();
        for (entry, var) in out.entries_mut().iter_mut().zip(&self.vars) {
            let g = tape.grad(*var).ok_or_else(|| Error::usage("parameters were bound as constants"))?;
            entry.tensor.data_mut().copy_from_slice(g.data());
        }
        Ok(out)
    }
}

/// Feature-extractor output for a raw input matrix, without recording gradients.
pub fn extract_features(spec: &ModelSpec, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, spec, params, false);
    let xv = tape.constant(x.clone());
    let f = net.forward_features(&mut tape, xv)?;
    Ok(tape.value(f).clone())
}

/// Age predictions for a feature matrix, without recording gradients.
pub fn predict_age(spec: &ModelSpec, params: &ParamSet, x: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, spec, params, false);
    let xv = tape.constant(x.clone());
    let f = net.forward_features(&mut tape, xv)?;
    let y = net.forward_age(&mut tape, f)?;
    Ok(tape.value(y).data().to_vec())
}
