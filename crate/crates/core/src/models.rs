//! Policy networks: the value-iteration network (tied, untied and
//! hierarchical) and two reactive convolutional baselines.
//!
//! Every network maps a two-channel observation image plus the agent cell to
//! eight action logits. Evaluation is split in two stages so work shared by
//! all states of one map is done once: [`Network::plan`] records the
//! map-level computation on a tape, and [`Network::logits`] reads out one
//! state.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vinlab_tensor::{ops, Real, Tape, Tensor, Var};

use crate::dataset::Reader;
use crate::gridworld::{Action, GridMap, Pos};
use crate::rng::Rng;
use crate::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"VINW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Channels of the per-cell feature vector in the fully convolutional
/// baseline.
const FCN_FEATURES: usize = 10;
const CNN_CHANNELS: [usize; 5] = [50, 50, 100, 100, 100];
const HVIN_INPUT_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Vin,
    VinUntied,
    Hvin,
    Cnn,
    Fcn,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Vin, Family::VinUntied, Family::Hvin, Family::Cnn, Family::Fcn];

    pub fn tag(self) -> u8 {
        match self {
            Family::Vin => 0,
            Family::VinUntied => 1,
            Family::Hvin => 2,
            Family::Cnn => 3,
            Family::Fcn => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Vin => "vin",
            Family::VinUntied => "vin-untied",
            Family::Hvin => "hvin",
            Family::Cnn => "cnn",
            Family::Fcn => "fcn",
        }
    }

    pub fn is_planner(self) -> bool {
        matches!(self, Family::Vin | Family::VinUntied | Family::Hvin)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model family {s:?}")))
    }
}

/// Architecture hyperparameters. Fields that a family does not use are
/// ignored by it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub m: usize,
    pub n: usize,
    /// Value-iteration recurrences (low level for the hierarchical model).
    pub k: usize,
    pub q_channels: usize,
    pub fr_hidden: usize,
    /// Recurrences of the coarse value-iteration module.
    pub k_high: usize,
}

/// Recurrence count scaled to the grid so goal information can cross it:
/// 10/20/36 for 8/16/28 grids, half-resolution counts 4/10/16 for the
/// hierarchical model.
pub fn default_k(family: Family, m: usize, n: usize) -> usize {
    let size = m.max(n);
    match (family, size) {
        (Family::Hvin, 8) => 4,
        (Family::Hvin, 16) => 10,
        (Family::Hvin, 28) => 16,
        (Family::Hvin, _) => (size / 2).max(2),
        (_, 8) => 10,
        (_, 16) => 20,
        (_, 28) => 36,
        (_, _) => size + size / 4,
    }
}

impl ModelConfig {
    pub fn new(family: Family, m: usize, n: usize) -> Self {
        let k = default_k(family, m, n);
        Self {
            family,
            m,
            n,
            k,
            q_channels: 10,
            fr_hidden: 150,
            k_high: k,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self.k_high = k;
        self
    }

    pub fn tied(&self) -> bool {
        self.family != Family::VinUntied
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Config("grid extents must be positive".into()));
        }
        if self.family.is_planner() {
            if self.k == 0 {
                return Err(Error::Config("K must be at least 1".into()));
            }
            if self.q_channels == 0 || self.fr_hidden == 0 {
                return Err(Error::Config("channel counts must be positive".into()));
            }
            if self.family == Family::Hvin && self.k_high == 0 {
                return Err(Error::Config("high-level K must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Extents of the image seen by the coarse module: odd sizes gain one
    /// wall row or column.
    fn padded(&self) -> (usize, usize) {
        (self.m.next_multiple_of(2), self.n.next_multiple_of(2))
    }

    fn cnn_flat(&self) -> usize {
        let h = self.m.div_ceil(2).div_ceil(2);
        let w = self.n.div_ceil(2).div_ceil(2);
        CNN_CHANNELS[4] * h * w
    }

    /// Tensor names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: &str, shape: &[usize]| out.push((name.to_string(), shape.to_vec()));
        let (q, h) = (self.q_channels, self.fr_hidden);
        match self.family {
            Family::Vin | Family::VinUntied | Family::Hvin => {
                if self.family == Family::Hvin {
                    push("hi_conv", &[HVIN_INPUT_CHANNELS, 2, 3, 3]);
                    push("hi_conv_bias", &[HVIN_INPUT_CHANNELS]);
                    push("hi_fr_conv1", &[h, HVIN_INPUT_CHANNELS, 3, 3]);
                    push("hi_fr_conv1_bias", &[h]);
                    push("hi_fr_conv2", &[1, h, 3, 3]);
                    push("hi_fr_conv2_bias", &[1]);
                    push("hi_vi_wr", &[q, 1, 3, 3]);
                    push("hi_vi_wv", &[q, 1, 3, 3]);
                }
                push("fr_conv1", &[h, 2, 3, 3]);
                push("fr_conv1_bias", &[h]);
                push("fr_conv2", &[1, h, 3, 3]);
                push("fr_conv2_bias", &[1]);
                let reward_channels = if self.family == Family::Hvin { 2 } else { 1 };
                if self.tied() {
                    push("vi_wr", &[q, reward_channels, 3, 3]);
                    push("vi_wv", &[q, 1, 3, 3]);
                } else {
                    for k in 0..self.k {
                        push(&format!("vi_wr_{k}"), &[q, reward_channels, 3, 3]);
                        push(&format!("vi_wv_{k}"), &[q, 1, 3, 3]);
                    }
                }
                push("policy_w", &[Action::COUNT, q]);
                push("policy_b", &[Action::COUNT]);
            }
            Family::Cnn => {
                let mut cin = 3;
                for (l, &c) in CNN_CHANNELS.iter().enumerate() {
                    push(&format!("cnn_conv{}", l + 1), &[c, cin, 3, 3]);
                    push(&format!("cnn_conv{}_bias", l + 1), &[c]);
                    cin = c;
                }
                push("cnn_out_w", &[Action::COUNT, self.cnn_flat()]);
                push("cnn_out_b", &[Action::COUNT]);
            }
            Family::Fcn => {
                push("fcn_conv1", &[h, 2, 2 * self.m - 1, 2 * self.n - 1]);
                push("fcn_conv1_bias", &[h]);
                push("fcn_conv2", &[h, h, 1, 1]);
                push("fcn_conv2_bias", &[h]);
                push("fcn_conv3", &[FCN_FEATURES, h, 1, 1]);
                push("fcn_conv3_bias", &[FCN_FEATURES]);
                push("policy_w", &[Action::COUNT, FCN_FEATURES]);
                push("policy_b", &[Action::COUNT]);
            }
        }
        out
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with("_bias") || name.ends_with("_b")
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T: Real = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelWeights<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (names, tensors) = config
            .layout()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .unzip();
        Ok(Self { config, names, tensors })
    }

    /// Glorot-uniform kernels, `U(-l, l)` with `l = sqrt(6 / (fan_in +
    /// fan_out))`, zero biases. Tensors are drawn in storage order from one
    /// stream seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = Rng::new(seed);
        for (name, t) in w.names.iter().zip(&mut w.tensors) {
            if is_bias(name) {
                continue;
            }
            let (fan_in, fan_out) = fans(t.shape());
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in t.data_mut() {
                *v = T::from_f64(rng.uniform(-limit, limit));
            }
        }
        Ok(w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Adds `U(-scale, scale)` noise to every bias.
    pub fn jitter_biases(&mut self, scale: f64, seed: u64) {
        let mut rng = Rng::new(seed);
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if is_bias(name) {
                for v in t.data_mut() {
                    *v += T::from_f64(rng.uniform(-scale, scale));
                }
            }
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index(name).map(|i| &mut self.tensors[i])
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every tensor as a parameter (id = storage index) and
    /// returns the bound network.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Network<'_>> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Network::new(&self.config, &self.names, vars))
    }

    /// Logits for one state, evaluated from scratch.
    pub fn forward(&self, map: &GridMap, pos: Pos) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape)?;
        let plan = net.plan(&mut tape, &map.image())?;
        let logits = net.logits(&mut tape, plan, pos)?;
        Ok(tape.value(logits).clone())
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [k, d] => (*d, *k),
        [co, ci, kh, kw] => (ci * kh * kw, co * kh * kw),
        _ => (shape.iter().product(), shape.iter().product()),
    }
}

impl ModelWeights<f32> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.push(self.config.family.tag());
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::format("weights", e.to_string()))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a weights file. Tensors follow the header until end of file;
    /// each must belong to the configured layout with the expected shape.
    /// Missing bias tensors are zero-filled, any other missing tensor is an
    /// error.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::format("weights", reason);
        let mut r = Reader::new(bytes, "weights");
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let tag = r.u8()?;
        let family = Family::from_tag(tag).ok_or_else(|| bad(format!("unknown family tag {tag}")))?;
        let len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("config: {e}")))?;
        if config.family != family {
            return Err(bad("family tag disagrees with config".into()));
        }
        config.validate()?;
        let mut w = ModelWeights::<f32>::zeros(config)?;
        let mut seen = vec![false; w.names.len()];
        while !r.done() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let i = w
                .index(&name)
                .ok_or_else(|| bad(format!("unexpected tensor {name:?}")))?;
            if seen[i] {
                return Err(bad(format!("duplicate tensor {name:?}")));
            }
            if w.tensors[i].shape() != shape.as_slice() {
                return Err(bad(format!(
                    "tensor {name:?} has shape {shape:?}, expected {:?}",
                    w.tensors[i].shape()
                )));
            }
            let count: usize = shape.iter().product();
            let payload = r.take(count.checked_mul(4).ok_or_else(|| bad("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)?;
            if !t.is_finite() {
                return Err(bad(format!("tensor {name:?} has non-finite values")));
            }
            w.tensors[i] = t;
            seen[i] = true;
        }
        if let Some(i) = (0..seen.len()).find(|&i| !seen[i] && !is_bias(&w.names[i])) {
            return Err(bad(format!("missing tensor {:?}", w.names[i])));
        }
        Ok(w)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

/// Hand-set VIN that performs exact value iteration on obstacle-free maps.
///
/// The reward map is the goal channel. The value kernels hold `gamma` at the
/// tap that reads the neighbour in each move direction, plus a ninth "stay"
/// channel reading the cell itself, so that the goal keeps collecting its
/// reward as an absorbing state. The policy head copies the eight move
/// channels to the logits.
pub fn oracle_vin_weights<T: Real>(m: usize, n: usize, k: usize, gamma: f64) -> Result<ModelWeights<T>> {
    let config = ModelConfig {
        family: Family::Vin,
        m,
        n,
        k,
        q_channels: Action::COUNT + 1,
        fr_hidden: 1,
        k_high: k,
    };
    let mut w = ModelWeights::<T>::zeros(config)?;
    let set = |w: &mut ModelWeights<T>, name: &str, idx: &[usize], v: f64| {
        let t = w.get_mut(name).expect("oracle layout");
        let mut flat = 0;
        for (&i, &d) in idx.iter().zip(t.shape()) {
            flat = flat * d + i;
        }
        t.data_mut()[flat] = T::from_f64(v);
    };
    set(&mut w, "fr_conv1", &[0, 1, 1, 1], 1.0);
    set(&mut w, "fr_conv2", &[0, 0, 1, 1], 1.0);
    for c in 0..=Action::COUNT {
        set(&mut w, "vi_wr", &[c, 0, 1, 1], 1.0);
        let (di, dj) = Action::new(c).map_or((0, 0), Action::offset);
        // a true convolution reads input[i - u + 1, j - v + 1] at tap (u, v)
        set(&mut w, "vi_wv", &[c, 0, (1 - di) as usize, (1 - dj) as usize], gamma);
    }
    for a in 0..Action::COUNT {
        set(&mut w, "policy_w", &[a, a], 1.0);
    }
    Ok(w)
}

/// Parameters of one network registered on a tape.
pub struct Network<'a> {
    config: &'a ModelConfig,
    names: &'a [String],
    vars: Vec<Var>,
}

/// Value-iteration module over a reward stack: `Q_1 = wr * R`,
/// `Q_k = wr_k * R + wv_k * V_{k-1}`, `V_k = max_c Q_k` (channel max), where
/// `*` is a same-size convolution without bias. Starting from `V_0 = 0`, this
/// equals convolving the stacked `[R; V_{k-1}]` with `[wr; wv]` each step.
/// With tied weights the reward term is computed once. Returns `(Q_K, V_K)`.
pub fn vi_module<T: Real>(tape: &mut Tape<T>, reward: Var, wr: &[Var], wv: &[Var], k: usize) -> Result<(Var, Var)> {
    if k == 0 || wr.is_empty() || wr.len() != wv.len() {
        return Err(Error::Config(
            "value iteration needs K >= 1 and matching kernel lists".into(),
        ));
    }
    let tied = wr.len() == 1;
    let r0 = tape.conv2d_same(reward, wr[0], None)?;
    let mut q = r0;
    let mut v = tape.channel_max(q)?;
    for it in 1..k {
        let (kr, kv) = if tied { (wr[0], wv[0]) } else { (wr[it], wv[it]) };
        let r = if tied { r0 } else { tape.conv2d_same(reward, kr, None)? };
        let pv = tape.conv2d_same(v, kv, None)?;
        q = tape.add(r, pv)?;
        v = tape.channel_max(q)?;
    }
    Ok((q, v))
}

impl<'a> Network<'a> {
    /// Binds already-registered parameter leaves, in storage order.
    pub fn new(config: &'a ModelConfig, names: &'a [String], vars: Vec<Var>) -> Self {
        Self { config, names, vars }
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    fn v(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no tensor {name}"));
        self.vars[i]
    }

    /// Learned reward map: 3x3 conv, rectifier, 3x3 conv to one channel.
    pub fn reward_map<T: Real>(&self, tape: &mut Tape<T>, image: Var, prefix: &str) -> Result<Var> {
        let w1 = self.v(&format!("{prefix}fr_conv1"));
        let b1 = self.v(&format!("{prefix}fr_conv1_bias"));
        let w2 = self.v(&format!("{prefix}fr_conv2"));
        let b2 = self.v(&format!("{prefix}fr_conv2_bias"));
        let h = tape.conv2d_same(image, w1, Some(b1))?;
        let h = tape.relu(h)?;
        Ok(tape.conv2d_same(h, w2, Some(b2))?)
    }

    /// Map-level computation shared by every state of one map: the Q field
    /// for the planners, the per-cell features for the fully convolutional
    /// baseline, and the recorded image for the convolutional baseline.
    pub fn plan<T: Real>(&self, tape: &mut Tape<T>, image: &Tensor<T>) -> Result<Var> {
        let cfg = self.config;
        if image.shape() != [2, cfg.m, cfg.n] {
            return Err(Error::Config(format!(
                "observation image has shape {:?}, expected [2, {}, {}]",
                image.shape(),
                cfg.m,
                cfg.n
            )));
        }
        let x = tape.input(image.clone())?;
        match cfg.family {
            Family::Vin | Family::VinUntied => {
                let r = self.reward_map(tape, x, "")?;
                let (wr, wv) = self.vi_kernels();
                Ok(vi_module(tape, r, &wr, &wv, cfg.k)?.0)
            }
            Family::Hvin => {
                let (pm, pn) = cfg.padded();
                let coarse_in = if (pm, pn) == (cfg.m, cfg.n) {
                    x
                } else {
                    tape.input(pad_with_walls(image, pm, pn))?
                };
                let h = tape.conv2d_same(coarse_in, self.v("hi_conv"), Some(self.v("hi_conv_bias")))?;
                let h = tape.maxpool2d(h)?;
                let r_hi = self.reward_map(tape, h, "hi_")?;
                let (_, v_hi) = vi_module(tape, r_hi, &[self.v("hi_vi_wr")], &[self.v("hi_vi_wv")], cfg.k_high)?;
                let up = tape.upsample_nearest(v_hi)?;
                let up = if (pm, pn) == (cfg.m, cfg.n) {
                    up
                } else {
                    tape.crop(up, cfg.m, cfg.n)?
                };
                let r = self.reward_map(tape, x, "")?;
                let stack = tape.concat_channels(r, up)?;
                let (wr, wv) = self.vi_kernels();
                Ok(vi_module(tape, stack, &wr, &wv, cfg.k)?.0)
            }
            Family::Fcn => {
                let h = tape.conv2d_same(x, self.v("fcn_conv1"), Some(self.v("fcn_conv1_bias")))?;
                let h = tape.relu(h)?;
                let h = tape.conv2d_same(h, self.v("fcn_conv2"), Some(self.v("fcn_conv2_bias")))?;
                let h = tape.relu(h)?;
                Ok(tape.conv2d_same(h, self.v("fcn_conv3"), Some(self.v("fcn_conv3_bias")))?)
            }
            Family::Cnn => Ok(x),
        }
    }

    fn vi_kernels(&self) -> (Vec<Var>, Vec<Var>) {
        if self.config.tied() {
            (vec![self.v("vi_wr")], vec![self.v("vi_wv")])
        } else {
            (0..self.config.k)
                .map(|k| (self.v(&format!("vi_wr_{k}")), self.v(&format!("vi_wv_{k}"))))
                .unzip()
        }
    }

    /// Action logits at `pos` from a plan recorded by [`Network::plan`].
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, plan: Var, pos: Pos) -> Result<Var> {
        let cfg = self.config;
        if pos.i >= cfg.m || pos.j >= cfg.n {
            return Err(Error::Config(format!(
                "state {pos:?} outside the {}x{} grid",
                cfg.m, cfg.n
            )));
        }
        match cfg.family {
            Family::Cnn => {
                let mut chan = Tensor::<T>::zeros(&[1, cfg.m, cfg.n]);
                *chan.at3_mut(0, pos.i, pos.j) = T::one();
                let p = tape.input(chan)?;
                let mut h = tape.concat_channels(plan, p)?;
                for l in 1..=CNN_CHANNELS.len() {
                    h = tape.conv2d_same(
                        h,
                        self.v(&format!("cnn_conv{l}")),
                        Some(self.v(&format!("cnn_conv{l}_bias"))),
                    )?;
                    h = tape.relu(h)?;
                    if l == 1 || l == 3 {
                        h = tape.maxpool2d(h)?;
                    }
                }
                Ok(tape.dense(h, self.v("cnn_out_w"), self.v("cnn_out_b"))?)
            }
            _ => {
                let psi = tape.pick_cell(plan, pos.i, pos.j)?;
                Ok(tape.dense(psi, self.v("policy_w"), self.v("policy_b"))?)
            }
        }
    }
}

/// Extends an observation image with wall rows/columns at the bottom and
/// right so both extents are even.
fn pad_with_walls<T: Real>(image: &Tensor<T>, pm: usize, pn: usize) -> Tensor<T> {
    let (m, n) = (image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(&[2, pm, pn]);
    for i in 0..pm {
        for j in 0..pn {
            if i < m && j < n {
                *out.at3_mut(0, i, j) = image.at3(0, i, j);
                *out.at3_mut(1, i, j) = image.at3(1, i, j);
            } else {
                *out.at3_mut(0, i, j) = T::one();
            }
        }
    }
    out
}

/// Lowest-index argmax of a logit vector.
pub fn argmax_action<T: Real>(logits: &Tensor<T>) -> Action {
    let mut best = 0;
    for (a, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = a;
        }
    }
    Action::new(best).expect("eight logits")
}

/// Action probabilities.
pub fn action_probs<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    ops::softmax(logits).data().iter().map(|v| v.as_f64()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{exact_value_iteration, generate_map, OracleSpec};

    #[test]
    fn layouts_and_param_counts() {
        let vin = ModelConfig::new(Family::Vin, 8, 8);
        let w = ModelWeights::<f32>::zeros(vin.clone()).unwrap();
        let expect = 150 * 2 * 9 + 150 + 150 * 9 + 1 + 2 * 10 * 9 + 8 * 10 + 8;
        assert_eq!(w.param_count(), expect);

        let untied = ModelConfig::new(Family::VinUntied, 8, 8);
        let wu = ModelWeights::<f32>::zeros(untied).unwrap();
        assert_eq!(wu.param_count(), expect + 9 * 2 * 10 * 9);

        let cnn = ModelWeights::<f32>::zeros(ModelConfig::new(Family::Cnn, 16, 16)).unwrap();
        let convs: usize = [(3, 50), (50, 50), (50, 100), (100, 100), (100, 100)]
            .iter()
            .map(|&(i, o)| o * i * 9 + o)
            .sum();
        assert_eq!(cnn.param_count(), convs + 8 * 100 * 16 + 8);

        let fcn = ModelWeights::<f32>::zeros(ModelConfig::new(Family::Fcn, 8, 8)).unwrap();
        let expect = 150 * 2 * 15 * 15 + 150 + 150 * 150 + 150 + 10 * 150 + 10 + 80 + 8;
        assert_eq!(fcn.param_count(), expect);
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let map = generate_map(8, 8, 0.3, 2).unwrap();
        for family in Family::ALL {
            let w = ModelWeights::<f64>::zeros(ModelConfig::new(family, 8, 8).with_k(3)).unwrap();
            let l = w.forward(&map, map.goal()).unwrap();
            assert!(l.data().iter().all(|&v| v == 0.0), "{family}");
        }
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let cfg = ModelConfig::new(Family::Vin, 8, 8);
        let a = ModelWeights::<f32>::init(cfg.clone(), 4).unwrap();
        assert_eq!(a, ModelWeights::<f32>::init(cfg.clone(), 4).unwrap());
        assert_ne!(a, ModelWeights::<f32>::init(cfg, 5).unwrap());
        let k = a.get("fr_conv1").unwrap();
        let mean = k.data().iter().map(|&v| v as f64).sum::<f64>() / k.numel() as f64;
        let var = k.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / k.numel() as f64;
        let want = 2.0 / (18.0 + 1350.0);
        assert!((var / want - 1.0).abs() < 0.2, "{var} vs {want}");
        assert!(a.get("fr_conv1_bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initialized_models_give_finite_logits() {
        let map = generate_map(9, 7, 0.3, 3).unwrap();
        for family in Family::ALL {
            let w = ModelWeights::<f32>::init(ModelConfig::new(family, 9, 7), 1).unwrap();
            let l = w.forward(&map, Pos::new(0, 0)).unwrap();
            assert_eq!(l.shape(), &[8]);
            assert!(l.is_finite());
        }
    }

    #[test]
    fn weights_round_trip() {
        for family in Family::ALL {
            let w = ModelWeights::<f32>::init(ModelConfig::new(family, 8, 8).with_k(3), 9).unwrap();
            let bytes = w.encode().unwrap();
            let back = ModelWeights::decode(&bytes).unwrap();
            assert_eq!(back, w);
            assert_eq!(back.encode().unwrap(), bytes);
        }
    }

    #[test]
    fn weights_decode_tolerates_missing_bias_only() {
        let w = ModelWeights::<f32>::init(ModelConfig::new(Family::Vin, 4, 4).with_k(2), 1).unwrap();
        let mut stripped = w.clone();
        let keep: Vec<usize> = (0..w.names.len()).filter(|&i| !is_bias(&w.names[i])).collect();
        stripped.names = keep.iter().map(|&i| w.names[i].clone()).collect();
        stripped.tensors = keep.iter().map(|&i| w.tensors[i].clone()).collect();
        let back = ModelWeights::decode(&stripped.encode().unwrap()).unwrap();
        assert_eq!(back, w);

        let mut missing = w.clone();
        missing.names.remove(0);
        missing.tensors.remove(0);
        assert!(ModelWeights::decode(&missing.encode().unwrap()).is_err());

        let mut dup = w.encode().unwrap();
        let mut one = w.clone();
        one.names.truncate(1);
        one.tensors.truncate(1);
        let enc = one.encode().unwrap();
        let header = 4 + 4 + 1 + 4 + serde_json::to_vec(w.config()).unwrap().len();
        dup.extend_from_slice(&enc[header..]);
        assert!(ModelWeights::decode(&dup).is_err());
    }

    #[test]
    fn first_iteration_is_reward_convolution() {
        let mut tape = Tape::<f64>::new();
        let r = Tensor::from_fn(&[1, 4, 5], |f| (f as f64 * 0.37).sin());
        let wr = Tensor::from_fn(&[3, 1, 3, 3], |f| (f as f64 * 0.11).cos());
        let wv = Tensor::from_fn(&[3, 1, 3, 3], |f| f as f64);
        let rv = tape.input(r.clone()).unwrap();
        let wrv = tape.input(wr.clone()).unwrap();
        let wvv = tape.input(wv).unwrap();
        let (q, v) = vi_module(&mut tape, rv, &[wrv], &[wvv], 1).unwrap();
        let want = ops::conv2d_same(&r, &wr, None).unwrap();
        assert_eq!(tape.value(q), &want);
        assert_eq!(tape.value(v).shape(), &[1, 4, 5]);
    }

    #[test]
    fn oracle_vin_matches_exact_value_iteration() {
        let (m, n, gamma) = (8, 8, 0.9);
        let k = 2 * (m + n);
        let w = oracle_vin_weights::<f64>(m, n, k, gamma).unwrap();
        for seed in 0..5 {
            let map = generate_map(m, n, 0.0, seed).unwrap();
            let mut tape = Tape::new();
            let net = w.bind(&mut tape).unwrap();
            let x = tape.input(map.image()).unwrap();
            let r = net.reward_map(&mut tape, x, "").unwrap();
            let (_, v) = vi_module(&mut tape, r, &[net.v("vi_wr")], &[net.v("vi_wv")], k).unwrap();
            let spec = OracleSpec {
                reward_goal: 1.0,
                reward_obstacle: 0.0,
                reward_step: 0.0,
                gamma,
            };
            let exact = exact_value_iteration(&map, &spec, k).unwrap();
            for (a, b) in tape.value(v).data().iter().zip(&exact) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax_action(&Tensor::<f32>::zeros(&[8])), Action::N);
        let mut t = Tensor::<f32>::zeros(&[8]);
        t.data_mut()[5] = 1.0;
        assert_eq!(argmax_action(&t).index(), 5);
    }

    #[test]
    fn family_names_parse() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
            assert_eq!(Family::from_tag(f.tag()), Some(f));
        }
        assert!("resnet".parse::<Family>().is_err());
    }

    #[test]
    fn zero_k_rejected() {
        assert!(ModelWeights::<f32>::zeros(ModelConfig::new(Family::Vin, 8, 8).with_k(0)).is_err());
    }
}
