//! Reusable network blocks and the parameter registry they draw from.
//!
//! Parameters are registered in construction order under hierarchical
//! names, so two builds from the same seed produce byte-identical
//! buffers and checkpoints have a stable layout.

pub mod attention;
pub mod conv;
pub mod transformer;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, Grads, Var};
use crate::tensor::{Element, Tensor};

/// Handle to one named tensor in a [`ParamSet`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Trainable parameters are optimized and counted; buffers
    /// (normalization running statistics) are only persisted.
    pub trainable: bool,
    /// Whether weight decay applies (off for biases and norm affines).
    pub decay: bool,
}

/// Ordered, named collection of parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn set_tensor(&mut self, id: ParamId, t: Tensor<T>) {
        debug_assert_eq!(self.entries[id.0].tensor.shape(), t.shape());
        self.entries[id.0].tensor = t;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count of trainable parameters.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }
}

/// Registers parameters with seeded initialization and scoped names.
pub struct ParamBuilder<T> {
    set: ParamSet<T>,
    rng: ChaCha8Rng,
    path: Vec<String>,
}

impl<T: Element> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            set: ParamSet { entries: Vec::new() },
            rng: ChaCha8Rng::seed_from_u64(seed),
            path: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.path.push(name.to_string());
        let r = f(self);
        self.path.pop();
        r
    }

    fn full_name(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path.join("."), name)
        }
    }

    fn register(&mut self, name: &str, tensor: Tensor<T>, trainable: bool, decay: bool) -> ParamId {
        self.set.entries.push(ParamEntry {
            name: self.full_name(name),
            tensor,
            trainable,
            decay,
        });
        ParamId(self.set.entries.len() - 1)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight.
    pub fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        let tensor = Tensor::from_vec(shape, data).expect("init data matches shape");
        self.register(name, tensor, true, true)
    }

    /// N(0, std) weight (position embeddings).
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std > 0");
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(dist.sample(&mut self.rng)))
            .collect();
        let tensor = Tensor::from_vec(shape, data).expect("init data matches shape");
        self.register(name, tensor, true, true)
    }

    pub fn zeros_no_decay(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.register(name, Tensor::zeros(shape), true, false)
    }

    pub fn ones_no_decay(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.register(name, Tensor::full(shape, T::ONE), true, false)
    }

    /// Non-trainable persisted state (e.g. running statistics).
    pub fn buffer(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.register(name, tensor, false, false)
    }

    pub fn finish(self) -> ParamSet<T> {
        self.set
    }
}

/// One forward pass: a graph plus the bindings from params to leaf vars.
pub struct Session<'p, T: Element> {
    pub g: Graph<T>,
    params: &'p ParamSet<T>,
    pub training: bool,
    /// Seed for stochastic forward structure (performer feature draws).
    pub seed: u64,
    bound: Vec<(ParamId, Var)>,
    overrides: Vec<(ParamId, Var)>,
    /// Batch-norm running statistic updates collected during training.
    pub buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'p, T: Element> Session<'p, T> {
    pub fn new(params: &'p ParamSet<T>, training: bool, seed: u64) -> Self {
        Self::with_graph(Graph::new(), params, training, seed)
    }

    /// Wrap an existing graph (verification harness entry point).
    pub fn with_graph(g: Graph<T>, params: &'p ParamSet<T>, training: bool, seed: u64) -> Self {
        Session {
            g,
            params,
            training,
            seed,
            bound: Vec::new(),
            overrides: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    /// Route a parameter to an existing graph var (verification hook).
    pub fn bind_override(&mut self, id: ParamId, v: Var) {
        self.overrides.push((id, v));
    }

    pub fn into_graph(self) -> Graph<T> {
        self.g
    }

    /// Bind a parameter into the graph as a leaf.
    pub fn var(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&(_, v)) = self.overrides.iter().find(|(i, _)| *i == id) {
            return Ok(v);
        }
        let entry = self.params.get(id);
        let needs = self.training && entry.trainable;
        let v = self.g.leaf(entry.tensor.clone(), needs)?;
        if needs {
            self.bound.push((id, v));
        }
        Ok(v)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        self.params.tensor(id)
    }

    /// Run backward and collect per-parameter gradients in registry order.
    pub fn grads(&self, loss: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let grads: Grads<T> = self.g.backward(loss)?;
        let mut acc: Vec<Option<Vec<T>>> = vec![None; self.params.len()];
        for &(pid, var) in &self.bound {
            if let Some(gv) = grads.get(var) {
                match &mut acc[pid.0] {
                    Some(existing) => {
                        for (a, b) in existing.iter_mut().zip(gv) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(gv.to_vec()),
                }
            }
        }
        let mut out = Vec::new();
        for (idx, slot) in acc.into_iter().enumerate() {
            if let Some(g) = slot {
                let shape = self.params.tensor(ParamId(idx)).shape().to_vec();
                out.push((ParamId(idx), Tensor::from_vec(&shape, g)?));
            }
        }
        Ok(out)
    }
}

/// Fully connected layer; weight stored [in, out].
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        pb.scoped(name, |pb| {
            let w = pb.uniform_fan_in("weight", &[in_dim, out_dim], in_dim);
            let b = bias.then(|| {
                let id = pb.zeros_no_decay("bias", &[out_dim]);
                id
            });
            Linear { w, b }
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.var(self.w)?;
        let y = s.g.matmul(x, w, false, false)?;
        match self.b {
            Some(b) => {
                let bv = s.var(b)?;
                s.g.add(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// Which statistics a normalization layer reduces over.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Layer,
    Instance,
}

/// Normalization with affine parameters; batch mode keeps running stats.
#[derive(Clone, Debug)]
pub struct NormLayer {
    pub mode: NormMode,
    pub gain: ParamId,
    pub offset: ParamId,
    running: Option<(ParamId, ParamId)>,
    pub eps: f64,
    pub momentum: f64,
}

impl NormLayer {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, name: &str, mode: NormMode, dim: usize) -> Self {
        pb.scoped(name, |pb| {
            let gain = pb.ones_no_decay("gain", &[dim]);
            let offset = pb.zeros_no_decay("offset", &[dim]);
            let running = (mode == NormMode::Batch).then(|| {
                let m = pb.buffer("running_mean", Tensor::zeros(&[dim]));
                let v = pb.buffer("running_var", Tensor::full(&[dim], T::ONE));
                (m, v)
            });
            NormLayer {
                mode,
                gain,
                offset,
                running,
                eps: 1e-5,
                momentum: 0.1,
            }
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gain = s.var(self.gain)?;
        let offset = s.var(self.offset)?;
        match self.mode {
            NormMode::Layer => s.g.norm_layer(x, gain, offset, self.eps),
            NormMode::Instance => s.g.norm_instance(x, gain, offset, self.eps),
            NormMode::Batch => {
                let (rm, rv) = self.running.expect("batch mode has running stats");
                if s.training {
                    let (y, mean, var) = s.g.norm_batch(x, gain, offset, self.eps)?;
                    let mom = T::from_f64(self.momentum);
                    let keep = T::ONE - mom;
                    let dim = mean.len();
                    let old_m = s.tensor(rm).values().to_vec();
                    let old_v = s.tensor(rv).values().to_vec();
                    let new_m: Vec<T> = old_m
                        .iter()
                        .zip(&mean)
                        .map(|(&o, &b)| o * keep + b * mom)
                        .collect();
                    let new_v: Vec<T> = old_v
                        .iter()
                        .zip(&var)
                        .map(|(&o, &b)| o * keep + b * mom)
                        .collect();
                    s.buffer_updates
                        .push((rm, Tensor::from_vec(&[dim], new_m)?));
                    s.buffer_updates
                        .push((rv, Tensor::from_vec(&[dim], new_v)?));
                    Ok(y)
                } else {
                    let mean = s.tensor(rm).clone();
                    let var = s.tensor(rv).clone();
                    s.g.norm_batch_fixed(x, gain, offset, mean, var, self.eps)
                }
            }
        }
    }
}

/// Split [B,T,C] into heads: [B*heads, T, C/heads].
pub fn split_heads<T: Element>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, c) = (s[0], s[1], s[2]);
    if c % heads != 0 {
        return Err(Error::shape("split_heads", format!("C={c} heads={heads}")));
    }
    let dh = c / heads;
    let x = g.reshape(x, &[b, t, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, dh])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Element>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (bh, t, dh) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let x = g.reshape(x, &[b, heads, t, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, t, heads * dh])
}

/// Conventional head count for an embedding width.
pub fn default_heads(embed_dim: usize) -> usize {
    (embed_dim / 32).max(1)
}
