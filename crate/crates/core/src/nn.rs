//! Parameter storage, the forward context, and the layers shared by the
//! Mobile and Former branches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, NormMode, Tape, Var};
use crate::cost::Pillar;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub pillar: Pillar,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Param<T> {
    /// Layer path: the name without its trailing field (`weight`, `bias`, ...).
    pub fn layer(&self) -> &str {
        self.name.rsplit_once('.').map_or(&self.name, |(l, _)| l)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Every learnable tensor of a model plus batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    stats: Vec<Option<RunningStats<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, pillar: Pillar, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            pillar,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, stats: Option<RunningStats<T>>) -> StatsId {
        self.stats.push(stats);
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn stats(&self, id: StatsId) -> Option<&RunningStats<T>> {
        self.stats[id.0].as_ref()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Folds a train-mode batch statistic into the running estimate.
    pub fn update_stats(&mut self, id: StatsId, batch: &BatchStats<T>, momentum: f64) {
        let m = T::c(momentum);
        let keep = T::one() - m;
        match self.stats[id.0].as_mut() {
            Some(rs) => {
                for (r, &b) in rs.mean.iter_mut().zip(&batch.mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in rs.var.iter_mut().zip(&batch.var) {
                    *r = keep * *r + m * b;
                }
            }
            None => {
                self.stats[id.0] = Some(RunningStats {
                    mean: batch.mean.clone(),
                    var: batch.var.clone(),
                })
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::c(x.f64())).collect::<Vec<U>>();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    pillar: p.pillar,
                    value: p.value.cast(),
                    grad: p.grad.as_deref().map(conv),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| {
                    s.as_ref().map(|s| RunningStats {
                        mean: conv(&s.mean),
                        var: conv(&s.var),
                    })
                })
                .collect(),
        }
    }
}

/// Attention weights captured by one bridge application: `heads` vars of
/// shape `[N, rows, cols]`, each row normalized over `cols`.
#[derive(Clone, Debug)]
pub struct AttentionHandle {
    pub heads: Vec<Var>,
}

/// State threaded through one forward evaluation: the tape, lazily bound
/// parameters, batch-norm updates and attention captures.
pub struct Forward<'m, T: Scalar> {
    pub tape: Tape<T>,
    store: &'m ParamStore<T>,
    bound: Vec<Option<Var>>,
    pub mode: NormMode,
    grads: bool,
    pub stat_updates: Vec<(StatsId, BatchStats<T>)>,
    pub dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'m, T: Scalar> Forward<'m, T> {
    pub fn new(store: &'m ParamStore<T>, mode: NormMode, grads: bool) -> Self {
        Self::with_tape(store, Tape::new(), mode, grads)
    }

    pub fn with_tape(store: &'m ParamStore<T>, tape: Tape<T>, mode: NormMode, grads: bool) -> Self {
        Forward {
            tape,
            store,
            bound: vec![None; store.len()],
            mode,
            grads,
            stat_updates: Vec::new(),
            dropout: None,
        }
    }

    /// Shape-only evaluation for cost tracing.
    pub fn counting(store: &'m ParamStore<T>) -> Self {
        Self::with_tape(store, Tape::shape_only(), NormMode::Eval, false)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape handle for a parameter, recorded on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf_ref(&self.store.get(id).value, self.grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn scoped<R>(&mut self, path: &str, pillar: Pillar, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.tape.enter(path, pillar);
        let r = f(self);
        self.tape.leave(prev);
        r
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let g = self.tape.grad((*v)?)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

// ---- initialization ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(gain / fan_in)`.
    FanIn(f64),
    Normal(f64),
    Zeros,
    Ones,
}

impl Init {
    pub fn make<T: Scalar>(
        self,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Tensor<T> {
        match self {
            Init::FanIn(gain) => Tensor::randn(shape, (gain / fan_in as f64).sqrt(), rng),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        }
    }
}

/// Builder passed to layer constructors: the store being filled, the seeded
/// generator, and the attribution pillar for new parameters.
pub struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub pillar: Pillar,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn param(&mut self, name: String, shape: &[usize], fan_in: usize, init: Init) -> ParamId {
        let t = init.make(shape, fan_in, self.rng);
        self.store.add(name, self.pillar, t)
    }

    pub fn with_pillar<R>(&mut self, pillar: Pillar, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = std::mem::replace(&mut self.pillar, pillar);
        let r = f(self);
        self.pillar = prev;
        r
    }

    pub fn seed_stream(&mut self) -> u64 {
        self.rng.gen()
    }
}

// ---- layers -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    pub path: String,
    pub pillar: Pillar,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        inp: usize,
        out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = b.param(format!("{path}.weight"), &[out, inp], inp, init);
        let bias = bias.then(|| b.param(format!("{path}.bias"), &[out], inp, Init::Zeros));
        Linear {
            path: path.to_string(),
            pillar: b.pillar,
            weight,
            bias,
            inp,
            out,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        f.scoped(&self.path, self.pillar, |f| {
            let w = f.p(self.weight);
            let b = self.bias.map(|b| f.p(b));
            f.tape.linear(x, w, b)
        })
    }
}

/// Convolution followed by batch norm (the conv carries no bias).
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub path: String,
    pub pillar: Pillar,
    pub weight: ParamId,
    pub norm: BatchNorm,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        init: Init,
    ) -> Result<Self> {
        if !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(Error::Divisibility {
                what: format!("{path} channels {cin}->{cout}"),
                value: if !cin.is_multiple_of(groups) {
                    cin
                } else {
                    cout
                },
                by: groups,
            });
        }
        let fan_in = kernel * kernel * cin / groups;
        let weight = b.param(
            format!("{path}.weight"),
            &[cout, cin / groups, kernel, kernel],
            fan_in,
            init,
        );
        let norm = BatchNorm::new(b, &format!("{path}.bn"), cout);
        Ok(ConvBn {
            path: path.to_string(),
            pillar: b.pillar,
            weight,
            norm,
            cin,
            cout,
            kernel,
            stride,
            groups,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let y = f.scoped(&self.path, self.pillar, |f| {
            let w = f.p(self.weight);
            f.tape
                .conv2d(x, w, None, self.stride, self.kernel / 2, self.groups)
        })?;
        self.norm.forward(f, y)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub path: String,
    pub pillar: Pillar,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    /// Running statistics start at mean 0, variance 1.
    pub fn new<T: Scalar>(b: &mut Builder<T>, path: &str, c: usize) -> Self {
        let gamma = b.param(format!("{path}.weight"), &[c], c, Init::Ones);
        let beta = b.param(format!("{path}.bias"), &[c], c, Init::Zeros);
        let stats = b.store.add_stats(Some(RunningStats {
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        }));
        BatchNorm {
            path: path.to_string(),
            pillar: b.pillar,
            gamma,
            beta,
            stats,
            eps: 1e-5,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        f.scoped(&self.path, self.pillar, |f| {
            let (g, b) = (f.p(self.gamma), f.p(self.beta));
            let store = f.store;
            let running = store.stats(self.stats).map(|s| (&s.mean[..], &s.var[..]));
            let mode = f.mode;
            let (y, stats) = f.tape.batch_norm(x, g, b, self.eps, mode, running)?;
            if let Some(s) = stats {
                f.stat_updates.push((self.stats, s));
            }
            Ok(y)
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub path: String,
    pub pillar: Pillar,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, path: &str, d: usize) -> Self {
        LayerNorm {
            path: path.to_string(),
            pillar: b.pillar,
            gamma: b.param(format!("{path}.weight"), &[d], d, Init::Ones),
            beta: b.param(format!("{path}.bias"), &[d], d, Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, z: Var) -> Result<Var> {
        f.scoped(&self.path, self.pillar, |f| {
            let (g, b) = (f.p(self.gamma), f.p(self.beta));
            f.tape.layer_norm(z, g, b, self.eps)
        })
    }
}

/// Generates channel-wise two-branch dynamic-ReLU coefficients from a token:
/// `d -> hidden -> 4·C`, added as scaled deltas to the ReLU base
/// `a = (1, 0)`, `b = (0, 0)`.
#[derive(Clone, Debug)]
pub struct DyReluGenerator {
    pub path: String,
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl DyReluGenerator {
    pub const BRANCHES: usize = 2;

    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        d: usize,
        hidden: usize,
        channels: usize,
    ) -> Self {
        let fc1 = Linear::new(b, &format!("{path}.fc1"), d, hidden, true, Init::FanIn(2.0));
        let fc2 = Linear::new(
            b,
            &format!("{path}.fc2"),
            hidden,
            2 * Self::BRANCHES * channels,
            true,
            Init::Zeros,
        );
        DyReluGenerator {
            path: path.to_string(),
            fc1,
            fc2,
            channels,
            lambda_a: 1.0,
            lambda_b: 0.5,
        }
    }

    /// Coefficients `[N, 4C]` laid out `[a1 | a2 | b1 | b2]`.
    pub fn coefficients<T: Scalar>(&self, f: &mut Forward<T>, token: Var) -> Result<Var> {
        let h = self.fc1.forward(f, token)?;
        let pillar = self.fc1.pillar;
        let h = f.scoped(&self.fc1.path, pillar, |f| f.tape.relu(h))?;
        let delta = self.fc2.forward(f, h)?;
        let c = self.channels;
        f.scoped(&self.path, pillar, |f| {
            let da = f.tape.narrow(delta, 1, 0, 2 * c)?;
            let db = f.tape.narrow(delta, 1, 2 * c, 2 * c)?;
            let da = f.tape.scale(da, self.lambda_a)?;
            let db = f.tape.scale(db, self.lambda_b)?;
            let coef = f.tape.concat(&[da, db], 1)?;
            let mut base = vec![T::zero(); 4 * c];
            base[..c].iter_mut().for_each(|v| *v = T::one());
            let base = f.tape.constant(Tensor::new(&[4 * c], base)?);
            f.tape.add_bias(coef, base)
        })
    }
}

/// Applies the dynamic ReLU to `x` with coefficients generated from `token: [N, d]`.
pub fn dynamic_relu<T: Scalar>(
    f: &mut Forward<T>,
    x: Var,
    token: Var,
    gen: &DyReluGenerator,
) -> Result<Var> {
    let c = f.tape.shape(x).get(1).copied().unwrap_or(0);
    if c != gen.channels {
        return Err(Error::invalid(
            "dynamic_relu",
            format!("input has {c} channels, generator expects {}", gen.channels),
        ));
    }
    let coef = gen.coefficients(f, token)?;
    let pillar = gen.fc1.pillar;
    f.scoped(&gen.path, pillar, |f| f.tape.dyrelu(x, coef))
}

/// Multi-head self-attention over a token set `[N, M, d]` (pre-residual output).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub path: String,
    pub pillar: Pillar,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, path: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Divisibility {
                what: format!("{path} token dim"),
                value: d,
                by: heads,
            });
        }
        let lin = |b: &mut Builder<T>, n: &str| {
            Linear::new(b, &format!("{path}.{n}"), d, d, true, Init::FanIn(1.0))
        };
        Ok(MultiHeadAttention {
            path: path.to_string(),
            pillar: b.pillar,
            q: lin(b, "q"),
            k: lin(b, "k"),
            v: lin(b, "v"),
            o: lin(b, "o"),
            heads,
        })
    }

    /// Returns the output and each head's `[N, M, M]` attention weights.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, z: Var) -> Result<(Var, Vec<Var>)> {
        let d = *f.tape.shape(z).last().expect("token set");
        let q = self.q.forward(f, z)?;
        let k = self.k.forward(f, z)?;
        let v = self.v.forward(f, z)?;
        let dh = d / self.heads;
        let (cat, attn) = f.scoped(&self.path, self.pillar, |f| -> Result<_> {
            let mut outs = Vec::with_capacity(self.heads);
            let mut attn = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = f.tape.narrow(q, 2, h * dh, dh)?;
                let kh = f.tape.narrow(k, 2, h * dh, dh)?;
                let vh = f.tape.narrow(v, 2, h * dh, dh)?;
                let s = f.tape.bmm(qh, kh, true)?;
                let s = f.tape.scale(s, 1.0 / (dh as f64).sqrt())?;
                let a = f.tape.softmax(s, 2)?;
                outs.push(f.tape.bmm(a, vh, false)?);
                attn.push(a);
            }
            Ok((f.tape.concat(&outs, 2)?, attn))
        })?;
        Ok((self.o.forward(f, cat)?, attn))
    }
}

/// Token feed-forward network `d -> e·d -> d` with GELU (pre-residual output).
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub const EXPANSION: usize = 2;

    pub fn new<T: Scalar>(b: &mut Builder<T>, path: &str, d: usize) -> Self {
        let hidden = Self::EXPANSION * d;
        FeedForward {
            fc1: Linear::new(b, &format!("{path}.fc1"), d, hidden, true, Init::FanIn(2.0)),
            fc2: Linear::new(b, &format!("{path}.fc2"), hidden, d, true, Init::FanIn(1.0)),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, z: Var) -> Result<Var> {
        let h = self.fc1.forward(f, z)?;
        let pillar = self.fc1.pillar;
        let h = f.scoped(&self.fc1.path, pillar, |f| f.tape.gelu(h))?;
        self.fc2.forward(f, h)
    }
}

/// Sets every element of a parameter to zero (used to make residual branches inert).
pub fn zero_param<T: Scalar>(store: &mut ParamStore<T>, id: ParamId) {
    store
        .get_mut(id)
        .value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = T::zero());
}
