//! Light-weight two-way cross attention between a feature map `[N, C, h, w]`
//! and a token set `[N, M, d]`.
//!
//! Only the token side is projected. Features are split channel-wise into
//! `heads` contiguous groups of `C / heads` channels and enter the attention
//! unprojected; tokens are split into groups of `d / heads` dimensions and
//! projected per head to the feature group width. Scores are scaled by
//! `1 / sqrt(C / heads)`.

use crate::autodiff::Var;
use crate::cost::Pillar;
use crate::error::{Error, Result};
use crate::nn::{AttentionHandle, Builder, Forward, Init, Linear, ParamId};
use crate::tensor::Scalar;

fn check_heads(what: &str, value: usize, heads: usize) -> Result<()> {
    if heads == 0 || !value.is_multiple_of(heads) {
        return Err(Error::Divisibility {
            what: what.to_string(),
            value,
            by: heads,
        });
    }
    Ok(())
}

fn per_head<T: Scalar>(
    b: &mut Builder<T>,
    path: &str,
    field: &str,
    d: usize,
    c: usize,
    heads: usize,
    init: Init,
) -> Vec<ParamId> {
    (0..heads)
        .map(|h| {
            b.param(
                format!("{path}.{field}{h}"),
                &[d / heads, c / heads],
                d / heads,
                init,
            )
        })
        .collect()
}

/// Feature map to tokens: per-head query projections and one output projection.
#[derive(Clone, Debug)]
pub struct MobileToFormer {
    pub path: String,
    pub query: Vec<ParamId>,
    pub out: Linear,
    pub channels: usize,
    pub token_dim: usize,
    pub heads: usize,
}

impl MobileToFormer {
    /// The output projection starts at zero, so a fresh bridge passes tokens through.
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        channels: usize,
        token_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        check_heads(&format!("{path} channels"), channels, heads)?;
        check_heads(&format!("{path} token dim"), token_dim, heads)?;
        b.with_pillar(Pillar::Bridge, |b| {
            let query = per_head(
                b,
                path,
                "query",
                token_dim,
                channels,
                heads,
                Init::FanIn(1.0),
            );
            let out = Linear::new(
                b,
                &format!("{path}.out"),
                channels,
                token_dim,
                false,
                Init::Zeros,
            );
            Ok(MobileToFormer {
                path: path.to_string(),
                query,
                out,
                channels,
                token_dim,
                heads,
            })
        })
    }

    pub fn num_params(&self) -> usize {
        self.heads * (self.token_dim / self.heads) * (self.channels / self.heads)
            + self.channels * self.token_dim
    }

    /// Returns updated tokens and per-head weights `[N, M, L]` (rows over pixels).
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        z: Var,
    ) -> Result<(Var, AttentionHandle)> {
        let (n, l) = feature_dims(f, x, self.channels, &self.path)?;
        let m = token_count(f, z, n, self.token_dim, &self.path)?;
        let (ch, dh) = (self.channels / self.heads, self.token_dim / self.heads);
        let (mixed, heads) = f.scoped(&self.path, Pillar::Bridge, |f| -> Result<_> {
            let x = f.tape.reshape(x, &[n, self.channels, l])?;
            let mut outs = Vec::with_capacity(self.heads);
            let mut heads = Vec::with_capacity(self.heads);
            for (h, &wq) in self.query.iter().enumerate() {
                let xh = f.tape.narrow(x, 1, h * ch, ch)?;
                let zh = f.tape.narrow(z, 2, h * dh, dh)?;
                let zh = f.tape.reshape(zh, &[1, n * m, dh])?;
                let w = f.p(wq);
                let w = f.tape.reshape(w, &[1, dh, ch])?;
                let q = f.tape.bmm(zh, w, false)?;
                let q = f.tape.reshape(q, &[n, m, ch])?;
                let s = f.tape.bmm(q, xh, false)?;
                let s = f.tape.scale(s, 1.0 / (ch as f64).sqrt())?;
                let a = f.tape.softmax(s, 2)?;
                outs.push(f.tape.bmm(a, xh, true)?);
                heads.push(a);
            }
            Ok((f.tape.concat(&outs, 2)?, heads))
        })?;
        let delta = self.out.forward(f, mixed)?;
        let z = f.scoped(&self.path, Pillar::Bridge, |f| f.tape.add(z, delta))?;
        Ok((z, AttentionHandle { heads }))
    }
}

/// Tokens to feature map: per-head key and value projections, no output projection.
#[derive(Clone, Debug)]
pub struct FormerToMobile {
    pub path: String,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub channels: usize,
    pub token_dim: usize,
    pub heads: usize,
}

impl FormerToMobile {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        channels: usize,
        token_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        check_heads(&format!("{path} channels"), channels, heads)?;
        check_heads(&format!("{path} token dim"), token_dim, heads)?;
        b.with_pillar(Pillar::Bridge, |b| {
            let key = per_head(b, path, "key", token_dim, channels, heads, Init::FanIn(1.0));
            let value = per_head(
                b,
                path,
                "value",
                token_dim,
                channels,
                heads,
                Init::FanIn(1.0),
            );
            Ok(FormerToMobile {
                path: path.to_string(),
                key,
                value,
                channels,
                token_dim,
                heads,
            })
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.heads * (self.token_dim / self.heads) * (self.channels / self.heads)
    }

    /// Returns the updated feature map and per-head weights `[N, L, M]` (rows over tokens).
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        z: Var,
    ) -> Result<(Var, AttentionHandle)> {
        let (n, l) = feature_dims(f, x, self.channels, &self.path)?;
        let m = token_count(f, z, n, self.token_dim, &self.path)?;
        let shape = f.tape.shape(x).to_vec();
        let (ch, dh) = (self.channels / self.heads, self.token_dim / self.heads);
        f.scoped(&self.path, Pillar::Bridge, |f| {
            let x3 = f.tape.reshape(x, &[n, self.channels, l])?;
            let mut outs = Vec::with_capacity(self.heads);
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let xh = f.tape.narrow(x3, 1, h * ch, ch)?;
                let q = f.tape.transpose(xh)?;
                let zh = f.tape.narrow(z, 2, h * dh, dh)?;
                let zh = f.tape.reshape(zh, &[1, n * m, dh])?;
                let project = |f: &mut Forward<T>, id: ParamId| -> Result<Var> {
                    let w = f.p(id);
                    let w = f.tape.reshape(w, &[1, dh, ch])?;
                    let p = f.tape.bmm(zh, w, false)?;
                    f.tape.reshape(p, &[n, m, ch])
                };
                let k = project(f, self.key[h])?;
                let v = project(f, self.value[h])?;
                let s = f.tape.bmm(q, k, true)?;
                let s = f.tape.scale(s, 1.0 / (ch as f64).sqrt())?;
                let a = f.tape.softmax(s, 2)?;
                let o = f.tape.bmm(a, v, false)?;
                outs.push(f.tape.transpose(o)?);
                heads.push(a);
            }
            let mixed = f.tape.concat(&outs, 1)?;
            let mixed = f.tape.reshape(mixed, &shape)?;
            Ok((f.tape.add(x, mixed)?, AttentionHandle { heads }))
        })
    }
}

fn feature_dims<T: Scalar>(
    f: &Forward<T>,
    x: Var,
    channels: usize,
    path: &str,
) -> Result<(usize, usize)> {
    match *f.tape.shape(x) {
        [n, c, h, w] if c == channels => Ok((n, h * w)),
        ref s => Err(Error::invalid(
            "bridge",
            format!("{path}: expected feature map with {channels} channels, got {s:?}"),
        )),
    }
}

fn token_count<T: Scalar>(f: &Forward<T>, z: Var, n: usize, d: usize, path: &str) -> Result<usize> {
    match *f.tape.shape(z) {
        [zn, m, zd] if zn == n && zd == d => Ok(m),
        ref s => Err(Error::invalid(
            "bridge",
            format!("{path}: expected tokens [{n}, M, {d}], got {s:?}"),
        )),
    }
}

/// Direction of a captured attention map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Rows are tokens, normalized over pixels.
    MobileToFormer,
    /// Rows are pixels, normalized over tokens.
    FormerToMobile,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::MobileToFormer => "m2f",
            Direction::FormerToMobile => "f2m",
        }
    }
}

/// Materialized attention weights of one bridge application for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub block: usize,
    pub direction: Direction,
    pub tokens: usize,
    pub height: usize,
    pub width: usize,
    /// `heads` maps, each `M × L` (token-major) regardless of direction.
    pub weights: Vec<Vec<f64>>,
}

impl AttentionRecord {
    /// Reads the weights of image `image` out of a completed forward.
    pub fn capture<T: Scalar>(
        f: &Forward<T>,
        handle: &AttentionHandle,
        block: usize,
        direction: Direction,
        height: usize,
        width: usize,
        image: usize,
    ) -> Result<Self> {
        let l = height * width;
        let mut tokens = 0;
        let mut weights = Vec::with_capacity(handle.heads.len());
        for &a in &handle.heads {
            let shape = f.tape.shape(a);
            let (rows, cols) = (shape[1], shape[2]);
            let m = match direction {
                Direction::MobileToFormer => rows,
                Direction::FormerToMobile => cols,
            };
            if rows * cols != m * l {
                return Err(Error::invalid(
                    "attention",
                    format!("map {shape:?} does not cover {l} pixels"),
                ));
            }
            tokens = m;
            let v = &f.tape.value(a)[image * rows * cols..(image + 1) * rows * cols];
            let map = match direction {
                Direction::MobileToFormer => v.iter().map(|x| x.f64()).collect(),
                Direction::FormerToMobile => (0..m)
                    .flat_map(|t| (0..l).map(move |p| v[p * m + t].f64()))
                    .collect(),
            };
            weights.push(map);
        }
        Ok(AttentionRecord {
            block,
            direction,
            tokens,
            height,
            width,
            weights,
        })
    }

    pub fn heads(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, head: usize, token: usize, y: usize, x: usize) -> f64 {
        self.weights[head][token * self.height * self.width + y * self.width + x]
    }

    /// Sums of each normalized row: per token over pixels (m2f) or per pixel over tokens (f2m).
    pub fn row_sums(&self) -> Vec<f64> {
        let l = self.height * self.width;
        self.weights
            .iter()
            .flat_map(|w| match self.direction {
                Direction::MobileToFormer => (0..self.tokens)
                    .map(|t| w[t * l..(t + 1) * l].iter().sum())
                    .collect::<Vec<f64>>(),
                Direction::FormerToMobile => (0..l)
                    .map(|p| (0..self.tokens).map(|t| w[t * l + p]).sum())
                    .collect(),
            })
            .collect()
    }
}
