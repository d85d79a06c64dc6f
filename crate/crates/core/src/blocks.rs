//! Composite blocks: the Mobile and Former sub-blocks, the joined
//! Mobile-Former block, the lite bottleneck, the stem, and the classifier.

use crate::autodiff::Var;
use crate::bridge::{FormerToMobile, MobileToFormer};
use crate::cost::Pillar;
use crate::error::{Error, Result};
use crate::nn::{
    AttentionHandle, Builder, ConvBn, DyReluGenerator, FeedForward, Forward, Init, LayerNorm,
    Linear, MultiHeadAttention,
};
use crate::tensor::{Scalar, Tensor};

/// Convolutions of a Mobile sub-block.
#[derive(Clone, Debug)]
pub enum MobileConvs {
    /// Pointwise expand, depthwise, pointwise project.
    Normal {
        expand: ConvBn,
        depthwise: ConvBn,
        project: ConvBn,
    },
    /// Depthwise expand (stride 2), pointwise squeeze, depthwise expand, pointwise project.
    /// The second expansion replicates channels cyclically before its depthwise filter.
    Down {
        dw1: ConvBn,
        pw1: ConvBn,
        dw2: ConvBn,
        pw2: ConvBn,
    },
}

/// Shape and options of one Mobile sub-block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MobileConfig {
    pub cin: usize,
    pub exp: usize,
    pub cout: usize,
    pub kernel: usize,
    pub groups: usize,
    pub down: bool,
    /// Token width conditioning the activations; `None` uses static ReLU.
    pub token_dim: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct MobileSubBlock {
    pub path: String,
    pub config: MobileConfig,
    pub convs: MobileConvs,
    pub activation: Option<DyReluGenerator>,
    pub residual: bool,
}

impl MobileSubBlock {
    pub const GENERATOR_REDUCTION: usize = 4;

    pub fn new<T: Scalar>(b: &mut Builder<T>, path: &str, cfg: MobileConfig) -> Result<Self> {
        let MobileConfig {
            cin,
            exp,
            cout,
            kernel,
            groups,
            down,
            ..
        } = cfg;
        b.with_pillar(Pillar::Mobile, |b| {
            let p = |n: &str| format!("{path}.{n}");
            let he = Init::FanIn(2.0);
            let convs = if down {
                if exp % cin != 0 {
                    return Err(Error::Divisibility {
                        what: format!("{path} depthwise expansion"),
                        value: exp,
                        by: cin,
                    });
                }
                MobileConvs::Down {
                    dw1: ConvBn::new(b, &p("dw1"), cin, exp, kernel, 2, cin, he)?,
                    pw1: ConvBn::new(b, &p("pw1"), exp, cout, 1, 1, groups, he)?,
                    dw2: ConvBn::new(b, &p("dw2"), exp, exp, kernel, 1, exp, he)?,
                    pw2: ConvBn::new(b, &p("pw2"), exp, cout, 1, 1, groups, he)?,
                }
            } else {
                MobileConvs::Normal {
                    expand: ConvBn::new(b, &p("expand"), cin, exp, 1, 1, groups, he)?,
                    depthwise: ConvBn::new(b, &p("depthwise"), exp, exp, kernel, 1, exp, he)?,
                    project: ConvBn::new(b, &p("project"), exp, cout, 1, 1, groups, he)?,
                }
            };
            let activation = cfg.token_dim.map(|d| {
                DyReluGenerator::new(
                    b,
                    &p("dyrelu"),
                    d,
                    (d / Self::GENERATOR_REDUCTION).max(1),
                    exp,
                )
            });
            Ok(MobileSubBlock {
                path: path.to_string(),
                config: cfg,
                convs,
                activation,
                residual: !down && cin == cout,
            })
        })
    }

    fn activate<T: Scalar>(&self, f: &mut Forward<T>, x: Var, coef: Option<Var>) -> Result<Var> {
        match (&self.activation, coef) {
            (Some(gen), Some(c)) => f.scoped(&gen.path, Pillar::Mobile, |f| f.tape.dyrelu(x, c)),
            _ => f.scoped(&self.path, Pillar::Mobile, |f| f.tape.relu(x)),
        }
    }

    /// `token: [N, d]` conditions the dynamic activations; both activation
    /// sites share one set of generated coefficients.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        token: Option<Var>,
    ) -> Result<Var> {
        let coef = match (&self.activation, token) {
            (Some(gen), Some(t)) => Some(gen.coefficients(f, t)?),
            (Some(_), None) => {
                return Err(Error::invalid(
                    "mobile",
                    format!("{}: dynamic activation needs a token", self.path),
                ))
            }
            (None, _) => None,
        };
        let y = match &self.convs {
            MobileConvs::Normal {
                expand,
                depthwise,
                project,
            } => {
                let h = expand.forward(f, x)?;
                let h = self.activate(f, h, coef)?;
                let h = depthwise.forward(f, h)?;
                let h = self.activate(f, h, coef)?;
                project.forward(f, h)?
            }
            MobileConvs::Down { dw1, pw1, dw2, pw2 } => {
                let h = dw1.forward(f, x)?;
                let h = self.activate(f, h, coef)?;
                let h = pw1.forward(f, h)?;
                let h = tile_channels(f, h, self.config.exp)?;
                let h = dw2.forward(f, h)?;
                let h = self.activate(f, h, coef)?;
                pw2.forward(f, h)?
            }
        };
        if self.residual {
            f.scoped(&self.path, Pillar::Mobile, |f| f.tape.add(x, y))
        } else {
            Ok(y)
        }
    }

    /// Last projection of the block; zeroing it makes a residual block the identity.
    pub fn final_conv(&self) -> &ConvBn {
        match &self.convs {
            MobileConvs::Normal { project, .. } => project,
            MobileConvs::Down { pw2, .. } => pw2,
        }
    }

    pub fn conv_count(&self) -> usize {
        match self.convs {
            MobileConvs::Normal { .. } => 3,
            MobileConvs::Down { .. } => 4,
        }
    }
}

/// Post-norm transformer layer over the token set.
#[derive(Clone, Debug)]
pub struct FormerSubBlock {
    pub path: String,
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Option<(FeedForward, LayerNorm)>,
}

impl FormerSubBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        d: usize,
        heads: usize,
        ffn: bool,
    ) -> Result<Self> {
        b.with_pillar(Pillar::Former, |b| {
            let attention = MultiHeadAttention::new(b, &format!("{path}.mha"), d, heads)?;
            let norm1 = LayerNorm::new(b, &format!("{path}.norm1"), d);
            let ffn = ffn.then(|| {
                (
                    FeedForward::new(b, &format!("{path}.ffn"), d),
                    LayerNorm::new(b, &format!("{path}.norm2"), d),
                )
            });
            Ok(FormerSubBlock {
                path: path.to_string(),
                attention,
                norm1,
                ffn,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, z: Var) -> Result<(Var, Vec<Var>)> {
        let (a, weights) = self.attention.forward(f, z)?;
        let z = f.scoped(&self.path, Pillar::Former, |f| f.tape.add(z, a))?;
        let mut z = self.norm1.forward(f, z)?;
        if let Some((ffn, norm2)) = &self.ffn {
            let h = ffn.forward(f, z)?;
            let sum = f.scoped(&self.path, Pillar::Former, |f| f.tape.add(z, h))?;
            z = norm2.forward(f, sum)?;
        }
        Ok((z, weights))
    }
}

/// Attention captured from one Mobile-Former block.
#[derive(Clone, Debug)]
pub struct BlockAttention {
    /// Position among the body layers, starting at 1 for the first layer after the stem.
    pub block: usize,
    pub to_former: AttentionHandle,
    pub to_mobile: AttentionHandle,
    /// Spatial extent read by the local-to-global direction.
    pub input_hw: (usize, usize),
    /// Spatial extent written by the global-to-local direction.
    pub output_hw: (usize, usize),
}

/// Mobile sub-block joined to the token set by the two bridge directions,
/// with the Former sub-block in between. Without a token set the block
/// reduces to its Mobile sub-block.
#[derive(Clone, Debug)]
pub struct MobileFormerBlock {
    pub path: String,
    pub index: usize,
    pub mobile: MobileSubBlock,
    pub global: Option<GlobalPath>,
}

#[derive(Clone, Debug)]
pub struct GlobalPath {
    pub to_former: MobileToFormer,
    pub former: FormerSubBlock,
    pub to_mobile: FormerToMobile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn: bool,
    pub dynamic_relu: bool,
}

impl MobileFormerBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        index: usize,
        mobile: MobileConfig,
        tokens: Option<TokenConfig>,
    ) -> Result<Self> {
        let global = match tokens {
            Some(t) => Some(GlobalPath {
                to_former: MobileToFormer::new(
                    b,
                    &format!("{path}.to_former"),
                    mobile.cin,
                    t.dim,
                    t.heads,
                )?,
                former: FormerSubBlock::new(b, &format!("{path}.former"), t.dim, t.heads, t.ffn)?,
                to_mobile: FormerToMobile::new(
                    b,
                    &format!("{path}.to_mobile"),
                    mobile.cout,
                    t.dim,
                    t.heads,
                )?,
            }),
            None => None,
        };
        let mobile = MobileSubBlock::new(b, &format!("{path}.mobile"), mobile)?;
        Ok(MobileFormerBlock {
            path: path.to_string(),
            index,
            mobile,
            global,
        })
    }

    /// Runs the block on `x: [N, C, h, w]` and tokens `z: [N, M, d]`.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        z: Option<Var>,
    ) -> Result<(Var, Option<Var>, Option<BlockAttention>)> {
        let (Some(g), Some(z)) = (&self.global, z) else {
            return Ok((self.mobile.forward(f, x, None)?, z, None));
        };
        let input_hw = spatial(f, x);
        let (z, to_former) = g.to_former.forward(f, x, z)?;
        let (z, _) = g.former.forward(f, z)?;
        let token = if self.mobile.activation.is_some() {
            let n = f.tape.shape(z)[0];
            let d = f.tape.shape(z)[2];
            let first = f.tape.narrow(z, 1, 0, 1)?;
            Some(f.tape.reshape(first, &[n, d])?)
        } else {
            None
        };
        let hidden = self.mobile.forward(f, x, token)?;
        let output_hw = spatial(f, hidden);
        let (x, to_mobile) = g.to_mobile.forward(f, hidden, z)?;
        let attn = BlockAttention {
            block: self.index,
            to_former,
            to_mobile,
            input_hw,
            output_hw,
        };
        Ok((x, Some(z), Some(attn)))
    }
}

/// Repeats the channels of `x` cyclically until there are `channels` of them.
pub fn tile_channels<T: Scalar>(f: &mut Forward<T>, x: Var, channels: usize) -> Result<Var> {
    let c = f.tape.shape(x)[1];
    if c == channels {
        return Ok(x);
    }
    let mut parts = vec![x; channels / c];
    if !channels.is_multiple_of(c) {
        parts.push(f.tape.narrow(x, 1, 0, channels % c)?);
    }
    f.tape.concat(&parts, 1)
}

fn spatial<T: Scalar>(f: &Forward<T>, x: Var) -> (usize, usize) {
    let s = f.tape.shape(x);
    (s[2], s[3])
}

/// Depthwise expansion followed by a pointwise squeeze.
#[derive(Clone, Debug)]
pub struct LiteBottleneck {
    pub path: String,
    pub depthwise: ConvBn,
    pub project: ConvBn,
}

impl LiteBottleneck {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        cin: usize,
        exp: usize,
        cout: usize,
        stride: usize,
        kernel: usize,
        groups: usize,
    ) -> Result<Self> {
        if !exp.is_multiple_of(cin) {
            return Err(Error::Divisibility {
                what: format!("{path} depthwise expansion"),
                value: exp,
                by: cin,
            });
        }
        b.with_pillar(Pillar::Mobile, |b| {
            Ok(LiteBottleneck {
                path: path.to_string(),
                depthwise: ConvBn::new(
                    b,
                    &format!("{path}.depthwise"),
                    cin,
                    exp,
                    kernel,
                    stride,
                    cin,
                    Init::FanIn(2.0),
                )?,
                project: ConvBn::new(
                    b,
                    &format!("{path}.project"),
                    exp,
                    cout,
                    1,
                    1,
                    groups,
                    Init::FanIn(2.0),
                )?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let h = self.depthwise.forward(f, x)?;
        let h = f.scoped(&self.path, Pillar::Mobile, |f| f.tape.hswish(h))?;
        self.project.forward(f, h)
    }
}

/// Convolution, batch norm and h-swish; used for the stem and the final 1×1 expansion.
#[derive(Clone, Debug)]
pub struct ConvAct {
    pub conv: ConvBn,
}

impl ConvAct {
    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(f, x)?;
        f.scoped(&self.conv.path, self.conv.pillar, |f| f.tape.hswish(h))
    }
}

pub fn stem<T: Scalar>(b: &mut Builder<T>, path: &str, cout: usize) -> Result<ConvAct> {
    b.with_pillar(Pillar::Stem, |b| {
        Ok(ConvAct {
            conv: ConvBn::new(b, path, 3, cout, 3, 2, 1, Init::FanIn(2.0))?,
        })
    })
}

pub fn pointwise<T: Scalar>(
    b: &mut Builder<T>,
    path: &str,
    cin: usize,
    cout: usize,
    groups: usize,
) -> Result<ConvAct> {
    b.with_pillar(Pillar::Mobile, |b| {
        Ok(ConvAct {
            conv: ConvBn::new(b, path, cin, cout, 1, 1, groups, Init::FanIn(2.0))?,
        })
    })
}

/// Global average pool, optional first-token concatenation, two linear layers.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub path: String,
    pub hidden: Linear,
    pub logits: Linear,
    pub channels: usize,
    pub token_dim: Option<usize>,
}

impl ClassifierHead {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        channels: usize,
        token_dim: Option<usize>,
        hidden: usize,
        classes: usize,
    ) -> Self {
        b.with_pillar(Pillar::Head, |b| {
            let inp = channels + token_dim.unwrap_or(0);
            ClassifierHead {
                path: path.to_string(),
                hidden: Linear::new(
                    b,
                    &format!("{path}.fc1"),
                    inp,
                    hidden,
                    true,
                    Init::FanIn(2.0),
                ),
                logits: Linear::new(
                    b,
                    &format!("{path}.fc2"),
                    hidden,
                    classes,
                    true,
                    Init::FanIn(1.0),
                ),
                channels,
                token_dim,
            }
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var, z: Option<Var>) -> Result<Var> {
        let feats = f.scoped(&self.path, Pillar::Head, |f| -> Result<Var> {
            let s = f.tape.shape(x).to_vec();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let pooled = f.tape.avgpool2d(x, h, w)?;
            let pooled = f.tape.reshape(pooled, &[n, c])?;
            match (self.token_dim, z) {
                (Some(d), Some(z)) => {
                    let first = f.tape.narrow(z, 1, 0, 1)?;
                    let first = f.tape.reshape(first, &[n, d])?;
                    f.tape.concat(&[pooled, first], 1)
                }
                (None, _) => Ok(pooled),
                (Some(_), None) => Err(Error::invalid(
                    "head",
                    "token concatenation needs a token set",
                )),
            }
        })?;
        let h = self.hidden.forward(f, feats)?;
        let h = f.scoped(&self.hidden.path, Pillar::Head, |f| f.tape.hswish(h))?;
        let h = match f.dropout.as_mut() {
            Some((p, rng)) if *p > 0.0 => {
                let p = *p;
                let shape = f.tape.shape(h).to_vec();
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<T> = (0..crate::tensor::numel(&shape))
                    .map(|_| {
                        if rand::Rng::gen::<f64>(rng) < p {
                            T::zero()
                        } else {
                            T::c(keep)
                        }
                    })
                    .collect();
                let mask = f.tape.constant(Tensor::new(&shape, mask)?);
                f.scoped(&self.hidden.path, Pillar::Head, |f| f.tape.mul(h, mask))?
            }
            _ => h,
        };
        self.logits.forward(f, h)
    }
}
