//! Declarative architecture descriptions, their text format, and the
//! published variants.
//!
//! A spec file is a line-oriented table:
//!
//! ```text
//! name=294M
//! tokens=6x192
//! heads=2
//! classes=1000
//! stem stem 224x224x3 - 16 2
//! 1 bneck-lite 112x112x16 32 16 1
//! 2 mf-down 112x112x16 96 24 2 k=3
//! ...
//! head head 7x7x1152 - 1920 1
//! ```
//!
//! Optional headers `ffn=`, `former=` and `dyrelu=` (`on`/`off`) switch off
//! parts of the block for ablations. `#` starts a comment. For the `head`
//! row, `out` is the width of the hidden classifier layer.

use std::fmt::{self, Display, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Stem,
    LiteBottleneck,
    MobileFormer,
    MobileFormerDown,
    Pointwise,
    Head,
}

impl BlockKind {
    pub const ALL: [BlockKind; 6] = [
        BlockKind::Stem,
        BlockKind::LiteBottleneck,
        BlockKind::MobileFormer,
        BlockKind::MobileFormerDown,
        BlockKind::Pointwise,
        BlockKind::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Stem => "stem",
            BlockKind::LiteBottleneck => "bneck-lite",
            BlockKind::MobileFormer => "mf",
            BlockKind::MobileFormerDown => "mf-down",
            BlockKind::Pointwise => "conv1x1",
            BlockKind::Head => "head",
        }
    }

    pub fn is_mobile_former(self) -> bool {
        matches!(self, BlockKind::MobileFormer | BlockKind::MobileFormerDown)
    }

    fn has_exp(self) -> bool {
        matches!(
            self,
            BlockKind::LiteBottleneck | BlockKind::MobileFormer | BlockKind::MobileFormerDown
        )
    }
}

impl Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown block kind `{s}`"))
    }
}

/// Spatial extent and channel count `h × w × c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Resolution {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Resolution {
            height,
            width,
            channels,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split('x').collect();
        let [h, w, c] = parts[..] else {
            return Err(format!("expected HxWxC, got `{s}`"));
        };
        let num = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| format!("`{t}` is not a positive integer in `{s}`"))
        };
        Ok(Resolution::new(num(h)?, num(w)?, num(c)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    /// `stem`, `head`, or a stage number.
    pub stage: String,
    pub kind: BlockKind,
    pub input: Resolution,
    pub exp: Option<usize>,
    pub out: usize,
    pub stride: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl BlockSpec {
    pub fn new(
        stage: &str,
        kind: BlockKind,
        input: Resolution,
        exp: Option<usize>,
        out: usize,
        stride: usize,
    ) -> Self {
        BlockSpec {
            stage: stage.to_string(),
            kind,
            input,
            exp,
            out,
            stride,
            kernel: 3,
            groups: 1,
        }
    }

    /// Resolution produced by this block (the head keeps its input).
    pub fn output(&self) -> Resolution {
        if self.kind == BlockKind::Head {
            return self.input;
        }
        // Odd kernels padded by k/2 give ceil(x / stride).
        let down = |x: usize| (x - 1) / self.stride + 1;
        Resolution::new(down(self.input.height), down(self.input.width), self.out)
    }

    /// `(cin, cout)` of every pointwise convolution in the block.
    pub fn pointwise_pairs(&self) -> Vec<(usize, usize)> {
        let (c, o) = (self.input.channels, self.out);
        match (self.kind, self.exp) {
            (BlockKind::LiteBottleneck, Some(e)) => vec![(e, o)],
            (BlockKind::MobileFormer, Some(e)) => vec![(c, e), (e, o)],
            (BlockKind::MobileFormerDown, Some(e)) => vec![(e, o), (e, o)],
            (BlockKind::Pointwise, _) => vec![(c, o)],
            _ => Vec::new(),
        }
    }

    fn line(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {} {}",
            self.stage,
            self.kind,
            self.input,
            self.exp.map_or_else(|| "-".to_string(), |e| e.to_string()),
            self.out,
            self.stride
        );
        if self.kernel != 3 {
            let _ = write!(s, " k={}", self.kernel);
        }
        if self.groups != 1 {
            let _ = write!(s, " g={}", self.groups);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    pub tokens: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub classes: usize,
    pub ffn: bool,
    pub former: bool,
    pub dynamic_relu: bool,
    pub blocks: Vec<BlockSpec>,
}

fn semantic(field: &str, msg: impl Into<String>) -> Error {
    Error::Semantic {
        field: field.to_string(),
        msg: msg.into(),
    }
}

impl ModelSpec {
    pub fn input(&self) -> Resolution {
        self.blocks
            .first()
            .map_or(Resolution::new(0, 0, 0), |b| b.input)
    }

    pub fn head(&self) -> &BlockSpec {
        self.blocks.last().expect("validated spec ends with a head")
    }

    pub fn mobile_former_blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.blocks.iter().filter(|b| b.kind.is_mobile_former())
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(char::is_whitespace) {
            return Err(semantic("name", "must be a non-empty word"));
        }
        if self.tokens == 0 || self.token_dim == 0 {
            return Err(semantic("tokens", "token count and width must be positive"));
        }
        if self.heads == 0 {
            return Err(semantic("heads", "must be positive"));
        }
        if !self.token_dim.is_multiple_of(self.heads) {
            return Err(semantic(
                "tokens",
                format!(
                    "token width {} is not divisible by heads={}",
                    self.token_dim, self.heads
                ),
            ));
        }
        if self.classes < 2 {
            return Err(semantic("classes", "need at least two classes"));
        }
        if self.dynamic_relu && !self.former {
            return Err(semantic(
                "dyrelu",
                "dynamic activations are conditioned on tokens and need the former",
            ));
        }
        let (Some(first), Some(last)) = (self.blocks.first(), self.blocks.last()) else {
            return Err(semantic("kind", "no blocks"));
        };
        if first.kind != BlockKind::Stem {
            return Err(semantic("kind", "first block must be the stem"));
        }
        if last.kind != BlockKind::Head {
            return Err(semantic("kind", "last block must be the head"));
        }
        let mut expected: Option<Resolution> = None;
        for (i, b) in self.blocks.iter().enumerate() {
            let at = |msg: String| format!("block {} ({} {}): {msg}", i + 1, b.stage, b.kind);
            if (b.kind == BlockKind::Stem) != (i == 0)
                || (b.kind == BlockKind::Head) != (i + 1 == self.blocks.len())
            {
                return Err(semantic(
                    "kind",
                    at("stem and head must appear exactly once, first and last".into()),
                ));
            }
            if !(b.stage == "stem" || b.stage == "head" || b.stage.parse::<usize>().is_ok()) {
                return Err(semantic(
                    "stage",
                    at(format!("`{}` is not stem, head or a number", b.stage)),
                ));
            }
            if b.stride != 1 && b.stride != 2 {
                return Err(semantic(
                    "stride",
                    at(format!("must be 1 or 2, got {}", b.stride)),
                ));
            }
            if b.kernel != 3 && b.kernel != 5 {
                return Err(semantic(
                    "k",
                    at(format!("kernel must be 3 or 5, got {}", b.kernel)),
                ));
            }
            if b.groups == 0 {
                return Err(semantic("g", at("groups must be positive".into())));
            }
            if b.input.height == 0 || b.input.width == 0 || b.input.channels == 0 || b.out == 0 {
                return Err(semantic("in", at("extents must be positive".into())));
            }
            if let Some(e) = expected {
                if e != b.input {
                    return Err(semantic(
                        "in",
                        at(format!("expected input {e}, got {}", b.input)),
                    ));
                }
            }
            match (b.kind.has_exp(), b.exp) {
                (true, None) => return Err(semantic("exp", at("expansion size required".into()))),
                (false, Some(_)) => {
                    return Err(semantic("exp", at("expansion size not allowed".into())))
                }
                (true, Some(e)) => {
                    if e < b.out {
                        return Err(semantic(
                            "exp",
                            at(format!("expansion {e} below output {}", b.out)),
                        ));
                    }
                    if b.kind != BlockKind::MobileFormer && e % b.input.channels != 0 {
                        return Err(semantic(
                            "exp",
                            at(format!(
                                "depthwise expansion {e} is not divisible by input channels {}",
                                b.input.channels
                            )),
                        ));
                    }
                }
                (false, None) => {}
            }
            match b.kind {
                BlockKind::Stem if b.input.channels != 3 => {
                    return Err(semantic("in", at("stem expects 3 input channels".into())));
                }
                BlockKind::MobileFormer if b.stride != 1 => {
                    return Err(semantic(
                        "stride",
                        at("mf blocks keep resolution; use mf-down".into()),
                    ));
                }
                BlockKind::MobileFormerDown if b.stride != 2 => {
                    return Err(semantic(
                        "stride",
                        at("mf-down blocks have stride 2".into()),
                    ));
                }
                BlockKind::MobileFormerDown
                    if b.input.height % 2 != 0 || b.input.width % 2 != 0 =>
                {
                    return Err(semantic(
                        "in",
                        at(format!("odd spatial extent {}", b.input)),
                    ));
                }
                BlockKind::Head if b.stride != 1 || b.groups != 1 || b.kernel != 3 => {
                    return Err(semantic(
                        "stride",
                        at("head takes no stride, kernel or groups".into()),
                    ));
                }
                _ => {}
            }
            if b.kind.is_mobile_former() && self.former {
                if b.input.channels % self.heads != 0 {
                    return Err(semantic(
                        "in",
                        at(format!(
                            "{} channels are not divisible by heads={}",
                            b.input.channels, self.heads
                        )),
                    ));
                }
                if b.out % self.heads != 0 {
                    return Err(semantic(
                        "out",
                        at(format!(
                            "{} channels are not divisible by heads={}",
                            b.out, self.heads
                        )),
                    ));
                }
            }
            if b.groups > 1 {
                for (ci, co) in b.pointwise_pairs() {
                    if ci % b.groups != 0 || co % b.groups != 0 {
                        return Err(semantic(
                            "g",
                            at(format!("groups {} do not divide {ci}->{co}", b.groups)),
                        ));
                    }
                }
            }
            expected = Some(b.output());
        }
        Ok(())
    }

    /// Canonical text form: fixed header order, single-space separated rows.
    pub fn serialize(&self) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mut s = String::new();
        let _ = writeln!(s, "name={}", self.name);
        let _ = writeln!(s, "tokens={}x{}", self.tokens, self.token_dim);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "classes={}", self.classes);
        let _ = writeln!(s, "ffn={}", onoff(self.ffn));
        let _ = writeln!(s, "former={}", onoff(self.former));
        let _ = writeln!(s, "dyrelu={}", onoff(self.dynamic_relu));
        for b in &self.blocks {
            let _ = writeln!(s, "{}", b.line());
        }
        s
    }

    // ---- ablation knobs ---------------------------------------------------

    pub fn with_tokens(mut self, tokens: usize) -> Self {
        self.tokens = tokens;
        self.name = format!("{}-m{tokens}", self.name);
        self
    }

    pub fn with_token_dim(mut self, dim: usize) -> Self {
        self.token_dim = dim;
        self.name = format!("{}-d{dim}", self.name);
        self
    }

    pub fn without_ffn(mut self) -> Self {
        self.ffn = false;
        self.name = format!("{}-noffn", self.name);
        self
    }

    /// Depthwise kernel size in every Mobile-Former block.
    pub fn with_kernel(mut self, kernel: usize) -> Self {
        for b in self.blocks.iter_mut().filter(|b| b.kind.is_mobile_former()) {
            b.kernel = kernel;
        }
        self.name = format!("{}-k{kernel}", self.name);
        self
    }

    /// Plain Mobile network: no tokens, bridges or Former, static ReLU.
    pub fn without_former(mut self) -> Self {
        self.former = false;
        self.dynamic_relu = false;
        self.name = format!("{}-noformer", self.name);
        self
    }

    pub fn with_static_relu(mut self) -> Self {
        self.dynamic_relu = false;
        self.name = format!("{}-relu", self.name);
        self
    }

    /// Applies `groups` to every 1×1 convolution.
    pub fn with_pointwise_groups(mut self, groups: usize) -> Self {
        for b in &mut self.blocks {
            if !b.pointwise_pairs().is_empty() {
                b.groups = groups;
            }
        }
        self
    }
}

/// One change applied to a base spec for an ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Tokens(usize),
    TokenDim(usize),
    NoFfn,
    Kernel(usize),
    NoFormer,
    StaticRelu,
}

impl Ablation {
    pub fn apply(self, spec: ModelSpec) -> ModelSpec {
        match self {
            Ablation::Tokens(m) => spec.with_tokens(m),
            Ablation::TokenDim(d) => spec.with_token_dim(d),
            Ablation::NoFfn => spec.without_ffn(),
            Ablation::Kernel(k) => spec.with_kernel(k),
            Ablation::NoFormer => spec.without_former(),
            Ablation::StaticRelu => spec.with_static_relu(),
        }
    }
}

impl Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::Tokens(m) => write!(f, "tokens={m}"),
            Ablation::TokenDim(d) => write!(f, "token-dim={d}"),
            Ablation::NoFfn => f.write_str("no-ffn"),
            Ablation::Kernel(k) => write!(f, "kernel={k}"),
            Ablation::NoFormer => f.write_str("no-former"),
            Ablation::StaticRelu => f.write_str("static-relu"),
        }
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_spec(s)
    }
}

// ---- parsing -----------------------------------------------------------------

fn syntax(line: usize, column: usize, msg: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        column,
        msg: msg.into(),
    }
}

/// Whitespace-separated tokens with their 1-based columns.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s, &line[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out.into_iter()
        .map(|(byte, t)| (line[..byte].chars().count() + 1, t))
        .collect()
}

pub fn parse_spec(text: &str) -> Result<ModelSpec> {
    let mut name = None;
    let mut token_set = None;
    let mut heads = None;
    let mut classes = None;
    let (mut ffn, mut former, mut dynamic_relu) = (true, true, true);
    let mut blocks = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.split('#').next().unwrap_or("");
        let toks = tokens(line);
        let Some(&(col, first)) = toks.first() else {
            continue;
        };

        if let Some((key, value)) = first.split_once('=') {
            if toks.len() > 1 {
                return Err(syntax(ln, toks[1].0, "unexpected text after header"));
            }
            let vcol = col + key.chars().count() + 1;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| syntax(ln, vcol, format!("`{v}` is not an integer")))
            };
            let flag = |v: &str| match v {
                "on" => Ok(true),
                "off" => Ok(false),
                _ => Err(syntax(ln, vcol, format!("expected on or off, got `{v}`"))),
            };
            match key {
                "name" if !value.is_empty() => name = Some(value.to_string()),
                "name" => return Err(syntax(ln, vcol, "empty name")),
                "tokens" => {
                    let (m, d) = value
                        .split_once('x')
                        .ok_or_else(|| syntax(ln, vcol, format!("expected MxD, got `{value}`")))?;
                    token_set = Some((num(m)?, num(d)?));
                }
                "heads" => heads = Some(num(value)?),
                "classes" => classes = Some(num(value)?),
                "ffn" => ffn = flag(value)?,
                "former" => former = flag(value)?,
                "dyrelu" => dynamic_relu = flag(value)?,
                _ => return Err(syntax(ln, col, format!("unknown header `{key}`"))),
            }
            continue;
        }

        if toks.len() < 6 {
            let c = toks.last().map_or(col, |(c, t)| c + t.chars().count());
            return Err(syntax(
                ln,
                c,
                format!("expected at least 6 fields, found {}", toks.len()),
            ));
        }
        let field = |i: usize| toks[i];
        let num = |i: usize| {
            let (c, t) = field(i);
            t.parse::<usize>()
                .map_err(|_| syntax(ln, c, format!("`{t}` is not an integer")))
        };
        let kind = field(1)
            .1
            .parse::<BlockKind>()
            .map_err(|msg| syntax(ln, field(1).0, msg))?;
        let input = field(2)
            .1
            .parse::<Resolution>()
            .map_err(|msg| syntax(ln, field(2).0, msg))?;
        let exp = match field(3).1 {
            "-" => None,
            _ => Some(num(3)?),
        };
        let mut b = BlockSpec::new(field(0).1, kind, input, exp, num(4)?, num(5)?);
        for &(c, t) in &toks[6..] {
            let (key, value) = t
                .split_once('=')
                .ok_or_else(|| syntax(ln, c, format!("expected key=value, got `{t}`")))?;
            let v = value.parse::<usize>().map_err(|_| {
                syntax(
                    ln,
                    c + key.len() + 1,
                    format!("`{value}` is not an integer"),
                )
            })?;
            match key {
                "k" => b.kernel = v,
                "g" => b.groups = v,
                _ => return Err(syntax(ln, c, format!("unknown option `{key}`"))),
            }
        }
        blocks.push(b);
    }

    let missing = |f: &str| semantic(f, "missing header");
    let (tokens, token_dim) = token_set.ok_or_else(|| missing("tokens"))?;
    let spec = ModelSpec {
        name: name.ok_or_else(|| missing("name"))?,
        tokens,
        token_dim,
        heads: heads.ok_or_else(|| missing("heads"))?,
        classes: classes.ok_or_else(|| missing("classes"))?,
        ffn,
        former,
        dynamic_relu,
        blocks,
    };
    spec.validate()?;
    Ok(spec)
}

// ---- published variants ----------------------------------------------------------

/// Body rows `(kind, exp, out, stride)`, stage 1 through the final 1×1 conv.
struct Variant {
    tokens: (usize, usize),
    stem: usize,
    fc: usize,
    stages: &'static [(&'static str, BlockKind, Option<usize>, usize, usize)],
}

use BlockKind::{
    LiteBottleneck as Lite, MobileFormer as Mf, MobileFormerDown as Down, Pointwise as Pw,
};

const V508: Variant = Variant {
    tokens: (6, 192),
    stem: 24,
    fc: 1920,
    stages: &[
        ("1", Lite, Some(48), 24, 1),
        ("2", Down, Some(144), 40, 2),
        ("2", Mf, Some(120), 40, 1),
        ("3", Down, Some(240), 72, 2),
        ("3", Mf, Some(216), 72, 1),
        ("4", Down, Some(432), 128, 2),
        ("4", Mf, Some(512), 128, 1),
        ("4", Mf, Some(768), 176, 1),
        ("4", Mf, Some(1056), 176, 1),
        ("5", Down, Some(1056), 240, 2),
        ("5", Mf, Some(1440), 240, 1),
        ("5", Mf, Some(1440), 240, 1),
        ("5", Pw, None, 1440, 1),
    ],
};

const V294: Variant = Variant {
    tokens: (6, 192),
    stem: 16,
    fc: 1920,
    stages: &[
        ("1", Lite, Some(32), 16, 1),
        ("2", Down, Some(96), 24, 2),
        ("2", Mf, Some(96), 24, 1),
        ("3", Down, Some(144), 48, 2),
        ("3", Mf, Some(192), 48, 1),
        ("4", Down, Some(288), 96, 2),
        ("4", Mf, Some(384), 96, 1),
        ("4", Mf, Some(576), 128, 1),
        ("4", Mf, Some(768), 128, 1),
        ("5", Down, Some(768), 192, 2),
        ("5", Mf, Some(1152), 192, 1),
        ("5", Mf, Some(1152), 192, 1),
        ("5", Pw, None, 1152, 1),
    ],
};

const V214: Variant = Variant {
    tokens: (6, 192),
    stem: 12,
    fc: 1600,
    stages: &[
        ("1", Lite, Some(24), 12, 1),
        ("2", Down, Some(72), 20, 2),
        ("2", Mf, Some(60), 20, 1),
        ("3", Down, Some(120), 40, 2),
        ("3", Mf, Some(160), 40, 1),
        ("4", Down, Some(240), 80, 2),
        ("4", Mf, Some(320), 80, 1),
        ("4", Mf, Some(480), 112, 1),
        ("4", Mf, Some(672), 112, 1),
        ("5", Down, Some(672), 160, 2),
        ("5", Mf, Some(960), 160, 1),
        ("5", Mf, Some(960), 160, 1),
        ("5", Pw, None, 960, 1),
    ],
};

const V151: Variant = Variant {
    tokens: (6, 192),
    stem: 12,
    fc: 1280,
    stages: &[
        ("1", Lite, Some(24), 12, 1),
        ("2", Down, Some(72), 16, 2),
        ("2", Mf, Some(48), 16, 1),
        ("3", Down, Some(96), 32, 2),
        ("3", Mf, Some(96), 32, 1),
        ("4", Down, Some(192), 64, 2),
        ("4", Mf, Some(256), 64, 1),
        ("4", Mf, Some(384), 88, 1),
        ("4", Mf, Some(528), 88, 1),
        ("5", Down, Some(528), 128, 2),
        ("5", Mf, Some(768), 128, 1),
        ("5", Mf, Some(768), 128, 1),
        ("5", Pw, None, 768, 1),
    ],
};

const V96: Variant = Variant {
    tokens: (4, 128),
    stem: 12,
    fc: 1280,
    stages: &[
        ("1", Lite, Some(24), 12, 1),
        ("2", Down, Some(72), 16, 2),
        ("3", Down, Some(96), 32, 2),
        ("3", Mf, Some(96), 32, 1),
        ("4", Down, Some(192), 64, 2),
        ("4", Mf, Some(256), 64, 1),
        ("4", Mf, Some(384), 88, 1),
        ("5", Down, Some(528), 128, 2),
        ("5", Mf, Some(768), 128, 1),
        ("5", Pw, None, 768, 1),
    ],
};

const V52: Variant = Variant {
    tokens: (3, 128),
    stem: 8,
    fc: 1024,
    stages: &[
        ("2", Lite, Some(24), 12, 2),
        ("2", Mf, Some(36), 12, 1),
        ("3", Down, Some(72), 24, 2),
        ("3", Mf, Some(72), 24, 1),
        ("4", Down, Some(144), 48, 2),
        ("4", Mf, Some(192), 48, 1),
        ("4", Mf, Some(288), 64, 1),
        ("5", Down, Some(384), 96, 2),
        ("5", Mf, Some(576), 96, 1),
        ("5", Pw, None, 576, 1),
    ],
};

pub const BUILTIN_NAMES: [&str; 7] = ["26M", "52M", "96M", "151M", "214M", "294M", "508M"];

fn assemble(name: &str, v: &Variant, res: usize, classes: usize) -> ModelSpec {
    let mut blocks = vec![BlockSpec::new(
        "stem",
        BlockKind::Stem,
        Resolution::new(res, res, 3),
        None,
        v.stem,
        2,
    )];
    for &(stage, kind, exp, out, stride) in v.stages {
        let input = blocks.last().expect("stem").output();
        blocks.push(BlockSpec::new(stage, kind, input, exp, out, stride));
    }
    let input = blocks.last().expect("body").output();
    blocks.push(BlockSpec::new(
        "head",
        BlockKind::Head,
        input,
        None,
        v.fc,
        1,
    ));
    ModelSpec {
        name: name.to_string(),
        tokens: v.tokens.0,
        token_dim: v.tokens.1,
        heads: 2,
        classes,
        ffn: true,
        former: true,
        dynamic_relu: true,
        blocks,
    }
}

/// Normalizes `294m`, `mobile-former-294M`, ... to `294M`.
pub fn canonical_name(name: &str) -> Option<&'static str> {
    let n = name.trim().to_ascii_uppercase();
    let n = n.strip_prefix("MOBILE-FORMER-").unwrap_or(&n);
    BUILTIN_NAMES.into_iter().find(|b| *b == n)
}

/// One of the seven published variants at 224×224 with 1000 classes.
pub fn builtin_spec(name: &str) -> Result<ModelSpec> {
    let name = canonical_name(name).ok_or_else(|| Error::UnknownVariant(name.to_string()))?;
    let spec = match name {
        "26M" => {
            let mut s = assemble("26M", &V52, 224, 1000).with_pointwise_groups(4);
            s.name = "26M".into();
            s
        }
        "52M" => assemble(name, &V52, 224, 1000),
        "96M" => assemble(name, &V96, 224, 1000),
        "151M" => assemble(name, &V151, 224, 1000),
        "214M" => assemble(name, &V214, 224, 1000),
        "294M" => assemble(name, &V294, 224, 1000),
        "508M" => assemble(name, &V508, 224, 1000),
        _ => unreachable!("canonical names are exhaustive"),
    };
    spec.validate()?;
    Ok(spec)
}

/// Two Mobile-Former blocks at 16×16 for tests and toy training.
pub fn tiny_spec(classes: usize) -> ModelSpec {
    let text = format!(
        "name=tiny\ntokens=3x16\nheads=2\nclasses={classes}\n\
         stem stem 16x16x3 - 8 2\n\
         1 mf-down 8x8x8 24 12 2\n\
         2 mf 4x4x12 36 12 1\n\
         3 conv1x1 4x4x12 - 32 1\n\
         head head 4x4x32 - 32 1\n"
    );
    parse_spec(&text).expect("tiny spec is valid")
}
