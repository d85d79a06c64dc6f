//! Parameter and multiply-add accounting.
//!
//! Multiply-adds come from tracing the model on a shape-only tape: every
//! primitive reports its own cost, attributed to the layer and pillar that
//! issued it. Conventions: one fused multiply-accumulate is one unit;
//! convolutions cost `k²·(Cin/g)·Cout·Hout·Wout`; products `m·k·n`; biases
//! seed the accumulator and are free; elementwise activations, norms, adds
//! and pooling cost one unit per element; dynamic ReLU two (one per
//! branch); softmax three per logit.

use std::collections::BTreeMap;
use std::fmt::{self, Display, Write as _};
use std::str::FromStr;

use crate::arch::Ablation;
use crate::autodiff::{CostEvent, OpKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Forward;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pillar {
    Stem,
    Mobile,
    Former,
    Bridge,
    Head,
}

impl Pillar {
    pub const ALL: [Pillar; 5] = [
        Pillar::Stem,
        Pillar::Mobile,
        Pillar::Former,
        Pillar::Bridge,
        Pillar::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pillar::Stem => "stem",
            Pillar::Mobile => "mobile",
            Pillar::Former => "former",
            Pillar::Bridge => "bridge",
            Pillar::Head => "head",
        }
    }
}

impl Display for Pillar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pillar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pillar::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid("pillar", format!("unknown pillar `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostEntry {
    pub path: String,
    pub pillar: Pillar,
    pub params: u64,
    pub madds: u64,
}

impl CostEntry {
    pub fn to_record(&self) -> String {
        format!(
            "{},{},{},{}",
            self.path, self.pillar, self.params, self.madds
        )
    }

    /// Parses one `path,pillar,params,madds` record.
    pub fn from_record(line: &str) -> Result<Self> {
        let bad = || Error::invalid("cost record", format!("malformed record `{line}`"));
        let mut it = line.split(',');
        let (Some(path), Some(pillar), Some(params), Some(madds), None) =
            (it.next(), it.next(), it.next(), it.next(), it.next())
        else {
            return Err(bad());
        };
        if path.is_empty() || path.contains(char::is_whitespace) {
            return Err(bad());
        }
        Ok(CostEntry {
            path: path.to_string(),
            pillar: pillar.parse()?,
            params: params.parse().map_err(|_| bad())?,
            madds: madds.parse().map_err(|_| bad())?,
        })
    }
}

/// Per-layer parameter and multiply-add counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub input_res: usize,
}

impl CostReport {
    fn entry(
        &mut self,
        index: &mut BTreeMap<(String, Pillar), usize>,
        path: &str,
        pillar: Pillar,
    ) -> &mut CostEntry {
        let key = (path.to_string(), pillar);
        let i = *index.entry(key).or_insert_with(|| {
            self.entries.push(CostEntry {
                path: path.to_string(),
                pillar,
                params: 0,
                madds: 0,
            });
            self.entries.len() - 1
        });
        &mut self.entries[i]
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_madds(&self) -> u64 {
        self.entries.iter().map(|e| e.madds).sum()
    }

    /// `(params, madds)` per pillar; every pillar is present.
    pub fn by_pillar(&self) -> BTreeMap<Pillar, (u64, u64)> {
        let mut out: BTreeMap<Pillar, (u64, u64)> =
            Pillar::ALL.iter().map(|&p| (p, (0, 0))).collect();
        for e in &self.entries {
            let t = out.get_mut(&e.pillar).expect("all pillars present");
            t.0 += e.params;
            t.1 += e.madds;
        }
        out
    }

    pub fn pillar_madds(&self, p: Pillar) -> u64 {
        self.by_pillar()[&p].1
    }

    /// Sum over entries whose path starts with `prefix` followed by `.` or end.
    pub fn under(&self, prefix: &str) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| {
                e.path == prefix
                    || (e.path.starts_with(prefix) && e.path[prefix.len()..].starts_with('.'))
            })
            .fold((0, 0), |(p, m), e| (p + e.params, m + e.madds))
    }

    pub fn to_records(&self) -> String {
        self.entries.iter().map(|e| e.to_record() + "\n").collect()
    }

    pub fn to_table(&self, title: &str) -> String {
        let mut s = String::new();
        let w = self
            .entries
            .iter()
            .map(|e| e.path.len())
            .max()
            .unwrap_or(4)
            .max(5);
        let _ = writeln!(s, "{title} @ {0}x{0}", self.input_res);
        let _ = writeln!(
            s,
            "{:<w$}  {:<6}  {:>12}  {:>14}",
            "layer", "pillar", "params", "madds"
        );
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<w$}  {:<6}  {:>12}  {:>14}",
                e.path, e.pillar, e.params, e.madds
            );
        }
        let _ = writeln!(s, "{}", "-".repeat(w + 40));
        for (p, (params, madds)) in self.by_pillar() {
            let _ = writeln!(s, "{:<w$}  {:<6}  {:>12}  {:>14}", "", p, params, madds);
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:<6}  {:>12}  {:>14}   ({:.2}M params, {:.1}M madds)",
            "total",
            "",
            self.total_params(),
            self.total_madds(),
            self.total_params() as f64 / 1e6,
            self.total_madds() as f64 / 1e6
        );
        s
    }

    fn add_params<T: Scalar>(
        &mut self,
        index: &mut BTreeMap<(String, Pillar), usize>,
        model: &Model<T>,
    ) {
        for p in model.store.iter() {
            self.entry(index, p.layer(), p.pillar).params += p.value.numel() as u64;
        }
    }

    fn add_events(&mut self, index: &mut BTreeMap<(String, Pillar), usize>, events: &[CostEvent]) {
        for e in events {
            self.entry(index, &e.path, e.pillar).madds += e.madds;
        }
    }
}

/// Exact parameter counts (norms, biases, tokens and generators included).
pub fn count_params<T: Scalar>(model: &Model<T>) -> CostReport {
    let mut r = CostReport::default();
    let mut index = BTreeMap::new();
    r.add_params(&mut index, model);
    r
}

/// Traces one `res × res` image through the model and returns its cost events.
pub fn trace<T: Scalar>(model: &Model<T>, res: usize) -> Result<Vec<CostEvent>> {
    let mut f = Forward::counting(&model.store);
    let x = f.tape.placeholder(&[1, 3, res, res]);
    model.forward(&mut f, x)?;
    Ok(f.tape.cost_events().to_vec())
}

pub fn count_madds<T: Scalar>(model: &Model<T>, res: usize) -> Result<CostReport> {
    let mut r = CostReport {
        input_res: res,
        ..Default::default()
    };
    let mut index = BTreeMap::new();
    r.add_events(&mut index, &trace(model, res)?);
    Ok(r)
}

/// Parameters and multiply-adds in one report.
pub fn cost_report<T: Scalar>(model: &Model<T>, res: usize) -> Result<CostReport> {
    let mut r = CostReport {
        input_res: res,
        ..Default::default()
    };
    let mut index = BTreeMap::new();
    r.add_params(&mut index, model);
    r.add_events(&mut index, &trace(model, res)?);
    Ok(r)
}

/// Multiply-adds of the events matching `keep`.
pub fn sum_events(events: &[CostEvent], keep: impl Fn(&CostEvent) -> bool) -> u64 {
    events.iter().filter(|e| keep(e)).map(|e| e.madds).sum()
}

pub fn is_product(e: &CostEvent) -> bool {
    matches!(e.kind, OpKind::Conv2d | OpKind::MatMul)
}

/// Leading-order per-pillar cost expressions of one block, evaluated exactly:
/// Mobile `2LEC² + 9LEC`, Former `M²d + Md²`, each bridge direction `LMC + MdC`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnalyticCost {
    pub mobile: u64,
    pub former: u64,
    pub bridge: u64,
}

pub fn analytic_block_cost(l: u64, c: u64, e: u64, m: u64, d: u64) -> AnalyticCost {
    AnalyticCost {
        mobile: 2 * l * e * c * c + 9 * l * e * c,
        former: m * m * d + m * d * d,
        bridge: l * m * c + m * d * c,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub former: u64,
    pub bridge: u64,
    pub total: u64,
}

impl Budget {
    /// `(former + bridge) / total`.
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        (self.former + self.bridge) as f64 / self.total as f64
    }
}

pub fn budget_report<T: Scalar>(model: &Model<T>, res: usize) -> Result<Budget> {
    let r = count_madds(model, res)?;
    Ok(Budget {
        former: r.pillar_madds(Pillar::Former),
        bridge: r.pillar_madds(Pillar::Bridge),
        total: r.total_madds(),
    })
}

/// Product (convolution and matrix) multiply-adds of one stride-1
/// Mobile-Former block, traced in isolation and split by pillar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MeasuredBlock {
    /// Mobile sub-block convolutions, excluding the activation generator.
    pub mobile: u64,
    pub former: u64,
    pub to_former: u64,
    pub to_mobile: u64,
}

/// Traces a block on an `h × w × channels` map with expansion ratio
/// `expansion`, `tokens × token_dim` tokens and `heads` heads.
pub fn measure_block(
    h: usize,
    w: usize,
    channels: usize,
    expansion: usize,
    tokens: usize,
    token_dim: usize,
    heads: usize,
) -> Result<MeasuredBlock> {
    use crate::blocks::{MobileConfig, MobileFormerBlock, TokenConfig};
    use crate::nn::{Builder, ParamStore};
    use rand::SeedableRng;

    let mut store = ParamStore::<f32>::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut b = Builder {
        store: &mut store,
        rng: &mut rng,
        pillar: Pillar::Mobile,
    };
    let cfg = MobileConfig {
        cin: channels,
        exp: expansion * channels,
        cout: channels,
        kernel: 3,
        groups: 1,
        down: false,
        token_dim: Some(token_dim),
    };
    let tokens_cfg = TokenConfig {
        dim: token_dim,
        heads,
        ffn: true,
        dynamic_relu: true,
    };
    let block = MobileFormerBlock::new(&mut b, "block", 1, cfg, Some(tokens_cfg))?;
    let mut f = Forward::counting(&store);
    let x = f.tape.placeholder(&[1, channels, h, w]);
    let z = f.tape.placeholder(&[1, tokens, token_dim]);
    block.forward(&mut f, x, Some(z))?;
    let ev = f.tape.cost_events();
    let products_under = |prefix: &str| {
        sum_events(ev, |e| {
            is_product(e) && (e.path == prefix || e.path.starts_with(&format!("{prefix}.")))
        })
    };
    Ok(MeasuredBlock {
        mobile: products_under("block.mobile") - products_under("block.mobile.dyrelu"),
        former: products_under("block.former"),
        to_former: products_under("block.to_former"),
        to_mobile: products_under("block.to_mobile"),
    })
}

/// Published totals at 224×224: `(variant, params in millions, multiply-adds in millions)`.
pub const PUBLISHED_COSTS: [(&str, f64, f64); 7] = [
    ("26M", 3.2, 26.0),
    ("52M", 3.5, 52.0),
    ("96M", 4.6, 96.0),
    ("151M", 7.6, 151.0),
    ("214M", 9.4, 214.0),
    ("294M", 11.4, 294.0),
    ("508M", 14.0, 508.0),
];

pub fn published_costs(variant: &str) -> Option<(f64, f64)> {
    let name = crate::arch::canonical_name(variant)?;
    PUBLISHED_COSTS
        .iter()
        .find(|t| t.0 == name)
        .map(|t| (t.1, t.2))
}

/// Published multiply-adds (millions) of single-knob ablations of the 294M model.
pub const ABLATION_COSTS: [(Ablation, f64); 13] = [
    (Ablation::Tokens(1), 269.0),
    (Ablation::Tokens(3), 279.0),
    (Ablation::Tokens(6), 294.0),
    (Ablation::Tokens(9), 309.0),
    (Ablation::TokenDim(64), 277.0),
    (Ablation::TokenDim(128), 284.0),
    (Ablation::TokenDim(192), 294.0),
    (Ablation::TokenDim(256), 308.0),
    (Ablation::TokenDim(320), 325.0),
    (Ablation::NoFfn, 284.0),
    (Ablation::NoFormer, 259.0),
    (Ablation::StaticRelu, 290.0),
    (Ablation::Kernel(5), 332.0),
];

pub fn relative_deviation(measured: f64, target: f64) -> f64 {
    (measured - target) / target
}
