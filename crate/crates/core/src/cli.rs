//! Command-line front end.
//!
//! [`run`] never exits the process; it returns a [`CommandResult`] whose
//! exit code is 0 on success, 1 when a check fails and 2 for usage or spec
//! errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::arch::{
    builtin_spec, canonical_name, parse_spec, tiny_spec, Ablation, ModelSpec, BUILTIN_NAMES,
};
use crate::cost::{cost_report, published_costs, relative_deviation, Pillar, ABLATION_COSTS};
use crate::error::{Error, Result};
use crate::gradcheck::check_model;
use crate::model::build_model;
use crate::train::{export_attention, synthetic_image, train_toy, ToyConfig};

/// Environment variable naming the directory for outputs written without `--out`.
pub const OUT_DIR_ENV: &str = "MOBILE_FORMER_OUT";

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandResult {
    pub code: i32,
    pub report: String,
    pub output: Option<PathBuf>,
}

impl CommandResult {
    fn ok(report: String) -> Self {
        CommandResult {
            code: 0,
            report,
            output: None,
        }
    }

    fn verdict(passed: bool, report: String) -> Self {
        CommandResult {
            code: if passed { 0 } else { 1 },
            report,
            output: None,
        }
    }

    fn written(mut self, path: Option<PathBuf>) -> Self {
        self.output = path;
        self
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "mobile-former",
    about = "Build, cost, check and train Mobile-Former networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer and per-pillar parameter and multiply-add report.
    Summarize {
        /// Builtin variant name, `tiny`, or path to a spec file.
        spec: String,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare builtin variants against the published cost table.
    VerifyCosts {
        #[arg(long, default_value = "all")]
        variant: String,
        #[arg(long, default_value_t = 0.05)]
        tol: f64,
    },
    /// Apply ablation knobs to a builtin variant and report its cost.
    Ablate(AblateArgs),
    /// Finite-difference gradient check in 64-bit.
    Gradcheck {
        /// Check the tiny two-block model (the only suite available).
        #[arg(long)]
        tiny: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on synthetic data and write a metrics log.
    TrainToy {
        #[arg(long, default_value = "tiny")]
        spec: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump attention maps of every block for one synthetic image.
    ExportAttention {
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, default_value = "294M")]
    base: String,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    token_dim: Option<usize>,
    #[arg(long)]
    no_ffn: bool,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    no_former: bool,
    #[arg(long)]
    static_relu: bool,
    #[arg(long, default_value_t = 0.05)]
    tol: f64,
}

impl AblateArgs {
    fn knobs(&self) -> Vec<Ablation> {
        let mut k = Vec::new();
        k.extend(self.tokens.map(Ablation::Tokens));
        k.extend(self.token_dim.map(Ablation::TokenDim));
        if self.no_ffn {
            k.push(Ablation::NoFfn);
        }
        k.extend(self.kernel.map(Ablation::Kernel));
        if self.no_former {
            k.push(Ablation::NoFormer);
        }
        if self.static_relu {
            k.push(Ablation::StaticRelu);
        }
        k
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Records,
}

/// Parses `argv` (including the program name) and runs one subcommand.
pub fn run<I, S>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            return CommandResult {
                code,
                report: e.render().to_string(),
                output: None,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(r) => r,
        Err(e) => {
            let code = if is_usage_error(&e) { 2 } else { 1 };
            let mut report = format!("error: {e}\n");
            if code == 2 {
                report.push_str(&usage());
            }
            CommandResult {
                code,
                report,
                output: None,
            }
        }
    }
}

fn usage() -> String {
    use clap::CommandFactory;
    Cli::command().render_usage().to_string() + "\n"
}

fn is_usage_error(e: &Error) -> bool {
    matches!(
        e,
        Error::UnknownVariant(_)
            | Error::Syntax { .. }
            | Error::Semantic { .. }
            | Error::Io(_)
            | Error::Divisibility { .. }
    )
}

fn dispatch(cmd: Command) -> Result<CommandResult> {
    match cmd {
        Command::Summarize {
            spec,
            res,
            format,
            out,
        } => summarize(&spec, res, format, out),
        Command::VerifyCosts { variant, tol } => verify_costs(&variant, tol),
        Command::Ablate(args) => ablate(&args),
        Command::Gradcheck { tiny: _, seed } => gradcheck(seed),
        Command::TrainToy {
            spec,
            steps,
            seed,
            out,
        } => toy(&spec, steps, seed, out),
        Command::ExportAttention { spec, seed, out } => attention(&spec, seed, out),
    }
}

/// Resolves a builtin name, `tiny`, or a spec file path.
pub fn resolve_spec(name: &str) -> Result<ModelSpec> {
    if canonical_name(name).is_some() {
        return builtin_spec(name);
    }
    if name.eq_ignore_ascii_case("tiny") {
        return Ok(tiny_spec(10));
    }
    let path = Path::new(name);
    if path.is_file() {
        return parse_spec(&std::fs::read_to_string(path)?);
    }
    Err(Error::UnknownVariant(name.to_string()))
}

/// `--out` if given, otherwise `default_name` inside the output directory
/// named by the environment, otherwise nothing.
fn output_path(out: Option<PathBuf>, default_name: &str) -> Option<PathBuf> {
    out.or_else(|| std::env::var_os(OUT_DIR_ENV).map(|d| PathBuf::from(d).join(default_name)))
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn millions(x: u64) -> f64 {
    x as f64 / 1e6
}

fn summarize(
    name: &str,
    res: Option<usize>,
    format: Format,
    out: Option<PathBuf>,
) -> Result<CommandResult> {
    let spec = resolve_spec(name)?;
    let res = res.unwrap_or(spec.input().height);
    let model = build_model::<f32>(&spec, 0)?;
    let report = cost_report(&model, res)?;
    let text = match format {
        Format::Text => report.to_table(&spec.name),
        Format::Records => report.to_records(),
    };
    let path = out;
    if let Some(p) = &path {
        write_output(p, &text)?;
    }
    Ok(CommandResult::ok(text).written(path))
}

fn verify_costs(variant: &str, tol: f64) -> Result<CommandResult> {
    let names: Vec<&str> = if variant.eq_ignore_ascii_case("all") {
        BUILTIN_NAMES.to_vec()
    } else {
        vec![canonical_name(variant).ok_or_else(|| Error::UnknownVariant(variant.to_string()))?]
    };
    let mut report = String::new();
    let _ = writeln!(
        report,
        "{:<6} {:>9} {:>7} {:>8}  {:>9} {:>7} {:>8}  {:>9}  verdict",
        "model", "params", "target", "dev", "madds", "target", "dev", "fmr+brg"
    );
    let mut all_pass = true;
    for name in names {
        let spec = builtin_spec(name)?;
        let model = build_model::<f32>(&spec, 0)?;
        let costs = cost_report(&model, spec.input().height)?;
        let (tp, tm) = published_costs(name).expect("builtin names have targets");
        let params = millions(costs.total_params());
        let madds = millions(costs.total_madds());
        let dp = relative_deviation(params, tp);
        let dm = relative_deviation(madds, tm);
        let global = costs.pillar_madds(Pillar::Former) + costs.pillar_madds(Pillar::Bridge);
        let frac = global as f64 / costs.total_madds() as f64;
        let pass = dp.abs() <= tol && dm.abs() <= tol;
        all_pass &= pass;
        let _ = writeln!(
            report,
            "{name:<6} {params:>8.2}M {tp:>6.1}M {:>+7.1}%  {madds:>8.1}M {tm:>6.0}M {:>+7.1}%  {:>8.1}%  {}",
            dp * 100.0,
            dm * 100.0,
            frac * 100.0,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    let _ = writeln!(
        report,
        "tolerance ±{:.1}%: {}",
        tol * 100.0,
        if all_pass { "PASS" } else { "FAIL" }
    );
    Ok(CommandResult::verdict(all_pass, report))
}

fn ablate(args: &AblateArgs) -> Result<CommandResult> {
    let base_name =
        canonical_name(&args.base).ok_or_else(|| Error::UnknownVariant(args.base.clone()))?;
    let knobs = args.knobs();
    let mut spec = builtin_spec(base_name)?;
    for k in &knobs {
        spec = k.apply(spec);
    }
    spec.validate()?;
    let model = build_model::<f32>(&spec, 0)?;
    let costs = cost_report(&model, spec.input().height)?;
    let madds = millions(costs.total_madds());
    let label = if knobs.is_empty() {
        "base".to_string()
    } else {
        knobs
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut report = String::new();
    let _ = writeln!(report, "base {base_name}, {label}");
    for (p, (params, m)) in costs.by_pillar() {
        let _ = writeln!(
            report,
            "  {p:<6} {:>8.3}M params {:>9.2}M madds",
            millions(params),
            millions(m)
        );
    }
    let _ = writeln!(
        report,
        "  total  {:>8.3}M params {madds:>9.2}M madds",
        millions(costs.total_params())
    );
    let target = published_ablation(base_name, &knobs);
    let passed = match target {
        Some(t) => {
            let dev = relative_deviation(madds, t);
            let ok = dev.abs() <= args.tol;
            let _ = writeln!(
                report,
                "  target {t:.0}M madds, deviation {:+.1}% (tolerance ±{:.1}%): {}",
                dev * 100.0,
                args.tol * 100.0,
                if ok { "PASS" } else { "FAIL" }
            );
            ok
        }
        None => {
            let _ = writeln!(report, "  no published target for this combination");
            true
        }
    };
    Ok(CommandResult::verdict(passed, report))
}

/// Published multiply-adds for a knob combination on `base`, if one exists.
pub fn published_ablation(base: &str, knobs: &[Ablation]) -> Option<f64> {
    if base != "294M" {
        return None;
    }
    match knobs {
        [] => published_costs(base).map(|t| t.1),
        [k] => ABLATION_COSTS.iter().find(|(a, _)| a == k).map(|t| t.1),
        // Dropping the Former also drops the token-conditioned activations.
        [Ablation::NoFormer, Ablation::StaticRelu] | [Ablation::StaticRelu, Ablation::NoFormer] => {
            ABLATION_COSTS
                .iter()
                .find(|(a, _)| *a == Ablation::NoFormer)
                .map(|t| t.1)
        }
        _ => None,
    }
}

fn gradcheck(seed: u64) -> Result<CommandResult> {
    let report = check_model(&tiny_spec(4), seed, 2, 4)?;
    let worst = report.max_rel_error();
    let passed = worst < GRADCHECK_TOLERANCE;
    let mut text = report.to_text();
    let _ = writeln!(
        text,
        "tolerance {GRADCHECK_TOLERANCE:.0e}: {}",
        if passed { "PASS" } else { "FAIL" }
    );
    Ok(CommandResult::verdict(passed, text))
}

fn toy(
    name: &str,
    steps: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<CommandResult> {
    let mut cfg = ToyConfig::default();
    if let Some(s) = steps {
        cfg.steps = s;
        cfg.optim.horizon = s.max(1);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let spec = if name.eq_ignore_ascii_case("tiny") {
        tiny_spec(cfg.classes)
    } else {
        let s = resolve_spec(name)?;
        cfg.classes = s.classes;
        cfg.res = s.input().height;
        s
    };
    let run = train_toy(Some(&spec), &cfg)?;
    let log = run.log.to_records();
    let path = output_path(out, "metrics.csv");
    if let Some(p) = &path {
        write_output(p, &log)?;
    }
    let n = run.log.rows.len();
    let window = 100.min(n);
    let mut report = String::new();
    let _ = writeln!(
        report,
        "trained {} for {n} steps (seed {})",
        spec.name, cfg.seed
    );
    if n > 0 {
        let _ = writeln!(
            report,
            "mean loss: first {window} steps {:.4}, last {window} steps {:.4}",
            run.log.mean_loss(0, window),
            run.log.mean_loss(n - window, n)
        );
    }
    let _ = writeln!(report, "train accuracy {:.2}%", run.accuracy * 100.0);
    match &path {
        Some(p) => {
            let _ = writeln!(report, "metrics written to {}", p.display());
        }
        None => report.push_str(&log),
    }
    Ok(CommandResult::ok(report).written(path))
}

fn attention(name: &str, seed: u64, out: Option<PathBuf>) -> Result<CommandResult> {
    let spec = resolve_spec(name)?;
    let path = output_path(out, "attention.csv")
        .ok_or_else(|| Error::Io(format!("no --out given and {OUT_DIR_ENV} is not set")))?;
    let model = build_model::<f32>(&spec, seed)?;
    let image = synthetic_image::<f32>(spec.input().height, seed);
    let dump = export_attention(&model, &image)?;
    write_output(&path, &dump.to_records())?;
    let mut report = String::new();
    for r in &dump.records {
        let _ = writeln!(
            report,
            "block {} {} heads {} tokens {} map {}x{}",
            r.block,
            r.direction.as_str(),
            r.heads(),
            r.tokens,
            r.height,
            r.width
        );
    }
    let _ = writeln!(report, "attention written to {}", path.display());
    Ok(CommandResult::ok(report).written(Some(path)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_variant_is_usage_error() {
        let r = run(["mobile-former", "verify-costs", "--variant", "nonexistent"]);
        assert_eq!(r.code, 2);
        assert!(r.report.contains("Usage"));
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["mobile-former", "frobnicate"]).code, 2);
    }

    #[test]
    fn ablation_targets_resolve() {
        assert_eq!(
            published_ablation("294M", &[Ablation::Tokens(1)]),
            Some(269.0)
        );
        assert_eq!(published_ablation("294M", &[]), Some(294.0));
        assert_eq!(published_ablation("151M", &[Ablation::NoFfn]), None);
        assert_eq!(
            published_ablation("294M", &[Ablation::NoFfn, Ablation::Kernel(5)]),
            None
        );
    }
}
