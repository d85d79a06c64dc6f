//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! before asserting, so `cargo test -- --nocapture` doubles as a scorecard.

use std::time::{Duration, Instant};

use mobile_former::arch::{tiny_spec, Ablation, BUILTIN_NAMES};
use mobile_former::cli::run;
use mobile_former::cost::{analytic_block_cost, budget_report, measure_block, ABLATION_COSTS};
use mobile_former::gradcheck::check_tiny;
use mobile_former::nn::Forward;
use mobile_former::train::{export_attention, synthetic_image, train_toy, ToyConfig};
use mobile_former::{build_model, builtin_spec, count_madds, NormMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: usize, name: &str, ok: bool, detail: &str) {
    println!(
        "criterion {id} [{}] {name}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}

fn within(measured: f64, target: f64, tol: f64) -> bool {
    ((measured - target) / target).abs() <= tol
}

#[test]
fn criterion_1_cost_table() {
    let start = Instant::now();
    let r = run([
        "mobile-former",
        "verify-costs",
        "--variant",
        "all",
        "--tol",
        "0.05",
    ]);
    let elapsed = start.elapsed();
    let ok = r.code == 0 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "params and madds of seven variants within 5%",
        ok,
        &format!("exit {} in {:.2}s", r.code, elapsed.as_secs_f64()),
    );
    println!("{}", r.report);
    assert!(ok);
}

#[test]
fn criterion_2_global_budget() {
    let mut detail = Vec::new();
    let mut ok = true;
    for name in BUILTIN_NAMES {
        let spec = builtin_spec(name).unwrap();
        let model = build_model::<f32>(&spec, 0).unwrap();
        let b = budget_report(&model, 224).unwrap();
        let frac = b.fraction();
        let global = (b.former + b.bridge) as f64 / 1e6;
        let mut pass = frac < 0.20;
        if name == "294M" {
            pass &= (global - 35.0).abs() <= 8.0 && (frac - 0.12).abs() <= 0.02;
        }
        ok &= pass;
        detail.push(format!(
            "{name} {global:.1}M={:.1}%{}",
            frac * 100.0,
            if pass { "" } else { "!" }
        ));
    }
    verdict(2, "former+bridge share", ok, &detail.join(" "));
    assert!(ok);
}

#[test]
fn criterion_3_ablation_ladders() {
    let start = Instant::now();
    let base = builtin_spec("294M").unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    let mut rows: Vec<(Vec<Ablation>, f64)> =
        ABLATION_COSTS.iter().map(|(a, t)| (vec![*a], *t)).collect();
    rows.push((vec![], 294.0));
    rows.push((vec![Ablation::NoFormer, Ablation::StaticRelu], 259.0));
    for (knobs, target) in rows {
        let spec = knobs.iter().fold(base.clone(), |s, k| k.apply(s));
        let model = build_model::<f32>(&spec, 0).unwrap();
        let madds = count_madds(&model, 224).unwrap().total_madds() as f64 / 1e6;
        let pass = within(madds, target, 0.05);
        ok &= pass;
        let label = if knobs.is_empty() {
            "base".to_string()
        } else {
            knobs
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join("+")
        };
        detail.push(format!(
            "{label}={madds:.0}/{target:.0}{}",
            if pass { "" } else { "!" }
        ));
    }
    for argv in [
        vec!["--tokens", "1"],
        vec!["--token-dim", "64"],
        vec!["--no-ffn"],
    ] {
        let mut full = vec!["mobile-former", "ablate", "--base", "294M"];
        full.extend(argv);
        ok &= run(full).code == 0;
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(30);
    verdict(
        3,
        "ablation ladders within 5%",
        ok,
        &format!("{} in {:.2}s", detail.join(" "), elapsed.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn criterion_4_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut mobile_ok, mut bridge_ok) = (0usize, 0usize);
    let mut first_bridge_miss = None;
    let trials = 60;
    for _ in 0..trials {
        let h = rng.gen_range(1..=9);
        let w = rng.gen_range(1..=9);
        let c = 2 * rng.gen_range(1..=24);
        let e = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=8);
        let d = 2 * rng.gen_range(1..=48);
        let measured = measure_block(h, w, c, e, m, d, 2).unwrap();
        let expected = analytic_block_cost((h * w) as u64, c as u64, e as u64, m as u64, d as u64);
        mobile_ok += usize::from(measured.mobile == expected.mobile);
        let bridge_match =
            measured.to_former == expected.bridge && measured.to_mobile == expected.bridge;
        bridge_ok += usize::from(bridge_match);
        if !bridge_match && first_bridge_miss.is_none() {
            first_bridge_miss = Some(format!(
                "L={} C={c} M={m} d={d}: m2f {} f2m {} vs {}",
                h * w,
                measured.to_former,
                measured.to_mobile,
                expected.bridge
            ));
        }
    }
    let ok = mobile_ok == trials && bridge_ok == trials;
    verdict(
        4,
        "counted madds equal closed forms",
        ok,
        &format!(
            "mobile {mobile_ok}/{trials}, bridge {bridge_ok}/{trials}{}",
            first_bridge_miss
                .map(|s| format!(" (first miss {s})"))
                .unwrap_or_default()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_5_gradients() {
    let start = Instant::now();
    let report = check_tiny(0).unwrap();
    let worst = report.max_rel_error();
    let elapsed = start.elapsed();
    let ok = worst < 1e-4 && report.groups.len() > 50 && elapsed < Duration::from_secs(120);
    let group = report.worst().map(|g| g.group.clone()).unwrap_or_default();
    verdict(
        5,
        "64-bit gradient check",
        ok,
        &format!(
            "{} groups, max rel error {worst:.2e} ({group}) in {:.1}s",
            report.groups.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_6_learning() {
    let start = Instant::now();
    let cfg = ToyConfig::default();
    assert_eq!(cfg.steps, 2000);
    let run = train_toy(Some(&tiny_spec(10)), &cfg).unwrap();
    let early = run.log.mean_loss(0, 100);
    let late = run.log.mean_loss(1900, 2000);
    let elapsed = start.elapsed();
    let ok = run.accuracy >= 0.95 && late < early && elapsed < Duration::from_secs(300);
    verdict(
        6,
        "toy training",
        ok,
        &format!(
            "accuracy {:.1}%, loss {early:.4} -> {late:.4}, {:.1}s",
            run.accuracy * 100.0,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_7_attention_normalization() {
    let start = Instant::now();
    let spec = builtin_spec("294M").unwrap();
    let model = build_model::<f32>(&spec, 1).unwrap();
    let image = synthetic_image::<f32>(224, 1);
    let dump = export_attention(&model, &image).unwrap();
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for r in &dump.records {
        for s in r.row_sums() {
            worst = worst.max((s - 1.0).abs());
            rows += 1;
        }
    }
    // The serialized form must normalize too.
    let text = dump.to_records();
    let mut sums = std::collections::HashMap::<(String, String, String, String), f64>::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let key = if f[1] == "m2f" {
            (f[0].into(), f[1].into(), f[2].into(), f[3].into())
        } else {
            (
                f[0].into(),
                f[1].into(),
                f[2].into(),
                format!("{},{}", f[4], f[5]),
            )
        };
        *sums.entry(key).or_default() += f[6].parse::<f64>().unwrap();
    }
    let worst_text = sums.values().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let blocks = dump.records.len() / 2;
    let elapsed = start.elapsed();
    let ok =
        worst <= 1e-5 && worst_text <= 1e-5 && blocks == 11 && elapsed < Duration::from_secs(60);
    verdict(
        7,
        "attention rows sum to one",
        ok,
        &format!(
            "{blocks} blocks, {rows} rows, max |sum-1| {worst:.1e} (exported {worst_text:.1e}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_8_structure() {
    let spec = tiny_spec(5);
    let model = build_model::<f64>(&spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images = Tensor::<f64>::randn(&[2, 3, 16, 16], 1.0, &mut rng);

    // Token shape at every block boundary.
    let mut f = Forward::new(&model.store, NormMode::Train, false);
    let x = f.tape.leaf_ref(&images, false);
    let out = model.forward(&mut f, x).unwrap();
    let shapes: Vec<Vec<usize>> = out
        .token_sets
        .iter()
        .map(|z| f.tape.shape(*z).to_vec())
        .collect();
    let tokens_ok =
        shapes.len() == model.blocks().count() && shapes.iter().all(|s| s == &[2, 3, 16]);

    // With the bridges and activation generators at their zero
    // initialization, every block's feature output equals its Mobile path.
    let mut identity_ok = true;
    for block in model.blocks() {
        let cin = block.mobile.config.cin;
        let (h, w) = (
            4 * block.mobile.config.kernel,
            4 * block.mobile.config.kernel,
        );
        let xin = Tensor::<f64>::randn(&[2, cin, h, w], 1.0, &mut rng);
        let zin = Tensor::<f64>::randn(&[2, 3, 16], 1.0, &mut rng);

        let mut full = Forward::new(&model.store, NormMode::Train, false);
        let xv = full.tape.leaf_ref(&xin, false);
        let zv = full.tape.leaf_ref(&zin, false);
        let (y, z_out, _) = block.forward(&mut full, xv, Some(zv)).unwrap();

        // Any token drives the zero-initialized generator to the same
        // activation, so the Mobile path is token independent.
        let other = Tensor::<f64>::randn(&[2, 16], 1.0, &mut rng);
        let mut plain = Forward::new(&model.store, NormMode::Train, false);
        let xv = plain.tape.leaf_ref(&xin, false);
        let tv = plain.tape.leaf_ref(&other, false);
        let y_plain = block.mobile.forward(&mut plain, xv, Some(tv)).unwrap();

        let a = full.tape.value(y);
        let b = plain.tape.value(y_plain);
        identity_ok &= a.len() == b.len() && a.iter().zip(b).all(|(p, q)| p == q);
        identity_ok &= full.tape.shape(z_out.unwrap()) == [2, 3, 16];

        // The token update from the features is exactly zero.
        let g = block.global.as_ref().unwrap();
        let mut bridge = Forward::new(&model.store, NormMode::Train, false);
        let xv = bridge.tape.leaf_ref(&xin, false);
        let zv = bridge.tape.leaf_ref(&zin, false);
        let (z_mixed, _) = g.to_former.forward(&mut bridge, xv, zv).unwrap();
        identity_ok &= bridge.tape.value(z_mixed) == zin.data();
    }
    let ok = tokens_ok && identity_ok;
    verdict(
        8,
        "token shapes and zero-init identities",
        ok,
        &format!("token shapes {shapes:?}, zero-init identity {identity_ok}"),
    );
    assert!(ok);
}
