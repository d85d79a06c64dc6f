//! Counted costs against independently derived closed forms.

use mobile_former::arch::{tiny_spec, BUILTIN_NAMES};
use mobile_former::cost::{
    analytic_block_cost, cost_report, count_params, measure_block, trace, CostEntry, CostReport,
    Pillar,
};
use mobile_former::{build_model, builtin_spec};
use proptest::prelude::*;

/// Exact product count of the block's token-side layers: query, key, value
/// and output projections (`4Md²`), attention scores and aggregation
/// (`2M²d`), and a `d -> 2d -> d` feed-forward network (`4Md²`).
fn former_products(m: u64, d: u64) -> u64 {
    8 * m * d * d + 2 * m * m * d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mobile_products_equal_closed_form(
        h in 1usize..10, w in 1usize..10, c in 1usize..20, e in 1usize..7,
        m in 1usize..7, dh in 1usize..20,
    ) {
        let c = 2 * c;
        let d = 2 * dh;
        let got = measure_block(h, w, c, e, m, d, 2).unwrap();
        let want = analytic_block_cost((h * w) as u64, c as u64, e as u64, m as u64, d as u64);
        prop_assert_eq!(got.mobile, want.mobile);
    }

    #[test]
    fn former_and_bridge_products_follow_op_counts(
        h in 1usize..8, w in 1usize..8, ch in 1usize..12, heads in 1usize..4,
        m in 1usize..7, dh in 1usize..12,
    ) {
        let (c, d) = ((ch * heads) as u64, (dh * heads) as u64);
        let (l, mm) = ((h * w) as u64, m as u64);
        let got = measure_block(h, w, c as usize, 2, m, d as usize, heads).unwrap();
        prop_assert_eq!(got.former, former_products(mm, d));
        // Scores and aggregation each cost LMC; per-head query projections
        // cost MdC/H and the output projection MdC.
        prop_assert_eq!(got.to_former, 2 * l * mm * c + mm * d * c / heads as u64 + mm * d * c);
        // Per-head key and value projections cost MdC/H each.
        prop_assert_eq!(got.to_mobile, 2 * l * mm * c + 2 * mm * d * c / heads as u64);
    }

    #[test]
    fn records_round_trip(
        path in "[a-z][a-z0-9_.]{0,20}",
        pillar in 0usize..5,
        params in any::<u64>(),
        madds in any::<u64>(),
    ) {
        let entry = CostEntry { path, pillar: Pillar::ALL[pillar], params, madds };
        prop_assert_eq!(CostEntry::from_record(&entry.to_record()).unwrap(), entry);
    }
}

#[test]
fn malformed_records_are_rejected() {
    for bad in [
        "",
        "a,mobile,1",
        "a,mobile,1,2,3",
        "a,lobby,1,2",
        "a,mobile,x,2",
        "a b,mobile,1,2",
    ] {
        assert!(CostEntry::from_record(bad).is_err(), "{bad}");
    }
}

#[test]
fn report_totals_equal_parameter_store() {
    for name in ["52M", "294M"] {
        let model = build_model::<f32>(&builtin_spec(name).unwrap(), 0).unwrap();
        let params = count_params(&model);
        assert_eq!(params.total_params() as usize, model.num_params());
        let full = cost_report(&model, 224).unwrap();
        assert_eq!(full.total_params(), params.total_params());
        let by_pillar: u64 = full.by_pillar().values().map(|v| v.1).sum();
        assert_eq!(by_pillar, full.total_madds());
        let text = full.to_records();
        let parsed: Vec<CostEntry> = text
            .lines()
            .map(|l| CostEntry::from_record(l).unwrap())
            .collect();
        assert_eq!(parsed, full.entries);
    }
}

#[test]
fn every_pillar_is_populated() {
    let model = build_model::<f32>(&builtin_spec("96M").unwrap(), 0).unwrap();
    let r = cost_report(&model, 224).unwrap();
    for p in Pillar::ALL {
        assert!(r.pillar_madds(p) > 0, "{p}");
    }
}

#[test]
fn costs_do_not_depend_on_seed() {
    let spec = tiny_spec(10);
    let a = cost_report(&build_model::<f32>(&spec, 0).unwrap(), 16).unwrap();
    let b = cost_report(&build_model::<f64>(&spec, 9).unwrap(), 16).unwrap();
    assert_eq!(a, b);
}

#[test]
fn subtree_sums_respect_path_boundaries() {
    let model = build_model::<f32>(&builtin_spec("294M").unwrap(), 0).unwrap();
    let r: CostReport = cost_report(&model, 224).unwrap();
    let (p1, m1) = r.under("blocks.1");
    let direct = r
        .entries
        .iter()
        .filter(|e| e.path == "blocks.1" || e.path.starts_with("blocks.1."))
        .fold((0, 0), |acc, e| (acc.0 + e.params, acc.1 + e.madds));
    assert_eq!((p1, m1), direct);
    assert!(r.under("blocks.1").1 < r.under("blocks").1);
}

#[test]
fn madds_grow_with_resolution() {
    let model = build_model::<f32>(&builtin_spec("151M").unwrap(), 0).unwrap();
    let small: u64 = trace(&model, 160).unwrap().iter().map(|e| e.madds).sum();
    let large: u64 = trace(&model, 224).unwrap().iter().map(|e| e.madds).sum();
    assert!(small < large);
}

#[test]
fn every_builtin_traces() {
    for name in BUILTIN_NAMES {
        let model = build_model::<f32>(&builtin_spec(name).unwrap(), 0).unwrap();
        let r = cost_report(&model, 224).unwrap();
        assert!(r.total_madds() > 0 && r.total_params() > 0);
    }
}
