//! Spec text format and validation over generated architectures.

use mobile_former::arch::{
    builtin_spec, parse_spec, tiny_spec, BlockKind, BlockSpec, ModelSpec, Resolution, BUILTIN_NAMES,
};
use mobile_former::{build_model, Error, NormMode, Tensor};
use proptest::prelude::*;

#[derive(Clone, Debug)]
struct Layer {
    down: bool,
    exp_mult: usize,
    out_half: usize,
    kernel: usize,
}

fn layer() -> impl Strategy<Value = Layer> {
    (
        any::<bool>(),
        1usize..4,
        1usize..9,
        prop_oneof![Just(3usize), Just(5usize)],
    )
        .prop_map(|(down, exp_mult, out_half, kernel)| Layer {
            down,
            exp_mult,
            out_half,
            kernel,
        })
}

/// A valid two-head spec at `res`, with one Mobile-Former block per layer.
fn assemble(
    res: usize,
    stem_half: usize,
    layers: &[Layer],
    tokens: usize,
    dim_half: usize,
) -> ModelSpec {
    let mut blocks = vec![BlockSpec::new(
        "stem",
        BlockKind::Stem,
        Resolution::new(res, res, 3),
        None,
        2 * stem_half,
        2,
    )];
    let mut cur = blocks[0].output();
    for (i, l) in layers.iter().enumerate() {
        let out = 2 * l.out_half;
        let down = l.down && cur.height % 2 == 0 && cur.height > 2;
        let (kind, exp, stride) = if down {
            (
                BlockKind::MobileFormerDown,
                cur.channels * l.exp_mult.max(out.div_ceil(cur.channels)),
                2,
            )
        } else {
            (
                BlockKind::MobileFormer,
                out.max(cur.channels) * l.exp_mult,
                1,
            )
        };
        let mut b = BlockSpec::new(&(i + 1).to_string(), kind, cur, Some(exp), out, stride);
        b.kernel = l.kernel;
        cur = b.output();
        blocks.push(b);
    }
    let pw = BlockSpec::new(
        &(layers.len() + 1).to_string(),
        BlockKind::Pointwise,
        cur,
        None,
        4 * cur.channels,
        1,
    );
    cur = pw.output();
    blocks.push(pw);
    blocks.push(BlockSpec::new("head", BlockKind::Head, cur, None, 24, 1));
    ModelSpec {
        name: "generated".into(),
        tokens,
        token_dim: 2 * dim_half,
        heads: 2,
        classes: 3,
        ffn: true,
        former: true,
        dynamic_relu: true,
        blocks,
    }
}

fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
    (
        prop_oneof![Just(8usize), Just(12), Just(16)],
        1usize..5,
        prop::collection::vec(layer(), 1..4),
        1usize..4,
        1usize..9,
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(res, stem, layers, tokens, dim, ffn, former, dyrelu)| {
            let mut s = assemble(res, stem, &layers, tokens, dim);
            s.ffn = ffn;
            s.former = former;
            s.dynamic_relu = former && dyrelu;
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn text_round_trip(spec in spec_strategy()) {
        prop_assert!(spec.validate().is_ok(), "{}", spec.serialize());
        let text = spec.serialize();
        let parsed = parse_spec(&text).unwrap();
        prop_assert_eq!(&parsed, &spec);
        prop_assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn generated_specs_build_and_run(spec in spec_strategy()) {
        let model = build_model::<f32>(&spec, 0).unwrap();
        let res = spec.input().height;
        let logits = model.predict(&Tensor::ones(&[2, 3, res, res]), NormMode::Eval).unwrap();
        prop_assert_eq!(logits.shape(), &[2, 3]);
        prop_assert!(logits.check_finite().is_ok());
        let expected = if spec.former { spec.blocks.len() - 3 } else { 0 };
        prop_assert_eq!(model.blocks().filter(|b| b.global.is_some()).count(), expected);
    }

    #[test]
    fn comments_and_spacing_are_ignored(spec in spec_strategy(), pad in 1usize..4) {
        let spaced: String = spec
            .serialize()
            .lines()
            .map(|l| format!("{}{}   # note\n\n", " ".repeat(pad), l.replace(' ', &" ".repeat(pad))))
            .collect();
        prop_assert_eq!(parse_spec(&spaced).unwrap(), spec);
    }

    #[test]
    fn breaking_the_chain_names_the_input(spec in spec_strategy(), extra in 1usize..5) {
        let mut broken = spec.clone();
        broken.blocks[1].input.channels += extra;
        match broken.validate() {
            Err(Error::Semantic { field, .. }) => prop_assert!(field == "in" || field == "exp", "{field}"),
            other => prop_assert!(false, "unexpected {other:?}"),
        }
    }
}

#[test]
fn builtins_round_trip_through_text() {
    for name in BUILTIN_NAMES {
        let spec = builtin_spec(name).unwrap();
        assert_eq!(parse_spec(&spec.serialize()).unwrap(), spec, "{name}");
    }
    let tiny = tiny_spec(10);
    assert_eq!(parse_spec(&tiny.serialize()).unwrap(), tiny);
}

#[test]
fn builtin_shapes_chain_to_seven_by_seven() {
    for name in BUILTIN_NAMES {
        let spec = builtin_spec(name).unwrap();
        let head = spec.head();
        assert_eq!((head.input.height, head.input.width), (7, 7), "{name}");
        assert_eq!(spec.input(), Resolution::new(224, 224, 3));
        assert_eq!(spec.classes, 1000);
        let blocks = spec.mobile_former_blocks().count();
        let expected = if matches!(name, "26M" | "52M" | "96M") {
            8
        } else {
            11
        };
        assert_eq!(blocks, expected, "{name}");
    }
}

#[test]
fn smallest_variant_groups_every_pointwise_conv() {
    let small = builtin_spec("26M").unwrap();
    let base = builtin_spec("52M").unwrap();
    for (a, b) in small.blocks.iter().zip(&base.blocks) {
        assert_eq!(a.input, b.input);
        assert_eq!(a.out, b.out);
        let expected = if a.pointwise_pairs().is_empty() { 1 } else { 4 };
        assert_eq!(a.groups, expected, "{} {}", a.stage, a.kind);
    }
}

#[test]
fn unknown_names_are_reported() {
    assert!(matches!(builtin_spec("27M"), Err(Error::UnknownVariant(n)) if n == "27M"));
    assert!(builtin_spec("mobile-former-294m").is_ok());
}

#[test]
fn syntax_errors_carry_positions() {
    let cases = [
        ("name=x\ntokens=6y192\n", 2, 8),
        ("name=x\nbogus=1\n", 2, 1),
        ("name=x\nstem stem 224x224x3 - 16\n", 2, 25),
        ("name=x\nstem rocket 224x224x3 - 16 2\n", 2, 6),
        ("name=x\nstem stem 224x224 - 16 2\n", 2, 11),
        ("name=x\n  1 mf 14x14x96 576 x 1\n", 2, 21),
    ];
    for (text, line, column) in cases {
        match parse_spec(text) {
            Err(Error::Syntax {
                line: l, column: c, ..
            }) => assert_eq!((l, c), (line, column), "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn missing_headers_are_semantic_errors() {
    let body = tiny_spec(3).serialize();
    for header in ["name=", "tokens=", "heads=", "classes="] {
        let text: String = body
            .lines()
            .filter(|l| !l.starts_with(header))
            .map(|l| format!("{l}\n"))
            .collect();
        match parse_spec(&text) {
            Err(Error::Semantic { field, .. }) => assert_eq!(format!("{field}="), header),
            other => panic!("{header}: {other:?}"),
        }
    }
}
