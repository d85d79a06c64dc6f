//! A built network: parameters plus the layer graph described by a spec.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{BlockKind, ModelSpec};
use crate::autodiff::{BatchStats, NormMode, Var};
use crate::blocks::{
    pointwise, stem, BlockAttention, ClassifierHead, ConvAct, LiteBottleneck, MobileConfig,
    MobileFormerBlock, TokenConfig,
};
use crate::bridge::{AttentionRecord, Direction};
use crate::cost::Pillar;
use crate::error::{Error, Result};
use crate::nn::{zero_param, Builder, Forward, Init, ParamId, ParamStore, StatsId, BN_MOMENTUM};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub enum Layer {
    Lite(LiteBottleneck),
    MobileFormer(MobileFormerBlock),
    Pointwise(ConvAct),
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub stem: ConvAct,
    pub body: Vec<Layer>,
    pub head: ClassifierHead,
    /// Initial token set `[M, d]`, absent in pure-Mobile builds.
    pub tokens: Option<ParamId>,
}

/// Logits plus the attention captured by every Mobile-Former block.
pub struct ModelOutput {
    pub logits: Var,
    pub attention: Vec<BlockAttention>,
    /// Token set after each Mobile-Former block, in order.
    pub token_sets: Vec<Var>,
}

pub const TOKEN_INIT_STD: f64 = 0.02;

/// Builds `spec` with parameters drawn deterministically from `seed`.
///
/// Bridge output and value projections and the second layer of every
/// dynamic-activation generator start at zero, so at initialization the
/// network computes the plain Mobile path and the tokens only evolve
/// through the Former.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: &mut store,
        rng: &mut rng,
        pillar: Pillar::Stem,
    };
    let token_cfg = spec.former.then_some(TokenConfig {
        dim: spec.token_dim,
        heads: spec.heads,
        ffn: spec.ffn,
        dynamic_relu: spec.dynamic_relu,
    });
    let tokens = spec.former.then(|| {
        b.with_pillar(Pillar::Former, |b| {
            b.param(
                "tokens.init".into(),
                &[spec.tokens, spec.token_dim],
                spec.token_dim,
                Init::Normal(TOKEN_INIT_STD),
            )
        })
    });

    let stem_spec = &spec.blocks[0];
    let stem = stem(&mut b, "stem", stem_spec.out)?;
    let mut body = Vec::new();
    let last = spec.blocks.len() - 1;
    for (i, bs) in spec.blocks.iter().enumerate().take(last).skip(1) {
        let path = format!("blocks.{i}");
        let cin = bs.input.channels;
        let layer = match bs.kind {
            BlockKind::LiteBottleneck => Layer::Lite(LiteBottleneck::new(
                &mut b,
                &path,
                cin,
                bs.exp.expect("validated"),
                bs.out,
                bs.stride,
                bs.kernel,
                bs.groups,
            )?),
            BlockKind::MobileFormer | BlockKind::MobileFormerDown => {
                let cfg = MobileConfig {
                    cin,
                    exp: bs.exp.expect("validated"),
                    cout: bs.out,
                    kernel: bs.kernel,
                    groups: bs.groups,
                    down: bs.kind == BlockKind::MobileFormerDown,
                    token_dim: token_cfg.filter(|t| t.dynamic_relu).map(|t| t.dim),
                };
                Layer::MobileFormer(MobileFormerBlock::new(&mut b, &path, i, cfg, token_cfg)?)
            }
            BlockKind::Pointwise => {
                Layer::Pointwise(pointwise(&mut b, &path, cin, bs.out, bs.groups)?)
            }
            BlockKind::Stem | BlockKind::Head => {
                return Err(Error::Semantic {
                    field: "kind".into(),
                    msg: format!("block {} must not be {}", i + 1, bs.kind),
                })
            }
        };
        body.push(layer);
    }
    let hs = &spec.blocks[last];
    let head = ClassifierHead::new(
        &mut b,
        "head",
        hs.input.channels,
        spec.former.then_some(spec.token_dim),
        hs.out,
        spec.classes,
    );

    let mut inert = Vec::new();
    for layer in &body {
        if let Layer::MobileFormer(block) = layer {
            if let Some(g) = &block.global {
                inert.push(g.to_former.out.weight);
                inert.extend(&g.to_mobile.value);
            }
        }
    }
    for id in inert {
        zero_param(&mut store, id);
    }
    Ok(Model {
        spec: spec.clone(),
        store,
        stem,
        body,
        head,
        tokens,
    })
}

impl<T: Scalar> Model<T> {
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &MobileFormerBlock> {
        self.body.iter().filter_map(|l| match l {
            Layer::MobileFormer(b) => Some(b),
            _ => None,
        })
    }

    /// Records the network on `f.tape` for images `[N, 3, H, W]`.
    pub fn forward(&self, f: &mut Forward<T>, images: Var) -> Result<ModelOutput> {
        let shape = f.tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::invalid(
                "model",
                format!("expected images [N, 3, H, W], got {shape:?}"),
            ));
        }
        let n = shape[0];
        let mut z = match self.tokens {
            Some(id) => Some(f.scoped("tokens", Pillar::Former, |f| {
                let t = f.p(id);
                f.tape.expand(t, n)
            })?),
            None => None,
        };
        let mut x = self.stem.forward(f, images)?;
        let mut attention = Vec::new();
        let mut token_sets = Vec::new();
        for layer in &self.body {
            x = match layer {
                Layer::Lite(l) => l.forward(f, x)?,
                Layer::Pointwise(p) => p.forward(f, x)?,
                Layer::MobileFormer(b) => {
                    let (x, z_next, attn) = b.forward(f, x, z)?;
                    z = z_next;
                    token_sets.extend(z);
                    attention.extend(attn);
                    x
                }
            };
        }
        let logits = self.head.forward(f, x, z)?;
        Ok(ModelOutput {
            logits,
            attention,
            token_sets,
        })
    }

    /// Logits `[N, classes]` for a batch, without gradients.
    pub fn predict(&self, images: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let mut f = Forward::new(&self.store, mode, false);
        let x = f.tape.leaf_ref(images, false);
        let out = self.forward(&mut f, x)?;
        f.tape.tensor(out.logits)
    }

    /// Eval-mode attention maps for one image `[1, 3, H, W]`.
    pub fn attention_maps(&self, image: &Tensor<T>) -> Result<Vec<AttentionRecord>> {
        if image.shape().first() != Some(&1) {
            return Err(Error::invalid(
                "attention",
                format!("expected one image, got {:?}", image.shape()),
            ));
        }
        let mut f = Forward::new(&self.store, NormMode::Eval, false);
        let x = f.tape.leaf_ref(image, false);
        let out = self.forward(&mut f, x)?;
        let mut records = Vec::new();
        for a in &out.attention {
            let (h, w) = a.input_hw;
            records.push(AttentionRecord::capture(
                &f,
                &a.to_former,
                a.block,
                Direction::MobileToFormer,
                h,
                w,
                0,
            )?);
            let (h, w) = a.output_hw;
            records.push(AttentionRecord::capture(
                &f,
                &a.to_mobile,
                a.block,
                Direction::FormerToMobile,
                h,
                w,
                0,
            )?);
        }
        Ok(records)
    }

    /// Folds collected train-mode batch statistics into the running estimates.
    pub fn apply_stat_updates(&mut self, updates: Vec<(StatsId, BatchStats<T>)>) {
        for (id, stats) in updates {
            self.store.update_stats(id, &stats, BN_MOMENTUM);
        }
    }

    /// Copy with every parameter converted to `U` (used for 64-bit gradient checks).
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            body: self.body.clone(),
            head: self.head.clone(),
            tokens: self.tokens,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin_spec, tiny_spec};

    #[test]
    fn building_is_deterministic_per_seed() {
        let spec = tiny_spec(4);
        let a = build_model::<f32>(&spec, 1).unwrap();
        let b = build_model::<f32>(&spec, 1).unwrap();
        let c = build_model::<f32>(&spec, 2).unwrap();
        let values = |m: &Model<f32>| m.store.iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn bridge_outputs_start_at_zero() {
        let model = build_model::<f32>(&tiny_spec(4), 0).unwrap();
        assert_eq!(model.blocks().count(), 2);
        for block in model.blocks() {
            let g = block.global.as_ref().unwrap();
            let out = &model.store.get(g.to_former.out.weight).value;
            assert!(out.data().iter().all(|&v| v == 0.0));
            for &id in &g.to_mobile.value {
                assert!(model.store.get(id).value.data().iter().all(|&v| v == 0.0));
            }
            for &id in &g.to_mobile.key {
                assert!(model.store.get(id).value.data().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn predict_shapes_and_token_sets() {
        let model = build_model::<f32>(&tiny_spec(5), 0).unwrap();
        let x = Tensor::<f32>::ones(&[3, 3, 16, 16]);
        let logits = model.predict(&x, NormMode::Eval).unwrap();
        assert_eq!(logits.shape(), &[3, 5]);
        let bad = Tensor::<f32>::ones(&[1, 1, 16, 16]);
        assert!(model.predict(&bad, NormMode::Eval).is_err());
    }

    #[test]
    fn pure_mobile_build_has_no_tokens() {
        let spec = tiny_spec(4).without_former();
        let model = build_model::<f32>(&spec, 0).unwrap();
        assert!(model.tokens.is_none());
        assert!(model
            .blocks()
            .all(|b| b.global.is_none() && b.mobile.activation.is_none()));
        let logits = model
            .predict(&Tensor::ones(&[1, 3, 16, 16]), NormMode::Eval)
            .unwrap();
        assert_eq!(logits.shape(), &[1, 4]);
    }

    #[test]
    fn attention_maps_cover_every_block() {
        let model = build_model::<f64>(&tiny_spec(4), 0).unwrap();
        let maps = model
            .attention_maps(&Tensor::ones(&[1, 3, 16, 16]))
            .unwrap();
        assert_eq!(maps.len(), 4);
        assert_eq!((maps[0].height, maps[0].width), (8, 8));
        assert_eq!((maps[1].height, maps[1].width), (4, 4));
        assert!(model
            .attention_maps(&Tensor::ones(&[2, 3, 16, 16]))
            .is_err());
    }

    #[test]
    fn cast_keeps_structure() {
        let model = build_model::<f32>(&tiny_spec(4), 0).unwrap();
        let wide: Model<f64> = model.cast();
        assert_eq!(wide.num_params(), model.num_params());
        let x32 = Tensor::<f32>::ones(&[1, 3, 16, 16]);
        let a = model.predict(&x32, NormMode::Eval).unwrap();
        let b = wide.predict(&x32.cast(), NormMode::Eval).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((*p as f64 - q).abs() < 1e-4);
        }
    }

    #[test]
    fn builtin_has_eleven_blocks() {
        let model = build_model::<f32>(&builtin_spec("294M").unwrap(), 0).unwrap();
        assert_eq!(model.blocks().count(), 11);
        assert_eq!(
            model.store.get(model.tokens.unwrap()).value.shape(),
            &[6, 192]
        );
    }
}
