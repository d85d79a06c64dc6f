//! Toy-scale training: synthetic prototype data, AdamW with cosine decay,
//! evaluation, and attention export.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{tiny_spec, ModelSpec};
use crate::autodiff::NormMode;
use crate::bridge::AttentionRecord;
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::nn::Forward;
use crate::tensor::{Scalar, Tensor};

/// Class prototypes plus Gaussian-noise samples, `n_per_class` per class.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset<T: Scalar = f32> {
    pub classes: usize,
    pub res: usize,
    pub noise_sigma: f64,
    pub prototypes: Vec<Vec<T>>,
    images: Vec<T>,
    labels: Vec<usize>,
}

pub fn make_synthetic<T: Scalar>(
    classes: usize,
    n_per_class: usize,
    res: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticDataset<T>> {
    if classes < 2 {
        return Err(Error::TooFewClasses(classes));
    }
    if res == 0 || noise_sigma < 0.0 {
        return Err(Error::invalid(
            "synthetic",
            "resolution must be positive and sigma non-negative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = 3 * res * res;
    let prototypes: Vec<Vec<T>> = (0..classes)
        .map(|_| Tensor::<T>::randn(&[pixels], 1.0, &mut rng).into_data())
        .collect();
    let mut images = Vec::with_capacity(classes * n_per_class * pixels);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for i in 0..classes * n_per_class {
        let class = i % classes;
        let noise = Tensor::<T>::randn(&[pixels], noise_sigma, &mut rng);
        images.extend(
            prototypes[class]
                .iter()
                .zip(noise.data())
                .map(|(&p, &e)| p + e),
        );
        labels.push(class);
    }
    Ok(SyntheticDataset {
        classes,
        res,
        noise_sigma,
        prototypes,
        images,
        labels,
    })
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn pixels(&self) -> usize {
        3 * self.res * self.res
    }

    pub fn image(&self, i: usize) -> &[T] {
        &self.images[i * self.pixels()..(i + 1) * self.pixels()]
    }

    /// Stacks the given samples into `[B, 3, res, res]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let t = Tensor::new(&[indices.len(), 3, self.res, self.res], data)?;
        Ok((t, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Class of the prototype closest (Euclidean) to `image`.
    pub fn nearest_prototype(&self, image: &[T]) -> usize {
        let dist = |p: &[T]| -> f64 {
            p.iter()
                .zip(image)
                .map(|(&a, &b)| (a - b).f64().powi(2))
                .sum()
        };
        (0..self.classes)
            .min_by(|&a, &b| dist(&self.prototypes[a]).total_cmp(&dist(&self.prototypes[b])))
            .expect("at least two classes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the learning rate decays to zero.
    pub horizon: usize,
    /// Drop probability before the final classifier layer.
    pub dropout: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            horizon: 1000,
            dropout: 0.0,
        }
    }
}

impl AdamWConfig {
    /// Full-scale ImageNet settings for a published variant: `(lr, weight decay, dropout)`.
    pub fn preset(variant: &str) -> Option<Self> {
        let (lr, weight_decay, dropout) = match crate::arch::canonical_name(variant)? {
            "26M" => (8e-4, 0.08, 0.1),
            "52M" | "96M" => (8e-4, 0.10, 0.2),
            "151M" => (9e-4, 0.10, 0.2),
            "214M" => (9e-4, 0.15, 0.2),
            "294M" | "508M" => (1e-3, 0.20, 0.3),
            _ => return None,
        };
        Some(AdamWConfig {
            lr,
            weight_decay,
            dropout,
            ..Default::default()
        })
    }

    /// Cosine-decayed learning rate at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.horizon == 0 {
            return self.lr;
        }
        let t = step.min(self.horizon) as f64 / self.horizon as f64;
        0.5 * self.lr * (1.0 + (PI * t).cos())
    }
}

/// Adam moments for every parameter of one model.
#[derive(Clone, Debug)]
pub struct OptimState<T: Scalar = f32> {
    pub config: AdamWConfig,
    pub step: usize,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(model: &Model<T>, config: AdamWConfig, seed: u64) -> Self {
        let zeros: Vec<Vec<T>> = model
            .store
            .iter()
            .map(|p| vec![T::zero(); p.value.numel()])
            .collect();
        OptimState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// One decoupled-weight-decay Adam update. Parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn apply(&mut self, model: &mut Model<T>, grads: &[Option<Vec<T>>]) {
        let c = self.config;
        let lr = self.lr();
        let t = (self.step + 1) as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (lr_t, decay) = (T::c(lr), T::c(lr * c.weight_decay));
        for (i, p) in model.store.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let g = grads.get(i).and_then(|g| g.as_deref());
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / T::c(bc1);
                let vhat = v[j] / T::c(bc2);
                let update = mhat / (vhat.sqrt() + T::c(c.eps));
                *w = *w - decay * *w - lr_t * update;
            }
        }
        self.step += 1;
    }
}

/// Forward, backward and one optimizer update on a batch; returns the pre-update loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    opt: &mut OptimState<T>,
) -> Result<f64> {
    let step = opt.step;
    let (loss, grads, updates) = {
        let mut f = Forward::new(&model.store, NormMode::Train, true);
        if opt.config.dropout > 0.0 {
            let seed = rand::Rng::gen(&mut opt.rng);
            f.dropout = Some((opt.config.dropout, ChaCha8Rng::seed_from_u64(seed)));
        }
        let x = f.tape.leaf_ref(images, false);
        let out = model.forward(&mut f, x)?;
        let loss = f.tape.cross_entropy(out.logits, labels)?;
        let value = f.tape.value(loss)[0].f64();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        f.tape.backward(loss)?;
        let mut grads = vec![None; model.store.len()];
        for (id, g) in f.param_grads() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { step, loss: value });
            }
            grads[id.index()] = Some(g);
        }
        (value, grads, std::mem::take(&mut f.stat_updates))
    };
    model.apply_stat_updates(updates);
    opt.apply(model, &grads);
    Ok(loss)
}

/// Eval-mode argmax accuracy.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &SyntheticDataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(64) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.predict(&x, NormMode::Eval)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// One metrics record per step: `step,lr,loss[,acc]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<(usize, f64, f64, Option<f64>)>,
}

impl MetricsLog {
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for &(step, lr, loss, acc) in &self.rows {
            let _ = write!(s, "{step},{lr:.6e},{loss:.6}");
            if let Some(a) = acc {
                let _ = write!(s, ",{a:.4}");
            }
            s.push('\n');
        }
        s
    }

    /// Mean loss over steps in `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let w: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.0 >= from && r.0 < to)
            .map(|r| r.2)
            .collect();
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub classes: usize,
    pub per_class: usize,
    pub res: usize,
    pub noise_sigma: f64,
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
    pub data_seed: u64,
    /// Accuracy is logged every this many steps (0 disables).
    pub eval_every: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            classes: 10,
            per_class: 16,
            res: 16,
            noise_sigma: 0.5,
            steps: 2000,
            batch: 32,
            optim: AdamWConfig {
                lr: 2e-3,
                weight_decay: 1e-4,
                horizon: 2000,
                ..Default::default()
            },
            seed: 7,
            data_seed: 11,
            eval_every: 0,
        }
    }
}

pub struct ToyRun {
    pub model: Model<f32>,
    pub data: SyntheticDataset<f32>,
    pub log: MetricsLog,
    pub accuracy: f64,
}

/// Trains `spec` (default: the tiny two-block spec) on synthetic data.
pub fn train_toy(spec: Option<&ModelSpec>, cfg: &ToyConfig) -> Result<ToyRun> {
    let spec = match spec {
        Some(s) => s.clone(),
        None => tiny_spec(cfg.classes),
    };
    let input = spec.input();
    if spec.classes != cfg.classes || input.height != cfg.res || input.width != cfg.res {
        return Err(Error::invalid(
            "train",
            format!(
                "spec expects {}x{} inputs and {} classes; data has {}x{} and {}",
                input.height, input.width, spec.classes, cfg.res, cfg.res, cfg.classes
            ),
        ));
    }
    let mut model = build_model::<f32>(&spec, cfg.seed)?;
    let data = make_synthetic::<f32>(
        cfg.classes,
        cfg.per_class,
        cfg.res,
        cfg.noise_sigma,
        cfg.data_seed,
    )?;
    let mut opt = OptimState::new(&model, cfg.optim, cfg.seed ^ 0x5eed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.data_seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut log = MetricsLog::default();
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (x, y) = data.batch(&idx)?;
        let lr = opt.lr();
        let loss = train_step(&mut model, &x, &y, &mut opt)?;
        let acc = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            Some(evaluate(&model, &data)?)
        } else {
            None
        };
        log.rows.push((step, lr, loss, acc));
    }
    let accuracy = evaluate(&model, &data)?;
    Ok(ToyRun {
        model,
        data,
        log,
        accuracy,
    })
}

pub const ATTENTION_HEADER: &str = "block,direction,head,token,y,x,weight";

/// Attention maps of every block, both directions, every head, for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub records: Vec<AttentionRecord>,
}

pub fn export_attention<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<AttentionDump> {
    let image = if image.shape().len() == 3 {
        image.clone().reshape(&[&[1][..], image.shape()].concat())?
    } else {
        image.clone()
    };
    Ok(AttentionDump {
        records: model.attention_maps(&image)?,
    })
}

impl AttentionDump {
    pub fn to_records(&self) -> String {
        let rows: usize = self
            .records
            .iter()
            .map(|r| r.heads() * r.tokens * r.height * r.width)
            .sum();
        let mut s = String::with_capacity(32 * rows + 64);
        s.push_str(ATTENTION_HEADER);
        s.push('\n');
        for r in &self.records {
            for head in 0..r.heads() {
                for token in 0..r.tokens {
                    for y in 0..r.height {
                        for x in 0..r.width {
                            let _ = writeln!(
                                s,
                                "{},{},{head},{token},{y},{x},{:.6e}",
                                r.block,
                                r.direction.as_str(),
                                r.weight(head, token, y, x)
                            );
                        }
                    }
                }
            }
        }
        s
    }
}

/// A deterministic synthetic image `[1, 3, res, res]`.
pub fn synthetic_image<T: Scalar>(res: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[1, 3, res, res], 1.0, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_data_is_balanced_and_seeded() {
        let a = make_synthetic::<f32>(3, 4, 4, 0.1, 1).unwrap();
        let b = make_synthetic::<f32>(3, 4, 4, 0.1, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        for c in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 4);
        }
        for i in 0..a.len() {
            assert_eq!(a.nearest_prototype(a.image(i)), a.labels()[i]);
        }
        let (x, y) = a.batch(&[0, 5]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 4, 4]);
        assert_eq!(y, vec![0, 2]);
    }

    #[test]
    fn synthetic_data_validates_arguments() {
        assert!(matches!(
            make_synthetic::<f32>(1, 4, 4, 0.1, 0),
            Err(Error::TooFewClasses(1))
        ));
        assert!(make_synthetic::<f32>(2, 4, 0, 0.1, 0).is_err());
        assert!(make_synthetic::<f32>(2, 4, 4, -1.0, 0).is_err());
    }

    #[test]
    fn evaluation_rejects_empty_data() {
        let spec = tiny_spec(2);
        let model = build_model::<f32>(&spec, 0).unwrap();
        let empty = make_synthetic::<f32>(2, 0, 16, 0.1, 0).unwrap();
        assert!(matches!(evaluate(&model, &empty), Err(Error::EmptyDataset)));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = AdamWConfig {
            lr: 2.0,
            horizon: 10,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 2.0);
        assert!((c.lr_at(5) - 1.0).abs() < 1e-12);
        assert!(c.lr_at(10).abs() < 1e-12);
        assert!(c.lr_at(50).abs() < 1e-12);
    }

    #[test]
    fn presets_follow_published_settings() {
        let p = AdamWConfig::preset("294M").unwrap();
        assert_eq!((p.lr, p.weight_decay, p.dropout), (1e-3, 0.20, 0.3));
        let p = AdamWConfig::preset("26m").unwrap();
        assert_eq!((p.lr, p.weight_decay, p.dropout), (8e-4, 0.08, 0.1));
        assert!(AdamWConfig::preset("1M").is_none());
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut model = build_model::<f64>(&tiny_spec(2), 0).unwrap();
        let before: Vec<f64> = model.store.iter().next().unwrap().value.data().to_vec();
        let cfg = AdamWConfig {
            lr: 0.01,
            horizon: 0,
            ..Default::default()
        };
        let mut opt = OptimState::new(&model, cfg, 0);
        let mut grads = vec![None; model.store.len()];
        grads[0] = Some(
            before
                .iter()
                .enumerate()
                .map(|(i, _)| if i % 2 == 0 { 3.0 } else { -0.5 })
                .collect(),
        );
        opt.apply(&mut model, &grads);
        let after = model.store.iter().next().unwrap().value.data();
        for (i, (a, b)) in after.iter().zip(&before).enumerate() {
            let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
            assert!((a - b - sign * 0.01).abs() < 1e-8);
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut model = build_model::<f64>(&tiny_spec(2), 0).unwrap();
        let before: Vec<f64> = model.store.iter().next().unwrap().value.data().to_vec();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            horizon: 0,
            ..Default::default()
        };
        let mut opt = OptimState::new(&model, cfg, 0);
        opt.apply(&mut model, &[]);
        let after = model.store.iter().next().unwrap().value.data();
        for (a, b) in after.iter().zip(&before) {
            assert!((a - 0.95 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_steps_fit_one_batch() {
        let spec = tiny_spec(3);
        let mut model = build_model::<f32>(&spec, 0).unwrap();
        let data = make_synthetic::<f32>(3, 2, 16, 0.2, 0).unwrap();
        let (x, y) = data.batch(&(0..6).collect::<Vec<_>>()).unwrap();
        let mut opt = OptimState::new(
            &model,
            AdamWConfig {
                lr: 3e-3,
                horizon: 0,
                ..Default::default()
            },
            0,
        );
        let first = train_step(&mut model, &x, &y, &mut opt).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = train_step(&mut model, &x, &y, &mut opt).unwrap();
        }
        assert!(last < first * 0.5, "{first} -> {last}");
    }

    #[test]
    fn short_runs_are_reproducible() {
        let cfg = ToyConfig {
            steps: 5,
            per_class: 2,
            batch: 8,
            eval_every: 5,
            ..Default::default()
        };
        let a = train_toy(None, &cfg).unwrap();
        let b = train_toy(None, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.rows.len(), 5);
        assert!(a.log.rows[4].3.is_some());
        let text = a.log.to_records();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().last().unwrap().split(',').count(), 4);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 3);
    }

    #[test]
    fn mismatched_spec_is_rejected() {
        let cfg = ToyConfig {
            steps: 1,
            ..Default::default()
        };
        assert!(train_toy(Some(&tiny_spec(3)), &cfg).is_err());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, -1.0]), 1);
        assert_eq!(argmax(&[f64::NEG_INFINITY, -5.0]), 1);
    }

    #[test]
    fn attention_dump_layout() {
        let model = build_model::<f32>(&tiny_spec(4), 0).unwrap();
        let dump = export_attention(&model, &synthetic_image(16, 0)).unwrap();
        let text = dump.to_records();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(ATTENTION_HEADER));
        // The downsampling block reads 8x8 and writes 4x4; the second block
        // stays at 4x4. Three tokens, two heads.
        assert_eq!(lines.count(), 2 * 3 * (64 + 16 + 16 + 16));
        let image = synthetic_image::<f32>(16, 0);
        let squeezed = image.clone().reshape(&[3, 16, 16]).unwrap();
        assert_eq!(export_attention(&model, &squeezed).unwrap(), dump);
    }
}
