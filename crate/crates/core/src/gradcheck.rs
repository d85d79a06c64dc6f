//! Finite-difference verification of reverse-mode gradients in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{tiny_spec, ModelSpec};
use crate::autodiff::{finite_diff_grad, relative_error, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::nn::Forward;
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely. Central differences
/// carry roundoff of roughly `ulp(loss) / EPS`, so this sits well above it.
pub const FLOOR: f64 = 1e-6;
/// Inputs closer than this to an activation kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!(
                "{:<40} {:>6} {:.3e}\n",
                g.group, g.checked, g.max_rel_error
            ));
        }
        s.push_str(&format!(
            "max relative error {:.3e}\n",
            self.max_rel_error()
        ));
        s
    }
}

/// Compares backward against central differences for a scalar function of
/// `inputs`, built on a fresh tape by `build`. Returns one entry per input.
pub fn check_function(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_ref(t, true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut report = GradCheckReport::default();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.leaf_ref(if j == i { probe } else { v }, false))
                    .collect();
                let l = build(&mut t, &vs).expect("build succeeded once");
                t.value(l)[0]
            },
            x,
            EPS,
        );
        let err = analytic
            .iter()
            .zip(numeric.data())
            .map(|(&a, &b)| relative_error(a, b, FLOOR))
            .fold(0.0, f64::max);
        report.groups.push(GroupError {
            group: format!("input{i}"),
            checked: x.numel(),
            max_rel_error: err,
        });
    }
    Ok(report)
}

/// Gives every parameter (including zero-initialized ones) a random value so
/// that no gradient path is trivially inactive.
pub fn randomize(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.store.iter_mut() {
        let fan_in: usize = p.value.shape()[1..].iter().product::<usize>().max(1);
        let scale = if p.value.shape().len() > 1 {
            (1.0 / fan_in as f64).sqrt()
        } else {
            0.2
        };
        let noise = Tensor::<f64>::randn(p.value.shape(), scale, &mut rng);
        for (v, e) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += e;
        }
    }
}

fn mean_logit(
    model: &Model<f64>,
    images: &Tensor<f64>,
    grads: bool,
) -> Result<(f64, f64, Vec<Option<Vec<f64>>>)> {
    let mut f = Forward::new(&model.store, NormMode::Train, grads);
    let x = f.tape.leaf_ref(images, false);
    let out = model.forward(&mut f, x)?;
    let loss = f.tape.mean(out.logits)?;
    let value = f.tape.value(loss)[0];
    let margin = f.tape.kink_margin();
    let mut g = vec![None; model.store.len()];
    if grads {
        f.tape.backward(loss)?;
        for (id, v) in f.param_grads() {
            g[id.index()] = Some(v);
        }
    }
    Ok((value, margin, g))
}

/// Checks the gradient of the mean logit with respect to every parameter
/// tensor of `spec`'s model, sampling up to `per_group` elements from each.
pub fn check_model(
    spec: &ModelSpec,
    seed: u64,
    batch: usize,
    per_group: usize,
) -> Result<GradCheckReport> {
    let mut model = build_model::<f64>(spec, seed)?;
    randomize(&mut model, seed.wrapping_add(1));
    let input = spec.input();
    let shape = [batch, 3, input.height, input.width];

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut images = None;
    for _ in 0..64 {
        let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        let (_, margin, _) = mean_logit(&model, &x, false)?;
        if margin > KINK_MARGIN {
            images = Some(x);
            break;
        }
    }
    let images = images.ok_or_else(|| {
        Error::invalid(
            "gradcheck",
            "could not draw inputs away from activation kinks",
        )
    })?;

    let (_, _, grads) = mean_logit(&model, &images, true)?;
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let n = model.store.get(id).value.numel();
        let analytic = grads[id.index()].clone().unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = if n <= per_group {
            (0..n).collect()
        } else {
            (0..per_group).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut worst: f64 = 0.0;
        for &j in &picks {
            let orig = model.store.get(id).value.data()[j];
            model.store.get_mut(id).value.data_mut()[j] = orig + EPS;
            let (up, m_up, _) = mean_logit(&model, &images, false)?;
            model.store.get_mut(id).value.data_mut()[j] = orig - EPS;
            let (down, m_down, _) = mean_logit(&model, &images, false)?;
            model.store.get_mut(id).value.data_mut()[j] = orig;
            if m_up.min(m_down) < EPS {
                continue;
            }
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(relative_error(analytic[j], numeric, FLOOR));
        }
        report.groups.push(GroupError {
            group: model.store.get(id).name.clone(),
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// The default suite: the tiny two-block model with a batch of two.
pub fn check_tiny(seed: u64) -> Result<GradCheckReport> {
    check_model(&tiny_spec(4), seed, 2, 4)
}
