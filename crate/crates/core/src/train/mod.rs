//! Losses, the Adam optimizer and the training loop.

mod eval;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use eval::{
    constant_velocity, displacement_errors, eval_reasoning, evaluate, permutation_accuracy, Displacement,
    EvalReport, ReasoningScore,
};

use crate::error::{Error, Result};
use crate::model::{EqMotion, Pass};
use crate::numerics::{Graph, ParameterSet, Tensor, Var};
use crate::simulate::LabeledSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiply the learning rate by this every `lr_decay_interval` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 50,
            learning_rate: 5e-4,
            lr_decay_factor: 1.0,
            lr_decay_interval: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::param(format!("{key} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::param("adam_epsilon must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::param("lr_decay_factor must lie in (0, 1]"));
        }
        if self.lr_decay_interval == 0 {
            return Err(Error::param("lr_decay_interval must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_decay_interval) as i32;
        self.learning_rate * self.lr_decay_factor.powi(steps)
    }

    pub fn adam(&self, epoch: usize) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate_at(epoch),
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParameterSet,
    pub v: ParameterSet,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Optimizer state plus the number of finished epochs, enough to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_completed: usize,
    pub adam: AdamState,
}

/// One bias-corrected Adam update. `grads` must name every parameter.
pub fn adam_step(params: &mut ParameterSet, grads: &ParameterSet, state: &mut AdamState, hp: &AdamHyper) -> Result<()> {
    let aligned = grads.names() == params.names();
    let mut order = Vec::with_capacity(params.len());
    for (i, name) in params.names().iter().enumerate() {
        let gi = if aligned {
            i
        } else {
            grads
                .id(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?
                .index()
        };
        if grads.tensors()[gi].shape() != params.tensors()[i].shape() {
            return Err(Error::dim(format!("gradient for {name} has the wrong shape")));
        }
        order.push(gi);
    }
    if state.m.names() != params.names() || state.v.names() != params.names() {
        return Err(Error::Contract("optimizer state does not match the parameters".into()));
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let (ms, vs) = (state.m.tensors_mut(), state.v.tensors_mut());
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads.tensors()[order[i]].data();
        let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g[k];
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
    }
    Ok(())
}

/// `sum ||pred - target||^2` over every agent, step and coordinate.
pub fn squared_error(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        )));
    }
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    g.sum(sq)
}

/// The smallest per-head squared error and the index of that head. Only the
/// winning head is on the returned node's path, so only it gets gradient.
pub fn min_head_loss_var(g: &mut Graph, preds: &[Var], target: &Tensor) -> Result<(Var, usize)> {
    if preds.is_empty() {
        return Err(Error::param("min_head_loss needs at least one head"));
    }
    let mut best: Option<(Var, usize, f64)> = None;
    for (h, &p) in preds.iter().enumerate() {
        let l = squared_error(g, p, target)?;
        let value = g.value(l).data()[0];
        if best.is_none_or(|(_, _, b)| value < b) {
            best = Some((l, h, value));
        }
    }
    let (l, h, _) = best.expect("non-empty");
    Ok((l, h))
}

/// Minimum over heads of the squared error.
pub fn min_head_loss(preds: &[Tensor], target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = preds.iter().map(|p| g.constant(p.clone())).collect();
    let (l, _) = min_head_loss_var(&mut g, &vars, target)?;
    Ok(g.value(l).data()[0])
}

/// Loss of one sample and its gradient with respect to every parameter.
pub fn sample_gradient(model: &EqMotion, sample: &LabeledSample) -> Result<(f64, ParameterSet)> {
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let loss = {
        let mut pass = Pass::new(model, &mut g, &vars)?;
        let out = pass.forward(&sample.past)?;
        min_head_loss_var(pass.graph(), &out.predictions, &sample.future)?.0
    };
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    let mut out = model.params().zeros_like();
    for (t, v) in out.tensors_mut().iter_mut().zip(&vars) {
        if let Some(gt) = grads.get(*v) {
            t.data_mut().copy_from_slice(gt.data());
        }
    }
    Ok((value, out))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean sample loss of every epoch run by this call.
    pub history: Vec<f64>,
    pub state: TrainState,
}

fn check_sample(model: &EqMotion, s: &LabeledSample, idx: usize) -> Result<()> {
    let c = model.config();
    let past = [c.num_agents, c.past_len, c.space_dim];
    let future = [c.num_agents, c.future_len, c.space_dim];
    if s.past.shape() != past || s.future.shape() != future {
        return Err(Error::dim(format!(
            "sample {idx}: past {:?} / future {:?} do not match the model ({past:?} / {future:?})",
            s.past.shape(),
            s.future.shape()
        )));
    }
    Ok(())
}

/// Train until `cfg.epochs` epochs are complete, continuing from `resume`
/// when given. Mini-batch gradients are averaged; the batch order of epoch
/// `e` depends only on `(cfg.seed, e)`.
pub fn train_loop(
    model: &mut EqMotion,
    data: &[LabeledSample],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::param("training data is empty"));
    }
    for (i, s) in data.iter().enumerate() {
        check_sample(model, s, i)?;
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState {
            epochs_completed: 0,
            adam: AdamState::new(model.params()),
        },
    };
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in state.epochs_completed..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let hp = cfg.adam(epoch);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = model.params().zeros_like();
            for &i in idx {
                let (loss, grads) = sample_gradient(model, &data[i])?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
                total += loss;
                for (a, g) in acc.tensors_mut().iter_mut().zip(grads.tensors()) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            let scale = 1.0 / idx.len() as f64;
            for a in acc.tensors_mut() {
                a.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            adam_step(model.params_mut(), &acc, &mut state.adam, &hp)?;
        }
        let mean = total / data.len() as f64;
        history.push(mean);
        state.epochs_completed = epoch + 1;
        on_epoch(&EpochLog {
            epoch,
            loss: mean,
            lr: hp.learning_rate,
        })?;
    }
    Ok(TrainOutcome { history, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::simulate::{generate_dataset, SimConfig};

    fn hyper(lr: f64) -> AdamHyper {
        TrainConfig {
            learning_rate: lr,
            ..TrainConfig::default()
        }
        .adam(0)
    }

    fn single(name: &str, v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push(name, Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single("w", 1.5);
        let mut s = AdamState::new(&p);
        let g = p.zeros_like();
        adam_step(&mut p, &g, &mut s, &hyper(1e-3)).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 1.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single("w", 0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &single("w", 1.0), &mut s, &hyper(1e-3)).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps).
        let w = p.tensors()[0].data()[0];
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn update_opposes_corrected_first_moment() {
        let mut p = single("w", 0.0);
        let mut s = AdamState::new(&p);
        for g in [1.0, -3.0, 0.5, 2.0, -0.1] {
            let before = p.tensors()[0].data()[0];
            adam_step(&mut p, &single("w", g), &mut s, &hyper(1e-2)).unwrap();
            let delta = p.tensors()[0].data()[0] - before;
            let m = s.m.tensors()[0].data()[0];
            assert!(delta * m < 0.0, "delta {delta} m {m}");
            assert!(s.v.tensors()[0].data()[0] >= 0.0);
        }
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = single("w", 0.0);
        p.push("bias", Tensor::scalar(0.0));
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &single("w", 1.0), &mut s, &hyper(1e-3)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn min_head_loss_examples() {
        let gt = Tensor::zeros(&[1, 1, 2]);
        let a = Tensor::new(vec![1, 1, 2], vec![2.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 2], vec![0.0, 3.0]).unwrap();
        assert_eq!(min_head_loss(&[b.clone(), a.clone()], &gt).unwrap(), 4.0);
        assert_eq!(min_head_loss(&[a.clone(), gt.clone(), b], &gt).unwrap(), 0.0);
        assert_eq!(min_head_loss(&[a], &gt).unwrap(), 4.0);
        assert!(matches!(min_head_loss(&[], &gt), Err(Error::Parameter(_))));
    }

    #[test]
    fn gradient_flows_only_through_winning_head() {
        let gt = Tensor::zeros(&[1, 1, 1]);
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap());
        let b = g.param(Tensor::new(vec![1, 1, 1], vec![-1.0]).unwrap());
        let (l, h) = min_head_loss_var(&mut g, &[a, b], &gt).unwrap();
        assert_eq!(h, 1);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(a).data(), &[0.0]);
        assert_eq!(grads.wrt(b).data(), &[-2.0]);
    }

    #[test]
    fn config_validation_and_decay() {
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        let cfg = TrainConfig {
            learning_rate: 1.0,
            lr_decay_factor: 0.8,
            lr_decay_interval: 2,
            ..Default::default()
        };
        assert_eq!(cfg.learning_rate_at(1), 1.0);
        assert!((cfg.learning_rate_at(2) - 0.8).abs() < 1e-15);
        assert!((cfg.learning_rate_at(5) - 0.64).abs() < 1e-15);
    }

    fn tiny() -> (EqMotion, Vec<LabeledSample>) {
        let sim = SimConfig {
            num_particles: 3,
            past_len: 4,
            future_len: 4,
            downsample: 20,
            ..SimConfig::default()
        };
        let data = generate_dataset(&sim, 6, 4).unwrap();
        let cfg = ModelConfig {
            num_agents: 3,
            past_len: 4,
            future_len: 4,
            geo_channels: 4,
            pattern_dim: 4,
            hidden_dim: 8,
            num_layers: 2,
            ..ModelConfig::default()
        };
        (EqMotion::new(cfg, 1).unwrap(), data)
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (mut model, data) = tiny();
        let before = model.params().clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train_loop(&mut model, &data, &cfg, None, |_| Ok(())).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 3,
            ..Default::default()
        };
        let (mut a, data) = tiny();
        let full = train_loop(&mut a, &data, &cfg, None, |_| Ok(())).unwrap();

        let (mut b, _) = tiny();
        let again = train_loop(&mut b, &data, &cfg, None, |_| Ok(())).unwrap();
        assert_eq!(full.history, again.history);
        assert_eq!(a.params(), b.params());

        let (mut c, _) = tiny();
        let half = TrainConfig { epochs: 2, ..cfg.clone() };
        let first = train_loop(&mut c, &data, &half, None, |_| Ok(())).unwrap();
        let mut logged = Vec::new();
        let second = train_loop(&mut c, &data, &cfg, Some(first.state), |e| {
            logged.push(e.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(logged, [2, 3]);
        assert_eq!(second.state.adam.step, full.state.adam.step);
        assert_eq!([first.history, second.history].concat(), full.history);
        assert_eq!(c.params(), a.params());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut model, mut data) = tiny();
        data[2].future = Tensor::zeros(&[3, 5, 3]);
        let err = train_loop(&mut model, &data, &TrainConfig::default(), None, |_| Ok(())).unwrap_err();
        assert!(err.to_string().contains("sample 2"), "{err}");
    }

    #[test]
    fn non_finite_loss_aborts_with_position() {
        let (mut model, mut data) = tiny();
        data[0].future.data_mut()[0] = f64::INFINITY;
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
        match train_loop(&mut model, &data, &cfg, None, |_| Ok(())) {
            Err(Error::NonFiniteLoss { epoch: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
