//! Robust training with periodic deactivation.
//!
//! Before the first epoch the backbone is cut to the budget. Every epoch
//! trains all parameters (dormant elements may regrow), and every `t_exp`
//! epochs the budget is restored by deactivating the weakest elements. The
//! last epoch always ends with a deactivation.

use std::io::Write;

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::autodiff::{Graph, Var};
use crate::data::{self, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions};
use crate::lirpa::{self, CrownOptions, Engine, PerturbSpec};
use crate::net::{LastEvent, Network, ParamVars};
use crate::sparsity::{Budget, Deactivator};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RampShape {
    #[default]
    Linear,
    /// `p²` on the ramp fraction `p`; starts gently.
    Smooth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsSchedule {
    pub eps_max: f64,
    pub start: usize,
    pub length: usize,
    #[serde(default)]
    pub shape: RampShape,
}

impl EpsSchedule {
    pub fn new(eps_max: f64, start: usize, length: usize) -> Self {
        Self {
            eps_max,
            start,
            length,
            shape: RampShape::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_max >= 0.0 && self.eps_max.is_finite()) || self.length == 0 {
            return Err(Error::Config(format!(
                "invalid ε schedule: eps_max {} with ramp length {}",
                self.eps_max, self.length
            )));
        }
        Ok(())
    }

    /// Radius for epoch `t` (1-based): 0 before `start`, then a ramp that
    /// reaches `eps_max` at `start + length`.
    pub fn eps_at(&self, t: usize) -> f64 {
        if t < self.start {
            return 0.0;
        }
        let p = ((t - self.start) as f64 / self.length as f64).min(1.0);
        match self.shape {
            RampShape::Linear => self.eps_max * p,
            RampShape::Smooth => self.eps_max * p * p,
        }
    }

    pub fn ramp_end(&self) -> usize {
        self.start + self.length
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    /// Epoch offsets after the end of the ε ramp; `None` places them at 70%
    /// and 90% of the post-ramp epochs.
    pub milestones: Option<Vec<usize>>,
    pub factor: f64,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self {
            milestones: None,
            factor: 0.2,
        }
    }
}

/// How the CROWN-IBP training bound is blended with the interval bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMix {
    /// The CROWN-IBP bound at every radius.
    Crown,
    /// Interval weight `ε_t / ε_max`: CROWN-IBP at the start of the ramp,
    /// the interval bound once `ε_max` is reached.
    #[default]
    AnnealToIbp,
}

impl BoundMix {
    pub fn ibp_weight(self, eps: f64, eps_max: f64) -> f64 {
        match self {
            BoundMix::Crown => 0.0,
            BoundMix::AnnealToIbp if eps_max > 0.0 => (eps / eps_max).clamp(0.0, 1.0),
            BoundMix::AnnealToIbp => 0.0,
        }
    }
}

impl std::str::FromStr for BoundMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crown" => Ok(BoundMix::Crown),
            "anneal-to-ibp" => Ok(BoundMix::AnnealToIbp),
            _ => Err(Error::Config(format!(
                "unknown bound mix `{s}` (expected crown or anneal-to-ibp)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub epochs: usize,
    pub t_exp: usize,
    pub budget: Budget,
    pub optimizer: SgdConfig,
    pub lr_decay: LrDecay,
    pub batch_size: usize,
    pub seed: u64,
    pub engine: Engine,
    pub bound_mix: BoundMix,
    /// From this epoch on, dormant elements are re-zeroed after every step.
    pub freeze_after: Option<usize>,
    /// Radius of the per-epoch held-out verification; defaults to `eps_max`.
    pub eval_eps: Option<f64>,
    pub eval_engine: Engine,
    /// Use only the first `n` training samples.
    pub train_subset: Option<usize>,
    /// Use only the first `n` held-out samples for per-epoch reports.
    pub eval_subset: Option<usize>,
    pub clip: Option<(f64, f64)>,
    pub augment: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs: 100,
            t_exp: 10,
            budget: Budget::Fraction(0.5),
            optimizer: SgdConfig::default(),
            lr_decay: LrDecay::default(),
            batch_size: 128,
            seed: 0,
            engine: Engine::CrownIbp,
            bound_mix: BoundMix::AnnealToIbp,
            freeze_after: None,
            eval_eps: None,
            eval_engine: Engine::Ibp,
            train_subset: None,
            eval_subset: None,
            clip: Some((0.0, 1.0)),
            augment: false,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self, backbone: usize) -> Result<usize> {
        if self.t_exp == 0 || self.epochs == 0 || !self.epochs.is_multiple_of(self.t_exp) {
            return Err(Error::Config(format!(
                "epochs ({}) must be a positive multiple of t_exp ({})",
                self.epochs, self.t_exp
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && (0.0..1.0).contains(&o.momentum) && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if !(self.lr_decay.factor > 0.0 && self.lr_decay.factor <= 1.0) {
            return Err(Error::Config("lr decay factor must lie in (0, 1]".into()));
        }
        let k = self.budget.resolve(backbone)?;
        if k >= backbone {
            return Err(Error::Config(format!(
                "budget {k} must be smaller than the backbone ({backbone} parameters)"
            )));
        }
        Ok(k)
    }

    /// Absolute epochs after which the learning rate is multiplied by the
    /// decay factor.
    pub fn lr_milestones(&self, sched: &EpsSchedule) -> Vec<usize> {
        let end = sched.ramp_end();
        let post = self.epochs.saturating_sub(end);
        let offsets = self.lr_decay.milestones.clone().unwrap_or_else(|| {
            vec![
                (0.7 * post as f64).round() as usize,
                (0.9 * post as f64).round() as usize,
            ]
        });
        offsets.into_iter().map(|o| end + o).collect()
    }

    pub fn lr_at(&self, sched: &EpsSchedule, t: usize) -> f64 {
        let passed = self
            .lr_milestones(sched)
            .iter()
            .filter(|&&m| t > m && t > sched.ramp_end())
            .count();
        self.optimizer.lr * self.lr_decay.factor.powi(passed as i32)
    }
}

/// SGD with momentum: `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &Network<T>, config: SgdConfig) -> Self {
        let velocity = (0..net.arch().layers.len())
            .map(|i| {
                net.layer_params(i)
                    .map(|p| (Tensor::zeros(p.weight.shape()), Tensor::zeros(p.bias.shape())))
            })
            .collect();
        Self { config, velocity }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &[Option<(Tensor<T>, Tensor<T>)>], lr: f64) {
        let mu = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        let lr = T::lit(lr);
        for (i, g) in grads.iter().enumerate() {
            let (Some((gw, gb)), Some((vw, vb))) = (g, self.velocity[i].as_mut()) else {
                continue;
            };
            let p = net.layer_params_mut(i).unwrap();
            for (theta, v, g) in [(&mut p.weight, vw, gw), (&mut p.bias, vb, gb)] {
                for ((t, v), &g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *v = mu * *v + g + wd * *t;
                    *t = *t - lr * *v;
                }
            }
        }
    }

    /// Zeros the momentum of every dormant element.
    pub fn reset_dormant(&mut self, net: &Network<T>) {
        for (i, p) in net.params() {
            let (vw, vb) = self.velocity[i].as_mut().unwrap();
            let k = vw.len() / p.elements();
            for e in (0..p.elements()).filter(|&e| !p.mask[e]) {
                vw.data_mut()[e * k..(e + 1) * k].iter_mut().for_each(|v| *v = T::zero());
                vb.data_mut()[e] = T::zero();
            }
        }
    }
}

/// Worst-case cross-entropy: pseudo-logits `z_i = −m̲_i` (`z_y = 0`). At
/// `eps = 0` this is plain cross-entropy on the logits.
#[allow(clippy::too_many_arguments)]
pub fn robust_loss<T: Scalar>(
    net: &Network<T>,
    g: &mut Graph<T>,
    vars: &ParamVars,
    x: &Tensor<T>,
    labels: &[usize],
    eps: f64,
    engine: Engine,
    opts: CrownOptions,
    normalization: &Normalization,
    clip: Option<(f64, f64)>,
) -> Result<Var> {
    if eps == 0.0 {
        let xv = g.constant(normalization.apply(x)?);
        let z = net.forward_graph(g, vars, xv)?;
        return g.cross_entropy(z, labels);
    }
    let spec = PerturbSpec::new(x.clone(), eps)
        .with_clip(clip)
        .with_normalization(Some(normalization.clone()));
    let m = lirpa::margin_graph(net, g, vars, &spec, labels, engine, opts)?;
    let z = g.neg(m);
    g.cross_entropy(z, labels)
}

/// Loss and parameter gradients for one minibatch.
#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub fn loss_and_grads<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    eps: f64,
    engine: Engine,
    opts: CrownOptions,
    normalization: &Normalization,
    clip: Option<(f64, f64)>,
) -> Result<(T, Vec<Option<(Tensor<T>, Tensor<T>)>>)> {
    let mut g = Graph::new();
    let vars = net.param_vars(&mut g, true);
    let loss = robust_loss(net, &mut g, &vars, x, labels, eps, engine, opts, normalization, clip)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .map(|v| v.map(|(w, b)| (g.grad(w), g.grad(b))))
        .collect();
    Ok((g.value(loss).item(), grads))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub eps: f64,
    pub lr: f64,
    pub loss: f64,
    pub standard_accuracy: f64,
    pub verified_accuracy: f64,
    pub active_before: usize,
    pub active_after: usize,
    pub deactivated: bool,
}

pub const METRICS_HEADER: &str =
    "epoch,eps,lr,loss,standard_acc,verified_acc,active_before,active_after,deactivated";

impl EpochReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6e},{:.9e},{:.4},{:.4},{},{},{}",
            self.epoch,
            self.eps,
            self.lr,
            self.loss,
            self.standard_accuracy,
            self.verified_accuracy,
            self.active_before,
            self.active_after,
            self.deactivated as u8
        )
    }
}

pub fn write_metrics(reports: &[EpochReport], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network<f32>,
    pub reports: Vec<EpochReport>,
    pub budget: usize,
}

/// Runs the full schedule. `on_epoch` sees every report as it is produced.
pub fn train(
    mut net: Network<f32>,
    train_set: &Dataset,
    held_out: &Dataset,
    sched: &EpsSchedule,
    plan: &TrainPlan,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    sched.validate()?;
    let budget = plan.validate(net.total_param_count())?;
    let train_set = match plan.train_subset {
        Some(n) => train_set.take(n),
        None => train_set.clone(),
    };
    let held_out = match plan.eval_subset {
        Some(n) => held_out.take(n),
        None => held_out.clone(),
    };
    if train_set.is_empty() || held_out.is_empty() {
        return Err(Error::Config("training and held-out sets must be non-empty".into()));
    }
    let eval_eps = plan.eval_eps.unwrap_or(sched.eps_max);
    let eval_opts = EvalOptions {
        engine: plan.eval_engine,
        clip: plan.clip,
        batch_size: 500,
    };
    let norm = train_set.normalization.clone();

    let mut deact = Deactivator::new(budget);
    deact.deactivate(&mut net)?;
    let mut opt = Sgd::new(&net, plan.optimizer.clone());
    let mut reports = Vec::with_capacity(plan.epochs);

    for t in 1..=plan.epochs {
        let eps = sched.eps_at(t);
        let lr = plan.lr_at(sched, t);
        let images = if plan.augment {
            data::augment(&train_set.images, plan.seed, t as u64)
        } else {
            train_set.images.clone()
        };
        let frozen = plan.freeze_after.is_some_and(|f| t > f);
        let bound = CrownOptions {
            ibp_weight: plan.bound_mix.ibp_weight(eps, sched.eps_max),
            ..Default::default()
        };
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for idx in data::batches(train_set.len(), plan.batch_size, plan.seed, t as u64) {
            let x = images.gather_outer(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, grads) =
                loss_and_grads(&net, &x, &y, eps, plan.engine, bound, &norm, plan.clip)?;
            if !loss.is_finite() {
                return Err(Error::Consistency(format!(
                    "non-finite loss at epoch {t}"
                )));
            }
            opt.step(&mut net, &grads, lr);
            if frozen {
                net.apply_mask();
            }
            loss_sum += loss as f64 * y.len() as f64;
            seen += y.len();
        }
        net.refresh_masks();
        let active_before = net.active_param_count();
        let deactivated = t % plan.t_exp == 0;
        if deactivated {
            deact.deactivate(&mut net)?;
            opt.reset_dormant(&net);
        } else {
            net.last_event = LastEvent::Train;
        }
        let (ev, _) = eval::evaluate(&net, &held_out, eval_eps, &eval_opts)?;
        let report = EpochReport {
            epoch: t,
            eps,
            lr,
            loss: loss_sum / seen as f64,
            standard_accuracy: ev.standard_accuracy,
            verified_accuracy: ev.verified_accuracy,
            active_before,
            active_after: net.active_param_count(),
            deactivated,
        };
        info!(
            epoch = t,
            eps,
            loss = report.loss,
            std = report.standard_accuracy,
            ver = report.verified_accuracy,
            active = report.active_after,
            "epoch done"
        );
        on_epoch(&report);
        reports.push(report);
    }
    Ok(TrainOutcome {
        net,
        reports,
        budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_mix_weights() {
        assert_eq!(BoundMix::Crown.ibp_weight(0.05, 0.1), 0.0);
        assert_eq!(BoundMix::AnnealToIbp.ibp_weight(0.0, 0.1), 0.0);
        assert_eq!(BoundMix::AnnealToIbp.ibp_weight(0.05, 0.1), 0.5);
        assert_eq!(BoundMix::AnnealToIbp.ibp_weight(0.1, 0.1), 1.0);
        assert_eq!(BoundMix::AnnealToIbp.ibp_weight(0.0, 0.0), 0.0);
        assert_eq!("crown".parse::<BoundMix>().unwrap(), BoundMix::Crown);
        assert!("ibp".parse::<BoundMix>().is_err());
    }
    use crate::data::Split;
    use crate::net::{Architecture, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        let s = EpsSchedule::new(0.4, 10, 60);
        assert_eq!(s.eps_at(5), 0.0);
        assert!((s.eps_at(70) - 0.4).abs() < 1e-15);
        assert!((s.eps_at(40) - 0.2).abs() < 1e-15);
        assert_eq!(s.eps_at(500), 0.4);
        let mut prev = 0.0;
        for t in 1..100 {
            let e = s.eps_at(t);
            assert!(e >= prev && e <= 0.4);
            prev = e;
        }
        let smooth = EpsSchedule {
            shape: RampShape::Smooth,
            ..s
        };
        assert!((smooth.eps_at(40) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn plan_validation() {
        let mut p = TrainPlan {
            epochs: 20,
            t_exp: 5,
            ..Default::default()
        };
        assert_eq!(p.validate(1000).unwrap(), 500);
        p.t_exp = 3;
        assert!(matches!(p.validate(1000), Err(Error::Config(_))));
        p.t_exp = 5;
        p.budget = Budget::Absolute(1000);
        assert!(p.validate(1000).is_err());
    }

    #[test]
    fn lr_decays_after_the_ramp() {
        let s = EpsSchedule::new(0.1, 10, 60);
        let p = TrainPlan {
            epochs: 100,
            ..Default::default()
        };
        assert_eq!(p.lr_milestones(&s), vec![91, 97]);
        assert_eq!(p.lr_at(&s, 70), 0.05);
        assert_eq!(p.lr_at(&s, 91), 0.05);
        assert!((p.lr_at(&s, 92) - 0.01).abs() < 1e-15);
        assert!((p.lr_at(&s, 100) - 0.002).abs() < 1e-15);
    }

    fn tiny() -> Network<f64> {
        let arch = Architecture {
            input_shape: vec![2],
            layers: vec![LayerSpec::dense(2, 2), LayerSpec::Relu, LayerSpec::dense(2, 2)],
        };
        Network::build(arch, 3).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut net = tiny();
        let before = net.clone();
        let mut opt = Sgd::new(&net, SgdConfig::default());
        let x = Tensor::new(vec![1, 2], vec![0.3, 0.6]).unwrap();
        let norm = Normalization::identity(1);
        let (_, g) = loss_and_grads(&net, &x, &[1], 0.05, Engine::CrownIbp, CrownOptions::default(), &norm, None).unwrap();
        opt.step(&mut net, &g, 0.0);
        for (a, b) in net.params().zip(before.params()) {
            assert_eq!(a.1.weight, b.1.weight);
            assert_eq!(a.1.bias, b.1.bias);
        }
    }

    #[test]
    fn zero_eps_loss_is_plain_cross_entropy() {
        let net = tiny();
        let x = Tensor::new(vec![2, 2], vec![0.3, 0.6, 0.9, 0.1]).unwrap();
        let norm = Normalization::identity(1);
        let (loss, _) = loss_and_grads(&net, &x, &[0, 1], 0.0, Engine::CrownIbp, CrownOptions::default(), &norm, None).unwrap();
        let z = net.forward(&x).unwrap();
        let mut want = 0.0;
        for (b, y) in [0usize, 1].into_iter().enumerate() {
            let r = &z.data()[b * 2..b * 2 + 2];
            want += (r[0].exp() + r[1].exp()).ln() - r[y];
        }
        assert!((loss - want / 2.0).abs() < 1e-12);
        let (robust, _) =
            loss_and_grads(&net, &x, &[0, 1], 0.01, Engine::CrownIbp, CrownOptions::default(), &norm, None).unwrap();
        assert!(robust >= loss - 1e-12);
    }

    #[test]
    fn uniform_and_certain_pseudo_logits() {
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::zeros(&[1, 3]));
        let z = g.neg(m);
        let l = g.cross_entropy(z, &[0]).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-15);
        let m = g.constant(Tensor::new(vec![1, 3], vec![0.0, 80.0, 80.0]).unwrap());
        let z = g.neg(m);
        let l = g.cross_entropy(z, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-30);
    }

    #[test]
    fn momentum_reset_targets_dormant_elements() {
        let mut net = tiny();
        let mut opt = Sgd::new(&net, SgdConfig::default());
        let grads: Vec<_> = (0..3)
            .map(|i| {
                net.layer_params(i)
                    .map(|p| (Tensor::full(p.weight.shape(), 1.0), Tensor::full(p.bias.shape(), 1.0)))
            })
            .collect();
        opt.step(&mut net, &grads, 0.1);
        net.set_mask(0, vec![true, false]).unwrap();
        net.apply_mask();
        opt.reset_dormant(&net);
        let (vw, vb) = opt.velocity[0].as_ref().unwrap();
        assert_eq!(vw.data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(vb.data(), &[1.0, 0.0]);
    }

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut px = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            for k in 0..4 {
                let base = if (k < 2) == (y == 0) { 0.8 } else { 0.2 };
                px.push((base + rng.gen_range(-0.1f32..0.1)).clamp(0.0, 1.0));
            }
            labels.push(y);
        }
        Dataset::new(
            Tensor::new(vec![n, 1, 2, 2], px).unwrap(),
            labels,
            2,
            Split::Train,
            Normalization::identity(1),
        )
        .unwrap()
    }

    #[test]
    fn training_loop_respects_schedule_and_budget() {
        let arch = Architecture {
            input_shape: vec![1, 2, 2],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::dense(4, 32),
                LayerSpec::Relu,
                LayerSpec::dense(32, 2),
            ],
        };
        let net = Network::<f32>::build(arch, 1).unwrap();
        let ds = blobs(200, 1);
        let sched = EpsSchedule::new(0.05, 2, 3);
        let plan = TrainPlan {
            epochs: 8,
            t_exp: 4,
            budget: Budget::Fraction(0.5),
            batch_size: 20,
            seed: 3,
            optimizer: SgdConfig {
                lr: 0.1,
                ..Default::default()
            },
            ..Default::default()
        };
        let run = || train(net.clone(), &ds, &ds, &sched, &plan, |_| {}).unwrap();
        let out = run();
        assert_eq!(out.reports.len(), 8);
        let k = out.budget;
        for r in &out.reports {
            assert!(r.active_after <= net.total_param_count());
            if r.deactivated {
                assert!(r.active_after <= k && r.active_after as f64 >= 0.9 * k as f64);
            }
        }
        assert_eq!(
            out.reports.iter().filter(|r| r.deactivated).count(),
            2
        );
        assert_eq!(out.net.last_event, LastEvent::Deactivate);
        assert!(out.reports.last().unwrap().standard_accuracy > 90.0);
        let again = run();
        assert_eq!(again.reports, out.reports);
        assert_eq!(again.net, out.net);
    }
}
