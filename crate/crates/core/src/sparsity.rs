//! Element importance, Erdős–Rényi–Kernel budget allocation, and layer-wise
//! deactivation of the weakest elements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LastEvent, LayerSpec, Network};
use crate::tensor::Scalar;

/// Target number of active parameters, absolute or as a fraction of the
/// backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Absolute(u64),
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, total: usize) -> Result<usize> {
        let k = match self {
            Budget::Absolute(k) => k as usize,
            Budget::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!(
                        "budget fraction must lie in (0, 1], got {f}"
                    )));
                }
                (f * total as f64).floor() as usize
            }
        };
        if k == 0 || k > total {
            return Err(Error::Config(format!(
                "budget {k} outside (0, {total}] for this backbone"
            )));
        }
        Ok(k)
    }
}

impl std::str::FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(k) = s.parse::<u64>() {
            return Ok(Budget::Absolute(k));
        }
        s.parse::<f64>()
            .map(Budget::Fraction)
            .map_err(|_| Error::Config(format!("cannot parse budget `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerAllocation {
    pub layer: usize,
    pub score: f64,
    pub density: f64,
    pub elements: usize,
    pub params_per_element: usize,
    pub keep: usize,
}

impl LayerAllocation {
    pub fn deactivate_fraction(&self) -> f64 {
        1.0 - self.density
    }

    pub fn kept_params(&self) -> usize {
        self.keep * self.params_per_element
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErkAllocation {
    pub budget: usize,
    pub exempt_params: usize,
    pub layers: Vec<LayerAllocation>,
}

impl ErkAllocation {
    /// Active parameter count once every layer keeps exactly its quota.
    pub fn predicted_active(&self) -> usize {
        self.exempt_params + self.layers.iter().map(|l| l.kept_params()).sum::<usize>()
    }
}

/// ERK raw score of a parametric layer.
pub fn erk_score(layer: &LayerSpec) -> Option<f64> {
    match *layer {
        LayerSpec::Dense {
            in_features,
            out_features,
        } => {
            let (i, o) = (in_features as f64, out_features as f64);
            Some((i + o) / (i * o))
        }
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let (i, o) = (in_channels as f64, out_channels as f64);
            let (kh, kw) = (kernel[0] as f64, kernel[1] as f64);
            Some((i + o + kh + kw) / (i * o * kh * kw))
        }
        _ => None,
    }
}

/// Densities `d_l = min(1, c·score_l)` with `Σ d_l·n_l = target`, solving for
/// `c` and re-solving whenever a layer saturates.
pub fn erk_densities(scores: &[f64], sizes: &[usize], target: f64) -> Vec<f64> {
    let mut saturated = vec![false; scores.len()];
    loop {
        let fixed: f64 = sizes
            .iter()
            .zip(&saturated)
            .filter(|(_, &s)| s)
            .map(|(&n, _)| n as f64)
            .sum();
        let weighted: f64 = scores
            .iter()
            .zip(sizes)
            .zip(&saturated)
            .filter(|(_, &s)| !s)
            .map(|((&sc, &n), _)| sc * n as f64)
            .sum();
        if weighted <= 0.0 {
            return saturated.iter().map(|_| 1.0).collect();
        }
        let c = (target - fixed).max(0.0) / weighted;
        let mut changed = false;
        for (k, &sc) in scores.iter().enumerate() {
            if !saturated[k] && c * sc >= 1.0 {
                saturated[k] = true;
                changed = true;
            }
        }
        if !changed {
            return scores
                .iter()
                .zip(&saturated)
                .map(|(&sc, &s)| if s { 1.0 } else { c * sc })
                .collect();
        }
    }
}

/// Per-layer element quotas summing (with the classifier) to at most
/// `budget` parameters.
pub fn erk_allocate<T: Scalar>(net: &Network<T>, budget: usize) -> Result<ErkAllocation> {
    let cls = net.classifier_index();
    let cp = net.layer_params(cls).expect("classifier has params");
    let exempt = cp.weight.len() + cp.bias.len();
    let prunable = net.prunable_layers();
    let mut layers: Vec<LayerAllocation> = prunable
        .iter()
        .map(|&i| {
            let p = net.layer_params(i).unwrap();
            LayerAllocation {
                layer: i,
                score: erk_score(&net.arch().layers[i]).unwrap(),
                density: 1.0,
                elements: p.elements(),
                params_per_element: p.params_per_element(),
                keep: p.elements(),
            }
        })
        .collect();
    let minimum = exempt + layers.iter().map(|l| l.params_per_element).sum::<usize>();
    if budget < minimum {
        return Err(Error::InfeasibleBudget(format!(
            "budget {budget} is below the {minimum} parameters needed for the classifier \
             plus one element per layer"
        )));
    }
    let total = net.total_param_count();
    if budget >= total {
        return Ok(ErkAllocation {
            budget,
            exempt_params: exempt,
            layers,
        });
    }

    let scores: Vec<f64> = layers.iter().map(|l| l.score).collect();
    let sizes: Vec<usize> = layers.iter().map(|l| l.elements * l.params_per_element).collect();
    let dens = erk_densities(&scores, &sizes, (budget - exempt) as f64);
    for (l, d) in layers.iter_mut().zip(dens) {
        l.density = d;
        l.keep = ((d * l.elements as f64).round() as usize).clamp(1, l.elements);
    }

    // Rounding may overshoot; give back whole elements where rounding was
    // most generous, then spend leftover slack where it was least generous.
    let excess = |l: &LayerAllocation| l.keep as f64 - l.density * l.elements as f64;
    let mut used = exempt + layers.iter().map(|l| l.kept_params()).sum::<usize>();
    while used > budget {
        let k = (0..layers.len())
            .filter(|&k| layers[k].keep > 1)
            .max_by(|&a, &b| excess(&layers[a]).total_cmp(&excess(&layers[b])).then(b.cmp(&a)))
            .ok_or_else(|| Error::InfeasibleBudget(format!("cannot fit budget {budget}")))?;
        layers[k].keep -= 1;
        used -= layers[k].params_per_element;
    }
    loop {
        let slack = budget - used;
        let pick = (0..layers.len())
            .filter(|&k| layers[k].keep < layers[k].elements && layers[k].params_per_element <= slack)
            .min_by(|&a, &b| excess(&layers[a]).total_cmp(&excess(&layers[b])).then(a.cmp(&b)));
        match pick {
            Some(k) => {
                layers[k].keep += 1;
                used += layers[k].params_per_element;
            }
            None => break,
        }
    }
    Ok(ErkAllocation {
        budget,
        exempt_params: exempt,
        layers,
    })
}

/// ℓ2 norm of each element (weights and bias) of one layer.
pub type ImportanceTable = Vec<(usize, Vec<f64>)>;

pub fn importance<T: Scalar>(net: &Network<T>) -> ImportanceTable {
    net.params()
        .map(|(i, p)| {
            let norms = (0..p.elements())
                .map(|e| {
                    let b = p.bias.data()[e].to_f64().unwrap();
                    let sq: f64 = p
                        .element_weights(e)
                        .iter()
                        .map(|w| w.to_f64().unwrap().powi(2))
                        .sum();
                    (sq + b * b).sqrt()
                })
                .collect();
            (i, norms)
        })
        .collect()
}

/// Element indices of the `keep` largest scores; ties go to the lower index.
pub fn top_k(scores: &[f64], keep: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &e in order.iter().take(keep) {
        mask[e] = true;
    }
    mask
}

/// Keeps the top elements of each prunable layer by ℓ2 norm according to
/// `alloc`, zeroing the rest. Returns the number of elements that changed
/// from active to dormant.
pub fn deactivate_with<T: Scalar>(net: &mut Network<T>, alloc: &ErkAllocation) -> Result<usize> {
    let table = importance(net);
    let mut newly = 0;
    for la in &alloc.layers {
        let norms = &table
            .iter()
            .find(|(i, _)| *i == la.layer)
            .ok_or_else(|| Error::Contract(format!("layer {} is not parametric", la.layer)))?
            .1;
        let mask = top_k(norms, la.keep);
        let old = &net.layer_params(la.layer).unwrap().mask;
        newly += old.iter().zip(&mask).filter(|&(&o, &m)| o && !m).count();
        net.set_mask(la.layer, mask)?;
    }
    net.apply_mask();
    net.last_event = LastEvent::Deactivate;
    Ok(newly)
}

pub fn deactivate<T: Scalar>(net: &mut Network<T>, budget: usize) -> Result<usize> {
    let alloc = erk_allocate(net, budget)?;
    deactivate_with(net, &alloc)
}

/// Deactivation with the allocation computed once and reused; layer shapes
/// never change during training.
#[derive(Clone, Debug)]
pub struct Deactivator {
    budget: usize,
    alloc: Option<ErkAllocation>,
}

impl Deactivator {
    pub fn new(budget: usize) -> Self {
        Self { budget, alloc: None }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn allocation<T: Scalar>(&mut self, net: &Network<T>) -> Result<&ErkAllocation> {
        if self.alloc.is_none() {
            self.alloc = Some(erk_allocate(net, self.budget)?);
        }
        Ok(self.alloc.as_ref().unwrap())
    }

    pub fn deactivate<T: Scalar>(&mut self, net: &mut Network<T>) -> Result<usize> {
        self.allocation(net)?;
        deactivate_with(net, self.alloc.as_ref().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{presets, Architecture, LayerParams};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn mlp(h1: usize, h2: usize) -> Network<f64> {
        let arch = Architecture {
            input_shape: vec![20],
            layers: vec![
                LayerSpec::dense(20, h1),
                LayerSpec::Relu,
                LayerSpec::dense(h1, h2),
                LayerSpec::Relu,
                LayerSpec::dense(h2, 3),
            ],
        };
        Network::build(arch, 1).unwrap()
    }

    #[test]
    fn identical_layers_get_equal_density() {
        let arch = Architecture {
            input_shape: vec![30],
            layers: vec![
                LayerSpec::dense(30, 30),
                LayerSpec::Relu,
                LayerSpec::dense(30, 30),
                LayerSpec::Relu,
                LayerSpec::dense(30, 2),
            ],
        };
        let net = Network::<f64>::build(arch, 0).unwrap();
        let exempt = 62;
        let half = (2 * 30 * 31) / 2;
        let a = erk_allocate(&net, exempt + half).unwrap();
        for l in &a.layers {
            assert!((l.density - 0.5).abs() < 1e-12);
            assert_eq!(l.keep, 15);
        }
        assert_eq!(a.predicted_active(), exempt + half);
    }

    #[test]
    fn full_budget_keeps_everything() {
        let net = mlp(16, 8);
        let a = erk_allocate(&net, net.total_param_count()).unwrap();
        assert!(a.layers.iter().all(|l| l.keep == l.elements && l.density == 1.0));
        let mut n2 = net.clone();
        assert_eq!(deactivate(&mut n2, net.total_param_count()).unwrap(), 0);
        assert_eq!(n2.active_param_count(), net.total_param_count());
    }

    #[test]
    fn infeasible_budget_is_rejected() {
        let net = mlp(16, 8);
        assert!(matches!(
            erk_allocate(&net, 30),
            Err(Error::InfeasibleBudget(_))
        ));
    }

    /// Independent allocator oracle: bisection on the global scale `c`.
    fn bisect_densities(scores: &[f64], sizes: &[usize], target: f64) -> Vec<f64> {
        let total = |c: f64| -> f64 {
            scores
                .iter()
                .zip(sizes)
                .map(|(&s, &n)| (c * s).min(1.0) * n as f64)
                .sum()
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        while total(hi) < target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if total(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        scores.iter().map(|&s| (hi * s).min(1.0)).collect()
    }

    #[test]
    fn tiny_layer_saturates_and_budget_is_redistributed() {
        let scores = [0.5, 0.01, 0.01];
        let sizes = [10, 1000, 1000];
        let d = erk_densities(&scores, &sizes, 600.0);
        assert_eq!(d[0], 1.0);
        let oracle = bisect_densities(&scores, &sizes, 600.0);
        for (a, b) in d.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        let used: f64 = d.iter().zip(&sizes).map(|(d, &n)| d * n as f64).sum();
        assert!((used - 600.0).abs() < 1e-9);
    }

    #[test]
    fn importance_hand_example() {
        let arch = Architecture {
            input_shape: vec![2],
            layers: vec![LayerSpec::dense(2, 2), LayerSpec::Relu, LayerSpec::dense(2, 2)],
        };
        let p = |w: Vec<f64>| LayerParams {
            weight: Tensor::new(vec![2, 2], w).unwrap(),
            bias: Tensor::zeros(&[2]),
            mask: vec![true; 2],
        };
        let net = Network::from_parts(arch, vec![Some(p(vec![3.0, 4.0, 0.0, 0.0])), None, Some(p(vec![1.0; 4]))])
            .unwrap();
        let t = importance(&net);
        assert_eq!(t[0].1, vec![5.0, 0.0]);
    }

    #[test]
    fn top_k_cuts_and_breaks_ties_by_index() {
        assert_eq!(top_k(&[5.0, 1.0, 3.0, 2.0], 2), vec![true, false, true, false]);
        assert_eq!(top_k(&[1.0, 2.0, 2.0, 2.0], 2), vec![false, true, true, false]);
    }

    #[test]
    fn deactivation_meets_budget_and_is_idempotent() {
        let mut net = mlp(64, 32);
        let total = net.total_param_count();
        let budget = total * 3 / 10;
        deactivate(&mut net, budget).unwrap();
        let active = net.active_param_count();
        assert!(active <= budget && active as f64 >= 0.98 * budget as f64, "{active} vs {budget}");
        assert!(net.masks_consistent());
        assert_eq!(net.last_event, LastEvent::Deactivate);
        let before = net.clone();
        assert_eq!(deactivate(&mut net, budget).unwrap(), 0);
        assert_eq!(before, net);
        let t = importance(&net);
        for (i, norms) in t {
            let m = &net.layer_params(i).unwrap().mask;
            for (e, &n) in norms.iter().enumerate() {
                if !m[e] {
                    assert_eq!(n, 0.0);
                }
            }
        }
    }

    #[test]
    fn cached_allocation_matches_direct() {
        let net = presets::architecture("cnn-small", &[1, 28, 28], 10)
            .and_then(|a| Network::<f32>::build(a, 3))
            .unwrap();
        let budget = net.total_param_count() / 2;
        let mut d = Deactivator::new(budget);
        let a = d.allocation(&net).unwrap().clone();
        assert_eq!(a, erk_allocate(&net, budget).unwrap());
        let mut n1 = net.clone();
        let mut n2 = net.clone();
        d.deactivate(&mut n1).unwrap();
        deactivate(&mut n2, budget).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(n1.active_param_count(), a.predicted_active());
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("0.5".parse::<Budget>().unwrap(), Budget::Fraction(0.5));
        assert_eq!("1200".parse::<Budget>().unwrap(), Budget::Absolute(1200));
        assert_eq!(Budget::Fraction(0.5).resolve(101).unwrap(), 50);
        assert!(Budget::Fraction(1.5).resolve(100).is_err());
        assert!(Budget::Absolute(200).resolve(100).is_err());
        let b: Budget = serde_json::from_str("0.25").unwrap();
        assert_eq!(b, Budget::Fraction(0.25));
    }

    proptest! {
        #[test]
        fn allocation_respects_budget(h1 in 4usize..40, h2 in 4usize..40, frac in 0.2f64..0.95) {
            let net = mlp(h1, h2);
            let total = net.total_param_count();
            let budget = (frac * total as f64) as usize;
            if let Ok(a) = erk_allocate(&net, budget) {
                let used = a.predicted_active();
                let slack = a.layers.iter().map(|l| l.params_per_element).max().unwrap();
                prop_assert!(used <= budget);
                prop_assert!(used + slack > budget);
                for l in &a.layers {
                    prop_assert!(l.density <= 1.0 && l.keep >= 1 && l.keep <= l.elements);
                }
            }
        }

        #[test]
        fn densities_match_bisection_oracle(
            scores in proptest::collection::vec(0.001f64..1.0, 1..6),
            sizes in proptest::collection::vec(1usize..2000, 6),
            frac in 0.05f64..0.99,
        ) {
            let sizes = &sizes[..scores.len()];
            let target = frac * sizes.iter().sum::<usize>() as f64;
            let d = erk_densities(&scores, sizes, target);
            let o = bisect_densities(&scores, sizes, target);
            for (a, b) in d.iter().zip(&o) {
                prop_assert!((a - b).abs() < 1e-7, "{} vs {}", a, b);
            }
        }

        #[test]
        fn larger_budget_never_shrinks_a_layer(frac in 0.1f64..0.45) {
            let net = mlp(48, 24);
            let total = net.total_param_count();
            let a = erk_allocate(&net, (frac * total as f64) as usize).unwrap();
            let b = erk_allocate(&net, (2.0 * frac * total as f64) as usize).unwrap();
            for (x, y) in a.layers.iter().zip(&b.layers) {
                prop_assert!(y.keep >= x.keep);
            }
        }

        #[test]
        fn ranking_is_scale_invariant(scale in 0.01f64..100.0) {
            let mut net = mlp(24, 12);
            let budget = net.total_param_count() / 3;
            let mut scaled = net.clone();
            for p in scaled.params_raw_mut().iter_mut().flatten() {
                p.weight.data_mut().iter_mut().for_each(|w| *w *= scale);
                p.bias.data_mut().iter_mut().for_each(|b| *b *= scale);
            }
            deactivate(&mut net, budget).unwrap();
            deactivate(&mut scaled, budget).unwrap();
            for i in net.prunable_layers() {
                prop_assert_eq!(&net.layer_params(i).unwrap().mask, &scaled.layer_params(i).unwrap().mask);
            }
        }
    }
}
