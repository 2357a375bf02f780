//! Robustness bounds over an ℓ∞ ball: interval propagation (IBP), the
//! backward linear relaxation seeded with interval pre-activation bounds
//! (CROWN-IBP), and the label-margin lower bound `m̲`.
//!
//! All bound computations are batched: a batch of centers and labels yields a
//! `[B, n]` margin matrix. The graph variants build the bound inside an
//! autodiff [`Graph`] so the margin is differentiable in the parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::relax::{self, LowerSlope};
use crate::autodiff::{Graph, Var};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::net::{LayerSpec, Network, ParamVars};
use crate::tensor::{Scalar, Tensor};

/// An ℓ∞ ball of radius `epsilon` around a batch of centers in raw pixel
/// scale, intersected with `clip` and then normalized channelwise.
#[derive(Clone, Debug)]
pub struct PerturbSpec<T> {
    pub center: Tensor<T>,
    pub epsilon: f64,
    pub clip: Option<(f64, f64)>,
    pub normalization: Option<Normalization>,
}

impl<T: Scalar> PerturbSpec<T> {
    /// Ball clipped to `[0, 1]` with no normalization.
    pub fn new(center: Tensor<T>, epsilon: f64) -> Self {
        Self {
            center,
            epsilon,
            clip: Some((0.0, 1.0)),
            normalization: None,
        }
    }

    pub fn unclipped(mut self) -> Self {
        self.clip = None;
        self
    }

    pub fn with_clip(mut self, clip: Option<(f64, f64)>) -> Self {
        self.clip = clip;
        self
    }

    pub fn with_normalization(mut self, n: Option<Normalization>) -> Self {
        self.normalization = n;
        self
    }

    pub fn batch(&self) -> usize {
        self.center.shape().first().copied().unwrap_or(0)
    }

    /// The input box in model coordinates (clipped, then normalized).
    pub fn input_box(&self) -> Result<IntervalBounds<T>> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Contract(format!(
                "epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        let e = T::lit(self.epsilon);
        let (lo, hi) = match self.clip {
            Some((a, b)) => (T::lit(a), T::lit(b)),
            None => (T::neg_infinity(), T::infinity()),
        };
        let mut lower = self.center.map(|v| (v - e).max(lo).min(hi));
        let mut upper = self.center.map(|v| (v + e).max(lo).min(hi));
        if let Some(n) = &self.normalization {
            lower = n.apply(&lower)?;
            upper = n.apply(&upper)?;
        }
        Ok(IntervalBounds { lower, upper })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalBounds<T> {
    pub lower: Tensor<T>,
    pub upper: Tensor<T>,
}

impl<T: Scalar> IntervalBounds<T> {
    pub fn contains(&self, x: &Tensor<T>, tol: T) -> bool {
        x.shape() == self.lower.shape()
            && x.data()
                .iter()
                .zip(self.lower.data().iter().zip(self.upper.data()))
                .all(|(&v, (&l, &u))| v >= l - tol && v <= u + tol)
    }

    pub fn is_ordered(&self) -> bool {
        self.lower
            .data()
            .iter()
            .zip(self.upper.data())
            .all(|(l, u)| l <= u)
    }
}

/// Affine lower bounds `A·x + b ≤ C·f(x)` in model-input coordinates, one row
/// per (sample, class) pair: row `s·n + i` bounds margin `i` of sample `s`.
#[derive(Clone, Debug)]
pub struct LinearBounds<T> {
    pub a_lower: Tensor<T>,
    pub b_lower: Tensor<T>,
}

/// The margin specification for one true label: row `y` is zero, row `i ≠ y`
/// is `e_y − e_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecMatrix<T> {
    pub c: Tensor<T>,
    pub label: usize,
}

impl<T: Scalar> SpecMatrix<T> {
    pub fn new(classes: usize, label: usize) -> Result<Self> {
        if label >= classes {
            return Err(Error::Contract(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let mut c = Tensor::zeros(&[classes, classes]);
        for i in (0..classes).filter(|&i| i != label) {
            c.data_mut()[i * classes + label] = T::one();
            c.data_mut()[i * classes + i] = -T::one();
        }
        Ok(Self { c, label })
    }

    /// Block matrix `[B·n, n]` stacking one specification per label.
    pub fn stacked(classes: usize, labels: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(labels.len() * classes * classes);
        for &y in labels {
            data.extend_from_slice(Self::new(classes, y)?.c.data());
        }
        Tensor::new(vec![labels.len() * classes, classes], data)
    }

    /// `C · z` for a single logit vector.
    pub fn apply(&self, z: &[T]) -> Vec<T> {
        let n = z.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| self.c.data()[i * n + j] * z[j])
                    .sum::<T>()
            })
            .collect()
    }
}

/// Margin lower bounds `[B, n]`; the true-label entry of each row is `0` and
/// is ignored by [`MarginBound::is_verified`].
#[derive(Clone, Debug)]
pub struct MarginBound<T> {
    pub m_lower: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> MarginBound<T> {
    pub fn row(&self, b: usize) -> &[T] {
        let n = self.m_lower.shape()[1];
        &self.m_lower.data()[b * n..(b + 1) * n]
    }

    pub fn is_verified(&self, b: usize) -> bool {
        is_verified(self.row(b), self.labels[b])
    }

    pub fn verified(&self) -> Vec<bool> {
        (0..self.labels.len()).map(|b| self.is_verified(b)).collect()
    }

    /// Smallest off-label margin of sample `b`.
    pub fn min_margin(&self, b: usize) -> T {
        let y = self.labels[b];
        self.row(b)
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != y)
            .map(|(_, &v)| v)
            .fold(T::infinity(), T::min)
    }
}

/// `true` iff every off-label margin is strictly positive.
pub fn is_verified<T: Scalar>(m_lower: &[T], label: usize) -> bool {
    m_lower
        .iter()
        .enumerate()
        .all(|(i, &v)| i == label || v > T::zero())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Ibp,
    #[default]
    CrownIbp,
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ibp" => Ok(Engine::Ibp),
            "crown-ibp" => Ok(Engine::CrownIbp),
            _ => Err(Error::Config(format!(
                "unknown bound engine `{s}` (expected ibp or crown-ibp)"
            ))),
        }
    }
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Engine::Ibp => "ibp",
            Engine::CrownIbp => "crown-ibp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrownOptions {
    pub lower_slope: LowerSlope,
    /// Return the elementwise maximum of the backward bound and the interval
    /// bound. Both are sound, so the maximum is too.
    pub tighten_with_ibp: bool,
    /// Weight `w` in `(1 − w)·m̲_crown + w·m̲_ibp`. A convex combination of
    /// sound lower bounds is sound. At 1 the backward pass is skipped.
    pub ibp_weight: f64,
}

impl Default for CrownOptions {
    fn default() -> Self {
        Self {
            lower_slope: LowerSlope::Adaptive,
            tighten_with_ibp: true,
            ibp_weight: 0.0,
        }
    }
}

/// Interval propagation inside `g`. Returns the `(lower, upper)` box of every
/// layer output, in layer order.
pub fn ibp_graph<T: Scalar>(
    net: &Network<T>,
    g: &mut Graph<T>,
    vars: &ParamVars,
    lower: Var,
    upper: Var,
) -> Result<Vec<(Var, Var)>> {
    net.check_input(g.shape(lower))?;
    let half = T::lit(0.5);
    let (mut l, mut u) = (lower, upper);
    let mut out = Vec::with_capacity(net.arch().layers.len());
    for (i, layer) in net.arch().layers.iter().enumerate() {
        (l, u) = match layer {
            LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                let (w, b) = vars[i].expect("parametric layer has params");
                let s = g.add(l, u)?;
                let mid = g.scale(s, half);
                let d = g.sub(u, l)?;
                let rad = g.scale(d, half);
                let wabs = g.abs(w);
                let (c, r) = match layer.geom() {
                    Some(geom) => (
                        g.conv2d(mid, w, Some(b), geom)?,
                        g.conv2d(rad, wabs, None, geom)?,
                    ),
                    None => {
                        let c = g.matmul_nt(mid, w)?;
                        (g.add_bias(c, b)?, g.matmul_nt(rad, wabs)?)
                    }
                };
                (g.sub(c, r)?, g.add(c, r)?)
            }
            LayerSpec::Relu => (g.relu(l), g.relu(u)),
            LayerSpec::Flatten => {
                let shape = [g.shape(l)[0], net.output_shape(i)[0]];
                (g.reshape(l, &shape)?, g.reshape(u, &shape)?)
            }
        };
        out.push((l, u));
    }
    Ok(out)
}

/// Interval margin `l_y − u_i` from the output box.
pub fn ibp_margin_graph<T: Scalar>(
    g: &mut Graph<T>,
    output: (Var, Var),
    labels: &[usize],
) -> Result<Var> {
    g.margin_from_box(output.0, output.1, labels)
}

/// Backward linear relaxation of `C · f(x)` with the interval boxes `boxes`
/// (as returned by [`ibp_graph`]) as pre-activation bounds, concretized over
/// `input`. `spec_rows` stacks `k` specification rows per sample as a
/// `[B·k, n]` matrix. Returns `(m̲ [B, k], A [B·k, D], b [B·k])`.
#[allow(clippy::too_many_arguments)]
pub fn crown_graph<T: Scalar>(
    net: &Network<T>,
    g: &mut Graph<T>,
    vars: &ParamVars,
    input: &IntervalBounds<T>,
    boxes: &[(Var, Var)],
    spec_rows: Tensor<T>,
    lower_slope: LowerSlope,
) -> Result<(Var, Var, Var)> {
    let layers = &net.arch().layers;
    let batch = input.lower.shape()[0];
    let n = net.num_classes();
    let s = spec_rows.shape().to_vec();
    if batch == 0
        || s.len() != 2
        || s[1] != n
        || !s[0].is_multiple_of(batch)
        || boxes.len() != layers.len()
    {
        return Err(Error::shape(
            "crown",
            format!(
                "spec {s:?}, {} boxes for batch {batch}, {n} classes and {} layers",
                boxes.len(),
                layers.len()
            ),
        ));
    }
    let k = s[0] / batch;
    let rows = s[0];
    let last = layers.len() - 1;
    let (w_last, b_last) = vars[last].expect("classifier has params");
    let c = g.constant(spec_rows);
    let mut lam = g.matmul(c, w_last)?;
    let b_col = g.reshape(b_last, &[n, 1])?;
    let cb = g.matmul(c, b_col)?;
    let mut bacc = g.reshape(cb, &[rows])?;

    for i in (0..last).rev() {
        match &layers[i] {
            LayerSpec::Flatten => {}
            LayerSpec::Relu => {
                let (pl, pu) = if i == 0 {
                    let l = g.constant(input.lower.clone());
                    let u = g.constant(input.upper.clone());
                    (l, u)
                } else {
                    boxes[i - 1]
                };
                let feat: usize = g.shape(pl)[1..].iter().product();
                let slope_l = g
                    .value(pl)
                    .zip_map(g.value(pu), |l, u| relax::lower_slope(l, u, lower_slope))?
                    .reshape(&[batch, feat])?;
                let slope_l = crate::autodiff::repeat_rows(&slope_l, k);
                let su = g.relax_slope(pl, pu)?;
                let tu = g.relax_intercept(pl, pu)?;
                let su = g.reshape(su, &[batch, feat])?;
                let tu = g.reshape(tu, &[batch, feat])?;
                let su = g.repeat_rows(su, k);
                let tu = g.repeat_rows(tu, k);
                let pos = g.relu(lam);
                let neg = g.sub(lam, pos)?;
                let pos_term = g.mul_const(pos, slope_l)?;
                let neg_term = g.mul(neg, su)?;
                let shift = g.mul(neg, tu)?;
                let shift = g.sum_last_axis(shift)?;
                bacc = g.add(bacc, shift)?;
                lam = g.add(pos_term, neg_term)?;
            }
            LayerSpec::Dense { out_features, .. } => {
                let (w, b) = vars[i].expect("dense layer has params");
                let b_col = g.reshape(b, &[*out_features, 1])?;
                let lb = g.matmul(lam, b_col)?;
                let lb = g.reshape(lb, &[rows])?;
                bacc = g.add(bacc, lb)?;
                lam = g.matmul(lam, w)?;
            }
            layer @ LayerSpec::Conv { out_channels, .. } => {
                let (w, b) = vars[i].expect("conv layer has params");
                let os = net.output_shape(i).to_vec();
                let is = if i == 0 {
                    net.input_shape().to_vec()
                } else {
                    net.output_shape(i - 1).to_vec()
                };
                if is.len() != 3 {
                    return Err(Error::Unsupported(format!(
                        "conv layer {i} with input shape {is:?}"
                    )));
                }
                let lam4 = g.reshape(lam, &[rows, os[0], os[1], os[2]])?;
                let per_ch = g.sum_spatial(lam4)?;
                let b_col = g.reshape(b, &[*out_channels, 1])?;
                let lb = g.matmul(per_ch, b_col)?;
                let lb = g.reshape(lb, &[rows])?;
                bacc = g.add(bacc, lb)?;
                let back = g.conv_transpose2d(lam4, w, layer.geom().unwrap(), (is[1], is[2]))?;
                lam = g.reshape(back, &[rows, is.iter().product()])?;
            }
        }
    }

    let d: usize = input.lower.shape()[1..].iter().product();
    let half = T::lit(0.5);
    let mid = input
        .lower
        .zip_map(&input.upper, |l, u| (l + u) * half)?
        .reshape(&[batch, d])?;
    let rad = input
        .lower
        .zip_map(&input.upper, |l, u| (u - l) * half)?
        .reshape(&[batch, d])?;
    let mid = crate::autodiff::repeat_rows(&mid, k);
    let rad = crate::autodiff::repeat_rows(&rad, k);
    let at_mid = g.mul_const(lam, mid)?;
    let at_mid = g.sum_last_axis(at_mid)?;
    let lam_abs = g.abs(lam);
    let spread = g.mul_const(lam_abs, rad)?;
    let spread = g.sum_last_axis(spread)?;
    let m = g.sub(at_mid, spread)?;
    let m = g.add(m, bacc)?;
    let m = g.reshape(m, &[batch, k])?;
    Ok((m, lam, bacc))
}

/// Differentiable margin lower bound `[B, n]` for the given engine.
pub fn margin_graph<T: Scalar>(
    net: &Network<T>,
    g: &mut Graph<T>,
    vars: &ParamVars,
    spec: &PerturbSpec<T>,
    labels: &[usize],
    engine: Engine,
    opts: CrownOptions,
) -> Result<Var> {
    let input = spec.input_box()?;
    let l = g.constant(input.lower.clone());
    let u = g.constant(input.upper.clone());
    let boxes = ibp_graph(net, g, vars, l, u)?;
    let ibp = ibp_margin_graph(g, *boxes.last().unwrap(), labels)?;
    match engine {
        Engine::Ibp => Ok(ibp),
        Engine::CrownIbp => {
            let w = opts.ibp_weight;
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Contract(format!("ibp_weight {w} outside [0, 1]")));
            }
            if w == 1.0 {
                return Ok(ibp);
            }
            let c = SpecMatrix::stacked(net.num_classes(), labels)?;
            let (m, _, _) = crown_graph(net, g, vars, &input, &boxes, c, opts.lower_slope)?;
            let m = if opts.tighten_with_ibp { g.max(m, ibp)? } else { m };
            if w == 0.0 {
                return Ok(m);
            }
            let a = g.scale(m, T::lit(1.0 - w));
            let b = g.scale(ibp, T::lit(w));
            g.add(a, b)
        }
    }
}

/// Boxes for every layer output.
pub fn ibp_forward<T: Scalar>(
    net: &Network<T>,
    spec: &PerturbSpec<T>,
) -> Result<Vec<IntervalBounds<T>>> {
    let input = spec.input_box()?;
    let mut g = Graph::new();
    let vars = net.param_vars(&mut g, false);
    let l = g.constant(input.lower);
    let u = g.constant(input.upper);
    let boxes = ibp_graph(net, &mut g, &vars, l, u)?;
    Ok(boxes
        .into_iter()
        .map(|(l, u)| IntervalBounds {
            lower: g.value(l).clone(),
            upper: g.value(u).clone(),
        })
        .collect())
}

/// Margin lower bound from the interval output box.
pub fn margin_lower_ibp<T: Scalar>(
    net: &Network<T>,
    spec: &PerturbSpec<T>,
    labels: &[usize],
) -> Result<MarginBound<T>> {
    margin_lower(net, spec, labels, Engine::Ibp, CrownOptions::default())
}

/// Affine bounds and their concretized margin from the backward pass, without
/// IBP tightening.
pub fn crown_backward<T: Scalar>(
    net: &Network<T>,
    spec: &PerturbSpec<T>,
    labels: &[usize],
    lower_slope: LowerSlope,
) -> Result<(LinearBounds<T>, MarginBound<T>)> {
    let input = spec.input_box()?;
    let mut g = Graph::new();
    let vars = net.param_vars(&mut g, false);
    let l = g.constant(input.lower.clone());
    let u = g.constant(input.upper.clone());
    let boxes = ibp_graph(net, &mut g, &vars, l, u)?;
    let c = SpecMatrix::stacked(net.num_classes(), labels)?;
    let (m, a, b) = crown_graph(net, &mut g, &vars, &input, &boxes, c, lower_slope)?;
    Ok((
        LinearBounds {
            a_lower: g.value(a).clone(),
            b_lower: g.value(b).clone(),
        },
        MarginBound {
            m_lower: g.value(m).clone(),
            labels: labels.to_vec(),
        },
    ))
}

pub fn margin_lower<T: Scalar>(
    net: &Network<T>,
    spec: &PerturbSpec<T>,
    labels: &[usize],
    engine: Engine,
    opts: CrownOptions,
) -> Result<MarginBound<T>> {
    let mut g = Graph::new();
    let vars = net.param_vars(&mut g, false);
    let m = margin_graph(net, &mut g, &vars, spec, labels, engine, opts)?;
    Ok(MarginBound {
        m_lower: g.value(m).clone(),
        labels: labels.to_vec(),
    })
}
