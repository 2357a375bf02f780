//! Standard and verified accuracy, per-sample certificates, and the weight
//! magnitude histogram.

use std::io::Write;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lirpa::{self, CrownOptions, Engine, PerturbSpec};
use crate::net::Network;
use crate::par;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub engine: Engine,
    pub clip: Option<(f64, f64)>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            engine: Engine::Ibp,
            clip: Some((0.0, 1.0)),
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    pub verified: bool,
    pub min_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub samples: usize,
    pub eps: f64,
    pub engine: Engine,
    pub standard_accuracy: f64,
    pub verified_accuracy: f64,
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn chunks(n: usize, bs: usize) -> Vec<(usize, usize)> {
    let bs = bs.max(1);
    (0..n.div_ceil(bs))
        .map(|k| (k * bs, ((k + 1) * bs).min(n)))
        .collect()
}

fn non_empty(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    Ok(())
}

/// Predicted class of every sample.
pub fn predict(net: &Network<f32>, ds: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let n = net.num_classes();
    let parts = par::map_range(chunks(ds.len(), batch_size).len(), |k| {
        let (a, b) = chunks(ds.len(), batch_size)[k];
        let x = ds.normalization.apply(&ds.images.slice_outer(a, b))?;
        let z = net.forward(&x)?;
        Ok(z.data().chunks(n).map(argmax).collect::<Vec<_>>())
    });
    Ok(parts
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .concat())
}

/// Percentage of samples whose predicted class matches the label.
pub fn standard_accuracy(net: &Network<f32>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    non_empty(ds)?;
    let pred = predict(net, ds, batch_size)?;
    let hits = pred.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / ds.len() as f64)
}

/// Certificates for every sample at radius `eps`.
pub fn certify(
    net: &Network<f32>,
    ds: &Dataset,
    eps: f64,
    opts: &EvalOptions,
) -> Result<Vec<Certificate>> {
    non_empty(ds)?;
    let n = net.num_classes();
    let spans = chunks(ds.len(), opts.batch_size);
    let parts = par::map_range(spans.len(), |k| -> Result<Vec<Certificate>> {
        let (a, b) = spans[k];
        let x = ds.images.slice_outer(a, b);
        let labels = &ds.labels[a..b];
        let logits = net.forward(&ds.normalization.apply(&x)?)?;
        let spec = PerturbSpec::new(x, eps)
            .with_clip(opts.clip)
            .with_normalization(Some(ds.normalization.clone()));
        let mb = lirpa::margin_lower(net, &spec, labels, opts.engine, CrownOptions::default())?;
        Ok((0..b - a)
            .map(|s| {
                let predicted = argmax(&logits.data()[s * n..(s + 1) * n]);
                Certificate {
                    index: a + s,
                    label: labels[s],
                    predicted,
                    correct: predicted == labels[s],
                    verified: mb.is_verified(s),
                    min_margin: mb.min_margin(s) as f64,
                }
            })
            .collect())
    });
    Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Percentage of samples certified at radius `eps`, with the certificates.
pub fn verified_accuracy(
    net: &Network<f32>,
    ds: &Dataset,
    eps: f64,
    opts: &EvalOptions,
) -> Result<(f64, Vec<Certificate>)> {
    let certs = certify(net, ds, eps, opts)?;
    Ok((percent_verified(&certs), certs))
}

pub fn percent_verified(certs: &[Certificate]) -> f64 {
    100.0 * certs.iter().filter(|c| c.verified).count() as f64 / certs.len().max(1) as f64
}

pub fn evaluate(
    net: &Network<f32>,
    ds: &Dataset,
    eps: f64,
    opts: &EvalOptions,
) -> Result<(Evaluation, Vec<Certificate>)> {
    let certs = certify(net, ds, eps, opts)?;
    let correct = certs.iter().filter(|c| c.correct).count();
    let ev = Evaluation {
        samples: certs.len(),
        eps,
        engine: opts.engine,
        standard_accuracy: 100.0 * correct as f64 / certs.len() as f64,
        verified_accuracy: percent_verified(&certs),
    };
    Ok((ev, certs))
}

pub fn write_certificates(certs: &[Certificate], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "index,label,predicted,correct,verified,min_margin")?;
    for c in certs {
        writeln!(
            out,
            "{},{},{},{},{},{:e}",
            c.index, c.label, c.predicted, c.correct as u8, c.verified as u8, c.min_margin
        )?;
    }
    Ok(())
}

/// Log-spaced magnitude bins. Bin 0 is `[0, 10^lo_exp)` and holds exact
/// zeros; the last bin is open above.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBins {
    pub lo_exp: i32,
    pub hi_exp: i32,
    pub per_decade: usize,
}

impl Default for HistogramBins {
    fn default() -> Self {
        Self {
            lo_exp: -6,
            hi_exp: 1,
            per_decade: 2,
        }
    }
}

impl HistogramBins {
    pub fn len(&self) -> usize {
        2 + (self.hi_exp - self.lo_exp) as usize * self.per_decade
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `len() + 1` edges, starting at 0 and ending at +∞.
    pub fn edges(&self) -> Vec<f64> {
        let steps = (self.hi_exp - self.lo_exp) as usize * self.per_decade;
        let mut e = vec![0.0];
        e.extend((0..=steps).map(|k| {
            10f64.powf(self.lo_exp as f64 + k as f64 / self.per_decade as f64)
        }));
        e.push(f64::INFINITY);
        e
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let a = v.abs();
        let lo = 10f64.powi(self.lo_exp);
        if a < lo {
            return 0;
        }
        let k = ((a.log10() - self.lo_exp as f64) * self.per_decade as f64).floor() as usize;
        (k + 1).min(self.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerHistogram {
    pub layer: usize,
    pub kind: String,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightHistogram {
    pub bins: HistogramBins,
    pub layers: Vec<LayerHistogram>,
}

impl WeightHistogram {
    pub fn total(&self) -> Vec<usize> {
        let mut t = vec![0; self.bins.len()];
        for l in &self.layers {
            for (a, c) in t.iter_mut().zip(&l.counts) {
                *a += c;
            }
        }
        t
    }

    /// Fraction of all parameters with magnitude below `10^exp`; `exp` must
    /// be a bin edge.
    pub fn fraction_below(&self, exp: i32) -> f64 {
        let edge = 10f64.powi(exp);
        let edges = self.bins.edges();
        let t = self.total();
        let below: usize = t
            .iter()
            .enumerate()
            .filter(|&(k, _)| edges[k + 1] <= edge * (1.0 + 1e-12))
            .map(|(_, c)| c)
            .sum();
        below as f64 / t.iter().sum::<usize>().max(1) as f64
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        let edges = self.bins.edges();
        writeln!(out, "layer,kind,bin,lower,upper,count")?;
        for l in &self.layers {
            for (k, c) in l.counts.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{:e},{:e},{}",
                    l.layer,
                    l.kind,
                    k,
                    edges[k],
                    edges[k + 1],
                    c
                )?;
            }
        }
        Ok(())
    }
}

/// Per-layer histogram of `|θ|` over weights and biases.
pub fn weight_histogram<T: Scalar>(net: &Network<T>, bins: &HistogramBins) -> WeightHistogram {
    let layers = net
        .params()
        .map(|(i, p)| {
            let mut counts = vec![0; bins.len()];
            for v in p.weight.data().iter().chain(p.bias.data()) {
                counts[bins.bin_of(v.to_f64().unwrap())] += 1;
            }
            LayerHistogram {
                layer: i,
                kind: net.arch().layers[i].name().to_string(),
                counts,
            }
        })
        .collect();
    WeightHistogram {
        bins: bins.clone(),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Normalization, Split};
    use crate::net::{Architecture, LayerParams, LayerSpec};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn const_net(bias: Vec<f32>) -> Network<f32> {
        let n = bias.len();
        let arch = Architecture {
            input_shape: vec![1, 2, 2],
            layers: vec![LayerSpec::Flatten, LayerSpec::dense(4, n)],
        };
        Network::from_parts(
            arch,
            vec![
                None,
                Some(LayerParams {
                    weight: Tensor::zeros(&[n, 4]),
                    bias: Tensor::new(vec![n], bias).unwrap(),
                    mask: vec![true; n],
                }),
            ],
        )
        .unwrap()
    }

    fn dataset(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        Dataset::new(
            Tensor::from_fn(&[n, 1, 2, 2], |i| (i % 5) as f32 / 5.0),
            labels,
            classes,
            Split::Test,
            Normalization::identity(1),
        )
        .unwrap()
    }

    #[test]
    fn constant_logits_on_balanced_labels() {
        let ds = dataset((0..1000).map(|i| i % 10).collect(), 10);
        let mut bias = vec![0.0; 10];
        bias[3] = 1.0;
        let acc = standard_accuracy(&const_net(bias), &ds, 64).unwrap();
        assert!((acc - 10.0).abs() < 1e-9);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let ds = dataset(vec![0, 1], 2).take(0);
        assert!(standard_accuracy(&const_net(vec![0.0, 1.0]), &ds, 8).is_err());
    }

    #[test]
    fn zero_radius_verification_matches_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = Dataset::new(
            Tensor::from_fn(&[40, 1, 2, 2], |_| rng.gen_range(0.0f32..1.0)),
            (0..40).map(|i| i % 2).collect(),
            2,
            Split::Test,
            Normalization::identity(1),
        )
        .unwrap();
        let net = crate::net::Network::<f32>::build(
            Architecture {
                input_shape: vec![1, 2, 2],
                layers: vec![
                    LayerSpec::Flatten,
                    LayerSpec::dense(4, 6),
                    LayerSpec::Relu,
                    LayerSpec::dense(6, 2),
                ],
            },
            7,
        )
        .unwrap();
        let mut net = net;
        net.layer_params_mut(3).unwrap().bias = Tensor::new(vec![2], vec![0.05, -0.05]).unwrap();
        let (ev, certs) = evaluate(&net, &ds, 0.0, &EvalOptions::default()).unwrap();
        assert_eq!(ev.standard_accuracy, ev.verified_accuracy);
        assert!(certs.iter().all(|c| c.correct == c.verified));
        let (ev2, _) = evaluate(&net, &ds, 0.2, &EvalOptions::default()).unwrap();
        assert!(ev2.verified_accuracy <= ev2.standard_accuracy);
        assert!(ev2.verified_accuracy <= ev.verified_accuracy);
    }

    #[test]
    fn tied_logits_are_not_verified() {
        let ds = dataset(vec![0, 0], 2);
        let (_, certs) =
            verified_accuracy(&const_net(vec![1.0, 1.0]), &ds, 0.0, &EvalOptions::default()).unwrap();
        assert!(certs.iter().all(|c| c.correct && !c.verified));
    }

    #[test]
    fn percentages_from_certificates() {
        let mk = |v| Certificate {
            index: 0,
            label: 0,
            predicted: 0,
            correct: true,
            verified: v,
            min_margin: 0.0,
        };
        let certs = vec![mk(true), mk(true), mk(false), mk(true)];
        assert_eq!(percent_verified(&certs), 75.0);
    }

    #[test]
    fn histogram_conserves_counts() {
        let net = const_net(vec![0.0, 0.5, 2e-4]);
        let h = weight_histogram(&net, &HistogramBins::default());
        assert_eq!(h.total().iter().sum::<usize>(), net.total_param_count());
        assert_eq!(h.layers[0].counts[0], 13);
        let b = HistogramBins::default();
        assert_eq!(b.edges().len(), b.len() + 1);
        assert_eq!(b.bin_of(0.5), b.bin_of(0.4));
        assert_eq!(b.bin_of(1e3), b.len() - 1);
        assert_eq!(h.fraction_below(-3), 14.0 / 15.0);
        let mut csv = Vec::new();
        h.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + b.len());
    }
}
