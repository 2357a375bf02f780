//! Structural removal of dormant elements.
//!
//! Each dormant output row or filter is deleted together with the matching
//! input columns (or input channels) of the next parametric layer. Through a
//! flatten, channel `c` of a `[C, H, W]` activation owns the dense columns
//! `c·H·W .. (c+1)·H·W`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model_file::{self, Metadata};
use crate::net::{Architecture, LayerParams, LayerSpec, Network};
use crate::tensor::{Scalar, Tensor};

/// Copies the selected rows and, within each row, the selected input groups
/// of width `group` from a `[out, in_groups·group]` weight.
fn select<T: Scalar>(w: &Tensor<T>, rows: &[usize], cols: &[usize], group: usize) -> Vec<T> {
    let row_len = w.len() / w.shape()[0];
    let mut out = Vec::with_capacity(rows.len() * cols.len() * group);
    for &r in rows {
        let row = &w.data()[r * row_len..(r + 1) * row_len];
        for &c in cols {
            out.extend_from_slice(&row[c * group..(c + 1) * group]);
        }
    }
    out
}

/// Returns a smaller network computing the same function, with all masks
/// active. A layer whose elements are all dormant keeps one (zero) element so
/// that shapes stay non-empty.
pub fn compact<T: Scalar>(net: &Network<T>) -> Result<Network<T>> {
    if !net.masks_consistent() {
        return Err(Error::Consistency(
            "a dormant element carries nonzero parameters".into(),
        ));
    }
    let arch = net.arch();
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut params = Vec::with_capacity(arch.layers.len());
    // Surviving indices along axis 1 of the current activation.
    let first_width = arch.input_shape[0];
    let mut alive: Vec<usize> = (0..first_width).collect();

    for (i, layer) in arch.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Relu => {
                layers.push(LayerSpec::Relu);
                params.push(None);
            }
            LayerSpec::Flatten => {
                let s = if i == 0 {
                    arch.input_shape.clone()
                } else {
                    net.output_shape(i - 1).to_vec()
                };
                let hw: usize = s[1..].iter().product();
                alive = alive
                    .iter()
                    .flat_map(|&c| (c * hw)..((c + 1) * hw))
                    .collect();
                layers.push(LayerSpec::Flatten);
                params.push(None);
            }
            LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                let p = net.layer_params(i).unwrap();
                let mut keep: Vec<usize> = (0..p.elements()).filter(|&e| p.mask[e]).collect();
                if keep.is_empty() {
                    keep.push(0);
                }
                let group = match layer {
                    LayerSpec::Conv { kernel, .. } => kernel[0] * kernel[1],
                    _ => 1,
                };
                let weight = select(&p.weight, &keep, &alive, group);
                let bias = keep.iter().map(|&e| p.bias.data()[e]).collect();
                let (spec, wshape) = match *layer {
                    LayerSpec::Conv {
                        kernel,
                        stride,
                        padding,
                        ..
                    } => (
                        LayerSpec::Conv {
                            in_channels: alive.len(),
                            out_channels: keep.len(),
                            kernel,
                            stride,
                            padding,
                        },
                        vec![keep.len(), alive.len(), kernel[0], kernel[1]],
                    ),
                    _ => (
                        LayerSpec::dense(alive.len(), keep.len()),
                        vec![keep.len(), alive.len()],
                    ),
                };
                layers.push(spec);
                params.push(Some(LayerParams {
                    weight: Tensor::new(wshape, weight)?,
                    bias: Tensor::new(vec![keep.len()], bias)?,
                    mask: vec![true; keep.len()],
                }));
                alive = keep;
            }
        }
    }
    let out_arch = Architecture {
        input_shape: arch.input_shape.clone(),
        layers,
    };
    let mut out = Network::from_parts(out_arch, params)?;
    out.last_event = net.last_event;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeReport {
    pub params_before: usize,
    pub active_before: usize,
    pub params_after: usize,
    /// Incoming weights of dormant elements' consumers that were dropped
    /// beyond the dormant elements themselves; the reason the compacted
    /// count can fall below the active count.
    pub dropped_fan_in: usize,
    pub bytes_before: usize,
    pub bytes_after: usize,
    pub macs_before: usize,
    pub macs_after: usize,
    pub size_ratio: f64,
    pub mac_ratio: f64,
}

pub fn size_report<T: Scalar>(before: &Network<T>, after: &Network<T>) -> Result<SizeReport> {
    let meta = Metadata::new();
    let bytes_before = model_file::to_bytes(before, &meta)?.len();
    let bytes_after = model_file::to_bytes(after, &meta)?.len();
    let (mb, ma) = (before.macs_per_sample(), after.macs_per_sample());
    let active = before.active_param_count();
    let params_after = after.total_param_count();
    Ok(SizeReport {
        params_before: before.total_param_count(),
        active_before: active,
        params_after,
        dropped_fan_in: active.saturating_sub(params_after),
        bytes_before,
        bytes_after,
        macs_before: mb,
        macs_after: ma,
        size_ratio: bytes_before as f64 / bytes_after as f64,
        mac_ratio: mb as f64 / ma.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lirpa::{margin_lower_ibp, PerturbSpec};
    use crate::net::presets;
    use crate::sparsity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = vec![n];
        s.extend_from_slice(shape);
        Tensor::from_fn(&s, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn dense_example_shrinks_and_preserves_logits() {
        let arch = Architecture {
            input_shape: vec![4],
            layers: vec![
                LayerSpec::dense(4, 4),
                LayerSpec::Relu,
                LayerSpec::dense(4, 2),
            ],
        };
        let mut net = Network::<f64>::build(arch, 3).unwrap();
        net.set_mask(0, vec![true, false, true, false]).unwrap();
        net.apply_mask();
        let c = compact(&net).unwrap();
        assert_eq!(
            c.arch().layers,
            vec![LayerSpec::dense(4, 2), LayerSpec::Relu, LayerSpec::dense(2, 2)]
        );
        let x = random_input(&[4], 1000, 1);
        let diff = net.forward(&x).unwrap().max_abs_diff(&c.forward(&x).unwrap());
        assert!(diff <= 1e-10, "{diff}");
        assert_eq!(c.total_param_count(), 2 * 4 + 2 + 2 * 2 + 2);
    }

    #[test]
    fn no_dormant_elements_is_identity() {
        let arch = presets::architecture("cnn-small", &[1, 28, 28], 10).unwrap();
        let net = Network::<f32>::build(arch, 1).unwrap();
        let c = compact(&net).unwrap();
        assert_eq!(c.arch(), net.arch());
        let x = random_input(&[1, 28, 28], 4, 2).cast::<f32>();
        assert_eq!(net.forward(&x).unwrap(), c.forward(&x).unwrap());
    }

    #[test]
    fn conv_to_dense_columns_follow_channels() {
        let arch = Architecture {
            input_shape: vec![2, 4, 4],
            layers: vec![
                LayerSpec::conv(2, 16, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(16 * 16, 3),
            ],
        };
        let mut net = Network::<f64>::build(arch, 9).unwrap();
        let mask: Vec<bool> = (0..16).map(|e| e % 2 == 0).collect();
        net.set_mask(0, mask).unwrap();
        net.apply_mask();
        let c = compact(&net).unwrap();
        let w_old = &net.layer_params(3).unwrap().weight;
        let w_new = &c.layer_params(3).unwrap().weight;
        assert_eq!(w_new.shape(), &[3, 8 * 16]);
        // index-map oracle: new column j = (k, s) maps to old (2k, s)
        for r in 0..3 {
            for k in 0..8 {
                for s in 0..16 {
                    assert_eq!(
                        w_new.data()[r * 128 + k * 16 + s],
                        w_old.data()[r * 256 + 2 * k * 16 + s]
                    );
                }
            }
        }
        let x = random_input(&[2, 4, 4], 200, 3);
        assert!(net.forward(&x).unwrap().max_abs_diff(&c.forward(&x).unwrap()) <= 1e-10);
    }

    #[test]
    fn compaction_preserves_function_and_certificates() {
        let arch = presets::architecture("cnn-small", &[1, 12, 12], 10).unwrap();
        let mut net = Network::<f64>::build(arch, 4).unwrap();
        let k = net.total_param_count() / 4;
        sparsity::deactivate(&mut net, k).unwrap();
        let c = compact(&net).unwrap();
        assert!(c.total_param_count() <= net.active_param_count());
        let x = random_input(&[1, 12, 12], 1000, 5);
        assert!(net.forward(&x).unwrap().max_abs_diff(&c.forward(&x).unwrap()) <= 1e-10);
        let xs = x.slice_outer(0, 50);
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let spec = PerturbSpec::new(xs, 0.05);
        let a = margin_lower_ibp(&net, &spec, &labels).unwrap();
        let b = margin_lower_ibp(&c, &spec, &labels).unwrap();
        assert!(a.m_lower.max_abs_diff(&b.m_lower) <= 1e-10);
        let cc = compact(&c).unwrap();
        assert_eq!(cc, c);
    }

    #[test]
    fn inconsistent_mask_is_rejected() {
        let arch = presets::architecture("mlp-small", &[1, 4, 4], 3).unwrap();
        let mut net = Network::<f32>::build(arch, 1).unwrap();
        net.set_mask(1, (0..256).map(|e| e > 0).collect()).unwrap();
        assert!(matches!(compact(&net), Err(Error::Consistency(_))));
    }

    #[test]
    fn all_dormant_layer_keeps_one_zero_element() {
        let arch = presets::architecture("mlp-small", &[1, 4, 4], 3).unwrap();
        let mut net = Network::<f64>::build(arch, 1).unwrap();
        net.set_mask(1, vec![false; 256]).unwrap();
        net.apply_mask();
        let c = compact(&net).unwrap();
        assert_eq!(c.layer_params(1).unwrap().elements(), 1);
        let x = random_input(&[1, 4, 4], 10, 1);
        assert!(net.forward(&x).unwrap().max_abs_diff(&c.forward(&x).unwrap()) <= 1e-12);
    }

    #[test]
    fn size_report_noop_and_macs() {
        let arch = presets::architecture("mlp-small", &[1, 4, 4], 3).unwrap();
        let net = Network::<f32>::build(arch, 1).unwrap();
        let c = compact(&net).unwrap();
        let r = size_report(&net, &c).unwrap();
        assert_eq!(r.size_ratio, 1.0);
        assert_eq!(r.macs_before, 16 * 256 + 256 * 3);
    }
}
