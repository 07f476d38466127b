use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::manifest::ChannelStats;
use crate::data::sampler::{clip_at, ClipSpec};
use crate::data::sequence::{Dataset, Mask};
use crate::error::{contract, Error, Result};
use crate::nn::Graph;
use crate::regression::{clip_input, MaskBank, MaskEncoding, RegressionModel};
use crate::scalar::Scalar;
use crate::segmentation::dice;
use crate::tensor::Tensor;

/// A model with a scalar output that can report its gradient with respect to
/// the input clip.
pub trait InputGradient<T: Scalar> {
    /// Output and `d output / d x` for one clip `[L, C, H, W]`.
    fn output_and_gradient(&self, x: &Tensor<T>) -> Result<(f64, Tensor<T>)>;
}

impl<T: Scalar> InputGradient<T> for RegressionModel<T> {
    fn output_and_gradient(&self, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let mut g = Graph::new(self.params());
        let xv = g.input_with_grad(x.clone());
        let out = self.forward(&mut g, xv, 1)?;
        let value = g.value(out).item().as_f64();
        let grads = g.backward(out);
        let dx = grads
            .wrt(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((value, dx))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothGradConfig {
    pub n_samples: usize,
    /// Noise standard deviation as a fraction of the input's value range.
    pub sigma_fraction: f64,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        Self {
            n_samples: 25,
            sigma_fraction: 0.1,
        }
    }
}

/// Mean absolute input gradient per pixel, `[L, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor<f64>,
    pub n_samples: usize,
    /// Absolute noise standard deviation that was used.
    pub sigma: f64,
}

impl SaliencyMap {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let plane = self.height() * self.width();
        &self.values.data()[t * plane..(t + 1) * plane]
    }
}

/// SmoothGrad: averages `|d output / d pixel|` over noisy copies of `x`, then
/// over channels.
pub fn smoothgrad<T: Scalar, M: InputGradient<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    cfg: SmoothGradConfig,
    seed: u64,
) -> Result<SaliencyMap> {
    contract!(
        x.shape().len() == 4,
        "expected a [L, C, H, W] clip, got {:?}",
        x.shape()
    );
    contract!(cfg.n_samples >= 1, "SmoothGrad needs at least one sample");
    contract!(
        cfg.sigma_fraction >= 0.0,
        "noise fraction must be non-negative"
    );
    let (l, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    let sigma = cfg.sigma_fraction * (hi - lo);
    let noise = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).map_err(|e| Error::Numeric(e.to_string()))?)
    } else {
        None
    };
    let mut rng = crate::rng::stream(seed, crate::rng::NOISE);
    let plane = h * w;
    let mut acc = vec![0.0f64; l * plane];
    let norm = 1.0 / (cfg.n_samples * c) as f64;
    for _ in 0..cfg.n_samples {
        let mut noisy = x.clone();
        if let Some(n) = &noise {
            for v in noisy.data_mut() {
                *v += T::lit(n.sample(&mut rng));
            }
        }
        let (_, grad) = model.output_and_gradient(&noisy)?;
        contract!(
            grad.shape() == x.shape(),
            "gradient shape {:?} differs from input",
            grad.shape()
        );
        for t in 0..l {
            for ch in 0..c {
                let src = &grad.data()[(t * c + ch) * plane..(t * c + ch + 1) * plane];
                for (a, g) in acc[t * plane..(t + 1) * plane].iter_mut().zip(src) {
                    *a += g.as_f64().abs() * norm;
                }
            }
        }
    }
    Ok(SaliencyMap {
        values: Tensor::from_vec(&[l, h, w], acc),
        n_samples: cfg.n_samples,
        sigma,
    })
}

/// Binary mask of the `ceil(k * H * W)` most salient pixels; ties go to the
/// earlier pixel in row-major order.
pub fn top_fraction_mask(saliency: &[f64], k: f64) -> Result<Vec<u8>> {
    contract!(
        k > 0.0 && k < 1.0,
        "top fraction must lie in (0, 1), got {k}"
    );
    contract!(!saliency.is_empty(), "empty saliency map");
    contract!(
        saliency.iter().all(|v| !v.is_nan()),
        "saliency contains NaN"
    );
    // guard against products like 0.05 * 400 landing just above an integer
    let keep = ((k * saliency.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..saliency.len()).collect();
    order.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));
    let mut mask = vec![0u8; saliency.len()];
    for &i in &order[..keep] {
        mask[i] = 1;
    }
    Ok(mask)
}

/// Dice between the top-`k` saliency pixels and a label mask.
pub fn top_gradient_dice(saliency: &[f64], label: &Mask, k: f64) -> Result<f64> {
    contract!(
        saliency.len() == label.data().len(),
        "saliency has {} pixels, mask {}",
        saliency.len(),
        label.data().len()
    );
    dice(&top_fraction_mask(saliency, k)?, label.data())
}

/// Mean top-`k` Dice over the frames of the first clip of a sequence that
/// carry a ground-truth mask. `None` when no such frame is in the clip.
#[allow(clippy::too_many_arguments)]
pub fn sequence_saliency_dice<T: Scalar>(
    model: &RegressionModel<T>,
    dataset: &Dataset,
    sequence: usize,
    spec: ClipSpec,
    stats: &ChannelStats,
    bank: Option<&MaskBank>,
    encoding: MaskEncoding,
    cfg: SmoothGradConfig,
    k: f64,
    seed: u64,
) -> Result<Option<f64>> {
    let seq = dataset.get(sequence);
    let clip = clip_at(seq, sequence, spec, 0)?;
    let mut labeled: Vec<(usize, &Mask)> = Vec::new();
    for (pos, &t) in clip.frame_indices.iter().enumerate() {
        if let Some(m) = seq.frame_masks.as_ref().and_then(|fm| fm.get(t)) {
            labeled.push((pos, m));
        } else if seq.ed_index == Some(t) {
            labeled.extend(seq.ed_mask.as_ref().map(|m| (pos, m)));
        } else if seq.es_index == Some(t) {
            labeled.extend(seq.es_mask.as_ref().map(|m| (pos, m)));
        }
    }
    if labeled.is_empty() {
        return Ok(None);
    }
    let x = clip_input(model.input_channels(), &clip, bank, stats, encoding)?;
    let map = smoothgrad(model, &x, cfg, seed)?;
    let mut total = 0.0;
    for &(pos, m) in &labeled {
        total += top_gradient_dice(map.frame(pos), m, k)?;
    }
    Ok(Some(total / labeled.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Output = sum of w * x, so the gradient is `w` everywhere.
    struct Linear(Tensor<f64>);

    impl InputGradient<f64> for Linear {
        fn output_and_gradient(&self, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
            let y = x.data().iter().zip(self.0.data()).map(|(a, b)| a * b).sum();
            Ok((y, self.0.clone()))
        }
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..n).map(|i| (i as f64 * 0.37).sin()).collect())
    }

    #[test]
    fn zero_noise_single_sample_is_plain_gradient() {
        let w = ramp(&[2, 3, 4, 4]);
        let map = smoothgrad(
            &Linear(w.clone()),
            &ramp(&[2, 3, 4, 4]),
            SmoothGradConfig {
                n_samples: 1,
                sigma_fraction: 0.0,
            },
            0,
        )
        .unwrap();
        assert_eq!(map.values.shape(), &[2, 4, 4]);
        for t in 0..2 {
            for p in 0..16 {
                let expect = (0..3)
                    .map(|c| w.data()[(t * 3 + c) * 16 + p].abs())
                    .sum::<f64>()
                    / 3.0;
                assert!((map.frame(t)[p] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_model_has_zero_saliency_and_seeds_repeat() {
        let zero = Linear(Tensor::zeros(&[1, 3, 4, 4]));
        let x = ramp(&[1, 3, 4, 4]);
        let map = smoothgrad(&zero, &x, SmoothGradConfig::default(), 3).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.0));
        assert!(map.sigma > 0.0);

        let lin = Linear(ramp(&[1, 3, 4, 4]));
        let a = smoothgrad(&lin, &x, SmoothGradConfig::default(), 3).unwrap();
        let b = smoothgrad(&lin, &x, SmoothGradConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        assert!(a.values.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn top_mask_breaks_ties_in_scan_order() {
        let s = [1.0, 3.0, 3.0, 0.0, 3.0];
        assert_eq!(top_fraction_mask(&s, 0.4).unwrap(), vec![0, 1, 1, 0, 0]);
        assert!(top_fraction_mask(&s, 0.0).is_err());
        assert!(top_fraction_mask(&s, 1.0).is_err());
        // 0.05 * 400 is not exactly 20 in floating point
        assert_eq!(
            top_fraction_mask(&[0.0; 400], 0.05)
                .unwrap()
                .iter()
                .filter(|&&v| v == 1)
                .count(),
            20
        );
    }

    #[test]
    fn saliency_inside_label_gives_closed_form_dice() {
        // 20x20 frame, label = 60 pixels, saliency only on 30 of them.
        let (h, w) = (20, 20);
        let mut label = vec![0u8; h * w];
        let mut sal = vec![0.0; h * w];
        for i in 0..60 {
            label[i * 3] = 1;
            if i < 30 {
                sal[i * 3] = 1.0 + i as f64;
            }
        }
        let label = Mask::new(h, w, label).unwrap();
        let m = 20.0;
        let d = top_gradient_dice(&sal, &label, 0.05).unwrap();
        assert!((d - 2.0 * m / (m + 60.0)).abs() < 1e-12);
    }
}
