use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{Conv2dSpec, Graph, ParamId, ParamStore, PoolMode, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture of the spatio-temporal EF regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegModelConfig {
    /// 3 for the video-only model, 4 with the mask channel.
    pub input_channels: usize,
    /// Widths of the stride-2 spatial convolutions.
    pub conv_widths: Vec<usize>,
    /// Width of the frame-level temporal convolution after spatial pooling.
    pub temporal_width: usize,
    pub temporal_kernel: usize,
    /// Feeds each input channel's per-frame spatial mean to the frame-level
    /// temporal convolution alongside the convolutional features.
    pub input_skip: bool,
    pub hidden: usize,
    /// The head predicts `center + scale * u`, so an untrained net starts near `center`.
    pub output_center: f64,
    pub output_scale: f64,
}

impl RegModelConfig {
    pub fn desk(input_channels: usize) -> Self {
        Self {
            input_channels,
            conv_widths: vec![8, 16, 16],
            temporal_width: 8,
            temporal_kernel: 3,
            input_skip: true,
            hidden: 8,
            output_center: 50.0,
            output_scale: 10.0,
        }
    }

    pub fn paper(input_channels: usize) -> Self {
        Self {
            input_channels,
            conv_widths: vec![64, 128, 256, 512],
            temporal_width: 512,
            temporal_kernel: 3,
            input_skip: false,
            hidden: 256,
            output_center: 50.0,
            output_scale: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(
            matches!(self.input_channels, 3 | 4),
            "input_channels must be 3 or 4, got {}",
            self.input_channels
        );
        contract!(
            !self.conv_widths.is_empty(),
            "at least one spatial convolution is required"
        );
        contract!(
            self.conv_widths
                .iter()
                .chain([&self.temporal_width, &self.hidden])
                .all(|&w| w > 0),
            "layer widths must be positive"
        );
        contract!(self.temporal_kernel % 2 == 1, "temporal kernel must be odd");
        contract!(self.output_scale > 0.0, "output scale must be positive");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

/// Clip `[L, C, H, W]` to a scalar EF in percent.
#[derive(Clone, Debug)]
pub struct RegressionModel<T> {
    config: RegModelConfig,
    params: ParamStore<T>,
    convs: Vec<Layer>,
    spatio_temporal: Layer,
    temporal: Layer,
    hidden: Layer,
    out: Layer,
    /// Fixed standardization of the pooled clip features, set by [`RegressionModel::calibrate`].
    norm_shift: ParamId,
    norm_scale: ParamId,
}

impl<T: Scalar> RegressionModel<T> {
    pub fn new<R: Rng + ?Sized>(config: RegModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut cin = config.input_channels;
        let mut convs = Vec::new();
        for (i, &c) in config.conv_widths.iter().enumerate() {
            convs.push(Layer {
                w: p.add_he(format!("conv{i}.weight"), &[c, cin, 3, 3], cin * 9, rng),
                b: p.add_zeros(format!("conv{i}.bias"), &[c]),
            });
            cin = c;
        }
        let k = config.temporal_kernel;
        let spatio_temporal = Layer {
            w: p.add_he("st.weight", &[cin, cin, k], cin * k, rng),
            b: p.add_zeros("st.bias", &[cin]),
        };
        let tw = config.temporal_width;
        let frame_width = cin
            + if config.input_skip {
                config.input_channels
            } else {
                0
            };
        let temporal = Layer {
            w: p.add_he(
                "temporal.weight",
                &[tw, frame_width, k],
                frame_width * k,
                rng,
            ),
            b: p.add_zeros("temporal.bias", &[tw]),
        };
        let norm_shift = p.add_zeros("norm.shift", &[3 * tw]);
        let norm_scale = p.add("norm.scale", Tensor::full(&[3 * tw], T::one()));
        let hidden = Layer {
            w: p.add_he("fc.weight", &[config.hidden, 3 * tw], 3 * tw, rng),
            b: p.add_zeros("fc.bias", &[config.hidden]),
        };
        // small head so the initial output sits near the centre
        let head_w = p.add_he("head.weight", &[1, config.hidden], config.hidden, rng);
        let head_b = p.add(
            "head.bias",
            Tensor::full(&[1], T::lit(config.output_center / config.output_scale)),
        );
        for v in p.get_mut(head_w).data_mut() {
            *v *= T::lit(0.1);
        }
        Ok(Self {
            config,
            params: p,
            convs,
            spatio_temporal,
            temporal,
            hidden,
            out: Layer {
                w: head_w,
                b: head_b,
            },
            norm_shift,
            norm_scale,
        })
    }

    pub fn from_parts(config: RegModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut rng = crate::rng::stream(0, crate::rng::INIT);
        let mut model = Self::new(config, &mut rng)?;
        model.params.load_from(&params).map_err(Error::Contract)?;
        Ok(model)
    }

    pub fn config(&self) -> &RegModelConfig {
        &self.config
    }

    pub fn input_channels(&self) -> usize {
        self.config.input_channels
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Pooled clip features `[clips, 3 * temporal_width]` before standardization.
    fn features(&self, g: &mut Graph<'_, T>, x: Var, clips: usize) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        contract!(
            shape.len() == 4 && shape[1] == self.config.input_channels,
            "model takes {} channels, got input of shape {shape:?}",
            self.config.input_channels
        );
        contract!(
            clips > 0 && shape[0].is_multiple_of(clips),
            "{} frames do not split into {clips} clips",
            shape[0]
        );
        let mut h = x;
        for l in &self.convs {
            let y = g.conv2d(h, l.w, l.b, Conv2dSpec::down());
            h = g.relu(y);
        }
        let y = g.temporal_conv(h, self.spatio_temporal.w, self.spatio_temporal.b, clips);
        let y = g.relu(y);
        let mut pooled = g.spatial_mean(y);
        if self.config.input_skip {
            let direct = g.spatial_mean(x);
            pooled = g.concat(&[pooled, direct]);
        }
        let t = g.temporal_conv(pooled, self.temporal.w, self.temporal.b, clips);
        let t = g.relu(t);
        let mean = g.frame_pool(t, clips, PoolMode::Mean);
        let max = g.frame_pool(t, clips, PoolMode::Max);
        // min over frames as -max(-x)
        let neg = g.scale(t, -T::one());
        let neg_min = g.frame_pool(neg, clips, PoolMode::Max);
        Ok(g.concat(&[mean, max, neg_min]))
    }

    /// `[clips * L, C, H, W]` to `[clips, 1]` predictions.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var, clips: usize) -> Result<Var> {
        let f = self.features(g, x, clips)?;
        let shift = g.param_value(self.norm_shift).data().to_vec();
        let scale = g.param_value(self.norm_scale).data().to_vec();
        let f = g.channel_affine(f, &shift, &scale);
        let f = g.linear(f, self.hidden.w, self.hidden.b);
        let f = g.relu(f);
        let u = g.linear(f, self.out.w, self.out.b);
        Ok(g.scale(u, T::lit(self.config.output_scale)))
    }

    /// Data-dependent initialization: standardizes every pooled feature to zero
    /// mean and unit variance across the clips in `x`.
    pub fn calibrate(&mut self, x: Tensor<T>, clips: usize) -> Result<()> {
        contract!(
            clips >= 2,
            "calibration needs at least two clips, got {clips}"
        );
        let (shift, scale) = {
            let mut g = Graph::inference(&self.params);
            let xv = g.input(x);
            let f = self.features(&mut g, xv, clips)?;
            let v = g.value(f);
            let width = v.shape()[1];
            let column = |j: usize| -> Vec<f64> {
                (0..clips)
                    .map(|k| v.data()[k * width + j].as_f64())
                    .collect()
            };
            let moments: Vec<(f64, f64)> = (0..width)
                .map(|j| {
                    let col = column(j);
                    let mean = col.iter().sum::<f64>() / clips as f64;
                    let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / clips as f64;
                    (mean, var.sqrt())
                })
                .collect();
            // nearly constant features are not blown up beyond a tenth of the typical spread
            let typical = moments.iter().map(|m| m.1).sum::<f64>() / width as f64;
            let shift = moments.iter().map(|m| T::lit(m.0)).collect::<Vec<_>>();
            let scale = moments
                .iter()
                .map(|&(mean, std)| {
                    let floor = (1e-3 + 1e-2 * mean.abs()).max(0.1 * typical);
                    T::lit(1.0 / std.max(floor))
                })
                .collect::<Vec<_>>();
            (shift, scale)
        };
        self.params
            .get_mut(self.norm_shift)
            .data_mut()
            .copy_from_slice(&shift);
        self.params
            .get_mut(self.norm_scale)
            .data_mut()
            .copy_from_slice(&scale);
        Ok(())
    }

    /// Raw (unclamped) predictions for a batch of clips.
    pub fn predict(&self, x: Tensor<T>, clips: usize) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.params);
        let xv = g.input(x);
        let out = self.forward(&mut g, xv, clips)?;
        Ok(g.value(out).data().iter().map(|v| v.as_f64()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(c: usize) -> RegressionModel<f64> {
        let cfg = RegModelConfig {
            conv_widths: vec![3, 4],
            temporal_width: 5,
            hidden: 6,
            ..RegModelConfig::desk(c)
        };
        RegressionModel::new(cfg, &mut crate::rng::stream(1, 0)).unwrap()
    }

    fn input(n: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::stream(seed, 0);
        let data = (0..n * c * 8 * 8)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(&[n, c, 8, 8], data)
    }

    #[test]
    fn initial_output_near_center_and_shape() {
        let m = tiny(3);
        let out = m.predict(input(12, 3, 0), 2).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| (v - 50.0).abs() < 20.0), "{out:?}");
    }

    #[test]
    fn channel_mismatch_is_a_contract_error() {
        let m = tiny(3);
        assert!(matches!(
            m.predict(input(4, 4, 0), 1),
            Err(Error::Contract(_))
        ));
        let m4 = tiny(4);
        assert!(m4.predict(input(4, 4, 0), 1).is_ok());
        assert!(RegressionModel::<f32>::new(
            RegModelConfig::desk(5),
            &mut crate::rng::stream(0, 0)
        )
        .is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = tiny(4);
        let x = input(6, 4, 3);
        let targets = [40.0, 60.0];
        let loss_of = |store: &ParamStore<f64>| {
            let mut g = Graph::inference(store);
            let xv = g.input(x.clone());
            let out = m.forward(&mut g, xv, 2).unwrap();
            let l = g.mse(out, &targets);
            g.value(l).item()
        };
        let mut g = Graph::new(m.params());
        let xv = g.input(x.clone());
        let out = m.forward(&mut g, xv, 2).unwrap();
        let l = g.mse(out, &targets);
        let grads = g.backward(l).into_params();
        let eps = 1e-6;
        for id in m.params().ids() {
            let Some(analytic) = grads.get(id) else {
                // the feature standardization is fixed, never trained
                assert!(m.params().name(id).starts_with("norm."));
                continue;
            };
            let analytic = analytic.data().to_vec();
            for (j, a) in analytic.iter().enumerate().step_by(7) {
                let mut plus = m.params().clone();
                plus.get_mut(id).data_mut()[j] += eps;
                let mut minus = m.params().clone();
                minus.get_mut(id).data_mut()[j] -= eps;
                let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(err < 1e-4, "{} [{j}]: {a} vs {num}", m.params().name(id));
            }
        }
    }
}
