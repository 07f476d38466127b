use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::sequence::CHANNELS;
use crate::error::{contract, Error, Result};
use crate::nn::{Conv2dSpec, Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;

const POINT: Conv2dSpec = Conv2dSpec {
    stride: 1,
    pad: 0,
    dilation: 1,
};

/// Architecture of the segmentation network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegModelConfig {
    /// Output channels of each encoder stage. Every stage halves the resolution;
    /// the last width is the embedding dimension `d`.
    pub stages: Vec<usize>,
    /// Stride-1 3x3 convolutions after the downsampling one in each stage.
    pub stage_depth: usize,
    pub aspp_channels: usize,
    /// Dilations of the 3x3 pyramid branches (a 1x1 and an image-pool branch are always present).
    pub aspp_dilations: Vec<usize>,
    pub decoder_channels: usize,
    /// Encoder stage whose features are merged back in by the decoder.
    pub skip_stage: usize,
}

impl SegModelConfig {
    /// Four small stages, `d = 64`.
    pub fn desk() -> Self {
        Self {
            stages: vec![8, 16, 32, 64],
            stage_depth: 0,
            aspp_channels: 16,
            aspp_dilations: vec![1, 2],
            decoder_channels: 16,
            skip_stage: 1,
        }
    }

    /// Wide, deep plain-conv encoder sized for 112x112 inputs.
    pub fn paper() -> Self {
        Self {
            stages: vec![64, 128, 256, 512],
            stage_depth: 2,
            aspp_channels: 256,
            aspp_dilations: vec![6, 12, 18],
            decoder_channels: 256,
            skip_stage: 1,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.stages.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        contract!(!self.stages.is_empty(), "encoder needs at least one stage");
        contract!(
            self.stages.iter().all(|&c| c > 0),
            "stage widths must be positive"
        );
        contract!(
            self.skip_stage < self.stages.len(),
            "skip stage {} outside {} stages",
            self.skip_stage,
            self.stages.len()
        );
        contract!(
            self.aspp_channels > 0 && self.decoder_channels > 0,
            "decoder widths must be positive"
        );
        contract!(
            self.aspp_dilations.iter().all(|&d| d > 0),
            "dilations must be positive"
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    spec: Conv2dSpec,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Self {
        let w = store.add_he(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            cin * k * k,
            rng,
        );
        let b = store.add_zeros(format!("{name}.bias"), &[cout]);
        Self { w, b, spec }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.conv2d(x, self.w, self.b, self.spec)
    }
}

/// Graph nodes produced by the encoder.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Output of every stage, `[n, c_i, h_i, w_i]`.
    pub stages: Vec<Var>,
    /// Global-average-pooled last stage, `[n, d]`.
    pub pooled: Var,
}

/// Shared encoder with a pyramid-pooling decoder on top.
#[derive(Clone, Debug)]
pub struct SegmentationModel<T> {
    config: SegModelConfig,
    params: ParamStore<T>,
    encoder: Vec<Vec<ConvLayer>>,
    aspp: Vec<ConvLayer>,
    pool_proj: (ParamId, ParamId),
    fuse: ConvLayer,
    refine: ConvLayer,
    head: ConvLayer,
    encoder_params: usize,
}

impl<T: Scalar> SegmentationModel<T> {
    pub fn new<R: Rng + ?Sized>(config: SegModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut encoder = Vec::new();
        let mut cin = CHANNELS;
        for (i, &c) in config.stages.iter().enumerate() {
            let mut stage = vec![ConvLayer::new(
                &mut p,
                &format!("enc{i}.0"),
                cin,
                c,
                3,
                Conv2dSpec::down(),
                rng,
            )];
            for j in 0..config.stage_depth {
                let name = format!("enc{i}.{}", j + 1);
                stage.push(ConvLayer::new(
                    &mut p,
                    &name,
                    c,
                    c,
                    3,
                    Conv2dSpec::same(1),
                    rng,
                ));
            }
            encoder.push(stage);
            cin = c;
        }
        // encoder parameters come first in the store
        let encoder_params = p.len();

        let d = config.embedding_dim();
        let a = config.aspp_channels;
        let mut aspp = vec![ConvLayer::new(&mut p, "aspp.point", d, a, 1, POINT, rng)];
        for &dil in &config.aspp_dilations {
            aspp.push(ConvLayer::new(
                &mut p,
                &format!("aspp.dil{dil}"),
                d,
                a,
                3,
                Conv2dSpec::same(dil),
                rng,
            ));
        }
        let pool_proj = (
            p.add_he("aspp.pool.weight", &[a, d], d, rng),
            p.add_zeros("aspp.pool.bias", &[a]),
        );
        let branches = config.aspp_dilations.len() + 2;
        let fuse = ConvLayer::new(&mut p, "aspp.fuse", a * branches, a, 1, POINT, rng);
        let skip = config.stages[config.skip_stage];
        let dc = config.decoder_channels;
        let refine = ConvLayer::new(
            &mut p,
            "dec.refine",
            a + skip,
            dc,
            3,
            Conv2dSpec::same(1),
            rng,
        );
        let head = ConvLayer::new(&mut p, "dec.head", dc, 1, 1, POINT, rng);
        Ok(Self {
            config,
            params: p,
            encoder,
            aspp,
            pool_proj,
            fuse,
            refine,
            head,
            encoder_params,
        })
    }

    /// Rebuilds a model from a config and previously saved weights.
    pub fn from_parts(config: SegModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut rng = crate::rng::stream(0, crate::rng::INIT);
        let mut model = Self::new(config, &mut rng)?;
        model.params.load_from(&params).map_err(Error::Contract)?;
        Ok(model)
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params.ids().take(self.encoder_params).collect()
    }

    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.params.ids().skip(self.encoder_params).collect()
    }

    /// `[n, 3, H, W]` normalized frames through the encoder.
    pub fn encode(&self, g: &mut Graph<'_, T>, x: Var) -> Encoded {
        let mut h = x;
        let mut stages = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            for layer in stage {
                let y = layer.apply(g, h);
                h = g.relu(y);
            }
            stages.push(h);
        }
        let pooled = g.spatial_mean(h);
        Encoded { stages, pooled }
    }

    /// Per-pixel foreground logits `[n, 1, height, width]`.
    pub fn decode(&self, g: &mut Graph<'_, T>, enc: &Encoded, height: usize, width: usize) -> Var {
        let top = *enc.stages.last().expect("at least one stage");
        let (th, tw) = (g.shape(top)[2], g.shape(top)[3]);
        let mut branches = Vec::with_capacity(self.aspp.len() + 1);
        for layer in &self.aspp {
            let y = layer.apply(g, top);
            branches.push(g.relu(y));
        }
        let pooled = g.linear(enc.pooled, self.pool_proj.0, self.pool_proj.1);
        let pooled = g.relu(pooled);
        branches.push(g.broadcast(pooled, th, tw));
        let cat = g.concat(&branches);
        let fused = self.fuse.apply(g, cat);
        let fused = g.relu(fused);

        let skip = enc.stages[self.config.skip_stage];
        let (sh, sw) = (g.shape(skip)[2], g.shape(skip)[3]);
        let up = g.resize(fused, sh, sw);
        let merged = g.concat(&[up, skip]);
        let refined = self.refine.apply(g, merged);
        let refined = g.relu(refined);
        let logits = self.head.apply(g, refined);
        g.resize(logits, height, width)
    }

    /// Encoder and decoder in one pass.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> (Encoded, Var) {
        let shape = g.shape(x).to_vec();
        let enc = self.encode(g, x);
        let logits = self.decode(g, &enc, shape[2], shape[3]);
        (enc, logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn shapes_and_split_of_parameters() {
        let mut rng = crate::rng::stream(1, 0);
        let m = SegmentationModel::<f32>::new(SegModelConfig::desk(), &mut rng).unwrap();
        let mut g = Graph::inference(m.params());
        let x = g.input(Tensor::zeros(&[2, 3, 64, 64]));
        let (enc, logits) = m.forward(&mut g, x);
        assert_eq!(g.shape(enc.pooled), &[2, 64]);
        assert_eq!(g.shape(logits), &[2, 1, 64, 64]);
        let (e, d) = (m.encoder_param_ids(), m.decoder_param_ids());
        assert_eq!(e.len(), 8);
        assert_eq!(e.len() + d.len(), m.params().len());
        assert!(m.params().name(e[7]).starts_with("enc3"));
    }

    #[test]
    fn rebuild_from_parts() {
        let mut rng = crate::rng::stream(2, 0);
        let m = SegmentationModel::<f64>::new(SegModelConfig::desk(), &mut rng).unwrap();
        let back = SegmentationModel::from_parts(m.config().clone(), m.params().clone()).unwrap();
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn invalid_skip_stage() {
        let cfg = SegModelConfig {
            skip_stage: 4,
            ..SegModelConfig::desk()
        };
        let mut rng = crate::rng::stream(0, 0);
        assert!(SegmentationModel::<f32>::new(cfg, &mut rng).is_err());
    }
}
