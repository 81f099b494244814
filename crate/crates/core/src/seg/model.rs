use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, ConvBlock, Graph, LossKind, ParamSet, Pointwise, Tensor, Var};

pub const SEG_KIND: &str = "seg";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub kernel: usize,
    /// Pooling factor in the encoder, upsampling factor in the decoder.
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegModelConfig {
    pub window_len_s: f64,
    pub fs: f64,
    pub n_channels: usize,
    pub encoder_blocks: Vec<BlockSpec>,
    pub bottleneck_channels: usize,
    pub bottleneck_kernel: usize,
    /// Applied from the bottleneck outwards.
    pub decoder_blocks: Vec<BlockSpec>,
    /// Adds the channel-averaged pre-pool encoder features to the decoder
    /// output of the matching level.
    pub skip_connections: bool,
    pub loss: LossKind,
}

fn blocks(channels: &[usize], kernel: usize, pool: usize) -> Vec<BlockSpec> {
    channels.iter().map(|&c| BlockSpec { channels: c, kernel, pool }).collect()
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            window_len_s: 30.0,
            fs: 125.0,
            n_channels: 2,
            encoder_blocks: blocks(&[16, 32, 64, 128], 7, 2),
            bottleneck_channels: 128,
            bottleneck_kernel: 7,
            decoder_blocks: blocks(&[128, 64, 32, 16], 7, 2),
            skip_connections: false,
            loss: LossKind::Dice { smooth: 1.0 },
        }
    }
}

impl SegModelConfig {
    /// Narrow variant for single-CPU experiments.
    pub fn desk() -> Self {
        Self {
            encoder_blocks: blocks(&[8, 16, 16, 16], 7, 2),
            bottleneck_channels: 16,
            decoder_blocks: blocks(&[16, 16, 16, 8], 7, 2),
            ..Self::default()
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.window_len_s * self.fs).round() as usize
    }

    pub fn pool_product(&self) -> usize {
        self.encoder_blocks.iter().map(|b| b.pool).product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.fs > 0.0 && self.window_len_s > 0.0) {
            return bad("fs and window_len_s must be positive".into());
        }
        if self.n_channels == 0 {
            return bad("n_channels must be at least 1".into());
        }
        if self.encoder_blocks.is_empty() || self.encoder_blocks.len() != self.decoder_blocks.len() {
            return bad(format!(
                "encoder and decoder must have the same non-zero depth ({} vs {})",
                self.encoder_blocks.len(),
                self.decoder_blocks.len()
            ));
        }
        let all = self.encoder_blocks.iter().chain(&self.decoder_blocks);
        if all.clone().any(|b| b.channels == 0 || b.pool == 0 || b.kernel % 2 == 0) {
            return bad("blocks need positive channels and pool, and odd kernels".into());
        }
        if self.bottleneck_channels == 0 || self.bottleneck_kernel.is_multiple_of(2) {
            return bad("bottleneck needs positive channels and an odd kernel".into());
        }
        let up: usize = self.decoder_blocks.iter().map(|b| b.pool).product();
        if up != self.pool_product() {
            return bad(format!("decoder upsamples by {up} but encoder pools by {}", self.pool_product()));
        }
        if self.skip_connections {
            for (j, d) in self.decoder_blocks.iter().enumerate() {
                let e = &self.encoder_blocks[self.encoder_blocks.len() - 1 - j];
                if d.channels != e.channels || d.pool != e.pool {
                    return bad(format!("skip connections need decoder block {j} to mirror the encoder"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct SegNet {
    encoders: Vec<Vec<ConvBlock>>,
    bottleneck: ConvBlock,
    decoder: Vec<(usize, ConvBlock)>,
    head: Pointwise,
}

/// Per-channel encoders averaged before the bottleneck, then a decoder back
/// to input resolution and a sigmoid head.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: SegModelConfig,
    pub params: ParamSet,
    net: SegNet,
}

impl SegModel {
    pub fn new(config: SegModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut encoders = Vec::new();
        for c in 0..config.n_channels {
            let mut c_in = 1;
            let mut enc = Vec::new();
            for (i, b) in config.encoder_blocks.iter().enumerate() {
                enc.push(ConvBlock::new(&mut ps, &format!("enc{c}.{i}"), c_in, b.channels, b.kernel, b.pool, &mut rng));
                c_in = b.channels;
            }
            encoders.push(enc);
        }
        let last = config.encoder_blocks.last().expect("validated").channels;
        let bottleneck =
            ConvBlock::new(&mut ps, "bottleneck", last, config.bottleneck_channels, config.bottleneck_kernel, 1, &mut rng);
        let mut c_in = config.bottleneck_channels;
        let mut decoder = Vec::new();
        for (j, b) in config.decoder_blocks.iter().enumerate() {
            decoder.push((b.pool, ConvBlock::new(&mut ps, &format!("dec.{j}"), c_in, b.channels, b.kernel, 1, &mut rng)));
            c_in = b.channels;
        }
        let head = Pointwise::new(&mut ps, "head", c_in, 1, &mut rng);
        Ok(Self { config, params: ps, net: SegNet { encoders, bottleneck, decoder, head } })
    }

    /// Probabilities `[B, L]` for input `[B, C, L]` of any length.
    pub fn forward(&self, g: &mut Graph, pv: &[Var], x: Var) -> Result<Var> {
        let (b, c, len) = match *g.shape(x) {
            [b, c, l] => (b, c, l),
            ref s => return Err(Error::Shape(format!("segmentation input must be [batch, channels, length], got {s:?}"))),
        };
        if c != self.config.n_channels {
            return Err(Error::Shape(format!("model expects {} channels, input has {c}", self.config.n_channels)));
        }
        let p = self.config.pool_product();
        let padded = len.div_ceil(p).max(1) * p;
        let x = if padded != len { g.pad_len(x, 0, padded - len)? } else { x };

        let depth = self.config.encoder_blocks.len();
        let mut outs = Vec::with_capacity(c);
        let mut pre: Vec<Vec<Var>> = vec![Vec::with_capacity(c); depth];
        for (ch, enc) in self.net.encoders.iter().enumerate() {
            let mut h = g.select_channel(x, ch)?;
            for (lvl, block) in enc.iter().enumerate() {
                let (before_pool, out) = block.forward_pre_pool(g, pv, h)?;
                if self.config.skip_connections {
                    pre[lvl].push(before_pool);
                }
                h = out;
            }
            outs.push(h);
        }
        let merged = g.mean_of(&outs)?;
        let mut h = self.net.bottleneck.forward(g, pv, merged)?;
        for (j, (factor, block)) in self.net.decoder.iter().enumerate() {
            h = g.upsample_nearest(h, *factor)?;
            h = block.forward(g, pv, h)?;
            if self.config.skip_connections {
                let skip = g.mean_of(&pre[depth - 1 - j])?;
                h = g.add(h, skip)?;
            }
        }
        let logits = self.net.head.forward(g, pv, h)?;
        let prob = g.sigmoid(logits);
        let prob = if padded != len { g.crop_len(prob, 0, len)? } else { prob };
        g.reshape(prob, vec![b, len])
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, batch: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = self.params.bind_frozen(&mut g);
        let x = g.input(batch);
        let y = self.forward(&mut g, &pv, x)?;
        Ok(g.value(y).clone())
    }

    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::Model("parameter layout does not match the model".into()));
        }
        Ok(Self { config: self.config.clone(), params, net: self.net.clone() })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: SEG_KIND.into(),
            config: serde_json::to_value(&self.config)?,
            meta: serde_json::json!({ "fs": self.config.fs }),
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != SEG_KIND {
            return Err(Error::Checkpoint(format!("expected a {SEG_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let config: SegModelConfig = serde_json::from_value(ck.config.clone())?;
        Self::new(config, 0)?.with_params(ck.params.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SegModelConfig {
        SegModelConfig {
            encoder_blocks: blocks(&[3, 4], 3, 2),
            bottleneck_channels: 4,
            bottleneck_kernel: 3,
            decoder_blocks: blocks(&[4, 3], 3, 2),
            ..SegModelConfig::default()
        }
    }

    #[test]
    fn default_shape_contract() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = SegModel::new(SegModelConfig::desk(), 1).unwrap();
        let y = m.predict(Tensor::randn(vec![1, 2, 3750], 1.0, &mut rng)).unwrap();
        assert_eq!(y.shape(), &[1, 3750]);
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = SegModel::new(tiny(), 5).unwrap();
        let b = SegModel::new(tiny(), 5).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, SegModel::new(tiny(), 6).unwrap().params);
    }

    #[test]
    fn channel_swap_symmetry() {
        use rand::SeedableRng;
        for skip in [false, true] {
            let m = SegModel::new(SegModelConfig { skip_connections: skip, ..tiny() }, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x = Tensor::randn(vec![2, 2, 37], 1.0, &mut rng);
            let mut swapped_x = x.clone();
            for s in 0..2 {
                let d = swapped_x.data_mut();
                for i in 0..37 {
                    d.swap(s * 74 + i, s * 74 + 37 + i);
                }
            }
            let mut swapped = m.params.clone();
            for (i, name) in m.params.names().iter().enumerate() {
                if let Some(rest) = name.strip_prefix("enc0.") {
                    let j = m.params.index_of(&format!("enc1.{rest}")).unwrap();
                    *swapped.get_mut(i) = m.params.get(j).clone();
                    *swapped.get_mut(j) = m.params.get(i).clone();
                }
            }
            let a = m.predict(x).unwrap();
            let b = m.with_params(swapped).unwrap().predict(swapped_x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn batch_independent() {
        use rand::SeedableRng;
        let m = SegModel::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(vec![3, 2, 40], 1.0, &mut rng);
        let all = m.predict(x.clone()).unwrap();
        let one = m.predict(Tensor::new(vec![1, 2, 40], x.data()[80..160].to_vec()).unwrap()).unwrap();
        assert_eq!(&all.data()[40..80], one.data());
    }

    #[test]
    fn mismatched_depth_rejected() {
        let c = SegModelConfig { decoder_blocks: blocks(&[4], 3, 2), ..tiny() };
        assert!(SegModel::new(c, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = SegModel::new(tiny(), 1).unwrap();
        m.params.round_f32();
        let ck = crate::nn::checkpoint::decode_checkpoint(
            &crate::nn::checkpoint::encode_checkpoint(&m.to_checkpoint().unwrap()).unwrap(),
        )
        .unwrap();
        let back = SegModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
    }
}
