//! U-Net generator: a stride-2 leaky-ReLU encoder mirrored by a transposed-
//! conv ReLU decoder with skip concatenations, dropout in the first decoder
//! blocks, and a Tanh head. All blocks are spectrally normalized.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::layers::{Activation, ConvBlock, ConvBlockSpec, SpectralState};
use crate::rng::{stream, Rng};
use crate::taskgen::SamplePair;
use crate::tensor::Tensor;

/// Upsample-then-crop jitter ratio, as a rational so integer image sides
/// stay exact.
pub const JITTER_NUM: usize = 286;
pub const JITTER_DEN: usize = 256;

#[derive(Debug, Clone)]
pub struct UNetSpec {
    pub input_channels: usize,
    pub output_channels: usize,
    pub encoder_channels: Vec<usize>,
    /// Decoder block indices that apply dropout 0.5 while training.
    pub dropout_layers: Vec<usize>,
    pub skip_connections: bool,
    pub use_sn: bool,
}

impl UNetSpec {
    /// Desk-scale default for 64x64 images: six stages bottoming out at a
    /// 1x1 bottleneck.
    pub fn desk(input_channels: usize, output_channels: usize) -> UNetSpec {
        UNetSpec {
            input_channels,
            output_channels,
            encoder_channels: vec![64, 128, 256, 512, 512, 512],
            dropout_layers: vec![0, 1, 2],
            skip_connections: true,
            use_sn: true,
        }
    }

    /// A small configuration for fast tests: depth matches `side` so the
    /// bottleneck still reaches 1x1.
    pub fn small(input_channels: usize, output_channels: usize, side: usize) -> UNetSpec {
        let depth = side.trailing_zeros() as usize;
        let channels: Vec<usize> = (0..depth).map(|i| 8 << i.min(2)).collect();
        UNetSpec {
            input_channels,
            output_channels,
            encoder_channels: channels,
            dropout_layers: vec![0],
            skip_connections: true,
            use_sn: true,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Mirrored decoder output widths; the deepest encoder width feeds the
    /// first decoder block and the final block comes back to the first
    /// encoder width.
    pub fn decoder_out_channels(&self) -> Vec<usize> {
        let depth = self.depth();
        (0..depth)
            .map(|i| {
                if i + 2 <= depth {
                    self.encoder_channels[depth - 2 - i]
                } else {
                    self.encoder_channels[0]
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.depth() < 2 {
            return Err(Error::Config("unet needs at least 2 encoder stages".into()));
        }
        if let Some(&bad) = self.dropout_layers.iter().find(|&&i| i >= self.depth()) {
            return Err(Error::Config(format!(
                "dropout layer index {bad} outside decoder of depth {}",
                self.depth()
            )));
        }
        Ok(())
    }
}

pub struct UNet {
    pub spec: UNetSpec,
    pub encoder: Vec<ConvBlock>,
    pub decoder: Vec<ConvBlock>,
    pub head: ConvBlock,
}

/// Instantiate the network described by `spec`, deterministically from
/// `seed`.
pub fn build_unet(spec: &UNetSpec, seed: u64) -> Result<UNet> {
    spec.validate()?;
    let mut rng = stream(seed, "generator.init");
    let depth = spec.depth();
    let enc = &spec.encoder_channels;
    let dec_out = spec.decoder_out_channels();

    let mut encoder = Vec::with_capacity(depth);
    let mut in_ch = spec.input_channels;
    for &out_ch in enc {
        let block = ConvBlockSpec::down(in_ch, out_ch, Activation::LeakyRelu(0.2))
            .with_sn(spec.use_sn);
        encoder.push(ConvBlock::init(block, &mut rng));
        in_ch = out_ch;
    }

    let mut decoder = Vec::with_capacity(depth);
    let mut prev = enc[depth - 1];
    for (i, &out_ch) in dec_out.iter().enumerate() {
        let skip_ch = if spec.skip_connections && i > 0 {
            enc[depth - 1 - i]
        } else {
            0
        };
        let mut block = ConvBlockSpec::up(prev + skip_ch, out_ch, Activation::Relu)
            .with_sn(spec.use_sn);
        if spec.dropout_layers.contains(&i) {
            block = block.with_dropout(0.5);
        }
        decoder.push(ConvBlock::init(block, &mut rng));
        prev = out_ch;
    }

    let head = ConvBlock::init(
        ConvBlockSpec::same(prev, spec.output_channels, Activation::Tanh).with_sn(spec.use_sn),
        &mut rng,
    );

    Ok(UNet {
        spec: spec.clone(),
        encoder,
        decoder,
        head,
    })
}

impl UNet {
    /// Forward pass. Dropout and spectral-u updates only happen while
    /// `training`; a frozen net is a pure function of (params, x).
    pub fn forward(&mut self, x: &Tensor, training: bool, rng: &mut Rng) -> Result<Tensor> {
        let [_, c, h, w] = x.dims();
        if c != self.spec.input_channels {
            return Err(Error::ShapeMismatch {
                op: "unet",
                lhs: [0, self.spec.input_channels, 0, 0],
                rhs: x.dims(),
            });
        }
        let factor = 1usize << self.spec.depth();
        if h % factor != 0 || w % factor != 0 || h < factor || w < factor {
            return Err(Error::Config(format!(
                "unet of depth {} needs image sides divisible by {factor}, got {h}x{w}",
                self.spec.depth()
            )));
        }

        let mut acts = Vec::with_capacity(self.encoder.len());
        let mut cur = x.clone();
        for block in &mut self.encoder {
            cur = block.forward(&cur, training, rng)?;
            acts.push(cur.clone());
        }

        let depth = self.decoder.len();
        for (i, block) in self.decoder.iter_mut().enumerate() {
            if self.spec.skip_connections && i > 0 {
                cur = cur.concat_channels(&acts[depth - 1 - i])?;
            }
            cur = block.forward(&cur, training, rng)?;
        }
        self.head.forward(&cur, training, rng)
    }

    fn blocks(&self) -> Vec<(String, &ConvBlock)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            out.push((format!("g.enc{i}"), b));
        }
        for (i, b) in self.decoder.iter().enumerate() {
            out.push((format!("g.dec{i}"), b));
        }
        out.push(("g.head".to_string(), &self.head));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut ConvBlock)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            out.push((format!("g.enc{i}"), b));
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            out.push((format!("g.dec{i}"), b));
        }
        out.push(("g.head".to_string(), &mut self.head));
        out
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, b) in self.blocks() {
            out.push((format!("{name}.weight"), b.weight.clone()));
            out.push((format!("{name}.bias"), b.bias.clone()));
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn spectral_states(&self) -> Vec<(String, SpectralState)> {
        self.blocks()
            .into_iter()
            .filter_map(|(name, b)| b.sn.clone().map(|s| (name, s)))
            .collect()
    }

    pub fn restore_spectral_state(&mut self, name: &str, state: SpectralState) -> Result<()> {
        for (block_name, block) in self.blocks_mut() {
            if block_name == name {
                if block.sn.is_none() {
                    return Err(Error::Checkpoint(format!(
                        "{name} has no spectral state to restore"
                    )));
                }
                block.sn = Some(state);
                return Ok(());
            }
        }
        Err(Error::Checkpoint(format!("unknown block {name}")))
    }

    pub fn set_trainable(&self, trainable: bool) {
        for p in self.params() {
            p.set_requires_grad(trainable);
        }
    }
}

/// Forward `x` through `net`; convenience alias matching the operation-level
/// contract.
pub fn generate(net: &mut UNet, x: &Tensor, training: bool, rng: &mut Rng) -> Result<Tensor> {
    net.forward(x, training, rng)
}

/// Random jitter: nearest-upsample x and y to floor(H*286/256), then crop
/// both back to HxW at one shared random offset.
pub fn jitter_augment(pair: &SamplePair, rng: &mut Rng) -> Result<SamplePair> {
    let [_, _, h, w] = pair.x.dims();
    let up_h = h * JITTER_NUM / JITTER_DEN;
    let up_w = w * JITTER_NUM / JITTER_DEN;
    let oy = rng.gen_range(0..=(up_h - h));
    let ox = rng.gen_range(0..=(up_w - w));
    let x = pair.x.nearest_resize(up_h, up_w).crop(oy, ox, h, w)?;
    let y = pair.y.nearest_resize(up_h, up_w).crop(oy, ox, h, w)?;
    Ok(SamplePair {
        x,
        y,
        task: pair.task,
        class_count: pair.class_count,
        id: pair.id,
    })
}
