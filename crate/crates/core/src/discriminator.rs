//! Conditioning ablation zoo: concatenation and fusion discriminators at
//! two depths, plus an inner-product projection variant. All are
//! patch-based and spectrally normalized.

use crate::error::{Error, Result};
use crate::layers::{fusion_combine, Activation, ConvBlock, ConvBlockSpec, SpectralState};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiscriminatorKind {
    Concat4,
    Fusion4,
    ConcatDeep,
    FusionDeep,
    Projection,
}

impl DiscriminatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DiscriminatorKind::Concat4 => "concat4",
            DiscriminatorKind::Fusion4 => "fusion4",
            DiscriminatorKind::ConcatDeep => "concat_deep",
            DiscriminatorKind::FusionDeep => "fusion_deep",
            DiscriminatorKind::Projection => "projection",
        }
    }

    pub fn parse(s: &str) -> Result<DiscriminatorKind> {
        match s {
            "concat4" => Ok(DiscriminatorKind::Concat4),
            "fusion4" => Ok(DiscriminatorKind::Fusion4),
            "concat_deep" => Ok(DiscriminatorKind::ConcatDeep),
            "fusion_deep" => Ok(DiscriminatorKind::FusionDeep),
            "projection" => Ok(DiscriminatorKind::Projection),
            other => Err(Error::Config(format!(
                "unknown discriminator '{other}' (expected concat4, fusion4, \
                 concat_deep, fusion_deep, projection)"
            ))),
        }
    }

    pub fn all() -> [DiscriminatorKind; 5] {
        [
            DiscriminatorKind::Concat4,
            DiscriminatorKind::Fusion4,
            DiscriminatorKind::ConcatDeep,
            DiscriminatorKind::FusionDeep,
            DiscriminatorKind::Projection,
        ]
    }

    fn deep(&self) -> bool {
        matches!(
            self,
            DiscriminatorKind::ConcatDeep | DiscriminatorKind::FusionDeep
        )
    }
}

impl std::fmt::Display for DiscriminatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Stage widths and strides. The shallow profile is the classic 4-layer
/// patch discriminator; the deep profile keeps the VGG-style doubling
/// pattern but only three downsamplings so 64x64 inputs keep patch
/// granularity.
fn stage_profile(deep: bool) -> (Vec<usize>, Vec<usize>) {
    if deep {
        (
            vec![64, 64, 128, 128, 256, 256, 256, 512, 512],
            vec![1, 2, 1, 2, 1, 1, 2, 1, 1],
        )
    } else {
        (vec![64, 128, 256, 512], vec![2, 2, 2, 1])
    }
}

/// Architecture of a two-branch fusion discriminator.
#[derive(Debug, Clone)]
pub struct FusionNetSpec {
    pub branch_channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Per-stage switch for summing the conditional branch into the trunk.
    pub fuse_mask: Vec<bool>,
    pub use_sn: bool,
}

impl FusionNetSpec {
    pub fn shallow(use_sn: bool) -> FusionNetSpec {
        let (branch_channels, strides) = stage_profile(false);
        let fuse_mask = vec![true; branch_channels.len()];
        FusionNetSpec {
            branch_channels,
            strides,
            fuse_mask,
            use_sn,
        }
    }

    pub fn deep(use_sn: bool) -> FusionNetSpec {
        let (branch_channels, strides) = stage_profile(true);
        let fuse_mask = vec![true; branch_channels.len()];
        FusionNetSpec {
            branch_channels,
            strides,
            fuse_mask,
            use_sn,
        }
    }
}

fn stage_spec(in_ch: usize, out_ch: usize, stride: usize, use_sn: bool) -> ConvBlockSpec {
    let act = Activation::LeakyRelu(0.2);
    if stride == 2 {
        ConvBlockSpec::down(in_ch, out_ch, act).with_sn(use_sn)
    } else {
        ConvBlockSpec::same(in_ch, out_ch, act).with_sn(use_sn)
    }
}

fn head_spec(in_ch: usize, use_sn: bool) -> ConvBlockSpec {
    ConvBlockSpec::same(in_ch, 1, Activation::None).with_sn(use_sn)
}

fn build_stream(
    in_ch: usize,
    channels: &[usize],
    strides: &[usize],
    use_sn: bool,
    rng: &mut Rng,
) -> Vec<ConvBlock> {
    let mut blocks = Vec::with_capacity(channels.len());
    let mut prev = in_ch;
    for (&ch, &stride) in channels.iter().zip(strides) {
        blocks.push(ConvBlock::init(stage_spec(prev, ch, stride, use_sn), rng));
        prev = ch;
    }
    blocks
}

pub struct ConcatNet {
    pub stages: Vec<ConvBlock>,
    pub head: ConvBlock,
}

pub struct FusionNet {
    pub spec: FusionNetSpec,
    pub x_branch: Vec<ConvBlock>,
    pub y_branch: Vec<ConvBlock>,
    pub head: ConvBlock,
}

pub struct ProjectionNet {
    pub stages: Vec<ConvBlock>,
    pub head: ConvBlock,
    /// 1x1 embedding of the downsampled conditional image, inner-multiplied
    /// with the final feature map.
    pub embed: ConvBlock,
    pub down_factor: usize,
}

pub enum Discriminator {
    Concat(ConcatNet),
    Fusion(FusionNet),
    Projection(ProjectionNet),
}

/// Instantiate the ablation variant `kind` for inputs with the given
/// channel counts, deterministically from `seed`.
pub fn build_discriminator(
    kind: DiscriminatorKind,
    in_channels_x: usize,
    in_channels_y: usize,
    use_sn: bool,
    seed: u64,
) -> Result<Discriminator> {
    if in_channels_x == 0 || in_channels_y == 0 {
        return Err(Error::Config("discriminator input channels must be positive".into()));
    }
    let mut rng = stream(seed, "discriminator.init");
    let (channels, strides) = stage_profile(kind.deep());
    match kind {
        DiscriminatorKind::Concat4 | DiscriminatorKind::ConcatDeep => {
            let stages = build_stream(
                in_channels_x + in_channels_y,
                &channels,
                &strides,
                use_sn,
                &mut rng,
            );
            let head = ConvBlock::init(head_spec(*channels.last().unwrap(), use_sn), &mut rng);
            Ok(Discriminator::Concat(ConcatNet { stages, head }))
        }
        DiscriminatorKind::Fusion4 | DiscriminatorKind::FusionDeep => {
            let spec = if kind.deep() {
                FusionNetSpec::deep(use_sn)
            } else {
                FusionNetSpec::shallow(use_sn)
            };
            build_fusion(in_channels_x, in_channels_y, spec, &mut rng)
        }
        DiscriminatorKind::Projection => {
            let stages = build_stream(in_channels_y, &channels, &strides, use_sn, &mut rng);
            let head = ConvBlock::init(head_spec(*channels.last().unwrap(), use_sn), &mut rng);
            let embed_spec = ConvBlockSpec {
                in_channels: in_channels_x,
                out_channels: *channels.last().unwrap(),
                kernel: 1,
                stride: 1,
                pad: 0,
                transposed: false,
                activation: Activation::None,
                use_sn,
                dropout_rate: 0.0,
            };
            let embed = ConvBlock::init(embed_spec, &mut rng);
            let down_factor = strides.iter().product();
            Ok(Discriminator::Projection(ProjectionNet {
                stages,
                head,
                embed,
                down_factor,
            }))
        }
    }
}

/// Build a fusion discriminator from an explicit spec (exposes fuse_mask
/// ablation).
pub fn build_fusion(
    in_channels_x: usize,
    in_channels_y: usize,
    spec: FusionNetSpec,
    rng: &mut Rng,
) -> Result<Discriminator> {
    if spec.fuse_mask.len() != spec.branch_channels.len()
        || spec.strides.len() != spec.branch_channels.len()
    {
        return Err(Error::Config(
            "fusion spec: branch_channels, strides, fuse_mask lengths differ".into(),
        ));
    }
    let x_branch = build_stream(
        in_channels_x,
        &spec.branch_channels,
        &spec.strides,
        spec.use_sn,
        rng,
    );
    let y_branch = build_stream(
        in_channels_y,
        &spec.branch_channels,
        &spec.strides,
        spec.use_sn,
        rng,
    );
    let head = ConvBlock::init(head_spec(*spec.branch_channels.last().unwrap(), spec.use_sn), rng);
    Ok(Discriminator::Fusion(FusionNet {
        spec,
        x_branch,
        y_branch,
        head,
    }))
}

impl Discriminator {
    /// Pre-sigmoid patch logits (Nx1xPxP), or Nx1x1x1 for the projection
    /// variant.
    pub fn forward(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        Ok(self.forward_traced(x, y, training, rng)?.0)
    }

    /// Forward pass that also returns the named post-activation feature
    /// maps, for introspection.
    #[allow(clippy::type_complexity)]
    pub fn forward_traced(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Tensor, Vec<(String, Tensor)>)> {
        check_aligned(x, y)?;
        let mut traced = Vec::new();
        match self {
            Discriminator::Concat(net) => {
                let mut cur = x.concat_channels(y)?;
                for (i, block) in net.stages.iter_mut().enumerate() {
                    cur = block.forward(&cur, training, rng)?;
                    traced.push((format!("stage{i}"), cur.clone()));
                }
                let logits = net.head.forward(&cur, training, rng)?;
                Ok((logits, traced))
            }
            Discriminator::Fusion(net) => {
                let mut fx = x.clone();
                let mut trunk = y.clone();
                for (i, (xb, yb)) in net
                    .x_branch
                    .iter_mut()
                    .zip(net.y_branch.iter_mut())
                    .enumerate()
                {
                    fx = xb.forward(&fx, training, rng)?;
                    trunk = yb.forward(&trunk, training, rng)?;
                    traced.push((format!("xbranch{i}"), fx.clone()));
                    if net.spec.fuse_mask[i] {
                        trunk = fusion_combine(&trunk, &fx, i)?;
                    }
                    traced.push((format!("trunk{i}"), trunk.clone()));
                }
                let logits = net.head.forward(&trunk, training, rng)?;
                Ok((logits, traced))
            }
            Discriminator::Projection(net) => {
                let mut feat = y.clone();
                for (i, block) in net.stages.iter_mut().enumerate() {
                    feat = block.forward(&feat, training, rng)?;
                    traced.push((format!("stage{i}"), feat.clone()));
                }
                let pooled = net.head.forward(&feat, training, rng)?.mean_per_sample();
                let [_, _, h, w] = x.dims();
                let x_ds = x.nearest_resize(h / net.down_factor, w / net.down_factor);
                let embedded = net.embed.forward(&x_ds, training, rng)?;
                traced.push(("embed".to_string(), embedded.clone()));
                let projected = embedded.mul(&feat)?.sum_per_sample();
                let logits = pooled.add(&projected)?;
                Ok((logits, traced))
            }
        }
    }

    fn blocks(&self) -> Vec<(String, &ConvBlock)> {
        let mut out = Vec::new();
        match self {
            Discriminator::Concat(net) => {
                for (i, b) in net.stages.iter().enumerate() {
                    out.push((format!("d.stage{i}"), b));
                }
                out.push(("d.head".into(), &net.head));
            }
            Discriminator::Fusion(net) => {
                for (i, b) in net.x_branch.iter().enumerate() {
                    out.push((format!("d.xbranch{i}"), b));
                }
                for (i, b) in net.y_branch.iter().enumerate() {
                    out.push((format!("d.ybranch{i}"), b));
                }
                out.push(("d.head".into(), &net.head));
            }
            Discriminator::Projection(net) => {
                for (i, b) in net.stages.iter().enumerate() {
                    out.push((format!("d.stage{i}"), b));
                }
                out.push(("d.head".into(), &net.head));
                out.push(("d.embed".into(), &net.embed));
            }
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut ConvBlock)> {
        let mut out = Vec::new();
        match self {
            Discriminator::Concat(net) => {
                for (i, b) in net.stages.iter_mut().enumerate() {
                    out.push((format!("d.stage{i}"), b));
                }
                out.push(("d.head".into(), &mut net.head));
            }
            Discriminator::Fusion(net) => {
                for (i, b) in net.x_branch.iter_mut().enumerate() {
                    out.push((format!("d.xbranch{i}"), b));
                }
                for (i, b) in net.y_branch.iter_mut().enumerate() {
                    out.push((format!("d.ybranch{i}"), b));
                }
                out.push(("d.head".into(), &mut net.head));
            }
            Discriminator::Projection(net) => {
                for (i, b) in net.stages.iter_mut().enumerate() {
                    out.push((format!("d.stage{i}"), b));
                }
                out.push(("d.head".into(), &mut net.head));
                out.push(("d.embed".into(), &mut net.embed));
            }
        }
        out
    }

    /// Feature layer names accepted by `forward_traced` consumers.
    pub fn layer_names(&self) -> Vec<String> {
        match self {
            Discriminator::Concat(net) => {
                (0..net.stages.len()).map(|i| format!("stage{i}")).collect()
            }
            Discriminator::Fusion(net) => {
                let mut names = Vec::new();
                for i in 0..net.x_branch.len() {
                    names.push(format!("xbranch{i}"));
                    names.push(format!("trunk{i}"));
                }
                names
            }
            Discriminator::Projection(net) => {
                let mut names: Vec<String> =
                    (0..net.stages.len()).map(|i| format!("stage{i}")).collect();
                names.push("embed".into());
                names
            }
        }
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

    /// First-layer weight and bias of a concatenation discriminator, the
    /// inputs to the split-weight analysis.
    pub fn concat_first_layer(&self) -> Option<(Tensor, Tensor)> {
        match self {
            Discriminator::Concat(net) => {
                let b = &net.stages[0];
                Some((b.weight.clone(), b.bias.clone()))
            }
            _ => None,
        }
    }
}

/// Convenience alias matching the operation-level contract: pre-sigmoid
/// logits in inference mode.
pub fn discriminate(net: &mut Discriminator, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mut rng = stream(0, "discriminate.unused");
    net.forward(x, y, false, &mut rng)
}

fn check_aligned(x: &Tensor, y: &Tensor) -> Result<()> {
    let [nx, _, hx, wx] = x.dims();
    let [ny, _, hy, wy] = y.dims();
    if nx != ny || hx != hy || wx != wy {
        return Err(Error::ShapeMismatch {
            op: "discriminate",
            lhs: x.dims(),
            rhs: y.dims(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> Rng {
        stream(0, "disc.test")
    }

    #[test]
    fn fusion4_patch_map_is_8x8_for_64_inputs() {
        let mut d = build_discriminator(DiscriminatorKind::Fusion4, 3, 3, true, 1).unwrap();
        let x = Tensor::full([2, 3, 64, 64], 0.1);
        let y = Tensor::full([2, 3, 64, 64], -0.1);
        let logits = d.forward(&x, &y, false, &mut rng()).unwrap();
        assert_eq!(logits.dims(), [2, 1, 8, 8]);
    }

    #[test]
    fn golden_patch_shapes_per_kind() {
        let cases = [
            (DiscriminatorKind::Concat4, 64, [1usize, 1, 8, 8]),
            (DiscriminatorKind::Concat4, 32, [1, 1, 4, 4]),
            (DiscriminatorKind::Fusion4, 32, [1, 1, 4, 4]),
            (DiscriminatorKind::ConcatDeep, 64, [1, 1, 8, 8]),
            (DiscriminatorKind::FusionDeep, 64, [1, 1, 8, 8]),
            (DiscriminatorKind::Projection, 64, [1, 1, 1, 1]),
        ];
        for (kind, side, expect) in cases {
            let mut d = build_discriminator(kind, 3, 5, true, 2).unwrap();
            let x = Tensor::full([1, 3, side, side], 0.2);
            let y = Tensor::full([1, 5, side, side], 0.0);
            let logits = d.forward(&x, &y, false, &mut rng()).unwrap();
            assert_eq!(logits.dims(), expect, "{kind} at {side}");
        }
    }

    #[test]
    fn concat4_first_layer_sees_both_channel_sets() {
        let d = build_discriminator(DiscriminatorKind::Concat4, 3, 3, true, 3).unwrap();
        let (w, _) = d.concat_first_layer().unwrap();
        assert_eq!(w.dims()[1], 6);
    }

    #[test]
    fn zero_parameters_give_half_sigmoid() {
        let mut d = build_discriminator(DiscriminatorKind::Fusion4, 3, 3, true, 4).unwrap();
        for p in d.params() {
            p.set_data(&vec![0.0; p.len()]);
        }
        let x = Tensor::full([1, 3, 16, 16], 0.7);
        let y = Tensor::full([1, 3, 16, 16], -0.7);
        let logits = d.forward(&x, &y, false, &mut rng()).unwrap();
        assert!(logits.to_vec().iter().all(|v| *v == 0.0));
        assert!(logits
            .sigmoid()
            .to_vec()
            .iter()
            .all(|v| (*v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn branches_are_not_weight_tied() {
        let mut d = build_discriminator(DiscriminatorKind::Fusion4, 3, 3, true, 5).unwrap();
        let a = Tensor::from_vec(
            (0..3 * 256).map(|i| ((i % 11) as f32 - 5.0) / 5.0).collect(),
            [1, 3, 16, 16],
        )
        .unwrap();
        let b = Tensor::from_vec(
            (0..3 * 256).map(|i| ((i % 7) as f32 - 3.0) / 3.0).collect(),
            [1, 3, 16, 16],
        )
        .unwrap();
        let ab = d.forward(&a, &b, false, &mut rng()).unwrap();
        let ba = d.forward(&b, &a, false, &mut rng()).unwrap();
        let differs = ab
            .to_vec()
            .iter()
            .zip(ba.to_vec().iter())
            .any(|(p, q)| (p - q).abs() > 1e-6);
        assert!(differs, "swapping roles should change the logits");
    }

    #[test]
    fn gradient_reaches_both_branches_with_default_mask() {
        let mut d = build_discriminator(DiscriminatorKind::Fusion4, 3, 3, true, 6).unwrap();
        let x = Tensor::from_vec(
            (0..3 * 256).map(|i| ((i % 5) as f32 - 2.0) / 2.0).collect(),
            [1, 3, 16, 16],
        )
        .unwrap();
        let y = Tensor::from_vec(
            (0..3 * 256).map(|i| ((i % 9) as f32 - 4.0) / 4.0).collect(),
            [1, 3, 16, 16],
        )
        .unwrap();
        let logits = d.forward(&x, &y, true, &mut rng()).unwrap();
        logits.mean_all().backward().unwrap();
        for (name, p) in d.named_params() {
            let grad = p.grad().unwrap_or_else(|| panic!("{name} missing grad"));
            assert!(
                grad.iter().any(|g| *g != 0.0),
                "{name} gradient identically zero"
            );
        }
    }

    #[test]
    fn all_false_mask_makes_conditional_branch_unreachable() {
        let mut spec = FusionNetSpec::shallow(true);
        spec.fuse_mask = vec![false; spec.fuse_mask.len()];
        let mut d = build_fusion(3, 3, spec, &mut stream(7, "build")).unwrap();
        let x = Tensor::full([1, 3, 16, 16], 0.3);
        let y = Tensor::full([1, 3, 16, 16], -0.2);
        let logits = d.forward(&x, &y, true, &mut rng()).unwrap();
        logits.mean_all().backward().unwrap();
        for (name, p) in d.named_params() {
            let grad_zero = p.grad().map_or(true, |g| g.iter().all(|v| *v == 0.0));
            if name.starts_with("d.xbranch") {
                assert!(grad_zero, "{name} should be cut off from the output");
            } else {
                assert!(!grad_zero, "{name} should still train");
            }
        }
        // And the output must ignore x entirely.
        let x2 = Tensor::full([1, 3, 16, 16], -0.9);
        let a = d.forward(&x, &y, false, &mut rng()).unwrap();
        let b = d.forward(&x2, &y, false, &mut rng()).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn projection_conditions_on_x() {
        let mut d = build_discriminator(DiscriminatorKind::Projection, 3, 3, true, 8).unwrap();
        let y = Tensor::full([1, 3, 16, 16], 0.4);
        let x1 = Tensor::full([1, 3, 16, 16], 0.5);
        let x2 = Tensor::full([1, 3, 16, 16], -0.5);
        let a = d.forward(&x1, &y, false, &mut rng()).unwrap();
        let b = d.forward(&x2, &y, false, &mut rng()).unwrap();
        assert_eq!(a.dims(), [1, 1, 1, 1]);
        assert!((a.item() - b.item()).abs() > 1e-9);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let mut d = build_discriminator(DiscriminatorKind::Concat4, 3, 3, true, 9).unwrap();
        let x = Tensor::zeros([1, 3, 16, 16]);
        let y = Tensor::zeros([1, 3, 32, 32]);
        assert!(matches!(
            d.forward(&x, &y, false, &mut rng()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(build_discriminator(DiscriminatorKind::Concat4, 0, 3, true, 1).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in DiscriminatorKind::all() {
            assert_eq!(DiscriminatorKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(DiscriminatorKind::parse("vgg").is_err());
    }
}
