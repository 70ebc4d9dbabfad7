use super::spec::{caps, Activation, Builder, LayerKind, NetworkSpec};
use crate::capsule::CapsuleMode;
use crate::error::{Error, Result};

/// Size knobs of the 2D SegCaps network.
///
/// `types` lists capsule-type counts for the primary capsules and then each
/// encoder layer: level 1 has a single strided layer, deeper levels a
/// strided layer followed by a stride-1 layer, so `types.len() == 2 * depth`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegCapsConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub capsule_dim: usize,
    pub types: Vec<usize>,
    pub depth: usize,
    pub down_kernel: usize,
    pub conv_kernel: usize,
    pub deconv_kernel: usize,
    pub routing_iters: usize,
    pub reconstruction: bool,
    /// Channel widths of the two hidden 1×1 reconstruction convolutions.
    pub recon_channels: [usize; 2],
}

impl SegCapsConfig {
    /// Published sizes: 16 feature maps, 16-dimensional capsules, types (1, 2, 4, 4, 8, 8).
    pub fn paper() -> Self {
        SegCapsConfig {
            in_channels: 1,
            base_channels: 16,
            capsule_dim: 16,
            types: vec![1, 2, 4, 4, 8, 8],
            depth: 3,
            down_kernel: 5,
            conv_kernel: 5,
            deconv_kernel: 4,
            routing_iters: 3,
            reconstruction: true,
            recon_channels: [64, 128],
        }
    }

    /// Desk-scale sizes: channel, type and capsule-dimension schedules divided by 4 (at least 1).
    pub fn toy() -> Self {
        let paper = Self::paper();
        let quarter = |v: usize| v.div_ceil(4);
        SegCapsConfig {
            base_channels: quarter(paper.base_channels),
            capsule_dim: quarter(paper.capsule_dim),
            types: paper.types.iter().map(|&t| quarter(t)).collect(),
            recon_channels: paper.recon_channels.map(quarter),
            ..paper
        }
    }
}

fn check_divisible(input_size: usize, depth: usize) -> Result<()> {
    if input_size == 0 || !input_size.is_multiple_of(1 << depth) {
        return Err(Error::Config(format!(
            "input size {input_size} is not divisible by 2^{depth}"
        )));
    }
    Ok(())
}

/// Reconstruction branch: mask, then three 1×1 convolutions ending in a sigmoid.
fn reconstruction(b: &mut Builder, source: usize, hidden: [usize; 2], out_channels: usize) -> usize {
    let one = |out_channels, activation| LayerKind::Conv {
        out_channels,
        kernel: 1,
        stride: 1,
        padding: 0,
        dilation: 1,
        activation,
    };
    let masked = b.add("recon_mask", LayerKind::MaskByLabel, &[source]);
    let r1 = b.add("recon1", one(hidden[0], Activation::Relu), &[masked]);
    let r2 = b.add("recon2", one(hidden[1], Activation::Relu), &[r1]);
    b.add("recon_out", one(out_channels, Activation::Sigmoid), &[r2])
}

/// 2D SegCaps: convolutional stem, primary capsules, a strided capsule
/// encoder, a deconvolutional capsule decoder with skip connections, a
/// class-capsule layer, a 1×1 logit head and an optional masked reconstruction branch.
pub fn build_segcaps2d(input_size: usize, classes: usize, cfg: &SegCapsConfig) -> Result<NetworkSpec> {
    if cfg.types.len() != 2 * cfg.depth || cfg.depth == 0 {
        return Err(Error::Config(format!(
            "type schedule {:?} needs {} entries for depth {}",
            cfg.types,
            2 * cfg.depth,
            cfg.depth
        )));
    }
    if cfg.base_channels != cfg.types[0] * cfg.capsule_dim {
        return Err(Error::Config(format!(
            "{} stem channels cannot form {} primary types of dimension {}",
            cfg.base_channels, cfg.types[0], cfg.capsule_dim
        )));
    }
    check_divisible(input_size, cfg.depth)?;
    let (rank, a, k) = (2, cfg.capsule_dim, cfg.routing_iters);
    let mut b = Builder::new();
    let stem = b.add(
        "stem",
        LayerKind::Conv {
            out_channels: cfg.base_channels,
            kernel: 5,
            stride: 1,
            padding: 2,
            dilation: 1,
            activation: Activation::Relu,
        },
        &[0],
    );
    let primary = b.add("primary", LayerKind::PrimaryCaps { dim: a }, &[stem]);

    // encoder: skips[l] is the last grid at resolution input / 2^l
    let mut skips = vec![(primary, cfg.types[0])];
    let mut cur = (primary, cfg.types[0]);
    let mut t = 1;
    for level in 1..=cfg.depth {
        let dk = cfg.down_kernel;
        let slot = b.add(
            &format!("down{level}"),
            caps(CapsuleMode::Conv, rank, dk, 2, dk / 2, (cur.1, a), (cfg.types[t], a), k),
            &[cur.0],
        );
        cur = (slot, cfg.types[t]);
        t += 1;
        if level > 1 {
            let ck = cfg.conv_kernel;
            let slot = b.add(
                &format!("enc{level}"),
                caps(CapsuleMode::Conv, rank, ck, 1, ck / 2, (cur.1, a), (cfg.types[t], a), k),
                &[cur.0],
            );
            cur = (slot, cfg.types[t]);
            t += 1;
        }
        skips.push(cur);
    }

    // decoder: upsample, join the encoder grid at that resolution, refine
    for level in (0..cfg.depth).rev() {
        let skip = skips[level];
        let dk = cfg.deconv_kernel;
        let up = b.add(
            &format!("up{level}"),
            caps(CapsuleMode::Deconv, rank, dk, 2, (dk - 2) / 2, (cur.1, a), (skip.1, a), k),
            &[cur.0],
        );
        let joined = b.add(&format!("skip{level}"), LayerKind::ConcatCaps, &[up, skip.0]);
        let (kernel, out_types, name) = if level == 0 {
            (1, classes, "class_caps".to_string())
        } else {
            (cfg.conv_kernel, skip.1, format!("dec{level}"))
        };
        let slot = b.add(
            &name,
            caps(CapsuleMode::Conv, rank, kernel, 1, kernel / 2, (2 * skip.1, a), (out_types, a), k),
            &[joined],
        );
        cur = (slot, out_types);
    }
    let class_caps = cur.0;
    let features = b.add("class_features", LayerKind::CapsToFeatures, &[class_caps]);
    let logits = b.add(
        "logits",
        LayerKind::Conv {
            out_channels: classes,
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
            activation: Activation::None,
        },
        &[features],
    );
    let recon = cfg
        .reconstruction
        .then(|| reconstruction(&mut b, features, cfg.recon_channels, cfg.in_channels));
    let spec = NetworkSpec {
        arch: "segcaps2d".into(),
        rank,
        in_channels: cfg.in_channels,
        input_size: vec![input_size; rank],
        classes,
        layers: b.layers,
        capsules: class_caps,
        logits,
        reconstruction: recon,
        extractor_layers: 1,
    };
    spec.infer()?;
    Ok(spec)
}

/// Smallest useful 2D capsule net: a 3×3 stem, primary capsules, one 3×3
/// capsule layer and a 1×1 class-capsule layer feeding the logit head.
/// Used for end-to-end gradient checks.
pub fn build_tiny_capsnet(input_size: usize, classes: usize, routing_iters: usize, reconstruction_branch: bool) -> Result<NetworkSpec> {
    let (rank, types, dim) = (2, 2, 4);
    let mut b = Builder::new();
    let stem = b.add(
        "stem",
        LayerKind::Conv {
            out_channels: types * dim,
            kernel: 3,
            stride: 1,
            padding: 1,
            dilation: 1,
            activation: Activation::Relu,
        },
        &[0],
    );
    let primary = b.add("primary", LayerKind::PrimaryCaps { dim }, &[stem]);
    let hidden = b.add(
        "caps1",
        caps(CapsuleMode::Conv, rank, 3, 1, 1, (types, dim), (types, dim), routing_iters),
        &[primary],
    );
    let class_caps = b.add(
        "class_caps",
        caps(CapsuleMode::Conv, rank, 1, 1, 0, (types, dim), (classes, dim), routing_iters),
        &[hidden],
    );
    let features = b.add("class_features", LayerKind::CapsToFeatures, &[class_caps]);
    let logits = b.add(
        "logits",
        LayerKind::Conv {
            out_channels: classes,
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
            activation: Activation::None,
        },
        &[features],
    );
    let recon = reconstruction_branch.then(|| reconstruction(&mut b, features, [4, 4], 1));
    let spec = NetworkSpec {
        arch: "tiny2d".into(),
        rank,
        in_channels: 1,
        input_size: vec![input_size; rank],
        classes,
        layers: b.layers,
        capsules: class_caps,
        logits,
        reconstruction: recon,
        extractor_layers: 1,
    };
    spec.infer()?;
    Ok(spec)
}

/// Size knobs of the 3D UCaps network.
///
/// `types` lists the primary capsule types followed by five encoder layers
/// (strided, plain, strided, plain, plain); a last capsule layer maps to one type per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UCapsConfig {
    pub in_channels: usize,
    /// Stem convolution widths and their dilations.
    pub stem_channels: [usize; 3],
    pub stem_dilation: [usize; 3],
    pub stem_kernel: usize,
    pub capsule_dim: usize,
    pub types: [usize; 6],
    pub caps_kernel: usize,
    pub decoder_channels: [usize; 2],
    pub routing_iters: usize,
    pub reconstruction: bool,
    pub recon_channels: [usize; 2],
}

impl UCapsConfig {
    pub fn paper() -> Self {
        UCapsConfig {
            in_channels: 1,
            stem_channels: [16, 32, 64],
            stem_dilation: [1, 3, 3],
            stem_kernel: 5,
            capsule_dim: 16,
            types: [16, 16, 16, 8, 8, 8],
            caps_kernel: 3,
            decoder_channels: [64, 32],
            routing_iters: 3,
            reconstruction: true,
            recon_channels: [64, 128],
        }
    }

    /// Schedules divided by 4; primary types follow from the stem width.
    pub fn toy() -> Self {
        let paper = Self::paper();
        let quarter = |v: usize| v.div_ceil(4);
        UCapsConfig {
            stem_channels: paper.stem_channels.map(quarter),
            capsule_dim: quarter(paper.capsule_dim),
            types: paper.types.map(quarter),
            decoder_channels: paper.decoder_channels.map(quarter),
            recon_channels: paper.recon_channels.map(quarter),
            ..paper
        }
    }
}

/// 3D UCaps: dilated convolutional stem, capsule encoder ending in one
/// capsule type per class, then a plain convolutional decoder (transposed
/// convolution, skip connection, convolution, batch norm) on the flattened capsules.
pub fn build_ucaps3d(input_size: usize, classes: usize, cfg: &UCapsConfig) -> Result<NetworkSpec> {
    check_divisible(input_size, 2)?;
    if cfg.stem_channels[2] != cfg.types[0] * cfg.capsule_dim {
        return Err(Error::Config(format!(
            "{} stem channels cannot form {} primary types of dimension {}",
            cfg.stem_channels[2], cfg.types[0], cfg.capsule_dim
        )));
    }
    let (rank, a, k, ck) = (3, cfg.capsule_dim, cfg.routing_iters, cfg.caps_kernel);
    let mut b = Builder::new();
    let mut cur = 0;
    for (i, (&ch, &dil)) in cfg.stem_channels.iter().zip(&cfg.stem_dilation).enumerate() {
        cur = b.add(
            &format!("stem{}", i + 1),
            LayerKind::Conv {
                out_channels: ch,
                kernel: cfg.stem_kernel,
                stride: 1,
                padding: dil * (cfg.stem_kernel - 1) / 2,
                dilation: dil,
                activation: Activation::Relu,
            },
            &[cur],
        );
    }
    let stem = cur;
    let extractor_layers = b.layers.len();
    let primary = b.add("primary", LayerKind::PrimaryCaps { dim: a }, &[stem]);
    let strides = [2, 1, 2, 1, 1];
    let mut prev = (primary, cfg.types[0]);
    let mut half_res = primary;
    for (i, &s) in strides.iter().enumerate() {
        let slot = b.add(
            &format!("enc{}", i + 1),
            caps(CapsuleMode::Conv, rank, ck, s, ck / 2, (prev.1, a), (cfg.types[i + 1], a), k),
            &[prev.0],
        );
        prev = (slot, cfg.types[i + 1]);
        if i == 1 {
            half_res = slot;
        }
    }
    let class_caps = b.add(
        "class_caps",
        caps(CapsuleMode::Conv, rank, 1, 1, 0, (prev.1, a), (classes, a), k),
        &[prev.0],
    );
    let bottleneck = b.add("bottleneck", LayerKind::CapsToFeatures, &[class_caps]);
    let half_features = b.add("skip1_features", LayerKind::CapsToFeatures, &[half_res]);
    let conv3 = |out_channels, activation| LayerKind::Conv {
        out_channels,
        kernel: 3,
        stride: 1,
        padding: 1,
        dilation: 1,
        activation,
    };
    let up = |out_channels| LayerKind::Deconv {
        out_channels,
        kernel: 2,
        stride: 2,
        activation: Activation::Relu,
    };
    let [d1, d2] = cfg.decoder_channels;
    let u1 = b.add("up1", up(d1), &[bottleneck]);
    let j1 = b.add("skip1", LayerKind::ConcatFeatures, &[u1, half_features]);
    let c1 = b.add("dec1", conv3(d1, Activation::None), &[j1]);
    let n1 = b.add("dec1_bn", LayerKind::BatchNorm { activation: Activation::Relu }, &[c1]);
    let u2 = b.add("up0", up(d2), &[n1]);
    let j2 = b.add("skip0", LayerKind::ConcatFeatures, &[u2, stem]);
    let c2 = b.add("dec0", conv3(d2, Activation::None), &[j2]);
    let n2 = b.add("dec0_bn", LayerKind::BatchNorm { activation: Activation::Relu }, &[c2]);
    let logits = b.add(
        "logits",
        LayerKind::Conv {
            out_channels: classes,
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
            activation: Activation::None,
        },
        &[n2],
    );
    let recon = cfg
        .reconstruction
        .then(|| reconstruction(&mut b, n2, cfg.recon_channels, cfg.in_channels));
    let spec = NetworkSpec {
        arch: "ucaps3d".into(),
        rank,
        in_channels: cfg.in_channels,
        input_size: vec![input_size; rank],
        classes,
        layers: b.layers,
        capsules: class_caps,
        logits,
        reconstruction: recon,
        extractor_layers,
    };
    spec.infer()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::spec::SlotShape;

    #[test]
    fn segcaps_bottleneck_is_an_eighth() {
        let spec = build_segcaps2d(64, 2, &SegCapsConfig::toy()).unwrap();
        let slots = spec.infer().unwrap();
        let smallest = slots.iter().map(|s| s.spatial()[0]).min().unwrap();
        assert_eq!(smallest, 8);
        match &slots[spec.capsules] {
            SlotShape::Capsules { types, spatial, .. } => {
                assert_eq!(*types, 2);
                assert_eq!(spatial, &vec![64, 64]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn segcaps_rejects_indivisible_input() {
        assert!(matches!(build_segcaps2d(60, 2, &SegCapsConfig::toy()), Err(Error::Config(_))));
    }

    #[test]
    fn build_is_pure() {
        let a = build_segcaps2d(32, 3, &SegCapsConfig::toy()).unwrap();
        let b = build_segcaps2d(32, 3, &SegCapsConfig::toy()).unwrap();
        assert_eq!(a, b);
        assert_eq!(build_ucaps3d(16, 2, &UCapsConfig::toy()).unwrap(), build_ucaps3d(16, 2, &UCapsConfig::toy()).unwrap());
    }

    #[test]
    fn ucaps_toy_schedule_and_shapes() {
        let cfg = UCapsConfig::toy();
        assert_eq!(cfg.types, [4, 4, 4, 2, 2, 2]);
        let spec = build_ucaps3d(16, 2, &cfg).unwrap();
        let slots = spec.infer().unwrap();
        let encoder_out = &slots[spec.capsules];
        assert_eq!(
            encoder_out,
            &SlotShape::Capsules { types: 2, dim: 4, spatial: vec![4, 4, 4] }
        );
        let bottleneck = spec.layers.iter().position(|l| l.name == "bottleneck").unwrap() + 1;
        assert_eq!(slots[bottleneck], SlotShape::Features { channels: 8, spatial: vec![4, 4, 4] });
    }
}
