//! Decoder shared by the segmentation networks: bilinear upsample,
//! skip concatenation and a convolutional stage per level, then a 1x1
//! classification head.

use crate::blocks::conv::{ConvLayer, DoubleConvBlock, ResidualBlock};
use crate::blocks::{ParamBuilder, Session};
use crate::error::Result;
use crate::tensor::graph::Var;
use crate::tensor::Element;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DecoderStyle {
    /// Residual blocks per stage (all architectures except the plain U-Net).
    Residual,
    /// Classic double-conv stages (plain U-Net).
    DoubleConv,
}

enum Stage {
    Residual(ResidualBlock),
    Double(DoubleConvBlock),
}

/// Per-level decoder operating from the deepest stage upward.
pub struct Decoder {
    stages: Vec<Stage>, // index 0 = deepest level
    head: ConvLayer,
    levels: usize,
}

impl Decoder {
    /// `skip_channels[l]` is the channel count of the level-(l+1) skip
    /// (index 0 = full resolution). Output channels per level follow the
    /// halving plan floored at the base width.
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        style: DecoderStyle,
        width_base: usize,
        skip_channels: &[usize],
        bottleneck_channels: usize,
        num_classes: usize,
    ) -> Self {
        let levels = skip_channels.len();
        let dec_ch = |level: usize| -> usize {
            // level is 1-based; output channels of the stage at that level
            width_base << level.saturating_sub(2)
        };
        let mut stages = Vec::with_capacity(levels);
        let mut prev = bottleneck_channels;
        pb.scoped("decoder", |pb| {
            for level in (1..=levels).rev() {
                let cin = prev + skip_channels[level - 1];
                let cout = dec_ch(level);
                let name = format!("stage{level}");
                let stage = match style {
                    DecoderStyle::Residual => {
                        Stage::Residual(ResidualBlock::new(pb, &name, cin, cout, 3))
                    }
                    DecoderStyle::DoubleConv => {
                        Stage::Double(DoubleConvBlock::new(pb, &name, cin, cout, cout))
                    }
                };
                stages.push(stage);
                prev = cout;
            }
        });
        let head = ConvLayer::new(pb, "head", prev, num_classes, 1, 1, 1, true, true);
        Decoder {
            stages,
            head,
            levels,
        }
    }

    /// skips: index 0 = full-resolution skip. Returns class logits.
    pub fn forward<T: Element>(
        &self,
        s: &mut Session<T>,
        bottleneck: Var,
        skips: &[Var],
    ) -> Result<Var> {
        debug_assert_eq!(skips.len(), self.levels);
        let mut x = bottleneck;
        for (i, stage) in self.stages.iter().enumerate() {
            let level = self.levels - i; // levels..1
            let up = s.g.upsample(x, 2)?;
            let cat = s.g.concat(&[up, skips[level - 1]], 1)?;
            x = match stage {
                Stage::Residual(b) => b.forward(s, cat)?,
                Stage::Double(b) => b.forward(s, cat)?,
            };
        }
        self.head.forward(s, x)
    }
}
