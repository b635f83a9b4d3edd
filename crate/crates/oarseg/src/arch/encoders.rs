//! Encoder structures of the seven segmentation networks. Every encoder
//! yields one skip per level (index 0 = full resolution, level l at
//! H/2^(l-1)) plus a bottleneck at H/2^levels; the shared decoder
//! consumes them uniformly.

use crate::blocks::conv::{AsppBlock, ConvLayer, ConvNormAct, DoubleConvBlock, ResidualBlock, UpStage};
use crate::blocks::transformer::{AttentionKind, PatchEmbed, PatchMerge, SwinBlock, TransformerBlock};
use crate::blocks::{NormLayer, NormMode, ParamBuilder, Session};
use crate::error::Result;
use crate::tensor::graph::Var;
use crate::tensor::Element;

/// Width/depth/scale knobs resolved from a model spec.
#[derive(Clone, Debug)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub width: usize,
    pub levels: usize,
    /// Nominal input extent used to size position embeddings.
    pub nominal: usize,
    pub vit_layers: usize,
    pub vit_embed: usize,
    pub performer_features: usize,
    pub window: usize,
    pub se_reduction: usize,
}

impl ArchConfig {
    /// Channel plan width·2^(level-1), level 1-based.
    pub fn ch(&self, level: usize) -> usize {
        self.width << (level - 1)
    }
}

pub struct EncoderOut {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

// ---------------------------------------------------------------- U-Net

/// Classic double-conv encoder with maxpool downsampling; the bottleneck
/// widens to 2x the deepest width and narrows back.
pub struct UnetEncoder {
    stages: Vec<DoubleConvBlock>,
    bott1: ConvNormAct,
    bott2: ConvNormAct,
}

impl UnetEncoder {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, cfg: &ArchConfig) -> Self {
        pb.scoped("encoder", |pb| {
            let mut stages = Vec::new();
            for l in 1..=cfg.levels {
                let cin = if l == 1 { cfg.in_channels } else { cfg.ch(l - 1) };
                stages.push(DoubleConvBlock::new(
                    pb,
                    &format!("stage{l}"),
                    cin,
                    cfg.ch(l),
                    cfg.ch(l),
                ));
            }
            let deep = cfg.ch(cfg.levels);
            let bott1 = ConvNormAct::new(pb, "bottleneck1", deep, 2 * deep, 3);
            let bott2 = ConvNormAct::new(pb, "bottleneck2", 2 * deep, deep, 3);
            UnetEncoder {
                stages,
                bott1,
                bott2,
            }
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<EncoderOut> {
        let mut skips = Vec::new();
        let mut cur = x;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                cur = s.g.maxpool2(cur)?;
            }
            cur = stage.forward(s, cur)?;
            skips.push(cur);
        }
        let pooled = s.g.maxpool2(cur)?;
        let b = self.bott1.forward(s, pooled)?;
        let bottleneck = self.bott2.forward(s, b)?;
        Ok(EncoderOut { skips, bottleneck })
    }
}

// ---------------------------------------------------------------- CUnet

/// Residual encoder with per-skip residual blocks and a dilated-pyramid
/// bottleneck.
pub struct CunetEncoder {
    stages: Vec<ResidualBlock>,
    skip_blocks: Vec<ResidualBlock>,
    aspp: AsppBlock,
}

impl CunetEncoder {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, cfg: &ArchConfig) -> Self {
        pb.scoped("encoder", |pb| {
            let mut stages = Vec::new();
            let mut skip_blocks = Vec::new();
            for l in 1..=cfg.levels {
                let cin = if l == 1 { cfg.in_channels } else { cfg.ch(l - 1) };
                stages.push(ResidualBlock::new(pb, &format!("stage{l}"), cin, cfg.ch(l), 3));
                skip_blocks.push(ResidualBlock::new(
                    pb,
                    &format!("skip{l}"),
                    cfg.ch(l),
                    cfg.ch(l),
                    3,
                ));
            }
            let deep = cfg.ch(cfg.levels);
            let aspp = AsppBlock::new(pb, "aspp", deep, deep);
            CunetEncoder {
                stages,
                skip_blocks,
                aspp,
            }
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<EncoderOut> {
        let mut skips = Vec::new();
        let mut cur = x;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                cur = s.g.maxpool2(cur)?;
            }
            cur = stage.forward(s, cur)?;
            skips.push(self.skip_blocks[i].forward(s, cur)?);
        }
        let pooled = s.g.maxpool2(cur)?;
        let bottleneck = self.aspp.forward(s, pooled)?;
        Ok(EncoderOut { skips, bottleneck })
    }
}

// ---------------------------------------------------------------- UNETR

/// Single patch embedding into a deep exact-attention encoder; skip taps
/// at evenly spaced layers are upscaled by transposed-conv stacks.
pub struct UnetrEncoder {
    stem: ResidualBlock,
    embed: PatchEmbed,
    layers: Vec<TransformerBlock>,
    /// tap index (layer, upstages) per skip level 2..=levels
    taps: Vec<(usize, Vec<UpStage>)>,
    bott: ConvNormAct,
    embed_dim: usize,
    patch: usize,
}

impl UnetrEncoder {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, cfg: &ArchConfig) -> Self {
        pb.scoped("encoder", |pb| {
            let patch = 1 << cfg.levels;
            let stem = ResidualBlock::new(pb, "stem", cfg.in_channels, cfg.ch(1), 3);
            let embed = PatchEmbed::new(
                pb,
                "embed",
                cfg.in_channels,
                patch,
                cfg.vit_embed,
                (cfg.nominal, cfg.nominal),
            );
            let layers: Vec<TransformerBlock> = (0..cfg.vit_layers)
                .map(|i| {
                    TransformerBlock::new(
                        pb,
                        &format!("layer{}", i + 1),
                        cfg.vit_embed,
                        AttentionKind::Exact,
                        i as u64,
                    )
                })
                .collect();
            // tap after layer L*j/levels for skip level j+1 (j=1..levels-1)
            let mut taps = Vec::new();
            for j in 1..cfg.levels {
                let layer = cfg.vit_layers * j / cfg.levels;
                let factors = cfg.levels - j; // upsample by 2^(levels-j)
                let mut ups = Vec::new();
                pb.scoped(&format!("tap{j}"), |pb| {
                    for f in 0..factors {
                        let cin = if f == 0 { cfg.vit_embed } else { cfg.ch(j + 1) };
                        ups.push(UpStage::new(pb, &format!("up{f}"), cin, cfg.ch(j + 1)));
                    }
                });
                taps.push((layer, ups));
            }
            let bott = ConvNormAct::new(pb, "bottleneck", cfg.vit_embed, cfg.ch(cfg.levels), 3);
            UnetrEncoder {
                stem,
                embed,
                layers,
                taps,
                bott,
                embed_dim: cfg.vit_embed,
                patch,
            }
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<EncoderOut> {
        let sh = s.g.shape(x).to_vec();
        let (b, h, w) = (sh[0], sh[2], sh[3]);
        let (gh, gw) = (h / self.patch, w / self.patch);
        let mut skips = vec![self.stem.forward(s, x)?];
        let mut tokens = self.embed.forward(s, x)?;
        let mut tap_vars: Vec<Var> = Vec::new();
        let mut next_tap = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            tokens = layer.forward(s, tokens)?;
            if next_tap < self.taps.len() && i + 1 == self.taps[next_tap].0 {
                tap_vars.push(tokens);
                next_tap += 1;
            }
        }
        let to_map = |s: &mut Session<T>, t: Var| -> Result<Var> {
            let r = s.g.reshape(t, &[b, gh, gw, self.embed_dim])?;
            s.g.permute(r, &[0, 3, 1, 2])
        };
        for (tap, (_, ups)) in tap_vars.iter().zip(&self.taps) {
            let mut m = to_map(s, *tap)?;
            for up in ups {
                m = up.forward(s, m)?;
            }
            skips.push(m);
        }
        let final_map = to_map(s, tokens)?;
        let bottleneck = self.bott.forward(s, final_map)?;
        Ok(EncoderOut { skips, bottleneck })
    }
}

// ---------------------------------------------------------------- Swin UNETR

/// Patch embedding at stride 2, then window-attention stages separated
/// by patch merging; skips pass through residual blocks.
pub struct SwinUnetrEncoder {
    stem: ResidualBlock,
    embed: PatchEmbed,
    stages: Vec<[SwinBlock; 2]>,
    merges: Vec<PatchMerge>,
    skip_blocks: Vec<ResidualBlock>,
    bott_block: ResidualBlock,
}

impl SwinUnetrEncoder {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, cfg: &ArchConfig) -> Self {
        pb.scoped("encoder", |pb| {
            let stem = ResidualBlock::new(pb, "stem", cfg.in_channels, cfg.ch(1), 3);
            let embed = PatchEmbed::new(
                pb,
                "embed",
                cfg.in_channels,
                2,
                cfg.ch(1),
                (cfg.nominal, cfg.nominal),
            );
            let mut stages = Vec::new();
            let mut merges = Vec::new();
            let mut skip_blocks = Vec::new();
            for l in 1..=cfg.levels {
                let dim = cfg.ch(l);
                stages.push([
                    SwinBlock::new(pb, &format!("stage{l}a"), dim, cfg.window, 0),
                    SwinBlock::new(pb, &format!("stage{l}b"), dim, cfg.window, cfg.window / 2),
                ]);
                if l < cfg.levels {
                    merges.push(PatchMerge::new(pb, &format!("merge{l}"), dim));
                    skip_blocks.push(ResidualBlock::new(pb, &format!("skip{l}"), dim, dim, 3));
                }
            }
            let deep = cfg.ch(cfg.levels);
            let bott_block = ResidualBlock::new(pb, "bottleneck", deep, deep, 3);
            SwinUnetrEncoder {
                stem,
                embed,
                stages,
                merges,
                skip_blocks,
                bott_block,
            }
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<EncoderOut> {
        let sh = s.g.shape(x).to_vec();
        let (b, h, w) = (sh[0], sh[2], sh[3]);
        let mut skips = vec![self.stem.forward(s, x)?];
        let tokens = self.embed.forward(s, x)?;
        let (mut gh, mut gw) = (h / 2, w / 2);
        let dim0 = s.g.shape(tokens)[2];
        let mut map = s.g.reshape(tokens, &[b, gh, gw, dim0])?;
        for (l, stage) in self.stages.iter().enumerate() {
            map = stage[0].forward(s, map)?;
            map = stage[1].forward(s, map)?;
            if l + 1 < self.stages.len() {
                // skip for level l+2 lives at this resolution
                let nchw = s.g.permute(map, &[0, 3, 1, 2])?;
                skips.push(self.skip_blocks[l].forward(s, nchw)?);
                map = self.merges[l].forward(s, map)?;
                gh /= 2;
                gw /= 2;
            }
        }
        let _ = (gh, gw);
        let nchw = s.g.permute(map, &[0, 3, 1, 2])?;
        let bottleneck = self.bott_block.forward(s, nchw)?;
        Ok(EncoderOut { skips, bottleneck })
    }
}

// ---------------------------------------------------------------- MSUneTr

/// Independent single-layer Vision Performers per level, patch size 2^n,
/// each feeding its decoder level directly through a skip conv block.
pub struct MsunetrEncoder {
    stem: ResidualBlock,
    embeds: Vec<PatchEmbed>,
    blocks: Vec<TransformerBlock>,
    skip_blocks: Vec<ResidualBlock>,
}

impl MsunetrEncoder {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, cfg: &ArchConfig) -> Self {
        pb.scoped("encoder", |pb| {
            let stem = ResidualBlock::new(pb, "stem", cfg.in_channels, cfg.ch(1), 3);
            let mut embeds = Vec::new();
            let mut blocks = Vec::new();
            let mut skip_blocks = Vec::new();
            for n in 1..=cfg.levels {
                let dim = cfg.ch(n);
                embeds.push(PatchEmbed::new(
                    pb,
                    &format!("embed{n}"),
                    cfg.in_channels,
                    1 << n,
                    dim,
                    (cfg.nominal, cfg.nominal),
                ));
                blocks.push(TransformerBlock::new(
                    pb,
                    &format!("performer{n}"),
                    dim,
                    AttentionKind::Performer {
                        random_features: cfg.performer_features,
                    },
                    n as u64,
                ));
                if n < cfg.levels {
                    skip_blocks.push(ResidualBlock::new(pb, &format!("skip{n}"), dim, dim, 3));
                }
            }
            MsunetrEncoder {
                stem,
                embeds,
                blocks,
                skip_blocks,
            }
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<EncoderOut> {
        let sh = s.g.shape(x).to_vec();
        let (b, h, w) = (sh[0], sh[2], sh[3]);
        let mut skips = vec![self.stem.forward(s, x)?];
        let mut bottleneck = None;
        for (i, (embed, block)) in self.embeds.iter().zip(&self.blocks).enumerate() {
            let n = i + 1;
            let tokens = embed.forward(s, x)?;
            let tokens = block.forward(s, tokens)?;
            let (gh, gw) = (h >> n, w >> n);
            let dim = s.g.shape(tokens)[2];
            let grid = s.g.reshape(tokens, &[b, gh, gw, dim])?;
            let map = s.g.permute(grid, &[0, 3, 1, 2])?;
            if n < self.embeds.len() {
                skips.push(self.skip_blocks[i].forward(s, map)?);
            } else {
                bottleneck = Some(map);
            }
        }
        Ok(EncoderOut {
            skips,
            bottleneck: bottleneck.expect("levels >= 2"),
        })
    }
}

// ---------------------------------------------------------------- DeceptiConv

/// Vision-Performer features concatenated with an independent residual
/// conv trunk at every level; squeeze-excitation then a residual fuse
/// block produce each skip.
pub struct DecepticonvEncoder {
    stem: ResidualBlock,
    embeds: Vec<PatchEmbed>,
    performer_blocks: Vec<TransformerBlock>,
    trunk: Vec<ResidualBlock>,
    se: Vec<crate::blocks::conv::SeBlock>,
    fuse: Vec<ResidualBlock>,
}

impl DecepticonvEncoder {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, cfg: &ArchConfig) -> Result<Self> {
        pb.scoped("encoder", |pb| {
            let stem = ResidualBlock::new(pb, "stem", cfg.in_channels, cfg.ch(1), 3);
            let mut embeds = Vec::new();
            let mut performer_blocks = Vec::new();
            let mut trunk = Vec::new();
            let mut se = Vec::new();
            let mut fuse = Vec::new();
            for n in 1..=cfg.levels {
                let dim = cfg.ch(n);
                embeds.push(PatchEmbed::new(
                    pb,
                    &format!("embed{n}"),
                    cfg.in_channels,
                    1 << n,
                    dim,
                    (cfg.nominal, cfg.nominal),
                ));
                performer_blocks.push(TransformerBlock::new(
                    pb,
                    &format!("performer{n}"),
                    dim,
                    AttentionKind::Performer {
                        random_features: cfg.performer_features,
                    },
                    n as u64,
                ));
                let tin = if n == 1 { cfg.in_channels } else { cfg.ch(n - 1) };
                trunk.push(ResidualBlock::new(pb, &format!("trunk{n}"), tin, dim, 3));
                se.push(crate::blocks::conv::SeBlock::new(
                    pb,
                    &format!("se{n}"),
                    2 * dim,
                    cfg.se_reduction,
                )?);
                fuse.push(ResidualBlock::new(pb, &format!("fuse{n}"), 2 * dim, dim, 3));
            }
            Ok(DecepticonvEncoder {
                stem,
                embeds,
                performer_blocks,
                trunk,
                se,
                fuse,
            })
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<EncoderOut> {
        let sh = s.g.shape(x).to_vec();
        let (b, h, w) = (sh[0], sh[2], sh[3]);
        let mut skips = vec![self.stem.forward(s, x)?];
        let mut conv_cur = x;
        let mut bottleneck = None;
        for n in 1..=self.embeds.len() {
            let i = n - 1;
            let tokens = self.embeds[i].forward(s, x)?;
            let tokens = self.performer_blocks[i].forward(s, tokens)?;
            let (gh, gw) = (h >> n, w >> n);
            let dim = s.g.shape(tokens)[2];
            let grid = s.g.reshape(tokens, &[b, gh, gw, dim])?;
            let perf_map = s.g.permute(grid, &[0, 3, 1, 2])?;

            conv_cur = s.g.maxpool2(conv_cur)?;
            conv_cur = self.trunk[i].forward(s, conv_cur)?;

            let cat = s.g.concat(&[perf_map, conv_cur], 1)?;
            let gated = self.se[i].forward(s, cat)?;
            let fused = self.fuse[i].forward(s, gated)?;
            if n < self.embeds.len() {
                skips.push(fused);
            } else {
                bottleneck = Some(fused);
            }
        }
        Ok(EncoderOut {
            skips,
            bottleneck: bottleneck.expect("levels >= 2"),
        })
    }
}

// ---------------------------------------------------------------- SwinConvNet

/// Learned 2x2 stride-2 downsampling convs play the patch-embedding
/// role; window-attention and residual conv features are concatenated,
/// gated by squeeze-excitation and fused, feeding every later level.
pub struct SwinconvnetEncoder {
    stem: ResidualBlock,
    down: Vec<(ConvLayer, NormLayer)>,
    attn: Vec<[SwinBlock; 2]>,
    conv: Vec<ResidualBlock>,
    se: Vec<crate::blocks::conv::SeBlock>,
    fuse: Vec<ResidualBlock>,
}

impl SwinconvnetEncoder {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, cfg: &ArchConfig) -> Result<Self> {
        pb.scoped("encoder", |pb| {
            let stem = ResidualBlock::new(pb, "stem", cfg.in_channels, cfg.ch(1), 3);
            let mut down = Vec::new();
            let mut attn = Vec::new();
            let mut conv = Vec::new();
            let mut se = Vec::new();
            let mut fuse = Vec::new();
            for n in 1..=cfg.levels {
                let dim = cfg.ch(n);
                let cin = if n == 1 { cfg.in_channels } else { cfg.ch(n - 1) };
                let (dc, dn) = pb.scoped(&format!("down{n}"), |pb| {
                    (
                        ConvLayer::new(pb, "conv", cin, dim, 2, 2, 1, false, false),
                        NormLayer::new(pb, "norm", NormMode::Batch, dim),
                    )
                });
                down.push((dc, dn));
                attn.push([
                    SwinBlock::new(pb, &format!("attn{n}a"), dim, cfg.window, 0),
                    SwinBlock::new(pb, &format!("attn{n}b"), dim, cfg.window, cfg.window / 2),
                ]);
                conv.push(ResidualBlock::new(pb, &format!("conv{n}"), dim, dim, 3));
                se.push(crate::blocks::conv::SeBlock::new(
                    pb,
                    &format!("se{n}"),
                    2 * dim,
                    cfg.se_reduction,
                )?);
                fuse.push(ResidualBlock::new(pb, &format!("fuse{n}"), 2 * dim, dim, 3));
            }
            Ok(SwinconvnetEncoder {
                stem,
                down,
                attn,
                conv,
                se,
                fuse,
            })
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<EncoderOut> {
        let mut skips = vec![self.stem.forward(s, x)?];
        let mut cur = x;
        let mut bottleneck = None;
        for n in 1..=self.down.len() {
            let i = n - 1;
            let (dc, dn) = &self.down[i];
            let d = dc.forward(s, cur)?;
            let d = dn.forward(s, d)?;
            let d = s.g.gelu(d)?;

            let bhwc = s.g.permute(d, &[0, 2, 3, 1])?;
            let a = self.attn[i][0].forward(s, bhwc)?;
            let a = self.attn[i][1].forward(s, a)?;
            let a_map = s.g.permute(a, &[0, 3, 1, 2])?;

            let c_map = self.conv[i].forward(s, d)?;
            let cat = s.g.concat(&[a_map, c_map], 1)?;
            let gated = self.se[i].forward(s, cat)?;
            let fused = self.fuse[i].forward(s, gated)?;
            if n < self.down.len() {
                skips.push(fused);
            } else {
                bottleneck = Some(fused);
            }
            cur = fused;
        }
        Ok(EncoderOut {
            skips,
            bottleneck: bottleneck.expect("levels >= 2"),
        })
    }
}
