//! Gradient verification suite: finite-difference checks for every
//! differentiable op and architectural block on seeded miniature
//! instances, in 64-bit.

use std::sync::Arc;

use crate::blocks::attention::{attention_exact, attention_performer, window_attention};
use crate::blocks::conv::{
    AsppBlock, ConvLayer, ConvNormAct, DoubleConvBlock, ResidualBlock, SeBlock, UpStage,
};
use crate::blocks::transformer::{
    AttentionKind, Mlp, PatchEmbed, PatchMerge, SwinBlock, TransformerBlock,
};
use crate::blocks::{Linear, NormLayer, NormMode, ParamBuilder, ParamSet, Session};
use crate::error::Result;
use crate::tensor::gradcheck::{grad_check, seeded_uniform, GradCheckReport};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const GRAD_TOLERANCE: f64 = 1e-4;

fn op_cases() -> Vec<(&'static str, Result<GradCheckReport>)> {
    let tol = GRAD_TOLERANCE;
    let u = seeded_uniform;
    let mut out: Vec<(&'static str, Result<GradCheckReport>)> = Vec::new();

    out.push((
        "gelu",
        grad_check("gelu", &[u(&[8], 1)], tol, |g, v| g.gelu(v[0])),
    ));
    out.push((
        "sigmoid",
        grad_check("sigmoid", &[u(&[6], 2)], tol, |g, v| g.sigmoid(v[0])),
    ));
    out.push((
        "exp",
        grad_check("exp", &[u(&[6], 3)], tol, |g, v| g.exp(v[0])),
    ));
    out.push((
        "softmax",
        grad_check("softmax", &[u(&[3, 5], 4)], tol, |g, v| g.softmax(v[0], 1)),
    ));
    out.push((
        "matmul_nn",
        grad_check("matmul_nn", &[u(&[2, 3], 5), u(&[3, 4], 6)], tol, |g, v| {
            g.matmul(v[0], v[1], false, false)
        }),
    ));
    out.push((
        "matmul_nt",
        grad_check("matmul_nt", &[u(&[2, 3], 7), u(&[4, 3], 8)], tol, |g, v| {
            g.matmul(v[0], v[1], false, true)
        }),
    ));
    out.push((
        "matmul_tn",
        grad_check("matmul_tn", &[u(&[3, 2], 9), u(&[3, 4], 10)], tol, |g, v| {
            g.matmul(v[0], v[1], true, false)
        }),
    ));
    out.push((
        "matmul_batched",
        grad_check(
            "matmul_batched",
            &[u(&[2, 2, 3], 11), u(&[2, 3, 2], 12)],
            tol,
            |g, v| g.matmul(v[0], v[1], false, false),
        ),
    ));
    out.push((
        "conv2d_same",
        grad_check(
            "conv2d_same",
            &[u(&[1, 2, 5, 5], 13), u(&[3, 2, 3, 3], 14), u(&[3], 15)],
            tol,
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1, true),
        ),
    ));
    out.push((
        "conv2d_dilated",
        grad_check(
            "conv2d_dilated",
            &[u(&[1, 2, 6, 6], 16), u(&[2, 2, 3, 3], 17)],
            tol,
            |g, v| g.conv2d(v[0], v[1], None, 1, 2, true),
        ),
    ));
    out.push((
        "conv2d_strided_valid",
        grad_check(
            "conv2d_strided_valid",
            &[u(&[1, 1, 6, 6], 18), u(&[2, 1, 2, 2], 19)],
            tol,
            |g, v| g.conv2d(v[0], v[1], None, 2, 1, false),
        ),
    ));
    out.push((
        "conv2d_pointwise",
        grad_check(
            "conv2d_pointwise",
            &[u(&[2, 3, 4, 4], 20), u(&[2, 3, 1, 1], 21)],
            tol,
            |g, v| g.conv2d(v[0], v[1], None, 1, 1, true),
        ),
    ));
    out.push((
        "deconv2x2",
        grad_check(
            "deconv2x2",
            &[u(&[1, 2, 3, 3], 22), u(&[2, 3, 2, 2], 23)],
            tol,
            |g, v| g.deconv2x2(v[0], v[1]),
        ),
    ));
    out.push((
        "maxpool2",
        grad_check("maxpool2", &[u(&[1, 2, 6, 6], 24)], tol, |g, v| {
            g.maxpool2(v[0])
        }),
    ));
    out.push((
        "global_mean",
        grad_check("global_mean", &[u(&[2, 3, 4, 4], 25)], tol, |g, v| {
            g.global_mean(v[0])
        }),
    ));
    out.push((
        "bilinear_resize",
        grad_check("bilinear_resize", &[u(&[1, 2, 4, 4], 26)], tol, |g, v| {
            g.bilinear_resize(v[0], 6, 7)
        }),
    ));
    out.push((
        "upsample2",
        grad_check("upsample2", &[u(&[1, 2, 3, 3], 27)], tol, |g, v| {
            g.upsample(v[0], 2)
        }),
    ));
    out.push((
        "norm_batch",
        grad_check(
            "norm_batch",
            &[u(&[2, 3, 4, 4], 28), u(&[3], 29), u(&[3], 30)],
            tol,
            |g, v| Ok(g.norm_batch(v[0], v[1], v[2], 1e-5)?.0),
        ),
    ));
    out.push((
        "norm_batch_fixed",
        grad_check(
            "norm_batch_fixed",
            &[u(&[2, 3, 4, 4], 31), u(&[3], 32), u(&[3], 33)],
            tol,
            |g, v| {
                let mean = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
                let var = Tensor::from_vec(&[3], vec![0.9, 1.1, 0.8]).unwrap();
                g.norm_batch_fixed(v[0], v[1], v[2], mean, var, 1e-5)
            },
        ),
    ));
    out.push((
        "norm_layer",
        grad_check(
            "norm_layer",
            &[u(&[4, 6], 34), u(&[6], 35), u(&[6], 36)],
            tol,
            |g, v| g.norm_layer(v[0], v[1], v[2], 1e-5),
        ),
    ));
    out.push((
        "norm_instance",
        grad_check(
            "norm_instance",
            &[u(&[2, 3, 4, 4], 37), u(&[3], 38), u(&[3], 39)],
            tol,
            |g, v| g.norm_instance(v[0], v[1], v[2], 1e-5),
        ),
    ));
    out.push((
        "reduce_sum",
        grad_check("reduce_sum", &[u(&[2, 3, 4], 40)], tol, |g, v| {
            g.reduce_sum(v[0], 1)
        }),
    ));
    out.push((
        "mean_all",
        grad_check("mean_all", &[u(&[7], 41)], tol, |g, v| g.mean_all(v[0])),
    ));
    out.push((
        "binary_same_shape",
        grad_check(
            "binary_same_shape",
            &[u(&[2, 3], 42), u(&[2, 3], 43)],
            tol,
            |g, v| {
                let s = g.add(v[0], v[1])?;
                let m = g.mul(s, v[0])?;
                g.sub(m, v[1])
            },
        ),
    ));
    out.push((
        "binary_broadcast_suffix",
        grad_check(
            "binary_broadcast_suffix",
            &[u(&[2, 3, 4], 44), u(&[4], 45)],
            tol,
            |g, v| {
                let a = g.add(v[0], v[1])?;
                g.mul(a, v[1])
            },
        ),
    ));
    out.push((
        "binary_broadcast_lastdim",
        grad_check(
            "binary_broadcast_lastdim",
            &[u(&[2, 3, 4], 46), u(&[2, 3, 1], 47)],
            tol,
            |g, v| {
                // keep divisors away from zero
                let sq = g.mul(v[1], v[1])?;
                let one = g.constant(Tensor::full(&[2, 3, 1], 0.5))?;
                let denom = g.add(sq, one)?;
                g.div(v[0], denom)
            },
        ),
    ));
    out.push((
        "mul_scalar",
        grad_check("mul_scalar", &[u(&[5], 48)], tol, |g, v| {
            g.mul_scalar(v[0], -1.7)
        }),
    ));
    out.push((
        "reshape_permute",
        grad_check("reshape_permute", &[u(&[2, 3, 4], 49)], tol, |g, v| {
            let r = g.reshape(v[0], &[6, 4])?;
            let p = g.permute(r, &[1, 0])?;
            g.reshape(p, &[2, 2, 6])
        }),
    ));
    out.push((
        "concat",
        grad_check(
            "concat",
            &[u(&[1, 2, 2, 2], 50), u(&[1, 3, 2, 2], 51)],
            tol,
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
    ));
    out.push((
        "roll2d",
        grad_check("roll2d", &[u(&[1, 4, 4, 2], 52)], tol, |g, v| {
            g.roll2d(v[0], -1, 2)
        }),
    ));
    out.push((
        "pad_crop",
        grad_check("pad_crop", &[u(&[1, 2, 3, 3], 53)], tol, |g, v| {
            let p = g.pad2d(v[0], [1, 0, 2, 1])?;
            g.crop2d(p, [0, 1, 1, 0])
        }),
    ));
    out.push((
        "dice_ce_loss",
        grad_check("dice_ce_loss", &[u(&[1, 3, 2, 2], 54)], tol, |g, v| {
            let probs = g.softmax(v[0], 1)?;
            g.dice_ce(probs, Arc::new(vec![0, 1, 2, 1]), 1.0, 1.0)
        }),
    ));
    out.push((
        "attention_exact",
        grad_check(
            "attention_exact",
            &[u(&[1, 2, 4, 6], 55), u(&[1, 2, 4, 6], 56), u(&[1, 2, 4, 6], 57)],
            tol,
            |g, v| attention_exact(g, v[0], v[1], v[2]),
        ),
    ));
    out.push((
        "attention_performer",
        grad_check(
            "attention_performer",
            &[u(&[1, 1, 5, 4], 58), u(&[1, 1, 5, 4], 59), u(&[1, 1, 5, 4], 60)],
            tol,
            |g, v| attention_performer(g, v[0], v[1], v[2], 64, 123),
        ),
    ));
    out.push((
        "window_attention_shifted",
        grad_check(
            "window_attention_shifted",
            &[u(&[1, 6, 6, 4], 61)],
            tol,
            |g, v| window_attention(g, v[0], 4, 2, 2),
        ),
    ));
    out
}

/// Gradient check for a block: parameters and the input are all
/// perturbed. The block is built once; each evaluation re-binds the
/// perturbed tensors into a fresh training-mode session.
fn block_case<B>(
    name: &'static str,
    seed: u64,
    x_shape: &[usize],
    build_block: impl Fn(&mut ParamBuilder<f64>) -> B,
    forward: impl Fn(&B, &mut Session<f64>, Var) -> Result<Var>,
) -> (&'static str, Result<GradCheckReport>) {
    let mut pb = ParamBuilder::<f64>::new(seed);
    let block = build_block(&mut pb);
    let base = pb.finish();
    let trainable: Vec<usize> = base
        .ids()
        .filter(|id| base.get(*id).trainable)
        .map(|id| id.0)
        .collect();
    let mut inputs = vec![seeded_uniform(x_shape, seed ^ 0xa5a5)];
    for &i in &trainable {
        inputs.push(base.entries()[i].tensor.clone());
    }
    let report = grad_check(name, &inputs, GRAD_TOLERANCE, move |g, vars| {
        // the harness leaves double as the block's parameter leaves
        let mut s = Session::with_graph(std::mem::take(g), &base, true, 7);
        for (slot, &i) in trainable.iter().enumerate() {
            s.bind_override(crate::blocks::ParamId(i), vars[slot + 1]);
        }
        let out = forward(&block, &mut s, vars[0]);
        *g = s.into_graph();
        out
    });
    (name, report)
}

fn block_cases() -> Vec<(&'static str, Result<GradCheckReport>)> {
    vec![
        block_case(
            "linear",
            101,
            &[2, 3, 4],
            |pb| Linear::new(pb, "lin", 4, 5, true),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "norm_layer_block",
            102,
            &[3, 6],
            |pb| NormLayer::new(pb, "ln", NormMode::Layer, 6),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "norm_batch_block",
            103,
            &[2, 3, 3, 3],
            |pb| NormLayer::new(pb, "bn", NormMode::Batch, 3),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "conv_layer",
            104,
            &[1, 2, 5, 5],
            |pb| ConvLayer::new(pb, "conv", 2, 3, 3, 1, 1, true, true),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "conv_norm_act",
            105,
            &[1, 2, 4, 4],
            |pb| ConvNormAct::new(pb, "cna", 2, 3, 3),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "double_conv",
            106,
            &[1, 2, 4, 4],
            |pb| DoubleConvBlock::new(pb, "dc", 2, 3, 3),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "residual_block",
            107,
            &[1, 2, 4, 4],
            |pb| ResidualBlock::new(pb, "rb", 2, 4, 3),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "se_block",
            108,
            &[1, 8, 3, 3],
            |pb| SeBlock::new(pb, "se", 8, 4).expect("divisible"),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "aspp_block",
            109,
            &[1, 2, 5, 5],
            |pb| AsppBlock::new(pb, "aspp", 2, 3),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "up_stage",
            110,
            &[1, 3, 3, 3],
            |pb| UpStage::new(pb, "up", 3, 2),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "patch_embed",
            111,
            &[1, 1, 4, 4],
            |pb| PatchEmbed::new(pb, "pe", 1, 2, 6, (4, 4)),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "patch_embed_resized_grid",
            112,
            &[1, 1, 6, 6],
            |pb| PatchEmbed::new(pb, "pe", 1, 2, 4, (4, 4)),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "mlp",
            113,
            &[2, 3, 4],
            |pb| Mlp::new(pb, "mlp", 4),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "transformer_exact",
            114,
            &[1, 4, 8],
            |pb| TransformerBlock::new(pb, "t", 8, AttentionKind::Exact, 0),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "transformer_performer",
            115,
            &[1, 4, 8],
            |pb| {
                TransformerBlock::new(
                    pb,
                    "t",
                    8,
                    AttentionKind::Performer {
                        random_features: 32,
                    },
                    0,
                )
            },
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "swin_block",
            116,
            &[1, 4, 4, 8],
            |pb| SwinBlock::new(pb, "sw", 8, 2, 1),
            |b, s, x| b.forward(s, x),
        ),
        block_case(
            "patch_merge",
            117,
            &[1, 4, 4, 4],
            |pb| PatchMerge::new(pb, "pm", 4),
            |b, s, x| b.forward(s, x),
        ),
    ]
}

/// Run the full gradient verification suite.
pub fn run_gradient_suite() -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    for (name, result) in op_cases().into_iter().chain(block_cases()) {
        match result {
            Ok(r) => reports.push(r),
            Err(e) => reports.push(GradCheckReport {
                name: format!("{name} (errored: {e})"),
                max_rel_err: f64::INFINITY,
                pass: false,
            }),
        }
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check_scaled;

    #[test]
    fn full_suite_passes() {
        let reports = run_gradient_suite();
        let failures: Vec<String> = reports
            .iter()
            .filter(|r| !r.pass)
            .map(|r| format!("{}: {:.3e}", r.name, r.max_rel_err))
            .collect();
        assert!(failures.is_empty(), "gradient failures: {failures:?}");
    }

    #[test]
    fn corrupted_gradient_detected() {
        let x = seeded_uniform(&[8], 1);
        let report = grad_check_scaled("corrupted", &[x], GRAD_TOLERANCE, 1.01, |g, v| {
            g.gelu(v[0])
        })
        .unwrap();
        assert!(!report.pass);
    }
}
