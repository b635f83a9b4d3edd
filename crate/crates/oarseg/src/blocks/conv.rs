//! Convolutional building blocks: plain conv layers, double-conv and
//! residual blocks, squeeze-excitation gating and the dilated-pyramid
//! bottleneck.

use super::{Linear, NormLayer, NormMode, ParamBuilder, ParamId, Session};
use crate::error::{Error, Result};
use crate::tensor::graph::Var;
use crate::tensor::Element;

/// 2D convolution layer. Convs feeding a norm are built without bias
/// (the norm would cancel it exactly).
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub dilation: usize,
    pub same: bool,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        same: bool,
        bias: bool,
    ) -> Self {
        pb.scoped(name, |pb| {
            let kernel = pb.uniform_fan_in("kernel", &[cout, cin, k, k], cin * k * k);
            let bias = bias.then(|| pb.zeros_no_decay("bias", &[cout]));
            ConvLayer {
                kernel,
                bias,
                stride,
                dilation,
                same,
            }
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let k = s.var(self.kernel)?;
        let b = self.bias.map(|b| s.var(b)).transpose()?;
        s.g.conv2d(x, k, b, self.stride, self.dilation, self.same)
    }
}

/// conv(no bias) -> batch norm -> GeLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    conv: ConvLayer,
    norm: NormLayer,
}

impl ConvNormAct {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        pb.scoped(name, |pb| ConvNormAct {
            conv: ConvLayer::new(pb, "conv", cin, cout, k, 1, 1, true, false),
            norm: NormLayer::new(pb, "norm", NormMode::Batch, cout),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.norm.forward(s, y)?;
        s.g.gelu(y)
    }
}

/// Two conv-norm-GeLU stages (classic encoder/decoder stage).
#[derive(Clone, Debug)]
pub struct DoubleConvBlock {
    first: ConvNormAct,
    second: ConvNormAct,
}

impl DoubleConvBlock {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
    ) -> Self {
        pb.scoped(name, |pb| DoubleConvBlock {
            first: ConvNormAct::new(pb, "block1", cin, mid, 3),
            second: ConvNormAct::new(pb, "block2", mid, cout, 3),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.first.forward(s, x)?;
        self.second.forward(s, y)
    }
}

/// conv-norm-GeLU-conv-norm plus shortcut (1x1 conv when channels change),
/// then GeLU.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: ConvLayer,
    norm1: NormLayer,
    conv2: ConvLayer,
    norm2: NormLayer,
    shortcut: Option<ConvLayer>,
}

impl ResidualBlock {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        pb.scoped(name, |pb| ResidualBlock {
            conv1: ConvLayer::new(pb, "conv1", cin, cout, kernel, 1, 1, true, false),
            norm1: NormLayer::new(pb, "norm1", NormMode::Batch, cout),
            conv2: ConvLayer::new(pb, "conv2", cout, cout, kernel, 1, 1, true, false),
            norm2: NormLayer::new(pb, "norm2", NormMode::Batch, cout),
            shortcut: (cin != cout)
                .then(|| ConvLayer::new(pb, "shortcut", cin, cout, 1, 1, 1, true, true)),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(s, x)?;
        let y = self.norm1.forward(s, y)?;
        let y = s.g.gelu(y)?;
        let y = self.conv2.forward(s, y)?;
        let y = self.norm2.forward(s, y)?;
        let sc = match &self.shortcut {
            Some(conv) => conv.forward(s, x)?,
            None => x,
        };
        let sum = s.g.add(y, sc)?;
        s.g.gelu(sum)
    }
}

/// Squeeze-and-excitation: pooled bottleneck producing logistic channel
/// gates in (0,1) that rescale the input map.
#[derive(Clone, Debug)]
pub struct SeBlock {
    fc1: Linear,
    fc2: Linear,
}

impl SeBlock {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if channels % reduction != 0 {
            return Err(Error::config(format!(
                "se_block: channels {channels} not divisible by reduction {reduction}"
            )));
        }
        Ok(pb.scoped(name, |pb| SeBlock {
            fc1: Linear::new(pb, "fc1", channels, channels / reduction, true),
            fc2: Linear::new(pb, "fc2", channels / reduction, channels, true),
        }))
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let shape = s.g.shape(x).to_vec();
        let pooled = s.g.global_mean(x)?;
        let h = self.fc1.forward(s, pooled)?;
        let h = s.g.gelu(h)?;
        let h = self.fc2.forward(s, h)?;
        let gate = s.g.sigmoid(h)?;
        let gate = s.g.reshape(gate, &[shape[0], shape[1], 1, 1])?;
        s.g.mul(x, gate)
    }
}

/// Four parallel 3x3 convolutions with dilation rates 1..4 fused by a
/// 1x1 convolution back to `branch_channels` maps.
#[derive(Clone, Debug)]
pub struct AsppBlock {
    branches: Vec<ConvLayer>,
    reduce: ConvLayer,
}

impl AsppBlock {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        branch_channels: usize,
    ) -> Self {
        pb.scoped(name, |pb| {
            let branches = (1..=4)
                .map(|d| {
                    ConvLayer::new(
                        pb,
                        &format!("dilated{d}"),
                        cin,
                        branch_channels,
                        3,
                        1,
                        d,
                        true,
                        false,
                    )
                })
                .collect();
            let reduce = ConvLayer::new(
                pb,
                "reduce",
                4 * branch_channels,
                branch_channels,
                1,
                1,
                1,
                true,
                true,
            );
            AsppBlock { branches, reduce }
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let outs: Vec<Var> = self
            .branches
            .iter()
            .map(|b| b.forward(s, x))
            .collect::<Result<_>>()?;
        let cat = s.g.concat(&outs, 1)?;
        self.reduce.forward(s, cat)
    }
}

/// Transposed 2x2 stride-2 convolution with norm and GeLU, used to
/// upscale transformer taps onto convolutional grids.
#[derive(Clone, Debug)]
pub struct UpStage {
    pub kernel: ParamId,
    norm: NormLayer,
}

impl UpStage {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize) -> Self {
        pb.scoped(name, |pb| UpStage {
            kernel: pb.uniform_fan_in("kernel", &[cin, cout, 2, 2], cin),
            norm: NormLayer::new(pb, "norm", NormMode::Batch, cout),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let k = s.var(self.kernel)?;
        let y = s.g.deconv2x2(x, k)?;
        let y = self.norm.forward(s, y)?;
        s.g.gelu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{ParamBuilder, Session};
    use crate::tensor::gradcheck::seeded_uniform;
    use crate::tensor::Tensor;

    #[test]
    fn residual_zero_convs_pass_gelu_of_input() {
        let mut pb = ParamBuilder::<f64>::new(0);
        let block = ResidualBlock::new(&mut pb, "rb", 3, 3, 3);
        let mut params = pb.finish();
        // zero every conv kernel; norm gain 1 offset 0 is the default
        for id in params.ids().collect::<Vec<_>>() {
            if params.get(id).name.contains("conv") {
                let shape = params.tensor(id).shape().to_vec();
                params.set_tensor(id, Tensor::zeros(&shape));
            }
        }
        let x = seeded_uniform(&[1, 3, 4, 4], 3);
        let mut s = Session::new(&params, false, 0);
        let xv = s.g.leaf(x.clone(), false).unwrap();
        let y = block.forward(&mut s, xv).unwrap();
        let gelu_x: Vec<f64> = {
            let mut g = crate::tensor::graph::Graph::new();
            let xv = g.leaf(x, false).unwrap();
            let y = g.gelu(xv).unwrap();
            g.value(y).values().to_vec()
        };
        // eval-mode norms use unit running stats on a zero main path
        for (a, b) in s.g.value(y).values().iter().zip(&gelu_x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_changes_channels() {
        let mut pb = ParamBuilder::<f64>::new(0);
        let block = ResidualBlock::new(&mut pb, "rb", 48, 96, 3);
        let params = pb.finish();
        let mut s = Session::new(&params, false, 0);
        let x = s.g.leaf(seeded_uniform(&[1, 48, 16, 16], 5), false).unwrap();
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.g.shape(y), &[1, 96, 16, 16]);
    }

    #[test]
    fn se_gates_scale_channels() {
        let mut pb = ParamBuilder::<f64>::new(1);
        let block = SeBlock::new(&mut pb, "se", 8, 4).unwrap();
        let params = pb.finish();
        let x = seeded_uniform(&[2, 8, 3, 3], 11);
        let mut s = Session::new(&params, false, 0);
        let xv = s.g.leaf(x.clone(), false).unwrap();
        let y = block.forward(&mut s, xv).unwrap();

        // oracle: per (n,c), out = x * sigmoid(fc2(gelu(fc1(mean))))
        let w1 = params.tensor(block.fc1.w).values().to_vec();
        let b1 = params.tensor(block.fc1.b.unwrap()).values().to_vec();
        let w2 = params.tensor(block.fc2.w).values().to_vec();
        let b2 = params.tensor(block.fc2.b.unwrap()).values().to_vec();
        let gelu = |x: f64| x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        for n in 0..2 {
            let means: Vec<f64> = (0..8)
                .map(|c| {
                    (0..9)
                        .map(|i| x.values()[(n * 8 + c) * 9 + i])
                        .sum::<f64>()
                        / 9.0
                })
                .collect();
            let hid: Vec<f64> = (0..2)
                .map(|j| gelu((0..8).map(|i| means[i] * w1[i * 2 + j]).sum::<f64>() + b1[j]))
                .collect();
            for c in 0..8 {
                let logit: f64 = (0..2).map(|j| hid[j] * w2[j * 8 + c]).sum::<f64>() + b2[c];
                let gate = 1.0 / (1.0 + (-logit).exp());
                assert!(gate > 0.0 && gate < 1.0);
                for i in 0..9 {
                    let idx = (n * 8 + c) * 9 + i;
                    let expect = x.values()[idx] * gate;
                    assert!((s.g.value(y).values()[idx] - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn aspp_shape_and_zero_input() {
        let mut pb = ParamBuilder::<f64>::new(2);
        let block = AsppBlock::new(&mut pb, "aspp", 6, 10);
        let params = pb.finish();
        let mut s = Session::new(&params, false, 0);
        let x = s.g.leaf(Tensor::zeros(&[1, 6, 5, 5]), false).unwrap();
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.g.shape(y), &[1, 10, 5, 5]);
        // zero input and zero biases give a zero output
        assert!(s.g.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aspp_paper_scale_parameter_count() {
        let mut pb = ParamBuilder::<f32>::new(3);
        AsppBlock::new(&mut pb, "aspp", 384, 384);
        let params = pb.finish();
        assert_eq!(params.count_trainable(), 5_898_624);
    }
}
