//! Model builders: a plain MLP and a three-stage residual CNN.
//!
//! Every matmul/conv layer is a GEMM site. Quantized sites fake-quantize
//! their weights and input activations with the layer's precision and
//! stochastically round the activation gradient flowing back into the GEMM.
//! Biases and batch-norm stay in full precision.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnState, ConvGeom, Tape, Var};
use crate::cost::{layer_full_bitops, LayerCost, LayerDesc};
use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::quantizer::{PrecisionParam, FULL_PRECISION_BITS};
use crate::rng::{stream_rng, Stream};
use crate::schedule::LayerSlot;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected layers of the given widths, ReLU between them.
    Mlp { widths: Vec<usize> },
    /// Stem conv, three residual stages (channels `c, 2c, 4c`, downsampling by
    /// 2 between stages), global average pooling and a linear classifier.
    TinyResnet {
        in_channels: usize,
        image_size: usize,
        stem_channels: usize,
        blocks: [usize; 3],
        classes: usize,
    },
}

fn default_n() -> u32 {
    8
}

fn default_b_min() -> u32 {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
    #[serde(default)]
    pub quantize_first_last: bool,
    #[serde(default = "default_n")]
    pub n: u32,
    #[serde(default = "default_b_min")]
    pub b_min: u32,
    #[serde(default = "default_n")]
    pub b_max: u32,
}

impl ModelSpec {
    pub fn new(arch: Architecture) -> Self {
        ModelSpec {
            arch,
            quantize_first_last: false,
            n: default_n(),
            b_min: default_b_min(),
            b_max: default_n(),
        }
    }

    /// Shape of one input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match &self.arch {
            Architecture::Mlp { widths } => vec![widths.first().copied().unwrap_or(0)],
            Architecture::TinyResnet {
                in_channels,
                image_size,
                ..
            } => vec![*in_channels, *image_size, *image_size],
        }
    }

    pub fn classes(&self) -> usize {
        match &self.arch {
            Architecture::Mlp { widths } => widths.last().copied().unwrap_or(0),
            Architecture::TinyResnet { classes, .. } => *classes,
        }
    }
}

/// A matmul or conv layer.
#[derive(Clone, Debug)]
struct GemmLayer {
    name: String,
    weight: usize,
    bias: Option<usize>,
    /// `(stride, pad)` for conv layers.
    conv: Option<(usize, usize)>,
    /// Index into the precision params when quantized.
    quant: Option<usize>,
    block: Option<usize>,
    cost: LayerCost,
}

#[derive(Clone, Copy, Debug)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: usize,
    bn1: BnLayer,
    conv2: usize,
    bn2: BnLayer,
    shortcut: Option<(usize, BnLayer)>,
}

#[derive(Clone, Debug)]
enum Layout {
    Mlp,
    Resnet {
        stem: usize,
        stem_bn: BnLayer,
        blocks: Vec<ResBlock>,
        fc: usize,
    },
}

/// How one forward pass treats quantization.
#[derive(Clone, Copy, Debug)]
pub struct QuantPlan<'a> {
    pub training: bool,
    /// Bits per quantized layer; `None` runs the unquantized engine.
    pub bits: Option<&'a [u32]>,
    /// Quantize through the learnable precision params so their gradients
    /// land on the tape.
    pub learn_precision: bool,
    /// Bit width for activation gradients entering quantized GEMMs.
    pub grad_bits: Option<u32>,
    pub grad_seed: u64,
}

impl QuantPlan<'_> {
    pub fn unquantized(training: bool) -> Self {
        QuantPlan {
            training,
            bits: None,
            learn_precision: false,
            grad_bits: None,
            grad_seed: 0,
        }
    }
}

pub struct ForwardPass {
    pub logits: Var,
    pub param_vars: Vec<Var>,
    /// One leaf per precision param when the plan learns precision.
    pub beta_vars: Vec<Var>,
}

struct Bound {
    param_vars: Vec<Var>,
    beta_vars: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Parameter>,
    pub bn_states: Vec<BnState>,
    pub bn_names: Vec<String>,
    pub precisions: Vec<PrecisionParam>,
    gemms: Vec<GemmLayer>,
    layout: Layout,
}

struct Builder {
    params: Vec<Parameter>,
    bn_states: Vec<BnState>,
    bn_names: Vec<String>,
    gemms: Vec<GemmLayer>,
    rng: rand_chacha::ChaCha8Rng,
}

impl Builder {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f32).sqrt();
        let t = Tensor::normal(shape, std, &mut self.rng);
        self.params.push(Parameter::new(name, t));
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.params.push(Parameter::new(name, Tensor::zeros(shape)));
        self.params.len() - 1
    }

    fn linear(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        block: Option<usize>,
    ) -> Result<usize> {
        let weight = self.he(format!("{name}.weight"), &[fan_in, fan_out], fan_in);
        let bias = self.zeros(format!("{name}.bias"), &[fan_out]);
        let id = self.gemms.len();
        let cost = layer_full_bitops(
            id,
            name,
            &LayerDesc::MatMul {
                m: 1,
                k: fan_in,
                n: fan_out,
            },
        )?;
        self.gemms.push(GemmLayer {
            name: name.to_string(),
            weight,
            bias: Some(bias),
            conv: None,
            quant: None,
            block,
            cost,
        });
        Ok(id)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        c: usize,
        f: usize,
        k: usize,
        stride: usize,
        pad: usize,
        size: usize,
        block: Option<usize>,
    ) -> Result<(usize, usize)> {
        let geom = ConvGeom::new(&[1, c, size, size], k, k, stride, pad)?;
        let weight = self.he(format!("{name}.weight"), &[f, c, k, k], c * k * k);
        let id = self.gemms.len();
        let desc = LayerDesc::Conv2d {
            n: 1,
            c,
            h: size,
            w: size,
            f,
            kh: k,
            kw: k,
            stride,
            pad,
        };
        let cost = layer_full_bitops(id, name, &desc)?;
        self.gemms.push(GemmLayer {
            name: name.to_string(),
            weight,
            bias: None,
            conv: Some((stride, pad)),
            quant: None,
            block,
            cost,
        });
        Ok((id, geom.oh))
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnLayer {
        let gamma = self.params.len();
        self.params.push(Parameter::new(
            format!("{name}.gamma"),
            Tensor::ones(&[channels]),
        ));
        let beta = self.zeros(format!("{name}.beta"), &[channels]);
        self.bn_states.push(BnState::new(channels));
        self.bn_names.push(name.to_string());
        BnLayer {
            gamma,
            beta,
            state: self.bn_states.len() - 1,
        }
    }
}

impl Model {
    /// Builds and initializes a model. Weights use He-scaled normal draws from
    /// the weight stream of `seed`; every precision param starts at
    /// `beta_init` (or the highest precision).
    pub fn build(
        spec: &ModelSpec,
        seed: u64,
        lr_beta: f64,
        beta_init: Option<f64>,
    ) -> Result<Model> {
        let mut b = Builder {
            params: Vec::new(),
            bn_states: Vec::new(),
            bn_names: Vec::new(),
            gemms: Vec::new(),
            rng: stream_rng(seed, Stream::Weights),
        };
        let (layout, boundary) = match &spec.arch {
            Architecture::Mlp { widths } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::config(
                        "model.arch.widths",
                        format!("need at least two positive widths, got {widths:?}"),
                    ));
                }
                for (i, pair) in widths.windows(2).enumerate() {
                    b.linear(&format!("fc{i}"), pair[0], pair[1], None)?;
                }
                let last = b.gemms.len() - 1;
                (Layout::Mlp, vec![0, last])
            }
            Architecture::TinyResnet {
                in_channels,
                image_size,
                stem_channels,
                blocks,
                classes,
            } => {
                if *in_channels == 0 || *stem_channels == 0 || *classes < 2 || *image_size == 0 {
                    return Err(Error::config(
                        "model.arch",
                        "channels, image size must be positive and classes at least 2",
                    ));
                }
                if blocks.contains(&0) {
                    return Err(Error::config(
                        "model.arch.blocks",
                        "every stage needs at least one block",
                    ));
                }
                let shape_err = |e: Error| {
                    Error::config(
                        "model.arch.image_size",
                        format!("{e}; stride-2 stages need sizes like 9, 13, 17, 21"),
                    )
                };
                let mut size = *image_size;
                let (stem, s) = b
                    .conv("stem", *in_channels, *stem_channels, 3, 1, 1, size, None)
                    .map_err(shape_err)?;
                size = s;
                let stem_bn = b.bn("stem.bn", *stem_channels);
                let mut res_blocks = Vec::new();
                let mut cin = *stem_channels;
                for (stage, &count) in blocks.iter().enumerate() {
                    let cout = stem_channels << stage;
                    for i in 0..count {
                        let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                        let name = format!("stage{stage}.block{i}");
                        let (conv1, out_size) = b
                            .conv(
                                &format!("{name}.conv1"),
                                cin,
                                cout,
                                3,
                                stride,
                                1,
                                size,
                                Some(stage),
                            )
                            .map_err(shape_err)?;
                        let bn1 = b.bn(&format!("{name}.bn1"), cout);
                        let (conv2, _) = b
                            .conv(
                                &format!("{name}.conv2"),
                                cout,
                                cout,
                                3,
                                1,
                                1,
                                out_size,
                                Some(stage),
                            )
                            .map_err(shape_err)?;
                        let bn2 = b.bn(&format!("{name}.bn2"), cout);
                        let shortcut = if stride != 1 || cin != cout {
                            let (sc, _) = b
                                .conv(
                                    &format!("{name}.shortcut"),
                                    cin,
                                    cout,
                                    1,
                                    stride,
                                    0,
                                    size,
                                    Some(stage),
                                )
                                .map_err(shape_err)?;
                            Some((sc, b.bn(&format!("{name}.shortcut_bn"), cout)))
                        } else {
                            None
                        };
                        res_blocks.push(ResBlock {
                            conv1,
                            bn1,
                            conv2,
                            bn2,
                            shortcut,
                        });
                        size = out_size;
                        cin = cout;
                    }
                }
                let fc = b.linear("fc", cin, *classes, None)?;
                (
                    Layout::Resnet {
                        stem,
                        stem_bn,
                        blocks: res_blocks,
                        fc,
                    },
                    vec![stem, fc],
                )
            }
        };

        let mut quantized: Vec<usize> = (0..b.gemms.len())
            .filter(|i| spec.quantize_first_last || !boundary.contains(i))
            .collect();
        if quantized.is_empty() {
            warn!("exempting the first and last layers leaves nothing to quantize; quantizing all layers");
            quantized = (0..b.gemms.len()).collect();
        }
        let mut precisions = Vec::with_capacity(quantized.len());
        for (q, &g) in quantized.iter().enumerate() {
            let mut p = PrecisionParam::new(q, spec.n, spec.b_min, spec.b_max, lr_beta)?;
            if let Some(beta) = beta_init {
                p.set_beta(beta);
            }
            precisions.push(p);
            let layer = &mut b.gemms[g];
            layer.quant = Some(q);
            if matches!(layout, Layout::Mlp) {
                layer.block = Some(q);
            }
        }
        Ok(Model {
            spec: spec.clone(),
            params: b.params,
            bn_states: b.bn_states,
            bn_names: b.bn_names,
            precisions,
            gemms: b.gemms,
            layout,
        })
    }

    fn quantized(&self) -> impl Iterator<Item = &GemmLayer> {
        let mut layers: Vec<&GemmLayer> = self.gemms.iter().filter(|g| g.quant.is_some()).collect();
        layers.sort_by_key(|g| g.quant);
        layers.into_iter()
    }

    /// Costs of the quantized layers, `layer_id` = precision index.
    pub fn quantized_costs(&self) -> Vec<LayerCost> {
        self.quantized()
            .map(|g| LayerCost {
                layer_id: g.quant.expect("quantized"),
                ..g.cost.clone()
            })
            .collect()
    }

    /// Costs of every GEMM layer in build order.
    pub fn all_costs(&self) -> Vec<LayerCost> {
        self.gemms.iter().map(|g| g.cost.clone()).collect()
    }

    /// Costs of the layers that always run in full precision.
    pub fn exempt_costs(&self) -> Vec<LayerCost> {
        self.gemms
            .iter()
            .filter(|g| g.quant.is_none())
            .map(|g| g.cost.clone())
            .collect()
    }

    pub fn layer_slots(&self) -> Vec<LayerSlot> {
        self.quantized()
            .map(|g| LayerSlot {
                layer_id: g.quant.expect("quantized"),
                block: g.block,
            })
            .collect()
    }

    pub fn quantized_names(&self) -> Vec<String> {
        self.quantized().map(|g| g.name.clone()).collect()
    }

    pub fn num_quantized(&self) -> usize {
        self.precisions.len()
    }

    /// Copies the gradients of `param_vars` from the tape onto the parameters.
    pub fn collect_grads(&mut self, tape: &Tape, param_vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(param_vars) {
            p.grad = Some(
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape())),
            );
        }
        Ok(())
    }

    fn gemm(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        x: Var,
        fp: &Bound,
        plan: &QuantPlan,
    ) -> Result<Var> {
        let g = self.gemms[layer].clone();
        let w = fp.param_vars[g.weight];
        let quant_bits = match (g.quant, plan.bits) {
            (Some(q), Some(bits)) => Some((q, bits[q])),
            _ => None,
        };
        let (qx, qw) = match quant_bits {
            Some((q, _)) if plan.learn_precision => {
                let p = &self.precisions[q];
                let beta = fp.beta_vars[q];
                (
                    tape.fake_quantize(x, p, beta)?,
                    tape.fake_quantize(w, p, beta)?,
                )
            }
            Some((_, bits)) if bits < FULL_PRECISION_BITS => (
                tape.fake_quantize_fixed(x, bits)?,
                tape.fake_quantize_fixed(w, bits)?,
            ),
            _ => (x, w),
        };
        let mut y = match g.conv {
            Some((stride, pad)) => tape.conv2d(qx, qw, stride, pad)?,
            None => tape.matmul(qx, qw)?,
        };
        if let (Some((q, _)), Some(bw)) = (quant_bits, plan.grad_bits) {
            if plan.training && bw < FULL_PRECISION_BITS {
                let seed = plan.grad_seed ^ (q as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                y = tape.quantize_grad(y, bw, seed);
            }
        }
        if let Some(bias) = g.bias {
            y = tape.add_bias(y, fp.param_vars[bias])?;
        }
        Ok(y)
    }

    fn bn(
        &mut self,
        tape: &mut Tape,
        bn: BnLayer,
        x: Var,
        fp: &Bound,
        training: bool,
    ) -> Result<Var> {
        tape.batch_norm(
            x,
            fp.param_vars[bn.gamma],
            fp.param_vars[bn.beta],
            &mut self.bn_states[bn.state],
            training,
        )
    }

    /// Runs the model on a batch. Batch-norm running statistics are updated
    /// in training mode.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: Tensor,
        plan: &QuantPlan,
    ) -> Result<ForwardPass> {
        let mut expected = vec![input.shape().first().copied().unwrap_or(0)];
        expected.extend(self.spec.input_shape());
        if input.shape() != expected.as_slice() {
            return Err(Error::Dimension {
                op: "model input",
                lhs: input.shape().to_vec(),
                rhs: expected,
            });
        }
        if let Some(bits) = plan.bits {
            if bits.len() != self.precisions.len() {
                return Err(Error::Length(format!(
                    "{} bit widths for {} quantized layers",
                    bits.len(),
                    self.precisions.len()
                )));
            }
        }
        let param_vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let beta_vars = if plan.learn_precision {
            self.precisions
                .iter()
                .map(|p| tape.leaf(Tensor::scalar(p.beta as f32)))
                .collect()
        } else {
            Vec::new()
        };
        let fp = Bound {
            param_vars,
            beta_vars,
        };
        let x = tape.leaf(input);
        let logits = match self.layout.clone() {
            Layout::Mlp => {
                let mut h = x;
                let count = self.gemms.len();
                for i in 0..count {
                    h = self.gemm(tape, i, h, &fp, plan)?;
                    if i + 1 < count {
                        h = tape.relu(h);
                    }
                }
                h
            }
            Layout::Resnet {
                stem,
                stem_bn,
                blocks,
                fc,
            } => {
                let mut h = self.gemm(tape, stem, x, &fp, plan)?;
                h = self.bn(tape, stem_bn, h, &fp, plan.training)?;
                h = tape.relu(h);
                for blk in &blocks {
                    let mut o = self.gemm(tape, blk.conv1, h, &fp, plan)?;
                    o = self.bn(tape, blk.bn1, o, &fp, plan.training)?;
                    o = tape.relu(o);
                    o = self.gemm(tape, blk.conv2, o, &fp, plan)?;
                    o = self.bn(tape, blk.bn2, o, &fp, plan.training)?;
                    let sc = match blk.shortcut {
                        Some((conv, bn)) => {
                            let s = self.gemm(tape, conv, h, &fp, plan)?;
                            self.bn(tape, bn, s, &fp, plan.training)?
                        }
                        None => h,
                    };
                    let sum = tape.add(o, sc)?;
                    h = tape.relu(sum);
                }
                let pooled = tape.global_avg_pool(h)?;
                self.gemm(tape, fc, pooled, &fp, plan)?
            }
        };
        Ok(ForwardPass {
            logits,
            param_vars: fp.param_vars,
            beta_vars: fp.beta_vars,
        })
    }
}
