//! Declarative construction of ANN teachers and SNN students as block
//! sequences, plus the taped forward pass over them.
//!
//! A spec is lowered to a flat list of primitive steps with assigned
//! parameter slots; the same lowering drives parameter counting, MAC
//! counting, and the forward pass, so the three can never disagree.

use crate::autodiff::{SpikeMode, Tape, Var};
use crate::error::{Error, Result};
use crate::partition::FeatureMatrix;
use crate::snn::{encode_repeat, lif_step, LifParams};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Ann,
    Snn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BlockSpec {
    /// 3×3 (or k×k) convolution followed by batch norm and activation.
    ConvBlock { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    MaxPool { window: usize, stride: usize },
    /// Two-conv residual block with identity or 1×1-projection skip.
    ResBlock { out_channels: usize, stride: usize },
    GlobalAvgPool,
    /// Flatten and project to a feature vector of the given width, with
    /// activation (ReLU or LIF per net kind).
    FeatureLinear { out: usize },
    /// Flatten without projection (feature vector = flattened activations).
    Flatten,
}

/// Architecture description: an ordered block list, the feature readout,
/// and an optional linear classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub kind: NetKind,
    /// C, H, W of a single input sample.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub blocks: Vec<BlockSpec>,
    pub with_head: bool,
    pub lif: LifParams,
}

// ---- lowering ----

#[derive(Debug, Clone)]
enum Step {
    Conv { w: usize, b: usize, stride: usize, padding: usize, label: String },
    BatchNorm { gamma: usize, beta: usize, stats: usize },
    Act { state: usize },
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Linear { w: usize, b: usize, label: String },
    /// Save the current value as skip input; optional 1×1 projection params.
    SkipBegin { proj: Option<(usize, usize, usize, usize)>, stride: usize, label: String },
    /// Add the (projected) saved value back in.
    SkipEnd,
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

/// Static description of one parameterized layer, used for MAC/parameter
/// accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub label: String,
    pub macs_per_sample: u64,
    pub params: u64,
    pub out_neurons: u64,
}

struct Lowering {
    steps: Vec<Step>,
    param_shapes: Vec<Vec<usize>>,
    param_names: Vec<String>,
    n_stats: usize,
    n_states: usize,
    feature_dim: usize,
    layers: Vec<LayerSummary>,
}

fn lower(spec: &ArchSpec) -> Result<Lowering> {
    let mut steps = Vec::new();
    let mut param_shapes: Vec<Vec<usize>> = Vec::new();
    let mut param_names: Vec<String> = Vec::new();
    let mut n_stats = 0usize;
    let mut n_states = 0usize;
    let mut layers = Vec::new();
    let mut shape = Shape::Spatial {
        c: spec.input_shape[0],
        h: spec.input_shape[1],
        w: spec.input_shape[2],
    };

    let add_param = |shapes: &mut Vec<Vec<usize>>, names: &mut Vec<String>, name: String, s: Vec<usize>| -> usize {
        shapes.push(s);
        names.push(name);
        shapes.len() - 1
    };

    let conv_out = |h: usize, w: usize, k: usize, stride: usize, pad: usize| -> Result<(usize, usize)> {
        let hp = h + 2 * pad;
        let wp = w + 2 * pad;
        if k > hp || k > wp {
            return Err(Error::shape(
                "arch",
                format!("conv {}x{} stride {} pad {} on {}x{}", k, k, stride, pad, h, w),
            ));
        }
        // floor semantics, matching the conv primitive
        Ok(((hp - k) / stride + 1, (wp - k) / stride + 1))
    };

    for (bi, block) in spec.blocks.iter().enumerate() {
        match *block {
            BlockSpec::ConvBlock { out_channels, kernel, stride, padding } => {
                let Shape::Spatial { c, h, w } = shape else {
                    return Err(Error::shape("arch", "conv after flatten"));
                };
                let (oh, ow) = conv_out(h, w, kernel, stride, padding)?;
                let label = format!("conv{}", bi);
                let wi = add_param(&mut param_shapes, &mut param_names, format!("{}.w", label), vec![out_channels, c, kernel, kernel]);
                let bias = add_param(&mut param_shapes, &mut param_names, format!("{}.b", label), vec![out_channels]);
                let gamma = add_param(&mut param_shapes, &mut param_names, format!("{}.bn.gamma", label), vec![out_channels]);
                let beta = add_param(&mut param_shapes, &mut param_names, format!("{}.bn.beta", label), vec![out_channels]);
                layers.push(LayerSummary {
                    label: label.clone(),
                    macs_per_sample: (oh * ow * out_channels * c * kernel * kernel) as u64,
                    params: ((out_channels * c * kernel * kernel) + out_channels * 3) as u64,
                    out_neurons: (out_channels * oh * ow) as u64,
                });
                steps.push(Step::Conv { w: wi, b: bias, stride, padding, label });
                steps.push(Step::BatchNorm { gamma, beta, stats: n_stats });
                n_stats += 1;
                steps.push(Step::Act { state: n_states });
                n_states += 1;
                shape = Shape::Spatial { c: out_channels, h: oh, w: ow };
            }
            BlockSpec::MaxPool { window, stride } => {
                let Shape::Spatial { c, h, w } = shape else {
                    return Err(Error::shape("arch", "maxpool after flatten"));
                };
                if window > h || window > w || (h - window) % stride != 0 || (w - window) % stride != 0 {
                    return Err(Error::shape(
                        "arch",
                        format!("maxpool {}x{} stride {} on {}x{}", window, window, stride, h, w),
                    ));
                }
                steps.push(Step::MaxPool { window, stride });
                shape = Shape::Spatial {
                    c,
                    h: (h - window) / stride + 1,
                    w: (w - window) / stride + 1,
                };
            }
            BlockSpec::ResBlock { out_channels, stride } => {
                let Shape::Spatial { c, h, w } = shape else {
                    return Err(Error::shape("arch", "resblock after flatten"));
                };
                let (oh, ow) = conv_out(h, w, 3, stride, 1)?;
                let label = format!("res{}", bi);
                let needs_proj = stride != 1 || c != out_channels;
                let proj = if needs_proj {
                    let pw = add_param(&mut param_shapes, &mut param_names, format!("{}.proj.w", label), vec![out_channels, c, 1, 1]);
                    let pb = add_param(&mut param_shapes, &mut param_names, format!("{}.proj.b", label), vec![out_channels]);
                    let pg = add_param(&mut param_shapes, &mut param_names, format!("{}.proj.bn.gamma", label), vec![out_channels]);
                    let pbeta = add_param(&mut param_shapes, &mut param_names, format!("{}.proj.bn.beta", label), vec![out_channels]);
                    Some((pw, pb, pg, pbeta))
                } else {
                    None
                };
                steps.push(Step::SkipBegin { proj, stride, label: label.clone() });
                if needs_proj {
                    layers.push(LayerSummary {
                        label: format!("{}.proj", label),
                        macs_per_sample: (oh * ow * out_channels * c) as u64,
                        params: (out_channels * c + out_channels * 3) as u64,
                        out_neurons: (out_channels * oh * ow) as u64,
                    });
                }
                for (ci, (cin, s)) in [(c, stride), (out_channels, 1)].into_iter().enumerate() {
                    let clabel = format!("{}.conv{}", label, ci);
                    let wi = add_param(&mut param_shapes, &mut param_names, format!("{}.w", clabel), vec![out_channels, cin, 3, 3]);
                    let bias = add_param(&mut param_shapes, &mut param_names, format!("{}.b", clabel), vec![out_channels]);
                    let gamma = add_param(&mut param_shapes, &mut param_names, format!("{}.bn.gamma", clabel), vec![out_channels]);
                    let beta = add_param(&mut param_shapes, &mut param_names, format!("{}.bn.beta", clabel), vec![out_channels]);
                    layers.push(LayerSummary {
                        label: clabel.clone(),
                        macs_per_sample: (oh * ow * out_channels * cin * 9) as u64,
                        params: (out_channels * cin * 9 + out_channels * 3) as u64,
                        out_neurons: (out_channels * oh * ow) as u64,
                    });
                    steps.push(Step::Conv { w: wi, b: bias, stride: s, padding: 1, label: clabel });
                    steps.push(Step::BatchNorm { gamma, beta, stats: n_stats });
                    n_stats += 1;
                    if ci == 0 {
                        steps.push(Step::Act { state: n_states });
                        n_states += 1;
                    }
                }
                steps.push(Step::SkipEnd);
                steps.push(Step::Act { state: n_states });
                n_states += 1;
                shape = Shape::Spatial { c: out_channels, h: oh, w: ow };
            }
            BlockSpec::GlobalAvgPool => {
                let Shape::Spatial { c, .. } = shape else {
                    return Err(Error::shape("arch", "avgpool after flatten"));
                };
                steps.push(Step::GlobalAvgPool);
                shape = Shape::Flat { d: c };
            }
            BlockSpec::Flatten => {
                let Shape::Spatial { c, h, w } = shape else {
                    return Err(Error::shape("arch", "double flatten"));
                };
                steps.push(Step::Flatten);
                shape = Shape::Flat { d: c * h * w };
            }
            BlockSpec::FeatureLinear { out } => {
                let d_in = match shape {
                    Shape::Spatial { c, h, w } => {
                        steps.push(Step::Flatten);
                        c * h * w
                    }
                    Shape::Flat { d } => d,
                };
                let label = format!("feature{}", bi);
                let wi = add_param(&mut param_shapes, &mut param_names, format!("{}.w", label), vec![d_in, out]);
                let bias = add_param(&mut param_shapes, &mut param_names, format!("{}.b", label), vec![out]);
                layers.push(LayerSummary {
                    label: label.clone(),
                    macs_per_sample: (d_in * out) as u64,
                    params: (d_in * out + out) as u64,
                    out_neurons: out as u64,
                });
                steps.push(Step::Linear { w: wi, b: bias, label });
                // spiking students read the projection out as firing
                // rates; the ann teacher keeps it linear so features can
                // go negative (signed feature geometry)
                if spec.kind == NetKind::Snn {
                    steps.push(Step::Act { state: n_states });
                    n_states += 1;
                }
                shape = Shape::Flat { d: out };
            }
        }
    }
    let feature_dim = match shape {
        Shape::Flat { d } => d,
        Shape::Spatial { c, h, w } => {
            steps.push(Step::Flatten);
            c * h * w
        }
    };
    if spec.with_head {
        let wi = add_param(&mut param_shapes, &mut param_names, "head.w".into(), vec![feature_dim, spec.classes]);
        let bias = add_param(&mut param_shapes, &mut param_names, "head.b".into(), vec![spec.classes]);
        layers.push(LayerSummary {
            label: "head".into(),
            macs_per_sample: (feature_dim * spec.classes) as u64,
            params: (feature_dim * spec.classes + spec.classes) as u64,
            out_neurons: spec.classes as u64,
        });
        steps.push(Step::Linear { w: wi, b: bias, label: "head".into() });
    }
    Ok(Lowering {
        steps,
        param_shapes,
        param_names,
        n_stats,
        n_states,
        feature_dim,
        layers,
    })
}

impl ArchSpec {
    pub fn feature_dim(&self) -> Result<usize> {
        Ok(lower(self)?.feature_dim)
    }

    /// Total trainable parameter count, a pure function of the spec.
    pub fn param_count(&self) -> Result<u64> {
        let l = lower(self)?;
        Ok(l
            .param_shapes
            .iter()
            .map(|s| s.iter().product::<usize>() as u64)
            .sum())
    }

    /// Static per-layer MAC and parameter accounting.
    pub fn layer_summaries(&self) -> Result<Vec<LayerSummary>> {
        Ok(lower(self)?.layers)
    }
}

/// Standard VGG channel progressions for 32×32 inputs. The mini variant
/// halves the widths of the last two conv layers.
pub fn vgg_spec(depth: usize, mini: bool, kind: NetKind) -> Result<ArchSpec> {
    let mut plan: Vec<Vec<usize>> = match depth {
        // 4 conv layers + head, one pool after each conv stage
        5 => vec![vec![64], vec![128], vec![256], vec![512]],
        11 => vec![vec![64], vec![128], vec![256, 256], vec![512, 512], vec![512, 512]],
        19 => vec![
            vec![64, 64],
            vec![128, 128],
            vec![256, 256, 256, 256],
            vec![512, 512, 512, 512],
            vec![512, 512, 512, 512],
        ],
        _ => {
            return Err(Error::invalid(
                "vgg_spec",
                format!("unsupported depth {}", depth),
            ))
        }
    };
    if mini {
        // halve the last two conv widths
        let mut remaining = 2;
        'outer: for stage in plan.iter_mut().rev() {
            for ch in stage.iter_mut().rev() {
                *ch /= 2;
                remaining -= 1;
                if remaining == 0 {
                    break 'outer;
                }
            }
        }
    }
    let mut blocks = Vec::new();
    for stage in &plan {
        for &ch in stage {
            blocks.push(BlockSpec::ConvBlock {
                out_channels: ch,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
        }
        blocks.push(BlockSpec::MaxPool { window: 2, stride: 2 });
    }
    blocks.push(BlockSpec::Flatten);
    let name = format!("vgg{}{}", depth, if mini { "mini" } else { "" });
    Ok(ArchSpec {
        name,
        kind,
        input_shape: [3, 32, 32],
        classes: 10,
        blocks,
        with_head: true,
        lif: LifParams::default(),
    })
}

/// Residual architectures for 32×32 inputs: a 3×3 stem then four stages.
/// Depth 18 has two blocks per stage, depth 10 has one. `base_channels`
/// scales every stage (54 gives the mini variant).
pub fn resnet_spec(depth: usize, base_channels: usize, kind: NetKind) -> Result<ArchSpec> {
    let blocks_per_stage = match depth {
        10 => 1,
        18 => 2,
        _ => {
            return Err(Error::invalid(
                "resnet_spec",
                format!("unsupported depth {}", depth),
            ))
        }
    };
    let mut blocks = vec![BlockSpec::ConvBlock {
        out_channels: base_channels,
        kernel: 3,
        stride: 1,
        padding: 1,
    }];
    for (stage, expansion) in [1usize, 2, 4, 8].into_iter().enumerate() {
        let ch = base_channels * expansion;
        for b in 0..blocks_per_stage {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            blocks.push(BlockSpec::ResBlock { out_channels: ch, stride });
        }
    }
    blocks.push(BlockSpec::GlobalAvgPool);
    let name = format!(
        "resnet{}{}",
        depth,
        if base_channels == 64 { "" } else { "mini" }
    );
    Ok(ArchSpec {
        name,
        kind,
        input_shape: [3, 32, 32],
        classes: 10,
        blocks,
        with_head: true,
        lif: LifParams::default(),
    })
}

/// Small conv net for desk-scale runs and CI.
pub fn tiny_spec(
    kind: NetKind,
    input_shape: [usize; 3],
    classes: usize,
    feature_dim: usize,
    with_head: bool,
) -> ArchSpec {
    ArchSpec {
        name: "tiny".into(),
        kind,
        input_shape,
        classes,
        blocks: vec![
            BlockSpec::ConvBlock { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            BlockSpec::MaxPool { window: 2, stride: 2 },
            BlockSpec::ConvBlock { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            BlockSpec::GlobalAvgPool,
            BlockSpec::FeatureLinear { out: feature_dim },
        ],
        with_head,
        lif: LifParams::default(),
    }
}

/// Mean input activation seen by one parameterized layer during a forward
/// pass. For spiking inputs this is the mean spike rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub label: String,
    pub mean_input_rate: f64,
    /// Rows of the input actually processed (T·B for trunk layers in an
    /// SNN, B for the head and for ANN layers).
    pub rows: usize,
    /// Total input elements across all rows.
    pub input_numel: usize,
    /// True when the layer consumes real-valued (non-spike) input, e.g. the
    /// first layer on raw pixels or the head on firing rates.
    pub analog_input: bool,
}

/// Built network: spec, parameters, batch-norm running stats, LIF states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelInstance {
    pub spec: ArchSpec,
    pub params: Vec<Tensor>,
    pub param_names: Vec<String>,
    pub running_stats: Vec<(Tensor, Tensor)>,
    pub lif_states: Vec<Option<Tensor>>,
    pub feature_dim: usize,
}

/// Output of one forward pass.
pub struct ForwardOutput {
    /// `[B, feature_dim]`: penultimate activations (ANN) or firing rates (SNN).
    pub features: Var,
    /// `[B, classes]`, present when the spec has a head.
    pub logits: Option<Var>,
    /// Tape leaves for the parameters, aligned with `ModelInstance::params`.
    pub param_vars: Vec<Var>,
    pub trace: Vec<LayerTrace>,
}

/// Initialize parameters deterministically from a seed: Kaiming-uniform
/// fan-in for conv/linear weights, zero bias, norm scale 1 shift 0.
pub fn build_model(spec: &ArchSpec, seed: u64) -> Result<ModelInstance> {
    let lowering = lower(spec)?;
    let mut rng = crate::rng::substream(seed, "init");
    let mut params = Vec::with_capacity(lowering.param_shapes.len());
    for (shape, name) in lowering.param_shapes.iter().zip(&lowering.param_names) {
        let t = if name.ends_with(".bn.gamma") || name.ends_with("gamma") {
            Tensor::full(shape, 1.0)
        } else if name.ends_with(".b") || name.ends_with("beta") {
            Tensor::zeros(shape)
        } else if shape.len() == 4 {
            let fan_in = shape[1] * shape[2] * shape[3];
            Tensor::kaiming_uniform(shape, fan_in, &mut rng)
        } else if shape.len() == 2 {
            Tensor::kaiming_uniform(shape, shape[0], &mut rng)
        } else {
            Tensor::zeros(shape)
        };
        params.push(t);
    }
    let running_stats = (0..lowering.n_stats)
        .map(|_| (Tensor::zeros(&[0]), Tensor::zeros(&[0])))
        .collect();
    Ok(ModelInstance {
        spec: spec.clone(),
        params,
        param_names: lowering.param_names,
        running_stats,
        lif_states: vec![None; lowering.n_states],
        feature_dim: lowering.feature_dim,
    })
}

impl ModelInstance {
    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.len() as u64).sum()
    }

    /// Set every LIF membrane state back to v_reset. Mandatory between
    /// independent input sequences.
    pub fn reset_states(&mut self) {
        for s in self.lif_states.iter_mut() {
            *s = None;
        }
    }

    /// Forward pass over a pre-encoded batch. For SNN kind `input` must be
    /// the `[T·B, C, H, W]` time-major encoding; for ANN, `[B, C, H, W]`
    /// with `t_steps == 1`. `train` selects batch-vs-running BN statistics
    /// and updates the running averages.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: &Tensor,
        t_steps: usize,
        mode: SpikeMode,
        train: bool,
    ) -> Result<ForwardOutput> {
        let lowering = lower(&self.spec)?;
        if self.spec.kind == NetKind::Ann && t_steps != 1 {
            return Err(Error::invalid("forward", "ANN forward requires t_steps == 1"));
        }
        if input.shape.len() != 4
            || input.shape[1..] != self.spec.input_shape
            || input.shape[0] % t_steps != 0
        {
            return Err(Error::shape(
                "forward",
                format!(
                    "input {:?} vs spec {:?} with T={}",
                    input.shape, self.spec.input_shape, t_steps
                ),
            ));
        }
        let batch = input.shape[0] / t_steps;
        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();

        let mut x = tape.leaf(input.clone());
        let mut feature_var: Option<Var> = None;
        let mut trace = Vec::new();
        let mut skip_stack: Vec<(Var, Option<(usize, usize, usize, usize)>, usize)> = Vec::new();
        let mut first_analog = true;
        let mut new_states: Vec<(usize, Tensor)> = Vec::new();

        for step in &lowering.steps {
            match step {
                Step::Conv { w, b, stride, padding, label } => {
                    let xv = tape.value(x);
                    trace.push(LayerTrace {
                        label: label.clone(),
                        mean_input_rate: xv.mean(),
                        rows: xv.shape[0],
                        input_numel: xv.len(),
                        analog_input: first_analog,
                    });
                    first_analog = false;
                    let y = tape.conv2d(x, param_vars[*w], *stride, *padding)?;
                    x = tape.add_channel_bias(y, param_vars[*b])?;
                }
                Step::BatchNorm { gamma, beta, stats } => {
                    let running = if train {
                        None
                    } else {
                        let (m, v) = &self.running_stats[*stats];
                        if m.is_empty() {
                            None // never trained: fall back to batch stats
                        } else {
                            Some((m, v))
                        }
                    };
                    // clone running refs out to satisfy the borrow checker
                    let running_owned = running.map(|(m, v)| (m.clone(), v.clone()));
                    let (y, batch_stats) = tape.batch_norm(
                        x,
                        param_vars[*gamma],
                        param_vars[*beta],
                        running_owned.as_ref().map(|(m, v)| (m, v)),
                        BN_EPS,
                    )?;
                    if let Some((mean, var)) = batch_stats {
                        let slot = &mut self.running_stats[*stats];
                        if slot.0.is_empty() {
                            *slot = (mean, var);
                        } else {
                            for (r, b) in slot.0.data.iter_mut().zip(&mean.data) {
                                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                            }
                            for (r, b) in slot.1.data.iter_mut().zip(&var.data) {
                                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                            }
                        }
                    }
                    x = y;
                }
                Step::Act { state } => match self.spec.kind {
                    NetKind::Ann => {
                        x = tape.relu(x);
                    }
                    NetKind::Snn => {
                        // split time-major rows, run LIF across timesteps
                        let xshape = tape.shape(x).to_vec();
                        let per_t: Vec<usize> =
                            std::iter::once(batch).chain(xshape[1..].iter().copied()).collect();
                        let init = match &self.lif_states[*state] {
                            Some(v) if v.shape == per_t => v.clone(),
                            _ => Tensor::full(&per_t, self.spec.lif.v_reset),
                        };
                        let mut state_var = tape.leaf(init);
                        let mut spikes = Vec::with_capacity(t_steps);
                        for t in 0..t_steps {
                            let xt = tape.slice_rows(x, t * batch, batch)?;
                            let (s, v) = lif_step(tape, state_var, xt, &self.spec.lif, mode)?;
                            spikes.push(s);
                            state_var = v;
                        }
                        new_states.push((*state, tape.value(state_var).clone()));
                        x = tape.concat_rows(&spikes)?;
                    }
                },
                Step::MaxPool { window, stride } => {
                    x = tape.maxpool2d(x, *window, *stride)?;
                }
                Step::GlobalAvgPool => {
                    x = tape.global_avg_pool(x)?;
                }
                Step::Flatten => {
                    let s = tape.shape(x).to_vec();
                    let rest: usize = s[1..].iter().product();
                    x = tape.reshape(x, vec![s[0], rest])?;
                }
                Step::Linear { w, b, label } => {
                    // the head consumes firing rates, not spikes
                    let is_head = label == "head";
                    if is_head && self.spec.kind == NetKind::Snn {
                        x = tape.mean_over_time(x, t_steps)?;
                    }
                    if is_head {
                        feature_var = Some(x);
                    }
                    let xv = tape.value(x);
                    trace.push(LayerTrace {
                        label: label.clone(),
                        mean_input_rate: xv.mean(),
                        rows: xv.shape[0],
                        input_numel: xv.len(),
                        analog_input: first_analog || is_head,
                    });
                    first_analog = false;
                    let y = tape.matmul(x, param_vars[*w])?;
                    x = tape.add_row(y, param_vars[*b])?;
                }
                Step::SkipBegin { proj, stride, label } => {
                    skip_stack.push((x, *proj, *stride));
                    if proj.is_some() {
                        let xv = tape.value(x);
                        trace.push(LayerTrace {
                            label: format!("{}.proj", label),
                            mean_input_rate: xv.mean(),
                            rows: xv.shape[0],
                            input_numel: xv.len(),
                            analog_input: first_analog,
                        });
                    }
                }
                Step::SkipEnd => {
                    let (saved, proj, stride) =
                        skip_stack.pop().expect("balanced skip markers");
                    let shortcut = match proj {
                        None => saved,
                        Some((w, b, gamma, beta)) => {
                            let y = tape.conv2d(saved, param_vars[w], stride, 0)?;
                            let y = tape.add_channel_bias(y, param_vars[b])?;
                            // projection BN shares the batch-stats convention
                            let (y, _) = tape.batch_norm(
                                y,
                                param_vars[gamma],
                                param_vars[beta],
                                None,
                                BN_EPS,
                            )?;
                            y
                        }
                    };
                    x = tape.add(x, shortcut)?;
                }
            }
        }

        for (slot, v) in new_states {
            self.lif_states[slot] = Some(v);
        }

        let (features, logits) = if self.spec.with_head {
            let f = feature_var.expect("head implies a captured feature var");
            (f, Some(x))
        } else {
            let f = if self.spec.kind == NetKind::Snn {
                tape.mean_over_time(x, t_steps)?
            } else {
                x
            };
            (f, None)
        };
        Ok(ForwardOutput { features, logits, param_vars, trace })
    }
}

/// Run the teacher over a whole dataset and collect its penultimate
/// features as a feature matrix (teacher left unmodified).
pub fn extract_feature_matrix(
    model: &mut ModelInstance,
    dataset: &crate::data::ImageDataset,
    t_steps: usize,
    batch_size: usize,
) -> Result<FeatureMatrix> {
    if dataset.is_empty() {
        return Err(Error::invalid("extract_feature_matrix", "empty dataset"));
    }
    let d = model.feature_dim;
    let m = dataset.len();
    let mut values = Tensor::zeros(&[m, d]);
    let mut row = 0usize;
    for batch in dataset.epoch_batches(batch_size, None) {
        let (images, _) = dataset.batch(&batch);
        let mut tape = Tape::new();
        model.reset_states();
        let encoded = if model.spec.kind == NetKind::Snn {
            encode_repeat(&images, t_steps)?
        } else {
            images
        };
        let t = if model.spec.kind == NetKind::Snn { t_steps } else { 1 };
        let out = model.forward(&mut tape, &encoded, t, SpikeMode::Hard, false)?;
        let f = tape.value(out.features);
        values.data[row * d..(row + batch.len()) * d].copy_from_slice(&f.data);
        row += batch.len();
    }
    model.reset_states();
    FeatureMatrix::new(values)
}
