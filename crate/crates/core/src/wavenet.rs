//! The conditional autoregressive waveform model: an embedding of the
//! previous quantized sample feeds stacked gated dilated residual blocks,
//! each layer modulated by a per-layer 1x1 projection of the local
//! conditioning; skip outputs accumulate into a two-stage rectified head
//! that produces one categorical distribution per sample.
//!
//! Teacher forcing is shifted-input: position t sees classes `..t-1` and
//! the conditioning column t, so generation and training share one
//! alignment. History before t=0 is the quantization code of silence.

use crate::codec::MuLawConfig;
use crate::compute::{self, GradTape, NodeId, Src, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub kernel_size: usize,
    /// Width of the residual stream, the gate activations and the input
    /// embedding.
    pub residual_channels: usize,
    pub skip_channels: usize,
    /// Quantization classes Q.
    pub classes: usize,
    /// Conditioning rows: PPG dimension + log-f0 + vuv.
    pub cond_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 3,
            layers_per_block: 10,
            kernel_size: 2,
            residual_channels: 512,
            skip_channels: 256,
            classes: 256,
            cond_channels: 44,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("layers_per_block", self.layers_per_block),
            ("residual_channels", self.residual_channels),
            ("skip_channels", self.skip_channels),
            ("cond_channels", self.cond_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.kernel_size < 2 {
            return Err(Error::InvalidConfig(
                "kernel size must be >= 2 for a causal history".into(),
            ));
        }
        if !(2..=65536).contains(&self.classes) {
            return Err(Error::InvalidConfig(format!(
                "class count must be in [2, 65536], got {}",
                self.classes
            )));
        }
        Ok(())
    }

    /// Dilation of layer ℓ within its block doubles from 1.
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.blocks)
            .flat_map(|_| (0..self.layers_per_block).map(|l| 1usize << l))
            .collect()
    }

    pub fn total_layers(&self) -> usize {
        self.blocks * self.layers_per_block
    }

    /// Number of past samples that influence one prediction:
    /// `1 + blocks * sum((K-1) * 2^l)`.
    pub fn receptive_field(&self) -> usize {
        let per_block: usize = (0..self.layers_per_block)
            .map(|l| (self.kernel_size - 1) * (1usize << l))
            .sum();
        1 + self.blocks * per_block
    }

    /// Total trainable scalars, computable without allocating parameters.
    pub fn param_count(&self) -> usize {
        let r = self.residual_channels;
        let s = self.skip_channels;
        let q = self.classes;
        let k = self.kernel_size;
        let c = self.cond_channels;
        let per_layer = 2 * (r * r * k + r) // filter + gate dilated convs
            + 2 * (r * c)                   // conditioning projections
            + r * r + r                     // residual 1x1
            + s * r + s; // skip 1x1
        q * r // embedding
            + self.total_layers() * per_layer
            + s * s + s // head stage 1
            + q * s + q // head stage 2
    }

    pub fn mu_law(&self) -> MuLawConfig {
        MuLawConfig {
            classes: self.classes,
        }
    }

    pub fn silence_class(&self) -> u16 {
        self.mu_law().silence_class()
    }
}

/// Parameter ids of one gated residual layer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIds {
    pub filter_w: usize,
    pub filter_b: usize,
    pub gate_w: usize,
    pub gate_b: usize,
    pub cond_filter_w: usize,
    pub cond_gate_w: usize,
    pub res_w: usize,
    pub res_b: usize,
    pub skip_w: usize,
    pub skip_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamLayout {
    pub embedding: usize,
    pub layers: Vec<LayerIds>,
    pub head1_w: usize,
    pub head1_b: usize,
    pub head2_w: usize,
    pub head2_b: usize,
}

/// All trainable tensors, in a fixed registry order shared by the
/// checkpoint format, the optimizer state and gradient accumulation.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
    names: Vec<String>,
    pub(crate) layout: ParamLayout,
}

impl ModelParams {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut_by_name(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[idx])
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            t.check_finite(name)?;
        }
        Ok(())
    }

    /// The same model with a replacement tensor set, e.g. a perturbed copy
    /// during finite-difference probing.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<ModelParams> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch {
                context: "ModelParams::with_tensors",
                expected: format!("{} tensors", self.tensors.len()),
                got: format!("{}", tensors.len()),
            });
        }
        for (a, b) in tensors.iter().zip(&self.tensors) {
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch {
                    context: "ModelParams::with_tensors",
                    expected: format!("{:?}", b.shape),
                    got: format!("{:?}", a.shape),
                });
            }
        }
        Ok(ModelParams {
            config: self.config,
            tensors,
            names: self.names.clone(),
            layout: self.layout.clone(),
        })
    }
}

/// Deterministic initialization: weights uniform in (-a, a) with
/// `a = sqrt(1 / fan_in)`, biases zero. One RNG draw per weight in registry
/// order, so equal seeds give bit-identical parameters.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);

    struct Registry {
        tensors: Vec<Tensor>,
        names: Vec<String>,
    }
    impl Registry {
        fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize, rng: &mut SplitMix64) -> usize {
            let a = (1.0 / fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| rng.uniform(a)).collect();
            self.tensors.push(Tensor { shape, data });
            self.names.push(name);
            self.tensors.len() - 1
        }
        // biases are zero and consume no draws
        fn zeros(&mut self, name: String, shape: Vec<usize>) -> usize {
            self.tensors.push(Tensor::zeros(shape));
            self.names.push(name);
            self.tensors.len() - 1
        }
    }
    let mut reg = Registry {
        tensors: Vec::new(),
        names: Vec::new(),
    };

    let r = config.residual_channels;
    let s = config.skip_channels;
    let q = config.classes;
    let k = config.kernel_size;
    let c = config.cond_channels;

    let embedding = reg.weight("embedding".into(), vec![q, r], q, &mut rng);
    let mut layers = Vec::with_capacity(config.total_layers());
    for b in 0..config.blocks {
        for l in 0..config.layers_per_block {
            let p = format!("block{b}.layer{l}");
            let filter_w = reg.weight(format!("{p}.filter.weight"), vec![r, r, k], r * k, &mut rng);
            let filter_b = reg.zeros(format!("{p}.filter.bias"), vec![r]);
            let gate_w = reg.weight(format!("{p}.gate.weight"), vec![r, r, k], r * k, &mut rng);
            let gate_b = reg.zeros(format!("{p}.gate.bias"), vec![r]);
            let cond_filter_w =
                reg.weight(format!("{p}.cond_filter.weight"), vec![r, c, 1], c, &mut rng);
            let cond_gate_w =
                reg.weight(format!("{p}.cond_gate.weight"), vec![r, c, 1], c, &mut rng);
            let res_w = reg.weight(format!("{p}.residual.weight"), vec![r, r, 1], r, &mut rng);
            let res_b = reg.zeros(format!("{p}.residual.bias"), vec![r]);
            let skip_w = reg.weight(format!("{p}.skip.weight"), vec![s, r, 1], r, &mut rng);
            let skip_b = reg.zeros(format!("{p}.skip.bias"), vec![s]);
            layers.push(LayerIds {
                filter_w,
                filter_b,
                gate_w,
                gate_b,
                cond_filter_w,
                cond_gate_w,
                res_w,
                res_b,
                skip_w,
                skip_b,
            });
        }
    }
    let head1_w = reg.weight("head.relu1.weight".into(), vec![s, s, 1], s, &mut rng);
    let head1_b = reg.zeros("head.relu1.bias".into(), vec![s]);
    let head2_w = reg.weight("head.relu2.weight".into(), vec![q, s, 1], s, &mut rng);
    let head2_b = reg.zeros("head.relu2.bias".into(), vec![q]);

    Ok(ModelParams {
        config: *config,
        tensors: reg.tensors,
        names: reg.names,
        layout: ParamLayout {
            embedding,
            layers,
            head1_w,
            head1_b,
            head2_w,
            head2_b,
        },
    })
}

/// Allocate a parameter set with every tensor zeroed, e.g. as a checkpoint
/// loading target.
pub fn zeroed_params(config: &ModelConfig) -> Result<ModelParams> {
    let mut params = init_params(config, 0)?;
    for t in params.tensors_mut() {
        t.data.fill(0.0);
    }
    Ok(params)
}

fn check_forward_inputs(config: &ModelConfig, classes: &[u16], cond: &Tensor) -> Result<()> {
    config.mu_law().validate_classes(classes)?;
    if cond.shape.len() != 2 || cond.shape[0] != config.cond_channels {
        return Err(Error::ShapeMismatch {
            context: "forward conditioning",
            expected: format!("[{} x T]", config.cond_channels),
            got: format!("{:?}", cond.shape),
        });
    }
    if cond.shape[1] < classes.len() {
        return Err(Error::ShapeMismatch {
            context: "forward conditioning",
            expected: format!(">= {} conditioning columns", classes.len()),
            got: format!("{}", cond.shape[1]),
        });
    }
    Ok(())
}

/// Input classes shifted one step right, with the silence code at t=0.
fn shifted_input(classes: &[u16], silence: u16) -> Vec<u16> {
    let mut input = Vec::with_capacity(classes.len());
    input.push(silence);
    input.extend_from_slice(&classes[..classes.len() - 1]);
    input
}

/// Teacher-forced forward pass: logits `[T x Q]` where row t is the
/// distribution over classes`[t]` given classes`[..t]` and conditioning
/// column t. Pure; no gradient bookkeeping.
pub fn forward_logits(params: &ModelParams, classes: &[u16], cond: &Tensor) -> Result<Tensor> {
    let config = &params.config;
    check_forward_inputs(config, classes, cond)?;
    if classes.is_empty() {
        return Ok(Tensor::zeros(vec![0, config.classes]));
    }
    let t_len = classes.len();
    let (skip_sum, _) = forward_core(params, classes, cond, false);
    let logits_cm = head_forward(params, &skip_sum, t_len);
    // transpose to one row per position
    let q = config.classes;
    let mut logits = Tensor::zeros(vec![t_len, q]);
    for c in 0..q {
        for t in 0..t_len {
            logits.data[t * q + c] = logits_cm.data[c * t_len + t];
        }
    }
    logits.check_finite("forward logits")?;
    Ok(logits)
}

/// The residual stream entering each layer, `[R x T]` per layer, computed
/// by the same arithmetic as [`forward_logits`]. Diagnostic surface for
/// checking incremental-generation caches against full recomputation.
pub fn forward_layer_inputs(
    params: &ModelParams,
    classes: &[u16],
    cond: &Tensor,
) -> Result<Vec<Tensor>> {
    check_forward_inputs(&params.config, classes, cond)?;
    let (_, inputs) = forward_core(params, classes, cond, true);
    Ok(inputs.expect("collection requested"))
}

/// Embedding, gated dilated stack and skip accumulation shared by the pure
/// entry points. Returns the skip sum `[S x T]` and, when requested, each
/// layer's input stream.
fn forward_core(
    params: &ModelParams,
    classes: &[u16],
    cond: &Tensor,
    collect_inputs: bool,
) -> (Tensor, Option<Vec<Tensor>>) {
    let config = &params.config;
    let t_len = classes.len();
    let r = config.residual_channels;
    let input = shifted_input(classes, config.silence_class());

    // embedding lookup -> [R x T]
    let table = params.tensor(params.layout.embedding);
    let mut x = Tensor::zeros(vec![r, t_len]);
    for (t, &cl) in input.iter().enumerate() {
        for ch in 0..r {
            x.data[ch * t_len + t] = table.data[cl as usize * r + ch];
        }
    }
    let cond_slice = slice_columns(cond, t_len);

    let mut inputs = collect_inputs.then(Vec::new);
    let mut skip_sum = Tensor::zeros(vec![config.skip_channels, t_len]);
    for (ids, dilation) in params.layout.layers.iter().zip(config.dilations()) {
        if let Some(inputs) = inputs.as_mut() {
            inputs.push(x.clone());
        }
        let conv = |w: usize, b: Option<usize>, input: &Tensor, d: usize| {
            let w = params.tensor(w);
            compute::conv1d_causal_raw(
                &input.data,
                input.shape[0],
                t_len,
                &w.data,
                w.shape[0],
                w.shape[2],
                b.map(|b| params.tensor(b).data.as_slice()),
                d,
            )
        };
        let f_x = conv(ids.filter_w, Some(ids.filter_b), &x, dilation);
        let f_h = conv(ids.cond_filter_w, None, &cond_slice, 1);
        let g_x = conv(ids.gate_w, Some(ids.gate_b), &x, dilation);
        let g_h = conv(ids.cond_gate_w, None, &cond_slice, 1);
        let mut z = Tensor::zeros(vec![r, t_len]);
        for i in 0..r * t_len {
            let f = f_x.data[i] + f_h.data[i];
            let g = g_x.data[i] + g_h.data[i];
            z.data[i] = f.tanh() * compute::sigmoid(g);
        }
        let skip = conv(ids.skip_w, Some(ids.skip_b), &z, 1);
        for (acc, v) in skip_sum.data.iter_mut().zip(&skip.data) {
            *acc += v;
        }
        let res = conv(ids.res_w, Some(ids.res_b), &z, 1);
        for (xv, rv) in x.data.iter_mut().zip(&res.data) {
            *xv += rv;
        }
    }
    (skip_sum, inputs)
}

/// Output head over accumulated skips: relu -> 1x1 -> relu -> 1x1(Q).
/// Channel-major output `[Q x T]`.
fn head_forward(params: &ModelParams, skip_sum: &Tensor, t_len: usize) -> Tensor {
    let relu1: Vec<f64> = skip_sum.data.iter().map(|v| v.max(0.0)).collect();
    let w1 = params.tensor(params.layout.head1_w);
    let a = compute::conv1d_causal_raw(
        &relu1,
        skip_sum.shape[0],
        t_len,
        &w1.data,
        w1.shape[0],
        w1.shape[2],
        Some(&params.tensor(params.layout.head1_b).data),
        1,
    );
    let relu2: Vec<f64> = a.data.iter().map(|v| v.max(0.0)).collect();
    let w2 = params.tensor(params.layout.head2_w);
    compute::conv1d_causal_raw(
        &relu2,
        a.shape[0],
        t_len,
        &w2.data,
        w2.shape[0],
        w2.shape[2],
        Some(&params.tensor(params.layout.head2_b).data),
        1,
    )
}

fn slice_columns(cond: &Tensor, t_len: usize) -> Tensor {
    let rows = cond.shape[0];
    let full = cond.shape[1];
    if full == t_len {
        return cond.clone();
    }
    let mut out = Tensor::zeros(vec![rows, t_len]);
    for r in 0..rows {
        out.data[r * t_len..(r + 1) * t_len]
            .copy_from_slice(&cond.data[r * full..r * full + t_len]);
    }
    out
}

/// Training graph: the same forward recorded on a tape, ending in a masked,
/// scaled cross-entropy node. Returns (logits node `[T x Q]`, loss node).
pub fn build_training_graph(
    params: &ModelParams,
    tape: &mut GradTape,
    classes: &[u16],
    cond: &Tensor,
    mask_start: usize,
    scale: f64,
) -> Result<(NodeId, NodeId)> {
    let config = &params.config;
    check_forward_inputs(config, classes, cond)?;
    if classes.is_empty() {
        return Err(Error::EmptyInput("training segment has no samples".into()));
    }
    let t_len = classes.len();
    let input = shifted_input(classes, config.silence_class());

    let x0 = tape.embed(Src::Param(params.layout.embedding), &input)?;
    let cond_node = tape.input(slice_columns(cond, t_len));

    let mut x = x0;
    let mut skip_sum: Option<NodeId> = None;
    let dilations = config.dilations();
    for (ids, dilation) in params.layout.layers.iter().zip(dilations) {
        let f_x = tape.conv1d(
            Src::Node(x),
            Src::Param(ids.filter_w),
            Some(Src::Param(ids.filter_b)),
            dilation,
        )?;
        let f_h = tape.conv1d(Src::Node(cond_node), Src::Param(ids.cond_filter_w), None, 1)?;
        let f_pre = tape.add(Src::Node(f_x), Src::Node(f_h))?;
        let g_x = tape.conv1d(
            Src::Node(x),
            Src::Param(ids.gate_w),
            Some(Src::Param(ids.gate_b)),
            dilation,
        )?;
        let g_h = tape.conv1d(Src::Node(cond_node), Src::Param(ids.cond_gate_w), None, 1)?;
        let g_pre = tape.add(Src::Node(g_x), Src::Node(g_h))?;
        let f = tape.tanh(Src::Node(f_pre));
        let g = tape.sigmoid(Src::Node(g_pre));
        let z = tape.mul(Src::Node(f), Src::Node(g))?;
        let skip = tape.conv1d(
            Src::Node(z),
            Src::Param(ids.skip_w),
            Some(Src::Param(ids.skip_b)),
            1,
        )?;
        skip_sum = Some(match skip_sum {
            None => skip,
            Some(acc) => tape.add(Src::Node(acc), Src::Node(skip))?,
        });
        let res = tape.conv1d(
            Src::Node(z),
            Src::Param(ids.res_w),
            Some(Src::Param(ids.res_b)),
            1,
        )?;
        x = tape.add(Src::Node(x), Src::Node(res))?;
    }
    let skips = skip_sum.expect("at least one layer");
    let r1 = tape.relu(Src::Node(skips));
    let a = tape.conv1d(
        Src::Node(r1),
        Src::Param(params.layout.head1_w),
        Some(Src::Param(params.layout.head1_b)),
        1,
    )?;
    let r2 = tape.relu(Src::Node(a));
    let logits_cm = tape.conv1d(
        Src::Node(r2),
        Src::Param(params.layout.head2_w),
        Some(Src::Param(params.layout.head2_b)),
        1,
    )?;
    let logits = tape.transpose2(Src::Node(logits_cm))?;
    tape.node(logits).check_finite("training logits")?;
    let loss = tape.cross_entropy(Src::Node(logits), classes, mask_start, scale)?;
    Ok((logits, loss))
}
