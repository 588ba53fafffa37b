//! Reverse-mode differentiation over a recorded tape.
//!
//! The network is a fixed feed-forward DAG, so a flat tape of primitive ops
//! replayed in reverse is all that is needed. Parameters live outside the
//! tape and are referenced by index; activations are owned by the tape. A
//! tape is single-owner and single-threaded; the trainer builds one tape per
//! segment and sums the resulting parameter gradients in segment order.

use crate::compute::kernels;
use crate::compute::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;
pub type ParamId = usize;

/// Source of an op input: a trainable parameter or an earlier tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    Param(ParamId),
    Node(NodeId),
}

#[derive(Debug)]
enum TapeOp {
    Conv1d {
        input: Src,
        weights: Src,
        bias: Option<Src>,
        dilation: usize,
        out: NodeId,
    },
    /// Column t of the output is row `classes[t]` of the table.
    Embed {
        table: Src,
        classes: Vec<u16>,
        out: NodeId,
    },
    Add { a: Src, b: Src, out: NodeId },
    Mul { a: Src, b: Src, out: NodeId },
    Tanh { input: Src, out: NodeId },
    Sigmoid { input: Src, out: NodeId },
    Relu { input: Src, out: NodeId },
    Transpose2 { input: Src, out: NodeId },
    /// Scalar output: masked, scaled categorical cross-entropy.
    CrossEntropy {
        logits: Src,
        targets: Vec<u16>,
        start: usize,
        scale: f64,
        out: NodeId,
    },
}

/// Parameter gradients from one backward pass, aligned with the parameter
/// slice the tape was built over. Parameters never touched by the forward
/// stay `None`.
pub struct Gradients {
    pub params: Vec<Option<Tensor>>,
}

pub struct GradTape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Tensor>,
    needs_grad: Vec<bool>,
    ops: Vec<TapeOp>,
}

impl<'p> GradTape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        GradTape {
            params,
            nodes: Vec::new(),
            needs_grad: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Register a non-trainable input (e.g. the conditioning matrix).
    /// No gradient is propagated into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, false)
    }

    pub fn value(&self, src: Src) -> &Tensor {
        match src {
            Src::Param(p) => &self.params[p],
            Src::Node(n) => &self.nodes[n],
        }
    }

    pub fn node(&self, id: NodeId) -> &Tensor {
        &self.nodes[id]
    }

    fn push(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(value);
        self.needs_grad.push(needs_grad);
        self.nodes.len() - 1
    }

    fn src_needs_grad(&self, src: Src) -> bool {
        match src {
            Src::Param(_) => true,
            Src::Node(n) => self.needs_grad[n],
        }
    }

    pub fn conv1d(
        &mut self,
        input: Src,
        weights: Src,
        bias: Option<Src>,
        dilation: usize,
    ) -> Result<NodeId> {
        let (x, w) = (self.value(input), self.value(weights));
        kernels::check_conv_shapes(x, w, bias.map(|b| self.value(b)), dilation)?;
        let out = kernels::conv1d_causal_raw(
            &x.data,
            x.shape[0],
            x.shape[1],
            &w.data,
            w.shape[0],
            w.shape[2],
            bias.map(|b| self.value(b).data.as_slice()),
            dilation,
        );
        let ng = self.src_needs_grad(input)
            || self.src_needs_grad(weights)
            || bias.is_some_and(|b| self.src_needs_grad(b));
        let id = self.push(out, ng);
        self.ops.push(TapeOp::Conv1d {
            input,
            weights,
            bias,
            dilation,
            out: id,
        });
        Ok(id)
    }

    pub fn embed(&mut self, table: Src, classes: &[u16]) -> Result<NodeId> {
        let tab = self.value(table);
        if tab.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "embed",
                expected: "rank-2 table".into(),
                got: format!("{:?}", tab.shape),
            });
        }
        let (q, width) = (tab.rows(), tab.cols());
        let t_len = classes.len();
        let mut out = vec![0.0; width * t_len];
        for (t, &c) in classes.iter().enumerate() {
            let c = c as usize;
            if c >= q {
                return Err(Error::ClassOutOfRange { class: c, classes: q });
            }
            for r in 0..width {
                out[r * t_len + t] = tab.data[c * width + r];
            }
        }
        let ng = self.src_needs_grad(table);
        let id = self.push(
            Tensor {
                shape: vec![width, t_len],
                data: out,
            },
            ng,
        );
        self.ops.push(TapeOp::Embed {
            table,
            classes: classes.to_vec(),
            out: id,
        });
        Ok(id)
    }

    pub fn add(&mut self, a: Src, b: Src) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                context: "add",
                expected: format!("{:?}", ta.shape),
                got: format!("{:?}", tb.shape),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let ng = self.src_needs_grad(a) || self.src_needs_grad(b);
        let id = self.push(Tensor { shape, data }, ng);
        self.ops.push(TapeOp::Add { a, b, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: Src, b: Src) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                context: "mul",
                expected: format!("{:?}", ta.shape),
                got: format!("{:?}", tb.shape),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let ng = self.src_needs_grad(a) || self.src_needs_grad(b);
        let id = self.push(Tensor { shape, data }, ng);
        self.ops.push(TapeOp::Mul { a, b, out: id });
        Ok(id)
    }

    pub fn tanh(&mut self, input: Src) -> NodeId {
        let x = self.value(input);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v.tanh()).collect(),
        };
        let ng = self.src_needs_grad(input);
        let id = self.push(out, ng);
        self.ops.push(TapeOp::Tanh { input, out: id });
        id
    }

    pub fn sigmoid(&mut self, input: Src) -> NodeId {
        let x = self.value(input);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| kernels::sigmoid(v)).collect(),
        };
        let ng = self.src_needs_grad(input);
        let id = self.push(out, ng);
        self.ops.push(TapeOp::Sigmoid { input, out: id });
        id
    }

    pub fn relu(&mut self, input: Src) -> NodeId {
        let x = self.value(input);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v.max(0.0)).collect(),
        };
        let ng = self.src_needs_grad(input);
        let id = self.push(out, ng);
        self.ops.push(TapeOp::Relu { input, out: id });
        id
    }

    /// `[R x C]` -> `[C x R]`. Used to turn channel-major logits into the
    /// row-per-position layout the loss expects.
    pub fn transpose2(&mut self, input: Src) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "transpose2",
                expected: "rank-2 tensor".into(),
                got: format!("{:?}", x.shape),
            });
        }
        let out = transpose2(x);
        let ng = self.src_needs_grad(input);
        let id = self.push(out, ng);
        self.ops.push(TapeOp::Transpose2 { input, out: id });
        Ok(id)
    }

    pub fn cross_entropy(
        &mut self,
        logits: Src,
        targets: &[u16],
        start: usize,
        scale: f64,
    ) -> Result<NodeId> {
        let l = self.value(logits);
        if l.shape.len() != 2 || l.rows() != targets.len() {
            return Err(Error::ShapeMismatch {
                context: "cross_entropy",
                expected: format!("[{} x Q]", targets.len()),
                got: format!("{:?}", l.shape),
            });
        }
        let (loss, _) = kernels::cross_entropy_masked(l, targets, start, scale)?;
        let ng = self.src_needs_grad(logits);
        let id = self.push(Tensor::scalar(loss), ng);
        self.ops.push(TapeOp::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            start,
            scale,
            out: id,
        });
        Ok(id)
    }

    /// Reverse pass from the scalar node `out`, visiting ops in exact
    /// reverse order of recording.
    pub fn backward(&self, out: NodeId) -> Result<Gradients> {
        if self.nodes[out].numel() != 1 {
            return Err(Error::InvalidConfig(
                "backward expects a scalar output node".into(),
            ));
        }
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        node_grads[out] = Some(Tensor::scalar(1.0));

        for op in self.ops.iter().rev() {
            match op {
                TapeOp::Conv1d {
                    input,
                    weights,
                    bias,
                    dilation,
                    out,
                } => {
                    let Some(g) = node_grads[*out].take() else { continue };
                    let x = self.value(*input);
                    let w = self.value(*weights);
                    let (d_in, d_w, d_b) = kernels::conv1d_causal_backward(
                        &g.data,
                        &x.data,
                        x.shape[0],
                        x.shape[1],
                        &w.data,
                        w.shape[0],
                        w.shape[2],
                        *dilation,
                        self.src_needs_grad(*input),
                    );
                    if let Some(d_in) = d_in {
                        accumulate(&mut node_grads, &mut param_grads, *input, d_in);
                    }
                    accumulate(&mut node_grads, &mut param_grads, *weights, d_w);
                    if let Some(b) = bias {
                        accumulate(&mut node_grads, &mut param_grads, *b, d_b);
                    }
                }
                TapeOp::Embed { table, classes, out } => {
                    let Some(g) = node_grads[*out].take() else { continue };
                    let tab = self.value(*table);
                    let (q, width) = (tab.rows(), tab.cols());
                    let t_len = classes.len();
                    let mut d_tab = Tensor::zeros(vec![q, width]);
                    for (t, &c) in classes.iter().enumerate() {
                        let c = c as usize;
                        for r in 0..width {
                            d_tab.data[c * width + r] += g.data[r * t_len + t];
                        }
                    }
                    accumulate(&mut node_grads, &mut param_grads, *table, d_tab);
                }
                TapeOp::Add { a, b, out } => {
                    let Some(g) = node_grads[*out].take() else { continue };
                    if self.src_needs_grad(*a) {
                        accumulate(&mut node_grads, &mut param_grads, *a, g.clone());
                    }
                    if self.src_needs_grad(*b) {
                        accumulate(&mut node_grads, &mut param_grads, *b, g);
                    }
                }
                TapeOp::Mul { a, b, out } => {
                    let Some(g) = node_grads[*out].take() else { continue };
                    if self.src_needs_grad(*a) {
                        let tb = self.value(*b);
                        let d = Tensor {
                            shape: g.shape.clone(),
                            data: g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
                        };
                        accumulate(&mut node_grads, &mut param_grads, *a, d);
                    }
                    if self.src_needs_grad(*b) {
                        let ta = self.value(*a);
                        let d = Tensor {
                            shape: g.shape.clone(),
                            data: g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect(),
                        };
                        accumulate(&mut node_grads, &mut param_grads, *b, d);
                    }
                }
                TapeOp::Tanh { input, out } => {
                    let Some(g) = node_grads[*out].take() else { continue };
                    if !self.src_needs_grad(*input) {
                        continue;
                    }
                    let y = &self.nodes[*out];
                    let d = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect(),
                    };
                    accumulate(&mut node_grads, &mut param_grads, *input, d);
                }
                TapeOp::Sigmoid { input, out } => {
                    let Some(g) = node_grads[*out].take() else { continue };
                    if !self.src_needs_grad(*input) {
                        continue;
                    }
                    let y = &self.nodes[*out];
                    let d = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(g, y)| g * y * (1.0 - y))
                            .collect(),
                    };
                    accumulate(&mut node_grads, &mut param_grads, *input, d);
                }
                TapeOp::Relu { input, out } => {
                    let Some(g) = node_grads[*out].take() else { continue };
                    if !self.src_needs_grad(*input) {
                        continue;
                    }
                    let y = &self.nodes[*out];
                    let d = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                            .collect(),
                    };
                    accumulate(&mut node_grads, &mut param_grads, *input, d);
                }
                TapeOp::Transpose2 { input, out } => {
                    let Some(g) = node_grads[*out].take() else { continue };
                    if !self.src_needs_grad(*input) {
                        continue;
                    }
                    accumulate(&mut node_grads, &mut param_grads, *input, transpose2(&g));
                }
                TapeOp::CrossEntropy {
                    logits,
                    targets,
                    start,
                    scale,
                    out,
                } => {
                    let Some(g) = node_grads[*out].take() else { continue };
                    if !self.src_needs_grad(*logits) {
                        continue;
                    }
                    let upstream = g.data[0];
                    let l = self.value(*logits);
                    let (_, mut grad) = kernels::cross_entropy_masked(l, targets, *start, *scale)?;
                    if upstream != 1.0 {
                        for v in &mut grad.data {
                            *v *= upstream;
                        }
                    }
                    accumulate(&mut node_grads, &mut param_grads, *logits, grad);
                }
            }
        }
        Ok(Gradients {
            params: param_grads,
        })
    }
}

fn transpose2(x: &Tensor) -> Tensor {
    x.transposed2()
}

fn accumulate(
    node_grads: &mut [Option<Tensor>],
    param_grads: &mut [Option<Tensor>],
    dst: Src,
    delta: Tensor,
) {
    let slot = match dst {
        Src::Param(p) => &mut param_grads[p],
        Src::Node(n) => &mut node_grads[n],
    };
    match slot {
        Some(acc) => {
            for (a, d) in acc.data.iter_mut().zip(&delta.data) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// A small gated program touching every op kind: embed -> dilated conv
    /// (+ conditioning projection) -> tanh*sigmoid -> 1x1 -> relu ->
    /// transpose -> cross-entropy.
    fn toy_loss(params: &[Tensor], classes: &[u16], cond: &Tensor) -> (f64, Gradients) {
        let mut tape = GradTape::new(params);
        let x = tape.embed(Src::Param(0), classes).unwrap();
        let conv = tape
            .conv1d(Src::Node(x), Src::Param(1), Some(Src::Param(2)), 2)
            .unwrap();
        let hid = tape.input(cond.clone());
        let proj = tape.conv1d(Src::Node(hid), Src::Param(3), None, 1).unwrap();
        let pre = tape.add(Src::Node(conv), Src::Node(proj)).unwrap();
        let gated = {
            let f = tape.tanh(Src::Node(pre));
            let g = tape.sigmoid(Src::Node(pre));
            tape.mul(Src::Node(f), Src::Node(g)).unwrap()
        };
        let lifted = tape.conv1d(Src::Node(gated), Src::Param(4), Some(Src::Param(5)), 1).unwrap();
        let act = tape.relu(Src::Node(lifted));
        let logits = tape.transpose2(Src::Node(act)).unwrap();
        let loss = tape
            .cross_entropy(Src::Node(logits), classes, 1, 0.25)
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        (tape.node(loss).data[0], grads)
    }

    #[test]
    fn toy_program_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(77);
        let q = 5;
        let width = 3;
        let ch = 4;
        let cond_dim = 2;
        let t_len = 8;
        let params = vec![
            Tensor::new(vec![q, width], (0..q * width).map(|_| rng.uniform(0.8)).collect()).unwrap(),
            Tensor::new(vec![ch, width, 2], (0..ch * width * 2).map(|_| rng.uniform(0.8)).collect()).unwrap(),
            Tensor::new(vec![ch], (0..ch).map(|_| rng.uniform(0.2)).collect()).unwrap(),
            Tensor::new(vec![ch, cond_dim, 1], (0..ch * cond_dim).map(|_| rng.uniform(0.8)).collect()).unwrap(),
            Tensor::new(vec![q, ch, 1], (0..q * ch).map(|_| rng.uniform(0.8)).collect()).unwrap(),
            Tensor::new(vec![q], (0..q).map(|_| rng.uniform(0.2)).collect()).unwrap(),
        ];
        let classes: Vec<u16> = (0..t_len).map(|_| rng.below(q) as u16).collect();
        let cond = Tensor::new(
            vec![cond_dim, t_len],
            (0..cond_dim * t_len).map(|_| rng.uniform(1.0)).collect(),
        )
        .unwrap();

        let (_, grads) = toy_loss(&params, &classes, &cond);
        let delta = 1e-6;
        let mut worst = 0.0f64;
        for pi in 0..params.len() {
            let g = grads.params[pi]
                .as_ref()
                .unwrap_or_else(|| panic!("param {pi} has no gradient"));
            assert_eq!(g.shape, params[pi].shape);
            for j in 0..params[pi].numel() {
                let mut plus = params.clone();
                plus[pi].data[j] += delta;
                let mut minus = params.clone();
                minus[pi].data[j] -= delta;
                let num = (toy_loss(&plus, &classes, &cond).0
                    - toy_loss(&minus, &classes, &cond).0)
                    / (2.0 * delta);
                let ana = g.data[j];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-6,
                    "param {pi}[{j}]: analytic {ana} vs numeric {num} (rel {rel:.2e})"
                );
            }
        }
        assert!(worst < 1e-6, "worst rel err {worst:.2e}");
    }

    #[test]
    fn masked_positions_get_no_gradient_from_loss() {
        // With no time mixing (embed + transpose only), changing a masked
        // position's class must leave both loss and gradients untouched.
        let mut rng = SplitMix64::new(3);
        let q = 4;
        let t_len = 6;
        let params = vec![Tensor::new(
            vec![q, q],
            (0..q * q).map(|_| rng.uniform(1.0)).collect(),
        )
        .unwrap()];
        let classes: Vec<u16> = (0..t_len).map(|_| rng.below(q) as u16).collect();

        let run = |classes: &[u16]| -> (f64, Tensor) {
            let mut tape = GradTape::new(&params);
            let x = tape.embed(Src::Param(0), classes).unwrap();
            let logits = tape.transpose2(Src::Node(x)).unwrap();
            let loss = tape.cross_entropy(Src::Node(logits), classes, 4, 1.0).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.node(loss).data[0],
                grads.params[0].clone().unwrap(),
            )
        };
        let (l1, g1) = run(&classes);
        let mut relabelled = classes.clone();
        relabelled[0] = (relabelled[0] + 1) % q as u16;
        relabelled[2] = (relabelled[2] + 2) % q as u16;
        let (l2, g2) = run(&relabelled);
        assert_eq!(l1.to_bits(), l2.to_bits(), "loss must ignore masked rows");
        assert_eq!(g1, g2, "gradients must ignore masked rows");
    }

    #[test]
    fn shared_param_gradient_accumulates_across_uses() {
        // The same weight tensor drives two convolutions; the finite
        // difference of the combined loss checks that both contributions
        // land in one gradient slot.
        let mut rng = SplitMix64::new(9);
        let q = 3;
        let t_len = 5;
        let params = vec![
            Tensor::new(vec![q, q, 1], (0..q * q).map(|_| rng.uniform(0.9)).collect()).unwrap(),
        ];
        let x = Tensor::new(vec![q, t_len], (0..q * t_len).map(|_| rng.uniform(1.0)).collect()).unwrap();
        let targets: Vec<u16> = (0..t_len).map(|_| rng.below(q) as u16).collect();

        let run = |params: &[Tensor]| -> (f64, Gradients) {
            let mut tape = GradTape::new(params);
            let xin = tape.input(x.clone());
            let c1 = tape.conv1d(Src::Node(xin), Src::Param(0), None, 1).unwrap();
            let c2 = tape.conv1d(Src::Node(c1), Src::Param(0), None, 1).unwrap();
            let top = tape.add(Src::Node(c1), Src::Node(c2)).unwrap();
            let logits = tape.transpose2(Src::Node(top)).unwrap();
            let loss = tape.cross_entropy(Src::Node(logits), &targets, 0, 1.0).unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.node(loss).data[0], grads)
        };
        let (_, grads) = run(&params);
        let g = grads.params[0].as_ref().unwrap();
        let delta = 1e-6;
        for j in 0..params[0].numel() {
            let mut plus = params.clone();
            plus[0].data[j] += delta;
            let mut minus = params.clone();
            minus[0].data[j] -= delta;
            let num = (run(&plus).0 - run(&minus).0) / (2.0 * delta);
            let ana = g.data[j];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-6, "w[{j}]: analytic {ana} vs numeric {num}");
        }
    }
}
