//! Tensor-level tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it in reverse once.

use super::kernels::{self, Padding};
use super::{NumericsError, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the built-in op set.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, NumericsError>;

    /// Vector-Jacobian products for every input, in input order.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>, NumericsError>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d { stride: usize, padding: Padding },
    DepthwiseConv2d { stride: usize, padding: Padding },
    ChannelBias,
    Relu6,
    Sigmoid,
    Add,
    Mul,
    AvgPoolTo,
    Dense,
    Reshape,
    SliceCols { start: usize },
    Sum,
    Custom(Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<NodeId>,
    requires_grad: bool,
}

/// Recorded computation. Leaves created by [`Graph::param`] receive
/// gradients; leaves from [`Graph::constant`] do not.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// For every input element of every `relu6` node, in recording order:
    /// -1 below the lower kink, 1 above the upper kink, 0 in between.
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// every activation.
    pub fn relu6_regions(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu6 = n.op {
                let six = T::of(6.0);
                out.extend(self.nodes[n.inputs[0].0].value.data().iter().map(|&v| {
                    if v <= T::zero() {
                        -1
                    } else if v >= six {
                        1
                    } else {
                        0
                    }
                }));
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<NodeId>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId, NumericsError> {
        let v = kernels::conv2d(self.value(x), self.value(kernel), stride, padding)?;
        Ok(self.push(v, Op::Conv2d { stride, padding }, vec![x, kernel]))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId, NumericsError> {
        let v = kernels::depthwise_conv2d(self.value(x), self.value(kernel), stride, padding)?;
        Ok(self.push(v, Op::DepthwiseConv2d { stride, padding }, vec![x, kernel]))
    }

    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let v = kernels::channel_bias(self.value(x), self.value(bias))?;
        Ok(self.push(v, Op::ChannelBias, vec![x, bias]))
    }

    pub fn relu6(&mut self, x: NodeId) -> NodeId {
        let v = kernels::relu6(self.value(x));
        self.push(v, Op::Relu6, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = kernels::sigmoid(self.value(x));
        self.push(v, Op::Sigmoid, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add, vec![a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul, vec![a, b]))
    }

    pub fn avg_pool_to(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId, NumericsError> {
        let v = kernels::avg_pool_to(self.value(x), out_h, out_w)?;
        Ok(self.push(v, Op::AvgPoolTo, vec![x]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.avg_pool_to(x, 1, 1)
    }

    pub fn dense(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let v = kernels::dense(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(v, Op::Dense, vec![x, weight, bias]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape, vec![x]))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, NumericsError> {
        let v = kernels::slice_cols(self.value(x), start, end)?;
        Ok(self.push(v, Op::SliceCols { start }, vec![x]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![x])
    }

    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp<T>>,
        inputs: &[NodeId],
    ) -> Result<NodeId, NumericsError> {
        let v = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|i| self.value(*i)).collect();
            op.forward(&vals)?
        };
        Ok(self.push(v, Op::Custom(op), inputs.to_vec()))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let need = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
            let input = |i: usize| &self.nodes[node.inputs[i].0].value;
            let mut push = |i: usize, t: Tensor<T>| -> Result<(), NumericsError> {
                let slot = &mut grads[node.inputs[i].0];
                match slot {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { stride, padding } => {
                    let (gx, gk) =
                        kernels::conv2d_backward(input(0), input(1), &g, *stride, *padding, need(0))?;
                    if let Some(gx) = gx {
                        push(0, gx)?;
                    }
                    if need(1) {
                        push(1, gk)?;
                    }
                }
                Op::DepthwiseConv2d { stride, padding } => {
                    let (gx, gk) = kernels::depthwise_conv2d_backward(
                        input(0),
                        input(1),
                        &g,
                        *stride,
                        *padding,
                        need(0),
                    )?;
                    if let Some(gx) = gx {
                        push(0, gx)?;
                    }
                    if need(1) {
                        push(1, gk)?;
                    }
                }
                Op::ChannelBias => {
                    if need(1) {
                        push(1, kernels::channel_bias_backward(&g, input(1).len()))?;
                    }
                    if need(0) {
                        push(0, g)?;
                    }
                }
                Op::Relu6 => push(0, kernels::relu6_backward(input(0), &g))?,
                Op::Sigmoid => push(0, kernels::sigmoid_backward(&node.value, &g))?,
                Op::Add => {
                    if need(0) {
                        push(0, g.clone())?;
                    }
                    if need(1) {
                        push(1, g)?;
                    }
                }
                Op::Mul => {
                    if need(0) {
                        push(0, kernels::mul(&g, input(1))?)?;
                    }
                    if need(1) {
                        push(1, kernels::mul(&g, input(0))?)?;
                    }
                }
                Op::AvgPoolTo => push(0, kernels::avg_pool_to_backward(input(0).shape(), &g)?)?,
                Op::Dense => {
                    let (gx, gw, gb) = kernels::dense_backward(input(0), input(1), &g, need(0))?;
                    if let Some(gx) = gx {
                        push(0, gx)?;
                    }
                    if need(1) {
                        push(1, gw)?;
                    }
                    if need(2) {
                        push(2, gb)?;
                    }
                }
                Op::Reshape => push(0, g.reshape(input(0).shape())?)?,
                Op::SliceCols { start } => {
                    push(0, kernels::slice_cols_backward(input(0).shape(), &g, *start))?
                }
                Op::Sum => {
                    let s = g.data()[0];
                    push(0, Tensor::full(input(0).shape(), s))?;
                }
                Op::Custom(op) => {
                    let vals: Vec<&Tensor<T>> = (0..node.inputs.len()).map(input).collect();
                    let gs = op.backward(&vals, &node.value, &g)?;
                    if gs.len() != vals.len() {
                        return Err(NumericsError::shape(
                            op.name(),
                            format!("backward returned {} gradients for {} inputs", gs.len(), vals.len()),
                        ));
                    }
                    for (i, gi) in gs.into_iter().enumerate() {
                        if need(i) {
                            push(i, gi)?;
                        }
                    }
                }
            }
        }
        // Only leaves keep their gradients.
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels::conv2d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::scalar(3.0));
        let sq = g.mul(w, w).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(matches!(
            g.backward(w),
            Err(NumericsError::NonScalarLoss(ref s)) if s == &vec![2]
        ));
    }

    #[test]
    fn add_passes_gradient_through() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_fn(&[3], |i| i as f64));
        let b = g.param(Tensor::from_fn(&[3], |i| -(i as f64)));
        let c = g.add(a, b).unwrap();
        let k = g.constant(Tensor::from_fn(&[3], |i| (i + 1) as f64));
        let m = g.mul(c, k).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(grads.get(k).is_none());
    }

    #[test]
    fn conv_kernel_gradient_is_input_correlation() {
        // d/dk sum(conv(x, k)) at tap (dy, dx, ci, co) equals the sum of the
        // input pixels that tap touches.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(&[1, 5, 5, 2], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn(&[3, 3, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let xi = g.constant(x.clone());
        let ki = g.param(k);
        let y = g.conv2d(xi, ki, 1, Padding::Valid).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let gk = grads.get(ki).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                for ci in 0..2 {
                    let mut want = 0.0;
                    for oy in 0..3 {
                        for ox in 0..3 {
                            want += x.data()[((oy + dy) * 5 + ox + dx) * 2 + ci];
                        }
                    }
                    for co in 0..3 {
                        let got = gk.data()[((dy * 3 + dx) * 2 + ci) * 3 + co];
                        assert!((got - want).abs() < 1e-12);
                    }
                }
            }
        }
        // Forward through the tape equals the raw kernel.
        assert_eq!(g.value(y), &conv2d(&x, g.value(ki), 1, Padding::Valid).unwrap());
    }

    #[test]
    fn constant_only_graph_has_no_gradients() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2], 1.0));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
    }
}
