//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes. Each node owns its forward
//! value, the indices of its parents, and a backward closure that maps the
//! upstream gradient to per-parent gradients. Because the tape is append-only
//! and parents always precede children, reverse index order is a valid
//! topological order; [`backward`] walks it once, accumulating gradients
//! additively across consumers.
//!
//! Model weights live outside the tape in [`Parameter`]s. A parameter is
//! leased onto a tape per forward pass with [`Tape::param`]; after `backward`
//! its accumulated gradient is deposited back into the parameter, where
//! [`sgd_step`] consumes it. A fresh tape is built per training step and
//! dropped afterwards.

use crate::tensor::{contract, Tensor};
use crate::{Error, Result};
use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

/// Arguments handed to a backward closure.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a Tensor,
    /// Parent values, in the order the node listed them.
    pub inputs: &'a [&'a Tensor],
    /// This node's own forward value.
    pub output: &'a Tensor,
    /// Which parent gradients are actually needed; closures may skip the rest.
    pub needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardArgs) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    /// f64 shadow of a scalar value; reductions set it and scalar arithmetic
    /// propagates it so losses can be accumulated and reported in 64-bit.
    precise: Option<f64>,
    grad: Option<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    sink: Option<Rc<Parameter>>,
}

/// A trainable (or frozen) tensor with optimizer state, shared by reference
/// between the owning layer and any tapes it is leased to.
pub struct Parameter {
    name: String,
    value: RefCell<Tensor>,
    grad: RefCell<Option<Tensor>>,
    velocity: RefCell<Option<Tensor>>,
    trainable: Cell<bool>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Rc<Self> {
        Rc::new(Parameter {
            name: name.into(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            velocity: RefCell::new(None),
            trainable: Cell::new(true),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.value.borrow()
    }

    pub fn set_value(&self, t: Tensor) {
        assert_eq!(
            self.value.borrow().shape(),
            t.shape(),
            "set_value shape change on {}",
            self.name
        );
        *self.value.borrow_mut() = t;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    pub fn trainable(&self) -> bool {
        self.trainable.get()
    }

    pub fn set_trainable(&self, t: bool) {
        self.trainable.set(t);
    }

    /// Clears optimizer momentum (used when a reduced model starts a new
    /// training stage).
    pub fn reset_velocity(&self) {
        *self.velocity.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: &Tensor) {
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => existing.add_assign(g),
            None => *slot = Some(g.clone()),
        }
    }
}

/// Momentum SGD over a parameter list: `v <- momentum * v + g`,
/// `p <- p - lr * v`. Gradients are cleared after the step.
pub fn sgd_step(params: &[Rc<Parameter>], lr: f32, momentum: f32) -> Result<()> {
    for p in params {
        let grad = p.grad.borrow_mut().take().ok_or_else(|| {
            Error::Param(format!("missing gradient for parameter {}", p.name))
        })?;
        let mut vel = p.velocity.borrow_mut();
        let v = vel.get_or_insert_with(|| Tensor::zeros(grad.shape()));
        let mut value = p.value.borrow_mut();
        for ((vi, gi), pi) in v.data_mut().iter_mut().zip(grad.data()).zip(value.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(node);
        Var { tape: self.clone(), id }
    }

    /// A constant or independent-variable leaf.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            precise: None,
            grad: None,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            sink: None,
        })
    }

    /// Leases a parameter onto this tape. Its gradient (zeros if the node
    /// ends up unreachable from the loss) is deposited back on `backward`.
    pub fn param(&self, p: &Rc<Parameter>) -> Var {
        let requires_grad = p.trainable();
        self.push(Node {
            value: p.value.borrow().clone(),
            precise: None,
            grad: None,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            sink: requires_grad.then(|| Rc::clone(p)),
        })
    }

    /// Registers a differentiable operation with an arbitrary backward rule.
    /// This is how the conv/norm/resampling/loss modules extend the op set.
    pub fn custom(
        &self,
        inputs: &[&Var],
        value: Tensor,
        backward: impl Fn(&BackwardArgs) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let parents: Vec<usize> = inputs
            .iter()
            .map(|v| {
                assert!(Rc::ptr_eq(&v.tape.nodes, &self.nodes), "input from a different tape");
                v.id
            })
            .collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(Node {
            value,
            precise: None,
            grad: None,
            parents,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
            sink: None,
        })
    }

    pub(crate) fn set_precise(&self, id: usize, value: f64) {
        self.nodes.borrow_mut()[id].precise = Some(value);
    }

    fn precise_of(&self, id: usize) -> Option<f64> {
        let nodes = self.nodes.borrow();
        let node = &nodes[id];
        if node.value.numel() != 1 {
            return None;
        }
        Some(node.precise.unwrap_or(node.value.data()[0] as f64))
    }
}

/// A handle to one tape node.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}


impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    /// The f64 shadow of a one-element tensor: exact for reductions and the
    /// scalar arithmetic that combines them, falling back to the f32 value.
    /// Stamps a 64-bit shadow value onto a freshly built scalar node.
    pub(crate) fn with_precise(self, value: f64) -> Var {
        self.tape.set_precise(self.id, value);
        self
    }

    pub fn value_f64(&self) -> f64 {
        assert_eq!(self.numel(), 1, "value_f64 on shape {:?}", self.shape());
        self.tape.precise_of(self.id).unwrap()
    }

    /// Gradient computed by the most recent [`backward`] call, zeros for
    /// requires-grad nodes the loss never reached.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub(crate) fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn binary(
        &self,
        other: &Var,
        forward: impl Fn(f32, f32) -> f32,
        precise: Option<fn(f64, f64) -> f64>,
        backward: impl Fn(&BackwardArgs) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.zip_map(&nodes[other.id].value, forward)?
        };
        let out = self.tape.custom(&[self, other], value, backward);
        if let Some(f) = precise {
            if let (Some(a), Some(b)) =
                (self.tape.precise_of(self.id), self.tape.precise_of(other.id))
            {
                out.tape.set_precise(out.id, f(a, b));
            }
        }
        Ok(out)
    }

    fn unary(
        &self,
        forward: impl Fn(f32) -> f32,
        precise: Option<Box<dyn Fn(f64) -> f64>>,
        // Maps (input element, output element, upstream grad element) to the
        // downstream grad element.
        dfn: impl Fn(f32, f32, f32) -> f32 + 'static,
    ) -> Var {
        let value = self.with_value(|v| v.map(&forward));
        let prior = self.tape.precise_of(self.id);
        let out = self.tape.custom(&[self], value, move |args| {
            let x = args.inputs[0];
            let mut g = x.clone();
            for ((gi, &xi), (&yi, &ui)) in g
                .data_mut()
                .iter_mut()
                .zip(x.data())
                .zip(args.output.data().iter().zip(args.grad.data()))
            {
                *gi = dfn(xi, yi, ui);
            }
            vec![Some(g)]
        });
        if let (Some(f), Some(a)) = (precise, prior) {
            out.tape.set_precise(out.id, f(a));
        }
        out
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a + b, Some(|a, b| a + b), |args| {
            vec![
                args.needs[0].then(|| args.grad.clone()),
                args.needs[1].then(|| args.grad.clone()),
            ]
        })
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a - b, Some(|a, b| a - b), |args| {
            vec![
                args.needs[0].then(|| args.grad.clone()),
                args.needs[1].then(|| args.grad.map(|g| -g)),
            ]
        })
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a * b, Some(|a, b| a * b), |args| {
            let (a, b) = (args.inputs[0], args.inputs[1]);
            vec![
                args.needs[0].then(|| args.grad.zip_map(b, |g, b| g * b).unwrap()),
                args.needs[1].then(|| args.grad.zip_map(a, |g, a| g * a).unwrap()),
            ]
        })
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a / b, Some(|a, b| a / b), |args| {
            let (a, b) = (args.inputs[0], args.inputs[1]);
            let da = args.needs[0].then(|| args.grad.zip_map(b, |g, b| g / b).unwrap());
            let db = args.needs[1].then(|| {
                let mut out = args.grad.clone();
                for ((o, &av), &bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *o = -*o * av / (bv * bv);
                }
                out
            });
            vec![da, db]
        })
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a.max(b), None, |args| {
            let (a, b) = (args.inputs[0], args.inputs[1]);
            let da = args.needs[0].then(|| {
                let mut out = args.grad.clone();
                for ((o, &av), &bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    if av < bv {
                        *o = 0.0;
                    }
                }
                out
            });
            let db = args.needs[1].then(|| {
                let mut out = args.grad.clone();
                for ((o, &av), &bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    if av >= bv {
                        *o = 0.0;
                    }
                }
                out
            });
            vec![da, db]
        })
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a.min(b), None, |args| {
            let (a, b) = (args.inputs[0], args.inputs[1]);
            let da = args.needs[0].then(|| {
                let mut out = args.grad.clone();
                for ((o, &av), &bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    if av > bv {
                        *o = 0.0;
                    }
                }
                out
            });
            let db = args.needs[1].then(|| {
                let mut out = args.grad.clone();
                for ((o, &av), &bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    if av <= bv {
                        *o = 0.0;
                    }
                }
                out
            });
            vec![da, db]
        })
    }

    pub fn add_scalar(&self, s: f32) -> Var {
        self.unary(move |x| x + s, Some(Box::new(move |a| a + s as f64)), |_, _, g| g)
    }

    pub fn mul_scalar(&self, s: f32) -> Var {
        self.unary(move |x| x * s, Some(Box::new(move |a| a * s as f64)), move |_, _, g| g * s)
    }

    pub fn div_scalar(&self, s: f32) -> Var {
        self.unary(move |x| x / s, Some(Box::new(move |a| a / s as f64)), move |_, _, g| g / s)
    }

    pub fn maximum_scalar(&self, s: f32) -> Var {
        self.unary(move |x| x.max(s), None, move |x, _, g| if x >= s { g } else { 0.0 })
    }

    pub fn minimum_scalar(&self, s: f32) -> Var {
        self.unary(move |x| x.min(s), None, move |x, _, g| if x <= s { g } else { 0.0 })
    }

    pub fn neg(&self) -> Var {
        self.unary(|x| -x, Some(Box::new(|a| -a)), |_, _, g| -g)
    }

    pub fn log(&self) -> Var {
        self.unary(|x| x.ln(), None, |x, _, g| g / x)
    }

    pub fn exp(&self) -> Var {
        self.unary(|x| x.exp(), None, |_, y, g| g * y)
    }

    pub fn relu6(&self) -> Var {
        self.unary(
            |x| x.clamp(0.0, 6.0),
            None,
            |x, _, g| if x > 0.0 && x < 6.0 { g } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(
            |x| 1.0 / (1.0 + (-x).exp()),
            None,
            |_, y, g| g * y * (1.0 - y),
        )
    }

    /// Sum of all elements as a rank-0 scalar, accumulated in f64.
    pub fn sum_all(&self) -> Var {
        let precise = self.with_value(|v| v.sum_f64());
        let value = Tensor::scalar(precise as f32);
        let out = self.tape.custom(&[self], value, |args| {
            let g = args.grad.item();
            vec![Some(Tensor::full(args.inputs[0].shape(), g))]
        });
        out.tape.set_precise(out.id, precise);
        out
    }

    pub fn mean_all(&self) -> Var {
        let n = self.numel() as f32;
        self.sum_all().div_scalar(n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.with_value(|v| v.reshape(shape))?;
        Ok(self.tape.custom(&[self], value, |args| {
            vec![Some(args.grad.reshape(args.inputs[0].shape()).unwrap())]
        }))
    }

    /// General tensor contraction over the given `(axis of self, axis of
    /// other)` pairs; free axes keep their order, self's first.
    pub fn matmul_reduce(&self, other: &Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            contract(&nodes[self.id].value, &nodes[other.id].value, pairs)?
        };
        let pairs_owned: Vec<(usize, usize)> = pairs.to_vec();
        Ok(self.tape.custom(&[self, other], value, move |args| {
            let (a, b) = (args.inputs[0], args.inputs[1]);
            let da = args.needs[0].then(|| contract_grad_lhs(args.grad, a, b, &pairs_owned));
            let db = args.needs[1].then(|| contract_grad_rhs(args.grad, a, b, &pairs_owned));
            vec![da, db]
        }))
    }
}

/// Concatenates along `axis`; all other axis sizes must match.
pub fn concat(inputs: &[&Var], axis: usize) -> Result<Var> {
    assert!(!inputs.is_empty(), "concat of zero tensors");
    let tape = inputs[0].tape.clone();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| v.shape()).collect();
    let rank = shapes[0].len();
    if axis >= rank {
        return Err(Error::Shape(format!("concat axis {} out of range for rank {}", axis, rank)));
    }
    for s in &shapes[1..] {
        if s.len() != rank
            || s.iter().zip(&shapes[0]).enumerate().any(|(ax, (a, b))| ax != axis && a != b)
        {
            return Err(Error::Shape(format!(
                "concat along axis {} on incompatible shapes {:?} vs {:?}",
                axis, shapes[0], s
            )));
        }
    }
    let mut out_shape = shapes[0].clone();
    out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();

    let mut value = Tensor::zeros(&out_shape);
    {
        let nodes = tape.nodes.borrow();
        let mut offset = 0usize;
        for (v, s) in inputs.iter().zip(&shapes) {
            let src = nodes[v.id].value.data();
            let span = s[axis] * inner;
            for o in 0..outer {
                let dst_start = o * out_shape[axis] * inner + offset * inner;
                value.data_mut()[dst_start..dst_start + span]
                    .copy_from_slice(&src[o * span..(o + 1) * span]);
            }
            offset += s[axis];
        }
    }

    let sizes: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
    let total_axis = out_shape[axis];
    Ok(tape.custom(inputs, value, move |args| {
        let mut grads = Vec::with_capacity(sizes.len());
        let mut offset = 0usize;
        for (k, &sz) in sizes.iter().enumerate() {
            let piece = args.needs[k].then(|| {
                let mut g = Tensor::zeros(args.inputs[k].shape());
                let span = sz * inner;
                for o in 0..outer {
                    let src_start = o * total_axis * inner + offset * inner;
                    g.data_mut()[o * span..(o + 1) * span]
                        .copy_from_slice(&args.grad.data()[src_start..src_start + span]);
                }
                g
            });
            grads.push(piece);
            offset += sz;
        }
        grads
    }))
}

fn rank_among(sorted: &[usize], axis: usize) -> usize {
    sorted.iter().position(|&a| a == axis).unwrap()
}

/// d(contract(a, b, pairs))/da, permuted back to a's axis order.
fn contract_grad_lhs(g: &Tensor, a: &Tensor, b: &Tensor, pairs: &[(usize, usize)]) -> Tensor {
    let a_contr: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b_contr: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a_free: Vec<usize> = (0..a.rank()).filter(|x| !a_contr.contains(x)).collect();
    let b_free: Vec<usize> = (0..b.rank()).filter(|x| !b_contr.contains(x)).collect();
    // g axes: [a_free..., b_free...]; contract g's b_free block against b's
    // free axes, leaving [a_free..., b_contracted-in-b-order...].
    let g_pairs: Vec<(usize, usize)> =
        b_free.iter().enumerate().map(|(j, &bx)| (a_free.len() + j, bx)).collect();
    let raw = contract(g, b, &g_pairs).expect("lhs grad contraction");
    let mut b_contr_sorted = b_contr.clone();
    b_contr_sorted.sort_unstable();
    // raw axis -> a axis mapping, then invert for permute().
    let mut axes = vec![0usize; a.rank()];
    for ax in 0..a.rank() {
        axes[ax] = match a_free.iter().position(|&f| f == ax) {
            Some(i) => i,
            None => {
                let k = a_contr.iter().position(|&c| c == ax).unwrap();
                a_free.len() + rank_among(&b_contr_sorted, pairs[k].1)
            }
        };
    }
    raw.permute(&axes).expect("lhs grad permute")
}

/// d(contract(a, b, pairs))/db, permuted back to b's axis order.
fn contract_grad_rhs(g: &Tensor, a: &Tensor, b: &Tensor, pairs: &[(usize, usize)]) -> Tensor {
    let a_contr: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b_contr: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a_free: Vec<usize> = (0..a.rank()).filter(|x| !a_contr.contains(x)).collect();
    let b_free: Vec<usize> = (0..b.rank()).filter(|x| !b_contr.contains(x)).collect();
    // Contract a's free axes against g's leading block, leaving
    // [a_contracted-in-a-order..., b_free...].
    let g_pairs: Vec<(usize, usize)> =
        a_free.iter().enumerate().map(|(i, &ax)| (ax, i)).collect();
    let raw = contract(a, g, &g_pairs).expect("rhs grad contraction");
    let mut a_contr_sorted = a_contr.clone();
    a_contr_sorted.sort_unstable();
    let mut axes = vec![0usize; b.rank()];
    for bx in 0..b.rank() {
        axes[bx] = match b_free.iter().position(|&f| f == bx) {
            Some(j) => a_contr.len() + j,
            None => {
                let k = b_contr.iter().position(|&c| c == bx).unwrap();
                rank_among(&a_contr_sorted, pairs[k].0)
            }
        };
    }
    raw.permute(&axes).expect("rhs grad permute")
}

/// Runs reverse-mode accumulation from a scalar loss. Every requires-grad
/// node on the tape ends up with a gradient (zeros when unreachable), and
/// parameter leases deposit their gradients back into the parameters.
pub fn backward(loss: &Var) -> Result<()> {
    let tape = loss.tape.clone();
    if loss.numel() != 1 {
        return Err(Error::Shape(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let n = tape.len();
    let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
    {
        let nodes = tape.nodes.borrow();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else { continue };
            // Parents always precede children on the tape, so splitting at
            // `id` lets us read this node's gradient while accumulating into
            // its parents'.
            let (parent_grads_slots, rest) = grads.split_at_mut(id);
            let Some(grad) = rest[0].as_ref() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let args = BackwardArgs { grad, inputs: &inputs, output: &node.value, needs: &needs };
            let parent_grads = back(&args);
            assert_eq!(parent_grads.len(), node.parents.len(), "backward arity mismatch");
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match parent_grads_slots[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => parent_grads_slots[p] = Some(pg),
                }
            }
        }
    }
    let mut nodes = tape.nodes.borrow_mut();
    for (id, node) in nodes.iter_mut().enumerate() {
        if !node.requires_grad {
            continue;
        }
        let g = match grads[id].take() {
            Some(g) => g,
            None => Tensor::zeros(node.value.shape()),
        };
        if let Some(sink) = &node.sink {
            sink.accumulate_grad(&g);
        }
        node.grad = Some(g);
    }
    Ok(())
}

/// Compares analytic gradients against central finite differences
/// (`step` = perturbation, relative tolerance `rel_tol` with a 1e-6 floor).
/// The closure must be a pure function of the leaf inputs.
pub fn gradcheck(
    mut f: impl FnMut(&Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    step: f32,
    rel_tol: f64,
) -> Result<()> {
    let eval = |f: &mut dyn FnMut(&Tape, &[Var]) -> Result<Var>, xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&tape, &vars)?;
        Ok(loss.value_f64())
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| v.grad().expect("leaf grad")).collect();

    // Single-precision forward passes round each intermediate to f32, so a
    // central difference cannot resolve gradients whose signal 2*step*|g|
    // sits below that rounding. Gaps inside the noise floor are accepted;
    // genuine backward bugs produce errors proportional to the gradient
    // itself and still trip the relative test.
    let noise_floor =
        f32::EPSILON as f64 * loss.value_f64().abs().max(1.0) / (2.0 * step as f64);

    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&mut f, &work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&mut f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step as f64);
            let a = analytic[i].data()[j] as f64;
            if (a - numeric).abs() <= noise_floor {
                continue;
            }
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > rel_tol {
                return Err(Error::Param(format!(
                    "gradcheck failed at input {} element {}: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                    i, j, a, numeric, rel
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    // ── Forward values ──────────────────────────────────────────────

    #[test]
    fn matmul_reduce_matrix_example() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = tape.leaf(t(&[2, 1], &[5.0, 6.0]), false);
        let c = a.matmul_reduce(&b, &[(1, 0)]).unwrap();
        assert_eq!(c.value().shape(), &[2, 1]);
        assert_eq!(c.value().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_reduce_rejects_size_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[4, 1]), false);
        let err = a.matmul_reduce(&b, &[(1, 0)]).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{}", err);
    }

    #[test]
    fn elementwise_identities() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.5, 7.0]), false);
        assert_eq!(x.mul_scalar(1.0).value().data(), &[-1.0, 0.5, 7.0]);
        assert_eq!(x.relu6().value().data(), &[0.0, 0.5, 6.0]);
        let y = tape.leaf(t(&[3], &[2.0, 2.0, 2.0]), false);
        assert_eq!(x.maximum(&y).unwrap().value().data(), &[2.0, 2.0, 7.0]);
        assert_eq!(x.minimum(&y).unwrap().value().data(), &[-1.0, 0.5, 2.0]);
        let shape_err = x.add(&tape.leaf(Tensor::zeros(&[4]), false)).unwrap_err();
        assert!(shape_err.to_string().contains("[3]"), "{}", shape_err);
    }

    // ── Backward structure ──────────────────────────────────────────

    #[test]
    fn backward_accumulates_over_consumers() {
        // z = x*x + x  =>  dz/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, -2.0]), true);
        let z = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
        backward(&z).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[7.0, -3.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let err = backward(&x).unwrap_err();
        assert!(err.to_string().contains("scalar"), "{}", err);
    }

    #[test]
    fn unreachable_node_gets_zero_grad() {
        let tape = Tape::new();
        let used = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 1.0, 1.0]), true);
        let loss = used.sum_all();
        backward(&loss).unwrap();
        assert_eq!(unused.grad().unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn parameter_deposit_and_freeze() {
        let p = Parameter::new("w", t(&[2], &[1.0, 2.0]));
        let frozen = Parameter::new("frozen", t(&[2], &[3.0, 4.0]));
        frozen.set_trainable(false);
        let tape = Tape::new();
        let pv = tape.param(&p);
        let fv = tape.param(&frozen);
        let loss = pv.mul(&fv).unwrap().sum_all();
        backward(&loss).unwrap();
        assert_eq!(p.grad().unwrap().data(), &[3.0, 4.0]);
        assert!(frozen.grad().is_none());
    }

    // ── SGD ─────────────────────────────────────────────────────────

    #[test]
    fn sgd_momentum_two_steps() {
        let p = Parameter::new("p", Tensor::scalar(0.0));
        for _ in 0..2 {
            p.accumulate_grad(&Tensor::scalar(1.0));
            sgd_step(&[Rc::clone(&p)], 0.1, 0.9).unwrap();
        }
        let v = p.value().item();
        assert!((v - (-0.29)).abs() < 1e-6, "got {}", v);
    }

    #[test]
    fn sgd_zero_lr_keeps_parameters() {
        let p = Parameter::new("p", t(&[2], &[1.5, -2.5]));
        p.accumulate_grad(&t(&[2], &[10.0, 10.0]));
        sgd_step(&[Rc::clone(&p)], 0.0, 0.9).unwrap();
        assert_eq!(p.value().data(), &[1.5, -2.5]);
    }

    #[test]
    fn sgd_missing_gradient_names_parameter() {
        let p = Parameter::new("encoder.stem.weight", Tensor::scalar(0.0));
        let err = sgd_step(&[Rc::clone(&p)], 0.1, 0.9).unwrap_err();
        assert!(err.to_string().contains("encoder.stem.weight"), "{}", err);
    }

    // ── Finite differences over every op ────────────────────────────

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Random tensor whose elements stay at least `margin` away from every
    /// value in `avoid` (keeps finite differences off the kinks).
    fn random_away_from(
        rng: &mut ChaCha8Rng,
        shape: &[usize],
        lo: f32,
        hi: f32,
        avoid: &[f32],
        margin: f32,
    ) -> Tensor {
        Tensor::from_fn(shape, |_| loop {
            let v = rng.gen_range(lo..hi);
            if avoid.iter().all(|&a| (v - a).abs() > margin) {
                break v;
            }
        })
    }

    #[test]
    fn gradcheck_all_ops() {
        let step = 1e-3;
        let tol = 1e-3;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [2usize, 3, 2];
            let a = random_tensor(&mut rng, &shape, -2.0, 2.0);
            let b = random_tensor(&mut rng, &shape, -2.0, 2.0);
            // Keep |a-b| off the max/min kink.
            let b_apart = a
                .zip_map(&b, |av, bv| if (av - bv).abs() < 0.05 { bv + 0.1 } else { bv })
                .unwrap();
            let positive = random_tensor(&mut rng, &shape, 0.3, 3.0);
            let nonzero = random_away_from(&mut rng, &shape, -2.0, 2.0, &[0.0], 0.2);
            let relu_in = random_away_from(&mut rng, &shape, -3.0, 8.0, &[0.0, 6.0], 0.05);

            gradcheck(|_, v| Ok(v[0].add(&v[1])?.mul(&v[0])?.sum_all()), &[a.clone(), b_apart.clone()], step, tol)
                .expect("add");
            gradcheck(|_, v| Ok(v[0].sub(&v[1])?.mul(&v[1])?.sum_all()), &[a.clone(), b_apart.clone()], step, tol)
                .expect("sub");
            gradcheck(|_, v| Ok(v[0].div(&v[1])?.sum_all()), &[a.clone(), positive.clone()], step, tol)
                .expect("div");
            gradcheck(|_, v| Ok(v[0].maximum(&v[1])?.sum_all()), &[a.clone(), b_apart.clone()], step, tol)
                .expect("maximum");
            gradcheck(|_, v| Ok(v[0].minimum(&v[1])?.mul(&v[0])?.sum_all()), &[a.clone(), b_apart.clone()], step, tol)
                .expect("minimum");
            gradcheck(|_, v| Ok(v[0].log().sum_all()), &[positive.clone()], step, tol).expect("log");
            gradcheck(|_, v| Ok(v[0].exp().mean_all()), &[a.clone()], step, tol).expect("exp");
            gradcheck(|_, v| Ok(v[0].relu6().sum_all()), &[relu_in], step, tol).expect("relu6");
            gradcheck(|_, v| Ok(v[0].sigmoid().sum_all()), &[a.clone()], step, tol).expect("sigmoid");
            gradcheck(|_, v| Ok(v[0].add_scalar(1.5).mul_scalar(-0.7).sum_all()), &[a.clone()], step, tol)
                .expect("scalar chain");
            gradcheck(|_, v| Ok(v[0].maximum_scalar(0.25).sum_all()), &[nonzero.clone()], step, tol)
                .expect("maximum_scalar");
            gradcheck(
                |_, v| Ok(v[0].reshape(&[3, 4])?.mul(&v[0].reshape(&[3, 4])?)?.sum_all()),
                &[a.clone()],
                step,
                tol,
            )
            .expect("reshape");

            // Positive entries keep the reduction sums away from
            // cancellation, which finite differences cannot resolve in f32.
            let m1 = random_tensor(&mut rng, &[2, 3], 0.2, 1.5);
            let m2 = random_tensor(&mut rng, &[3, 2], 0.2, 1.5);
            gradcheck(|_, v| Ok(v[0].matmul_reduce(&v[1], &[(1, 0)])?.sum_all()), &[m1, m2], step, tol)
                .expect("matmul");
            let t1 = random_tensor(&mut rng, &[2, 3, 2], 0.1, 1.0);
            let t2 = random_tensor(&mut rng, &[2, 2, 3], 0.1, 1.0);
            // Contract two axes at once, crossed over.
            gradcheck(
                |_, v| Ok(v[0].matmul_reduce(&v[1], &[(2, 1), (1, 2)])?.sum_all()),
                &[t1, t2],
                step,
                tol,
            )
            .expect("double contraction");

            let c1 = random_tensor(&mut rng, &[2, 2, 2], -1.0, 1.0);
            let c2 = random_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
            gradcheck(
                |_, v| {
                    let joined = concat(&[&v[0], &v[1]], 1)?;
                    Ok(joined.mul(&joined)?.sum_all())
                },
                &[c1, c2],
                step,
                tol,
            )
            .expect("concat");
        }
    }
}
