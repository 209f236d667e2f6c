//! Forward/backward execution of a [`Graph`] with a private activation tape.

use std::cell::Cell;
use std::collections::BTreeMap;

use super::graph::{eval, vjp, Graph, NodeId, Op};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::{narrow, Scalar};
use crate::tensor::Tensor;

thread_local! {
    static COUNTS: Cell<(usize, usize)> = const { Cell::new((0, 0)) };
}

/// Full forward and backward passes run so far on the calling thread.
/// Partial re-evaluation through [`Pass::set_input`] is not counted.
pub fn pass_counts() -> (usize, usize) {
    COUNTS.with(|c| c.get())
}

fn bump(forward: usize, backward: usize) {
    COUNTS.with(|c| {
        let (f, b) = c.get();
        c.set((f + forward, b + backward));
    });
}

/// Gradients keyed by node, each shaped exactly like its target.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    grads: BTreeMap<NodeId, Tensor<T>>,
    names: BTreeMap<String, NodeId>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn get(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&node)
    }

    /// Gradient of a parameter by name.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|id| self.grads.get(id))
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&node)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    /// `(name, gradient)` for every parameter in the set.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .filter_map(|(n, id)| self.grads.get(id).map(|g| (n.as_str(), g)))
    }
}

/// One evaluation of a graph against a parameter store.
///
/// The graph and parameters are borrowed immutably, so any number of passes
/// may run concurrently over the same network.
pub struct Pass<'a, T: Scalar> {
    graph: &'a Graph,
    params: &'a ParamStore<T>,
    /// Parameter-store index for each `Param` node.
    bindings: Vec<Option<usize>>,
    tape: Option<Vec<Option<Tensor<T>>>>,
}

impl<'a, T: Scalar> Pass<'a, T> {
    /// Bind parameters by name. Fails if a parameter is missing or misshaped.
    pub fn new(graph: &'a Graph, params: &'a ParamStore<T>) -> Result<Self> {
        let mut bindings = vec![None; graph.len()];
        for (id, node) in graph.nodes().iter().enumerate() {
            if let Op::Param { name, shape } = &node.op {
                let idx = params
                    .index_of(name)
                    .ok_or_else(|| Error::shape(id, format!("parameter `{name}` not bound")))?;
                let got = params.by_index(idx).shape();
                if got != shape.as_slice() {
                    return Err(Error::shape(
                        id,
                        format!("parameter `{name}` has shape {got:?}, graph expects {shape:?}"),
                    ));
                }
                bindings[id] = Some(idx);
            }
        }
        Ok(Pass {
            graph,
            params,
            bindings,
            tape: None,
        })
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    /// Evaluate every node. All named inputs must be supplied.
    pub fn forward(&mut self, inputs: Vec<(&str, Tensor<T>)>) -> Result<()> {
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.graph.len()];
        for (name, value) in inputs {
            let id = self
                .graph
                .input_id(name)
                .ok_or_else(|| Error::UnknownInput(name.to_string()))?;
            check_input(self.graph, id, &value)?;
            slots[id] = Some(value);
        }
        for (id, node) in self.graph.nodes().iter().enumerate() {
            if let Op::Input { name, .. } = &node.op {
                if slots[id].is_none() {
                    return Err(Error::MissingInput(name.clone()));
                }
            }
        }
        let dirty = vec![true; self.graph.len()];
        self.evaluate(&mut slots, &dirty)?;
        self.tape = Some(slots);
        bump(1, 0);
        Ok(())
    }

    /// Replace one input and re-evaluate only the nodes that depend on it.
    pub fn set_input(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .graph
            .input_id(name)
            .ok_or_else(|| Error::UnknownInput(name.to_string()))?;
        check_input(self.graph, id, &value)?;
        let mut slots = self.tape.take().ok_or(Error::NoTape)?;
        slots[id] = Some(value);
        let mut dirty = vec![false; self.graph.len()];
        dirty[id] = true;
        for (i, node) in self.graph.nodes().iter().enumerate() {
            if node.inputs.iter().any(|&j| dirty[j]) {
                dirty[i] = true;
            }
        }
        dirty[id] = false;
        let res = self.evaluate(&mut slots, &dirty);
        self.tape = Some(slots);
        res
    }

    fn evaluate(&self, slots: &mut [Option<Tensor<T>>], dirty: &[bool]) -> Result<()> {
        for (id, node) in self.graph.nodes().iter().enumerate() {
            if !dirty[id] || matches!(node.op, Op::Input { .. } | Op::Param { .. }) {
                continue;
            }
            let value = {
                let args: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&j| self.lookup(slots, j)).collect();
                eval(id, &node.op, &args)?
            };
            slots[id] = Some(value);
        }
        Ok(())
    }

    fn lookup<'s>(&'s self, slots: &'s [Option<Tensor<T>>], id: NodeId) -> &'s Tensor<T> {
        match self.bindings[id] {
            Some(idx) => self.params.by_index(idx),
            None => slots[id]
                .as_ref()
                .expect("node evaluated in topological order"),
        }
    }

    /// Value of a node after `forward`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        let tape = self.tape.as_ref().ok_or(Error::NoTape)?;
        if id >= self.graph.len() {
            return Err(Error::OutOfRange {
                index: id,
                limit: self.graph.len(),
            });
        }
        Ok(self.lookup(tape, id))
    }

    /// Gradients of the scalar `loss` with respect to each node in `wrt`.
    pub fn backward(&self, loss: NodeId, wrt: &[NodeId]) -> Result<GradientSet<T>> {
        let value = self.value(loss)?;
        if value.len() != 1 {
            return Err(Error::NotScalar(loss));
        }
        let seed = Tensor::full(value.shape(), T::one());
        self.backward_seeded(loss, seed, wrt)
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `output`) back
    /// to each node in `wrt`.
    pub fn backward_seeded(
        &self,
        output: NodeId,
        seed: Tensor<T>,
        wrt: &[NodeId],
    ) -> Result<GradientSet<T>> {
        let tape = self.tape.as_ref().ok_or(Error::NoTape)?;
        let n = self.graph.len();
        if output >= n {
            return Err(Error::OutOfRange {
                index: output,
                limit: n,
            });
        }
        if seed.shape() != self.lookup(tape, output).shape() {
            return Err(Error::shape(output, "seed shape differs from output"));
        }
        // leads[i]: some requested target is reachable backwards from i.
        let mut leads = vec![false; n];
        for &w in wrt {
            if w >= n {
                return Err(Error::OutOfRange { index: w, limit: n });
            }
            leads[w] = true;
        }
        for (i, node) in self.graph.nodes().iter().enumerate() {
            if node.inputs.iter().any(|&j| leads[j]) {
                leads[i] = true;
            }
        }

        bump(0, 1);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output] = Some(seed.data().iter().map(|v| v.as_f64()).collect());
        for id in (0..=output).rev() {
            if !leads[id] {
                continue;
            }
            let node = self.graph.node(id);
            if node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let want: Vec<bool> = node.inputs.iter().map(|&j| leads[j]).collect();
            let args: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| self.lookup(tape, j)).collect();
            let out = self.lookup(tape, id);
            let parts = vjp(id, &node.op, &args, out, &g, &want)?;
            for (&j, part) in node.inputs.iter().zip(parts) {
                if let Some(part) = part {
                    match &mut grads[j] {
                        Some(acc) => acc.iter_mut().zip(&part).for_each(|(a, p)| *a += p),
                        slot @ None => *slot = Some(part),
                    }
                }
            }
            // keep wrt targets that are also interior nodes
            if wrt.contains(&id) {
                grads[id] = Some(g);
            }
        }

        let mut out = BTreeMap::new();
        let mut names = BTreeMap::new();
        for &w in wrt {
            let shape = self.lookup(tape, w).shape().to_vec();
            let data = match grads[w].take() {
                Some(g) => narrow(g),
                None => vec![T::zero(); shape.iter().product()],
            };
            let t = Tensor::new(shape, data)?;
            if !t.is_finite() {
                return Err(Error::NonFinite(w));
            }
            if let Op::Param { name, .. } = &self.graph.node(w).op {
                names.insert(name.clone(), w);
            }
            out.insert(w, t);
        }
        Ok(GradientSet { grads: out, names })
    }
}

fn check_input<T: Scalar>(graph: &Graph, id: NodeId, value: &Tensor<T>) -> Result<()> {
    if let Op::Input { sample_shape, .. } = &graph.node(id).op {
        let s = value.shape();
        if s.is_empty() || &s[1..] != sample_shape.as_slice() {
            return Err(Error::shape(
                id,
                format!("input shape {s:?} does not match [batch, {sample_shape:?}]"),
            ));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(id));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphBuilder;

    fn affine() -> (Graph, NodeId, NodeId) {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]);
        let w = b.param("w", &[1, 2]);
        let y = b.matmul_t(x, w);
        let s = b.unary(Op::Sum, y);
        (b.finish(), x, s)
    }

    #[test]
    fn unbound_or_misshaped_parameters_are_rejected() {
        let (g, _, _) = affine();
        assert!(Pass::<f64>::new(&g, &ParamStore::new()).is_err());
        let mut p = ParamStore::new();
        p.insert("w", Tensor::<f64>::zeros([2, 1]));
        assert!(Pass::new(&g, &p).is_err());
    }

    #[test]
    fn unknown_and_non_finite_inputs_are_rejected() {
        let (g, _, _) = affine();
        let mut p = ParamStore::new();
        p.insert("w", Tensor::<f64>::zeros([1, 2]));
        let mut pass = Pass::new(&g, &p).unwrap();
        assert!(matches!(
            pass.forward(vec![("z", Tensor::zeros([1, 2]))]),
            Err(Error::UnknownInput(_))
        ));
        assert!(matches!(
            pass.forward(vec![(
                "x",
                Tensor::new([1, 2], vec![f64::NAN, 0.0]).unwrap()
            )]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            pass.set_input("x", Tensor::zeros([1, 2])),
            Err(Error::NoTape)
        ));
    }

    #[test]
    fn counts_track_full_passes_only() {
        let (g, x, s) = affine();
        let mut p = ParamStore::new();
        p.insert("w", Tensor::<f64>::new([1, 2], vec![2.0, -1.0]).unwrap());
        let before = pass_counts();
        let mut pass = Pass::new(&g, &p).unwrap();
        pass.forward(vec![("x", Tensor::new([1, 2], vec![1.0, 1.0]).unwrap())])
            .unwrap();
        pass.set_input("x", Tensor::new([1, 2], vec![3.0, 1.0]).unwrap())
            .unwrap();
        assert_eq!(pass.value(s).unwrap().item(), 5.0);
        let grads = pass.backward(s, &[x]).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -1.0]);
        let after = pass_counts();
        assert_eq!((after.0 - before.0, after.1 - before.1), (1, 1));
    }

    #[test]
    fn unreachable_targets_get_zero_gradients() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]);
        let z = b.input("z", &[2]);
        let s = b.unary(Op::Sum, x);
        let g = b.finish();
        let p = ParamStore::<f64>::new();
        let mut pass = Pass::new(&g, &p).unwrap();
        pass.forward(vec![
            ("x", Tensor::zeros([1, 2])),
            ("z", Tensor::zeros([1, 2])),
        ])
        .unwrap();
        let grads = pass.backward(s, &[z]).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(pass.backward(x, &[x]), Err(Error::NotScalar(_))));
    }
}
