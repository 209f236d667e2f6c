//! Central finite-difference verification of parameter gradients.

use super::graph::{eval, Graph, NodeId, Op};
use super::params::ParamStore;
use super::pass::Pass;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// Largest `|analytic − numeric| / max(1, |analytic|)` over the tensor.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// Parameters whose discrepancy exceeds the tolerance.
    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_error.is_nan() || p.max_rel_error > self.tolerance)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Loss evaluator that recomputes only the nodes a single parameter
/// perturbation reaches. A matmul fed directly by the perturbed weight is
/// patched with a rank-1 update instead of being recomputed.
struct Probe<'g> {
    graph: &'g Graph,
    /// Every node value at the unperturbed point.
    base: Vec<Tensor<f64>>,
    loss: NodeId,
}

impl<'g> Probe<'g> {
    fn new(graph: &'g Graph, pass: &Pass<'_, f64>, loss: NodeId) -> Result<Self> {
        let base = (0..graph.len())
            .map(|i| pass.value(i).cloned())
            .collect::<Result<_>>()?;
        Ok(Probe { graph, base, loss })
    }

    /// Nodes up to the loss that depend on `param`, in topological order.
    fn downstream(&self, param: NodeId) -> Vec<NodeId> {
        let mut reach = vec![false; self.graph.len()];
        reach[param] = true;
        let mut out = Vec::new();
        for id in param + 1..=self.loss {
            if self.graph.node(id).inputs.iter().any(|&j| reach[j]) {
                reach[id] = true;
                out.push(id);
            }
        }
        out
    }

    /// Loss with `param` set to `value`, which differs from the base value
    /// only at element `index`.
    fn loss_with(
        &self,
        param: NodeId,
        value: &Tensor<f64>,
        index: usize,
        dirty: &[NodeId],
    ) -> Result<f64> {
        let mut scratch: Vec<Option<Tensor<f64>>> = vec![None; self.graph.len()];
        let delta = value.data()[index] - self.base[param].data()[index];
        for &id in dirty {
            let node = self.graph.node(id);
            let get = |j: NodeId| -> &Tensor<f64> {
                if j == param {
                    value
                } else {
                    scratch[j].as_ref().unwrap_or(&self.base[j])
                }
            };
            let out = match node.op {
                Op::MatMul { transpose_b }
                    if node.inputs[1] == param
                        && node.inputs[0] != param
                        && scratch[node.inputs[0]].is_none() =>
                {
                    let a = &self.base[node.inputs[0]];
                    let (m, k) = (a.shape()[0], a.shape()[1]);
                    let mut out = self.base[id].clone();
                    let n = out.shape()[1];
                    // element (r, c) of the weight touches output column `col`
                    // through input column `row`
                    let (col, row) = if transpose_b {
                        (index / k, index % k)
                    } else {
                        (index % n, index / n)
                    };
                    let data = out.data_mut();
                    for i in 0..m {
                        data[i * n + col] += delta * a.data()[i * k + row];
                    }
                    out
                }
                _ => {
                    let args: Vec<&Tensor<f64>> = node.inputs.iter().map(|&j| get(j)).collect();
                    eval(id, &node.op, &args)?
                }
            };
            scratch[id] = Some(out);
        }
        let v = match scratch[self.loss].take() {
            Some(t) => t,
            None => self.base[self.loss].clone(),
        };
        Ok(v.item())
    }
}

/// Compare every parameter gradient of the scalar `loss` against central
/// differences with the given `step`.
pub fn grad_check(
    graph: &Graph,
    params: &ParamStore<f64>,
    inputs: &[(&str, Tensor<f64>)],
    loss: NodeId,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let param_nodes: Vec<(String, NodeId)> =
        graph.params().map(|(n, id)| (n.to_string(), id)).collect();
    let ids: Vec<NodeId> = param_nodes.iter().map(|(_, id)| *id).collect();

    let mut pass = Pass::new(graph, params)?;
    pass.forward(inputs.to_vec())?;
    let grads = pass.backward(loss, &ids)?;
    let probe = Probe::new(graph, &pass, loss)?;

    let mut out = Vec::with_capacity(param_nodes.len());
    for (name, id) in &param_nodes {
        let analytic = grads.get(*id).expect("requested gradient");
        let dirty = probe.downstream(*id);
        let mut value = probe.base[*id].clone();
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..analytic.len() {
            let orig = value.data()[i];
            value.data_mut()[i] = orig + step;
            let plus = probe.loss_with(*id, &value, i, &dirty)?;
            value.data_mut()[i] = orig - step;
            let minus = probe.loss_with(*id, &value, i, &dirty)?;
            value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err.is_nan() || err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        out.push(check);
    }
    Ok(GradCheckReport {
        params: out,
        tolerance,
    })
}
