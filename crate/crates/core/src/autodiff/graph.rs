use ndarray::{ArrayD, IxDyn};

/// Dense dynamic-rank tensor used throughout the graph.
pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the
/// graph that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn Fn(&Graph, &Arr, &mut Vec<Option<Arr>>)>;

pub(crate) struct Node {
    pub(crate) value: Arr,
    pub(crate) backward: Option<BackwardFn>,
    pub(crate) needs_grad: bool,
    /// Leaves keep their gradient after the sweep; interior nodes drop
    /// theirs once consumed to bound memory.
    pub(crate) retain: bool,
}

/// Eager computation tape.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    /// `(param_id, node_id)` bindings recorded by [`nn::ParamStore`] lookups.
    pub(crate) param_bindings: Vec<(usize, usize)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor that does not require gradients.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, false, None, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Arr::from_elem(IxDyn(&[1]), value))
    }

    /// Insert a differentiable leaf (an input or a parameter).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, true, None, true)
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        a.iter().next().copied().unwrap()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Keep this node's gradient available in the [`Gradients`] result.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub(crate) fn push(
        &mut self,
        value: Arr,
        needs_grad: bool,
        backward: Option<BackwardFn>,
        retain: bool,
    ) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite node value");
        self.nodes.push(Node {
            value,
            backward: if needs_grad { backward } else { None },
            needs_grad,
            retain,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Reverse sweep from a scalar root. Returns gradients for retained
    /// nodes (leaves and anything passed to [`Graph::retain_grad`]).
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Arr::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Some(f) = &node.backward {
                f(self, &g, &mut grads);
            }
            if node.retain {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient w.r.t. a retained node; `None` if the node was not
    /// reached or not retained.
    pub fn wrt(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Accumulate `g` into `slot`.
pub(crate) fn accum(slot: &mut Option<Arr>, g: Arr) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}
