//! Dense tanh networks with an optional goal input injected into one hidden
//! layer, plus the matching reverse pass.

use serde::{Deserialize, Serialize};

use super::params::{GradientBuffer, Layout, ParamSpec, ParameterSet};
use crate::error::{check_len, Error, Result};

/// Extra input added to the pre-activation of one hidden layer through its own
/// weight matrix `wg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalInjection {
    pub dim: usize,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// Apply tanh to the output layer as well.
    pub final_tanh: bool,
    pub goal: Option<GoalInjection>,
}

impl NetShape {
    pub fn mlp(input: usize, hidden: Vec<usize>, output: usize, final_tanh: bool) -> Self {
        Self {
            input,
            hidden,
            output,
            final_tanh,
            goal: None,
        }
    }
}

/// Forward activations kept for one backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    goal: Option<Vec<f64>>,
    /// Post-activation of every hidden layer, then the output.
    layers: Vec<Vec<f64>>,
    spent: bool,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("trace has an output layer")
    }

    pub fn hidden(&self, layer: usize) -> &[f64] {
        &self.layers[layer]
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.layers.pop().expect("trace has an output layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    shape: NetShape,
    layout: Layout,
    goal_index: Option<usize>,
    out_index: usize,
}

impl Network {
    pub fn new(shape: NetShape) -> Result<Self> {
        let mut entries = Vec::new();
        let mut prev = shape.input;
        for (l, &width) in shape.hidden.iter().enumerate() {
            entries.push(ParamSpec::weight(format!("w{l}"), prev, width));
            entries.push(ParamSpec::bias(format!("b{l}"), width));
            prev = width;
        }
        let goal_index = match shape.goal {
            Some(g) => {
                let Some(&width) = shape.hidden.get(g.layer) else {
                    return Err(Error::Config(format!(
                        "goal injection layer {} out of range for {} hidden layers",
                        g.layer,
                        shape.hidden.len()
                    )));
                };
                entries.push(ParamSpec::weight("wg", g.dim, width));
                Some(entries.len() - 1)
            }
            None => None,
        };
        let out_index = entries.len();
        entries.push(ParamSpec::weight("w_out", prev, shape.output));
        entries.push(ParamSpec::bias("b_out", shape.output));
        let layout = Layout::new(entries)?;
        Ok(Self {
            shape,
            layout,
            goal_index,
            out_index,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.shape.input
    }

    pub fn output_dim(&self) -> usize {
        self.shape.output
    }

    pub fn goal_dim(&self) -> Option<usize> {
        self.shape.goal.map(|g| g.dim)
    }

    fn check_params(&self, params: &ParameterSet) -> Result<()> {
        if params.layout() != &self.layout {
            return Err(Error::Usage("parameter layout does not match network".into()));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        params: &ParameterSet,
        input: &[f64],
        goal: Option<&[f64]>,
    ) -> Result<Trace> {
        self.check_params(params)?;
        check_len("network input", self.shape.input, input.len())?;
        match (self.shape.goal, goal) {
            (Some(g), Some(goal)) => check_len("goal input", g.dim, goal.len())?,
            (Some(g), None) => {
                return Err(Error::Shape {
                    context: "goal input",
                    expected: g.dim,
                    actual: 0,
                })
            }
            (None, Some(goal)) => {
                return Err(Error::Shape {
                    context: "goal input",
                    expected: 0,
                    actual: goal.len(),
                })
            }
            (None, None) => {}
        }

        let mut layers: Vec<Vec<f64>> = Vec::with_capacity(self.shape.hidden.len() + 1);
        for l in 0..self.shape.hidden.len() {
            let x = if l == 0 { input } else { &layers[l - 1] };
            let mut z = params.tensor(2 * l + 1).to_vec();
            affine_acc(params.tensor(2 * l), x, &mut z);
            if let (Some(inj), Some(gi), Some(goal)) = (self.shape.goal, self.goal_index, goal) {
                if inj.layer == l {
                    affine_acc(params.tensor(gi), goal, &mut z);
                }
            }
            z.iter_mut().for_each(|v| *v = v.tanh());
            layers.push(z);
        }
        let x = layers.last().map(Vec::as_slice).unwrap_or(input);
        let mut out = params.tensor(self.out_index + 1).to_vec();
        affine_acc(params.tensor(self.out_index), x, &mut out);
        if self.shape.final_tanh {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        layers.push(out);

        Ok(Trace {
            input: input.to_vec(),
            goal: goal.map(<[f64]>::to_vec),
            layers,
            spent: false,
        })
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    ///
    /// Returns the gradient with respect to the goal input when the network
    /// has one. A trace can be consumed only once.
    pub fn backward(
        &self,
        params: &ParameterSet,
        trace: &mut Trace,
        d_output: &[f64],
        grads: &mut GradientBuffer,
    ) -> Result<Option<Vec<f64>>> {
        if trace.spent {
            return Err(Error::Usage("backward called twice on the same trace".into()));
        }
        self.check_params(params)?;
        if grads.layout() != &self.layout {
            return Err(Error::Usage("gradient layout does not match network".into()));
        }
        check_len("output gradient", self.shape.output, d_output.len())?;
        trace.spent = true;

        let n_hidden = self.shape.hidden.len();
        let mut delta = d_output.to_vec();
        if self.shape.final_tanh {
            let y = trace.output();
            for (d, y) in delta.iter_mut().zip(y) {
                *d *= 1.0 - y * y;
            }
        }

        let x = if n_hidden == 0 {
            trace.input.as_slice()
        } else {
            trace.layers[n_hidden - 1].as_slice()
        };
        outer_acc(grads.tensor_mut(self.out_index), x, &delta);
        add_into(grads.tensor_mut(self.out_index + 1), &delta);
        if n_hidden == 0 {
            return Ok(None);
        }
        let mut d_hidden = matvec_back(params.tensor(self.out_index), &delta, x.len());

        let mut d_goal = None;
        for l in (0..n_hidden).rev() {
            let h = &trace.layers[l];
            for (d, h) in d_hidden.iter_mut().zip(h) {
                *d *= 1.0 - h * h;
            }
            let dz = d_hidden;
            if let (Some(inj), Some(gi), Some(goal)) =
                (self.shape.goal, self.goal_index, trace.goal.as_deref())
            {
                if inj.layer == l {
                    outer_acc(grads.tensor_mut(gi), goal, &dz);
                    d_goal = Some(matvec_back(params.tensor(gi), &dz, goal.len()));
                }
            }
            let x = if l == 0 {
                trace.input.as_slice()
            } else {
                trace.layers[l - 1].as_slice()
            };
            outer_acc(grads.tensor_mut(2 * l), x, &dz);
            add_into(grads.tensor_mut(2 * l + 1), &dz);
            if l == 0 {
                break;
            }
            d_hidden = matvec_back(params.tensor(2 * l), &dz, x.len());
        }
        Ok(d_goal)
    }
}

/// `out += x^T W` for an input-major `W`; zero inputs are skipped, which makes
/// sparse binary observations cheap.
fn affine_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

fn outer_acc(g: &mut [f64], x: &[f64], delta: &[f64]) {
    let cols = delta.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut g[i * cols..(i + 1) * cols];
        for (gij, &d) in row.iter_mut().zip(delta) {
            *gij += xi * d;
        }
    }
}

/// `W delta`, i.e. the gradient with respect to the layer input.
fn matvec_back(w: &[f64], delta: &[f64], rows: usize) -> Vec<f64> {
    let cols = delta.len();
    (0..rows)
        .map(|i| {
            w[i * cols..(i + 1) * cols]
                .iter()
                .zip(delta)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
