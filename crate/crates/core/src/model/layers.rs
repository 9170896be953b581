use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamId, ParamStore};
use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::Result;

/// Parameters placed on a graph for one forward pass.
pub(crate) struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub(crate) fn new(g: &mut Graph, store: &ParamStore) -> Self {
        let vars = store.iter().map(|p| g.variable(p.value.clone())).collect();
        Self { vars }
    }

    pub(crate) fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            &[fan_out, fan_in],
            Init::FanIn(fan_in),
            rng,
        );
        let b = store.add(format!("{name}.bias"), &[fan_out], Init::FanIn(fan_in), rng);
        Self { w, b }
    }

    pub(crate) fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.get(self.w), Some(p.get(self.b)))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

impl Conv {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cin_g = cin / spec.groups;
        let fan_in = cin_g * kernel.iter().product::<usize>();
        let shape = [cout, cin_g, kernel[0], kernel[1], kernel[2]];
        let w = store.add(format!("{name}.weight"), &shape, Init::FanIn(fan_in), rng);
        let b = store.add(format!("{name}.bias"), &[cout], Init::FanIn(fan_in), rng);
        Self { w, b, spec }
    }

    pub(crate) fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv3d(x, p.get(self.w), Some(p.get(self.b)), self.spec)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gamma = store.add(format!("{name}.gamma"), &[dim], Init::Const(1.0), rng);
        let beta = store.add(format!("{name}.beta"), &[dim], Init::Const(0.0), rng);
        Self { gamma, beta }
    }

    pub(crate) fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(self.gamma), p.get(self.beta), 1e-5)
    }
}
