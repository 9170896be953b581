//! Named parameter storage.
//!
//! Values are kept as `f64` for arithmetic but always hold numbers that are
//! exactly representable in `f32`, which is the on-disk precision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

pub(crate) enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    /// Standard normal scaled by the given factor.
    Normal(f64),
    Const(f64),
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| round_f32(rng.random_range(-bound..bound)))
                    .collect()
            }
            Init::Normal(scale) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    round_f32(z * scale)
                })
                .collect(),
            Init::Const(c) => vec![round_f32(c); n],
        };
        self.params.push(Param {
            name: name.into(),
            value: Tensor::new(shape.to_vec(), data).expect("shape matches data"),
        });
        ParamId(self.params.len() - 1)
    }

    /// Appends a parameter, snapping its values to `f32`.
    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        value.data_mut().iter_mut().for_each(|v| *v = round_f32(*v));
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalars grouped by the first dotted name component.
    pub fn count_by_module(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let module = p.name.split('.').next().unwrap_or("").to_string();
            match out.iter_mut().find(|(m, _)| *m == module) {
                Some((_, n)) => *n += p.value.len(),
                None => out.push((module, p.value.len())),
            }
        }
        out
    }

    /// Snaps every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = round_f32(*v));
        }
    }

    /// Replaces all values, checking names and shapes against `self`.
    pub fn assign(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, expected {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
