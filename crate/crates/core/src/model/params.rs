//! Named parameter tensors and their graph bindings.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::ModelConfig;
use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{MartError, Result};

/// Trainable tensors plus non-trainable buffers (batch-norm running
/// statistics), both in a fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub params: IndexMap<String, Tensor<f32>>,
    pub buffers: IndexMap<String, Tensor<f32>>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<f32> {
    let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| d.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl ParamStore {
    /// He-normal conv kernels, unit/zero batch-norm affine, and uniform
    /// `±1/√fan_in` linear layers.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        let mut c_in = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let fan_in = (c_in * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let data = (0..c * c_in * 9).map(|_| normal.sample(rng) as f32).collect();
            let p = format!("encoder.{i}");
            params.insert(format!("{p}.conv"), Tensor::new(vec![c, c_in, 3, 3], data)?);
            params.insert(format!("{p}.bn.gamma"), Tensor::filled(vec![c], 1.0));
            params.insert(format!("{p}.bn.beta"), Tensor::zeros(vec![c]));
            buffers.insert(format!("{p}.bn.running_mean"), Tensor::zeros(vec![c]));
            buffers.insert(format!("{p}.bn.running_var"), Tensor::filled(vec![c], 1.0));
            c_in = c;
        }
        let (de, dt) = (cfg.d_e(), cfg.d_t);
        let mut linear = |params: &mut IndexMap<String, Tensor<f32>>, name: String, i: usize, o: usize| {
            let b = 1.0 / (i as f64).sqrt();
            params.insert(format!("{name}.w"), uniform(rng, vec![i, o], b));
            params.insert(format!("{name}.b"), uniform(rng, vec![o], b));
        };
        for b in 0..cfg.blocks {
            for p in 0..cfg.pairs() {
                for side in ["whole", "part"] {
                    for proj in ["q", "k", "v"] {
                        linear(&mut params, format!("pwt.{b}.{p}.{side}.{proj}"), de, dt);
                    }
                }
                linear(&mut params, format!("pwt.{b}.{p}.out"), dt, de);
            }
        }
        linear(&mut params, "head.fc1".into(), de, cfg.head_hidden);
        linear(&mut params, "head.fc2".into(), cfg.head_hidden, cfg.contrastive_dim);
        Ok(ParamStore { params, buffers })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Binds every parameter as a trainable graph input.
    pub fn bind<'g, T: Real>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self.params.iter().map(|(k, v)| (k.clone(), g.param(v.cast()))).collect(),
        }
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen<'g, T: Real>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self.params.iter().map(|(k, v)| (k.clone(), g.constant(v.cast()))).collect(),
        }
    }

    pub fn buffers_as<T: Real>(&self) -> IndexMap<String, Tensor<T>> {
        self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }

    /// Parameter tensors cast to another element type, in store order.
    pub fn tensors_as<T: Real>(&self) -> Vec<Tensor<T>> {
        self.params.values().map(Tensor::cast).collect()
    }

    /// Folds batch statistics into the running buffers with exponential
    /// averaging; the variance is made unbiased first.
    pub fn update_running_stats<T: Real>(&mut self, stats: &[super::BatchStats<T>], momentum: f64) -> Result<()> {
        for s in stats {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for (suffix, values, factor) in [("running_mean", &s.mean, 1.0), ("running_var", &s.var, unbias)] {
                let name = format!("{}.{suffix}", s.prefix);
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| MartError::Config(format!("no buffer named {name}")))?;
                if buf.len() != values.len() {
                    return Err(MartError::dim(format!("{name}: {} statistics for {} channels", values.len(), buf.len())));
                }
                for (r, &v) in buf.data_mut().iter_mut().zip(values) {
                    *r = ((1.0 - momentum) * *r as f64 + momentum * v.as_f64() * factor) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Graph variables for a parameter set, looked up by name.
pub struct Bound<'g, T: Real> {
    vars: IndexMap<String, Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn from_vars<'a>(names: impl IntoIterator<Item = &'a str>, vars: &[Var<'g, T>]) -> Result<Self> {
        let names: Vec<&str> = names.into_iter().collect();
        if names.len() != vars.len() {
            return Err(MartError::dim(format!("{} names for {} variables", names.len(), vars.len())));
        }
        Ok(Bound {
            vars: names.into_iter().map(String::from).zip(vars.iter().copied()).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| MartError::Config(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'g, T>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn linear(&self, name: &str) -> Result<Linear<'g, T>> {
        Ok(Linear {
            w: self.get(&format!("{name}.w"))?,
            b: self.get(&format!("{name}.b"))?,
        })
    }
}

/// Affine map `x·W + b` over rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear<'g, T: Real> {
    pub w: Var<'g, T>,
    pub b: Var<'g, T>,
}

impl<'g, T: Real> Linear<'g, T> {
    pub fn apply(&self, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        x.matmul(&self.w)?.add_bias(&self.b)
    }
}
