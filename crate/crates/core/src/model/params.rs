//! Named parameter tensors and their initialization.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use xvwm_tensor::{Graph, Real, Tensor, Var};

use super::config::ModelConfig;
use crate::error::{Result, XvwmError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Xavier,
    Normal(f64),
    Zeros,
}

/// Ordered parameter layout for `cfg`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.hidden_dim;
    let pd = cfg.patch_dim();
    let f = cfg.freq_dim;
    let mut s: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let lin = |s: &mut Vec<_>, name: &str, i: usize, o: usize, w: Init| {
        s.push((format!("{name}.w"), vec![i, o], w));
        s.push((format!("{name}.b"), vec![o], Init::Zeros));
    };
    lin(&mut s, "patch_in", pd, d, Init::Xavier);
    lin(&mut s, "ctx_in", pd, d, Init::Xavier);
    s.push(("temporal".into(), vec![cfg.context_len, d], Init::Normal(0.02)));
    for name in ["t_mlp", "rt_mlp"] {
        lin(&mut s, &format!("{name}.fc1"), f, d, Init::Normal(0.02));
        lin(&mut s, &format!("{name}.fc2"), d, d, Init::Normal(0.02));
    }
    lin(&mut s, "act_mlp.fc1", 4, d, Init::Normal(0.02));
    lin(&mut s, "act_mlp.fc2", d, d, Init::Normal(0.02));
    s.push(("view_table".into(), vec![cfg.views.len(), d], Init::Normal(0.02)));
    for l in 0..cfg.layers {
        let p = format!("blocks.{l}");
        lin(&mut s, &format!("{p}.ada"), d, 9 * d, Init::Zeros);
        for att in ["self", "cross"] {
            for m in ["q", "k", "v", "o"] {
                lin(&mut s, &format!("{p}.{att}.{m}"), d, d, Init::Xavier);
            }
        }
        lin(&mut s, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d, Init::Xavier);
        lin(&mut s, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d, Init::Xavier);
    }
    lin(&mut s, "final.ada", d, 2 * d, Init::Zeros);
    lin(&mut s, "head", d, pd, Init::Normal(0.02));
    s
}

/// Parameters in a fixed order with name lookup.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    names: Arc<Vec<String>>,
    index: Arc<HashMap<String, usize>>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let specs = param_specs(cfg);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| T::of(d.sample(rng))).collect()
                }
                Init::Xavier => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let d = Uniform::new_inclusive(-a, a);
                    (0..n).map(|_| T::of(d.sample(rng))).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(&shape, data).expect("shape matches data"));
        }
        Self::from_parts(names, tensors)
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            names: Arc::new(names),
            index: Arc::new(index),
            tensors,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            index: self.index.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Check names and shapes against the layout for `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.len() {
            return Err(XvwmError::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.len()
            )));
        }
        for ((name, shape, _), (have_name, t)) in specs.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(XvwmError::Config(format!(
                    "parameter {have_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Put every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Parameter handles on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    index: Arc<HashMap<String, usize>>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("no parameter named {name}"),
        }
    }
}
