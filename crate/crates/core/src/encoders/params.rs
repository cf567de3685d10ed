use std::cell::RefCell;
use std::collections::BTreeMap;

use super::config::ModelConfig;
use crate::error::{CloverError, Result};
use crate::substrate::{Gradients, Real, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Named parameter tensors, kept in sorted name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// Initializes every listed parameter, drawing in list order.
    pub fn init(specs: &[(String, Vec<usize>, Init)], rng: &mut Rng) -> Self {
        let mut store = ParamStore::default();
        store.extend_init(specs, rng);
        store
    }

    pub fn extend_init(&mut self, specs: &[(String, Vec<usize>, Init)], rng: &mut Rng) {
        for (name, shape, init) in specs {
            let count: usize = shape.iter().product();
            let data = match init {
                Init::Normal(std) => (0..count).map(|_| T::c(rng.normal() * std)).collect(),
                Init::Zeros => vec![T::zero(); count],
                Init::Ones => vec![T::one(); count],
            };
            self.tensors.insert(
                name.clone(),
                Tensor::new(shape.clone(), data).expect("spec shape"),
            );
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a String, &'a Tensor<T>)> {
        self.tensors
            .iter()
            .filter(move |(n, _)| n.starts_with(prefix))
    }

    /// Flattens all parameters (sorted by name) into one vector.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(CloverError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for t in self.tensors.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Graph<'p, T: Real> {
    tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: RefCell<BTreeMap<String, usize>>,
    frozen: Vec<String>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: RefCell::new(BTreeMap::new()),
            frozen: Vec::new(),
        }
    }

    /// Parameters under any of these prefixes enter the tape as constants.
    pub fn with_frozen(mut self, prefixes: &[&str]) -> Self {
        self.frozen = prefixes.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Leaf for a named parameter; repeated calls return the same leaf.
    pub fn param(&self, name: &str) -> Var<'_, T> {
        if let Some(&id) = self.bound.borrow().get(name) {
            return self.tape.handle(id);
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = if self.is_frozen(name) {
            self.tape.constant(value)
        } else {
            self.tape.var(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), v.id());
        v
    }

    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.tape.var(value)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.tape.constant(value)
    }

    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound, trainable parameter.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .map(|(name, &id)| {
                let v = self.tape.handle(id);
                (name.clone(), grads.wrt(v))
            })
            .collect()
    }
}

/// Parameter list for the three encoders, projections and MLM head.
pub fn model_param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.dim;
    let std = c.init_std;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

    push(
        "video.patch.weight".into(),
        vec![c.patch_dim(), d],
        Init::Normal(std),
    );
    push("video.patch.bias".into(), vec![d], Init::Zeros);
    push("video.mask_token".into(), vec![1, d], Init::Normal(std));
    push(
        "video.pos_space".into(),
        vec![c.spatial(), d],
        Init::Normal(std),
    );
    push(
        "video.pos_time".into(),
        vec![c.frames, d],
        Init::Normal(std),
    );
    push(
        "text.tok_embed".into(),
        vec![c.vocab_size, d],
        Init::Normal(std),
    );
    push(
        "text.pos".into(),
        vec![c.max_text_len, d],
        Init::Normal(std),
    );
    push("fusion.type_embed".into(), vec![2, d], Init::Normal(std));

    for (enc, layers) in [
        ("video", c.video_layers),
        ("text", c.text_layers),
        ("fusion", c.fusion_layers),
    ] {
        for l in 0..layers {
            let p = format!("{enc}.blocks.{l}");
            for ln in ["ln1", "ln2"] {
                push(format!("{p}.{ln}.gain"), vec![d], Init::Ones);
                push(format!("{p}.{ln}.bias"), vec![d], Init::Zeros);
            }
            for proj in ["q", "k", "v", "o"] {
                push(
                    format!("{p}.attn.{proj}.weight"),
                    vec![d, d],
                    Init::Normal(std),
                );
                push(format!("{p}.attn.{proj}.bias"), vec![d], Init::Zeros);
            }
            push(
                format!("{p}.ffn.up.weight"),
                vec![d, d * c.ffn_mult],
                Init::Normal(std),
            );
            push(
                format!("{p}.ffn.up.bias"),
                vec![d * c.ffn_mult],
                Init::Zeros,
            );
            push(
                format!("{p}.ffn.down.weight"),
                vec![d * c.ffn_mult, d],
                Init::Normal(std),
            );
            push(format!("{p}.ffn.down.bias"), vec![d], Init::Zeros);
        }
        push(format!("{enc}.ln_f.gain"), vec![d], Init::Ones);
        push(format!("{enc}.ln_f.bias"), vec![d], Init::Zeros);
    }
    for head in ["video", "text", "fusion"] {
        push(
            format!("proj.{head}.weight"),
            vec![d, d],
            Init::Normal(1.0 / (d as f64).sqrt()),
        );
    }
    push("mlm.dense.weight".into(), vec![d, d], Init::Normal(std));
    push("mlm.dense.bias".into(), vec![d], Init::Zeros);
    push("mlm.ln.gain".into(), vec![d], Init::Ones);
    push("mlm.ln.bias".into(), vec![d], Init::Zeros);
    push(
        "mlm.decoder.weight".into(),
        vec![d, c.vocab_size],
        Init::Normal(std),
    );
    push("mlm.decoder.bias".into(), vec![c.vocab_size], Init::Zeros);
    specs
}
