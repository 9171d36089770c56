use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;
use semidense_tensor::{Float, Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<T: Float = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Params<T> {
    pub fn new() -> Self {
        Params { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> Params<U> {
        Params { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Checks that `name` exists with the given shape.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<()> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::TensorShape { name: name.into(), got: t.shape().to_vec(), want: shape.to_vec() });
        }
        Ok(())
    }
}

/// Graph under construction plus lazily bound parameter leaves.
pub struct Ctx<'p, T: Float> {
    pub g: Graph<T>,
    params: &'p Params<T>,
    vars: HashMap<String, Var>,
    trainable: bool,
}

impl<'p, T: Float> Ctx<'p, T> {
    /// With `trainable`, parameters become gradient leaves; otherwise constants.
    pub fn new(params: &'p Params<T>, trainable: bool) -> Self {
        Ctx { g: Graph::new(), params, vars: HashMap::new(), trainable }
    }

    pub fn w(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.trainable { self.g.param(t) } else { self.g.constant(t) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    /// Parameter names bound so far with their leaves.
    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn params(&self) -> &'p Params<T> {
        self.params
    }
}

pub(crate) fn normal<T: Float>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(z * std)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_name_is_reported() {
        let p = Params::<f32>::new();
        assert!(matches!(p.get("a.b"), Err(Error::MissingTensor(n)) if n == "a.b"));
    }

    #[test]
    fn binding_is_cached() {
        let mut p = Params::<f64>::new();
        p.insert("w", Tensor::ones([2]));
        let mut ctx = Ctx::new(&p, true);
        let a = ctx.w("w").unwrap();
        let b = ctx.w("w").unwrap();
        assert_eq!(a, b);
        assert!(ctx.g.requires_grad(a));
        let mut frozen = Ctx::new(&p, false);
        let c = frozen.w("w").unwrap();
        assert!(!frozen.g.requires_grad(c));
    }
}
