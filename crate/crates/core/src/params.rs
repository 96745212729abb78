//! Named parameter storage shared by models, optimizer and checkpoints.

use std::ops::Index;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning [`ParamSet`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered list of named tensors. Insertion order is the canonical order
/// used by the optimizer state and the checkpoint file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every parameter of a [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(Vec<Option<Vec<f32>>>);

impl Grads {
    pub fn empty(n: usize) -> Self {
        Self(vec![None; n])
    }

    pub fn get(&self, id: usize) -> Option<&[f32]> {
        self.0.get(id).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += scale · other`, slot by slot.
    pub fn add_scaled(&mut self, other: &Grads, scale: f32) {
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            let Some(src) = src else { continue };
            let dst = dst.get_or_insert_with(|| vec![0.0; src.len()]);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    /// Number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Marks every tensor frozen (no gradient, no optimizer update) or trainable.
    pub fn set_frozen(&mut self, frozen: bool) {
        for t in &mut self.tensors {
            t.set_requires_grad(!frozen);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.tensors.iter().all(|t| !t.requires_grad())
    }

    /// Records every parameter as a leaf. With `trainable == false` all
    /// leaves are constants regardless of their own flag.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.leaf(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> Grads {
        Grads(
            bound
                .0
                .iter()
                .map(|&v| g.grad(v).map(<[f32]>::to_vec))
                .collect(),
        )
    }

    /// Replaces the tensor called `name`, keeping its trainable flag.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = self
            .position(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        let slot = &mut self.tensors[idx];
        if slot.dims() != value.dims() {
            return Err(shape_err!(
                "parameter `{name}` has dims {:?}, got {:?}",
                slot.dims(),
                value.dims()
            ));
        }
        let trainable = slot.requires_grad();
        *slot = value.with_requires_grad(trainable);
        Ok(())
    }

    /// True when names, dims and every value bit agree.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect() {
        let mut set = ParamSet::new();
        let w = set.add("w", Tensor::ones(&[2]));
        let frozen = set.add("f", Tensor::ones(&[2]).with_requires_grad(false));
        set.get_mut(frozen).set_requires_grad(false);
        let mut g = Graph::new();
        let bound = set.bind(&mut g, true);
        let prod = g.mul(bound[w], bound[frozen]).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let grads = set.collect_grads(&g, &bound);
        assert_eq!(grads.get(0).unwrap(), &[1.0, 1.0]);
        assert!(grads.get(1).is_none());
    }

    #[test]
    fn assign_checks_name_and_shape() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::zeros(&[2, 2]));
        assert!(matches!(
            set.assign("nope", Tensor::zeros(&[2, 2])),
            Err(Error::UnknownTensor(_))
        ));
        assert!(set.assign("w", Tensor::zeros(&[4])).is_err());
        set.assign("w", Tensor::ones(&[2, 2])).unwrap();
        assert!(set.by_name("w").unwrap().requires_grad());
    }

    #[test]
    fn grads_accumulate_with_scale() {
        let mut acc = Grads::empty(2);
        let one = Grads(vec![Some(vec![1.0, 2.0]), None]);
        acc.add_scaled(&one, 0.5);
        acc.add_scaled(&one, 0.5);
        assert_eq!(acc.get(0).unwrap(), &[1.0, 2.0]);
        assert!(acc.get(1).is_none());
    }
}
