use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named tensor the optimizer may update.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub tensor: Tensor,
    pub name: String,
    pub trainable: bool,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            tensor,
            name: name.into(),
            trainable: true,
            decay: true,
        }
    }

    pub fn without_decay(mut self) -> Self {
        self.decay = false;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }
}

/// Ordered parameter collection with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, param: Parameter) -> Result<usize> {
        if self.params.iter().any(|p| p.name == param.name) {
            return Err(Error::Config(format!(
                "duplicate parameter name `{}`",
                param.name
            )));
        }
        self.params.push(param);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_index(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    /// Registers every parameter as a leaf of `g`, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(&p.tensor)).collect()
    }

    /// Writes `∂loss/∂param` into each trainable parameter's gradient slot.
    /// Frozen and unreachable parameters receive zeros.
    pub fn assign_grads(&mut self, bound: &[Var], grads: &Gradients) -> Result<()> {
        if bound.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound vars for {} parameters",
                bound.len(),
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(bound) {
            let g = if p.trainable {
                grads.wrt(v).into_data()
            } else {
                vec![0.0; p.tensor.len()]
            };
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut set = ParamSet::new();
        set.push(Parameter::new("w", Tensor::scalar(1.0))).unwrap();
        assert!(set.push(Parameter::new("w", Tensor::scalar(2.0))).is_err());
    }

    #[test]
    fn frozen_and_unreachable_get_zero_grads() {
        let mut set = ParamSet::new();
        set.push(Parameter::new("a", Tensor::vector(vec![1.0, 2.0])))
            .unwrap();
        set.push(Parameter::new("b", Tensor::vector(vec![3.0])).frozen())
            .unwrap();
        set.push(Parameter::new("c", Tensor::vector(vec![4.0])))
            .unwrap();
        let mut g = Graph::new();
        let vars = set.bind(&mut g);
        let sa = g.sum(vars[0]);
        let sb = g.sum(vars[1]);
        let both = g.add(sa, sb).unwrap();
        let grads = g.backward(both).unwrap();
        set.assign_grads(&vars, &grads).unwrap();
        assert_eq!(set.get("a").unwrap().tensor.grad(), Some(&[1.0, 1.0][..]));
        assert_eq!(set.get("b").unwrap().tensor.grad(), Some(&[0.0][..]));
        assert_eq!(set.get("c").unwrap().tensor.grad(), Some(&[0.0][..]));
    }
}
