//! Named-parameter access shared by the optimizer, checkpoints and
//! gradient checking.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Something that owns named trainable tensors.
///
/// Names are hierarchical (`"extractor.block1.conv.W"`) and the order is
/// fixed for a given structure.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// A flat list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamList<T>(pub Vec<(String, Tensor<T>)>);

impl<T: Scalar> ParamList<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl<T: Scalar> Parameterized<T> for ParamList<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.0.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.0.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }
}
