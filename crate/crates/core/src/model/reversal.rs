use crate::autograd::{Backward, Graph, NodeId, Scalar, Tensor};
use crate::error::{ensure, Result};

struct GradReverse<T> {
    lambda: T,
}

impl<T: Scalar> Backward<T> for GradReverse<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let factor = -self.lambda;
        vec![Some(grad.map(|g| factor * g))]
    }
}

/// Identity on the forward pass; scales incoming gradients by `-lambda`
/// on the way back.
pub fn grad_reverse<T: Scalar>(g: &mut Graph<T>, z: NodeId, lambda: f64) -> Result<NodeId> {
    ensure!(
        lambda >= 0.0 && lambda.is_finite(),
        Input,
        "gradient reversal weight must be finite and nonnegative, got {}",
        lambda
    );
    let value = g.value(z).clone();
    Ok(g.record(&[z], value, GradReverse { lambda: T::from_f64c(lambda) }))
}
