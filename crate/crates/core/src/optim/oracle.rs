use crate::nn::{self, Batch, ParamSet};

/// A minibatch objective whose data (including any adversarial perturbation)
/// is frozen, so it can be differentiated at several parameter points.
///
/// Variance-reduced estimators rely on this: the anchor gradient must be
/// taken on exactly the examples used for the current gradient.
pub trait GradientOracle {
    fn loss_and_grad(&self, params: &ParamSet) -> (f64, ParamSet);

    fn grad(&self, params: &ParamSet) -> ParamSet {
        self.loss_and_grad(params).1
    }
}

impl GradientOracle for Batch {
    fn loss_and_grad(&self, params: &ParamSet) -> (f64, ParamSet) {
        nn::loss_and_grad(params, self)
    }
}
