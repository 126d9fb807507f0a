use super::agent::{combine, Anchor};
use super::oracle::GradientOracle;
use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::nn::{Dataset, ModelSpec, ParamSet};
use crate::sparsity::Mask;

/// SVRG: the correction with its weight fixed to one,
/// `ĝ = g_new − g_old + g̃`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SvrgState {
    pub anchor: Option<Anchor>,
}

impl SvrgState {
    pub fn snapshot(&mut self, params: &ParamSet, mask: &Mask, full_data: &Dataset) {
        self.anchor = Some(Anchor::take(params, mask, full_data));
    }

    pub fn loss_and_gradient(&self, params: &ParamSet, oracle: &dyn GradientOracle) -> (f64, ParamSet) {
        let anchor = self.anchor.as_ref().expect("snapshot before correcting gradients");
        let (loss, g_new) = oracle.loss_and_grad(params);
        let g_old = anchor.batch_grad(oracle);
        (loss, combine(g_new, &g_old, &anchor.full_grad, 1.0))
    }

    pub fn gradient(&self, params: &ParamSet, oracle: &dyn GradientOracle) -> ParamSet {
        self.loss_and_gradient(params, oracle).1
    }

    pub(crate) fn save(&self, ck: &mut Checkpoint) {
        ck.put_u64("svrg.has_anchor", self.anchor.is_some() as u64);
        if let Some(a) = &self.anchor {
            a.save(ck, "svrg.anchor");
        }
    }

    pub(crate) fn load(&mut self, ck: &Checkpoint, spec: &ModelSpec) -> Result<()> {
        self.anchor = match ck.u64("svrg.has_anchor")? {
            0 => None,
            _ => Some(Anchor::load(ck, "svrg.anchor", spec)?),
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, BlobsSpec};
    use crate::optim::{AgentConfig, AgentState};
    use crate::rng::RngStream;

    #[test]
    fn at_anchor_returns_full_gradient_and_matches_unit_weight_agent() {
        let spec = ModelSpec::mlp(2, &[3], 2).unwrap();
        let params = init_params(&spec, &mut RngStream::new(8));
        let (data, _) =
            BlobsSpec { classes: 2, dim: 2, train_size: 12, test_size: 2, separation: 0.5, noise: 0.2, seed: 2 }
                .generate()
                .unwrap();
        let mask = Mask::dense(&spec);
        let mut svrg = SvrgState::default();
        svrg.snapshot(&params, &mask, &data);
        let batch = data.batch(&[0, 4, 9]);
        assert_eq!(svrg.gradient(&params, &batch), svrg.anchor.as_ref().unwrap().full_grad);

        let mut agent =
            AgentState::new(AgentConfig { gamma: 1.0, fixed_weight: Some(1.0), ..AgentConfig::default() }, 1);
        agent.snapshot(&params, &mask, &data, &data, 0, false).unwrap();
        let moved = params.map(|x| 0.8 * x - 0.05);
        assert_eq!(svrg.gradient(&moved, &batch), agent.corrected_gradient(&moved, &batch));
    }
}
