use crate::numerics::{finite_diff_grad, relative_error, NumericsError, OpKind, Tape, Tensor, Var};

use super::model::{Model, ModelInput};
use super::SpatialMasks;

/// Central-difference step. Smaller steps let rounding noise dominate the
/// weakest gradients (early-layer temporal query/key weights).
pub const GRADCHECK_EPS: f64 = 1e-4;

/// Worst relative gradient error of one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub scalars: usize,
    pub max_rel_err: f64,
}

/// Compares backward gradients of a squared-error loss against central differences,
/// one parameter tensor at a time. `fault` corrupts one backward rule for negative controls.
pub fn model_gradcheck(
    model: &Model,
    input: &ModelInput,
    target: &Tensor,
    masks: &SpatialMasks,
    basis: &Tensor,
    eps: f64,
    fault: Option<OpKind>,
) -> Result<Vec<GroupError>, NumericsError> {
    let loss_of = |m: &Model, fault: Option<OpKind>| -> Result<(Tape, Vec<Var>, Var), NumericsError> {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let bp = m.params.register(&mut tape, true);
        let f = m.forward(&mut tape, &bp, input, masks, basis, None)?;
        let loss = tape.mse_loss(f.pred, target)?;
        Ok((tape, bp.vars().to_vec(), loss))
    };
    let (tape, vars, loss) = loss_of(model, fault)?;
    let grads = tape.backward(loss)?;

    let mut probe = model.clone();
    let mut report = Vec::with_capacity(vars.len());
    for (idx, id) in model.params.ids().enumerate() {
        let analytic = grads.get(vars[idx]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; model.params.get(id).len()]);
        let base = model.params.get(id).data().to_vec();
        let mut failure = None;
        let numeric = finite_diff_grad(
            |theta| {
                probe.params.get_mut(id).data_mut().copy_from_slice(theta);
                match loss_of(&probe, None) {
                    Ok((t, _, l)) => t.value(l).data()[0],
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &base,
            eps,
        );
        probe.params.get_mut(id).data_mut().copy_from_slice(&base);
        if let Some(e) = failure {
            return Err(e);
        }
        report.push(GroupError {
            name: model.params.name(id).to_string(),
            scalars: base.len(),
            max_rel_err: relative_error(&analytic, &numeric),
        });
    }
    Ok(report)
}
