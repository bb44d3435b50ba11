use super::error::{NumError, NumResult};
use super::params::ParamSet;

/// Plain SGD: `w ← w − lr·∇w`, then zeroes the gradients.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> NumResult<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NumError::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let (values, grads) = params.split_mut();
    if let Some(name) = values.keys().find(|k| !grads.contains_key(*k)) {
        return Err(NumError::MissingGradient(name.clone()));
    }
    for (name, value) in values.iter_mut() {
        let grad = grads.get_mut(name).expect("checked above");
        grad.ensure_finite("sgd_step")?;
        for (w, g) in value.data_mut().iter_mut().zip(grad.data_mut().iter_mut()) {
            *w -= lr * *g;
            *g = 0.0;
        }
    }
    Ok(())
}
