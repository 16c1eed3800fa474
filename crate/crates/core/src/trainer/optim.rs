use crate::backbone::ParamSet;
use crate::error::Result;

use super::config::TrainConfig;

/// SGD with momentum and L2 weight decay:
/// `v ← momentum·v + grad + weight_decay·p`, then `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    velocity: &mut ParamSet,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    params.check_same_layout(grads)?;
    params.check_same_layout(velocity)?;
    let grads = grads.tensors();
    let mut vel: Vec<Vec<f64>> = velocity.tensors().iter().map(|t| t.data().to_vec()).collect();
    params.map_in_place(|i, p| {
        for ((pv, g), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(vel[i].iter_mut()) {
            *v = momentum * *v + g + weight_decay * *pv;
            *pv -= lr * *v;
        }
    });
    velocity.map_in_place(|i, v| v.data_mut().copy_from_slice(&vel[i]));
    Ok(())
}

/// Piecewise-constant schedule: the base rate is divided by 10 at each drop
/// epoch that has been reached.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let drops = config.lr_drop_epochs.iter().filter(|&&e| epoch >= e).count();
    config.lr / 10f64.powi(drops as i32)
}
