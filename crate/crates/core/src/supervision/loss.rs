use crate::error::{Error, Result};
use crate::map::Map2;

/// Mean squared error between a predicted mask and its target, with the
/// gradient `2(M̂ − w)/N` with respect to the prediction.
pub fn shadow_loss(pred: &Map2<f64>, target: &Map2<f64>) -> Result<(f64, Map2<f64>)> {
    pred.check_shape(target)?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = Map2 {
        width: pred.width,
        height: pred.height,
        data: pred
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| {
                let r = p - t;
                loss += r * r;
                2.0 * r / n
            })
            .collect(),
    };
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("shadow loss is {loss}")));
    }
    Ok((loss, grad))
}
