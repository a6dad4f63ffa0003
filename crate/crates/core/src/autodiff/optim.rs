use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Plain SGD: `p ← p − lr·grad`, then the gradient is zeroed.
///
/// Every parameter must carry a gradient; on error nothing is updated.
pub fn sgd_step<'a, I>(params: I, lr: f64) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
{
    let params: Vec<_> = params.into_iter().collect();
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    for (_, p) in params {
        let grad = p.grad.take().expect("checked above");
        for (w, g) in p.data_mut().iter_mut().zip(&grad) {
            *w -= lr * g;
        }
        p.grad = Some(vec![0.0; grad.len()]);
    }
    Ok(())
}
