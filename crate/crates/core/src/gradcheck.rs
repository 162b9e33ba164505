//! Central-difference checks of parameter gradients through whole modules.

use tokentrack_tensor::{Coords, Var};

use crate::error::{contract, Result};
use crate::params::{Bound, ParamStore};

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Bound) -> Result<Var>,
{
    let mut b = Bound::infer(store);
    let out = f(&mut b)?;
    b.g.check_finite()?;
    Ok(b.g.value(out).item())
}

/// Max over probed parameter entries of `|autodiff − numeric| / max(1, |numeric|)`
/// for the scalar built by `f`. Parameters `f` never touches are skipped.
pub fn param_grad_check<F>(store: &ParamStore, f: F, eps: f64, coords: Coords) -> Result<f64>
where
    F: Fn(&mut Bound) -> Result<Var>,
{
    let grads = {
        let mut b = Bound::train(store);
        let out = f(&mut b)?;
        if b.g.value(out).numel() != 1 {
            return contract(format!("gradient check needs a scalar, got {:?}", b.g.shape(out)));
        }
        b.g.backward(out)?;
        b.grads()
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let n = store.get(id).numel();
        let step = match coords {
            Coords::All => 1,
            Coords::Strided(max) => n.div_ceil(max.max(1)),
        };
        for j in (0..n).step_by(step) {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&probe, &f)?;
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&probe, &f)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grads[i].data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
