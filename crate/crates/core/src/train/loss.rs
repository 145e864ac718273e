use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::{Tensor, Var};

/// Smoothing added to every Dice denominator.
pub const DICE_EPS: f64 = 1e-5;

/// One-hot encoding `[B, C, V]` of a batch of label volumes.
pub fn one_hot(targets: &[&LabelVolume], classes: usize) -> Result<Tensor> {
    let v = targets.first().map_or(0, |t| t.len());
    let mut data = vec![0.0; targets.len() * classes * v];
    for (b, t) in targets.iter().enumerate() {
        if t.len() != v {
            return Err(Error::shape("one_hot", &[v], &[t.len()]));
        }
        t.check_classes(classes)?;
        for (i, &l) in t.labels.iter().enumerate() {
            data[(b * classes + l as usize) * v + i] = 1.0;
        }
    }
    Tensor::new([targets.len(), classes, v], data)
}

/// Soft Dice loss plus voxelwise cross-entropy.
///
/// Dice is computed per sample and class (background included) as
/// `2·Σ p·g / (Σ p + Σ g + ε)` and averaged; the loss adds
/// `1 − mean Dice` to the mean cross-entropy over all voxels.
pub fn dice_ce_loss<'t>(logits: Var<'t>, targets: &[&LabelVolume]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 5 || s[0] != targets.len() {
        return Err(Error::shape("dice_ce_loss", &s, &[targets.len()]));
    }
    let (b, c) = (s[0], s[1]);
    let v: usize = s[2..].iter().product();
    if targets.iter().any(|t| t.dims != [s[2], s[3], s[4]]) {
        return Err(Error::shape("dice_ce_loss target", &s, &targets[0].dims));
    }
    let tape = logits.tape();
    let g = one_hot(targets, c)?;
    let g_sum: Vec<f64> = g.data().chunks(v).map(|r| r.iter().sum::<f64>() + DICE_EPS).collect();
    let g_sum = tape.constant(Tensor::new([b, c], g_sum)?);
    let g = tape.constant(g);

    let flat = logits.reshape([b, c, v])?;
    let p = flat.softmax(1)?;
    let inter = p.mul(g)?.sum_axis(2)?;
    let denom = p.sum_axis(2)?.add(g_sum)?;
    let dice = inter.scale(2.0)?.div(denom)?;
    let dice_loss = dice.mean_all()?.neg()?.add_scalar(1.0)?;

    let ce = flat.log_softmax(1)?.mul(g)?.sum_all()?.scale(-1.0 / (b * v) as f64)?;
    dice_loss.add(ce)
}
