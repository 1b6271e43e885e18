use super::{Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Largest number of coordinates compared per parameter tensor.
const MAX_COORDS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

fn coords(len: usize) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        (0..MAX_COORDS).map(|j| j * len / MAX_COORDS).collect()
    }
}

fn forward<'a, F>(build: &F, params: &[Tensor]) -> Result<(Graph<'a>, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph<'a>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param_owned(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::Shape("grad_check needs a scalar loss".into()));
    }
    Ok((g, ids, loss))
}

/// Compares reverse-mode gradients of `build` against fourth-order central
/// differences, `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h` with
/// `h = step`, on at most 64 evenly spaced coordinates per tensor.
/// Relative error is `|a - n| / max(1e-8, |a| + |n|)`.
///
/// `build` must be deterministic: it is evaluated twice at the unperturbed
/// point and the losses must agree bit for bit.
pub fn grad_check<'a, F>(build: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'a>, &[NodeId]) -> Result<NodeId>,
{
    let (g, ids, loss) = forward(&build, params)?;
    let base = g.value(loss).item();
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.get(id).unwrap().clone()).collect();
    drop(g);

    let (g2, _, loss2) = forward(&build, params)?;
    if g2.value(loss2).item().to_bits() != base.to_bits() {
        return Err(Error::Invalid("grad_check build is not deterministic".into()));
    }
    drop(g2);

    let mut work: Vec<Tensor> = params.to_vec();
    let eval = |work: &[Tensor]| -> Result<f64> {
        let (g, _, l) = forward(&build, work)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for t in 0..params.len() {
        for c in coords(params[t].len()) {
            let orig = work[t].values()[c];
            let mut at = |delta: f64| -> Result<f64> {
                work[t].values_mut()[c] = orig + delta;
                eval(&work)
            };
            let (up, down) = (at(step)?, at(-step)?);
            let (up2, down2) = (at(2.0 * step)?, at(-2.0 * step)?);
            work[t].values_mut()[c] = orig;

            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
            let a = analytic[t].values()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((t, c));
            }
        }
    }
    Ok(report)
}
