use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nets::{init_params, Architecture, Dims, HeadSizes, Params};
use super::train::{loss_and_grads, Targets, Weights};
use super::vocab::PAD;
use crate::error::{Error, Result};

fn tiny(arch: Architecture, seed: u64) -> Result<(Dims, Params, Vec<usize>, Targets)> {
    if !arch.is_trainable() {
        return Err(Error::Model(format!("`{arch}` has no gradients to check")));
    }
    let dims = Dims {
        embed: 2,
        hidden: 2,
        attention: 2,
        filters: 3,
        window: 3,
        task_hidden: 2,
    };
    let heads = HeadSizes {
        labels: 3,
        articles: 3,
        terms: 2,
        attributes: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(arch, &dims, 6, heads, &mut rng)?;
    for (name, p) in params.iter_mut() {
        p.mapv_inplace(|v| v + rng.gen_range(-0.5..0.5));
        if name == "embed" {
            p.row_mut(PAD).fill(0.0);
        }
    }
    let targets = Targets {
        label: 1,
        article: (arch == Architecture::TopjudgeCnn).then_some(2),
        term: (arch == Architecture::TopjudgeCnn).then_some(1),
        attributes: (arch == Architecture::FewshotAttr).then(|| vec![1.0, 0.0]),
    };
    Ok((dims, params, vec![2, 5, 3, 1, 4], targets))
}

const WEIGHTS: Weights = Weights {
    aux: 0.7,
    attribute: 1.3,
};

/// Largest relative difference between analytic gradients and central finite
/// differences (step `eps`) over every parameter entry of a tiny random model.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(arch: Architecture, eps: f64) -> Result<f64> {
    let (dims, params, ids, targets) = tiny(arch, 11)?;
    let (_, analytic) = loss_and_grads(arch, &dims, &params, &ids, &targets, WEIGHTS)?;
    let loss = |p: &Params| -> Result<f64> { Ok(loss_and_grads(arch, &dims, p, &ids, &targets, WEIGHTS)?.0) };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, value) in &params {
        for idx in 0..value.len() {
            let (r, c) = (idx / value.ncols(), idx % value.ncols());
            let base = value[[r, c]];
            probe.get_mut(name).unwrap()[[r, c]] = base + eps;
            let plus = loss(&probe)?;
            probe.get_mut(name).unwrap()[[r, c]] = base - eps;
            let minus = loss(&probe)?;
            probe.get_mut(name).unwrap()[[r, c]] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[name][[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                log::debug!("{arch} {name}[{r},{c}]: analytic {a}, numeric {numeric}");
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Gradient norm at a point where every head already outputs its target
/// with (numerically) full confidence.
pub fn zero_loss_gradient_norm(arch: Architecture) -> Result<f64> {
    let (dims, mut params, ids, targets) = tiny(arch, 12)?;
    let mut pin = |weight: &str, bias: &str, values: Vec<f64>| {
        params.get_mut(weight).unwrap().fill(0.0);
        let b = params.get_mut(bias).unwrap();
        *b = Array2::from_shape_vec((1, values.len()), values).unwrap();
    };
    let one_hot = |n: usize, i: usize| (0..n).map(|j| if j == i { 60.0 } else { 0.0 }).collect::<Vec<_>>();
    match arch {
        Architecture::AttnBilstm => pin("charge.w", "charge.b", one_hot(3, targets.label)),
        Architecture::TopjudgeCnn => {
            pin("article.out.w", "article.out.b", one_hot(3, targets.article.unwrap()));
            pin("charge.out.w", "charge.out.b", one_hot(3, targets.label));
            pin("term.out.w", "term.out.b", one_hot(2, targets.term.unwrap()));
        }
        Architecture::FewshotAttr => {
            let attr = targets.attributes.clone().unwrap();
            pin("attr.w", "attr.b", attr.iter().map(|y| if *y > 0.5 { 60.0 } else { -60.0 }).collect());
            pin("charge.w", "charge.b", one_hot(3, targets.label));
        }
        _ => unreachable!("checked by tiny()"),
    }
    let (_, grads) = loss_and_grads(arch, &dims, &params, &ids, &targets, WEIGHTS)?;
    Ok(grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for arch in Architecture::TRAINABLE {
            let err = grad_check(arch, 1e-5).unwrap();
            assert!(err < 1e-4, "{arch}: {err}");
        }
    }

    #[test]
    fn gradient_vanishes_at_zero_loss() {
        for arch in Architecture::TRAINABLE {
            assert!(zero_loss_gradient_norm(arch).unwrap() < 1e-8, "{arch}");
        }
    }

    #[test]
    fn oracle_has_nothing_to_check() {
        assert!(grad_check(Architecture::FetOracle, 1e-5).is_err());
    }
}
