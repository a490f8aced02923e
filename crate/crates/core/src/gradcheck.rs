//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Step suited to `f32` graphs.
pub const H_F32: f64 = 1e-3;
/// Step suited to `f64` graphs.
pub const H_F64: f64 = 1e-5;

fn eval<S, F>(f: &F, values: &[Vec<S>], shapes: &[Vec<usize>], backward: bool) -> Result<(S, Vec<Vec<S>>)>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::<S>::new();
    let ids = values
        .iter()
        .zip(shapes)
        .map(|(v, s)| g.input(s, v.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &ids)?;
    if g.value(out).len() != 1 {
        return Err(Error::CheckPrecondition(format!(
            "function must be scalar-valued, got shape {:?}",
            g.shape(out)
        )));
    }
    let y = g.value(out)[0];
    if !backward {
        return Ok((y, Vec::new()));
    }
    g.backward(out)?;
    let grads = ids
        .iter()
        .zip(values)
        .map(|(&id, v)| g.grad(id).map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); v.len()]))
        .collect();
    Ok((y, grads))
}

/// Returns the largest elementwise relative error between the analytic
/// gradient of `f` and a central difference with step `h`, over every element
/// of every tensor in `params`. The relative error denominator is
/// `max(|analytic|, |numeric|, 1e-6)`.
///
/// `f` receives one leaf per parameter, in order, and must return a scalar
/// node. It must be deterministic (dropout disabled).
pub fn grad_check<S, F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::CheckPrecondition(format!("step {h} must be positive")));
    }
    let shapes: Vec<Vec<usize>> = params.iter().map(|t| t.shape().to_vec()).collect();
    let mut values: Vec<Vec<S>> = params
        .iter()
        .map(|t| t.data().iter().map(|&v| S::of_f32(v)).collect())
        .collect();

    let (y0, analytic) = eval(&f, &values, &shapes, true)?;
    let (y1, _) = eval(&f, &values, &shapes, false)?;
    if y0 != y1 {
        return Err(Error::CheckPrecondition(format!(
            "repeated forward passes differ ({:?} vs {:?})",
            y0, y1
        )));
    }
    if !y0.is_finite() {
        return Err(Error::CheckPrecondition("non-finite function value".into()));
    }

    let hs = S::of_f64(h);
    let mut worst = 0.0f64;
    for p in 0..values.len() {
        for i in 0..values[p].len() {
            let orig = values[p][i];
            values[p][i] = orig + hs;
            let (plus, _) = eval(&f, &values, &shapes, false)?;
            values[p][i] = orig - hs;
            let (minus, _) = eval(&f, &values, &shapes, false)?;
            values[p][i] = orig;
            // divide by the realized step, which may differ from h after rounding
            let step = (orig + hs).as_f64() - (orig - hs).as_f64();
            let numeric = (plus.as_f64() - minus.as_f64()) / step;
            let a = analytic[p][i].as_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::normal("w", &[6], 1.0, &mut rng);
        let x = Tensor::normal("x", &[6], 1.0, &mut rng);
        let err = grad_check::<f64, _>(
            |g, ids| {
                let xc = g.constant(&x);
                let p = g.mul(ids[0], xc)?;
                Ok(g.sum(p))
            },
            &[w.clone()],
            H_F64,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");

        let err32 = grad_check::<f32, _>(
            |g, ids| {
                let xc = g.constant(&x);
                let p = g.mul(ids[0], xc)?;
                Ok(g.sum(p))
            },
            &[w],
            H_F32,
        )
        .unwrap();
        assert!(err32 <= 1e-2, "{err32}");
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let w = Tensor::filled("w", &[2], 1.0);
        let res = grad_check::<f64, _>(
            |g, ids| {
                calls.set(calls.get() + 1.0);
                let c = g.input(&[2], vec![calls.get(); 2], false)?;
                let p = g.mul(ids[0], c)?;
                Ok(g.sum(p))
            },
            &[w],
            H_F64,
        );
        assert!(matches!(res, Err(Error::CheckPrecondition(_))));
    }

    #[test]
    fn detects_wrong_gradient_magnitude() {
        // relu at exactly a kink is the classic place analytic and numeric disagree
        let w = Tensor::new("w", &[1], vec![0.0]).unwrap();
        let err = grad_check::<f64, _>(
            |g, ids| {
                let r = g.relu(ids[0]);
                Ok(g.sum(r))
            },
            &[w],
            H_F64,
        )
        .unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn every_primitive_over_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::normal("a", &[3, 4], 1.0, &mut rng);
            let b = Tensor::normal("b", &[4, 5], 1.0, &mut rng);
            let bias = Tensor::normal("bias", &[5], 1.0, &mut rng);
            let gain = Tensor::normal("gain", &[5], 1.0, &mut rng);
            let beta = Tensor::normal("beta", &[5], 1.0, &mut rng);
            let err = grad_check::<f64, _>(
                |g, ids| {
                    let h = g.linear(ids[0], ids[1], ids[2])?;
                    let h = g.layer_norm(h, ids[3], ids[4], 1e-5)?;
                    let t = g.transpose(h)?;
                    let sq = g.matmul(h, t)?;
                    let s = g.softmax(sq);
                    let r = g.relu(h);
                    let sl = g.slice_cols(r, 1, 3)?;
                    let sl2 = g.slice_cols(h, 0, 2)?;
                    let cat = g.concat_cols(&[sl, sl2])?;
                    let m = g.matmul(s, cat)?;
                    let sc = g.scale(m, 0.7);
                    let picked = g.gather(sc, &[2, 0, 2])?;
                    let pair = g.slice_cols(picked, 0, 2)?;
                    g.cross_entropy(pair, &[1, 0, 1])
                },
                &[a, b, bias, gain, beta],
                H_F64,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }
}
