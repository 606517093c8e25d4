//! Activations, normalization, dropout and loss primitives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{make_output, Element, Tensor};
use crate::error::{Error, Result};

pub fn relu<F: Element>(a: &Tensor<F>) -> Tensor<F> {
    let data: Vec<F> = a
        .data()
        .iter()
        .map(|&x| if x > F::zero() { x } else { F::zero() })
        .collect();
    let ac = a.clone();
    make_output(a.shape().to_vec(), data, vec![a.clone()], move |g| {
        let av = ac.data();
        ac.grad_write(|ga| {
            for i in 0..g.len() {
                if av[i] > F::zero() {
                    ga[i] += g[i];
                }
            }
        });
    })
}

/// GELU, tanh approximation.
pub fn gelu<F: Element>(a: &Tensor<F>) -> Tensor<F> {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044_715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let gelu_fwd = move |x: F| half * x * (F::one() + (c * (x + k * x * x * x)).tanh());
    let data: Vec<F> = a.data().iter().map(|&x| gelu_fwd(x)).collect();
    let ac = a.clone();
    make_output(a.shape().to_vec(), data, vec![a.clone()], move |g| {
        let av = ac.data();
        ac.grad_write(|ga| {
            for i in 0..g.len() {
                let x = av[i];
                let t = (c * (x + k * x * x * x)).tanh();
                let d = half * (F::one() + t)
                    + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x);
                ga[i] += g[i] * d;
            }
        });
    })
}

/// Softmax along the last axis.
pub fn softmax_last<F: Element>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let nd = a.shape().len();
    if nd == 0 {
        return Err(Error::InvalidAxis {
            op: "softmax",
            axis: 0,
            shape: vec![],
        });
    }
    let cols = a.shape()[nd - 1];
    if cols == 0 {
        return Err(Error::InvalidAxis {
            op: "softmax",
            axis: nd - 1,
            shape: a.shape().to_vec(),
        });
    }
    let av = a.data();
    let mut data = vec![F::zero(); a.numel()];
    for (row_in, row_out) in av.chunks(cols).zip(data.chunks_mut(cols)) {
        let max = row_in.iter().copied().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for (o, &x) in row_out.iter_mut().zip(row_in) {
            let e = (x - max).exp();
            *o = e;
            denom += e;
        }
        for o in row_out.iter_mut() {
            *o = *o / denom;
        }
    }
    drop(av);

    let probs = data.clone();
    let ac = a.clone();
    Ok(make_output(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        move |g| {
            ac.grad_write(|ga| {
                for r in 0..g.len() / cols {
                    let y = &probs[r * cols..(r + 1) * cols];
                    let go = &g[r * cols..(r + 1) * cols];
                    let dot: F = y.iter().zip(go).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += y[j] * (go[j] - dot);
                    }
                }
            });
        },
    ))
}

/// Layer normalization over the last axis with learnable gain and bias.
pub fn layer_norm<F: Element>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>> {
    let nd = x.shape().len();
    if nd == 0 {
        return Err(Error::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            shape: vec![],
        });
    }
    let d = x.shape()[nd - 1];
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let epsf = F::from_f64(eps);
    let dn = F::from_f64(d as f64);

    let xv = x.data();
    let gv = gain.data();
    let bv = bias.data();
    let rows = x.numel() / d;
    let mut data = vec![F::zero(); x.numel()];
    let mut normalized = vec![F::zero(); x.numel()];
    let mut inv_std = vec![F::zero(); rows];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
        let istd = F::one() / (var + epsf).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            normalized[r * d + j] = xh;
            data[r * d + j] = gv[j] * xh + bv[j];
        }
    }
    drop(xv);
    drop(gv);
    drop(bv);

    let (xc, gc, bc) = (x.clone(), gain.clone(), bias.clone());
    Ok(make_output(
        x.shape().to_vec(),
        data,
        vec![x.clone(), gain.clone(), bias.clone()],
        move |g| {
            let gv = gc.data();
            bc.grad_write(|gb| {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            });
            gc.grad_write(|gg| {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * normalized[r * d + j];
                    }
                }
            });
            xc.grad_write(|gx| {
                for r in 0..rows {
                    let xh = &normalized[r * d..(r + 1) * d];
                    let go = &g[r * d..(r + 1) * d];
                    // dxh_j = g_j * gain_j; dx = (dxh - mean(dxh) - xh * mean(dxh .* xh)) * inv_std
                    let mut mean_dxh = F::zero();
                    let mut mean_dxh_xh = F::zero();
                    for j in 0..d {
                        let dxh = go[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh = mean_dxh / dn;
                    mean_dxh_xh = mean_dxh_xh / dn;
                    for j in 0..d {
                        let dxh = go[j] * gv[j];
                        gx[r * d + j] += (dxh - mean_dxh - xh[j] * mean_dxh_xh) * inv_std[r];
                    }
                }
            });
        },
    ))
}

/// Inverted dropout. In eval mode (or at rate 0) this is the identity and the
/// input tensor is returned unchanged.
pub fn dropout<F: Element>(
    x: &Tensor<F>,
    rate: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig {
            field: "dropout".into(),
            reason: format!("rate {rate} not in [0, 1)"),
        });
    }
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let inv = F::from_f64(1.0 / keep);
    let mask: Vec<F> = (0..x.numel())
        .map(|_| {
            if rng.gen::<f64>() < keep {
                inv
            } else {
                F::zero()
            }
        })
        .collect();
    let data: Vec<F> = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| v * m)
        .collect();
    let xc = x.clone();
    Ok(make_output(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        move |g| {
            xc.grad_write(|gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            });
        },
    ))
}

/// Forward-pass mode: training draws dropout masks from the run's dedicated
/// RNG, evaluation is deterministic.
pub enum Phase<'a> {
    Train { dropout_rng: &'a mut ChaCha8Rng },
    Eval,
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train { .. })
    }
}

/// Dropout gated on the phase; identity in eval mode.
pub fn dropout_phase<F: Element>(x: &Tensor<F>, rate: f64, phase: &mut Phase) -> Result<Tensor<F>> {
    match phase {
        Phase::Train { dropout_rng } => dropout(x, rate, true, dropout_rng),
        Phase::Eval => Ok(x.clone()),
    }
}

/// L2-normalize each row of a `[n, d]` matrix.
pub fn l2_normalize_rows<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "l2_normalize",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let floor = F::from_f64(1e-12);
    let xv = x.data();
    let mut data = vec![F::zero(); n * d];
    let mut inv_norms = vec![F::zero(); n];
    for r in 0..n {
        let row = &xv[r * d..(r + 1) * d];
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(floor);
        inv_norms[r] = F::one() / norm;
        for j in 0..d {
            data[r * d + j] = row[j] * inv_norms[r];
        }
    }
    drop(xv);

    let normalized = data.clone();
    let xc = x.clone();
    Ok(make_output(
        vec![n, d],
        data,
        vec![x.clone()],
        move |g| {
            xc.grad_write(|gx| {
                for r in 0..n {
                    let y = &normalized[r * d..(r + 1) * d];
                    let go = &g[r * d..(r + 1) * d];
                    let dot: F = y.iter().zip(go).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..d {
                        gx[r * d + j] += (go[j] - y[j] * dot) * inv_norms[r];
                    }
                }
            });
        },
    ))
}

fn check_binary_targets(targets: &[f64]) -> Result<()> {
    for (row, &t) in targets.iter().enumerate() {
        if t != 0.0 && t != 1.0 {
            return Err(Error::InvalidLabel {
                label: t as u8,
                row,
            });
        }
    }
    Ok(())
}

/// Mean binary cross-entropy from logits, log-sum-exp stabilized.
pub fn bce_with_logits<F: Element>(logits: &Tensor<F>, targets: &[f64]) -> Result<Tensor<F>> {
    if logits.numel() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "bce_with_logits",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    check_binary_targets(targets)?;
    let n = targets.len();
    let lv = logits.data();
    // loss_i = max(z, 0) - z*y + ln(1 + exp(-|z|))
    let mut total = 0.0;
    for (&z, &y) in lv.iter().zip(targets) {
        let z = z.into_f64();
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    drop(lv);
    let mean = F::from_f64(total / n as f64);

    let lc = logits.clone();
    let targets_owned: Vec<f64> = targets.to_vec();
    Ok(make_output(
        vec![],
        vec![mean],
        vec![logits.clone()],
        move |g| {
            let go = g[0].into_f64() / n as f64;
            let lv = lc.data();
            lc.grad_write(|gl| {
                for i in 0..n {
                    let z = lv[i].into_f64();
                    let sigma = if z >= 0.0 {
                        1.0 / (1.0 + (-z).exp())
                    } else {
                        let e = z.exp();
                        e / (1.0 + e)
                    };
                    gl[i] += F::from_f64(go * (sigma - targets_owned[i]));
                }
            });
        },
    ))
}

/// Mean categorical cross-entropy from logits `[n, classes]`.
pub fn ce_with_logits<F: Element>(logits: &Tensor<F>, targets: &[usize]) -> Result<Tensor<F>> {
    if logits.shape().len() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "ce_with_logits",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    for (row, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::InvalidAxis {
                op: "ce_with_logits",
                axis: row,
                shape: vec![n, c],
            });
        }
    }
    let lv = logits.data();
    let mut probs = vec![0.0f64; n * c];
    let mut total = 0.0;
    for r in 0..n {
        let row = &lv[r * c..(r + 1) * c];
        let max = row
            .iter()
            .map(|v| v.into_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j].into_f64() - max).exp();
            probs[r * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            probs[r * c + j] /= denom;
        }
        let lse = max + denom.ln();
        total += lse - row[targets[r]].into_f64();
    }
    drop(lv);
    let mean = F::from_f64(total / n as f64);

    let lc = logits.clone();
    let targets_owned: Vec<usize> = targets.to_vec();
    Ok(make_output(
        vec![],
        vec![mean],
        vec![logits.clone()],
        move |g| {
            let go = g[0].into_f64() / n as f64;
            lc.grad_write(|gl| {
                for r in 0..n {
                    for j in 0..c {
                        let indicator = if j == targets_owned[r] { 1.0 } else { 0.0 };
                        gl[r * c + j] += F::from_f64(go * (probs[r * c + j] - indicator));
                    }
                }
            });
        },
    ))
}

/// `sum_k w_k * parts_k` for scalar parts. Gradient flows to both the weight
/// vector and every part.
pub fn weighted_sum<F: Element>(weights: &Tensor<F>, parts: &[Tensor<F>]) -> Result<Tensor<F>> {
    if weights.numel() != parts.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_sum",
            lhs: weights.shape().to_vec(),
            rhs: vec![parts.len()],
        });
    }
    for p in parts {
        if p.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: p.shape().to_vec(),
                rhs: vec![1],
            });
        }
    }
    let wv: Vec<F> = weights.data().clone();
    let pv: Vec<F> = parts.iter().map(Tensor::value).collect();
    let total: F = wv.iter().zip(&pv).map(|(&w, &p)| w * p).sum();

    let mut inputs = vec![weights.clone()];
    inputs.extend(parts.iter().cloned());
    let wc = weights.clone();
    let part_handles: Vec<Tensor<F>> = parts.to_vec();
    Ok(make_output(vec![], vec![total], inputs, move |g| {
        let go = g[0];
        wc.grad_write(|gw| {
            for (k, &p) in pv.iter().enumerate() {
                gw[k] += go * p;
            }
        });
        for (k, part) in part_handles.iter().enumerate() {
            part.grad_write(|gp| {
                gp[0] += go * wv[k];
            });
        }
    }))
}
