//! Reverse-mode gradients of the mean next-token cross-entropy through the
//! exact forward used for inference.

use num_traits::Float;

use crate::engine::{Control, Pass, Weights};
use crate::error::{Error, Result};
use crate::kernels::{self, c, RowStats};
use crate::model::NormKind;

fn norm_backward<T: Float>(
    kind: NormKind,
    x: &[T],
    d: usize,
    stats: &[RowStats<T>],
    gamma: Option<&[T]>,
    dy: &[T],
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) -> Vec<T> {
    if kind == NormKind::Identity {
        return dy.to_vec();
    }
    let gamma = gamma.expect("gamma");
    let dgamma = dgamma.expect("dgamma slot");
    let mut dbeta = dbeta;
    let n = c::<T>(d as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); d];
    let mut g = vec![T::zero(); d];
    for (r, st) in stats.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        for j in 0..d {
            xhat[j] = (xr[j] - st.mean) * st.rstd;
            dgamma[j] = dgamma[j] + dyr[j] * xhat[j];
            g[j] = dyr[j] * gamma[j];
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for j in 0..d {
                db[j] = db[j] + dyr[j];
            }
        }
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for j in 0..d {
            mean_g = mean_g + g[j];
            mean_gx = mean_gx + g[j] * xhat[j];
        }
        mean_g = mean_g / n;
        mean_gx = mean_gx / n;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] = match kind {
                NormKind::LayerNorm => st.rstd * (g[j] - mean_g - xhat[j] * mean_gx),
                _ => st.rstd * (g[j] - xhat[j] * mean_gx),
            };
        }
    }
    dx
}

/// Borrows up to two disjoint mutable tensor slots from the gradient buffer.
fn two_slots<'a, T>(
    grads: &'a mut [T],
    a: Option<std::ops::Range<usize>>,
    b: Option<std::ops::Range<usize>>,
) -> (Option<&'a mut [T]>, Option<&'a mut [T]>) {
    match (a, b) {
        (Some(ra), Some(rb)) => {
            assert!(ra.end <= rb.start, "slots must be ordered");
            let (lo, hi) = grads.split_at_mut(rb.start);
            (Some(&mut lo[ra]), Some(&mut hi[..rb.end - rb.start]))
        }
        (Some(ra), None) => (Some(&mut grads[ra]), None),
        (None, Some(rb)) => (None, Some(&mut grads[rb])),
        (None, None) => (None, None),
    }
}

/// Summed (not averaged) cross-entropy of one sequence and its gradient,
/// scaled by `1/denom`, accumulated into `grads`.
fn sequence_grads<T: Float>(w: &Weights<'_, T>, seq: &[usize], denom: T, grads: &mut [T]) -> Result<T> {
    let cfg = w.cfg;
    let layout = w.layout;
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let dff = cfg.d_ff();
    let heads = cfg.n_heads;
    let dh = cfg.d_head;
    let scale = c::<T>(1.0 / (dh as f64).sqrt());

    let inputs = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    let n = inputs.len();
    let positions: Vec<usize> = (0..n).collect();
    let mut pass = Pass::new(*w, Control::causal());
    let out = pass.run(inputs, &positions, true)?;
    let cache = out.cache.expect("recorded");

    // loss and dlogits
    let mut loss = T::zero();
    let mut dlogits = out.logits.clone();
    for r in 0..n {
        let row = &mut dlogits[r * v..(r + 1) * v];
        let mut max = T::neg_infinity();
        for &z in row.iter() {
            if z > max {
                max = z;
            }
        }
        let mut sum = T::zero();
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            sum = sum + *z;
        }
        let t = targets[r];
        let logit_t = out.logits[r * v + t];
        loss = loss + (sum.ln() + max - logit_t);
        for z in row.iter_mut() {
            *z = *z / sum / denom;
        }
        row[t] = row[t] - T::one() / denom;
    }

    // unembedding
    let unembed = w.get(layout.unembed);
    let f = &cache.final_out;
    kernels::matmul_at_acc(&dlogits, n, v, f, d, layout.get_mut(grads, layout.unembed));
    let mut df = vec![T::zero(); n * d];
    kernels::matmul_acc(&dlogits, n, v, unembed, d, &mut df);

    let mut dx = if cfg.use_final_norm && cfg.norm_kind != NormKind::Identity {
        let rg = layout.final_g.map(|i| layout.spec(i).range());
        let rb = layout.final_b.map(|i| layout.spec(i).range());
        let (dg, db) = two_slots(grads, rg, rb);
        norm_backward(
            cfg.norm_kind,
            &cache.final_in,
            d,
            &cache.final_stats,
            w.get_opt(layout.final_g),
            &df,
            dg,
            db,
        )
    } else {
        df
    };

    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        let slots = &layout.layers[l];
        let x_in = &out.states[l];

        // MLP
        let dy = &dx;
        {
            let db_out = layout.get_mut(grads, slots.b_out);
            for r in 0..n {
                for j in 0..d {
                    db_out[j] = db_out[j] + dy[r * d + j];
                }
            }
        }
        kernels::matmul_at_acc(&lc.g, n, dff, dy, d, layout.get_mut(grads, slots.w_out));
        let mut dg = vec![T::zero(); n * dff];
        kernels::matmul_bt_acc(dy, n, d, w.get(slots.w_out), dff, &mut dg);
        let du: Vec<T> = dg
            .iter()
            .zip(&lc.u)
            .map(|(&g, &u)| g * kernels::gelu_grad(u))
            .collect();
        {
            let db_in = layout.get_mut(grads, slots.b_in);
            for r in 0..n {
                for j in 0..dff {
                    db_in[j] = db_in[j] + du[r * dff + j];
                }
            }
        }
        kernels::matmul_at_acc(&lc.m, n, d, &du, dff, layout.get_mut(grads, slots.w_in));
        let mut dm = vec![T::zero(); n * d];
        kernels::matmul_bt_acc(&du, n, dff, w.get(slots.w_in), d, &mut dm);
        let (dg2, db2) = two_slots(
            grads,
            slots.norm2_g.map(|i| layout.spec(i).range()),
            slots.norm2_b.map(|i| layout.spec(i).range()),
        );
        let dnorm2 = norm_backward(
            cfg.norm_kind,
            &lc.x_mid,
            d,
            &lc.stats2,
            w.get_opt(slots.norm2_g),
            &dm,
            dg2,
            db2,
        );
        let dx_mid: Vec<T> = dx.iter().zip(&dnorm2).map(|(&a, &b)| a + b).collect();

        // attention output projection
        kernels::matmul_at_acc(&lc.ctx, n, d, &dx_mid, d, layout.get_mut(grads, slots.w_o));
        let mut dctx = vec![T::zero(); n * d];
        kernels::matmul_bt_acc(&dx_mid, n, d, w.get(slots.w_o), d, &mut dctx);

        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        for h in 0..heads {
            let hs = h * dh;
            for i in 0..n {
                let prow = &lc.probs[(h * n + i) * n..(h * n + i + 1) * n];
                let dci = &dctx[i * d + hs..i * d + hs + dh];
                let mut weighted = T::zero();
                for j in 0..=i {
                    let p = prow[j];
                    let vj = &lc.v[j * d + hs..j * d + hs + dh];
                    dp[j] = kernels::dot(dci, vj);
                    weighted = weighted + p * dp[j];
                    let dvj = &mut dv[j * d + hs..j * d + hs + dh];
                    for (a, &b) in dvj.iter_mut().zip(dci) {
                        *a = *a + p * b;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for t in 0..dh {
                        dq[i * d + hs + t] = dq[i * d + hs + t] + ds * lc.k[j * d + hs + t];
                        dk[j * d + hs + t] = dk[j * d + hs + t] + ds * lc.q[i * d + hs + t];
                    }
                }
            }
        }
        kernels::matmul_at_acc(&lc.a, n, d, &dq, d, layout.get_mut(grads, slots.w_q));
        kernels::matmul_at_acc(&lc.a, n, d, &dk, d, layout.get_mut(grads, slots.w_k));
        kernels::matmul_at_acc(&lc.a, n, d, &dv, d, layout.get_mut(grads, slots.w_v));
        let mut da = vec![T::zero(); n * d];
        kernels::matmul_bt_acc(&dq, n, d, w.get(slots.w_q), d, &mut da);
        kernels::matmul_bt_acc(&dk, n, d, w.get(slots.w_k), d, &mut da);
        kernels::matmul_bt_acc(&dv, n, d, w.get(slots.w_v), d, &mut da);
        let (dg1, db1) = two_slots(
            grads,
            slots.norm1_g.map(|i| layout.spec(i).range()),
            slots.norm1_b.map(|i| layout.spec(i).range()),
        );
        let dnorm1 = norm_backward(cfg.norm_kind, x_in, d, &lc.stats1, w.get_opt(slots.norm1_g), &da, dg1, db1);
        dx = dx_mid.iter().zip(&dnorm1).map(|(&a, &b)| a + b).collect();
    }

    {
        let demb = layout.get_mut(grads, layout.tok_emb);
        for (r, &tok) in inputs.iter().enumerate() {
            for j in 0..d {
                demb[tok * d + j] = demb[tok * d + j] + dx[r * d + j];
            }
        }
    }
    {
        let dpos = layout.get_mut(grads, layout.pos_emb);
        for r in 0..n {
            for j in 0..d {
                dpos[r * d + j] = dpos[r * d + j] + dx[r * d + j];
            }
        }
    }
    Ok(loss)
}

/// Mean next-token cross-entropy over every predicted position of the
/// batch, and its exact gradient for every parameter.
pub(crate) fn loss_and_grads_generic<T: Float>(w: &Weights<'_, T>, batch: &[Vec<usize>]) -> Result<(T, Vec<T>)> {
    let predicted: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if predicted == 0 {
        return Err(Error::Argument("batch has no next-token targets".into()));
    }
    for s in batch {
        if s.len() > w.cfg.max_seq + 1 {
            return Err(Error::Length(format!(
                "sequence of {} tokens exceeds max_seq {}",
                s.len(),
                w.cfg.max_seq
            )));
        }
    }
    let denom = c::<T>(predicted as f64);
    let mut grads = vec![T::zero(); w.params.len()];
    let mut total = T::zero();
    for s in batch.iter().filter(|s| s.len() >= 2) {
        total = total + sequence_grads(w, s, denom, &mut grads)?;
    }
    Ok((total / denom, grads))
}
