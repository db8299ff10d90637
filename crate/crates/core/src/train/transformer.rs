//! Auxiliary-pass transformer: two post-norm encoder layers attending over the
//! timestamps of each Gaussian.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{shape_err, Result};
use crate::gaussian::{positional_encode, HIDDEN};
use crate::math::{self, Mat};

pub const HEADS: usize = 2;
pub const POSITION_BANDS: usize = 4;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub wqkv: Mat,
    pub bqkv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln1_gamma: Mat,
    pub ln1_beta: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ln2_gamma: Mat,
    pub ln2_beta: Mat,
}

/// Input projection of `[f, γ(t), γ(X)]`, two encoder layers and a `tanh` head.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerAux {
    pub time_bands: usize,
    pub position_bands: usize,
    pub input: Mat,
    pub input_bias: Mat,
    pub layers: Vec<EncoderLayer>,
    pub output: Mat,
    pub output_bias: Mat,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let bound = math::sqrt(6.0 / (rows + cols) as f64);
    Mat::from_fn(rows, cols, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

impl TransformerAux {
    pub fn input_dim(time_bands: usize, position_bands: usize) -> usize {
        HIDDEN + 2 * time_bands + 6 * position_bands
    }

    pub fn zeros(time_bands: usize, position_bands: usize) -> Self {
        let d = HIDDEN;
        let layer = EncoderLayer {
            wqkv: Mat::zeros(d, 3 * d),
            bqkv: Mat::zeros(1, 3 * d),
            wo: Mat::zeros(d, d),
            bo: Mat::zeros(1, d),
            ln1_gamma: Mat::from_fn(1, d, |_, _| 1.0),
            ln1_beta: Mat::zeros(1, d),
            w1: Mat::zeros(d, d),
            b1: Mat::zeros(1, d),
            w2: Mat::zeros(d, d),
            b2: Mat::zeros(1, d),
            ln2_gamma: Mat::from_fn(1, d, |_, _| 1.0),
            ln2_beta: Mat::zeros(1, d),
        };
        Self {
            time_bands,
            position_bands,
            input: Mat::zeros(Self::input_dim(time_bands, position_bands), d),
            input_bias: Mat::zeros(1, d),
            layers: vec![layer.clone(), layer],
            output: Mat::zeros(d, d),
            output_bias: Mat::zeros(1, d),
        }
    }

    pub fn random<R: Rng + ?Sized>(time_bands: usize, position_bands: usize, rng: &mut R) -> Self {
        let mut t = Self::zeros(time_bands, position_bands);
        let d = HIDDEN;
        t.input = glorot(t.input.rows, d, rng);
        for l in &mut t.layers {
            l.wqkv = glorot(d, 3 * d, rng);
            l.wo = glorot(d, d, rng);
            l.w1 = glorot(d, d, rng);
            l.w2 = glorot(d, d, rng);
        }
        t.output = glorot(d, d, rng);
        t
    }

    /// Every parameter matrix in a fixed order.
    pub fn params(&self) -> Vec<&Mat> {
        let mut v = vec![&self.input, &self.input_bias];
        for l in &self.layers {
            v.extend([
                &l.wqkv, &l.bqkv, &l.wo, &l.bo, &l.ln1_gamma, &l.ln1_beta, &l.w1, &l.b1, &l.w2, &l.b2, &l.ln2_gamma,
                &l.ln2_beta,
            ]);
        }
        v.extend([&self.output, &self.output_bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![&mut self.input, &mut self.input_bias];
        for l in &mut self.layers {
            v.extend([
                &mut l.wqkv,
                &mut l.bqkv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln1_gamma,
                &mut l.ln1_beta,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
                &mut l.ln2_gamma,
                &mut l.ln2_beta,
            ]);
        }
        v.extend([&mut self.output, &mut self.output_bias]);
        v
    }

    /// Plain forward pass; see [`transformer_forward`].
    pub fn forward(&self, f: &Mat, times: &[f64], positions: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params().into_iter().map(|m| tape.constant(m.clone())).collect();
        let fv = tape.constant(f.clone());
        let out = transformer_forward(&mut tape, self, &params, fv, times, positions)?;
        Ok(tape.value(out).clone())
    }
}

/// Encoding inputs `[γ(t_j), γ(X_b)]` for tokens ordered `j · B + b`.
/// Positions are expected normalized to `[0, 1]`.
pub fn token_encodings(times: &[f64], positions: &Mat, time_bands: usize, position_bands: usize) -> Result<Mat> {
    let b = positions.rows;
    let width = 2 * time_bands + 6 * position_bands;
    let mut out = Mat::zeros(times.len() * b, width);
    let pos_enc: Vec<Vec<f64>> = (0..b)
        .map(|r| {
            let mut e = Vec::with_capacity(6 * position_bands);
            for k in 0..3 {
                e.extend(positional_encode(positions.get(r, k), position_bands)?);
            }
            Ok(e)
        })
        .collect::<Result<_>>()?;
    for (j, &t) in times.iter().enumerate() {
        let te = positional_encode(t, time_bands)?;
        for (r, pe) in pos_enc.iter().enumerate() {
            let row = out.row_mut(j * b + r);
            row[..te.len()].copy_from_slice(&te);
            row[te.len()..].copy_from_slice(pe);
        }
    }
    Ok(out)
}

/// Record the transformer on `tape`. `f` holds `T · B` temporal features ordered
/// `j · B + b` (timestamp-major); attention runs over the `T` timestamps of each
/// Gaussian independently. `params` are the tape variables of
/// [`TransformerAux::params`].
pub fn transformer_forward(
    tape: &mut Tape,
    aux: &TransformerAux,
    params: &[Var],
    f: Var,
    times: &[f64],
    positions: &Mat,
) -> Result<Var> {
    let t = times.len();
    let b = positions.rows;
    if tape.value(f).rows != t * b || tape.value(f).cols != HIDDEN {
        return Err(shape_err!(
            "transformer input is {}x{}, expected {}x{HIDDEN}",
            tape.value(f).rows,
            tape.value(f).cols,
            t * b
        ));
    }
    if params.len() != 4 + 12 * aux.layers.len() {
        return Err(shape_err!("{} transformer parameter variables", params.len()));
    }
    let enc = token_encodings(times, positions, aux.time_bands, aux.position_bands)?;
    let enc = tape.constant(enc);
    let x = tape.hcat(&[f, enc])?;
    let x = tape.matmul(x, params[0])?;
    let mut x = tape.add_row(x, params[1])?;
    for l in 0..aux.layers.len() {
        let p = &params[2 + 12 * l..2 + 12 * (l + 1)];
        let a = attention(tape, x, p[0], p[1], p[2], p[3], t, b)?;
        let r = tape.add(x, a)?;
        let x1 = layer_norm(tape, r, p[4], p[5])?;
        let h = tape.matmul(x1, p[6])?;
        let h = tape.add_row(h, p[7])?;
        let h = tape.tanh(h);
        let h = tape.matmul(h, p[8])?;
        let h = tape.add_row(h, p[9])?;
        let r = tape.add(x1, h)?;
        x = layer_norm(tape, r, p[10], p[11])?;
    }
    let k = params.len();
    let y = tape.matmul(x, params[k - 2])?;
    let y = tape.add_row(y, params[k - 1])?;
    Ok(tape.tanh(y))
}

struct AttentionOp {
    seq: usize,
    batch: usize,
    qkv: Mat,
    probs: Vec<f64>,
    ctx: Mat,
}

fn add_bias(m: &mut Mat, bias: &Mat) {
    for r in 0..m.rows {
        m.row_mut(r).iter_mut().zip(&bias.data).for_each(|(x, y)| *x += y);
    }
}

fn col_sum(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols);
    for r in 0..g.rows {
        out.data.iter_mut().zip(g.row(r)).for_each(|(x, y)| *x += y);
    }
    out
}

/// Multi-head self-attention (with biases) over sequences of `seq` tokens.
#[allow(clippy::too_many_arguments)]
pub fn attention(tape: &mut Tape, x: Var, wqkv: Var, bqkv: Var, wo: Var, bo: Var, seq: usize, batch: usize) -> Result<Var> {
    let d = HIDDEN;
    let dh = d / HEADS;
    let mut qkv = tape.value(x).matmul(tape.value(wqkv))?;
    add_bias(&mut qkv, tape.value(bqkv));
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut probs = vec![0.0; batch * HEADS * seq * seq];
    let mut ctx = Mat::zeros(seq * batch, d);
    for b in 0..batch {
        for h in 0..HEADS {
            let p = &mut probs[(b * HEADS + h) * seq * seq..(b * HEADS + h + 1) * seq * seq];
            for i in 0..seq {
                let qi = &qkv.row(i * batch + b)[h * dh..(h + 1) * dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..seq {
                    let kj = &qkv.row(j * batch + b)[d + h * dh..d + (h + 1) * dh];
                    let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    p[i * seq + j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for j in 0..seq {
                    let e = math::exp(p[i * seq + j] - mx);
                    p[i * seq + j] = e;
                    z += e;
                }
                let out = &mut ctx.row_mut(i * batch + b)[h * dh..(h + 1) * dh];
                for j in 0..seq {
                    let w = p[i * seq + j] / z;
                    p[i * seq + j] = w;
                    let vj = &qkv.row(j * batch + b)[2 * d + h * dh..2 * d + (h + 1) * dh];
                    out.iter_mut().zip(vj).for_each(|(o, v)| *o += w * v);
                }
            }
        }
    }
    let mut out = ctx.matmul(tape.value(wo))?;
    add_bias(&mut out, tape.value(bo));
    let op = AttentionOp {
        seq,
        batch,
        qkv,
        probs,
        ctx,
    };
    Ok(tape.custom(&[x, wqkv, bqkv, wo, bo], out, Box::new(op)))
}

impl CustomOp for AttentionOp {
    fn backward(&self, g: &Mat, inputs: &[&Mat], _output: &Mat) -> Result<Vec<Option<Mat>>> {
        let (x, wqkv, wo) = (inputs[0], inputs[1], inputs[3]);
        let d = HIDDEN;
        let dh = d / HEADS;
        let (seq, batch) = (self.seq, self.batch);
        let scale = 1.0 / math::sqrt(dh as f64);
        let d_wo = self.ctx.transpose().matmul(g)?;
        let d_bo = col_sum(g);
        let d_ctx = g.matmul(&wo.transpose())?;
        let mut d_qkv = Mat::zeros(self.qkv.rows, 3 * d);
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..HEADS {
                let p = &self.probs[(b * HEADS + h) * seq * seq..(b * HEADS + h + 1) * seq * seq];
                for i in 0..seq {
                    let ri = i * batch + b;
                    let dout = &d_ctx.row(ri)[h * dh..(h + 1) * dh];
                    let mut dot = 0.0;
                    for j in 0..seq {
                        let rj = j * batch + b;
                        let vj = &self.qkv.row(rj)[2 * d + h * dh..2 * d + (h + 1) * dh];
                        dp[j] = dout.iter().zip(vj).map(|(a, c)| a * c).sum();
                        dot += dp[j] * p[i * seq + j];
                        // dV_j += p_ij · dout_i
                        let w = p[i * seq + j];
                        let dv = &mut d_qkv.row_mut(rj)[2 * d + h * dh..2 * d + (h + 1) * dh];
                        dv.iter_mut().zip(dout).for_each(|(a, c)| *a += w * c);
                    }
                    for j in 0..seq {
                        let rj = j * batch + b;
                        let ds = p[i * seq + j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &self.qkv.row(rj)[d + h * dh..d + (h + 1) * dh];
                        let qi = &self.qkv.row(ri)[h * dh..(h + 1) * dh];
                        let dq = &mut d_qkv.row_mut(ri)[h * dh..(h + 1) * dh];
                        dq.iter_mut().zip(kj).for_each(|(a, c)| *a += ds * c);
                        let dk = &mut d_qkv.row_mut(rj)[d + h * dh..d + (h + 1) * dh];
                        dk.iter_mut().zip(qi).for_each(|(a, c)| *a += ds * c);
                    }
                }
            }
        }
        let d_x = d_qkv.matmul(&wqkv.transpose())?;
        let d_w = x.transpose().matmul(&d_qkv)?;
        let d_b = col_sum(&d_qkv);
        Ok(vec![Some(d_x), Some(d_w), Some(d_b), Some(d_wo), Some(d_bo)])
    }
}

struct LayerNormOp {
    xhat: Mat,
    inv_std: Vec<f64>,
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let xv = tape.value(x);
    let (gv, bv) = (tape.value(gamma), tape.value(beta));
    if gv.cols != xv.cols || bv.cols != xv.cols {
        return Err(shape_err!("layer norm gain width {} for {} columns", gv.cols, xv.cols));
    }
    let n = xv.cols as f64;
    let mut xhat = Mat::zeros(xv.rows, xv.cols);
    let mut inv_std = Vec::with_capacity(xv.rows);
    let mut out = Mat::zeros(xv.rows, xv.cols);
    for r in 0..xv.rows {
        let row = xv.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / math::sqrt(var + LN_EPS);
        inv_std.push(is);
        for c in 0..xv.cols {
            let h = (row[c] - mean) * is;
            xhat.set(r, c, h);
            out.set(r, c, h * gv.data[c] + bv.data[c]);
        }
    }
    Ok(tape.custom(&[x, gamma, beta], out, Box::new(LayerNormOp { xhat, inv_std })))
}

impl CustomOp for LayerNormOp {
    fn backward(&self, g: &Mat, inputs: &[&Mat], _output: &Mat) -> Result<Vec<Option<Mat>>> {
        let gamma = inputs[1];
        let n = g.cols as f64;
        let mut dx = Mat::zeros(g.rows, g.cols);
        let mut dgamma = Mat::zeros(1, g.cols);
        let mut dbeta = Mat::zeros(1, g.cols);
        for r in 0..g.rows {
            let (gr, xh) = (g.row(r), self.xhat.row(r));
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for c in 0..g.cols {
                let dxh = gr[c] * gamma.data[c];
                s1 += dxh;
                s2 += dxh * xh[c];
                dgamma.data[c] += gr[c] * xh[c];
                dbeta.data[c] += gr[c];
            }
            let is = self.inv_std[r];
            let out = dx.row_mut(r);
            for c in 0..g.cols {
                let dxh = gr[c] * gamma.data[c];
                out[c] = is / n * (n * dxh - s1 - xh[c] * s2);
            }
        }
        Ok(vec![Some(dx), Some(dgamma), Some(dbeta)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(t: usize, b: usize, seed: u64) -> (Mat, Vec<f64>, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Mat::from_fn(t * b, HIDDEN, |_, _| rng.random_range(-1.0..1.0));
        let times: Vec<f64> = (0..t).map(|j| j as f64 / (t.max(2) - 1) as f64).collect();
        let pos = Mat::from_fn(b, 3, |_, _| rng.random_range(0.0..1.0));
        (f, times, pos)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let aux = TransformerAux::zeros(6, POSITION_BANDS);
        let (f, times, pos) = inputs(4, 3, 1);
        let out = aux.forward(&f, &times, &pos).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_permutation_commutes_and_output_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let aux = TransformerAux::random(6, POSITION_BANDS, &mut rng);
        let (t, b) = (5, 4);
        let (f, times, pos) = inputs(t, b, 3);
        let out = aux.forward(&f, &times, &pos).unwrap();
        assert!(out.data.iter().all(|v| v.abs() < 1.0));
        let perm = [2usize, 0, 3, 1];
        let fp = Mat::from_fn(t * b, HIDDEN, |r, c| f.get((r / b) * b + perm[r % b], c));
        let pp = Mat::from_fn(b, 3, |r, c| pos.get(perm[r], c));
        let outp = aux.forward(&fp, &times, &pp).unwrap();
        for r in 0..t * b {
            let src = (r / b) * b + perm[r % b];
            for c in 0..HIDDEN {
                assert!((outp.get(r, c) - out.get(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_timestamp_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let aux = TransformerAux::random(6, POSITION_BANDS, &mut rng);
        let (f, times, pos) = inputs(1, 3, 5);
        assert_eq!(aux.forward(&f, &times, &pos).unwrap().rows, 3);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut aux = TransformerAux::random(2, 1, &mut rng);
        // Non-trivial layer norm parameters.
        for l in &mut aux.layers {
            l.ln1_gamma = Mat::from_fn(1, HIDDEN, |_, _| rng.random_range(0.5..1.5));
            l.ln2_beta = Mat::from_fn(1, HIDDEN, |_, _| rng.random_range(-0.2..0.2));
            l.bqkv = Mat::from_fn(1, 3 * HIDDEN, |_, _| rng.random_range(-0.2..0.2));
        }
        let (t, b) = (3, 2);
        let (f, times, pos) = inputs(t, b, 7);
        let target = Mat::from_fn(t * b, HIDDEN, |_, _| rng.random_range(-1.0..1.0));
        let loss = |aux: &TransformerAux, f: &Mat| -> f64 {
            let out = aux.forward(f, &times, &pos).unwrap();
            out.data.iter().zip(&target.data).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let pv: Vec<Var> = aux.params().into_iter().map(|m| tape.leaf(m.clone())).collect();
        let fv = tape.leaf(f.clone());
        let out = transformer_forward(&mut tape, &aux, &pv, fv, &times, &pos).unwrap();
        let tv = tape.constant(target.clone());
        let prod = tape.mul(out, tv).unwrap();
        let s = tape.sum(prod);
        let grads = tape.backward(s).unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (k, &v) in pv.iter().enumerate() {
            let g = grads.get(v).unwrap().clone();
            for _ in 0..6 {
                let j = rng.random_range(0..g.len());
                let mut ap = aux.clone();
                ap.params_mut()[k].data[j] += h;
                let mut am = aux.clone();
                am.params_mut()[k].data[j] -= h;
                let fd = (loss(&ap, &f) - loss(&am, &f)) / (2.0 * h);
                assert!((fd - g.data[j]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}[{j}]: {fd} vs {}", g.data[j]);
            }
        }
        let gf = grads.get(fv).unwrap();
        for j in (0..f.len()).step_by(37) {
            let mut fp = f.clone();
            fp.data[j] += h;
            let mut fm = f.clone();
            fm.data[j] -= h;
            let fd = (loss(&aux, &fp) - loss(&aux, &fm)) / (2.0 * h);
            assert!((fd - gf.data[j]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
