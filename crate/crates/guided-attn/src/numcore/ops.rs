//! Differentiable primitives. Every op computes in `f64`, quantizes its
//! output to the operands' precision, and (when any input is tracked)
//! records an adjoint closure on the shared tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::tape::{Accum, BackFn, NodeId, Tape};
use crate::numcore::tensor::{Precision, Tensor, Track};

fn tape_of(inputs: &[&Tensor]) -> Option<Tape> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some(tr) = &t.track {
            match &found {
                None => found = Some(tr.tape.clone()),
                Some(tp) => assert!(tp.same_tape(&tr.tape), "operands recorded on different tapes"),
            }
        }
    }
    found
}

fn precision_of(inputs: &[&Tensor]) -> Precision {
    let p = inputs[0].precision();
    for t in &inputs[1..] {
        assert_eq!(p, t.precision(), "mixed-precision operands");
    }
    p
}

fn node_ids(inputs: &[&Tensor]) -> Vec<Option<NodeId>> {
    inputs
        .iter()
        .map(|t| t.track.as_ref().map(|tr| tr.node))
        .collect()
}

/// Build the output tensor, recording `build_back` on the tape when any
/// input is tracked.
fn attach(
    inputs: &[&Tensor],
    shape: Vec<usize>,
    data: Vec<f64>,
    build_back: impl FnOnce(Vec<Option<NodeId>>) -> BackFn,
) -> Tensor {
    let prec = precision_of(inputs);
    let data = prec.quantize_vec(data);
    match tape_of(inputs) {
        None => Tensor::from_parts(shape, data, prec, None),
        Some(tape) => {
            let back = build_back(node_ids(inputs));
            let node = tape.push_node(data.len(), Some(back), false);
            Tensor::from_parts(shape, data, prec, Some(Track { tape, node }))
        }
    }
}

fn assert_same_shape(a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
}

fn dims2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected a 2-D tensor, got {:?}", s);
    (s[0], s[1])
}

// ── elementwise ──────────────────────────────────────────────────────────

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b);
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let n = data.len();
    attach(&[a, b], a.shape().to_vec(), data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            for id in ids.iter().flatten() {
                acc.add(*id, n, |slot| {
                    for (s, gi) in slot.iter_mut().zip(g) {
                        *s += gi;
                    }
                });
            }
        })
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b);
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let n = data.len();
    attach(&[a, b], a.shape().to_vec(), data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, n, |slot| {
                    for (s, gi) in slot.iter_mut().zip(g) {
                        *s += gi;
                    }
                });
            }
            if let Some(id) = ids[1] {
                acc.add(id, n, |slot| {
                    for (s, gi) in slot.iter_mut().zip(g) {
                        *s -= gi;
                    }
                });
            }
        })
    })
}

/// Hadamard product.
pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b);
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let n = data.len();
    let (da, db) = (a.data_arc(), b.data_arc());
    attach(&[a, b], a.shape().to_vec(), data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, n, |slot| {
                    for i in 0..n {
                        slot[i] += g[i] * db.as_slice()[i];
                    }
                });
            }
            if let Some(id) = ids[1] {
                acc.add(id, n, |slot| {
                    for i in 0..n {
                        slot[i] += g[i] * da.as_slice()[i];
                    }
                });
            }
        })
    })
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v * c).collect();
    let n = data.len();
    attach(&[x], x.shape().to_vec(), data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, n, |slot| {
                    for i in 0..n {
                        slot[i] += c * g[i];
                    }
                });
            }
        })
    })
}

/// Row-broadcast bias add: `x[r,c] + b[c]`.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let (rows, cols) = dims2(x);
    assert_eq!(b.numel(), cols, "bias length must match columns");
    let mut data = x.data().to_vec();
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] += b.data()[c];
        }
    }
    attach(&[x, b], x.shape().to_vec(), data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, rows * cols, |slot| {
                    for (s, gi) in slot.iter_mut().zip(g) {
                        *s += gi;
                    }
                });
            }
            if let Some(id) = ids[1] {
                acc.add(id, cols, |slot| {
                    for r in 0..rows {
                        for c in 0..cols {
                            slot[c] += g[r * cols + c];
                        }
                    }
                });
            }
        })
    })
}

// ── matmul family ────────────────────────────────────────────────────────

/// `a[m,k] * b[k,n]`, row-major, ikj order.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += ap * brow[j];
            }
        }
    }
    out
}

/// `a[m,k] * b[n,k]^T` (both row-major) -> [m,n].
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `a[m,k]^T * b[m,n]` -> [k,n].
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += ap * brow[j];
            }
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = dims2(a);
    let (k2, n) = dims2(b);
    assert_eq!(k, k2, "matmul inner dims {}x{} vs {}x{}", m, k, k2, n);
    let data = mm(a.data(), b.data(), m, k, n);
    let (da, db) = (a.data_arc(), b.data_arc());
    attach(&[a, b], vec![m, n], data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                let contrib = mm_nt(g, &db, m, n, k);
                acc.add(id, m * k, |slot| {
                    for (s, c) in slot.iter_mut().zip(&contrib) {
                        *s += c;
                    }
                });
            }
            if let Some(id) = ids[1] {
                let contrib = mm_tn(&da, g, m, k, n);
                acc.add(id, k * n, |slot| {
                    for (s, c) in slot.iter_mut().zip(&contrib) {
                        *s += c;
                    }
                });
            }
        })
    })
}

pub fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = dims2(x);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data()[i * c + j];
        }
    }
    attach(&[x], vec![c, r], data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, r * c, |slot| {
                    for i in 0..r {
                        for j in 0..c {
                            slot[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
        })
    })
}

// ── shape surgery ────────────────────────────────────────────────────────

/// Column-block view `x[:, start..start+len]`.
pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (rows, cols) = dims2(x);
    assert!(start + len <= cols, "column slice out of range");
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&x.data()[r * cols + start..r * cols + start + len]);
    }
    attach(&[x], vec![rows, len], data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, rows * cols, |slot| {
                    for r in 0..rows {
                        for c in 0..len {
                            slot[r * cols + start + c] += g[r * len + c];
                        }
                    }
                });
            }
        })
    })
}

/// Concatenate equal-row-count matrices along the column axis.
pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let rows = dims2(parts[0]).0;
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let (r, c) = dims2(p);
            assert_eq!(r, rows, "concat_cols row mismatch");
            c
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let widths_cl = widths.clone();
    attach(parts, vec![rows, total], data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            let mut offset = 0;
            for (idx, w) in widths_cl.iter().enumerate() {
                if let Some(id) = ids[idx] {
                    let (w, off) = (*w, offset);
                    acc.add(id, rows * w, |slot| {
                        for r in 0..rows {
                            for c in 0..w {
                                slot[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                }
                offset += w;
            }
        })
    })
}

/// `out[i] = x[index[i]]`; adjoint scatter-adds. The index map is a fixed
/// (non-differentiable) routing table, e.g. patch extraction.
pub fn gather(x: &Tensor, index: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Tensor {
    let n_out: usize = out_shape.iter().product();
    assert_eq!(index.len(), n_out, "index length must match output shape");
    let n_in = x.numel();
    let data: Vec<f64> = index.iter().map(|&i| x.data()[i]).collect();
    let idx = Arc::clone(&index);
    attach(&[x], out_shape, data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, n_in, |slot| {
                    for (gi, &i) in g.iter().zip(idx.iter()) {
                        slot[i] += gi;
                    }
                });
            }
        })
    })
}

/// Single-element pick as a scalar tensor.
pub fn select(x: &Tensor, flat_index: usize) -> Tensor {
    assert!(flat_index < x.numel(), "select index out of range");
    let n = x.numel();
    let data = vec![x.data()[flat_index]];
    attach(&[x], vec![1], data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, n, |slot| slot[flat_index] += g[0]);
            }
        })
    })
}

// ── reductions ───────────────────────────────────────────────────────────

pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    let n = x.numel();
    attach(&[x], vec![1], vec![s], move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, n, |slot| {
                    for v in slot.iter_mut() {
                        *v += g[0];
                    }
                });
            }
        })
    })
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel();
    let s: f64 = x.data().iter().sum();
    attach(&[x], vec![1], vec![s / n as f64], move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                let inv = 1.0 / n as f64;
                acc.add(id, n, |slot| {
                    for v in slot.iter_mut() {
                        *v += g[0] * inv;
                    }
                });
            }
        })
    })
}

/// Column means of a matrix: `[R,C] -> [C]`.
pub fn mean_axis0(x: &Tensor) -> Tensor {
    let (rows, cols) = dims2(x);
    let mut data = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            data[c] += x.data()[r * cols + c];
        }
    }
    let inv = 1.0 / rows as f64;
    for v in data.iter_mut() {
        *v *= inv;
    }
    attach(&[x], vec![cols], data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, rows * cols, |slot| {
                    for r in 0..rows {
                        for c in 0..cols {
                            slot[r * cols + c] += g[c] * inv;
                        }
                    }
                });
            }
        })
    })
}

/// `x / s` for a scalar tensor `s`; both sides differentiable.
pub fn div_by_scalar(x: &Tensor, s: &Tensor) -> Tensor {
    assert_eq!(s.numel(), 1, "divisor must be a scalar tensor");
    let sv = s.item();
    assert!(sv != 0.0, "division by zero scalar");
    let data: Vec<f64> = x.data().iter().map(|v| v / sv).collect();
    let n = data.len();
    let dx = x.data_arc();
    attach(&[x, s], x.shape().to_vec(), data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, n, |slot| {
                    for i in 0..n {
                        slot[i] += g[i] / sv;
                    }
                });
            }
            if let Some(id) = ids[1] {
                let mut ds = 0.0;
                for i in 0..n {
                    ds -= g[i] * dx.as_slice()[i] / (sv * sv);
                }
                acc.add(id, 1, |slot| slot[0] += ds);
            }
        })
    })
}

// ── nonlinearities ───────────────────────────────────────────────────────

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// GELU with the tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| gelu_fwd(v)).collect();
    let n = data.len();
    let dx = x.data_arc();
    attach(&[x], x.shape().to_vec(), data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, n, |slot| {
                    for i in 0..n {
                        slot[i] += g[i] * gelu_bwd(dx.as_slice()[i]);
                    }
                });
            }
        })
    })
}

/// Numerically stable softmax along `axis` of a 1-D or 2-D tensor.
/// Rejects non-finite inputs.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(Error::Numerical(
            "softmax: input contains non-finite entries".into(),
        ));
    }
    let shape = x.shape().to_vec();
    let (rows, cols, row_major) = match shape.len() {
        1 => {
            assert_eq!(axis, 0, "softmax axis out of range for 1-D tensor");
            (1usize, shape[0], true)
        }
        2 => match axis {
            1 => (shape[0], shape[1], true),
            0 => (shape[1], shape[0], false),
            _ => panic!("softmax axis {} out of range for 2-D tensor", axis),
        },
        _ => panic!("softmax supports 1-D and 2-D tensors, got {:?}", shape),
    };
    // index of element (lane r, position c) in the flat buffer
    let at = move |r: usize, c: usize| {
        if row_major {
            r * cols + c
        } else {
            c * rows + r
        }
    };
    let prec = x.precision();
    let mut data = vec![0.0; x.numel()];
    for r in 0..rows {
        let mut m = f64::NEG_INFINITY;
        for c in 0..cols {
            m = m.max(x.data()[at(r, c)]);
        }
        let mut z = 0.0;
        for c in 0..cols {
            let e = (x.data()[at(r, c)] - m).exp();
            data[at(r, c)] = e;
            z += e;
        }
        for c in 0..cols {
            data[at(r, c)] = prec.quantize(data[at(r, c)] / z);
        }
    }
    let n = data.len();
    let Some(track) = &x.track else {
        return Ok(Tensor::from_parts(shape, data, prec, None));
    };
    let tape = track.tape.clone();
    let xid = track.node;
    let probs = Arc::new(data);
    let probs_b = Arc::clone(&probs);
    let back: BackFn = Box::new(move |g: &[f64], acc: &mut Accum| {
        acc.add(xid, n, |slot| {
            for r in 0..rows {
                let mut dot = 0.0;
                for c in 0..cols {
                    let i = at(r, c);
                    dot += g[i] * probs_b.as_slice()[i];
                }
                for c in 0..cols {
                    let i = at(r, c);
                    slot[i] += probs_b.as_slice()[i] * (g[i] - dot);
                }
            }
        });
    });
    let node = tape.push_node(n, Some(back), false);
    Ok(Tensor::from_parts(
        shape,
        probs.as_ref().clone(),
        prec,
        Some(Track { tape, node }),
    ))
}

/// Row-wise layer normalization with learnable gain and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let (rows, cols) = dims2(x);
    assert_eq!(gamma.numel(), cols);
    assert_eq!(beta.numel(), cols);
    let mut data = vec![0.0; rows * cols];
    let mut xhat = vec![0.0; rows * cols];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let mu = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for c in 0..cols {
            let xh = (row[c] - mu) * istd;
            xhat[r * cols + c] = xh;
            data[r * cols + c] = gamma.data()[c] * xh + beta.data()[c];
        }
    }
    let xhat = Arc::new(xhat);
    let inv_std = Arc::new(inv_std);
    let gamma_data = gamma.data_arc();
    attach(&[x, gamma, beta], x.shape().to_vec(), data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, rows * cols, |slot| {
                    for r in 0..rows {
                        let base = r * cols;
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..cols {
                            let dxh = g[base + c] * gamma_data.as_slice()[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat.as_slice()[base + c];
                        }
                        mean_dxh /= cols as f64;
                        mean_dxh_xh /= cols as f64;
                        for c in 0..cols {
                            let dxh = g[base + c] * gamma_data.as_slice()[c];
                            slot[base + c] += inv_std.as_slice()[r]
                                * (dxh - mean_dxh - xhat.as_slice()[base + c] * mean_dxh_xh);
                        }
                    }
                });
            }
            if let Some(id) = ids[1] {
                acc.add(id, cols, |slot| {
                    for r in 0..rows {
                        for c in 0..cols {
                            slot[c] += g[r * cols + c] * xhat.as_slice()[r * cols + c];
                        }
                    }
                });
            }
            if let Some(id) = ids[2] {
                acc.add(id, cols, |slot| {
                    for r in 0..rows {
                        for c in 0..cols {
                            slot[c] += g[r * cols + c];
                        }
                    }
                });
            }
        })
    })
}

/// Stable per-row log-sum-exp: `[R,C] -> [R]`.
pub fn logsumexp_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = dims2(x);
    let mut data = vec![0.0; rows];
    let mut probs = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..cols {
            let e = (row[c] - m).exp();
            probs[r * cols + c] = e;
            z += e;
        }
        for c in 0..cols {
            probs[r * cols + c] /= z;
        }
        data[r] = m + z.ln();
    }
    let probs = Arc::new(probs);
    attach(&[x], vec![rows], data, move |ids| {
        Box::new(move |g: &[f64], acc: &mut Accum| {
            if let Some(id) = ids[0] {
                acc.add(id, rows * cols, |slot| {
                    for r in 0..rows {
                        for c in 0..cols {
                            slot[r * cols + c] += g[r] * probs.as_slice()[r * cols + c];
                        }
                    }
                });
            }
        })
    })
}
