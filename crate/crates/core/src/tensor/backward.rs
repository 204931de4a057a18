use super::kernels;
use super::tape::{Gradients, Node, Op, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Adds `f`'s contribution into the gradient buffer of `v`, allocating zeros
/// on first touch. Parents that need no gradient are skipped.
fn acc<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
    f(slot);
}

/// Reduces a gradient of the broadcast output onto the (suffix-shaped) operand.
fn reduce_into<T: Real>(dst: &mut [T], src: impl Iterator<Item = T>) {
    let n = dst.len();
    for (i, g) in src.enumerate() {
        dst[i % n] += g;
    }
}

impl<T: Real> Tape<T> {
    /// Reverse sweep from a scalar `loss`. Every leaf receives `d loss / d leaf`;
    /// leaves not connected to the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = &self.nodes;
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param(_));
            if is_leaf {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = node.value.data();
            let val = |v: Var| nodes[v.0].value.data();
            use Op::*;
            match &node.op {
                Leaf | Param(_) => unreachable!(),
                Add(a, b) => {
                    acc(nodes, &mut grads, *a, |d| add_into(d, &g));
                    acc(nodes, &mut grads, *b, |d| reduce_into(d, g.iter().copied()));
                }
                Sub(a, b) => {
                    acc(nodes, &mut grads, *a, |d| add_into(d, &g));
                    acc(nodes, &mut grads, *b, |d| reduce_into(d, g.iter().map(|&x| -x)));
                }
                Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let bn = bv.len();
                    acc(nodes, &mut grads, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * bv[i % bn];
                        }
                    });
                    acc(nodes, &mut grads, *b, |d| {
                        reduce_into(d, g.iter().zip(av).map(|(&gi, &ai)| gi * ai))
                    });
                }
                Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(nodes, &mut grads, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] / bv[i];
                        }
                    });
                    acc(nodes, &mut grads, *b, |d| {
                        for i in 0..d.len() {
                            d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                        }
                    });
                }
                Minimum(a, b) | Maximum(a, b) => {
                    let take_a = matches!(node.op, Minimum(..));
                    let (av, bv) = (val(*a), val(*b));
                    // ties route the gradient to `a`
                    let pick_a = |i: usize| if take_a { av[i] <= bv[i] } else { av[i] >= bv[i] };
                    acc(nodes, &mut grads, *a, |d| {
                        for i in 0..d.len() {
                            if pick_a(i) {
                                d[i] += g[i];
                            }
                        }
                    });
                    acc(nodes, &mut grads, *b, |d| {
                        for i in 0..d.len() {
                            if !pick_a(i) {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                Scale(a, s) => acc(nodes, &mut grads, *a, |d| {
                    d.iter_mut().zip(&g).for_each(|(d, &gi)| *d += gi * *s)
                }),
                AddScalar(a) | Reshape(a) => acc(nodes, &mut grads, *a, |d| add_into(d, &g)),
                Relu(a) => acc(nodes, &mut grads, *a, |d| {
                    for i in 0..d.len() {
                        if out[i] > T::zero() {
                            d[i] += g[i];
                        }
                    }
                }),
                Sigmoid(a) => acc(nodes, &mut grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * out[i] * (T::one() - out[i]);
                    }
                }),
                Exp(a) => acc(nodes, &mut grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * out[i];
                    }
                }),
                Log(a) => {
                    let av = val(*a);
                    acc(nodes, &mut grads, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] / av[i];
                        }
                    })
                }
                Abs(a) => {
                    let av = val(*a);
                    acc(nodes, &mut grads, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * sign(av[i]);
                        }
                    })
                }
                Sum(a) => acc(nodes, &mut grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
                Mean(a) => {
                    let n = T::from_f64(nodes[a.0].value.numel() as f64);
                    acc(nodes, &mut grads, *a, |d| {
                        d.iter_mut().for_each(|d| *d += g[0] / n)
                    })
                }
                SumAxis(a, axis) => {
                    let shape = nodes[a.0].value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    acc(nodes, &mut grads, *a, |d| {
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                                add_into(dst, src);
                            }
                        }
                    })
                }
                Permute(a, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (_, back) = kernels::permute(&g, node.value.shape(), &inverse);
                    acc(nodes, &mut grads, *a, |d| add_into(d, &back))
                }
                Concat(vars, axis) => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for &v in vars {
                        let len = nodes[v.0].value.shape()[*axis];
                        acc(nodes, &mut grads, v, |d| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner
                                    ..(o * total + offset + len) * inner];
                                add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                            }
                        });
                        offset += len;
                    }
                }
                Slice { x, axis, start } => {
                    let shape = nodes[x.0].value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let len = shape[*axis];
                    let width = node.value.shape()[*axis];
                    acc(nodes, &mut grads, *x, |d| {
                        for o in 0..outer {
                            let dst = &mut d
                                [(o * len + start) * inner..(o * len + start + width) * inner];
                            add_into(dst, &g[o * width * inner..(o + 1) * width * inner]);
                        }
                    })
                }
                Broadcast(a) => acc(nodes, &mut grads, *a, |d| reduce_into(d, g.iter().copied())),
                Softmax(a) => {
                    let width = *node.value.shape().last().unwrap();
                    acc(nodes, &mut grads, *a, |d| {
                        for r in 0..d.len() / width {
                            let y = &out[r * width..(r + 1) * width];
                            let gy = &g[r * width..(r + 1) * width];
                            let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                            for j in 0..width {
                                d[r * width + j] += y[j] * (gy[j] - dot);
                            }
                        }
                    })
                }
                LogSoftmax(a) => {
                    let width = *node.value.shape().last().unwrap();
                    acc(nodes, &mut grads, *a, |d| {
                        for r in 0..d.len() / width {
                            let y = &out[r * width..(r + 1) * width];
                            let gy = &g[r * width..(r + 1) * width];
                            let total: T = gy.iter().copied().sum();
                            for j in 0..width {
                                d[r * width + j] += gy[j] - y[j].exp() * total;
                            }
                        }
                    })
                }
                LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = val(*gamma);
                    let width = gv.len();
                    let rows = g.len() / width;
                    acc(nodes, &mut grads, *gamma, |d| {
                        for r in 0..rows {
                            for j in 0..width {
                                d[j] += g[r * width + j] * xhat[r * width + j];
                            }
                        }
                    });
                    acc(nodes, &mut grads, *beta, |d| reduce_into(d, g.iter().copied()));
                    let n = T::from_f64(width as f64);
                    acc(nodes, &mut grads, *x, |d| {
                        let mut dxhat = vec![T::zero(); width];
                        for r in 0..rows {
                            let h = &xhat[r * width..(r + 1) * width];
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..width {
                                dxhat[j] = g[r * width + j] * gv[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * h[j];
                            }
                            let is = inv_std[r];
                            for j in 0..width {
                                d[r * width + j] += is * (dxhat[j] - (s1 + h[j] * s2) / n);
                            }
                        }
                    })
                }
                MatMul { a, b, trans_b } => {
                    let sb = nodes[b.0].value.shape();
                    let (q, s) = if *trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                    let rows = nodes[a.0].value.numel() / q;
                    let (av, bv) = (val(*a), val(*b));
                    acc(nodes, &mut grads, *a, |d| {
                        kernels::gemm(&g, bv, d, rows, s, q, false, !trans_b, true)
                    });
                    acc(nodes, &mut grads, *b, |d| {
                        if *trans_b {
                            kernels::gemm(&g, av, d, s, rows, q, true, false, true)
                        } else {
                            kernels::gemm(av, &g, d, q, rows, s, true, false, true)
                        }
                    });
                }
                BatchMatMul { a, b, trans_b } => {
                    let sa = nodes[a.0].value.shape();
                    let (bs, p, q) = (sa[0], sa[1], sa[2]);
                    let s = node.value.shape()[2];
                    let (av, bv) = (val(*a), val(*b));
                    acc(nodes, &mut grads, *a, |d| {
                        for i in 0..bs {
                            // dA = dC @ op(B)^T
                            kernels::gemm(
                                &g[i * p * s..(i + 1) * p * s],
                                &bv[i * q * s..(i + 1) * q * s],
                                &mut d[i * p * q..(i + 1) * p * q],
                                p,
                                s,
                                q,
                                false,
                                !trans_b,
                                true,
                            );
                        }
                    });
                    acc(nodes, &mut grads, *b, |d| {
                        for i in 0..bs {
                            let ga = &g[i * p * s..(i + 1) * p * s];
                            let ai = &av[i * p * q..(i + 1) * p * q];
                            let di = &mut d[i * q * s..(i + 1) * q * s];
                            if *trans_b {
                                // B is [s, q]: dB = dC^T @ A
                                kernels::gemm(ga, ai, di, s, p, q, true, false, true);
                            } else {
                                // B is [q, s]: dB = A^T @ dC
                                kernels::gemm(ai, ga, di, q, p, s, true, false, true);
                            }
                        }
                    });
                }
                Gather { table, indices } => {
                    let width = nodes[table.0].value.shape()[1];
                    acc(nodes, &mut grads, *table, |d| {
                        for (r, &i) in indices.iter().enumerate() {
                            add_into(&mut d[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                        }
                    })
                }
                Pick { x, indices } => {
                    let k = nodes[x.0].value.shape()[1];
                    acc(nodes, &mut grads, *x, |d| {
                        for (r, &c) in indices.iter().enumerate() {
                            d[r * k + c] += g[r];
                        }
                    })
                }
                Dropout { x, mask } => acc(nodes, &mut grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * mask[i];
                    }
                }),
                Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let out_c = nodes[w.0].value.shape()[0];
                    let (cr, cc) = (geom.col_rows(), geom.col_cols());
                    let batch = nodes[x.0].value.shape()[0];
                    let wv = val(*w);
                    acc(nodes, &mut grads, *b, |d| {
                        for i in 0..batch {
                            for o in 0..out_c {
                                let row = &g[(i * out_c + o) * cc..(i * out_c + o + 1) * cc];
                                d[o] += row.iter().copied().sum();
                            }
                        }
                    });
                    acc(nodes, &mut grads, *w, |d| {
                        for i in 0..batch {
                            let gy = &g[i * out_c * cc..(i + 1) * out_c * cc];
                            let col = &cols[i * cr * cc..(i + 1) * cr * cc];
                            kernels::gemm(gy, col, d, out_c, cc, cr, false, true, true);
                        }
                    });
                    let img = geom.channels * geom.height * geom.width;
                    acc(nodes, &mut grads, *x, |d| {
                        let mut dcol = vec![T::zero(); cr * cc];
                        for i in 0..batch {
                            let gy = &g[i * out_c * cc..(i + 1) * out_c * cc];
                            kernels::gemm(wv, gy, &mut dcol, cr, out_c, cc, true, false, false);
                            kernels::col2im_add(&dcol, geom, &mut d[i * img..(i + 1) * img]);
                        }
                    });
                }
                ConvexCombine { coeffs, bank } => {
                    let sc = nodes[coeffs.0].value.shape();
                    let (m, r) = (sc[sc.len() - 2], sc[sc.len() - 1]);
                    let batch = nodes[coeffs.0].value.numel() / (m * r);
                    let f = nodes[bank.0].value.shape()[1];
                    let (cv, bv) = (val(*coeffs), val(*bank));
                    acc(nodes, &mut grads, *coeffs, |d| {
                        for bi in 0..batch {
                            for i in 0..m {
                                let go = &g[(bi * m + i) * f..(bi * m + i + 1) * f];
                                for j in 0..r {
                                    let row = &bv[(i * r + j) * f..(i * r + j + 1) * f];
                                    d[(bi * m + i) * r + j] +=
                                        go.iter().zip(row).map(|(&a, &b)| a * b).sum::<T>();
                                }
                            }
                        }
                    });
                    acc(nodes, &mut grads, *bank, |d| {
                        for bi in 0..batch {
                            for i in 0..m {
                                let go = &g[(bi * m + i) * f..(bi * m + i + 1) * f];
                                for j in 0..r {
                                    let w = cv[(bi * m + i) * r + j];
                                    let row = &mut d[(i * r + j) * f..(i * r + j + 1) * f];
                                    row.iter_mut().zip(go).for_each(|(d, &gi)| *d += w * gi);
                                }
                            }
                        }
                    });
                }
            }
        }

        let mut params = Vec::new();
        let mut out_grads = Vec::with_capacity(nodes.len());
        let mut shapes = Vec::with_capacity(nodes.len());
        for (i, (node, g)) in nodes.iter().zip(grads).enumerate() {
            shapes.push(node.value.shape().to_vec());
            let leaf = matches!(node.op, Op::Leaf | Op::Param(_));
            if let Op::Param(id) = node.op {
                params.push((id, Var(i)));
            }
            out_grads.push(match g {
                Some(g) if leaf => Some(Tensor::from_vec(node.value.shape().to_vec(), g)),
                _ => None,
            });
        }
        Ok(Gradients {
            grads: out_grads,
            shapes,
            params,
        })
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
