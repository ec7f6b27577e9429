//! Reverse-mode automatic differentiation over f64 `ndarray` values.
//!
//! Define-by-run: each op computes its value eagerly and records a backward
//! rule. Graphs are rebuilt per step; parameters live outside the graph as
//! plain arrays and are bound as leaves on every forward pass. All math is
//! sequential f64, so results are bit-reproducible for a fixed seed.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use ndarray::{ArrayD, Ix1, Ix2, Ix3, IxDyn};

pub type Arr = ArrayD<f64>;

/// own value, upstream gradient, parents -> per-parent gradient (None for
/// parents that do not require grad).
type BackFn = Box<dyn Fn(&Arr, &Arr, &[Tensor]) -> Vec<Option<Arr>>>;

struct Node {
    value: Arr,
    grad: RefCell<Option<Arr>>,
    parents: Vec<Tensor>,
    backward: Option<BackFn>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl Tensor {
    pub fn leaf(value: Arr, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            value,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        }))
    }

    pub fn constant(value: Arr) -> Tensor {
        Tensor::leaf(value, false)
    }

    fn from_op(value: Arr, parents: Vec<Tensor>, backward: BackFn) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            value,
            grad: RefCell::new(None),
            parents,
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        }))
    }

    pub fn value(&self) -> &Arr {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.0.value.len(), 1);
        *self.0.value.iter().next().expect("empty tensor")
    }

    pub fn grad(&self) -> Option<Arr> {
        self.0.grad.borrow().clone()
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn accum_grad(&self, g: Arr) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Backpropagate from a single-element tensor, filling `grad` on every
    /// reachable tensor that requires grad.
    pub fn backward(&self) {
        assert!(self.requires_grad(), "backward on a tensor that requires no grad");
        assert_eq!(self.0.value.len(), 1, "backward expects a scalar loss");
        let order = self.topo_order();
        *self.0.grad.borrow_mut() = Some(Arr::ones(self.0.value.raw_dim()));
        for node in order.iter().rev() {
            let g = match node.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            if let Some(back) = &node.0.backward {
                let parent_grads = back(&node.0.value, &g, &node.0.parents);
                debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        debug_assert_eq!(pg.shape(), p.shape());
                        p.accum_grad(pg);
                    }
                }
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        // Iterative post-order DFS over grad-requiring nodes. Pointer identity
        // is safe: every node stays alive through the traversal.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((node, child_idx)) = stack.last_mut() {
            let parents = &node.0.parents;
            if *child_idx < parents.len() {
                let child = parents[*child_idx].clone();
                *child_idx += 1;
                if child.requires_grad() && !visited.contains(&child.ptr()) {
                    visited.insert(child.ptr());
                    stack.push((child, 0));
                }
            } else {
                order.push(node.clone());
                stack.pop();
            }
        }
        order
    }

    fn v2(&self) -> ndarray::ArrayView2<'_, f64> {
        self.0.value.view().into_dimensionality::<Ix2>().expect("expected 2-d tensor")
    }
}

fn to2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d array")
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let value = a.value() + b.value();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|_, g, ps| {
            vec![
                ps[0].requires_grad().then(|| g.clone()),
                ps[1].requires_grad().then(|| g.clone()),
            ]
        }),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
    let value = a.value() - b.value();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|_, g, ps| {
            vec![
                ps[0].requires_grad().then(|| g.clone()),
                ps[1].requires_grad().then(|| -g),
            ]
        }),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
    let value = a.value() * b.value();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|_, g, ps| {
            vec![
                ps[0].requires_grad().then(|| g * ps[1].value()),
                ps[1].requires_grad().then(|| g * ps[0].value()),
            ]
        }),
    )
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let value = a.value() * c;
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |_, g, _| vec![Some(g * c)]),
    )
}

pub fn sq(a: &Tensor) -> Tensor {
    let value = a.value().mapv(|x| x * x);
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(|_, g, ps| vec![Some(g * &(ps[0].value() * 2.0))]),
    )
}

pub fn silu(a: &Tensor) -> Tensor {
    let value = a.value().mapv(|x| x * sigmoid(x));
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(|_, g, ps| {
            let dx = ps[0].value().mapv(|x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            });
            vec![Some(g * &dx)]
        }),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Tensor {
    let value = a
        .value()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape element count mismatch");
    let orig: Vec<usize> = a.shape().to_vec();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |_, g, _| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape back"),
            )]
        }),
    )
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let value = ArrayD::from_elem(IxDyn(&[]), a.value().sum());
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(|_, g, ps| {
            let gv = *g.iter().next().unwrap();
            vec![Some(Arr::from_elem(ps[0].value().raw_dim(), gv))]
        }),
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.value().len() as f64;
    let value = ArrayD::from_elem(IxDyn(&[]), a.value().sum() / n);
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |_, g, ps| {
            let gv = *g.iter().next().unwrap() / n;
            vec![Some(Arr::from_elem(ps[0].value().raw_dim(), gv))]
        }),
    )
}

/// Mean squared error between two same-shape tensors; the graph counterpart
/// of `diffusion::eps_loss`.
pub fn mse(a: &Tensor, b: &Tensor) -> Tensor {
    mean_all(&sq(&sub(a, b)))
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let value = a.v2().dot(&b.v2()).into_dyn();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|_, g, ps| {
            let g2 = to2(g);
            let da = ps[0]
                .requires_grad()
                .then(|| g2.dot(&ps[1].v2().t()).into_dyn());
            let db = ps[1]
                .requires_grad()
                .then(|| ps[0].v2().t().dot(&g2).into_dyn());
            vec![da, db]
        }),
    )
}

pub fn transpose(a: &Tensor) -> Tensor {
    let value = a.v2().t().as_standard_layout().into_owned().into_dyn();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(|_, g, _| {
            vec![Some(to2(g).t().as_standard_layout().into_owned().into_dyn())]
        }),
    )
}

/// Add a length-d row vector to every row of an (n, d) matrix.
pub fn add_rowvec(x: &Tensor, b: &Tensor) -> Tensor {
    let xv = x.v2();
    let bv = b.0.value.view().into_dimensionality::<Ix1>().expect("bias must be 1-d");
    assert_eq!(xv.ncols(), bv.len(), "add_rowvec width mismatch");
    let value = (&xv + &bv).into_dyn();
    Tensor::from_op(
        value,
        vec![x.clone(), b.clone()],
        Box::new(|_, g, ps| {
            let g2 = to2(g);
            vec![
                ps[0].requires_grad().then(|| g.clone()),
                ps[1].requires_grad().then(|| g2.sum_axis(ndarray::Axis(0)).into_dyn()),
            ]
        }),
    )
}

/// Add a length-r column vector to every column of an (r, c) matrix.
pub fn add_colvec(x: &Tensor, b: &Tensor) -> Tensor {
    let xv = x.v2();
    let bv = b.0.value.view().into_dimensionality::<Ix1>().expect("bias must be 1-d");
    assert_eq!(xv.nrows(), bv.len(), "add_colvec height mismatch");
    let mut value = xv.to_owned();
    for (mut row, &bias) in value.rows_mut().into_iter().zip(bv.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    Tensor::from_op(
        value.into_dyn(),
        vec![x.clone(), b.clone()],
        Box::new(|_, g, ps| {
            let g2 = to2(g);
            vec![
                ps[0].requires_grad().then(|| g.clone()),
                ps[1].requires_grad().then(|| g2.sum_axis(ndarray::Axis(1)).into_dyn()),
            ]
        }),
    )
}

/// Gather rows of a 2-d tensor by index; backward scatter-adds into the source.
pub fn gather_rows(table: &Tensor, indices: &[usize]) -> Tensor {
    let tv = table.v2();
    let mut out = ndarray::Array2::<f64>::zeros((indices.len(), tv.ncols()));
    for (r, &i) in indices.iter().enumerate() {
        out.row_mut(r).assign(&tv.row(i));
    }
    let idx: Vec<usize> = indices.to_vec();
    Tensor::from_op(
        out.into_dyn(),
        vec![table.clone()],
        Box::new(move |_, g, ps| {
            let g2 = to2(g);
            let shape = ps[0].v2().raw_dim();
            let mut dt = ndarray::Array2::<f64>::zeros(shape);
            for (r, &i) in idx.iter().enumerate() {
                let mut row = dt.row_mut(i);
                row += &g2.row(r);
            }
            vec![Some(dt.into_dyn())]
        }),
    )
}

/// Stack a list of (n_i, d) tensors along rows.
pub fn concat_rows(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let d = parts[0].v2().ncols();
    let total: usize = parts.iter().map(|p| p.v2().nrows()).sum();
    let mut out = ndarray::Array2::<f64>::zeros((total, d));
    let mut r = 0;
    let mut splits = Vec::with_capacity(parts.len());
    for p in parts {
        let pv = p.v2();
        out.slice_mut(ndarray::s![r..r + pv.nrows(), ..]).assign(&pv);
        splits.push((r, pv.nrows()));
        r += pv.nrows();
    }
    Tensor::from_op(
        out.into_dyn(),
        parts.to_vec(),
        Box::new(move |_, g, ps| {
            let g2 = to2(g);
            splits
                .iter()
                .zip(ps)
                .map(|(&(start, len), p)| {
                    p.requires_grad()
                        .then(|| g2.slice(ndarray::s![start..start + len, ..]).to_owned().into_dyn())
                })
                .collect()
        }),
    )
}

// ---------------------------------------------------------------------------
// Normalization and attention pieces
// ---------------------------------------------------------------------------

/// Row-wise softmax on a 2-d tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let xv = x.v2();
    let mut out = xv.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(|value, g, _| {
            let y = to2(value);
            let g2 = to2(g);
            let mut dx = y.to_owned();
            for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                let dot: f64 = g2.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = y[[i, j]] * (g2[[i, j]] - dot);
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Row-wise layer normalization with affine parameters.
pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let xv = x.v2();
    let d = xv.ncols();
    let gv = gamma.0.value.view().into_dimensionality::<Ix1>().expect("gamma 1-d");
    let bv = beta.0.value.view().into_dimensionality::<Ix1>().expect("beta 1-d");
    assert_eq!(gv.len(), d);
    assert_eq!(bv.len(), d);

    let mut xhat = xv.to_owned();
    let mut inv_std = Vec::with_capacity(xv.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        row.mapv_inplace(|v| (v - mean) * istd);
    }
    let mut out = xhat.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * gv[j] + bv[j];
        }
    }
    let xhat_saved = xhat;
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |_, g, ps| {
            let g2 = to2(g);
            let d_f = xhat_saved.ncols() as f64;
            let gval = ps[1].0.value.view().into_dimensionality::<Ix1>().unwrap();

            let dx = ps[0].requires_grad().then(|| {
                let mut dx = ndarray::Array2::<f64>::zeros(xhat_saved.raw_dim());
                for i in 0..xhat_saved.nrows() {
                    // d xhat
                    let dxhat: Vec<f64> =
                        (0..xhat_saved.ncols()).map(|j| g2[[i, j]] * gval[j]).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d_f;
                    let mean_dxhat_xhat: f64 = dxhat
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * xhat_saved[[i, j]])
                        .sum::<f64>()
                        / d_f;
                    for j in 0..xhat_saved.ncols() {
                        dx[[i, j]] = inv_std[i]
                            * (dxhat[j] - mean_dxhat - xhat_saved[[i, j]] * mean_dxhat_xhat);
                    }
                }
                dx.into_dyn()
            });
            let dgamma = ps[1].requires_grad().then(|| {
                let mut dg = ndarray::Array1::<f64>::zeros(xhat_saved.ncols());
                for i in 0..xhat_saved.nrows() {
                    for j in 0..xhat_saved.ncols() {
                        dg[j] += g2[[i, j]] * xhat_saved[[i, j]];
                    }
                }
                dg.into_dyn()
            });
            let dbeta = ps[2]
                .requires_grad()
                .then(|| g2.sum_axis(ndarray::Axis(0)).into_dyn());
            vec![dx, dgamma, dbeta]
        }),
    )
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn im2col3(x: &ndarray::ArrayView3<'_, f64>) -> ndarray::Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = ndarray::Array2::<f64>::zeros((c * 9, h * w));
    for ci in 0..c {
        for k in 0..9 {
            let (di, dj) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
            let row = ci * 9 + k;
            for i in 0..h {
                let si = i as isize + di;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let sj = j as isize + dj;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    cols[[row, i * w + j]] = x[[ci, si as usize, sj as usize]];
                }
            }
        }
    }
    cols
}

fn col2im3(dcols: &ndarray::ArrayView2<'_, f64>, c: usize, h: usize, w: usize) -> ndarray::Array3<f64> {
    let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for k in 0..9 {
            let (di, dj) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
            let row = ci * 9 + k;
            for i in 0..h {
                let si = i as isize + di;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let sj = j as isize + dj;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    dx[[ci, si as usize, sj as usize]] += dcols[[row, i * w + j]];
                }
            }
        }
    }
    dx
}

/// 3x3 same-padding convolution on a (C_in, H, W) tensor with kernel
/// (C_out, C_in, 3, 3) and bias (C_out,).
pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let xv = x.0.value.view().into_dimensionality::<Ix3>().expect("conv input 3-d");
    let wv = w
        .0
        .value
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("conv kernel 4-d");
    let (c_out, c_in, kh, kw) = wv.dim();
    assert_eq!((kh, kw), (3, 3), "conv3x3 expects 3x3 kernels");
    let (ci, h, wd) = xv.dim();
    assert_eq!(ci, c_in, "conv channel mismatch");
    let bv = b.0.value.view().into_dimensionality::<Ix1>().expect("conv bias 1-d");
    assert_eq!(bv.len(), c_out);

    let cols = im2col3(&xv);
    let w2 = wv.to_shape((c_out, c_in * 9)).expect("kernel reshape").to_owned();
    let mut out2 = w2.dot(&cols);
    for (mut row, &bias) in out2.rows_mut().into_iter().zip(bv.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    let value = out2
        .into_shape_with_order((c_out, h, wd))
        .expect("conv output reshape")
        .into_dyn();

    Tensor::from_op(
        value,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |_, g, ps| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let (co, hh, ww) = g3.dim();
            let g2 = g3.to_shape((co, hh * ww)).unwrap().to_owned();
            let xval = ps[0].0.value.view().into_dimensionality::<Ix3>().unwrap();
            let wval = ps[1]
                .0
                .value
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let (co2, ci2, _, _) = wval.dim();
            let w2b = wval.to_shape((co2, ci2 * 9)).unwrap().to_owned();

            // cols are recomputed rather than captured to keep graphs small.
            let need_w = ps[1].requires_grad();
            let need_x = ps[0].requires_grad();
            let cols_b = if need_w { Some(im2col3(&xval)) } else { None };

            let dw = need_w.then(|| {
                let dw2 = g2.dot(&cols_b.as_ref().unwrap().t());
                dw2.into_shape_with_order((co2, ci2, 3, 3)).unwrap().into_dyn()
            });
            let dx = need_x.then(|| {
                let dcols = w2b.t().dot(&g2);
                col2im3(&dcols.view(), ci2, hh, ww).into_dyn()
            });
            let db = ps[2]
                .requires_grad()
                .then(|| g2.sum_axis(ndarray::Axis(1)).into_dyn());
            vec![dx, dw, db]
        }),
    )
}

// ---------------------------------------------------------------------------
// Straight-through projection
// ---------------------------------------------------------------------------

/// Forward takes the supplied `projected` value; backward passes the gradient
/// to `v` unchanged (identity), implementing v' = sg[NN(v) - v] + v.
pub fn straight_through_op(v: &Tensor, projected: Arr) -> Tensor {
    assert_eq!(v.shape(), projected.shape(), "straight-through shape mismatch");
    Tensor::from_op(
        projected,
        vec![v.clone()],
        Box::new(|_, g, _| vec![Some(g.clone())]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff_grad;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        crate::diffusion::sample_standard_normal(shape, &mut rng)
    }

    fn check_grad<F>(inputs: &[Arr], f: F, tol: f64)
    where
        F: Fn(&[Tensor]) -> Tensor,
    {
        let leaves: Vec<Tensor> = inputs.iter().map(|a| Tensor::leaf(a.clone(), true)).collect();
        let loss = f(&leaves);
        loss.backward();
        for (i, leaf) in leaves.iter().enumerate() {
            let analytic = leaf.grad().expect("missing grad");
            let fd = central_diff_grad(inputs, i, 1e-5, |xs| {
                let ls: Vec<Tensor> = xs.iter().map(|a| Tensor::leaf(a.clone(), true)).collect();
                f(&ls).scalar()
            });
            for (a, n) in analytic.iter().zip(fd.iter()) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / denom < tol,
                    "input {i}: analytic {a} vs fd {n}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        let a = randn(&[3, 4], 1);
        let b = randn(&[3, 4], 2);
        check_grad(&[a, b], |t| mean_all(&mul(&silu(&t[0]), &sq(&sub(&t[0], &t[1])))), 1e-6);
    }

    #[test]
    fn grad_matmul_transpose() {
        let a = randn(&[3, 4], 3);
        let b = randn(&[4, 2], 4);
        check_grad(&[a, b], |t| sum_all(&sq(&matmul(&t[0], &t[1]))), 1e-6);
        let c = randn(&[3, 5], 5);
        check_grad(&[c], |t| mean_all(&matmul(&transpose(&t[0]), &t[0])), 1e-6);
    }

    #[test]
    fn grad_softmax_layernorm() {
        let x = randn(&[4, 6], 6);
        check_grad(&[x.clone()], |t| mean_all(&sq(&softmax_rows(&t[0]))), 1e-5);
        let gamma = randn(&[6], 7) * 0.2 + 1.0;
        let beta = randn(&[6], 8) * 0.1;
        check_grad(
            &[x, gamma, beta],
            |t| mean_all(&sq(&layer_norm_rows(&t[0], &t[1], &t[2], 1e-5))),
            1e-5,
        );
    }

    #[test]
    fn grad_conv3x3() {
        let x = randn(&[2, 5, 5], 9);
        let w = randn(&[3, 2, 3, 3], 10) * 0.3;
        let b = randn(&[3], 11) * 0.1;
        check_grad(&[x, w, b], |t| mean_all(&sq(&conv3x3(&t[0], &t[1], &t[2]))), 1e-5);
    }

    #[test]
    fn grad_gather_concat_rowvec() {
        let table = randn(&[7, 3], 12);
        let bias = randn(&[3], 13);
        check_grad(
            &[table, bias],
            |t| {
                let g1 = gather_rows(&t[0], &[0, 2, 2, 6]);
                let g2 = gather_rows(&t[0], &[1, 5]);
                let cat = concat_rows(&[g1, g2]);
                mean_all(&sq(&add_rowvec(&cat, &t[1])))
            },
            1e-6,
        );
    }

    #[test]
    fn straight_through_identity_gradient() {
        let v = Tensor::leaf(randn(&[2, 3], 14), true);
        let projected = randn(&[2, 3], 15);
        let vp = straight_through_op(&v, projected.clone());
        assert_eq!(vp.value(), &projected);
        let s = sum_all(&vp);
        s.backward();
        let g = v.grad().unwrap();
        assert_eq!(g, ArrayD::from_elem(IxDyn(&[2, 3]), 1.0));
    }

    #[test]
    fn constants_are_skipped_in_backward() {
        let a = Tensor::leaf(randn(&[2, 2], 16), true);
        let c = Tensor::constant(randn(&[2, 2], 17));
        let loss = mean_all(&mul(&a, &c));
        loss.backward();
        assert!(a.grad().is_some());
        assert!(c.grad().is_none());
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        let a = Tensor::leaf(ArrayD::from_elem(IxDyn(&[2]), 3.0), true);
        // loss = sum(a*a + a) -> d/da = 2a + 1 = 7
        let loss = sum_all(&add(&mul(&a, &a), &a));
        loss.backward();
        let g = a.grad().unwrap();
        for v in g.iter() {
            assert!((v - 7.0).abs() < 1e-12);
        }
    }
}
