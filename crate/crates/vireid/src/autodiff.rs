//! Minimal reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! Define-by-run tape: every operation records its parents and a
//! vector-Jacobian-product closure; [`Tape::backward`] replays the tape in
//! reverse push order and accumulates gradients. All node values are kept in
//! standard (row-major, contiguous) layout so reshapes are free.
//!
//! The op set is exactly what the encoders, fusion block and losses need:
//! dense linear algebra, conv2d (im2col-backed), row softmaxes, row
//! normalization, gathers and concatenations. Everything is `f64`; the
//! gradient-check suite holds this code to central finite differences.

use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};
use std::cell::RefCell;

type Vjp = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    vjp: Option<Vjp>,
    requires_grad: bool,
}

/// Gradient tape. One tape per forward/backward pass; ops append nodes.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node. Cheap to copy; tied to its tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&ArrayD<f64>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros when the node never received one.
    pub fn get_or_zeros(&self, var: Var<'_>) -> ArrayD<f64> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(var.shape()),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf node. `requires_grad` marks trainable inputs.
    pub fn leaf(&self, value: ArrayD<f64>, requires_grad: bool) -> Var<'_> {
        self.push(value, Vec::new(), None, requires_grad)
    }

    /// Leaf that never receives gradients (data, masks, frozen params).
    pub fn constant(&self, value: ArrayD<f64>) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(
        &self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        vjp: Option<Vjp>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents, vjp, requires_grad });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> ArrayD<f64> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar node. Returns per-node gradients.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward seed must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(ArrayD::ones(nodes[loss.id].value.raw_dim()));
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(vjp) = &node.vjp {
                let contribs = vjp(&grad);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (parent, contrib) in node.parents.iter().zip(contribs) {
                    if !nodes[*parent].requires_grad {
                        continue;
                    }
                    match &mut grads[*parent] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected rank-2 array")
}

fn row_sums(a: &ArrayD<f64>) -> ArrayD<f64> {
    as2(a).sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-(x.abs())).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn value(&self) -> ArrayD<f64> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> IxDyn {
        IxDyn(&self.value().shape().to_vec())
    }

    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    fn unary(
        self,
        value: ArrayD<f64>,
        vjp: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var<'t> {
        let rg = self.tape.requires(self.id);
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(move |g| vec![vjp(g)])),
            rg,
        )
    }

    fn binary(
        self,
        other: Var<'t>,
        value: ArrayD<f64>,
        vjp: impl Fn(&ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>) + 'static,
    ) -> Var<'t> {
        let rg = self.tape.requires(self.id) || self.tape.requires(other.id);
        self.tape.push(
            value,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                let (da, db) = vjp(g);
                vec![da, db]
            })),
            rg,
        )
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.binary(other, &a + &b, |g| (g.clone(), g.clone()))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.binary(other, &a - &b, |g| (g.clone(), g.mapv(|x| -x)))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let (ac, bc) = (a.clone(), b.clone());
        self.binary(other, &a * &b, move |g| (g * &bc, g * &ac))
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value();
        self.unary(v.mapv(|x| -x), |g| g.mapv(|x| -x))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value();
        self.unary(v.mapv(|x| c * x), move |g| g.mapv(|x| c * x))
    }

    /// Elementwise add of a constant array (same shape). Gradient passes through.
    pub fn add_const(self, arr: &ArrayD<f64>) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.shape(), arr.shape(), "add_const: shape mismatch");
        self.unary(&v + arr, |g| g.clone())
    }

    /// Elementwise multiply by a constant array (same shape).
    pub fn mul_const(self, arr: &ArrayD<f64>) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.shape(), arr.shape(), "mul_const: shape mismatch");
        let c = arr.clone();
        self.unary(&v * arr, move |g| g * &c)
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (a2, b2) = (as2(&a).to_owned(), as2(&b).to_owned());
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dims differ");
        let value = a2.dot(&b2).into_dyn();
        self.binary(other, value, move |g| {
            let g2 = as2(g);
            (
                g2.dot(&b2.t()).into_dyn(),
                a2.t().dot(&g2).into_dyn(),
            )
        })
    }

    /// Rank-2 transpose.
    pub fn t(self) -> Var<'t> {
        let v = self.value();
        let vt = as2(&v).t().to_owned().into_dyn();
        self.unary(vt, |g| as2(g).t().to_owned().into_dyn())
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value();
        let mask = v.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.unary(v.mapv(|x| x.max(0.0)), move |g| g * &mask)
    }

    pub fn exp(self) -> Var<'t> {
        let y = self.value().mapv(f64::exp);
        let yc = y.clone();
        self.unary(y, move |g| g * &yc)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(self) -> Var<'t> {
        let x = self.value();
        let sig = x.mapv(stable_sigmoid);
        self.unary(x.mapv(stable_softplus), move |g| g * &sig)
    }

    /// `sqrt(max(x, floor))`; gradient is zero in the clamped region.
    pub fn sqrt_clamped(self, floor: f64) -> Var<'t> {
        let x = self.value();
        let y = x.mapv(|v| v.max(floor).sqrt());
        let dydx = ndarray::Zip::from(&x).and(&y).map_collect(|&xv, &yv| {
            if xv > floor {
                0.5 / yv
            } else {
                0.0
            }
        });
        self.unary(y, move |g| g * &dydx)
    }

    /// Row-wise L2 normalization with the norm clamped at `eps`.
    pub fn normalize_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let x2 = as2(&x).to_owned();
        let norms: Array1<f64> =
            x2.rows().into_iter().map(|r| r.dot(&r).sqrt().max(eps)).collect();
        let mut y = x2.clone();
        for (mut row, &n) in y.rows_mut().into_iter().zip(norms.iter()) {
            row.mapv_inplace(|v| v / n);
        }
        let yc = y.clone();
        let x2c = x2;
        self.unary(y.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut dx = Array2::<f64>::zeros(g2.raw_dim());
            for i in 0..g2.nrows() {
                let gr = g2.row(i);
                let yr = yc.row(i);
                let n = norms[i];
                let raw_norm = x2c.row(i).dot(&x2c.row(i)).sqrt();
                if raw_norm > eps {
                    let proj = gr.dot(&yr);
                    for j in 0..g2.ncols() {
                        dx[[i, j]] = (gr[j] - yr[j] * proj) / n;
                    }
                } else {
                    // below the clamp the map is linear: y = x / eps
                    for j in 0..g2.ncols() {
                        dx[[i, j]] = gr[j] / eps;
                    }
                }
            }
            dx.into_dyn()
        })
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let x = as2(&self.value()).to_owned();
        let mut y = x;
        for mut row in y.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let yc = y.clone();
        self.unary(y.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut dx = Array2::<f64>::zeros(g2.raw_dim());
            for i in 0..g2.nrows() {
                let dot = g2.row(i).dot(&yc.row(i));
                for j in 0..g2.ncols() {
                    dx[[i, j]] = yc[[i, j]] * (g2[[i, j]] - dot);
                }
            }
            dx.into_dyn()
        })
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = as2(&self.value()).to_owned();
        let mut y = x;
        for mut row in y.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
            row.mapv_inplace(|v| v - lse);
        }
        let yc = y.clone();
        self.unary(y.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut dx = Array2::<f64>::zeros(g2.raw_dim());
            for i in 0..g2.nrows() {
                let gsum: f64 = g2.row(i).sum();
                for j in 0..g2.ncols() {
                    dx[[i, j]] = g2[[i, j]] - yc[[i, j]].exp() * gsum;
                }
            }
            dx.into_dyn()
        })
    }

    /// Sum of all entries, as a `[1]`-shaped node.
    pub fn sum_all(self) -> Var<'t> {
        let v = self.value();
        let shape = v.raw_dim();
        let s = v.sum();
        self.unary(
            ArrayD::from_elem(IxDyn(&[1]), s),
            move |g| ArrayD::from_elem(shape.clone(), g[[0]]),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Row sums of a rank-2 node, shape `(n, 1)`.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value();
        let ncols = as2(&v).ncols();
        self.unary(row_sums(&v), move |g| {
            let g2 = as2(g);
            let mut out = Array2::<f64>::zeros((g2.nrows(), ncols));
            for i in 0..g2.nrows() {
                out.row_mut(i).fill(g2[[i, 0]]);
            }
            out.into_dyn()
        })
    }

    /// Mean over axis 0 of a rank-2 node, shape `(1, d)`.
    pub fn mean_axis0(self) -> Var<'t> {
        let v = as2(&self.value()).to_owned();
        let n = v.nrows();
        let mean = v.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.unary(mean.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut out = Array2::<f64>::zeros((n, g2.ncols()));
            for mut row in out.rows_mut() {
                for j in 0..g2.ncols() {
                    row[j] = g2[[0, j]] / n as f64;
                }
            }
            out.into_dyn()
        })
    }

    /// Broadcast-add a `(n, 1)` column to a `(n, m)` matrix.
    pub fn add_colvec(self, col: Var<'t>) -> Var<'t> {
        let (a, v) = (self.value(), col.value());
        assert_eq!(as2(&a).nrows(), as2(&v).nrows(), "add_colvec: row mismatch");
        assert_eq!(as2(&v).ncols(), 1, "add_colvec: expected (n,1)");
        self.binary(col, (&as2(&a) + &as2(&v)).into_dyn(), |g| {
            (g.clone(), row_sums(g))
        })
    }

    /// Broadcast-add a `(1, m)` row to a `(n, m)` matrix.
    pub fn add_rowvec(self, row: Var<'t>) -> Var<'t> {
        let (a, v) = (self.value(), row.value());
        assert_eq!(as2(&a).ncols(), as2(&v).ncols(), "add_rowvec: col mismatch");
        assert_eq!(as2(&v).nrows(), 1, "add_rowvec: expected (1,m)");
        self.binary(row, (&as2(&a) + &as2(&v)).into_dyn(), |g| {
            let col_sums = as2(g).sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
            (g.clone(), col_sums)
        })
    }

    /// Broadcast-multiply a `(n, m)` matrix by a `(n, 1)` column.
    pub fn mul_colvec(self, col: Var<'t>) -> Var<'t> {
        let (a, v) = (self.value(), col.value());
        let (a2, v2) = (as2(&a).to_owned(), as2(&v).to_owned());
        assert_eq!(v2.ncols(), 1, "mul_colvec: expected (n,1)");
        let value = (&a2 * &v2).into_dyn();
        self.binary(col, value, move |g| {
            let g2 = as2(g);
            let da = (&g2 * &v2).into_dyn();
            let dv = (&g2 * &a2).sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn();
            (da, dv)
        })
    }

    /// Broadcast-divide a `(n, m)` matrix by a `(n, 1)` column.
    pub fn div_colvec(self, col: Var<'t>) -> Var<'t> {
        let (a, v) = (self.value(), col.value());
        let (a2, v2) = (as2(&a).to_owned(), as2(&v).to_owned());
        assert_eq!(v2.ncols(), 1, "div_colvec: expected (n,1)");
        let value = (&a2 / &v2).into_dyn();
        self.binary(col, value, move |g| {
            let g2 = as2(g);
            let da = (&g2 / &v2).into_dyn();
            let num = (&g2 * &a2).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dv = (-&num / &(&v2 * &v2)).into_dyn();
            (da, dv)
        })
    }

    /// Select outer-axis slices by index (duplicates allowed). Backward scatter-adds.
    pub fn gather_axis0(self, indices: &[usize]) -> Var<'t> {
        let v = self.value();
        let n = v.shape()[0];
        for &i in indices {
            assert!(i < n, "gather_axis0: index {i} out of range {n}");
        }
        let idx = indices.to_vec();
        let value = v.select(Axis(0), indices);
        let in_shape = v.raw_dim();
        self.unary(value, move |g| {
            let mut dx = ArrayD::<f64>::zeros(in_shape.clone());
            for (row, &src) in idx.iter().enumerate() {
                let gs = g.index_axis(Axis(0), row);
                let mut slot = dx.index_axis_mut(Axis(0), src);
                slot += &gs;
            }
            dx
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let old = v.raw_dim();
        let new = v
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape");
        self.unary(new, move |g| {
            g.clone().into_shape_with_order(old.clone()).unwrap()
        })
    }

    /// Diagonal of a square rank-2 node, shape `(n, 1)`.
    pub fn diag(self) -> Var<'t> {
        let v = as2(&self.value()).to_owned();
        assert_eq!(v.nrows(), v.ncols(), "diag: matrix not square");
        let n = v.nrows();
        let d = Array2::from_shape_fn((n, 1), |(i, _)| v[[i, i]]);
        self.unary(d.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut dx = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                dx[[i, i]] = g2[[i, 0]];
            }
            dx.into_dyn()
        })
    }

    /// Global average pooling: `(N, C, H, W)` → `(N, C)`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let v = self.value();
        let v4 = v.view().into_dimensionality::<Ix4>().expect("gap: expected rank-4");
        let (n, c, h, w) = v4.dim();
        let area = (h * w) as f64;
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                out[[i, ch]] = v4.slice(ndarray::s![i, ch, .., ..]).sum() / area;
            }
        }
        self.unary(out.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for i in 0..n {
                for ch in 0..c {
                    dx.slice_mut(ndarray::s![i, ch, .., ..]).fill(g2[[i, ch]] / area);
                }
            }
            dx.into_dyn()
        })
    }

    /// 2-D convolution, zero padding, square stride. Input `(N, Ci, H, W)`,
    /// weight `(Co, Ci, kh, kw)`, optional bias `(Co)`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let x4 = x.view().into_dimensionality::<Ix4>().expect("conv2d: input rank-4");
        let w4 = w.view().into_dimensionality::<Ix4>().expect("conv2d: weight rank-4");
        let (n, ci, h, wd) = x4.dim();
        let (co, ci_w, kh, kw) = w4.dim();
        assert_eq!(ci, ci_w, "conv2d: channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let cols = im2col(&x4.to_owned(), kh, kw, stride, pad, oh, ow);
        let w_mat = w4.to_owned().into_shape_with_order((co, ci * kh * kw)).unwrap();
        let y_mat = w_mat.dot(&cols); // (co, n*oh*ow)

        let mut out = ndarray::Array4::<f64>::zeros((n, co, oh, ow));
        for b in 0..n {
            for c in 0..co {
                for i in 0..oh {
                    for j in 0..ow {
                        out[[b, c, i, j]] = y_mat[[c, b * oh * ow + i * ow + j]];
                    }
                }
            }
        }
        if let Some(bv) = bias {
            let bval = bv.value();
            let b1 = bval.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
            assert_eq!(b1.len(), co, "conv2d: bias length mismatch");
            for c in 0..co {
                out.slice_mut(ndarray::s![.., c, .., ..]).mapv_inplace(|v| v + b1[c]);
            }
            let x_shape = (n, ci, h, wd);
            let rg = self.tape.requires(self.id)
                || self.tape.requires(weight.id)
                || self.tape.requires(bv.id);
            let cols_c = cols;
            let w_mat_c = w_mat;
            return self.tape.push(
                out.into_dyn(),
                vec![self.id, weight.id, bv.id],
                Some(Box::new(move |g| {
                    let (dx, dw) = conv2d_input_weight_grads(
                        g, &cols_c, &w_mat_c, x_shape, (co, ci, kh, kw), stride, pad, oh, ow,
                    );
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let mut db = Array1::<f64>::zeros(co);
                    for c in 0..co {
                        db[c] = g4.slice(ndarray::s![.., c, .., ..]).sum();
                    }
                    vec![dx, dw, db.into_dyn()]
                })),
                rg,
            );
        }

        let x_shape = (n, ci, h, wd);
        self.binary(weight, out.into_dyn(), move |g| {
            conv2d_input_weight_grads(
                g, &cols, &w_mat, x_shape, (co, ci, kh, kw), stride, pad, oh, ow,
            )
        })
    }
}

/// Concatenate nodes along axis 0.
pub fn concat_axis0<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_axis0: empty input");
    let values: Vec<ArrayD<f64>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let value = concatenate(Axis(0), &views).expect("concat_axis0: shape mismatch");
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
    let rg = parts.iter().any(|p| tape.requires(p.id));
    let parent_ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push(
        value,
        parent_ids,
        Some(Box::new(move |g| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut offset = 0;
            for &s in &sizes {
                let indices: Vec<usize> = (offset..offset + s).collect();
                out.push(g.select(Axis(0), &indices));
                offset += s;
            }
            out
        })),
        rg,
    )
}

fn im2col(
    x: &ndarray::Array4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, ci, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((ci * kh * kw, n * oh * ow));
    for b in 0..n {
        for c in 0..ci {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = c * kh * kw + ki * kw + kj;
                    for i in 0..oh {
                        let src_i = (i * stride + ki) as isize - pad as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let src_j = (j * stride + kj) as isize - pad as isize;
                            if src_j < 0 || src_j >= w as isize {
                                continue;
                            }
                            cols[[row, b * oh * ow + i * ow + j]] =
                                x[[b, c, src_i as usize, src_j as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    x_shape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array4<f64> {
    let (n, ci, h, w) = x_shape;
    let mut dx = ndarray::Array4::<f64>::zeros((n, ci, h, w));
    for b in 0..n {
        for c in 0..ci {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = c * kh * kw + ki * kw + kj;
                    for i in 0..oh {
                        let src_i = (i * stride + ki) as isize - pad as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let src_j = (j * stride + kj) as isize - pad as isize;
                            if src_j < 0 || src_j >= w as isize {
                                continue;
                            }
                            dx[[b, c, src_i as usize, src_j as usize]] +=
                                dcols[[row, b * oh * ow + i * ow + j]];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn conv2d_input_weight_grads(
    g: &ArrayD<f64>,
    cols: &Array2<f64>,
    w_mat: &Array2<f64>,
    x_shape: (usize, usize, usize, usize),
    w_shape: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let (n, _, _, _) = x_shape;
    let (co, ci, kh, kw) = w_shape;
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let mut g_mat = Array2::<f64>::zeros((co, n * oh * ow));
    for b in 0..n {
        for c in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    g_mat[[c, b * oh * ow + i * ow + j]] = g4[[b, c, i, j]];
                }
            }
        }
    }
    let dw = g_mat
        .dot(&cols.t())
        .into_shape_with_order((co, ci, kh, kw))
        .unwrap()
        .into_dyn();
    let dcols = w_mat.t().dot(&g_mat);
    let dx = col2im(&dcols, x_shape, kh, kw, stride, pad, oh, ow).into_dyn();
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences of `f` at `x0`, perturbing one entry at a time.
    fn finite_diff(
        x0: &ArrayD<f64>,
        step: f64,
        f: impl Fn(&ArrayD<f64>) -> f64,
    ) -> ArrayD<f64> {
        let mut grad = ArrayD::zeros(x0.raw_dim());
        let flat: Vec<usize> = (0..x0.len()).collect();
        for &k in &flat {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            *plus.iter_mut().nth(k).unwrap() += step;
            *minus.iter_mut().nth(k).unwrap() -= step;
            let d = (f(&plus) - f(&minus)) / (2.0 * step);
            *grad.iter_mut().nth(k).unwrap() = d;
        }
        grad
    }

    fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| {
                let denom = x.abs().max(y.abs()).max(1e-6);
                (x - y).abs() / denom
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn add_mul_backward() {
        let tape = Tape::new();
        let a = tape.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn(), true);
        let b = tape.leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn(), true);
        let loss = a.mul(b).sum_all();
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap(), &b.value());
        assert_eq!(grads.get(b).unwrap(), &a.value());
    }

    #[test]
    fn matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = randn(&mut rng, &[3, 4]);
        let b0 = randn(&mut rng, &[4, 2]);
        let eval = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
            let tape = Tape::new();
            let av = tape.leaf(a.clone(), true);
            let bv = tape.leaf(b.clone(), true);
            av.matmul(bv).sum_all().scalar()
        };
        let tape = Tape::new();
        let av = tape.leaf(a0.clone(), true);
        let bv = tape.leaf(b0.clone(), true);
        let loss = av.matmul(bv).sum_all();
        let grads = tape.backward(loss);
        let fd_a = finite_diff(&a0, 1e-6, |a| eval(a, &b0));
        let fd_b = finite_diff(&b0, 1e-6, |b| eval(&a0, b));
        assert!(max_rel_err(grads.get(av).unwrap(), &fd_a) < 1e-7);
        assert!(max_rel_err(grads.get(bv).unwrap(), &fd_b) < 1e-7);
    }

    #[test]
    fn softmax_and_normalize_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = randn(&mut rng, &[3, 5]);
        // weight the output so the gradient is non-trivial
        let w = randn(&mut rng, &[3, 5]);
        for (name, f) in [
            ("softmax", 0usize),
            ("log_softmax", 1usize),
            ("normalize", 2usize),
        ] {
            let eval = |x: &ArrayD<f64>| {
                let tape = Tape::new();
                let xv = tape.leaf(x.clone(), true);
                let y = match f {
                    0 => xv.softmax_rows(),
                    1 => xv.log_softmax_rows(),
                    _ => xv.normalize_rows(1e-12),
                };
                y.mul_const(&w).sum_all().scalar()
            };
            let tape = Tape::new();
            let xv = tape.leaf(x0.clone(), true);
            let y = match f {
                0 => xv.softmax_rows(),
                1 => xv.log_softmax_rows(),
                _ => xv.normalize_rows(1e-12),
            };
            let loss = y.mul_const(&w).sum_all();
            let grads = tape.backward(loss);
            let fd = finite_diff(&x0, 1e-6, eval);
            let err = max_rel_err(grads.get(xv).unwrap(), &fd);
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn conv_gap_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randn(&mut rng, &[2, 2, 5, 4]);
        let w0 = randn(&mut rng, &[3, 2, 3, 3]);
        let b0 = randn(&mut rng, &[3]);
        let eval = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let bv = tape.leaf(b.clone(), true);
            xv.conv2d(wv, Some(bv), 2, 1)
                .relu()
                .global_avg_pool()
                .sum_all()
                .scalar()
        };
        let tape = Tape::new();
        let xv = tape.leaf(x0.clone(), true);
        let wv = tape.leaf(w0.clone(), true);
        let bv = tape.leaf(b0.clone(), true);
        let loss = xv
            .conv2d(wv, Some(bv), 2, 1)
            .relu()
            .global_avg_pool()
            .sum_all();
        let grads = tape.backward(loss);
        let fd_x = finite_diff(&x0, 1e-6, |x| eval(x, &w0, &b0));
        let fd_w = finite_diff(&w0, 1e-6, |w| eval(&x0, w, &b0));
        let fd_b = finite_diff(&b0, 1e-6, |b| eval(&x0, &w0, b));
        assert!(max_rel_err(grads.get(xv).unwrap(), &fd_x) < 1e-5);
        assert!(max_rel_err(grads.get(wv).unwrap(), &fd_w) < 1e-5);
        assert!(max_rel_err(grads.get(bv).unwrap(), &fd_b) < 1e-5);
    }

    #[test]
    fn gather_concat_diag_backward() {
        let tape = Tape::new();
        let a = tape.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).into_dyn(), true);
        let gathered = a.gather_axis0(&[2, 0, 2]);
        assert_eq!(
            gathered.value(),
            arr2(&[[5.0, 6.0], [1.0, 2.0], [5.0, 6.0]]).into_dyn()
        );
        let loss = gathered.sum_all();
        let grads = tape.backward(loss);
        // row 2 selected twice -> gradient 2, row 1 never -> 0
        assert_eq!(
            grads.get(a).unwrap(),
            &arr2(&[[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]).into_dyn()
        );

        let tape = Tape::new();
        let p = tape.leaf(arr1(&[1.0, 2.0]).insert_axis(Axis(0)).into_dyn(), true);
        let q = tape.leaf(arr1(&[3.0, 4.0]).insert_axis(Axis(0)).into_dyn(), true);
        let cat = concat_axis0(&tape, &[p, q]);
        let loss = cat.diag().sum_all();
        let grads = tape.backward(loss);
        assert_eq!(grads.get(p).unwrap(), &arr2(&[[1.0, 0.0]]).into_dyn());
        assert_eq!(grads.get(q).unwrap(), &arr2(&[[0.0, 1.0]]).into_dyn());
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(arr2(&[[1.0, 2.0]]).into_dyn(), true);
        let frozen = tape.constant(arr2(&[[3.0, 4.0]]).into_dyn());
        let loss = a.mul(frozen).sum_all();
        let grads = tape.backward(loss);
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(a).unwrap(), &frozen.value());
    }
}
