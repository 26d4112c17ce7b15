use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn, log_sum_exp, softmax_row};
use super::{row_count, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

type Backward = Box<dyn Fn(&[f64], &mut GradBuf)>;

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
    param: Option<ParamId>,
    backward: Option<Backward>,
}

/// Records one forward pass. Single-threaded; build one per step or per example.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient accumulation buffer used while replaying the tape.
pub struct GradBuf {
    slots: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    live: Vec<bool>,
}

impl GradBuf {
    fn slot(&mut self, id: usize) -> Option<&mut [f64]> {
        if !self.live[id] {
            return None;
        }
        let n = self.sizes[id];
        Some(self.slots[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn add(&mut self, id: usize, g: &[f64]) {
        if let Some(s) = self.slot(id) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    fn wants(&self, id: usize) -> bool {
        self.live[id]
    }
}

/// Result of [`Tape::backward`]: gradients for every node that requires them.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.slots[v.id].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(_, p)| *p == id)
            .and_then(|(n, _)| self.slots[*n].as_deref())
    }

    /// Adds parameter gradients into the store. Gradients accumulate; call
    /// [`ParamStore::zero_grad`] between optimizer steps.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.slots[node] {
                let dst = &mut store.get_mut(pid).grad;
                for (a, b) in dst.iter_mut().zip(g) {
                    *a += b;
                }
            }
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
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records no backward rules (inference).
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, t: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.leaf_arc(shape, Arc::new(t.into_data()), requires_grad, param)
    }

    fn leaf_arc(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad: requires_grad && self.grad_enabled,
            param,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Constant input; receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false, None)
    }

    /// Differentiable input that is not a stored parameter (used by gradient checks).
    pub fn input(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, true, None)
    }

    /// Leaf bound to a stored parameter. Frozen parameters enter as constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let p = store.get(id);
        self.leaf_arc(p.shape.clone(), p.value.clone(), p.trainable, Some(id))
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: impl Into<Arc<Vec<f64>>>,
        inputs: &[usize],
        backward: impl FnOnce() -> Backward,
    ) -> Var<'_> {
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward = if requires_grad { Some(backward()) } else { None };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: value.into(),
            requires_grad,
            param: None,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse-mode sweep from a scalar `loss`, visiting nodes in exact reverse
    /// recording order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar, got shape {:?}",
                root.shape
            )));
        }
        let n = loss.id + 1;
        let mut buf = GradBuf {
            slots: vec![None; n],
            sizes: nodes[..n].iter().map(|nd| nd.value.len()).collect(),
            live: nodes[..n].iter().map(|nd| nd.requires_grad).collect(),
        };
        if root.requires_grad {
            buf.slots[loss.id] = Some(vec![1.0]);
        }
        for id in (0..n).rev() {
            let Some(bw) = nodes[id].backward.as_ref() else {
                continue;
            };
            if let Some(g) = buf.slots[id].take() {
                bw(&g, &mut buf);
                buf.slots[id] = Some(g);
            }
        }
        let params = nodes[..n]
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param.filter(|_| nd.requires_grad).map(|p| (i, p)))
            .collect();
        Ok(Gradients {
            slots: buf.slots,
            params,
        })
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn raw(&self) -> Arc<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::from_parts(n.shape.clone(), n.value.to_vec())
    }

    pub fn data(&self) -> Arc<Vec<f64>> {
        self.raw()
    }

    pub fn item(&self) -> f64 {
        self.raw()[0]
    }

    fn rows_cols(&self) -> (usize, usize) {
        let shape = self.shape();
        let cols = shape.last().copied().unwrap_or(1);
        (row_count(&shape), cols)
    }

    /// Stop-gradient copy sharing the same buffer.
    pub fn detach(self) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        self.tape.leaf_arc(shape, value, false, None)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = as_matrix("matmul", &self.shape())?;
        let (k2, n) = as_matrix("matmul", &rhs.shape())?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape(), &rhs.shape()));
        }
        let (a, b) = (self.raw(), rhs.raw());
        let mut out = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut out, m, k, n);
        let (ia, ib) = (self.id, rhs.id);
        Ok(self.tape.push(vec![m, n], out, &[ia, ib], move || {
            Box::new(move |g, buf| {
                if let Some(da) = buf.slot(ia) {
                    gemm_nt(g, &b, da, m, n, k);
                }
                if let Some(db) = buf.slot(ib) {
                    gemm_tn(&a, g, db, m, k, n);
                }
            })
        }))
    }

    /// `self · rhsᵀ` for `self: [m×k]`, `rhs: [n×k]`.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = as_matrix("matmul_t", &self.shape())?;
        let (n, k2) = as_matrix("matmul_t", &rhs.shape())?;
        if k != k2 {
            return Err(Error::shape("matmul_t", &self.shape(), &rhs.shape()));
        }
        let (a, b) = (self.raw(), rhs.raw());
        let mut out = vec![0.0; m * n];
        gemm_nt(&a, &b, &mut out, m, k, n);
        let (ia, ib) = (self.id, rhs.id);
        Ok(self.tape.push(vec![m, n], out, &[ia, ib], move || {
            Box::new(move |g, buf| {
                if let Some(da) = buf.slot(ia) {
                    gemm_nn(g, &b, da, m, n, k);
                }
                if let Some(db) = buf.slot(ib) {
                    gemm_tn(g, &a, db, m, n, k);
                }
            })
        }))
    }

    fn zip_with(
        self,
        rhs: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        grads: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Var<'t>> {
        let shape = self.shape();
        same_shape(op, &shape, &rhs.shape())?;
        let (a, b) = (self.raw(), rhs.raw());
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        let (ia, ib) = (self.id, rhs.id);
        Ok(self.tape.push(shape, out, &[ia, ib], move || {
            Box::new(move |g, buf| {
                let n = g.len();
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for i in 0..n {
                    let (x, y) = grads(g[i], a[i], b[i]);
                    ga[i] = x;
                    gb[i] = y;
                }
                buf.add(ia, &ga);
                buf.add(ib, &gb);
            })
        }))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "add", |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "sub", |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "mul", |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    /// Adds a `[D]` row vector to every row of `[.. × D]`.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let (rows, cols) = self.rows_cols();
        if bias.shape() != [cols] {
            return Err(Error::shape("add_row", &shape, &bias.shape()));
        }
        let (x, b) = (self.raw(), bias.raw());
        let mut out = x.to_vec();
        for r in 0..rows {
            for (o, &bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b.iter()) {
                *o += bv;
            }
        }
        let (ix, ib) = (self.id, bias.id);
        Ok(self.tape.push(shape, out, &[ix, ib], move || {
            Box::new(move |g, buf| {
                buf.add(ix, g);
                if let Some(db) = buf.slot(ib) {
                    for r in 0..rows {
                        for (d, &gv) in db.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += gv;
                        }
                    }
                }
            })
        }))
    }

    fn map(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let shape = self.shape();
        let x = self.raw();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let y = Arc::new(y);
        let ix = self.id;
        let y2 = y.clone();
        self.tape.push(shape, y, &[ix], move || {
            Box::new(move |g, buf| {
                if let Some(dx) = buf.slot(ix) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * df(x[i], y2[i]);
                    }
                }
            })
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(move |v| v * c, move |_, _| c)
    }

    pub fn relu(self) -> Var<'t> {
        self.map(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.map(f64::ln, |x, _| 1.0 / x)
    }

    /// `ln(max(x, floor))`; no gradient where the floor is active.
    pub fn ln_clamped(self, floor: f64) -> Var<'t> {
        self.map(
            move |v| v.max(floor).ln(),
            move |x, _| if x > floor { 1.0 / x } else { 0.0 },
        )
    }

    /// Softmax of `x / temperature` over the trailing dimension.
    pub fn softmax(self, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(Error::Argument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.shape();
        let (rows, cols) = self.rows_cols();
        let x = self.raw();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            softmax_row(
                &x[r * cols..(r + 1) * cols],
                temperature,
                &mut y[r * cols..(r + 1) * cols],
            );
        }
        let y = Arc::new(y);
        let y2 = y.clone();
        let ix = self.id;
        Ok(self.tape.push(shape, y, &[ix], move || {
            Box::new(move |g, buf| {
                if let Some(dx) = buf.slot(ix) {
                    for r in 0..rows {
                        let yr = &y2[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inner = dot(yr, gr);
                        for c in 0..cols {
                            dx[r * cols + c] += yr[c] * (gr[c] - inner) / temperature;
                        }
                    }
                }
            })
        }))
    }

    /// Per-row normalization over the trailing dimension followed by `gain`/`bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let (rows, cols) = self.rows_cols();
        if cols == 0 || gain.shape() != [cols] || bias.shape() != [cols] {
            return Err(Error::shape("layer_norm", &shape, &gain.shape()));
        }
        let x = self.raw();
        let (gn, bs) = (gain.raw(), bias.raw());
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        let d = cols as f64;
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f64>() / d;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (xr[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gn[c] + bs[c];
            }
        }
        let (ix, ig, ib) = (self.id, gain.id, bias.id);
        Ok(self.tape.push(shape, out, &[ix, ig, ib], move || {
            Box::new(move |g, buf| {
                if let Some(dg) = buf.slot(ig) {
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(db) = buf.slot(ib) {
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                }
                if let Some(dx) = buf.slot(ix) {
                    let mut dh = vec![0.0; cols];
                    for r in 0..rows {
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dh[c] = g[r * cols + c] * gn[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d;
                        let mean_dhh = dot(&dh, hr) / d;
                        for c in 0..cols {
                            dx[r * cols + c] += rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                }
            })
        }))
    }

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of nothing".into()))?;
        let tape = first.tape;
        let (_, cols) = as_matrix("concat_rows", &first.shape())?;
        let mut out = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = as_matrix("concat_rows", &p.shape())?;
            if c != cols {
                return Err(Error::shape("concat_rows", &first.shape(), &p.shape()));
            }
            let start = out.len();
            out.extend_from_slice(&p.raw());
            spans.push((p.id, start, r * c));
        }
        let rows = out.len() / cols.max(1);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(vec![rows, cols], out, &ids, move || {
            Box::new(move |g, buf| {
                for &(id, start, len) in &spans {
                    buf.add(id, &g[start..start + len]);
                }
            })
        }))
    }

    /// Rows `start .. start + len` of a 2-D tensor.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (rows, cols) = as_matrix("slice_rows", &self.shape())?;
        if start + len > rows {
            return Err(Error::Argument(format!(
                "row slice {start}..{} out of {rows}",
                start + len
            )));
        }
        let x = self.raw();
        let out = x[start * cols..(start + len) * cols].to_vec();
        let ix = self.id;
        Ok(self.tape.push(vec![len, cols], out, &[ix], move || {
            Box::new(move |g, buf| {
                if let Some(dx) = buf.slot(ix) {
                    for (d, &gv) in dx[start * cols..(start + len) * cols].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            })
        }))
    }

    /// Embedding lookup: rows of `self: [V×D]` at `ids`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let (vocab, cols) = as_matrix("gather_rows", &self.shape())?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Argument(format!("row {bad} out of range for {vocab} rows")));
        }
        let table = self.raw();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&table[i * cols..(i + 1) * cols]);
        }
        let ids = ids.to_vec();
        let ix = self.id;
        Ok(self.tape.push(vec![ids.len(), cols], out, &[ix], move || {
            Box::new(move |g, buf| {
                if let Some(dx) = buf.slot(ix) {
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..cols {
                            dx[i * cols + c] += g[r * cols + c];
                        }
                    }
                }
            })
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let old = self.shape();
        if shape.iter().product::<usize>() != old.iter().product::<usize>() {
            return Err(Error::shape("reshape", &old, shape));
        }
        let value = self.raw();
        let ix = self.id;
        Ok(self.tape.push(shape.to_vec(), value, &[ix], move || {
            Box::new(move |g, buf| buf.add(ix, g))
        }))
    }

    /// Repeats the whole `[r×D]` block `times` times along the row axis.
    pub fn repeat_rows(self, times: usize) -> Result<Var<'t>> {
        let (rows, cols) = as_matrix("repeat_rows", &self.shape())?;
        let x = self.raw();
        let mut out = Vec::with_capacity(x.len() * times);
        for _ in 0..times {
            out.extend_from_slice(&x);
        }
        let ix = self.id;
        let n = x.len();
        Ok(self.tape.push(vec![rows * times, cols], out, &[ix], move || {
            Box::new(move |g, buf| {
                if let Some(dx) = buf.slot(ix) {
                    for t in 0..times {
                        for (d, &gv) in dx.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                            *d += gv;
                        }
                    }
                }
            })
        }))
    }

    /// Column means of `[n×D]` as `[1×D]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let (rows, cols) = as_matrix("mean_rows", &self.shape())?;
        if rows == 0 {
            return Err(Error::Argument("mean of zero rows".into()));
        }
        let x = self.raw();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += x[r * cols + c];
            }
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let ix = self.id;
        Ok(self.tape.push(vec![1, cols], out, &[ix], move || {
            Box::new(move |g, buf| {
                if let Some(dx) = buf.slot(ix) {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[c] * inv;
                        }
                    }
                }
            })
        }))
    }

    pub fn sum(self) -> Var<'t> {
        let total: f64 = self.raw().iter().sum();
        let ix = self.id;
        self.tape.push(vec![], vec![total], &[ix], move || {
            Box::new(move |g, buf| {
                if let Some(dx) = buf.slot(ix) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            })
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.raw().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean of scalar vars.
    pub fn mean_of(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("mean of no terms".into()))?;
        let mut acc = first;
        for &p in &parts[1..] {
            acc = acc.add(p)?;
        }
        Ok(acc.scale(1.0 / parts.len() as f64))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `self` holds queries `[L×d]`, `keys`/`values` are `[S×d]`; `d` splits
    /// evenly into `heads`. With `causal`, query `i` sees keys `0..=i` only.
    pub fn attention(
        self,
        keys: Var<'t>,
        values: Var<'t>,
        heads: usize,
        causal: bool,
    ) -> Result<Var<'t>> {
        let (l, d) = as_matrix("attention", &self.shape())?;
        let (s, dk_) = as_matrix("attention", &keys.shape())?;
        if dk_ != d || values.shape() != keys.shape() {
            return Err(Error::shape("attention", &self.shape(), &keys.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Argument(format!("width {d} not divisible into {heads} heads")));
        }
        if causal && l > s {
            return Err(Error::shape("attention(causal)", &self.shape(), &keys.shape()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, k, v) = (self.raw(), keys.raw(), values.raw());
        let mut probs = vec![0.0; heads * l * s];
        let mut out = vec![0.0; l * d];
        let mut scores = vec![0.0; s];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let span = if causal { i + 1 } else { s };
                let qi = &q[i * d + off..i * d + off + dh];
                for j in 0..span {
                    scores[j] = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                }
                let p = &mut probs[(h * l + i) * s..(h * l + i) * s + span];
                softmax_row(&scores[..span], 1.0, p);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let (iq, ik, iv) = (self.id, keys.id, values.id);
        Ok(self.tape.push(vec![l, d], out, &[iq, ik, iv], move || {
            Box::new(move |g, buf| {
                let mut dq = vec![0.0; l * d];
                let mut dk = vec![0.0; s * d];
                let mut dv = vec![0.0; s * d];
                let mut dp = vec![0.0; s];
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..l {
                        let span = if causal { i + 1 } else { s };
                        let p = &probs[(h * l + i) * s..(h * l + i) * s + span];
                        let gi = &g[i * d + off..i * d + off + dh];
                        for j in 0..span {
                            let vj = &v[j * d + off..j * d + off + dh];
                            dp[j] = dot(gi, vj);
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (a, &gv) in dvj.iter_mut().zip(gi) {
                                *a += p[j] * gv;
                            }
                        }
                        let inner = dot(p, &dp[..span]);
                        let qi = &q[i * d + off..i * d + off + dh];
                        for j in 0..span {
                            let ds = p[j] * (dp[j] - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &k[j * d + off..j * d + off + dh];
                            let dqi = &mut dq[i * d + off..i * d + off + dh];
                            for (a, &kv) in dqi.iter_mut().zip(kj) {
                                *a += ds * kv;
                            }
                            let dkj = &mut dk[j * d + off..j * d + off + dh];
                            for (a, &qv) in dkj.iter_mut().zip(qi) {
                                *a += ds * qv;
                            }
                        }
                    }
                }
                if buf.wants(iq) {
                    buf.add(iq, &dq);
                }
                if buf.wants(ik) {
                    buf.add(ik, &dk);
                }
                if buf.wants(iv) {
                    buf.add(iv, &dv);
                }
            })
        }))
    }

    /// Mean negative log-likelihood of `gold` under the probability rows of
    /// `self: [n×T]`, over positions where `mask` is true.
    pub fn cross_entropy(self, gold: &[usize], mask: &[bool]) -> Result<Var<'t>> {
        let (n, classes) = as_matrix("cross_entropy", &self.shape())?;
        check_targets(n, classes, gold, mask)?;
        let valid = mask.iter().filter(|&&m| m).count();
        let p = self.raw();
        let mut loss = 0.0;
        for i in 0..n {
            if mask[i] {
                loss -= p[i * classes + gold[i]].max(MIN_PROB).ln();
            }
        }
        let inv = 1.0 / valid as f64;
        loss *= inv;
        let (gold, mask) = (gold.to_vec(), mask.to_vec());
        let ix = self.id;
        Ok(self.tape.push(vec![], vec![loss], &[ix], move || {
            Box::new(move |g, buf| {
                if let Some(dx) = buf.slot(ix) {
                    for i in 0..n {
                        let pg = p[i * classes + gold[i]];
                        if mask[i] && pg > MIN_PROB {
                            dx[i * classes + gold[i]] -= g[0] * inv / pg;
                        }
                    }
                }
            })
        }))
    }

    /// Fused log-softmax + masked mean NLL over logit rows `self: [n×T]`.
    pub fn softmax_cross_entropy(self, gold: &[usize], mask: &[bool]) -> Result<Var<'t>> {
        let (n, classes) = as_matrix("softmax_cross_entropy", &self.shape())?;
        check_targets(n, classes, gold, mask)?;
        let valid = mask.iter().filter(|&&m| m).count();
        let x = self.raw();
        let inv = 1.0 / valid as f64;
        let mut loss = 0.0;
        let mut lse = vec![0.0; n];
        for i in 0..n {
            if mask[i] {
                let row = &x[i * classes..(i + 1) * classes];
                lse[i] = log_sum_exp(row);
                loss += lse[i] - row[gold[i]];
            }
        }
        loss *= inv;
        let (gold, mask) = (gold.to_vec(), mask.to_vec());
        let ix = self.id;
        Ok(self.tape.push(vec![], vec![loss], &[ix], move || {
            Box::new(move |g, buf| {
                if let Some(dx) = buf.slot(ix) {
                    let s = g[0] * inv;
                    for i in 0..n {
                        if !mask[i] {
                            continue;
                        }
                        for c in 0..classes {
                            let p = (x[i * classes + c] - lse[i]).exp();
                            dx[i * classes + c] += s * p;
                        }
                        dx[i * classes + gold[i]] -= s;
                    }
                }
            })
        }))
    }
}

/// Probabilities below this are treated as this value before taking logs.
pub const MIN_PROB: f64 = 1e-12;

fn check_targets(n: usize, classes: usize, gold: &[usize], mask: &[bool]) -> Result<()> {
    if gold.len() != n || mask.len() != n {
        return Err(Error::shape("cross_entropy", &[n, classes], &[gold.len(), mask.len()]));
    }
    if let Some(&bad) = gold.iter().zip(mask).filter(|(_, &m)| m).map(|(g, _)| g).find(|&&g| g >= classes) {
        return Err(Error::Argument(format!("target id {bad} out of range for {classes} classes")));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateBatch);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let tape = Tape::new();
        let eye = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t2(&[&[1.0, 0.0]]));
        let col = tape.constant(t2(&[&[5.0], &[7.0]]));
        assert_eq!(row.matmul(col).unwrap().value().data(), &[5.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = x.softmax(1.0).unwrap().value();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = x.softmax(1.0).unwrap().value();
        for (v, e) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        assert!(matches!(x.softmax(0.0), Err(Error::Argument(_))));
        assert!(matches!(x.softmax(-1.0), Err(Error::Argument(_))));
        let bad = tape.constant(Tensor::vector(vec![f64::NAN, 1.0]));
        assert!(matches!(bad.softmax(1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let perfect = tape.constant(t2(&[&[0.0, 1.0, 0.0]]));
        let l = perfect.cross_entropy(&[1], &[true]).unwrap().item();
        assert_eq!(l, 0.0);

        let uniform = tape.constant(t2(&[&[0.25; 4], &[0.25; 4]]));
        let l = uniform.cross_entropy(&[0, 3], &[true, true]).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        // Third position is padding and must not count.
        let p = tape.constant(t2(&[&[0.5, 0.5], &[0.2, 0.8], &[0.9, 0.1]]));
        let l = p
            .cross_entropy(&[0, 1, 1], &[true, true, false])
            .unwrap()
            .item();
        let by_hand = (-(0.5f64.ln()) - 0.8f64.ln()) / 2.0;
        assert!((l - by_hand).abs() < 1e-12);

        let err = p.cross_entropy(&[0, 1, 1], &[false; 3]).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch));
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = tape.constant(t2(&[&[1.0, -1.0], &[3.0, 3.0]]));
        let y = x.layer_norm(g, b, 1e-12).unwrap().value();
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!((y.data()[1] + 1.0).abs() < 1e-9);
        assert_eq!(&y.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_populates_leaves_and_accumulates_params() {
        let mut store = ParamStore::new();
        let w = store.add("w", t2(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        for _ in 0..2 {
            let tape = Tape::new();
            let x = tape.input(t2(&[&[1.0, 1.0]]));
            let wv = tape.param(&store, w);
            let loss = x.matmul(wv).unwrap().sum();
            let grads = tape.backward(loss).unwrap();
            assert_eq!(grads.get(x).unwrap(), &[3.0, 7.0]);
            grads.accumulate_into(&mut store);
        }
        assert_eq!(store.get(w).grad, vec![2.0, 2.0, 2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.get(w).grad, vec![0.0; 4]);
    }

    #[test]
    fn frozen_params_and_no_grad_tapes_record_nothing() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.set_trainable(w, false);
        let tape = Tape::new();
        let y = tape.param(&store, w).exp().sum();
        assert!(!y.requires_grad());
        store.set_trainable(w, true);
        let tape = Tape::no_grad();
        let y = tape.param(&store, w).exp().sum();
        assert!(!y.requires_grad());
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![2.0]));
        let y = x.mul(x.detach()).unwrap().sum();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }
}
