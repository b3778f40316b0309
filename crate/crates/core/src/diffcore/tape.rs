//! Reverse-mode differentiation on a Wengert tape of dense f64 buffers.
//!
//! Operations execute eagerly when recorded, so values are available (and
//! precondition failures surface) at build time. `backward` replays the
//! tape in reverse, accumulating vector-Jacobian products into per-buffer
//! gradient slots. Every loss in this crate is built from these ops, so a
//! single finite-difference harness certifies all analytic gradients.

use crate::error::{Error, Result};

use super::{stable_log_sum_exp, stable_softmax};

/// Index of a buffer on the tape.
pub type BufId = usize;

#[derive(Clone, Debug)]
struct Buffer {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    /// Constant leaves are detached: backward never accumulates into them.
    constant: bool,
}

impl Buffer {
    fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug)]
enum Op {
    Add {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Sub {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Mul {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Div {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Scale {
        a: BufId,
        c: f64,
        out: BufId,
    },
    Matmul {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    /// out = aᵀ·b  with a: (k,m), b: (k,n)
    MatmulTn {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    /// out = a·bᵀ  with a: (m,k), b: (n,k)
    MatmulNt {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    GatherRows {
        table: BufId,
        indices: Vec<usize>,
        out: BufId,
    },
    Dot {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Sqrt {
        a: BufId,
        out: BufId,
    },
    Exp {
        a: BufId,
        out: BufId,
    },
    Ln {
        a: BufId,
        out: BufId,
    },
    SoftmaxRows {
        a: BufId,
        out: BufId,
    },
    SoftmaxCols {
        a: BufId,
        out: BufId,
    },
    LogSumExp {
        a: BufId,
        out: BufId,
    },
    MeanRows {
        a: BufId,
        out: BufId,
    },
    MaxRows {
        a: BufId,
        argmax: Vec<usize>,
        out: BufId,
    },
    Row {
        a: BufId,
        i: usize,
        out: BufId,
    },
    RowSlice {
        a: BufId,
        start: usize,
        out: BufId,
    },
    Col {
        a: BufId,
        j: usize,
        out: BufId,
    },
    Index {
        a: BufId,
        idx: usize,
        out: BufId,
    },
    Concat {
        parts: Vec<BufId>,
        out: BufId,
    },
    Reshape {
        a: BufId,
        out: BufId,
    },
    AddRowBroadcast {
        a: BufId,
        bias: BufId,
        out: BufId,
    },
    Mean {
        a: BufId,
        out: BufId,
    },
}

/// Eagerly evaluated computation tape.
pub struct Tape {
    bufs: Vec<Buffer>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Register an input buffer. Gradients accumulate into leaves like any
    /// other buffer; read them back with [`Tape::grad`] after `backward`.
    pub fn leaf(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Result<BufId> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "leaf of {} values declared as {rows}x{cols}",
                data.len()
            )));
        }
        Ok(self.push(Buffer {
            data,
            rows,
            cols,
            constant: false,
        }))
    }

    /// Register a 1 x n vector leaf.
    pub fn leaf_vec(&mut self, data: Vec<f64>) -> BufId {
        let cols = data.len();
        self.push(Buffer {
            data,
            rows: 1,
            cols,
            constant: false,
        })
    }

    /// Register a detached input: values participate in the forward pass
    /// but the reverse sweep drops any gradient addressed to them.
    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Result<BufId> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "constant of {} values declared as {rows}x{cols}",
                data.len()
            )));
        }
        Ok(self.push(Buffer {
            data,
            rows,
            cols,
            constant: true,
        }))
    }

    /// Register a detached 1 x n vector.
    pub fn constant_vec(&mut self, data: Vec<f64>) -> BufId {
        let cols = data.len();
        self.push(Buffer {
            data,
            rows: 1,
            cols,
            constant: true,
        })
    }

    fn push(&mut self, b: Buffer) -> BufId {
        let id = self.bufs.len();
        self.bufs.push(b);
        self.grads.push(None);
        id
    }

    fn emit(
        &mut self,
        data: Vec<f64>,
        rows: usize,
        cols: usize,
        op: impl FnOnce(BufId) -> Op,
    ) -> BufId {
        let out = self.push(Buffer {
            data,
            rows,
            cols,
            constant: false,
        });
        let op = op(out);
        self.ops.push(op);
        out
    }

    pub fn value(&self, id: BufId) -> &[f64] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: BufId) -> (usize, usize) {
        (self.bufs[id].rows, self.bufs[id].cols)
    }

    /// Value of a 1x1 buffer.
    pub fn scalar(&self, id: BufId) -> f64 {
        debug_assert_eq!(self.bufs[id].numel(), 1);
        self.bufs[id].data[0]
    }

    /// Gradient accumulated into `id` by the last `backward` call, if any
    /// reached it.
    pub fn grad(&self, id: BufId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    fn same_shape(&self, a: BufId, b: BufId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.same_shape(a, b, "add")?;
        let (r, c) = self.shape(a);
        let data = zip_map(&self.bufs[a].data, &self.bufs[b].data, |x, y| x + y);
        Ok(self.emit(data, r, c, |out| Op::Add { a, b, out }))
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.same_shape(a, b, "sub")?;
        let (r, c) = self.shape(a);
        let data = zip_map(&self.bufs[a].data, &self.bufs[b].data, |x, y| x - y);
        Ok(self.emit(data, r, c, |out| Op::Sub { a, b, out }))
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.same_shape(a, b, "mul")?;
        let (r, c) = self.shape(a);
        let data = zip_map(&self.bufs[a].data, &self.bufs[b].data, |x, y| x * y);
        Ok(self.emit(data, r, c, |out| Op::Mul { a, b, out }))
    }

    pub fn div(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.same_shape(a, b, "div")?;
        let (r, c) = self.shape(a);
        let data = zip_map(&self.bufs[a].data, &self.bufs[b].data, |x, y| x / y);
        Ok(self.emit(data, r, c, |out| Op::Div { a, b, out }))
    }

    pub fn scale(&mut self, a: BufId, c: f64) -> BufId {
        let (r, cl) = self.shape(a);
        let data = self.bufs[a].data.iter().map(|x| x * c).collect();
        self.emit(data, r, cl, |out| Op::Scale { a, c, out })
    }

    pub fn sqrt(&mut self, a: BufId) -> Result<BufId> {
        if self.bufs[a].data.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidInput("sqrt of negative value".into()));
        }
        let (r, c) = self.shape(a);
        let data = self.bufs[a].data.iter().map(|x| x.sqrt()).collect();
        Ok(self.emit(data, r, c, |out| Op::Sqrt { a, out }))
    }

    pub fn exp(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let data = self.bufs[a].data.iter().map(|x| x.exp()).collect();
        self.emit(data, r, c, |out| Op::Exp { a, out })
    }

    pub fn ln(&mut self, a: BufId) -> Result<BufId> {
        if self.bufs[a].data.iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidInput("ln of non-positive value".into()));
        }
        let (r, c) = self.shape(a);
        let data = self.bufs[a].data.iter().map(|x| x.ln()).collect();
        Ok(self.emit(data, r, c, |out| Op::Ln { a, out }))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::DimensionMismatch(format!(
                "matmul ({m},{k})x({k2},{n})"
            )));
        }
        let data = matmul_kernel(&self.bufs[a].data, &self.bufs[b].data, m, k, n);
        Ok(self.emit(data, m, n, |out| Op::Matmul { a, b, out }))
    }

    /// aᵀ·b without materializing the transpose.
    pub fn matmul_tn(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (k, m) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::DimensionMismatch(format!(
                "matmul_tn ({k},{m})ᵀx({k2},{n})"
            )));
        }
        let data = matmul_tn_kernel(&self.bufs[a].data, &self.bufs[b].data, k, m, n);
        Ok(self.emit(data, m, n, |out| Op::MatmulTn { a, b, out }))
    }

    /// a·bᵀ without materializing the transpose.
    pub fn matmul_nt(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::DimensionMismatch(format!(
                "matmul_nt ({m},{k})x({n},{k2})ᵀ"
            )));
        }
        let data = matmul_nt_kernel(&self.bufs[a].data, &self.bufs[b].data, m, k, n);
        Ok(self.emit(data, m, n, |out| Op::MatmulNt { a, b, out }))
    }

    /// Gather rows of `table` (one output row per index).
    pub fn gather_rows(&mut self, table: BufId, indices: &[usize]) -> Result<BufId> {
        let (rows, cols) = self.shape(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidInput(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&self.bufs[table].data[i * cols..(i + 1) * cols]);
        }
        let indices = indices.to_vec();
        Ok(self.emit(data, indices.len(), cols, |out| Op::GatherRows {
            table,
            indices,
            out,
        }))
    }

    pub fn dot(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.bufs[a].numel() != self.bufs[b].numel() {
            return Err(Error::DimensionMismatch("dot of unequal lengths".into()));
        }
        let v = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.emit(vec![v], 1, 1, |out| Op::Dot { a, b, out }))
    }

    // ── Reductions and normalizations ───────────────────────────────

    pub fn softmax_rows(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            stable_softmax(
                &self.bufs[a].data[i * c..(i + 1) * c],
                &mut data[i * c..(i + 1) * c],
            );
        }
        self.emit(data, r, c, |out| Op::SoftmaxRows { a, out })
    }

    pub fn softmax_cols(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let src = &self.bufs[a].data;
        let mut data = vec![0.0; r * c];
        let mut col = vec![0.0; r];
        let mut sm = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                col[i] = src[i * c + j];
            }
            stable_softmax(&col, &mut sm);
            for i in 0..r {
                data[i * c + j] = sm[i];
            }
        }
        self.emit(data, r, c, |out| Op::SoftmaxCols { a, out })
    }

    /// log Σ exp over every element of `a`.
    pub fn log_sum_exp(&mut self, a: BufId) -> Result<BufId> {
        if self.bufs[a].data.is_empty() {
            return Err(Error::InvalidInput("log_sum_exp of empty buffer".into()));
        }
        let v = stable_log_sum_exp(&self.bufs[a].data);
        Ok(self.emit(vec![v], 1, 1, |out| Op::LogSumExp { a, out }))
    }

    /// Column means: (r,c) → (1,c).
    pub fn mean_rows(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += self.bufs[a].data[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        self.emit(data, 1, c, |out| Op::MeanRows { a, out })
    }

    /// Column maxima: (r,c) → (1,c). Ties resolve to the lowest row.
    pub fn max_rows(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let mut data = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                let v = self.bufs[a].data[i * c + j];
                if v > data[j] {
                    data[j] = v;
                    argmax[j] = i;
                }
            }
        }
        self.emit(data, 1, c, |out| Op::MaxRows { a, argmax, out })
    }

    pub fn row(&mut self, a: BufId, i: usize) -> Result<BufId> {
        let (r, c) = self.shape(a);
        if i >= r {
            return Err(Error::DimensionMismatch(format!("row {i} of {r}x{c}")));
        }
        let data = self.bufs[a].data[i * c..(i + 1) * c].to_vec();
        Ok(self.emit(data, 1, c, |out| Op::Row { a, i, out }))
    }

    pub fn row_slice(&mut self, a: BufId, start: usize, n: usize) -> Result<BufId> {
        let (r, c) = self.shape(a);
        if start + n > r {
            return Err(Error::DimensionMismatch(format!(
                "rows {start}..{} of {r}x{c}",
                start + n
            )));
        }
        let data = self.bufs[a].data[start * c..(start + n) * c].to_vec();
        Ok(self.emit(data, n, c, |out| Op::RowSlice { a, start, out }))
    }

    pub fn col(&mut self, a: BufId, j: usize) -> Result<BufId> {
        let (r, c) = self.shape(a);
        if j >= c {
            return Err(Error::DimensionMismatch(format!("col {j} of {r}x{c}")));
        }
        let data = (0..r).map(|i| self.bufs[a].data[i * c + j]).collect();
        Ok(self.emit(data, r, 1, |out| Op::Col { a, j, out }))
    }

    /// Single element by row-major flat index, as a 1x1 buffer.
    pub fn index(&mut self, a: BufId, idx: usize) -> Result<BufId> {
        if idx >= self.bufs[a].numel() {
            return Err(Error::DimensionMismatch(format!(
                "index {idx} out of range"
            )));
        }
        let v = self.bufs[a].data[idx];
        Ok(self.emit(vec![v], 1, 1, |out| Op::Index { a, idx, out }))
    }

    /// Concatenate the flattened parts into a 1 x total vector.
    pub fn concat(&mut self, parts: &[BufId]) -> Result<BufId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat of zero buffers".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.bufs[p].data);
        }
        let n = data.len();
        let parts = parts.to_vec();
        Ok(self.emit(data, 1, n, |out| Op::Concat { parts, out }))
    }

    pub fn reshape(&mut self, a: BufId, rows: usize, cols: usize) -> Result<BufId> {
        if self.bufs[a].numel() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "reshape {} values to {rows}x{cols}",
                self.bufs[a].numel()
            )));
        }
        let data = self.bufs[a].data.clone();
        Ok(self.emit(data, rows, cols, |out| Op::Reshape { a, out }))
    }

    /// Add a 1 x c bias vector to every row of an r x c buffer.
    pub fn add_row_broadcast(&mut self, a: BufId, bias: BufId) -> Result<BufId> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != c {
            return Err(Error::DimensionMismatch(format!(
                "broadcast bias ({br},{bc}) onto ({r},{c})"
            )));
        }
        let mut data = self.bufs[a].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.bufs[bias].data[j];
            }
        }
        Ok(self.emit(data, r, c, |out| Op::AddRowBroadcast { a, bias, out }))
    }

    /// Mean over every element, as a 1x1 buffer.
    pub fn mean(&mut self, a: BufId) -> Result<BufId> {
        let n = self.bufs[a].numel();
        if n == 0 {
            return Err(Error::InvalidInput("mean of empty buffer".into()));
        }
        let v = self.bufs[a].data.iter().sum::<f64>() / n as f64;
        Ok(self.emit(vec![v], 1, 1, |out| Op::Mean { a, out }))
    }

    // ── Composites ──────────────────────────────────────────────────

    /// cosine(a, b) = a·b / (|a||b|). Errors on zero-norm input.
    pub fn cosine(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let aa = self.dot(a, a)?;
        let bb = self.dot(b, b)?;
        if self.scalar(aa) == 0.0 || self.scalar(bb) == 0.0 {
            return Err(Error::ZeroNorm("cosine"));
        }
        let na = self.sqrt(aa)?;
        let nb = self.sqrt(bb)?;
        let ab = self.dot(a, b)?;
        let denom = self.mul(na, nb)?;
        self.div(ab, denom)
    }

    /// Temperature softmax of a vector buffer: softmax(v / tau).
    pub fn softmax_temp(&mut self, v: BufId, tau: f64) -> Result<BufId> {
        if tau <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "softmax temperature {tau} must be > 0"
            )));
        }
        let scaled = self.scale(v, 1.0 / tau);
        Ok(self.softmax_rows(scaled))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Clears prior gradients.
    pub fn backward(&mut self, out: BufId) -> Result<()> {
        if self.bufs[out].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[out] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: BufId, delta: &[f64]) {
        if self.bufs[id].constant {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grads[id] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&mut self, op: &Op) {
        macro_rules! upstream {
            ($out:expr) => {
                match self.grads[*$out].clone() {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        match op {
            Op::Add { a, b, out } => {
                let d = upstream!(out);
                self.accumulate(*a, &d);
                self.accumulate(*b, &d);
            }
            Op::Sub { a, b, out } => {
                let d = upstream!(out);
                self.accumulate(*a, &d);
                let neg: Vec<f64> = d.iter().map(|x| -x).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b, out } => {
                let d = upstream!(out);
                let da = zip_map(&d, &self.bufs[*b].data, |x, y| x * y);
                let db = zip_map(&d, &self.bufs[*a].data, |x, y| x * y);
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Div { a, b, out } => {
                let d = upstream!(out);
                let da = zip_map(&d, &self.bufs[*b].data, |x, y| x / y);
                let db: Vec<f64> = d
                    .iter()
                    .zip(&self.bufs[*a].data)
                    .zip(&self.bufs[*b].data)
                    .map(|((di, ai), bi)| -di * ai / (bi * bi))
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { a, c, out } => {
                let d = upstream!(out);
                let da: Vec<f64> = d.iter().map(|x| x * c).collect();
                self.accumulate(*a, &da);
            }
            Op::Matmul { a, b, out } => {
                let d = upstream!(out);
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let da = matmul_nt_kernel(&d, &self.bufs[*b].data, m, n, k);
                let db = matmul_tn_kernel(&self.bufs[*a].data, &d, m, k, n);
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::MatmulTn { a, b, out } => {
                // out = aᵀb, a: (k,m), b: (k,n), d: (m,n)
                let d = upstream!(out);
                let (k, m) = self.shape(*a);
                let n = self.shape(*b).1;
                let da = matmul_nt_kernel(&self.bufs[*b].data, &d, k, n, m);
                let db = matmul_kernel(&self.bufs[*a].data, &d, k, m, n);
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::MatmulNt { a, b, out } => {
                // out = abᵀ, a: (m,k), b: (n,k), d: (m,n)
                let d = upstream!(out);
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                let da = matmul_kernel(&d, &self.bufs[*b].data, m, n, k);
                let db = matmul_tn_kernel(&d, &self.bufs[*a].data, m, n, k);
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::GatherRows {
                table,
                indices,
                out,
            } => {
                let d = upstream!(out);
                let cols = self.shape(*table).1;
                let mut dt = vec![0.0; self.bufs[*table].numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..cols {
                        dt[i * cols + j] += d[r * cols + j];
                    }
                }
                self.accumulate(*table, &dt);
            }
            Op::Dot { a, b, out } => {
                let d = upstream!(out)[0];
                let da: Vec<f64> = self.bufs[*b].data.iter().map(|x| x * d).collect();
                let db: Vec<f64> = self.bufs[*a].data.iter().map(|x| x * d).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Sqrt { a, out } => {
                let d = upstream!(out);
                let da = zip_map(&d, &self.bufs[*out].data, |di, yi| di / (2.0 * yi));
                self.accumulate(*a, &da);
            }
            Op::Exp { a, out } => {
                let d = upstream!(out);
                let da = zip_map(&d, &self.bufs[*out].data, |di, yi| di * yi);
                self.accumulate(*a, &da);
            }
            Op::Ln { a, out } => {
                let d = upstream!(out);
                let da = zip_map(&d, &self.bufs[*a].data, |di, xi| di / xi);
                self.accumulate(*a, &da);
            }
            Op::SoftmaxRows { a, out } => {
                let d = upstream!(out);
                let (r, c) = self.shape(*a);
                let y = &self.bufs[*out].data;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let inner: f64 = d[row.clone()]
                        .iter()
                        .zip(&y[row.clone()])
                        .map(|(di, yi)| di * yi)
                        .sum();
                    for j in 0..c {
                        da[i * c + j] = y[i * c + j] * (d[i * c + j] - inner);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::SoftmaxCols { a, out } => {
                let d = upstream!(out);
                let (r, c) = self.shape(*a);
                let y = &self.bufs[*out].data;
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    let mut inner = 0.0;
                    for i in 0..r {
                        inner += d[i * c + j] * y[i * c + j];
                    }
                    for i in 0..r {
                        da[i * c + j] = y[i * c + j] * (d[i * c + j] - inner);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LogSumExp { a, out } => {
                let d = upstream!(out)[0];
                let lse = self.bufs[*out].data[0];
                let da: Vec<f64> = self.bufs[*a]
                    .data
                    .iter()
                    .map(|x| (x - lse).exp() * d)
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::MeanRows { a, out } => {
                let d = upstream!(out);
                let (r, c) = self.shape(*a);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = d[j] / r as f64;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::MaxRows { a, argmax, out } => {
                let d = upstream!(out);
                let c = self.shape(*a).1;
                let mut da = vec![0.0; self.bufs[*a].numel()];
                for (j, &i) in argmax.iter().enumerate() {
                    da[i * c + j] = d[j];
                }
                self.accumulate(*a, &da);
            }
            Op::Row { a, i, out } => {
                let d = upstream!(out);
                let c = self.shape(*a).1;
                let mut da = vec![0.0; self.bufs[*a].numel()];
                da[i * c..(i + 1) * c].copy_from_slice(&d);
                self.accumulate(*a, &da);
            }
            Op::RowSlice { a, start, out } => {
                let d = upstream!(out);
                let c = self.shape(*a).1;
                let mut da = vec![0.0; self.bufs[*a].numel()];
                da[start * c..start * c + d.len()].copy_from_slice(&d);
                self.accumulate(*a, &da);
            }
            Op::Col { a, j, out } => {
                let d = upstream!(out);
                let (r, c) = self.shape(*a);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + j] = d[i];
                }
                self.accumulate(*a, &da);
            }
            Op::Index { a, idx, out } => {
                let d = upstream!(out)[0];
                let mut da = vec![0.0; self.bufs[*a].numel()];
                da[*idx] = d;
                self.accumulate(*a, &da);
            }
            Op::Concat { parts, out } => {
                let d = upstream!(out);
                let mut off = 0;
                for &p in parts {
                    let n = self.bufs[p].numel();
                    let slice = d[off..off + n].to_vec();
                    self.accumulate(p, &slice);
                    off += n;
                }
            }
            Op::Reshape { a, out } => {
                let d = upstream!(out);
                self.accumulate(*a, &d);
            }
            Op::AddRowBroadcast { a, bias, out } => {
                let d = upstream!(out);
                let (r, c) = self.shape(*a);
                self.accumulate(*a, &d);
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += d[i * c + j];
                    }
                }
                self.accumulate(*bias, &db);
            }
            Op::Mean { a, out } => {
                let d = upstream!(out)[0];
                let n = self.bufs[*a].numel();
                let da = vec![d / n as f64; n];
                self.accumulate(*a, &da);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

/// aᵀ·b with a: (k,m), b: (k,n) → (m,n)
fn matmul_tn_kernel(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let api = a[p * m + i];
            for j in 0..n {
                out[i * n + j] += api * b[p * n + j];
            }
        }
    }
    out
}

/// a·bᵀ with a: (m,k), b: (n,k) → (m,n)
fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}
