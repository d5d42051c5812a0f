//! Reverse-mode automatic differentiation over dense rank-1/rank-2 f64
//! arrays, recorded on a define-by-run tape.
//!
//! The tape owns a flat value arena plus an ordered list of operation
//! records. A forward call appends its output and a record; `backward`
//! replays the records in reverse, accumulating adjoints into a parallel
//! gradient arena. Tapes are rebuilt every optimization step and `clear`
//! keeps the allocations alive across steps.
//!
//! Supported operations: matmul, add, sub, elementwise mul, tanh, sigmoid,
//! exp, square, softplus, ln, recip, sum, mean, concat, slice and scaling
//! by a constant. `ln`/`recip` exist for Gaussian log-densities with a
//! learned scale, which divide by the predicted standard deviation.
//!
//! One tape is single-threaded; disjoint tapes may run concurrently.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: expected {expected}, got {got}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Shape,
    },
    #[error("backward requires a scalar loss, got {0}")]
    NonScalarLoss(Shape),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Dense array extent: a vector of length n or a row-major r x c matrix.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

/// Handle to a node on a specific tape. Cheap to copy; only meaningful for
/// the tape that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Tensor {
    id: usize,
    shape: Shape,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
enum UnaryOp {
    Tanh,
    Sigmoid,
    Exp,
    Square,
    Softplus,
    Ln,
    Recip,
}

#[derive(Clone, Copy, Debug)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Record {
    Unary { op: UnaryOp, a: usize, out: usize },
    Binary { op: BinaryOp, a: usize, b: usize, out: usize },
    Matmul { a: usize, b: usize, out: usize },
    Reduce { op: ReduceOp, a: usize, out: usize },
    Scale { a: usize, factor: f64, out: usize },
    Concat { parts: Vec<usize>, out: usize },
    Slice { a: usize, start: usize, out: usize },
}

#[derive(Clone, Copy, Debug)]
struct Node {
    offset: usize,
    shape: Shape,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Define-by-run computation tape.
#[derive(Default)]
pub struct Tape {
    data: Vec<f64>,
    nodes: Vec<Node>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drops all nodes and records but keeps the allocations.
    pub fn clear(&mut self) {
        self.data.clear();
        self.nodes.clear();
        self.records.clear();
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push_node(&mut self, shape: Shape) -> Tensor {
        let offset = self.data.len();
        self.data.resize(offset + shape.len(), 0.0);
        let id = self.nodes.len();
        self.nodes.push(Node { offset, shape });
        Tensor { id, shape }
    }

    fn slice_of(&self, id: usize) -> &[f64] {
        let n = self.nodes[id];
        &self.data[n.offset..n.offset + n.shape.len()]
    }

    /// Forward value of a tensor.
    pub fn value(&self, t: Tensor) -> &[f64] {
        self.slice_of(t.id)
    }

    /// Records an input node. Leaves and constants are mechanically
    /// identical; gradients are simply never read for constants.
    pub fn leaf(&mut self, values: &[f64], shape: Shape) -> Result<Tensor, DiffError> {
        if values.len() != shape.len() {
            return Err(DiffError::Invalid {
                op: "leaf",
                msg: format!("{} values for shape {shape}", values.len()),
            });
        }
        let t = self.push_node(shape);
        let off = self.nodes[t.id].offset;
        self.data[off..off + values.len()].copy_from_slice(values);
        Ok(t)
    }

    /// Input vector.
    pub fn vector(&mut self, values: &[f64]) -> Tensor {
        self.leaf(values, Shape::Vector(values.len()))
            .expect("vector shape always consistent")
    }

    /// Input scalar (a vector of length 1).
    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.vector(&[v])
    }

    /// Zero vector of length n.
    pub fn zeros(&mut self, n: usize) -> Tensor {
        self.push_node(Shape::Vector(n))
    }

    fn unary(&mut self, op: UnaryOp, a: Tensor) -> Tensor {
        let out = self.push_node(a.shape);
        let (ao, oo) = (self.nodes[a.id].offset, self.nodes[out.id].offset);
        for i in 0..a.len() {
            let x = self.data[ao + i];
            self.data[oo + i] = match op {
                UnaryOp::Tanh => x.tanh(),
                UnaryOp::Sigmoid => sigmoid(x),
                UnaryOp::Exp => x.exp(),
                UnaryOp::Square => x * x,
                UnaryOp::Softplus => softplus(x),
                UnaryOp::Ln => x.ln(),
                UnaryOp::Recip => 1.0 / x,
            };
        }
        self.records.push(Record::Unary { op, a: a.id, out: out.id });
        out
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid_t(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Square, a)
    }

    pub fn softplus_t(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn ln(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Ln, a)
    }

    pub fn recip(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Recip, a)
    }

    fn binary(&mut self, op: BinaryOp, name: &'static str, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        if a.shape != b.shape {
            return Err(DiffError::ShapeMismatch {
                op: name,
                lhs: a.shape,
                rhs: b.shape,
            });
        }
        let out = self.push_node(a.shape);
        let (ao, bo, oo) = (
            self.nodes[a.id].offset,
            self.nodes[b.id].offset,
            self.nodes[out.id].offset,
        );
        for i in 0..a.len() {
            let (x, y) = (self.data[ao + i], self.data[bo + i]);
            self.data[oo + i] = match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            };
        }
        self.records.push(Record::Binary { op, a: a.id, b: b.id, out: out.id });
        Ok(out)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        self.binary(BinaryOp::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        self.binary(BinaryOp::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        self.binary(BinaryOp::Mul, "mul", a, b)
    }

    /// Matrix product. Accepts matrix x matrix, or matrix x vector with the
    /// vector treated as a column.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        let (r, k) = match a.shape {
            Shape::Matrix(r, k) => (r, k),
            s => {
                return Err(DiffError::BadShape {
                    op: "matmul",
                    expected: "matrix lhs",
                    got: s,
                })
            }
        };
        let (k2, c, vector_rhs) = match b.shape {
            Shape::Matrix(k2, c) => (k2, c, false),
            Shape::Vector(k2) => (k2, 1, true),
        };
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape,
                rhs: b.shape,
            });
        }
        let out_shape = if vector_rhs {
            Shape::Vector(r)
        } else {
            Shape::Matrix(r, c)
        };
        let out = self.push_node(out_shape);
        let (ao, bo, oo) = (
            self.nodes[a.id].offset,
            self.nodes[b.id].offset,
            self.nodes[out.id].offset,
        );
        for i in 0..r {
            for j in 0..c {
                let mut acc = 0.0;
                for m in 0..k {
                    acc += self.data[ao + i * k + m] * self.data[bo + m * c + j];
                }
                self.data[oo + i * c + j] = acc;
            }
        }
        self.records.push(Record::Matmul { a: a.id, b: b.id, out: out.id });
        Ok(out)
    }

    fn reduce(&mut self, op: ReduceOp, a: Tensor) -> Result<Tensor, DiffError> {
        if a.is_empty() {
            return Err(DiffError::Invalid {
                op: "reduce",
                msg: "cannot reduce an empty tensor".into(),
            });
        }
        let out = self.push_node(Shape::Vector(1));
        let ao = self.nodes[a.id].offset;
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += self.data[ao + i];
        }
        if matches!(op, ReduceOp::Mean) {
            acc /= a.len() as f64;
        }
        let oo = self.nodes[out.id].offset;
        self.data[oo] = acc;
        self.records.push(Record::Reduce { op, a: a.id, out: out.id });
        Ok(out)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        self.reduce(ReduceOp::Sum, a)
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        self.reduce(ReduceOp::Mean, a)
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale(&mut self, a: Tensor, factor: f64) -> Tensor {
        let out = self.push_node(a.shape);
        let (ao, oo) = (self.nodes[a.id].offset, self.nodes[out.id].offset);
        for i in 0..a.len() {
            self.data[oo + i] = factor * self.data[ao + i];
        }
        self.records.push(Record::Scale { a: a.id, factor, out: out.id });
        out
    }

    /// Concatenation of vectors into one vector.
    pub fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor, DiffError> {
        let mut total = 0;
        for p in parts {
            match p.shape {
                Shape::Vector(n) => total += n,
                s => {
                    return Err(DiffError::BadShape {
                        op: "concat",
                        expected: "vector parts",
                        got: s,
                    })
                }
            }
        }
        let out = self.push_node(Shape::Vector(total));
        let oo = self.nodes[out.id].offset;
        let mut cursor = 0;
        for p in parts {
            let po = self.nodes[p.id].offset;
            for i in 0..p.len() {
                self.data[oo + cursor + i] = self.data[po + i];
            }
            cursor += p.len();
        }
        self.records.push(Record::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            out: out.id,
        });
        Ok(out)
    }

    /// Contiguous sub-vector `[start, start+len)`.
    pub fn slice(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor, DiffError> {
        let n = match a.shape {
            Shape::Vector(n) => n,
            s => {
                return Err(DiffError::BadShape {
                    op: "slice",
                    expected: "vector input",
                    got: s,
                })
            }
        };
        if start + len > n {
            return Err(DiffError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} out of [{n}]", start + len),
            });
        }
        let out = self.push_node(Shape::Vector(len));
        let (ao, oo) = (self.nodes[a.id].offset, self.nodes[out.id].offset);
        for i in 0..len {
            self.data[oo + i] = self.data[ao + start + i];
        }
        self.records.push(Record::Slice { a: a.id, start, out: out.id });
        Ok(out)
    }

    /// Reverse pass from a scalar loss. Returns adjoints for every node on
    /// the tape; leaves that nothing depends on keep a zero gradient.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients, DiffError> {
        if !loss.shape.is_scalar() {
            return Err(DiffError::NonScalarLoss(loss.shape));
        }
        let mut grads = vec![0.0; self.data.len()];
        grads[self.nodes[loss.id].offset] = 1.0;

        for rec in self.records.iter().rev() {
            match rec {
                Record::Unary { op, a, out } => {
                    let (an, on) = (self.nodes[*a], self.nodes[*out]);
                    for i in 0..an.shape.len() {
                        let g = grads[on.offset + i];
                        if g == 0.0 {
                            continue;
                        }
                        let x = self.data[an.offset + i];
                        let y = self.data[on.offset + i];
                        grads[an.offset + i] += g * match op {
                            UnaryOp::Tanh => 1.0 - y * y,
                            UnaryOp::Sigmoid => y * (1.0 - y),
                            UnaryOp::Exp => y,
                            UnaryOp::Square => 2.0 * x,
                            UnaryOp::Softplus => sigmoid(x),
                            UnaryOp::Ln => 1.0 / x,
                            UnaryOp::Recip => -y * y,
                        };
                    }
                }
                Record::Binary { op, a, b, out } => {
                    let (an, bn, on) = (self.nodes[*a], self.nodes[*b], self.nodes[*out]);
                    for i in 0..an.shape.len() {
                        let g = grads[on.offset + i];
                        if g == 0.0 {
                            continue;
                        }
                        match op {
                            BinaryOp::Add => {
                                grads[an.offset + i] += g;
                                grads[bn.offset + i] += g;
                            }
                            BinaryOp::Sub => {
                                grads[an.offset + i] += g;
                                grads[bn.offset + i] -= g;
                            }
                            BinaryOp::Mul => {
                                let (x, y) = (self.data[an.offset + i], self.data[bn.offset + i]);
                                grads[an.offset + i] += g * y;
                                grads[bn.offset + i] += g * x;
                            }
                        }
                    }
                }
                Record::Matmul { a, b, out } => {
                    let (an, bn, on) = (self.nodes[*a], self.nodes[*b], self.nodes[*out]);
                    let (r, k) = match an.shape {
                        Shape::Matrix(r, k) => (r, k),
                        _ => unreachable!("matmul lhs recorded as matrix"),
                    };
                    let c = on.shape.len() / r;
                    // dA[i,m] += g[i,j] B[m,j]; dB[m,j] += A[i,m] g[i,j]
                    for i in 0..r {
                        for j in 0..c {
                            let g = grads[on.offset + i * c + j];
                            if g == 0.0 {
                                continue;
                            }
                            for m in 0..k {
                                grads[an.offset + i * k + m] += g * self.data[bn.offset + m * c + j];
                                grads[bn.offset + m * c + j] += g * self.data[an.offset + i * k + m];
                            }
                        }
                    }
                }
                Record::Reduce { op, a, out } => {
                    let (an, on) = (self.nodes[*a], self.nodes[*out]);
                    let mut g = grads[on.offset];
                    if matches!(op, ReduceOp::Mean) {
                        g /= an.shape.len() as f64;
                    }
                    if g != 0.0 {
                        for i in 0..an.shape.len() {
                            grads[an.offset + i] += g;
                        }
                    }
                }
                Record::Scale { a, factor, out } => {
                    let (an, on) = (self.nodes[*a], self.nodes[*out]);
                    for i in 0..an.shape.len() {
                        grads[an.offset + i] += factor * grads[on.offset + i];
                    }
                }
                Record::Concat { parts, out } => {
                    let on = self.nodes[*out];
                    let mut cursor = 0;
                    for p in parts {
                        let pn = self.nodes[*p];
                        for i in 0..pn.shape.len() {
                            grads[pn.offset + i] += grads[on.offset + cursor + i];
                        }
                        cursor += pn.shape.len();
                    }
                }
                Record::Slice { a, start, out } => {
                    let (an, on) = (self.nodes[*a], self.nodes[*out]);
                    for i in 0..on.shape.len() {
                        grads[an.offset + start + i] += grads[on.offset + i];
                    }
                }
            }
        }

        Ok(Gradients {
            grads,
            nodes: self.nodes.clone(),
        })
    }
}

/// Adjoints produced by [`Tape::backward`], addressed by tensor handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<f64>,
    nodes: Vec<Node>,
}

impl Gradients {
    pub fn get(&self, t: Tensor) -> &[f64] {
        let n = self.nodes[t.id];
        &self.grads[n.offset..n.offset + n.shape.len()]
    }
}
