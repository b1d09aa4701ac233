//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every operation is appended to a [`Tape`] and returns a [`Value`] handle.
//! [`Tape::backward`] walks the recorded operations in exact reverse order and
//! accumulates adjoints for every node, so inputs always precede the
//! operations that consume them.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Shape of a recorded array. Rank 0, 1 or 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    /// Row-major `rows x cols`.
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: expected {expected} operand, got {got}")]
    UnexpectedShape {
        op: &'static str,
        expected: &'static str,
        got: Shape,
    },
    #[error("{op}: data length {len} does not match shape {shape}")]
    DataLength {
        op: &'static str,
        len: usize,
        shape: Shape,
    },
    #[error("{op}: range {start}..{end} out of bounds for {shape}")]
    OutOfRange {
        op: &'static str,
        start: usize,
        end: usize,
        shape: Shape,
    },
    #[error("backward: root must be a scalar, got {0}")]
    NonScalarRoot(Shape),
    #[error("value #{id} was recorded on a different tape")]
    ForeignValue { id: usize },
}

/// Handle to an array recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value {
    id: usize,
    tape: u64,
}

impl Value {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    ScaleBy { scalar: usize, tensor: usize },
    MatVec { matrix: usize, vector: usize },
    Sum(usize),
    Mean(usize),
    Square(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Tanh(usize),
    Dot(usize, usize),
    Norm(usize),
    Cosine(usize, usize),
    Clamp01(usize),
    Broadcast(usize),
    Slice { src: usize, start: usize },
    Element { src: usize, index: usize },
    Concat(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    data: Vec<f64>,
    shape: Shape,
    op: Op,
}

/// An append-only record of operations. Single-threaded; independent tapes
/// may live on different threads.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of a scalar root with respect to every node of a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`.
    pub fn wrt(&self, v: Value) -> &[f64] {
        assert_eq!(v.tape, self.tape, "value from a different tape");
        &self.grads[v.id]
    }

    /// Gradient keyed by node id.
    pub fn by_id(&self, id: usize) -> Option<&[f64]> {
        self.grads.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Value) -> Result<&Node, AutodiffError> {
        if v.tape != self.id {
            return Err(AutodiffError::ForeignValue { id: v.id });
        }
        Ok(&self.nodes[v.id])
    }

    fn push(&mut self, data: Vec<f64>, shape: Shape, op: Op) -> Value {
        debug_assert_eq!(data.len(), shape.len());
        self.nodes.push(Node { data, shape, op });
        Value {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.check(v).expect("value from a different tape").data
    }

    pub fn shape(&self, v: Value) -> Shape {
        self.check(v).expect("value from a different tape").shape
    }

    /// Scalar payload of a rank-0 value.
    pub fn scalar(&self, v: Value) -> f64 {
        self.data(v)[0]
    }

    /// Records a leaf. Leaves and constants are the same node kind; the
    /// distinction is only whether the caller reads its gradient.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Shape) -> Result<Value, AutodiffError> {
        if data.len() != shape.len() {
            return Err(AutodiffError::DataLength {
                op: "leaf",
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(data, shape, Op::Leaf))
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Value {
        let n = data.len();
        self.push(data, Shape::Vector(n), Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Value {
        self.push(vec![x], Shape::Scalar, Op::Leaf)
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Value, AutodiffError> {
        self.leaf(data, Shape::Matrix(rows, cols))
    }

    fn same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<Shape, AutodiffError> {
        let sa = self.check(a)?.shape;
        let sb = self.check(b)?.shape;
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Value,
        b: Value,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Value, AutodiffError> {
        let shape = self.same_shape(name, a, b)?;
        let data = zip_map(&self.nodes[a.id].data, &self.nodes[b.id].data, f);
        Ok(self.push(data, shape, op))
    }

    fn unary(&mut self, a: Value, op: Op, f: impl Fn(f64) -> f64) -> Result<Value, AutodiffError> {
        let node = self.check(a)?;
        let shape = node.shape;
        let data = node.data.iter().map(|&x| f(x)).collect();
        Ok(self.push(data, shape, op))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        self.binary("add", a, b, Op::Add(a.id, b.id), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        self.binary("subtract", a, b, Op::Sub(a.id, b.id), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        self.binary("multiply", a, b, Op::Mul(a.id, b.id), |x, y| x * y)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        self.binary("divide", a, b, Op::Div(a.id, b.id), |x, y| x / y)
    }

    /// Multiplication by a fixed real.
    pub fn scale(&mut self, a: Value, c: f64) -> Result<Value, AutodiffError> {
        self.unary(a, Op::Scale(a.id, c), |x| c * x)
    }

    /// Addition of a fixed real to every element.
    pub fn offset(&mut self, a: Value, c: f64) -> Result<Value, AutodiffError> {
        self.unary(a, Op::Offset(a.id), |x| x + c)
    }

    /// `scalar * tensor` where `scalar` is itself a recorded rank-0 value.
    pub fn scale_by(&mut self, scalar: Value, tensor: Value) -> Result<Value, AutodiffError> {
        let s = self.check(scalar)?;
        if s.shape != Shape::Scalar {
            return Err(AutodiffError::UnexpectedShape {
                op: "scale_by",
                expected: "scalar",
                got: s.shape,
            });
        }
        let c = s.data[0];
        let t = self.check(tensor)?;
        let shape = t.shape;
        let data = t.data.iter().map(|x| c * x).collect();
        Ok(self.push(
            data,
            shape,
            Op::ScaleBy {
                scalar: scalar.id,
                tensor: tensor.id,
            },
        ))
    }

    /// Matrix `(m x n)` times vector `(n)`.
    pub fn matvec(&mut self, matrix: Value, vector: Value) -> Result<Value, AutodiffError> {
        let ms = self.check(matrix)?.shape;
        let vs = self.check(vector)?.shape;
        let (rows, cols) = match (ms, vs) {
            (Shape::Matrix(r, c), Shape::Vector(n)) if c == n => (r, c),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matvec",
                    lhs: ms,
                    rhs: vs,
                })
            }
        };
        let m = &self.nodes[matrix.id].data;
        let v = &self.nodes[vector.id].data;
        let data = (0..rows).map(|i| dot(&m[i * cols..(i + 1) * cols], v)).collect();
        Ok(self.push(
            data,
            Shape::Vector(rows),
            Op::MatVec {
                matrix: matrix.id,
                vector: vector.id,
            },
        ))
    }

    pub fn sum(&mut self, a: Value) -> Result<Value, AutodiffError> {
        let s = self.check(a)?.data.iter().sum();
        Ok(self.push(vec![s], Shape::Scalar, Op::Sum(a.id)))
    }

    pub fn mean(&mut self, a: Value) -> Result<Value, AutodiffError> {
        let node = self.check(a)?;
        if node.data.is_empty() {
            return Err(AutodiffError::UnexpectedShape {
                op: "mean",
                expected: "non-empty",
                got: node.shape,
            });
        }
        let m = node.data.iter().sum::<f64>() / node.data.len() as f64;
        Ok(self.push(vec![m], Shape::Scalar, Op::Mean(a.id)))
    }

    pub fn square(&mut self, a: Value) -> Result<Value, AutodiffError> {
        self.unary(a, Op::Square(a.id), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Value) -> Result<Value, AutodiffError> {
        self.unary(a, Op::Sqrt(a.id), f64::sqrt)
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value, AutodiffError> {
        self.unary(a, Op::Sigmoid(a.id), sigmoid)
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value, AutodiffError> {
        self.unary(a, Op::Tanh(a.id), f64::tanh)
    }

    /// Clamp to `[0, 1]` with a straight-through gradient inside the interval.
    pub fn clamp01(&mut self, a: Value) -> Result<Value, AutodiffError> {
        self.unary(a, Op::Clamp01(a.id), |x| x.clamp(0.0, 1.0))
    }

    pub fn dot(&mut self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        self.same_shape("dot", a, b)?;
        let d = dot(&self.nodes[a.id].data, &self.nodes[b.id].data);
        Ok(self.push(vec![d], Shape::Scalar, Op::Dot(a.id, b.id)))
    }

    pub fn l2_norm(&mut self, a: Value) -> Result<Value, AutodiffError> {
        let n = norm(&self.check(a)?.data);
        Ok(self.push(vec![n], Shape::Scalar, Op::Norm(a.id)))
    }

    /// Cosine similarity. Defined as 0 (with zero gradient) when either
    /// operand is the zero vector.
    pub fn cosine(&mut self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        self.same_shape("cosine_similarity", a, b)?;
        let c = cosine(&self.nodes[a.id].data, &self.nodes[b.id].data);
        Ok(self.push(vec![c], Shape::Scalar, Op::Cosine(a.id, b.id)))
    }

    /// Repeats a scalar into a vector of length `n`.
    pub fn broadcast(&mut self, scalar: Value, n: usize) -> Result<Value, AutodiffError> {
        let s = self.check(scalar)?;
        if s.shape != Shape::Scalar {
            return Err(AutodiffError::UnexpectedShape {
                op: "broadcast",
                expected: "scalar",
                got: s.shape,
            });
        }
        let x = s.data[0];
        Ok(self.push(vec![x; n], Shape::Vector(n), Op::Broadcast(scalar.id)))
    }

    /// Contiguous sub-vector `start..start + len`.
    pub fn slice(&mut self, a: Value, start: usize, len: usize) -> Result<Value, AutodiffError> {
        let node = self.check(a)?;
        let n = match node.shape {
            Shape::Vector(n) => n,
            other => {
                return Err(AutodiffError::UnexpectedShape {
                    op: "slice",
                    expected: "vector",
                    got: other,
                })
            }
        };
        if start + len > n {
            return Err(AutodiffError::OutOfRange {
                op: "slice",
                start,
                end: start + len,
                shape: node.shape,
            });
        }
        let data = node.data[start..start + len].to_vec();
        Ok(self.push(data, Shape::Vector(len), Op::Slice { src: a.id, start }))
    }

    /// Single element of a vector as a scalar.
    pub fn element(&mut self, a: Value, index: usize) -> Result<Value, AutodiffError> {
        let node = self.check(a)?;
        if !matches!(node.shape, Shape::Vector(_)) || index >= node.data.len() {
            return Err(AutodiffError::OutOfRange {
                op: "element",
                start: index,
                end: index + 1,
                shape: node.shape,
            });
        }
        let x = node.data[index];
        Ok(self.push(vec![x], Shape::Scalar, Op::Element { src: a.id, index }))
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Value]) -> Result<Value, AutodiffError> {
        let mut data = Vec::new();
        for &p in parts {
            let node = self.check(p)?;
            if let Shape::Matrix(..) = node.shape {
                return Err(AutodiffError::UnexpectedShape {
                    op: "concat",
                    expected: "scalar or vector",
                    got: node.shape,
                });
            }
            data.extend_from_slice(&node.data);
        }
        let n = data.len();
        Ok(self.push(data, Shape::Vector(n), Op::Concat(parts.iter().map(|p| p.id).collect())))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Value) -> Result<Gradients, AutodiffError> {
        let shape = self.check(root)?.shape;
        if shape != Shape::Scalar {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        grads[root.id][0] = 1.0;

        for id in (0..=root.id).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            if g.iter().all(|&x| x == 0.0) {
                grads[id] = g;
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = g;
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Vec<f64>]) {
        let data = |i: usize| self.nodes[i].data.as_slice();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a], g.iter().copied());
                accumulate(&mut grads[b], g.iter().copied());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a], g.iter().copied());
                accumulate(&mut grads[b], g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (da, db) = (data(a), data(b));
                accumulate(&mut grads[a], g.iter().zip(db).map(|(g, y)| g * y));
                accumulate(&mut grads[b], g.iter().zip(da).map(|(g, x)| g * x));
            }
            Op::Div(a, b) => {
                let (da, db) = (data(a), data(b));
                accumulate(&mut grads[a], g.iter().zip(db).map(|(g, y)| g / y));
                accumulate(
                    &mut grads[b],
                    g.iter().zip(da.iter().zip(db)).map(|(g, (x, y))| -g * x / (y * y)),
                );
            }
            Op::Scale(a, c) => accumulate(&mut grads[a], g.iter().map(|x| c * x)),
            Op::Offset(a) => accumulate(&mut grads[a], g.iter().copied()),
            Op::ScaleBy { scalar, tensor } => {
                let c = data(scalar)[0];
                let ds = dot(g, data(tensor));
                grads[scalar][0] += ds;
                accumulate(&mut grads[tensor], g.iter().map(|x| c * x));
            }
            Op::MatVec { matrix, vector } => {
                let (rows, cols) = match self.nodes[matrix].shape {
                    Shape::Matrix(r, c) => (r, c),
                    _ => unreachable!("matvec recorded with non-matrix operand"),
                };
                let m = data(matrix);
                let v = data(vector);
                let gm = &mut grads[matrix];
                for i in 0..rows {
                    if g[i] != 0.0 {
                        for j in 0..cols {
                            gm[i * cols + j] += g[i] * v[j];
                        }
                    }
                }
                let gv = &mut grads[vector];
                for i in 0..rows {
                    if g[i] != 0.0 {
                        let row = &m[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            gv[j] += row[j] * g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let n = grads[a].len();
                accumulate(&mut grads[a], std::iter::repeat_n(g[0], n));
            }
            Op::Mean(a) => {
                let n = grads[a].len();
                accumulate(&mut grads[a], std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::Square(a) => accumulate(&mut grads[a], g.iter().zip(data(a)).map(|(g, x)| 2.0 * x * g)),
            Op::Sqrt(a) => accumulate(&mut grads[a], g.iter().zip(&node.data).map(|(g, y)| g / (2.0 * y))),
            Op::Sigmoid(a) => {
                accumulate(&mut grads[a], g.iter().zip(&node.data).map(|(g, y)| g * y * (1.0 - y)))
            }
            Op::Tanh(a) => accumulate(&mut grads[a], g.iter().zip(&node.data).map(|(g, y)| g * (1.0 - y * y))),
            Op::Clamp01(a) => accumulate(
                &mut grads[a],
                g.iter()
                    .zip(data(a))
                    .map(|(g, x)| if (0.0..=1.0).contains(x) { *g } else { 0.0 }),
            ),
            Op::Dot(a, b) => {
                let (da, db) = (data(a), data(b));
                accumulate(&mut grads[a], db.iter().map(|y| g[0] * y));
                accumulate(&mut grads[b], da.iter().map(|x| g[0] * x));
            }
            Op::Norm(a) => {
                let n = node.data[0];
                if n > 0.0 {
                    accumulate(&mut grads[a], data(a).iter().map(|x| g[0] * x / n));
                }
            }
            Op::Cosine(a, b) => {
                let (da, db) = (data(a), data(b));
                let (na, nb) = (norm(da), norm(db));
                if na > 0.0 && nb > 0.0 {
                    let c = node.data[0];
                    let inv = 1.0 / (na * nb);
                    let ga: Vec<f64> = da
                        .iter()
                        .zip(db)
                        .map(|(x, y)| g[0] * (y * inv - c * x / (na * na)))
                        .collect();
                    let gb: Vec<f64> = da
                        .iter()
                        .zip(db)
                        .map(|(x, y)| g[0] * (x * inv - c * y / (nb * nb)))
                        .collect();
                    accumulate(&mut grads[a], ga.into_iter());
                    accumulate(&mut grads[b], gb.into_iter());
                }
            }
            Op::Broadcast(s) => grads[s][0] += g.iter().sum::<f64>(),
            Op::Slice { src, start } => {
                for (dst, x) in grads[src][start..start + g.len()].iter_mut().zip(g) {
                    *dst += x;
                }
            }
            Op::Element { src, index } => grads[src][index] += g[0],
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = grads[p].len();
                    accumulate(&mut grads[p], g[offset..offset + n].iter().copied());
                    offset += n;
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: impl Iterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain cosine similarity, 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}
