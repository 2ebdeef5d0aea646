//! Reverse-mode differentiation over dense matrices.
//!
//! Every node stores its forward value; `backward` walks the nodes in
//! reverse creation order so gradient accumulation happens in a fixed,
//! reproducible order.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    /// Adds an `n x 1` column to every column of an `n x B` matrix.
    AddColumn(usize, usize),
    Relu(usize),
    Scale(usize, f64),
    Hadamard(usize, usize),
    /// Sum over rows, giving a `1 x B` row.
    ColumnSums(usize),
    SumAll(usize),
    Rows(usize, usize),
    Cols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    /// Subtract the last column from every other column, dropping it.
    AnchorLast(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
}

/// Recorded computation graph.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero if `v` did not influence the seed.
    pub fn get(&self, v: Var) -> Result<DMatrix<f64>> {
        let (r, c) = *self
            .shapes
            .get(v.0)
            .ok_or(Error::MissingCache("variable not recorded on this tape"))?;
        Ok(self.grads[v.0].clone().unwrap_or_else(|| DMatrix::zeros(r, c)))
    }
}

fn check_shape(expected: (usize, usize), got: (usize, usize), context: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            expected: expected.0 * expected.1,
            got: got.0 * got.1,
            context,
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Inputs, constants and parameters are all leaves.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, _) = self.shape(b);
        if ac != br {
            return Err(Error::Dimension {
                expected: ac,
                got: br,
                context: "matmul inner dimension",
            });
        }
        let _ = ar;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_shape(self.shape(a), self.shape(b), "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_shape(self.shape(a), self.shape(b), "sub")?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn add_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, _) = self.shape(a);
        check_shape((r, 1), self.shape(col), "broadcast column")?;
        let mut v = self.value(a).clone();
        let c = self.value(col).column(0).clone_owned();
        for mut column in v.column_iter_mut() {
            column += &c;
        }
        Ok(self.push(v, Op::AddColumn(a.0, col.0)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a.0, k))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        check_shape(self.shape(a), self.shape(b), "hadamard")?;
        let v = self.value(a).component_mul(self.value(b));
        Ok(self.push(v, Op::Hadamard(a.0, b.0)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).component_mul(self.value(a));
        self.push(v, Op::Hadamard(a.0, a.0))
    }

    pub fn column_sums(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sum();
        let v = DMatrix::from_row_slice(1, v.len(), v.as_slice());
        self.push(v, Op::ColumnSums(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(DMatrix::from_element(1, 1, s), Op::SumAll(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, _) = self.shape(a);
        if start + len > r {
            return Err(Error::Dimension {
                expected: start + len,
                got: r,
                context: "row slice",
            });
        }
        let v = self.value(a).rows(start, len).clone_owned();
        Ok(self.push(v, Op::Rows(a.0, start)))
    }

    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, c) = self.shape(a);
        if start + len > c {
            return Err(Error::Dimension {
                expected: start + len,
                got: c,
                context: "column slice",
            });
        }
        let v = self.value(a).columns(start, len).clone_owned();
        Ok(self.push(v, Op::Cols(a.0, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut total = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            if c != cols {
                return Err(Error::Dimension {
                    expected: cols,
                    got: c,
                    context: "concat rows",
                });
            }
            total += r;
        }
        let mut v = DMatrix::zeros(total, cols);
        let mut at = 0;
        for p in parts {
            let m = self.value(*p);
            v.rows_mut(at, m.nrows()).copy_from(m);
            at += m.nrows();
        }
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let mut total = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            if r != rows {
                return Err(Error::Dimension {
                    expected: rows,
                    got: r,
                    context: "concat cols",
                });
            }
            total += c;
        }
        let mut v = DMatrix::zeros(rows, total);
        let mut at = 0;
        for p in parts {
            let m = self.value(*p);
            v.columns_mut(at, m.ncols()).copy_from(m);
            at += m.ncols();
        }
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    /// `out[:, j] = a[:, j] - a[:, last]` for every column but the last.
    pub fn anchor_last(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c < 1 {
            return Err(Error::EmptyBatch);
        }
        let m = self.value(a);
        let anchor = m.column(c - 1).clone_owned();
        let mut v = DMatrix::zeros(r, c - 1);
        for j in 0..c - 1 {
            v.set_column(j, &(m.column(j) - &anchor));
        }
        Ok(self.push(v, Op::AnchorLast(a.0)))
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        check_shape((1, 1), self.shape(loss), "scalar loss")?;
        self.backward_with(loss, DMatrix::from_element(1, 1, 1.0))
    }

    /// Backpropagate an upstream gradient `seed` into node `out`.
    pub fn backward_with(&self, out: Var, seed: DMatrix<f64>) -> Result<Gradients> {
        self.backward_seeds(vec![(out, seed)])
    }

    /// Backpropagate several upstream gradients at once.
    pub fn backward_seeds(&self, seeds: Vec<(Var, DMatrix<f64>)>) -> Result<Gradients> {
        let mut top = 0;
        for (v, s) in &seeds {
            if v.0 >= self.nodes.len() {
                return Err(Error::MissingCache("seed node not recorded on this tape"));
            }
            check_shape(self.shape(*v), s.shape(), "upstream gradient")?;
            top = top.max(v.0);
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; top + 1];
        for (v, s) in seeds {
            accumulate(&mut grads, v.0, s);
        }

        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = &g * self.nodes[*b].value.transpose();
                    let gb = self.nodes[*a].value.transpose() * &g;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g.clone());
                }
                Op::AddColumn(a, c) => {
                    let gc = g.column_sum();
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *c, DMatrix::from_column_slice(gc.len(), 1, gc.as_slice()));
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::Hadamard(a, b) => {
                    let ga = g.component_mul(&self.nodes[*b].value);
                    let gb = g.component_mul(&self.nodes[*a].value);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ColumnSums(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let ga = DMatrix::from_fn(r, c, |_, j| g[(0, j)]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, DMatrix::from_element(r, c, g[(0, 0)]));
                }
                Op::Rows(a, start) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let mut ga = DMatrix::zeros(r, c);
                    ga.rows_mut(*start, g.nrows()).copy_from(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Cols(a, start) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let mut ga = DMatrix::zeros(r, c);
                    ga.columns_mut(*start, g.ncols()).copy_from(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.nodes[*p].value.nrows();
                        accumulate(&mut grads, *p, g.rows(at, n).clone_owned());
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.nodes[*p].value.ncols();
                        accumulate(&mut grads, *p, g.columns(at, n).clone_owned());
                        at += n;
                    }
                }
                Op::AnchorLast(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let mut ga = DMatrix::zeros(r, c);
                    ga.columns_mut(0, c - 1).copy_from(&g);
                    ga.set_column(c - 1, &(-g.column_sum()));
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<DMatrix<f64>>], idx: usize, g: DMatrix<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn linear_form_gradient_is_input() {
        let mut t = Tape::new();
        let w = t.leaf(m(1, 3, &[0.5, -1.0, 2.0]));
        let x = t.leaf(m(3, 1, &[1.0, 2.0, 3.0]));
        let y = t.matmul(w, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap(), m(1, 3, &[1.0, 2.0, 3.0]));
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.leaf(m(2, 1, &[1.0, -1.0]));
        let y = t.matmul(a, b).unwrap();
        let y = t.relu(y);
        let g = t.backward_with(y, DMatrix::zeros(2, 1)).unwrap();
        assert!(g.get(a).unwrap().iter().all(|x| *x == 0.0));
        assert!(g.get(b).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn anchor_gradient_sums_to_zero() {
        let mut t = Tape::new();
        let a = t.leaf(m(1, 3, &[1.0, 2.0, 5.0]));
        let z = t.anchor_last(a).unwrap();
        assert_eq!(t.value(z), &m(1, 2, &[-4.0, -3.0]));
        let s = t.sum(z);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), m(1, 3, &[1.0, 1.0, -2.0]));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.leaf(DMatrix::zeros(2, 3));
        let b = t.leaf(DMatrix::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        assert!(t.rows(a, 1, 2).is_err());
        let s = t.sum(a);
        let other = Var(99);
        let g = t.backward(s).unwrap();
        assert!(matches!(g.get(other), Err(Error::MissingCache(_))));
    }
}
