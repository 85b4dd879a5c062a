//! Reverse-mode autodiff over a flat tape of tensor nodes.
//!
//! Every operation validates shapes, computes its value eagerly and records a
//! backward closure mapping (parent values, own value, incoming gradient) to
//! per-parent gradient contributions. Gradients accumulate additively during
//! [`Graph::backward`]; callers reading them out are responsible for zeroing
//! their own external accumulators.
//!
//! Shapes follow row-major layout. Matrix-like ops view tensors as
//! `[rows, last_dim]`; image-like ops use `(H, W, C)` channels-last.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<F> = dyn Fn(&[&Tensor<F>], &Tensor<F>, &[F]) -> Vec<Vec<F>>;

struct OpRecord<F: Real> {
    parents: Vec<usize>,
    back: Box<BackFn<F>>,
}

pub struct Graph<F: Real> {
    values: Vec<Tensor<F>>,
    grads: Vec<Option<Vec<F>>>,
    ops: Vec<Option<OpRecord<F>>>,
    requires: Vec<bool>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Insert a leaf tensor. `requires_grad` marks it as a differentiation
    /// target.
    pub fn input(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.values.push(t);
        self.grads.push(None);
        self.ops.push(None);
        self.requires.push(requires_grad);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.input(t, false)
    }

    fn push(
        &mut self,
        value: Tensor<F>,
        parents: Vec<usize>,
        back: Box<BackFn<F>>,
    ) -> Var {
        let requires = parents.iter().any(|&p| self.requires[p]);
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(if requires {
            Some(OpRecord { parents, back })
        } else {
            None
        });
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    fn finite(name: &str, t: &Tensor<F>) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(name.to_string()))
        }
    }

    /// Backpropagate from a scalar node. Gradients of all reachable
    /// `requires_grad` nodes become available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Dimension(
                "backward target must be scalar".to_string(),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![F::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.requires[i] || self.grads[i].is_none() {
                continue;
            }
            let Some(op) = self.ops[i].as_ref() else {
                continue;
            };
            let gout = self.grads[i].take().unwrap();
            let pvals: Vec<&Tensor<F>> = op.parents.iter().map(|&p| &self.values[p]).collect();
            let contribs = (op.back)(&pvals, &self.values[i], &gout);
            debug_assert_eq!(contribs.len(), op.parents.len());
            let parents = op.parents.clone();
            self.grads[i] = Some(gout);
            for (p, c) in parents.into_iter().zip(contribs) {
                if !self.requires[p] {
                    continue;
                }
                let slot = self.grads[p].get_or_insert_with(|| vec![F::ZERO; self.values[p].numel()]);
                for (s, v) in slot.iter_mut().zip(c) {
                    *s = s.add(v);
                }
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape != tb.shape {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| x.add(*y)).collect(),
        };
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(|_, _, g| vec![g.to_vec(), g.to_vec()]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape != tb.shape {
            return Err(Error::Dimension(format!(
                "sub: {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| x.sub(*y)).collect(),
        };
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(|_, _, g| vec![g.to_vec(), g.iter().map(|v| v.neg()).collect()]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape != tb.shape {
            return Err(Error::Dimension(format!(
                "mul: {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| x.mul(*y)).collect(),
        };
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(|p, _, g| {
                vec![
                    g.iter().zip(&p[1].data).map(|(gi, y)| gi.mul(*y)).collect(),
                    g.iter().zip(&p[0].data).map(|(gi, x)| gi.mul(*x)).collect(),
                ]
            }),
        ))
    }

    /// Sum of same-shaped terms.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::EmptyInput("add_n".to_string()))?;
        let shape = self.values[first.0].shape.clone();
        let mut data = vec![F::ZERO; self.values[first.0].numel()];
        for t in terms {
            let tt = &self.values[t.0];
            if tt.shape != shape {
                return Err(Error::Dimension("add_n: shape mismatch".to_string()));
            }
            for (d, v) in data.iter_mut().zip(&tt.data) {
                *d = d.add(*v);
            }
        }
        let n = terms.len();
        Ok(self.push(
            Tensor { shape, data },
            terms.iter().map(|v| v.0).collect(),
            Box::new(move |_, _, g| (0..n).map(|_| g.to_vec()).collect()),
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        let ta = &self.values[a.0];
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x.mul(cf)).collect(),
        };
        self.push(
            out,
            vec![a.0],
            Box::new(move |_, _, g| vec![g.iter().map(|v| v.mul(cf)).collect()]),
        )
    }

    /// Elementwise product with a single-element tensor variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.values[s.0].numel() != 1 {
            return Err(Error::Dimension("scale_by: scale must be scalar".to_string()));
        }
        let sv = self.values[s.0].data[0];
        let ta = &self.values[a.0];
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x.mul(sv)).collect(),
        };
        Ok(self.push(
            out,
            vec![a.0, s.0],
            Box::new(move |p, _, g| {
                let sv = p[1].data[0];
                let da = g.iter().map(|v| v.mul(sv)).collect();
                let mut ds = F::ZERO;
                for (gi, x) in g.iter().zip(&p[0].data) {
                    ds = ds.add(gi.mul(*x));
                }
                vec![da, vec![ds]]
            }),
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x.tanh()).collect(),
        };
        self.push(
            out,
            vec![a.0],
            Box::new(|_, y, g| {
                vec![g
                    .iter()
                    .zip(&y.data)
                    .map(|(gi, yi)| gi.mul(F::ONE.sub(yi.mul(*yi))))
                    .collect()]
            }),
        )
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&mut self, a: Var) -> Var {
        const C0: f64 = 0.7978845608028654; // sqrt(2/pi)
        const C1: f64 = 0.044715;
        let ta = &self.values[a.0];
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta
                .data
                .iter()
                .map(|x| {
                    let xf = x.to_f64();
                    let t = (C0 * (xf + C1 * xf * xf * xf)).tanh();
                    F::from_f64(0.5 * xf * (1.0 + t))
                })
                .collect(),
        };
        self.push(
            out,
            vec![a.0],
            Box::new(|p, _, g| {
                vec![g
                    .iter()
                    .zip(&p[0].data)
                    .map(|(gi, x)| {
                        let xf = x.to_f64();
                        let inner = C0 * (xf + C1 * xf * xf * xf);
                        let t = inner.tanh();
                        let dinner = C0 * (1.0 + 3.0 * C1 * xf * xf);
                        let d = 0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * dinner;
                        F::from_f64(gi.to_f64() * d)
                    })
                    .collect()]
            }),
        )
    }

    /// Elementwise power with constant exponent; inputs must be positive.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let pf = F::from_f64(p);
        let ta = &self.values[a.0];
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x.powf(pf)).collect(),
        };
        Self::finite("powf", &out)?;
        Ok(self.push(
            out,
            vec![a.0],
            Box::new(move |pv, _, g| {
                vec![g
                    .iter()
                    .zip(&pv[0].data)
                    .map(|(gi, x)| gi.mul(pf.mul(x.powf(pf.sub(F::ONE)))))
                    .collect()]
            }),
        ))
    }

    // ---- matrix ops ----

    /// `y = x · Wᵀ + b` with `x: [T, Din]` (or `[Din]`), `W: [Dout, Din]`,
    /// `b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        let din = tx.last_dim();
        if tw.rank() != 2 || tw.shape[1] != din {
            return Err(Error::Dimension(format!(
                "linear: x last dim {} vs W {:?}",
                din, tw.shape
            )));
        }
        let dout = tw.shape[0];
        if tb.numel() != dout {
            return Err(Error::Dimension(format!(
                "linear: bias {} vs Dout {}",
                tb.numel(),
                dout
            )));
        }
        let rows = tx.leading();
        let mut out = vec![F::ZERO; rows * dout];
        for r in 0..rows {
            let xr = &tx.data[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &tw.data[o * din..(o + 1) * din];
                let mut acc = tb.data[o];
                for i in 0..din {
                    acc = acc.add(xr[i].mul(wr[i]));
                }
                out[r * dout + o] = acc;
            }
        }
        let mut shape = tx.shape.clone();
        if shape.is_empty() {
            shape = vec![dout];
        } else {
            *shape.last_mut().unwrap() = dout;
        }
        Ok(self.push(
            Tensor { shape, data: out },
            vec![x.0, w.0, b.0],
            Box::new(move |p, _, g| {
                let (tx, tw) = (p[0], p[1]);
                let mut dx = vec![F::ZERO; tx.numel()];
                let mut dw = vec![F::ZERO; tw.numel()];
                let mut db = vec![F::ZERO; dout];
                for r in 0..rows {
                    let gr = &g[r * dout..(r + 1) * dout];
                    let xr = &tx.data[r * din..(r + 1) * din];
                    for o in 0..dout {
                        let go = gr[o];
                        db[o] = db[o].add(go);
                        let wr = &tw.data[o * din..(o + 1) * din];
                        for i in 0..din {
                            dx[r * din + i] = dx[r * din + i].add(go.mul(wr[i]));
                            dw[o * din + i] = dw[o * din + i].add(go.mul(xr[i]));
                        }
                    }
                }
                vec![dx, dw, db]
            }),
        ))
    }

    /// `a [m, k] · b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = (ta.leading(), ta.last_dim());
        if tb.rank() != 2 || tb.shape[0] != k {
            return Err(Error::Dimension(format!(
                "matmul: [{}x{}] vs {:?}",
                m, k, tb.shape
            )));
        }
        let n = tb.shape[1];
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = ta.data[i * k + l];
                let br = &tb.data[l * n..(l + 1) * n];
                let or = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    or[j] = or[j].add(av.mul(br[j]));
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            vec![a.0, b.0],
            Box::new(move |p, _, g| {
                let (ta, tb) = (p[0], p[1]);
                let mut da = vec![F::ZERO; m * k];
                let mut db = vec![F::ZERO; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        for l in 0..k {
                            da[i * k + l] = da[i * k + l].add(gv.mul(tb.data[l * n + j]));
                            db[l * n + j] = db[l * n + j].add(gv.mul(ta.data[i * k + l]));
                        }
                    }
                }
                vec![da, db]
            }),
        ))
    }

    /// `a [m, k] · b [n, k]ᵀ -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = (ta.leading(), ta.last_dim());
        if tb.last_dim() != k {
            return Err(Error::Dimension(format!(
                "matmul_nt: inner {} vs {}",
                k,
                tb.last_dim()
            )));
        }
        let n = tb.leading();
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            let ar = &ta.data[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &tb.data[j * k..(j + 1) * k];
                let mut acc = F::ZERO;
                for l in 0..k {
                    acc = acc.add(ar[l].mul(br[l]));
                }
                out[i * n + j] = acc;
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            vec![a.0, b.0],
            Box::new(move |p, _, g| {
                let (ta, tb) = (p[0], p[1]);
                let mut da = vec![F::ZERO; m * k];
                let mut db = vec![F::ZERO; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        for l in 0..k {
                            da[i * k + l] = da[i * k + l].add(gv.mul(tb.data[j * k + l]));
                            db[j * k + l] = db[j * k + l].add(gv.mul(ta.data[i * k + l]));
                        }
                    }
                }
                vec![da, db]
            }),
        ))
    }

    /// Row lookup: `table [V, C]`, `ids` of length `T` -> `[T, C]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.values[table.0];
        if tt.rank() != 2 {
            return Err(Error::Dimension("gather_rows: table must be 2-d".to_string()));
        }
        let (v, c) = (tt.shape[0], tt.shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Dimension(format!(
                "gather_rows: id {} out of range {}",
                bad, v
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tt.data[i * c..(i + 1) * c]);
        }
        let ids_owned = ids.to_vec();
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), c],
                data: out,
            },
            vec![table.0],
            Box::new(move |p, _, g| {
                let mut dt = vec![F::ZERO; p[0].numel()];
                for (r, &i) in ids_owned.iter().enumerate() {
                    for j in 0..c {
                        dt[i * c + j] = dt[i * c + j].add(g[r * c + j]);
                    }
                }
                vec![dt]
            }),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows".to_string()));
        }
        let c = self.values[parts[0].0].last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.values[p.0];
            if t.last_dim() != c {
                return Err(Error::Dimension("concat_rows: column mismatch".to_string()));
            }
            rows += t.leading();
            data.extend_from_slice(&t.data);
        }
        let sizes: Vec<usize> = parts.iter().map(|p| self.values[p.0].numel()).collect();
        Ok(self.push(
            Tensor {
                shape: vec![rows, c],
                data,
            },
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |_, _, g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &s in &sizes {
                    out.push(g[off..off + s].to_vec());
                    off += s;
                }
                out
            }),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols".to_string()));
        }
        let rows = self.values[parts[0].0].leading();
        let widths: Vec<usize> = parts.iter().map(|p| self.values[p.0].last_dim()).collect();
        for p in parts {
            if self.values[p.0].leading() != rows {
                return Err(Error::Dimension("concat_cols: row mismatch".to_string()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![F::ZERO; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let t = &self.values[p.0];
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&t.data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let widths_b = widths.clone();
        Ok(self.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |_, _, g| {
                let mut out = Vec::with_capacity(widths_b.len());
                let mut off = 0;
                for &w in &widths_b {
                    let mut d = vec![F::ZERO; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    out.push(d);
                    off += w;
                }
                out
            }),
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.values[a.0];
        let (rows, c) = (t.leading(), t.last_dim());
        if start + len > rows {
            return Err(Error::Dimension(format!(
                "slice_rows: {}+{} > {}",
                start, len, rows
            )));
        }
        let data = t.data[start * c..(start + len) * c].to_vec();
        Ok(self.push(
            Tensor {
                shape: vec![len, c],
                data,
            },
            vec![a.0],
            Box::new(move |p, _, g| {
                let mut d = vec![F::ZERO; p[0].numel()];
                d[start * c..(start + len) * c].copy_from_slice(g);
                vec![d]
            }),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.values[a.0];
        let (rows, c) = (t.leading(), t.last_dim());
        if start + len > c {
            return Err(Error::Dimension(format!(
                "slice_cols: {}+{} > {}",
                start, len, c
            )));
        }
        let mut data = vec![F::ZERO; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&t.data[r * c + start..r * c + start + len]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, len],
                data,
            },
            vec![a.0],
            Box::new(move |p, _, g| {
                let mut d = vec![F::ZERO; p[0].numel()];
                for r in 0..rows {
                    d[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![d]
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = &self.values[a.0];
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {:?}",
                t.shape, shape
            )));
        }
        let data = t.data.clone();
        Ok(self.push(
            Tensor { shape, data },
            vec![a.0],
            Box::new(|_, _, g| vec![g.to_vec()]),
        ))
    }

    // ---- reductions / normalization ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let mut acc = F::ZERO;
        for v in &t.data {
            acc = acc.add(*v);
        }
        let n = t.numel();
        self.push(
            Tensor::scalar(acc),
            vec![a.0],
            Box::new(move |_, _, g| vec![vec![g[0]; n]]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over the trailing axis, keeping it with extent 1.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let (rows, d) = (t.leading(), t.last_dim());
        let inv = F::from_f64(1.0 / d as f64);
        let mut out = vec![F::ZERO; rows];
        for r in 0..rows {
            let mut acc = F::ZERO;
            for v in &t.data[r * d..(r + 1) * d] {
                acc = acc.add(*v);
            }
            out[r] = acc.mul(inv);
        }
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = 1;
        self.push(
            Tensor { shape, data: out },
            vec![a.0],
            Box::new(move |_, _, g| {
                let mut d_in = vec![F::ZERO; rows * d];
                for r in 0..rows {
                    let gv = g[r].mul(inv);
                    for v in d_in[r * d..(r + 1) * d].iter_mut() {
                        *v = gv;
                    }
                }
                vec![d_in]
            }),
        )
    }

    /// Broadcast a `[rows, 1]` tensor along the trailing axis to extent `d`.
    pub fn expand_last(&mut self, a: Var, d: usize) -> Result<Var> {
        let t = &self.values[a.0];
        if t.last_dim() != 1 {
            return Err(Error::Dimension("expand_last: trailing axis must be 1".to_string()));
        }
        let rows = t.leading();
        let mut out = vec![F::ZERO; rows * d];
        for r in 0..rows {
            for v in out[r * d..(r + 1) * d].iter_mut() {
                *v = t.data[r];
            }
        }
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = d;
        Ok(self.push(
            Tensor { shape, data: out },
            vec![a.0],
            Box::new(move |_, _, g| {
                let mut d_in = vec![F::ZERO; rows];
                for r in 0..rows {
                    let mut acc = F::ZERO;
                    for v in &g[r * d..(r + 1) * d] {
                        acc = acc.add(*v);
                    }
                    d_in[r] = acc;
                }
                vec![d_in]
            }),
        ))
    }

    /// Softmax over the trailing axis (max-shifted for stability).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        let (rows, d) = (t.leading(), t.last_dim());
        if d == 0 {
            return Err(Error::Dimension("softmax: empty trailing axis".to_string()));
        }
        let mut out = vec![F::ZERO; rows * d];
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let mut m = row[0];
            for v in row {
                m = m.max(*v);
            }
            let mut z = F::ZERO;
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v.sub(m).exp();
                z = z.add(*o);
            }
            for o in out[r * d..(r + 1) * d].iter_mut() {
                *o = o.div(z);
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        Self::finite("softmax", &value)?;
        Ok(self.push(
            value,
            vec![a.0],
            Box::new(move |_, y, g| {
                let mut d_in = vec![F::ZERO; rows * d];
                for r in 0..rows {
                    let yr = &y.data[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = F::ZERO;
                    for (yi, gi) in yr.iter().zip(gr) {
                        dot = dot.add(yi.mul(*gi));
                    }
                    for ((o, yi), gi) in d_in[r * d..(r + 1) * d].iter_mut().zip(yr).zip(gr) {
                        *o = yi.mul(gi.sub(dot));
                    }
                }
                vec![d_in]
            }),
        ))
    }

    /// Softmax over the trailing axis restricted to `allowed` entries
    /// (row-major `[rows, d]`). Disallowed entries are exactly zero in the
    /// output and receive no gradient, so masked positions can never leak.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let t = &self.values[a.0];
        let (rows, d) = (t.leading(), t.last_dim());
        if allowed.len() != rows * d {
            return Err(Error::Dimension("masked_softmax: mask size".to_string()));
        }
        let mut out = vec![F::ZERO; rows * d];
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let mask = &allowed[r * d..(r + 1) * d];
            let mut m: Option<F> = None;
            for (v, &ok) in row.iter().zip(mask) {
                if ok {
                    m = Some(match m {
                        Some(cur) => cur.max(*v),
                        None => *v,
                    });
                }
            }
            let Some(m) = m else { continue };
            let mut z = F::ZERO;
            for ((o, v), &ok) in out[r * d..(r + 1) * d].iter_mut().zip(row).zip(mask) {
                if ok {
                    *o = v.sub(m).exp();
                    z = z.add(*o);
                }
            }
            for (o, &ok) in out[r * d..(r + 1) * d].iter_mut().zip(mask) {
                if ok {
                    *o = o.div(z);
                }
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        Self::finite("masked_softmax", &value)?;
        let mask_owned = allowed.to_vec();
        Ok(self.push(
            value,
            vec![a.0],
            Box::new(move |_, y, g| {
                let mut d_in = vec![F::ZERO; rows * d];
                for r in 0..rows {
                    let yr = &y.data[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mask = &mask_owned[r * d..(r + 1) * d];
                    let mut dot = F::ZERO;
                    for ((yi, gi), &ok) in yr.iter().zip(gr).zip(mask) {
                        if ok {
                            dot = dot.add(yi.mul(*gi));
                        }
                    }
                    for (((o, yi), gi), &ok) in d_in[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(yr)
                        .zip(gr)
                        .zip(mask)
                    {
                        if ok {
                            *o = yi.mul(gi.sub(dot));
                        }
                    }
                }
                vec![d_in]
            }),
        ))
    }

    /// Layer normalization over the trailing axis with learned scale/offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = &self.values[x.0];
        let (rows, d) = (t.leading(), t.last_dim());
        let tg = &self.values[gamma.0];
        let tb = &self.values[beta.0];
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::Dimension("layer_norm: scale/offset size".to_string()));
        }
        let epsf = F::from_f64(eps);
        let invd = F::from_f64(1.0 / d as f64);
        let mut out = vec![F::ZERO; rows * d];
        let mut xhat = vec![F::ZERO; rows * d];
        let mut inv_std = vec![F::ZERO; rows];
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let mut mu = F::ZERO;
            for v in row {
                mu = mu.add(*v);
            }
            mu = mu.mul(invd);
            let mut var = F::ZERO;
            for v in row {
                let c = v.sub(mu);
                var = var.add(c.mul(c));
            }
            var = var.mul(invd);
            let istd = F::ONE.div(var.add(epsf).sqrt());
            inv_std[r] = istd;
            for i in 0..d {
                let xh = row[i].sub(mu).mul(istd);
                xhat[r * d + i] = xh;
                out[r * d + i] = xh.mul(tg.data[i]).add(tb.data[i]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: t.shape.clone(),
                data: out,
            },
            vec![x.0, gamma.0, beta.0],
            Box::new(move |p, _, g| {
                let tg = p[1];
                let mut dx = vec![F::ZERO; rows * d];
                let mut dg = vec![F::ZERO; d];
                let mut db = vec![F::ZERO; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let istd = inv_std[r];
                    let mut sum_gy = F::ZERO;
                    let mut sum_gy_xh = F::ZERO;
                    for i in 0..d {
                        let gy = gr[i].mul(tg.data[i]);
                        sum_gy = sum_gy.add(gy);
                        sum_gy_xh = sum_gy_xh.add(gy.mul(xh[i]));
                        dg[i] = dg[i].add(gr[i].mul(xh[i]));
                        db[i] = db[i].add(gr[i]);
                    }
                    let m1 = sum_gy.mul(invd);
                    let m2 = sum_gy_xh.mul(invd);
                    for i in 0..d {
                        let gy = gr[i].mul(tg.data[i]);
                        dx[r * d + i] = istd.mul(gy.sub(m1).sub(xh[i].mul(m2)));
                    }
                }
                vec![dx, dg, db]
            }),
        ))
    }

    /// Mean of `-log softmax(logits)[target]` over unmasked positions.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = &self.values[logits.0];
        let (rows, v) = (t.leading(), t.last_dim());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Dimension("cross_entropy: targets/mask length".to_string()));
        }
        if let Some(bad) = targets
            .iter()
            .zip(mask)
            .find(|(&tid, &m)| m && tid >= v)
        {
            return Err(Error::Dimension(format!(
                "cross_entropy: target {} out of range {}",
                bad.0, v
            )));
        }
        let n_unmasked = mask.iter().filter(|&&m| m).count();
        if n_unmasked == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut loss = F::ZERO;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &t.data[r * v..(r + 1) * v];
            let mut m = row[0];
            for x in row {
                m = m.max(*x);
            }
            let mut z = F::ZERO;
            for x in row {
                z = z.add(x.sub(m).exp());
            }
            // -log p[target] = log z + m - logit[target]
            loss = loss.add(z.ln().add(m).sub(row[targets[r]]));
        }
        let inv_n = F::from_f64(1.0 / n_unmasked as f64);
        loss = loss.mul(inv_n);
        let value = Tensor::scalar(loss);
        Self::finite("cross_entropy", &value)?;
        let targets_b = targets.to_vec();
        let mask_b = mask.to_vec();
        Ok(self.push(
            value,
            vec![logits.0],
            Box::new(move |p, _, g| {
                let t = p[0];
                let scale = g[0].mul(inv_n);
                let mut d = vec![F::ZERO; rows * v];
                for r in 0..rows {
                    if !mask_b[r] {
                        continue;
                    }
                    let row = &t.data[r * v..(r + 1) * v];
                    let mut m = row[0];
                    for x in row {
                        m = m.max(*x);
                    }
                    let mut z = F::ZERO;
                    for x in row {
                        z = z.add(x.sub(m).exp());
                    }
                    for i in 0..v {
                        let p_i = row[i].sub(m).exp().div(z);
                        let delta = if i == targets_b[r] { F::ONE } else { F::ZERO };
                        d[r * v + i] = scale.mul(p_i.sub(delta));
                    }
                }
                vec![d]
            }),
        ))
    }

    /// `mean((a - b)^2)` over all elements.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape != tb.shape {
            return Err(Error::Dimension("mean_sq_diff: shape mismatch".to_string()));
        }
        let n = ta.numel();
        let inv = F::from_f64(1.0 / n as f64);
        let mut acc = F::ZERO;
        for (x, y) in ta.data.iter().zip(&tb.data) {
            let d = x.sub(*y);
            acc = acc.add(d.mul(d));
        }
        Ok(self.push(
            Tensor::scalar(acc.mul(inv)),
            vec![a.0, b.0],
            Box::new(move |p, _, g| {
                let c = g[0].mul(inv).mul(F::from_f64(2.0));
                let da: Vec<F> = p[0]
                    .data
                    .iter()
                    .zip(&p[1].data)
                    .map(|(x, y)| c.mul(x.sub(*y)))
                    .collect();
                let db = da.iter().map(|v| v.neg()).collect();
                vec![da, db]
            }),
        ))
    }

    // ---- image ops (channels-last (H, W, C)) ----

    /// Add a per-channel vector to a `(H, W, C)` tensor.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let t = &self.values[x.0];
        let c = t.last_dim();
        if self.values[v.0].numel() != c {
            return Err(Error::Dimension("add_channel: channel mismatch".to_string()));
        }
        let tv = &self.values[v.0];
        let rows = t.leading();
        let mut out = t.data.clone();
        for r in 0..rows {
            for i in 0..c {
                out[r * c + i] = out[r * c + i].add(tv.data[i]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: t.shape.clone(),
                data: out,
            },
            vec![x.0, v.0],
            Box::new(move |_, _, g| {
                let mut dv = vec![F::ZERO; c];
                for r in 0..rows {
                    for i in 0..c {
                        dv[i] = dv[i].add(g[r * c + i]);
                    }
                }
                vec![g.to_vec(), dv]
            }),
        ))
    }

    /// 2-d convolution, channels-last. `x: (H, W, Cin)`,
    /// `w: (kh, kw, Cin, Cout)`, `b: (Cout)`; zero padding `pad`, stride
    /// `stride`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let tx = &self.values[x.0];
        let tw = &self.values[w.0];
        let tb = &self.values[b.0];
        if tx.rank() != 3 || tw.rank() != 4 {
            return Err(Error::Dimension("conv2d: expects (H,W,C) and (kh,kw,Cin,Cout)".to_string()));
        }
        let (h, wd, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (kh, kw, wcin, cout) = (tw.shape[0], tw.shape[1], tw.shape[2], tw.shape[3]);
        if wcin != cin || tb.numel() != cout {
            return Err(Error::Dimension(format!(
                "conv2d: x {:?} vs w {:?} vs b {:?}",
                tx.shape, tw.shape, tb.shape
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Dimension("conv2d: kernel larger than padded input".to_string()));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![F::ZERO; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..kh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ox * stride + kx;
                        if ix < pad || ix - pad >= wd {
                            continue;
                        }
                        let xbase = ((iy - pad) * wd + (ix - pad)) * cin;
                        let wbase = (ky * kw + kx) * cin * cout;
                        let obase = (oy * wo + ox) * cout;
                        for ci in 0..cin {
                            let xv = tx.data[xbase + ci];
                            let wrow = &tw.data[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for co in 0..cout {
                                out[obase + co] = out[obase + co].add(xv.mul(wrow[co]));
                            }
                        }
                    }
                }
                let obase = (oy * wo + ox) * cout;
                for co in 0..cout {
                    out[obase + co] = out[obase + co].add(tb.data[co]);
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![ho, wo, cout],
                data: out,
            },
            vec![x.0, w.0, b.0],
            Box::new(move |p, _, g| {
                let (tx, tw) = (p[0], p[1]);
                let mut dx = vec![F::ZERO; tx.numel()];
                let mut dw = vec![F::ZERO; tw.numel()];
                let mut db = vec![F::ZERO; cout];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let obase = (oy * wo + ox) * cout;
                        for co in 0..cout {
                            db[co] = db[co].add(g[obase + co]);
                        }
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= wd {
                                    continue;
                                }
                                let xbase = ((iy - pad) * wd + (ix - pad)) * cin;
                                let wbase = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let xv = tx.data[xbase + ci];
                                    for co in 0..cout {
                                        let gv = g[obase + co];
                                        dx[xbase + ci] = dx[xbase + ci]
                                            .add(gv.mul(tw.data[wbase + ci * cout + co]));
                                        dw[wbase + ci * cout + co] =
                                            dw[wbase + ci * cout + co].add(gv.mul(xv));
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx, dw, db]
            }),
        ))
    }

    /// Nearest-neighbor 2x spatial upsampling of a `(H, W, C)` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        if t.rank() != 3 {
            return Err(Error::Dimension("upsample2x: expects (H,W,C)".to_string()));
        }
        let (h, w, c) = (t.shape[0], t.shape[1], t.shape[2]);
        let mut out = vec![F::ZERO; 4 * h * w * c];
        for y in 0..2 * h {
            for x_ in 0..2 * w {
                let src = ((y / 2) * w + x_ / 2) * c;
                let dst = (y * 2 * w + x_) * c;
                out[dst..dst + c].copy_from_slice(&t.data[src..src + c]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![2 * h, 2 * w, c],
                data: out,
            },
            vec![x.0],
            Box::new(move |_, _, g| {
                let mut d = vec![F::ZERO; h * w * c];
                for y in 0..2 * h {
                    for x_ in 0..2 * w {
                        let src = ((y / 2) * w + x_ / 2) * c;
                        let dst = (y * 2 * w + x_) * c;
                        for i in 0..c {
                            d[src + i] = d[src + i].add(g[dst + i]);
                        }
                    }
                }
                vec![d]
            }),
        ))
    }

    /// Concatenate two `(H, W, C)` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape[..2] != tb.shape[..2] {
            return Err(Error::Dimension("concat_channels: spatial mismatch".to_string()));
        }
        let (h, w) = (ta.shape[0], ta.shape[1]);
        let (c1, c2) = (ta.shape[2], tb.shape[2]);
        let ct = c1 + c2;
        let mut out = vec![F::ZERO; h * w * ct];
        for p in 0..h * w {
            out[p * ct..p * ct + c1].copy_from_slice(&ta.data[p * c1..(p + 1) * c1]);
            out[p * ct + c1..(p + 1) * ct].copy_from_slice(&tb.data[p * c2..(p + 1) * c2]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![h, w, ct],
                data: out,
            },
            vec![a.0, b.0],
            Box::new(move |_, _, g| {
                let mut da = vec![F::ZERO; h * w * c1];
                let mut db = vec![F::ZERO; h * w * c2];
                for p in 0..h * w {
                    da[p * c1..(p + 1) * c1].copy_from_slice(&g[p * ct..p * ct + c1]);
                    db[p * c2..(p + 1) * c2].copy_from_slice(&g[p * ct + c1..(p + 1) * ct]);
                }
                vec![da, db]
            }),
        ))
    }

    /// Differentiable bilinear sampling of a `(H, W, C)` map at normalized
    /// points `pts: [K, 2]` holding `(u, v)` with `u` along width and `v`
    /// along height. Pixel-center convention: continuous `x = u*W - 0.5`,
    /// `y = v*H - 0.5`; neighbors outside the map contribute zero.
    pub fn bilinear_sample(&mut self, map: Var, pts: Var) -> Result<Var> {
        let tm = &self.values[map.0];
        let tp = &self.values[pts.0];
        if tm.rank() != 3 {
            return Err(Error::Dimension("bilinear_sample: map must be (H,W,C)".to_string()));
        }
        if tp.last_dim() != 2 {
            return Err(Error::Dimension("bilinear_sample: points must be [K,2]".to_string()));
        }
        let (h, w, c) = (tm.shape[0], tm.shape[1], tm.shape[2]);
        let k = tp.leading();
        let hf = h as f64;
        let wf = w as f64;
        let mut out = vec![F::ZERO; k * c];
        for q in 0..k {
            let u = tp.data[q * 2].to_f64();
            let v = tp.data[q * 2 + 1].to_f64();
            let x = u * wf - 0.5;
            let y = v * hf - 0.5;
            let x0 = x.floor() as i64;
            let y0 = y.floor() as i64;
            let fx = x - x0 as f64;
            let fy = y - y0 as f64;
            for (dy, dx_) in [(0i64, 0i64), (0, 1), (1, 0), (1, 1)] {
                let yy = y0 + dy;
                let xx = x0 + dx_;
                if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                    continue;
                }
                let wy = if dy == 0 { 1.0 - fy } else { fy };
                let wx = if dx_ == 0 { 1.0 - fx } else { fx };
                let wgt = F::from_f64(wy * wx);
                let base = (yy as usize * w + xx as usize) * c;
                for ci in 0..c {
                    out[q * c + ci] = out[q * c + ci].add(wgt.mul(tm.data[base + ci]));
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![k, c],
                data: out,
            },
            vec![map.0, pts.0],
            Box::new(move |p, _, g| {
                let (tm, tp) = (p[0], p[1]);
                let mut dmap = vec![F::ZERO; tm.numel()];
                let mut dpts = vec![F::ZERO; tp.numel()];
                for q in 0..k {
                    let u = tp.data[q * 2].to_f64();
                    let v = tp.data[q * 2 + 1].to_f64();
                    let x = u * wf - 0.5;
                    let y = v * hf - 0.5;
                    let x0 = x.floor() as i64;
                    let y0 = y.floor() as i64;
                    let fx = x - x0 as f64;
                    let fy = y - y0 as f64;
                    let mut du = 0.0f64;
                    let mut dv = 0.0f64;
                    for (dy, dx_) in [(0i64, 0i64), (0, 1), (1, 0), (1, 1)] {
                        let yy = y0 + dy;
                        let xx = x0 + dx_;
                        if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                            continue;
                        }
                        let wy = if dy == 0 { 1.0 - fy } else { fy };
                        let wx = if dx_ == 0 { 1.0 - fx } else { fx };
                        // d(wx)/dx and d(wy)/dy have sign depending on corner
                        let sdx = if dx_ == 0 { -1.0 } else { 1.0 };
                        let sdy = if dy == 0 { -1.0 } else { 1.0 };
                        let base = (yy as usize * w + xx as usize) * c;
                        for ci in 0..c {
                            let gv = g[q * c + ci].to_f64();
                            let fv = tm.data[base + ci].to_f64();
                            dmap[base + ci] =
                                dmap[base + ci].add(F::from_f64(gv * wy * wx));
                            du += gv * fv * wy * sdx * wf;
                            dv += gv * fv * wx * sdy * hf;
                        }
                    }
                    dpts[q * 2] = F::from_f64(du);
                    dpts[q * 2 + 1] = F::from_f64(dv);
                }
                vec![dmap, dpts]
            }),
        ))
    }
}
