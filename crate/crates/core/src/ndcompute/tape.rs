//! Reverse-mode differentiation over a fixed operation vocabulary.
//!
//! A [`Tape`] records vector-valued nodes as they are computed. Parameters are
//! borrowed from their [`ParamStore`](super::ParamStore) for the lifetime of the
//! tape; [`Tape::backward`] returns owned [`Grads`] keyed by [`ParamRef`], which
//! callers fold into the stores once the tape is dropped.

use std::collections::BTreeMap;

use super::tensor::{ParamRef, ParamStore, ParamTensor};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities inside log terms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<'a> {
    Leaf,
    Linear {
        w: &'a ParamTensor,
        wr: ParamRef,
        br: ParamRef,
        x: Var,
    },
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Softmax(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Mix {
        p: Var,
        index: usize,
        plus: Var,
        minus: Var,
    },
    Splice {
        base: Var,
        mask: Vec<bool>,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
        weight: Option<Vec<f64>>,
    },
    Ce {
        logits: Var,
        y: usize,
        allowed: Option<Vec<bool>>,
    },
    Combine(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Vec<f64>,
    op: Op<'a>,
}

/// Gradients of a scalar with respect to every parameter it touched.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Grads {
    map: BTreeMap<ParamRef, Vec<f64>>,
}

impl Grads {
    pub fn get(&self, r: ParamRef) -> Option<&[f64]> {
        self.map.get(&r).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamRef, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn slot(&mut self, r: ParamRef, len: usize) -> &mut Vec<f64> {
        self.map.entry(r).or_insert_with(|| vec![0.0; len])
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(values, Op::Leaf)
    }

    /// `W x + b` with `W` of shape `[out, in]`.
    pub fn linear(&mut self, store: &'a ParamStore, w: usize, b: usize, x: Var) -> Result<Var> {
        let wt = store.get(w);
        let bt = store.get(b);
        let (out, inp) = match wt.shape.as_slice() {
            [o, i] => (*o, *i),
            s => return Err(Error::shape("linear_forward", &[0, 0], s)),
        };
        let xv = self.value(x);
        if xv.len() != inp || bt.shape != [out] {
            return Err(Error::Shape {
                op: "linear_forward",
                expected: vec![out, inp],
                actual: vec![bt.len(), xv.len()],
            });
        }
        let y = matvec_add(&wt.values, &bt.values, xv, out, inp);
        Ok(self.push(
            y,
            Op::Linear {
                w: wt,
                wr: store.param_ref(w),
                br: store.param_ref(b),
                x,
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&z| sigmoid_scalar(z)).collect();
        self.push(y, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&z| z.max(0.0)).collect();
        self.push(y, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = self
            .value(x)
            .iter()
            .map(|&z| if z > 0.0 { z } else { slope * z })
            .collect();
        self.push(y, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|z| z.tanh()).collect();
        self.push(y, Op::Tanh(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax(self.value(x));
        self.push(y, Op::Softmax(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let y = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.len() {
            return Err(Error::shape("slice", &[start + len], &[xv.len()]));
        }
        let y = xv[start..start + len].to_vec();
        Ok(self.push(y, Op::Slice { x, start }))
    }

    /// `p[index] * plus + (1 - p[index]) * minus`.
    pub fn mix(&mut self, p: Var, index: usize, plus: Var, minus: Var) -> Result<Var> {
        self.same_len("mix", plus, minus)?;
        let pv = *self.value(p).get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.dim(p),
        })?;
        let y = self
            .value(plus)
            .iter()
            .zip(self.value(minus))
            .map(|(a, b)| pv * a + (1.0 - pv) * b)
            .collect();
        Ok(self.push(y, Op::Mix { p, index, plus, minus }))
    }

    /// Replaces entries of `base` with fixed constants wherever `fixed` is `Some`.
    /// No gradient flows into replaced entries.
    pub fn splice(&mut self, base: Var, fixed: &[Option<f64>]) -> Result<Var> {
        let bv = self.value(base);
        if bv.len() != fixed.len() {
            return Err(Error::shape("splice", &[bv.len()], &[fixed.len()]));
        }
        let y = bv.iter().zip(fixed).map(|(b, f)| f.unwrap_or(*b)).collect();
        let mask = fixed.iter().map(Option::is_some).collect();
        Ok(self.push(y, Op::Splice { base, mask }))
    }

    /// Mean (optionally weighted) binary cross-entropy; scalar node.
    pub fn bce(&mut self, p: Var, target: &[f64], weight: Option<&[f64]>) -> Result<Var> {
        let pv = self.value(p);
        let loss = bce_loss(pv, target, weight)?;
        Ok(self.push(
            vec![loss],
            Op::Bce {
                p,
                target: target.to_vec(),
                weight: weight.map(<[f64]>::to_vec),
            },
        ))
    }

    /// `-log softmax(logits)[y]`; scalar node.
    pub fn ce(&mut self, logits: Var, y: usize) -> Result<Var> {
        let loss = ce_loss(self.value(logits), y)?;
        Ok(self.push(
            vec![loss],
            Op::Ce {
                logits,
                y,
                allowed: None,
            },
        ))
    }

    /// Cross-entropy where the softmax runs only over `allowed` entries.
    pub fn masked_ce(&mut self, logits: Var, y: usize, allowed: &[bool]) -> Result<Var> {
        let z = self.value(logits);
        if allowed.len() != z.len() {
            return Err(Error::shape("masked_ce", &[z.len()], &[allowed.len()]));
        }
        if y >= z.len() || !allowed[y] {
            return Err(Error::IndexOutOfRange { index: y, len: z.len() });
        }
        let lse = log_sum_exp(z.iter().zip(allowed).filter(|(_, a)| **a).map(|(v, _)| *v));
        let loss = lse - z[y];
        Ok(self.push(
            vec![loss],
            Op::Ce {
                logits,
                y,
                allowed: Some(allowed.to_vec()),
            },
        ))
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let y: f64 = terms.iter().map(|(v, w)| w * self.scalar(*v)).sum();
        self.push(vec![y], Op::Combine(terms.to_vec()))
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (la, lb) = (self.dim(a), self.dim(b));
        if la != lb {
            return Err(Error::shape(op, &[la], &[lb]));
        }
        Ok(())
    }

    /// Gradients of the scalar node `loss` with respect to all parameters.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads = Grads::default();
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0; self.nodes[loss.0].value.len()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Linear { w, wr, br, x } => {
                    let xv = &self.nodes[x.0].value;
                    let (out, inp) = (w.shape[0], w.shape[1]);
                    {
                        let gw = grads.slot(*wr, out * inp);
                        for (r, d) in dy.iter().enumerate() {
                            if *d == 0.0 {
                                continue;
                            }
                            let row = &mut gw[r * inp..(r + 1) * inp];
                            for (g, xi) in row.iter_mut().zip(xv) {
                                *g += d * xi;
                            }
                        }
                    }
                    {
                        let gb = grads.slot(*br, out);
                        for (g, d) in gb.iter_mut().zip(&dy) {
                            *g += d;
                        }
                    }
                    let gx = accum(&mut adj, *x, inp);
                    for (r, d) in dy.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        let row = &w.values[r * inp..(r + 1) * inp];
                        for (g, wv) in gx.iter_mut().zip(row) {
                            *g += d * wv;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let gx = accum(&mut adj, *x, dy.len());
                    for ((g, d), s) in gx.iter_mut().zip(&dy).zip(&node.value) {
                        *g += d * s * (1.0 - s);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = accum(&mut adj, *x, dy.len());
                    for ((g, d), z) in gx.iter_mut().zip(&dy).zip(xv) {
                        if *z > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = accum(&mut adj, *x, dy.len());
                    for ((g, d), z) in gx.iter_mut().zip(&dy).zip(xv) {
                        *g += if *z > 0.0 { *d } else { slope * d };
                    }
                }
                Op::Tanh(x) => {
                    let gx = accum(&mut adj, *x, dy.len());
                    for ((g, d), t) in gx.iter_mut().zip(&dy).zip(&node.value) {
                        *g += d * (1.0 - t * t);
                    }
                }
                Op::Softmax(x) => {
                    let s = &node.value;
                    let dot: f64 = dy.iter().zip(s).map(|(d, s)| d * s).sum();
                    let gx = accum(&mut adj, *x, dy.len());
                    for ((g, d), si) in gx.iter_mut().zip(&dy).zip(s) {
                        *g += si * (d - dot);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let g = accum(&mut adj, *v, dy.len());
                        for (g, d) in g.iter_mut().zip(&dy) {
                            *g += d;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let ga = accum(&mut adj, *a, dy.len());
                        for ((g, d), o) in ga.iter_mut().zip(&dy).zip(bv) {
                            *g += d * o;
                        }
                    }
                    let gb = accum(&mut adj, *b, dy.len());
                    for ((g, d), o) in gb.iter_mut().zip(&dy).zip(av) {
                        *g += d * o;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        let g = accum(&mut adj, *p, n);
                        for (g, d) in g.iter_mut().zip(&dy[off..off + n]) {
                            *g += d;
                        }
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let n = self.nodes[x.0].value.len();
                    let g = accum(&mut adj, *x, n);
                    for (g, d) in g[*start..*start + dy.len()].iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::Mix { p, index, plus, minus } => {
                    let pv = self.nodes[p.0].value[*index];
                    let plv = &self.nodes[plus.0].value;
                    let miv = &self.nodes[minus.0].value;
                    let dp: f64 = dy.iter().zip(plv.iter().zip(miv)).map(|(d, (a, b))| d * (a - b)).sum();
                    let np = self.nodes[p.0].value.len();
                    accum(&mut adj, *p, np)[*index] += dp;
                    {
                        let g = accum(&mut adj, *plus, dy.len());
                        for (g, d) in g.iter_mut().zip(&dy) {
                            *g += pv * d;
                        }
                    }
                    let g = accum(&mut adj, *minus, dy.len());
                    for (g, d) in g.iter_mut().zip(&dy) {
                        *g += (1.0 - pv) * d;
                    }
                }
                Op::Splice { base, mask } => {
                    let g = accum(&mut adj, *base, dy.len());
                    for ((g, d), m) in g.iter_mut().zip(&dy).zip(mask) {
                        if !m {
                            *g += d;
                        }
                    }
                }
                Op::Bce { p, target, weight } => {
                    let pv = &self.nodes[p.0].value;
                    let k = pv.len() as f64;
                    let d = dy[0];
                    let g = accum(&mut adj, *p, pv.len());
                    for (i, (gi, (pi, ti))) in g.iter_mut().zip(pv.iter().zip(target)).enumerate() {
                        let w = weight.as_ref().map_or(1.0, |w| w[i]);
                        let q = clamp_prob(*pi);
                        *gi += -d * w * (ti / q - (1.0 - ti) / (1.0 - q)) / k;
                    }
                }
                Op::Ce { logits, y, allowed } => {
                    let z = &self.nodes[logits.0].value;
                    let d = dy[0];
                    let probs = match allowed {
                        None => softmax(z),
                        Some(a) => masked_softmax(z, a),
                    };
                    let g = accum(&mut adj, *logits, z.len());
                    for (j, (gj, pj)) in g.iter_mut().zip(&probs).enumerate() {
                        let ind = if j == *y { 1.0 } else { 0.0 };
                        *gj += d * (pj - ind);
                    }
                }
                Op::Combine(terms) => {
                    for (v, w) in terms {
                        accum(&mut adj, *v, 1)[0] += w * dy[0];
                    }
                }
            }
        }
        grads
    }
}

fn accum(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn matvec_add(w: &[f64], b: &[f64], x: &[f64], out: usize, inp: usize) -> Vec<f64> {
    (0..out)
        .map(|r| {
            let row = &w[r * inp..(r + 1) * inp];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[r]
        })
        .collect()
}

pub(crate) fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax over the whole vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn masked_softmax(z: &[f64], allowed: &[bool]) -> Vec<f64> {
    let m = z
        .iter()
        .zip(allowed)
        .filter(|(_, a)| **a)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z
        .iter()
        .zip(allowed)
        .map(|(v, a)| if *a { (v - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Elementwise logistic function, stable for large `|z|`.
pub fn sigmoid(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| sigmoid_scalar(v)).collect()
}

/// Mean over concepts of `-w_i [t_i ln p_i + (1 - t_i) ln(1 - p_i)]`, with
/// probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn bce_loss(p: &[f64], t: &[f64], w: Option<&[f64]>) -> Result<f64> {
    if p.len() != t.len() {
        return Err(Error::shape("bce_loss", &[p.len()], &[t.len()]));
    }
    if let Some(w) = w {
        if w.len() != p.len() {
            return Err(Error::shape("bce_loss weights", &[p.len()], &[w.len()]));
        }
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = p
        .iter()
        .zip(t)
        .enumerate()
        .map(|(i, (pi, ti))| {
            let q = clamp_prob(*pi);
            let wi = w.map_or(1.0, |w| w[i]);
            -wi * (ti * q.ln() + (1.0 - ti) * (1.0 - q).ln())
        })
        .sum();
    Ok(s / p.len() as f64)
}

/// `-log softmax(logits)[y]` via log-sum-exp.
pub fn ce_loss(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: logits.len(),
        });
    }
    Ok(log_sum_exp(logits.iter().copied()) - logits[y])
}

/// The loss value at exactly-correct binary predictions under the clamp.
pub fn bce_floor() -> f64 {
    -(1.0 - PROB_CLAMP).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(&[0.0]), vec![0.5]);
        assert_abs_diff_eq!(sigmoid(&[1e6])[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sigmoid(&[3f64.ln()])[0], 0.75, epsilon = 1e-15);
        let s = sigmoid(&[-700.0, 700.0]);
        assert!(s[0] > 0.0 && s[1] <= 1.0 && s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bce_examples() {
        assert_abs_diff_eq!(bce_loss(&[0.5], &[1.0], None).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0], None).unwrap() <= 1e-6);
        let v = bce_loss(&[0.9, 0.1], &[1.0, 0.0], Some(&[2.0, 0.0])).unwrap();
        assert_abs_diff_eq!(v, -2.0 * 0.9f64.ln() / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.1054, epsilon = 1e-4);
        assert!(bce_loss(&[0.5], &[1.0, 0.0], None).is_err());
    }

    #[test]
    fn ce_examples() {
        assert_abs_diff_eq!(ce_loss(&[0.0, 0.0, 0.0], 1).unwrap(), 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ce_loss(&[10.0, -10.0], 0).unwrap(), 2.06e-9, epsilon = 1e-11);
        let v = ce_loss(&[1.0, 2.0, 3.0], 2).unwrap();
        assert_abs_diff_eq!(v, (1.0 + (-1f64).exp() + (-2f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.4076, epsilon = 1e-4);
        assert!(ce_loss(&[0.0], 1).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let s = softmax(&[1000.0, -3.0, 2.5, 0.0]);
        assert_abs_diff_eq!(s.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn splice_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.2, 0.4, 0.6]);
        let s = tape.splice(x, &[Some(1.0), None, None]).unwrap();
        assert_eq!(tape.value(s), &[1.0, 0.4, 0.6]);
        let l = tape.bce(s, &[1.0, 0.0, 1.0], None).unwrap();
        // no params, so the map stays empty; this checks backward runs on leaves
        assert!(tape.backward(l).is_empty());
    }
}
