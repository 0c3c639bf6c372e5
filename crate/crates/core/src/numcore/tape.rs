//! Reverse-mode differentiation over a fixed operator set.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Ratio(Var, Var),
    StopGradient,
    GatherRows { src: Var, idx: Vec<usize> },
    Mse(Var, Var),
    RowSqNormMean(Var),
    WeightedSum(Vec<(Var, f64)>),
    GroupPairwiseSq { x: Var, groups: Vec<Vec<usize>> },
    SoftCountDot { x: Var, c: Var, weights: Vec<f64>, tau: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    // Whether any parameter is reachable upstream of this node.
    requires_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) | Op::StopGradient => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Relu(a) | Op::Scale(a, _) | Op::RowSqNormMean(a) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mse(a, b) | Op::Ratio(a, b) => vec![*a, *b],
            Op::GatherRows { src, .. } => vec![*src],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::GroupPairwiseSq { x, .. } => vec![*x],
            Op::SoftCountDot { x, c, .. } => vec![*x, *c],
        }
    }
}

/// Records a forward computation for one backward pass.
///
/// A tape built with [`Tape::replaying`] substitutes recorded values for
/// its stop-gradient outputs, in call order. Finite-difference checks use
/// this to evaluate the surrogate function whose true derivative equals
/// the stop-gradient derivative.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    replay: Option<Vec<Tensor>>,
    sg_log: Vec<Tensor>,
}

fn checked(value: Tensor, op: &'static str) -> Result<Tensor> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn replaying(stop_gradient_values: Vec<Tensor>) -> Self {
        Self {
            replay: Some(stop_gradient_values),
            ..Self::default()
        }
    }

    /// Values produced by `stop_gradient` so far, in call order.
    pub fn stop_gradient_log(&self) -> &[Tensor] {
        &self.sg_log
    }

    pub fn into_stop_gradient_log(self) -> Vec<Tensor> {
        self.sg_log
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = matches!(op, Op::Param(_))
            || op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        let value = checked(value, "constant")?;
        Ok(self.push(Op::Constant, value))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Param(id), store.value(id).clone())
    }

    /// `x W + b` with `W` of shape `in x out` and `b` of shape `1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::Shape {
                op: "affine bias",
                left: wv.shape(),
                right: bv.shape(),
            });
        }
        let mut y = xv.matmul(wv).map_err(|e| match e {
            Error::Shape { left, right, .. } => Error::Shape {
                op: "affine",
                left,
                right,
            },
            e => e,
        })?;
        for r in 0..y.rows() {
            for (o, &bias) in y.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        let y = checked(y, "affine")?;
        Ok(self.push(Op::Affine { x, w, b }, y))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(0.0));
        Ok(self.push(Op::Relu(x), y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = checked(self.value(a).add(self.value(b))?, "add")?;
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = checked(self.value(a).sub(self.value(b))?, "sub")?;
        Ok(self.push(Op::Sub(a, b), y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let y = checked(self.value(a).scale(s), "scale")?;
        Ok(self.push(Op::Scale(a, s), y))
    }

    /// `a / b` for scalar nodes.
    pub fn ratio(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != (1, 1) || bv.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "ratio",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let y = checked(Tensor::scalar(av.item() / bv.item()), "ratio")?;
        Ok(self.push(Op::Ratio(a, b), y))
    }

    /// Forward identity; contributes no gradient upstream.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let idx = self.sg_log.len();
        let value = match &self.replay {
            Some(values) => {
                let v = values.get(idx).ok_or_else(|| {
                    Error::Invalid(format!("replay has no stop-gradient value #{idx}"))
                })?;
                self.value(x).same_shape(v, "stop_gradient replay")?;
                v.clone()
            }
            None => self.value(x).clone(),
        };
        self.sg_log.push(value.clone());
        Ok(self.push(Op::StopGradient, value))
    }

    /// Forward value `z_q`, gradient passed to `z_e` unchanged:
    /// `z_e + sg(z_q − z_e)`.
    pub fn straight_through(&mut self, z_e: Var, z_q: Var) -> Result<Var> {
        let diff = self.sub(z_q, z_e)?;
        let frozen = self.stop_gradient(diff)?;
        self.add(z_e, frozen)
    }

    /// Rows `idx` of `src`; gradients scatter-add back into `src`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= s.rows()) {
            return Err(Error::Invalid(format!(
                "gather_rows index {bad} out of range for {} rows",
                s.rows()
            )));
        }
        let y = s.select_rows(idx);
        Ok(self.push(
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            y,
        ))
    }

    /// Mean of squared elementwise differences, as a 1x1 tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = super::tensor::mse(self.value(a), self.value(b))?;
        let y = checked(Tensor::scalar(v), "mse")?;
        Ok(self.push(Op::Mse(a, b), y))
    }

    /// `(1/N) Σ_i ‖a_i‖²` over the `N` rows of `a`.
    pub fn row_sq_norm_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.rows().max(1) as f64;
        let v = t.data().iter().map(|x| x * x).sum::<f64>() / n;
        let y = checked(Tensor::scalar(v), "row_sq_norm_mean")?;
        Ok(self.push(Op::RowSqNormMean(a), y))
    }

    /// `Σ w_i s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != (1, 1) {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    left: (1, 1),
                    right: t.shape(),
                });
            }
            total += w * t.item();
        }
        let y = checked(Tensor::scalar(total), "weighted_sum")?;
        Ok(self.push(Op::WeightedSum(terms.to_vec()), y))
    }

    /// `Σ_g (1/(k(k−1))) Σ_{i≠j ∈ g} ‖x_i − x_j‖²` with `k = |g|`; groups
    /// with fewer than two members contribute zero.
    pub fn group_pairwise_sq(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        let mut total = 0.0;
        for g in &groups {
            if let Some(&bad) = g.iter().find(|&&i| i >= t.rows()) {
                return Err(Error::Invalid(format!("group index {bad} out of range")));
            }
            if g.len() < 2 {
                continue;
            }
            let mean = group_mean(t, g);
            // Σ_{i≠j} ‖x_i − x_j‖² = 2k Σ_i ‖x_i − x̄‖²
            let spread: f64 = g
                .iter()
                .map(|&i| t.row(i).iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
                .sum();
            let k = g.len() as f64;
            total += 2.0 * spread / (k - 1.0);
        }
        let y = checked(Tensor::scalar(total), "group_pairwise_sq")?;
        Ok(self.push(Op::GroupPairwiseSq { x, groups }, y))
    }

    /// `Σ_k w_k Σ_i P_ik` where `P_i = softmax_k(−‖x_i − c_k‖² / τ)`: a
    /// weighted sum of soft assignment counts of the rows of `x` to the rows
    /// of `c`.
    pub fn soft_count_dot(&mut self, x: Var, c: Var, weights: &[f64], tau: f64) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        if weights.len() != cv.rows() {
            return Err(Error::Shape {
                op: "soft_count_dot",
                left: cv.shape(),
                right: (weights.len(), 1),
            });
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Invalid(format!("soft_count_dot temperature {tau}")));
        }
        let p = soft_assign(xv, cv, tau)?;
        let total: f64 = (0..p.rows())
            .map(|i| p.row(i).iter().zip(weights).map(|(a, w)| a * w).sum::<f64>())
            .sum();
        let y = checked(Tensor::scalar(total), "soft_count_dot")?;
        Ok(self.push(
            Op::SoftCountDot {
                x,
                c,
                weights: weights.to_vec(),
                tau,
            },
            y,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(Error::NonScalarRoot(root_value.rows(), root_value.cols()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Constant | Op::Param(_) | Op::StopGradient => {}
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    if self.nodes[x.0].requires_grad {
                        accumulate(&mut grads, *x, g.matmul_t(wv)?)?;
                    }
                    accumulate(&mut grads, *w, xv.t_matmul(&g)?)?;
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Relu(x) => {
                    let gx = self.value(*x).zip_map(&g, "relu backward", |xv, gv| {
                        if xv > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                    accumulate(&mut grads, *a, g.clone())?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::Ratio(a, b) => {
                    let (av, bv) = (self.value(*a).item(), self.value(*b).item());
                    accumulate(&mut grads, *a, Tensor::scalar(g.item() / bv))?;
                    accumulate(&mut grads, *b, Tensor::scalar(-g.item() * av / (bv * bv)))?;
                }
                Op::GatherRows { src, idx } => {
                    let sv = self.value(*src);
                    let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, &v) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *src, gs)?;
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let n = av.len().max(1) as f64;
                    let coeff = 2.0 * g.item() / n;
                    let ga = av.zip_map(bv, "mse backward", |x, y| coeff * (x - y))?;
                    accumulate(&mut grads, *b, ga.scale(-1.0))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::RowSqNormMean(a) => {
                    let av = self.value(*a);
                    let coeff = 2.0 * g.item() / av.rows().max(1) as f64;
                    accumulate(&mut grads, *a, av.scale(coeff))?;
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Tensor::scalar(w * g.item()))?;
                    }
                }
                Op::GroupPairwiseSq { x, groups } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for grp in groups.iter().filter(|grp| grp.len() >= 2) {
                        let mean = group_mean(xv, grp);
                        let coeff = 4.0 * g.item() / (grp.len() as f64 - 1.0);
                        for &i in grp {
                            for ((d, &a), m) in gx.row_mut(i).iter_mut().zip(xv.row(i)).zip(&mean) {
                                *d += coeff * (a - m);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::SoftCountDot { x, c, weights, tau } => {
                    let (xv, cv) = (self.value(*x), self.value(*c));
                    let p = soft_assign(xv, cv, *tau)?;
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    let mut gc = Tensor::zeros(cv.rows(), cv.cols());
                    for i in 0..p.rows() {
                        let pi = p.row(i);
                        let mean_w: f64 = pi.iter().zip(weights).map(|(a, w)| a * w).sum();
                        for k in 0..cv.rows() {
                            // d/d logit_ik, then logit = −d_ik/τ and
                            // ∂d_ik/∂x_i = 2(x_i − c_k).
                            let coeff = g.item() * pi[k] * (weights[k] - mean_w) * (-2.0 / tau);
                            if coeff == 0.0 {
                                continue;
                            }
                            for j in 0..xv.cols() {
                                let diff = xv.get(i, j) - cv.get(k, j);
                                gx.data_mut()[i * xv.cols() + j] += coeff * diff;
                                gc.data_mut()[k * cv.cols() + j] -= coeff * diff;
                            }
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        accumulate(&mut grads, *x, gx)?;
                    }
                    if self.nodes[c.0].requires_grad {
                        accumulate(&mut grads, *c, gc)?;
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let mut params = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[idx]) {
                params.push((*id, g.clone()));
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

/// Row-wise softmax of `−‖x_i − c_k‖² / τ`.
fn soft_assign(x: &Tensor, c: &Tensor, tau: f64) -> Result<Tensor> {
    let mut p = super::tensor::sq_dist_rows(x, c)?;
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (-(*v - min) / tau).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(p)
}

fn group_mean(t: &Tensor, group: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; t.cols()];
    for &i in group {
        for (m, &v) in mean.iter_mut().zip(t.row(i)) {
            *m += v;
        }
    }
    let k = group.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    mean
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a tape node; `None` when no path reaches it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in &self.params {
            store.grad_mut(*id).add_assign(g)?;
        }
        Ok(())
    }
}
