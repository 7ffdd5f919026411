use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::MethodTag;

/// Training target for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target<'a> {
    Hard(usize),
    /// Cross-entropy against a full label distribution.
    Soft(&'a [f64]),
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Linear softmax classifier with a frozen base and a method-specific
/// trainable part. Matrices are row-major: `w0` is `d x c`, `b` is `d x r`,
/// `a` is `r x c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterModel {
    pub d: usize,
    pub c: usize,
    pub method: MethodTag,
    pub rank: usize,
    /// `alpha / r` for the low-rank update.
    pub scale: f64,
    pub w0: Vec<f64>,
    pub bias: Vec<f64>,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub s: Vec<f64>,
}

impl AdapterModel {
    /// All-zero model in full mode, the starting point for pretraining.
    pub fn base(d: usize, c: usize) -> Self {
        Self {
            d,
            c,
            method: MethodTag::Full,
            rank: 0,
            scale: 0.0,
            w0: vec![0.0; d * c],
            bias: vec![0.0; c],
            b: Vec::new(),
            a: Vec::new(),
            s: Vec::new(),
        }
    }

    /// Copy of `self` adapted with the given method. Low-rank adapters start
    /// with `B = 0` and `A ~ N(0, init_std^2)` so the update is zero at first.
    pub fn with_method(
        &self,
        method: MethodTag,
        rank: usize,
        alpha: f64,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut m = Self {
            method,
            rank: 0,
            scale: 0.0,
            b: Vec::new(),
            a: Vec::new(),
            s: Vec::new(),
            ..self.clone()
        };
        match method {
            MethodTag::Full => {}
            MethodTag::Scaling => m.s = vec![1.0; self.d],
            MethodTag::Lowrank => {
                if rank == 0 {
                    return Err(Error::Config("lowrank adapter needs rank >= 1".into()));
                }
                m.rank = rank;
                m.scale = alpha / rank as f64;
                m.b = vec![0.0; self.d * rank];
                m.a = if init_std > 0.0 {
                    let normal = Normal::new(0.0, init_std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..rank * self.c).map(|_| normal.sample(rng)).collect()
                } else {
                    vec![0.0; rank * self.c]
                };
            }
        }
        Ok(m)
    }

    pub fn num_trainable(&self) -> usize {
        self.c
            + match self.method {
                MethodTag::Full => self.d * self.c,
                MethodTag::Lowrank => self.b.len() + self.a.len(),
                MethodTag::Scaling => self.d,
            }
    }

    /// Trainable parameters flattened as `[bias, method tensors]`.
    pub fn trainable(&self) -> Vec<f64> {
        let mut out = self.bias.clone();
        match self.method {
            MethodTag::Full => out.extend_from_slice(&self.w0),
            MethodTag::Lowrank => {
                out.extend_from_slice(&self.b);
                out.extend_from_slice(&self.a);
            }
            MethodTag::Scaling => out.extend_from_slice(&self.s),
        }
        out
    }

    pub fn set_trainable(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_trainable(), "parameter vector length");
        let (bias, rest) = params.split_at(self.c);
        self.bias.copy_from_slice(bias);
        match self.method {
            MethodTag::Full => self.w0.copy_from_slice(rest),
            MethodTag::Lowrank => {
                let (b, a) = rest.split_at(self.b.len());
                self.b.copy_from_slice(b);
                self.a.copy_from_slice(a);
            }
            MethodTag::Scaling => self.s.copy_from_slice(rest),
        }
    }

    /// Which trainable entries receive weight decay (everything but the bias).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.c];
        mask.resize(self.num_trainable(), true);
        mask
    }

    /// The `d x c` matrix that multiplies the input, adapter included.
    pub fn effective_weights(&self) -> Vec<f64> {
        let (d, c) = (self.d, self.c);
        let mut w = self.w0.clone();
        match self.method {
            MethodTag::Full => {}
            MethodTag::Lowrank => {
                for i in 0..d {
                    for k in 0..self.rank {
                        let bik = self.scale * self.b[i * self.rank + k];
                        if bik == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            w[i * c + j] += bik * self.a[k * c + j];
                        }
                    }
                }
            }
            MethodTag::Scaling => {
                for i in 0..d {
                    for j in 0..c {
                        w[i * c + j] *= self.s[i];
                    }
                }
            }
        }
        w
    }

    /// Logits for `x`. `dropout` scales the adapter input element-wise and is
    /// ignored outside low-rank mode.
    pub fn logits(&self, x: &[f64], dropout: Option<&[f64]>) -> Vec<f64> {
        let (d, c) = (self.d, self.c);
        let mut z = self.bias.clone();
        match (self.method, dropout) {
            (MethodTag::Lowrank, Some(mask)) => {
                for i in 0..d {
                    for j in 0..c {
                        z[j] += x[i] * self.w0[i * c + j];
                    }
                }
                let h = self.adapter_hidden(x, Some(mask));
                for k in 0..self.rank {
                    for j in 0..c {
                        z[j] += self.scale * h[k] * self.a[k * c + j];
                    }
                }
            }
            _ => {
                let w = self.effective_weights();
                for i in 0..d {
                    for j in 0..c {
                        z[j] += x[i] * w[i * c + j];
                    }
                }
            }
        }
        z
    }

    fn adapter_hidden(&self, x: &[f64], dropout: Option<&[f64]>) -> Vec<f64> {
        let mut h = vec![0.0; self.rank];
        for i in 0..self.d {
            let u = x[i] * dropout.map_or(1.0, |m| m[i]);
            for k in 0..self.rank {
                h[k] += u * self.b[i * self.rank + k];
            }
        }
        h
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x, None))
    }

    pub fn predict_distributions<'a>(&self, xs: impl IntoIterator<Item = &'a [f64]>) -> Vec<Vec<f64>> {
        xs.into_iter().map(|x| self.predict(x)).collect()
    }

    /// Weighted cross-entropy `weight * CE(target, softmax(logits))`.
    pub fn loss(&self, x: &[f64], target: Target<'_>, weight: f64) -> Result<f64> {
        let logp = log_softmax(&self.logits(x, None));
        let l = weight * cross_entropy(&logp, target);
        if !l.is_finite() {
            return Err(Error::Domain(format!("non-finite loss {l}")));
        }
        Ok(l)
    }

    /// Loss and its gradient with respect to the trainable vector.
    pub fn loss_and_grad(
        &self,
        x: &[f64],
        target: Target<'_>,
        weight: f64,
        dropout: Option<&[f64]>,
    ) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.num_trainable()];
        let l = self.accumulate_grad(x, target, weight, dropout, 1.0, &mut grad);
        (l, grad)
    }

    /// Adds `factor * dL/dθ` into `grad` and returns the loss.
    pub(crate) fn accumulate_grad(
        &self,
        x: &[f64],
        target: Target<'_>,
        weight: f64,
        dropout: Option<&[f64]>,
        factor: f64,
        grad: &mut [f64],
    ) -> f64 {
        let (d, c) = (self.d, self.c);
        let logp = log_softmax(&self.logits(x, dropout));
        let loss = weight * cross_entropy(&logp, target);
        // dL/dz = weight * (q - t)
        let mut g: Vec<f64> = logp.iter().map(|lp| lp.exp()).collect();
        match target {
            Target::Hard(y) => g[y] -= 1.0,
            Target::Soft(t) => g.iter_mut().zip(t).for_each(|(gj, tj)| *gj -= tj),
        }
        for gj in g.iter_mut() {
            *gj *= weight * factor;
        }
        let (gb, rest) = grad.split_at_mut(c);
        for (acc, gj) in gb.iter_mut().zip(&g) {
            *acc += gj;
        }
        match self.method {
            MethodTag::Full => {
                for i in 0..d {
                    for j in 0..c {
                        rest[i * c + j] += x[i] * g[j];
                    }
                }
            }
            MethodTag::Lowrank => {
                let r = self.rank;
                let h = self.adapter_hidden(x, dropout);
                let (gb_mat, ga_mat) = rest.split_at_mut(d * r);
                // dA[k][j] = scale * h_k * g_j
                for k in 0..r {
                    for j in 0..c {
                        ga_mat[k * c + j] += self.scale * h[k] * g[j];
                    }
                }
                // dB[i][k] = scale * u_i * (A g)_k
                let ag: Vec<f64> = (0..r)
                    .map(|k| (0..c).map(|j| self.a[k * c + j] * g[j]).sum())
                    .collect();
                for i in 0..d {
                    let u = x[i] * dropout.map_or(1.0, |m| m[i]);
                    for k in 0..r {
                        gb_mat[i * r + k] += self.scale * u * ag[k];
                    }
                }
            }
            MethodTag::Scaling => {
                for i in 0..d {
                    let wg: f64 = (0..c).map(|j| self.w0[i * c + j] * g[j]).sum();
                    rest[i] += x[i] * wg;
                }
            }
        }
        loss
    }

    /// L2 norm of one example's loss gradient over all trainable parameters.
    pub fn per_example_gradient_norm(&self, x: &[f64], target: Target<'_>, weight: f64) -> Result<f64> {
        let (l, g) = self.loss_and_grad(x, target, weight, None);
        if !l.is_finite() {
            return Err(Error::Domain(format!("non-finite loss {l}")));
        }
        Ok(norm(&g))
    }

    /// Mean trainable-parameter gradient over a group of examples.
    pub fn group_gradient(&self, group: &[(&[f64], Target<'_>, f64)]) -> Result<Vec<f64>> {
        if group.is_empty() {
            return Err(Error::EmptyInput("gradient group is empty"));
        }
        let mut g = vec![0.0; self.num_trainable()];
        let inv = 1.0 / group.len() as f64;
        for &(x, t, w) in group {
            self.accumulate_grad(x, t, w, None, inv, &mut g);
        }
        Ok(g)
    }

    /// Cosine between the mean gradients of two groups; `None` when either
    /// aggregate has zero norm.
    pub fn group_gradient_cosine(
        &self,
        group_a: &[(&[f64], Target<'_>, f64)],
        group_b: &[(&[f64], Target<'_>, f64)],
    ) -> Result<Option<f64>> {
        let ga = self.group_gradient(group_a)?;
        let gb = self.group_gradient(group_b)?;
        let (na, nb) = (norm(&ga), norm(&gb));
        if na == 0.0 || nb == 0.0 {
            return Ok(None);
        }
        let dot: f64 = ga.iter().zip(&gb).map(|(a, b)| a * b).sum();
        Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0)))
    }
}

fn cross_entropy(logp: &[f64], target: Target<'_>) -> f64 {
    match target {
        Target::Hard(y) => -logp[y],
        Target::Soft(t) => -t
            .iter()
            .zip(logp)
            .filter(|(tj, _)| **tj > 0.0)
            .map(|(tj, lp)| tj * lp)
            .sum::<f64>(),
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_model(rng: &mut impl Rng, method: MethodTag, d: usize, r: usize) -> AdapterModel {
        let c = 3;
        let mut base = AdapterModel::base(d, c);
        base.w0 = (0..d * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        base.bias = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut m = base.with_method(method, r, 2.0 * r as f64, 0.3, rng).unwrap();
        if method == MethodTag::Lowrank {
            m.b = (0..d * r).map(|_| rng.random_range(-0.5..0.5)).collect();
        }
        if method == MethodTag::Scaling {
            m.s = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
        }
        m
    }

    fn finite_difference(m: &AdapterModel, x: &[f64], t: Target<'_>, w: f64, mask: Option<&[f64]>) -> Vec<f64> {
        let h = 1e-5;
        let theta = m.trainable();
        (0..theta.len())
            .map(|k| {
                let mut p = m.clone();
                let mut up = theta.clone();
                up[k] += h;
                p.set_trainable(&up);
                let lp = p.accumulate_grad(x, t, w, mask, 0.0, &mut vec![0.0; theta.len()]);
                let mut down = theta.clone();
                down[k] -= h;
                p.set_trainable(&down);
                let lm = p.accumulate_grad(x, t, w, mask, 0.0, &mut vec![0.0; theta.len()]);
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(7, 99);
        for method in [MethodTag::Lowrank, MethodTag::Full, MethodTag::Scaling] {
            for trial in 0..10 {
                let d = 2 + trial % 7;
                let r = 1 + trial % 2;
                let m = random_model(&mut rng, method, d, r);
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let w = rng.random_range(0.5..2.0);
                let y = rng.random_range(0..3);
                let (_, g) = m.loss_and_grad(&x, Target::Hard(y), w, None);
                assert_close(&g, &finite_difference(&m, &x, Target::Hard(y), w, None));

                let soft = [0.2, 0.5, 0.3];
                let mask: Vec<f64> = (0..d).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 / 0.95 }).collect();
                let (_, g) = m.loss_and_grad(&x, Target::Soft(&soft), w, Some(&mask));
                assert_close(&g, &finite_difference(&m, &x, Target::Soft(&soft), w, Some(&mask)));
            }
        }
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let m = AdapterModel::base(4, 3);
        for q in m.predict(&[1.0, -2.0, 0.5, 3.0]) {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_log_sum_exp() {
        let mut rng = stream(1, 1);
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-30.0..30.0)).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            let q = softmax(&z);
            for (qi, zi) in q.iter().zip(&z) {
                assert!((qi - (zi - lse).exp()).abs() < 1e-12);
            }
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn confidence_grows_with_margin() {
        let mut last = 0.0;
        for margin in [0.0, 1.0, 5.0, 20.0, 60.0] {
            let q = softmax(&[margin, 0.0, 0.0]);
            assert!(q[0] >= last);
            last = q[0];
        }
        assert!(1.0 - last < 1e-15);
    }

    #[test]
    fn gradient_vanishes_at_exact_minimum() {
        let mut m = AdapterModel::base(2, 3);
        m.bias = vec![800.0, 0.0, 0.0];
        let n = m.per_example_gradient_norm(&[0.0, 0.0], Target::Hard(0), 1.0).unwrap();
        assert!(n < 1e-8);
        let n1 = m.per_example_gradient_norm(&[0.3, 0.1], Target::Hard(1), 1.0).unwrap();
        let n2 = m.per_example_gradient_norm(&[0.3, 0.1], Target::Hard(1), 1.0).unwrap();
        assert_eq!(n1, n2);
    }

    #[test]
    fn one_hot_soft_equals_hard() {
        let mut rng = stream(3, 3);
        let m = random_model(&mut rng, MethodTag::Lowrank, 5, 2);
        let x = [0.4, -1.0, 2.0, 0.1, 0.0];
        let onehot = [0.0, 1.0, 0.0];
        let (lh, gh) = m.loss_and_grad(&x, Target::Hard(1), 1.3, None);
        let (ls, gs) = m.loss_and_grad(&x, Target::Soft(&onehot), 1.3, None);
        assert!((lh - ls).abs() < 1e-12);
        for (a, b) in gh.iter().zip(&gs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_identities() {
        let mut rng = stream(5, 5);
        let m = random_model(&mut rng, MethodTag::Full, 4, 1);
        let xa = [0.5, 1.0, -0.2, 0.3];
        let xb = [1.5, -1.0, 0.2, 0.0];
        let ga = [(&xa[..], Target::Hard(0), 1.0), (&xb[..], Target::Hard(2), 1.0)];
        let c = m.group_gradient_cosine(&ga, &ga).unwrap().unwrap();
        assert!((c - 1.0).abs() < 1e-9);

        // zero input and zero weights: the gradient lives only in the bias, and
        // targets on opposite sides of uniform give antiparallel gradients
        let z = AdapterModel::base(4, 3);
        let x0 = [0.0; 4];
        let pa = [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
        let pb = [0.0, 0.5, 0.5];
        let c = z
            .group_gradient_cosine(&[(&x0[..], Target::Soft(&pa), 1.0)], &[(&x0[..], Target::Soft(&pb), 1.0)])
            .unwrap()
            .unwrap();
        assert!((c + 1.0).abs() < 1e-12);

        let uniform = [1.0 / 3.0; 3];
        assert_eq!(
            z.group_gradient_cosine(&[(&x0[..], Target::Soft(&uniform), 1.0)], &ga).unwrap(),
            None
        );
        assert!(z.group_gradient_cosine(&[], &ga).is_err());
    }

    #[test]
    fn group_aggregates_match_finite_differences() {
        let mut rng = stream(11, 2);
        let m = random_model(&mut rng, MethodTag::Lowrank, 4, 2);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let group: Vec<(&[f64], Target<'_>, f64)> =
            xs.iter().enumerate().map(|(i, x)| (&x[..], Target::Hard(i % 3), 1.0)).collect();
        let agg = m.group_gradient(&group).unwrap();
        let mut numeric = vec![0.0; agg.len()];
        for (x, t, w) in &group {
            for (acc, g) in numeric.iter_mut().zip(finite_difference(&m, x, *t, *w, None)) {
                *acc += g / group.len() as f64;
            }
        }
        assert_close(&agg, &numeric);
    }

    proptest! {
        #[test]
        fn rank_nesting(seed in 0u64..500, r in 1usize..4) {
            let mut rng = stream(seed, 0);
            let small = random_model(&mut rng, MethodTag::Lowrank, 6, r);
            // embed: extra B column of zeros, extra A row arbitrary, same alpha/r
            let mut big = small.with_method(MethodTag::Lowrank, r + 1, 2.0 * (r + 1) as f64, 0.5, &mut rng).unwrap();
            prop_assert_eq!(big.scale, small.scale);
            for i in 0..6 {
                for k in 0..r {
                    big.b[i * (r + 1) + k] = small.b[i * r + k];
                }
                big.b[i * (r + 1) + r] = 0.0;
            }
            big.a[..r * 3].copy_from_slice(&small.a);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (ls, lb) = (small.logits(&x, None), big.logits(&x, None));
            for (a, b) in ls.iter().zip(&lb) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn predictions_on_simplex(seed in 0u64..500) {
            let mut rng = stream(seed, 4);
            let m = random_model(&mut rng, MethodTag::Scaling, 5, 1);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            let q = m.predict(&x);
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
