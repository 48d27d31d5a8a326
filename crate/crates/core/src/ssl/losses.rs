//! Siamese losses with analytic gradients.
//!
//! Each loss returns its value and the gradient with respect to both of its
//! embedding arguments. Whether the second gradient is used (stop-gradient)
//! is the caller's decision.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2, Axis};

use super::SslError;
use crate::nn::{l2_normalize_backward, l2_normalize_rows};

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<(), SslError> {
    if a.dim() != b.dim() {
        return Err(SslError::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(SslError::Shape("empty batch".into()));
    }
    Ok(())
}

fn normalize_nonzero(x: &ArrayView2<f64>) -> Result<(Array2<f64>, ndarray::Array1<f64>), SslError> {
    let (y, norms, zeros) = l2_normalize_rows(&x.to_owned());
    if let Some(&row) = zeros.first() {
        return Err(SslError::ZeroNormRow(row));
    }
    Ok((y, norms))
}

/// `mean_i (2 - 2 cos(p_i, z_i))`.
pub fn neg_cosine_loss(p: &ArrayView2<f64>, z: &ArrayView2<f64>) -> Result<LossOutput, SslError> {
    check_pair(p, z)?;
    let (pn, p_norm) = normalize_nonzero(p)?;
    let (zn, z_norm) = normalize_nonzero(z)?;
    let b = p.nrows() as f64;
    let cos = (&pn * &zn).sum_axis(Axis(1));
    let loss = cos.iter().map(|c| 2.0 - 2.0 * c).sum::<f64>() / b;

    // d(-2/B cos)/d p_n = -2/B z_n, then through the normalization.
    let dpn = zn.mapv(|v| -2.0 * v / b);
    let dzn = pn.mapv(|v| -2.0 * v / b);
    let grad_a = l2_normalize_backward(&p.to_owned(), &p_norm, &dpn.view());
    let grad_b = l2_normalize_backward(&z.to_owned(), &z_norm, &dzn.view());
    Ok(LossOutput { loss, grad_a, grad_b })
}

/// Numerically stable `log(sum(exp(x)))` over the entries where `mask` holds.
fn log_sum_exp<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalized-temperature cross entropy over the `2B` views. View `i` and
/// view `i + B` are positives; every other view in the batch is a negative.
pub fn nt_xent_loss(
    z1: &ArrayView2<f64>,
    z2: &ArrayView2<f64>,
    temperature: f64,
) -> Result<LossOutput, SslError> {
    check_pair(z1, z2)?;
    if z1.nrows() < 2 {
        return Err(SslError::BatchTooSmall { need: 2, got: z1.nrows() });
    }
    if !(temperature > 0.0) {
        return Err(SslError::Temperature(temperature));
    }
    let b = z1.nrows();
    let n = 2 * b;
    let (u1, n1) = normalize_nonzero(z1)?;
    let (u2, n2) = normalize_nonzero(z2)?;
    let u = ndarray::concatenate(Axis(0), &[u1.view(), u2.view()]).unwrap();
    let sim = u.dot(&u.t()) / temperature;

    let mut loss = 0.0;
    // coefficient matrix c_ik = dL/ds_ik
    let mut coef = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let pos = (i + b) % n;
        let row = sim.row(i);
        let others: Vec<f64> = (0..n).filter(|&k| k != i).map(|k| row[k]).collect();
        let lse = log_sum_exp(others.iter());
        loss += lse - row[pos];
        for k in (0..n).filter(|&k| k != i) {
            coef[(i, k)] = (row[k] - lse).exp() / n as f64;
        }
        coef[(i, pos)] -= 1.0 / n as f64;
    }
    loss /= n as f64;

    // s_ik = u_i . u_k / t; both endpoints receive gradient.
    let du = (coef.dot(&u) + coef.t().dot(&u)) / temperature;
    let du1 = du.slice(ndarray::s![..b, ..]);
    let du2 = du.slice(ndarray::s![b.., ..]);
    Ok(LossOutput {
        loss,
        grad_a: l2_normalize_backward(&z1.to_owned(), &n1, &du1),
        grad_b: l2_normalize_backward(&z2.to_owned(), &n2, &du2),
    })
}

/// Fixed-capacity FIFO of (unit-norm) key embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<f64>>,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, rows: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends rows in order, evicting the oldest beyond capacity.
    pub fn enqueue(&mut self, keys: &ArrayView2<f64>) {
        debug_assert_eq!(keys.ncols(), self.dim);
        for row in keys.rows() {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(row.to_vec());
        }
    }

    /// Oldest row first.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows.len(), self.dim), |(i, j)| self.rows[i][j])
    }
}

/// Cross entropy with logits `[q_i.k_i, q_i.queue_j] / t`, the positive in
/// column 0. `q` and `k_pos` are L2-normalized inside; queue rows are used
/// as stored.
pub fn info_nce_queue_loss(
    q: &ArrayView2<f64>,
    k_pos: &ArrayView2<f64>,
    queue: &ArrayView2<f64>,
    temperature: f64,
) -> Result<LossOutput, SslError> {
    check_pair(q, k_pos)?;
    if queue.nrows() == 0 {
        return Err(SslError::EmptyQueue);
    }
    if queue.ncols() != q.ncols() {
        return Err(SslError::Shape(format!(
            "queue width {} vs embedding width {}",
            queue.ncols(),
            q.ncols()
        )));
    }
    if !(temperature > 0.0) {
        return Err(SslError::Temperature(temperature));
    }
    let b = q.nrows();
    let (qn, q_norm) = normalize_nonzero(q)?;
    let (kn, k_norm) = normalize_nonzero(k_pos)?;
    let neg = qn.dot(&queue.t()) / temperature;

    let mut loss = 0.0;
    let mut dqn = Array2::<f64>::zeros(qn.raw_dim());
    let mut dkn = Array2::<f64>::zeros(kn.raw_dim());
    for i in 0..b {
        let pos = qn.row(i).dot(&kn.row(i)) / temperature;
        let logits: Vec<f64> = std::iter::once(pos).chain(neg.row(i).iter().copied()).collect();
        let lse = log_sum_exp(logits.iter());
        loss += lse - pos;
        let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        let scale = 1.0 / (b as f64 * temperature);
        // positive logit
        let gpos = (probs[0] - 1.0) * scale;
        dqn.row_mut(i).scaled_add(gpos, &kn.row(i));
        dkn.row_mut(i).scaled_add(gpos, &qn.row(i));
        for (j, key) in queue.rows().into_iter().enumerate() {
            dqn.row_mut(i).scaled_add(probs[j + 1] * scale, &key);
        }
    }
    loss /= b as f64;
    Ok(LossOutput {
        loss,
        grad_a: l2_normalize_backward(&q.to_owned(), &q_norm, &dqn.view()),
        grad_b: l2_normalize_backward(&k_pos.to_owned(), &k_norm, &dkn.view()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn neg_cosine_fixed_points() {
        let p = array![[1.0, 2.0], [-3.0, 0.5]];
        assert!(neg_cosine_loss(&p.view(), &p.view()).unwrap().loss.abs() < 1e-15);
        let z = array![[-2.0, 1.0], [0.5, 3.0]];
        assert!((neg_cosine_loss(&p.view(), &z.view()).unwrap().loss - 2.0).abs() < 1e-15);
    }

    #[test]
    fn neg_cosine_matches_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_mat(&mut rng, 5, 4);
        let z = rand_mat(&mut rng, 5, 4);
        let mut want = 0.0;
        for i in 0..5 {
            let (pr, zr) = (p.row(i).to_vec(), z.row(i).to_vec());
            want += 2.0 - 2.0 * dot(&pr, &zr) / (dot(&pr, &pr).sqrt() * dot(&zr, &zr).sqrt());
        }
        want /= 5.0;
        let got = neg_cosine_loss(&p.view(), &z.view()).unwrap().loss;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn neg_cosine_rejects_zero_rows() {
        let p = array![[0.0, 0.0]];
        let z = array![[1.0, 0.0]];
        assert_eq!(neg_cosine_loss(&p.view(), &z.view()).unwrap_err(), SslError::ZeroNormRow(0));
    }

    #[test]
    fn nt_xent_two_sample_closed_form() {
        let t = 0.5;
        let z1 = array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let z2 = z1.clone();
        let e = (1.0f64 / t).exp();
        let want = -(e / (e + 2.0)).ln();
        let got = nt_xent_loss(&z1.view(), &z2.view(), t).unwrap().loss;
        assert!((got - want).abs() < 1e-12);
    }

    /// Enumerates every ordered pair of the 2B views.
    fn nt_xent_oracle(z1: &Array2<f64>, z2: &Array2<f64>, t: f64) -> f64 {
        let b = z1.nrows();
        let views: Vec<Vec<f64>> = z1
            .rows()
            .into_iter()
            .chain(z2.rows())
            .map(|r| unit(&r.to_vec()))
            .collect();
        let n = 2 * b;
        let mut total = 0.0;
        for i in 0..n {
            let pos = if i < b { i + b } else { i - b };
            let mut denom = 0.0;
            for k in 0..n {
                if k != i {
                    denom += (dot(&views[i], &views[k]) / t).exp();
                }
            }
            total += -((dot(&views[i], &views[pos]) / t).exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn nt_xent_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z1 = rand_mat(&mut rng, 4, 5);
        let z2 = rand_mat(&mut rng, 4, 5);
        let got = nt_xent_loss(&z1.view(), &z2.view(), 0.3).unwrap().loss;
        assert!((got - nt_xent_oracle(&z1, &z2, 0.3)).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z1 = rand_mat(&mut rng, 3, 4);
        let z2 = rand_mat(&mut rng, 3, 4);
        let a = nt_xent_loss(&z1.view(), &z2.view(), 0.5).unwrap().loss;
        let b = nt_xent_loss(&(&z1 * 7.5).view(), &(&z2 * 7.5).view(), 0.5).unwrap().loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_errors() {
        let z = array![[1.0, 0.0]];
        assert!(matches!(nt_xent_loss(&z.view(), &z.view(), 0.5), Err(SslError::BatchTooSmall { .. })));
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(nt_xent_loss(&z.view(), &z.view(), 0.0), Err(SslError::Temperature(_))));
    }

    #[test]
    fn info_nce_orthogonal_queue_closed_form() {
        let t = 0.07;
        let q = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let queue = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]];
        let e = (1.0f64 / t).exp();
        let want = -(e / (e + 3.0)).ln();
        let got = info_nce_queue_loss(&q.view(), &q.view(), &queue.view(), t).unwrap().loss;
        assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn info_nce_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_mat(&mut rng, 3, 4);
        let k = rand_mat(&mut rng, 3, 4);
        let queue_raw = rand_mat(&mut rng, 6, 4);
        let queue = Array2::from_shape_fn((6, 4), |(i, j)| unit(&queue_raw.row(i).to_vec())[j]);
        let t = 0.2;
        let mut want = 0.0;
        for i in 0..3 {
            let qi = unit(&q.row(i).to_vec());
            let ki = unit(&k.row(i).to_vec());
            let mut logits = vec![dot(&qi, &ki) / t];
            for j in 0..6 {
                logits.push(dot(&qi, &queue.row(j).to_vec()) / t);
            }
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            want += -(logits[0].exp() / denom).ln();
        }
        want /= 3.0;
        let got = info_nce_queue_loss(&q.view(), &k.view(), &queue.view(), t).unwrap().loss;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn info_nce_requires_queue() {
        let q = array![[1.0, 0.0]];
        let empty = Array2::<f64>::zeros((0, 2));
        assert_eq!(
            info_nce_queue_loss(&q.view(), &q.view(), &empty.view(), 0.1).unwrap_err(),
            SslError::EmptyQueue
        );
    }

    #[test]
    fn queue_is_fifo_with_fixed_capacity() {
        let mut q = EmbeddingQueue::new(3, 1);
        q.enqueue(&array![[1.0], [2.0], [3.0]].view());
        q.enqueue(&array![[4.0], [5.0]].view());
        assert_eq!(q.len(), 3);
        assert_eq!(q.to_matrix(), array![[3.0], [4.0], [5.0]]);
        q.enqueue(&array![[6.0], [7.0], [8.0], [9.0]].view());
        assert_eq!(q.to_matrix(), array![[7.0], [8.0], [9.0]]);
    }

    fn fd_check(f: impl Fn(&Array2<f64>, &Array2<f64>) -> f64, a: &Array2<f64>, b: &Array2<f64>, out: &LossOutput) {
        let h = 1e-5;
        for (which, base, grad) in [(0, a, &out.grad_a), (1, b, &out.grad_b)] {
            for idx in ndarray::indices(base.dim()) {
                let mut plus = base.clone();
                plus[idx] += h;
                let mut minus = base.clone();
                minus[idx] -= h;
                let (lp, lm) = if which == 0 { (f(&plus, b), f(&minus, b)) } else { (f(a, &plus), f(a, &minus)) };
                let fd = (lp - lm) / (2.0 * h);
                let an = grad[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "arg {which} {idx:?}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 4, 3);
        let out = neg_cosine_loss(&a.view(), &b.view()).unwrap();
        fd_check(|x, y| neg_cosine_loss(&x.view(), &y.view()).unwrap().loss, &a, &b, &out);

        let out = nt_xent_loss(&a.view(), &b.view(), 0.5).unwrap();
        fd_check(|x, y| nt_xent_loss(&x.view(), &y.view(), 0.5).unwrap().loss, &a, &b, &out);

        let queue_raw = rand_mat(&mut rng, 5, 3);
        let (queue, _, _) = l2_normalize_rows(&queue_raw);
        let out = info_nce_queue_loss(&a.view(), &b.view(), &queue.view(), 0.2).unwrap();
        fd_check(
            |x, y| info_nce_queue_loss(&x.view(), &y.view(), &queue.view(), 0.2).unwrap().loss,
            &a,
            &b,
            &out,
        );
    }
}
