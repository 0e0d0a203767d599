//! Forward operations and their vector-Jacobian products.
//!
//! Every op is a pure function of its inputs. Reductions (dot products,
//! row sums, layer-norm statistics) accumulate in `f64`.

use crate::error::{Error, Result};
use crate::linalg::{gemm_new, View};
use crate::tensor::Tensor;

fn view(t: &Tensor) -> Result<View<'_>> {
    let (r, c) = t.dims2()?;
    Ok(View::dense(t.data(), 0, r, c))
}

/// `a·b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Tensor::new(&[m, n], gemm_new(view(a)?, view(b)?))
}

/// `a·bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    Tensor::new(&[m, n], gemm_new(view(a)?, view(b)?.t()))
}

/// `aᵀ·b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    Tensor::new(&[m, n], gemm_new(view(a)?.t(), view(b)?))
}

/// Gradients of `c = a·b`: `da = dc·bᵀ`, `db = aᵀ·dc`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, _) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if dc.shape() != [m, n] {
        return Err(Error::shape("matmul_backward", dc.shape(), &[m, n]));
    }
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

/// Adds `bias` to every row of `x` in place.
pub fn add_row_bias(x: &mut Tensor, bias: &Tensor) -> Result<()> {
    let c = x.cols();
    if bias.len() != c {
        return Err(Error::shape("add_row_bias", x.shape(), bias.shape()));
    }
    for row in x.data_mut().chunks_exact_mut(c) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(())
}

/// Column sums of a 2-D tensor (the bias gradient of a row-broadcast add).
pub fn column_sums(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut acc = vec![0.0f64; c];
    for row in x.data().chunks_exact(c.max(1)) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    Tensor::vector(acc.into_iter().map(|v| v as f32).collect())
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = ((*v - max) as f64).exp();
        *v = e as f32;
        sum += e;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    let mut out = x.clone();
    if c > 0 {
        for row in out.data_mut().chunks_exact_mut(c) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

/// Softmax over the first `visible` entries of `row`; the rest become exactly 0.
pub(crate) fn softmax_prefix(row: &mut [f32], visible: usize) {
    softmax_in_place(&mut row[..visible]);
    for v in &mut row[visible..] {
        *v = 0.0;
    }
}

/// VJP of a softmax row: `dx = y ⊙ (dy − ⟨y, dy⟩)`.
pub(crate) fn softmax_row_backward(y: &[f32], dy: &[f32], dx: &mut [f32]) {
    let dot: f64 = y.iter().zip(dy).map(|(&a, &b)| a as f64 * b as f64).sum();
    for ((o, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *o = (yi as f64 * (gi as f64 - dot)) as f32;
    }
}

/// VJP of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::shape("softmax_rows_backward", y.shape(), dy.shape()));
    }
    let (_, c) = y.dims2()?;
    let mut dx = Tensor::zeros(y.shape());
    if c > 0 {
        for ((yr, gr), dr) in y
            .data()
            .chunks_exact(c)
            .zip(dy.data().chunks_exact(c))
            .zip(dx.data_mut().chunks_exact_mut(c))
        {
            softmax_row_backward(yr, gr, dr);
        }
    }
    Ok(dx)
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor,
    rstd: Vec<f64>,
    excluded: Option<Vec<bool>>,
}

pub const DEFAULT_LN_EPS: f32 = 1e-12;

/// Per-row normalization to zero mean and unit variance, then `·gamma + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    layer_norm_with_cache(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_cache(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, LayerNormCache)> {
    layer_norm_excluding(x, gamma, beta, eps, None)
}

/// Layer norm whose mean and variance skip the `excluded` columns. Every
/// column is still normalized with those statistics.
pub fn layer_norm_excluding(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
    excluded: Option<&[bool]>,
) -> Result<(Tensor, LayerNormCache)> {
    let (r, c) = x.dims2()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let excluded = excluded.filter(|e| e.iter().any(|&b| b));
    if let Some(e) = excluded {
        if e.len() != c {
            return Err(Error::shape("layer_norm mask", &[e.len()], &[c]));
        }
        if e.iter().all(|&b| b) {
            return Err(Error::Config("layer norm excludes every column".into()));
        }
    }
    let counted = |j: usize| excluded.is_none_or(|e| !e[j]);
    let n = excluded.map_or(c, |e| e.iter().filter(|&&b| !b).count()) as f64;
    let mut y = Tensor::zeros(&[r, c]);
    let mut xhat = Tensor::zeros(&[r, c]);
    let mut rstd = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = (0..c).filter(|&j| counted(j)).map(|j| row[j] as f64).sum::<f64>() / n;
        let var = (0..c)
            .filter(|&j| counted(j))
            .map(|j| {
                let d = row[j] as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let rs = 1.0 / (var + eps as f64).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let h = (row[j] as f64 - mean) * rs;
            xhat.data_mut()[i * c + j] = h as f32;
            y.data_mut()[i * c + j] = (h * gamma.data()[j] as f64 + beta.data()[j] as f64) as f32;
        }
    }
    let cache = LayerNormCache {
        xhat,
        rstd,
        excluded: excluded.map(<[bool]>::to_vec),
    };
    Ok((y, cache))
}

/// Gradients of layer norm: `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if dy.shape() != cache.xhat.shape() {
        return Err(Error::shape("layer_norm_backward", dy.shape(), cache.xhat.shape()));
    }
    let (r, c) = dy.dims2()?;
    let excluded = cache.excluded.as_deref();
    let n = excluded.map_or(c, |e| e.iter().filter(|&&b| !b).count()) as f64;
    let mut dx = Tensor::zeros(&[r, c]);
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let g = gamma.data();
    for i in 0..r {
        let xh = cache.xhat.row(i);
        let gy = dy.row(i);
        let mut sum_d = 0.0f64;
        let mut sum_dx = 0.0f64;
        for j in 0..c {
            let d = gy[j] as f64 * g[j] as f64;
            sum_d += d;
            sum_dx += d * xh[j] as f64;
            dgamma[j] += gy[j] as f64 * xh[j] as f64;
            dbeta[j] += gy[j] as f64;
        }
        let rs = cache.rstd[i];
        let out = &mut dx.data_mut()[i * c..(i + 1) * c];
        for j in 0..c {
            let d = gy[j] as f64 * g[j] as f64;
            // Only counted columns move the statistics.
            let stat = if excluded.is_some_and(|e| e[j]) {
                0.0
            } else {
                (sum_d + xh[j] as f64 * sum_dx) / n
            };
            out[j] = (rs * (d - stat)) as f32;
        }
    }
    let narrow = |v: Vec<f64>| Tensor::vector(v.into_iter().map(|x| x as f32).collect());
    Ok((dx, narrow(dgamma), narrow(dbeta)))
}

// tanh-approximation constants: sqrt(2/pi) and the cubic coefficient.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

// libm tanh is several times slower than exp; accuracy is far below f32 epsilon.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        return u;
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Gaussian-error linear unit, tanh approximation:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v as f64) as f32).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// VJP of [`gelu`] evaluated at the pre-activation `x`.
pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("gelu_backward", x.shape(), dy.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| (gelu_grad_scalar(v as f64) * g as f64) as f32)
        .collect();
    Tensor::new(x.shape(), data)
}

/// Row lookup: output row `i` is `table[ids[i]]`.
pub fn embedding_gather(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let (v, d) = table.dims2()?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        if id >= v {
            return Err(Error::Index { index: id, bound: v });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(&[ids.len(), d], out)
}

/// VJP of [`embedding_gather`]: scatter-adds `dy` rows into a `vocab × d` table.
pub fn embedding_backward(ids: &[u32], dy: &Tensor, vocab: usize) -> Result<Tensor> {
    let (n, d) = dy.dims2()?;
    if n != ids.len() {
        return Err(Error::shape("embedding_backward", dy.shape(), &[ids.len(), d]));
    }
    let mut acc = vec![0.0f64; vocab * d];
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= vocab {
            return Err(Error::Index { index: id, bound: vocab });
        }
        for (a, &g) in acc[id * d..(id + 1) * d].iter_mut().zip(dy.row(i)) {
            *a += g as f64;
        }
    }
    Tensor::new(&[vocab, d], acc.into_iter().map(|v| v as f32).collect())
}

/// Mean cross-entropy over the selected rows and its gradient.
#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Number of rows that contributed.
    pub count: usize,
    /// Gradient of `loss` w.r.t. the logits: `(softmax − onehot)/count` on
    /// selected rows, zero elsewhere.
    pub grad: Tensor,
    /// Number of selected rows whose argmax equals the target.
    pub correct: usize,
}

/// Cross-entropy averaged over the rows where `mask` is true.
pub fn mlm_cross_entropy(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<CrossEntropy> {
    let (n, v) = logits.dims2()?;
    if targets.len() != n || mask.len() != n {
        return Err(Error::shape("mlm_cross_entropy", logits.shape(), &[targets.len(), mask.len()]));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidBatch("loss mask selects no positions".into()));
    }
    let mut grad = Tensor::zeros(&[n, v]);
    let mut total = 0.0f64;
    let mut correct = 0;
    let inv = 1.0 / count as f64;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let t = targets[i] as usize;
        if t >= v {
            return Err(Error::Index { index: t, bound: v });
        }
        let row = logits.row(i);
        let (mut arg, mut max) = (0, f32::NEG_INFINITY);
        for (j, &x) in row.iter().enumerate() {
            if x > max {
                max = x;
                arg = j;
            }
        }
        if arg == t {
            correct += 1;
        }
        let sum: f64 = row.iter().map(|&x| ((x - max) as f64).exp()).sum();
        let lse = max as f64 + sum.ln();
        total += lse - row[t] as f64;
        let g = &mut grad.data_mut()[i * v..(i + 1) * v];
        for (j, (o, &x)) in g.iter_mut().zip(row).enumerate() {
            let p = (x as f64 - lse).exp();
            let onehot = if j == t { 1.0 } else { 0.0 };
            *o = ((p - onehot) * inv) as f32;
        }
    }
    Ok(CrossEntropy {
        loss: total * inv,
        count,
        grad,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i2 = Tensor::identity(2);
        let m = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&i2, &m).unwrap(), m);
        let c = matmul(&t(&[&[1.0, 2.0]]), &t(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let s = softmax_rows(&t(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[&[1000.0, 0.0]])).unwrap();
        assert!(s.is_finite());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-30);
    }

    #[test]
    fn layer_norm_constant_and_shifted_rows() {
        let ones = Tensor::vector(vec![1.0; 3]);
        let zeros = Tensor::vector(vec![0.0; 3]);
        let y = layer_norm(&t(&[&[1.0, 1.0, 1.0]]), &ones, &zeros, DEFAULT_LN_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        // mean 0, variance 1 ⇒ xhat = x; shifted by beta = 5.
        let y = layer_norm(
            &t(&[&[1.0, -1.0]]),
            &Tensor::vector(vec![1.0, 1.0]),
            &Tensor::vector(vec![5.0, 5.0]),
            DEFAULT_LN_EPS,
        )
        .unwrap();
        assert!((y.data()[0] - 6.0).abs() < 1e-6);
        assert!((y.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_fixed_points_and_asymptotes() {
        let y = gelu(&Tensor::vector(vec![0.0, 20.0, -20.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 20.0).abs() < 1e-5);
        assert!(y.data()[2].abs() < 1e-5);
    }

    #[test]
    fn gather_rows_and_empty() {
        let table = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let g = embedding_gather(&table, &[1, 0, 1]).unwrap();
        assert_eq!(g.data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let e = embedding_gather(&table, &[]).unwrap();
        assert_eq!(e.shape(), &[0, 2]);
        match embedding_gather(&table, &[2]) {
            Err(Error::Index { index: 2, bound: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gather_backward_counts_rows() {
        let ids = [1u32, 0, 1, 1];
        let dy = Tensor::full(&[4, 3], 1.0);
        let g = embedding_backward(&ids, &dy, 3).unwrap();
        assert_eq!(g.row(0), &[1.0, 1.0, 1.0]);
        assert_eq!(g.row(1), &[3.0, 3.0, 3.0]);
        assert_eq!(g.row(2), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let ce = mlm_cross_entropy(&Tensor::zeros(&[1, 4]), &[2], &[true]).unwrap();
        assert!((ce.loss - 4f64.ln()).abs() < 1e-9);
        let ce = mlm_cross_entropy(&t(&[&[0.0, 100.0, 0.0]]), &[1], &[true]).unwrap();
        assert!(ce.loss < 1e-30);
        assert!(matches!(
            mlm_cross_entropy(&Tensor::zeros(&[2, 4]), &[0, 0], &[false, false]),
            Err(Error::InvalidBatch(_))
        ));
    }

    #[test]
    fn cross_entropy_grad_zero_on_unmasked_rows() {
        let logits = t(&[&[0.3, -0.2], &[1.0, 2.0]]);
        let ce = mlm_cross_entropy(&logits, &[0, 1], &[false, true]).unwrap();
        assert_eq!(ce.grad.row(0), &[0.0, 0.0]);
        let s: f32 = ce.grad.row(1).iter().sum();
        assert!(s.abs() < 1e-7);
    }
}
