use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wid::eval::kd_logit_loss_with_grad;
use wid::gradcheck::finite_difference_check;
use wid::ops::*;
use wid::reparam::{penalty_gradient, Orientation};
use wid::{Result, Tensor};

const SHAPES: usize = 24;
const TOL: f64 = 1e-3;
const H: f32 = 1e-2;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn shape2(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..7), rng.random_range(1..7))
}

/// `Σ r ⊙ y` in f64, the scalar every VJP is tested against.
fn dot(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn check(
    name: &str,
    case: usize,
    f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    g: &Tensor,
) {
    let err = finite_difference_check(f, x, g, H).unwrap();
    assert!(err <= TOL, "{name} case {case} shape {:?}: rel err {err:.2e}", x.shape());
}

#[test]
fn matmul_vjp() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..SHAPES {
        let (m, k) = shape2(&mut rng);
        let n = rng.random_range(1..7);
        let a = rand_tensor(&mut rng, &[m, k], 1.0);
        let b = rand_tensor(&mut rng, &[k, n], 1.0);
        let r = rand_tensor(&mut rng, &[m, n], 1.0);
        let (da, db) = matmul_backward(&a, &b, &r).unwrap();
        check("matmul/a", case, |x| Ok(dot(&matmul(x, &b)?, &r)), &a, &da);
        check("matmul/b", case, |x| Ok(dot(&matmul(&a, x)?, &r)), &b, &db);
    }
}

#[test]
fn transposed_products_agree_with_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..SHAPES {
        let (m, k) = shape2(&mut rng);
        let n = rng.random_range(1..7);
        let a = rand_tensor(&mut rng, &[m, k], 1.0);
        let b = rand_tensor(&mut rng, &[n, k], 1.0);
        let c = matmul(&a, &b.transpose().unwrap()).unwrap();
        assert_eq!(matmul_nt(&a, &b).unwrap(), c);
        let at = a.transpose().unwrap();
        assert_eq!(matmul_tn(&at, &b.transpose().unwrap()).unwrap(), c);
    }
}

#[test]
fn row_bias_vjp() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..SHAPES {
        let (m, n) = shape2(&mut rng);
        let x = rand_tensor(&mut rng, &[m, n], 1.0);
        let b = rand_tensor(&mut rng, &[n], 1.0);
        let r = rand_tensor(&mut rng, &[m, n], 1.0);
        let f = |bias: &Tensor| {
            let mut y = x.clone();
            add_row_bias(&mut y, bias)?;
            Ok(dot(&y, &r))
        };
        check("row_bias", case, f, &b, &column_sums(&r).reshape(&[n]).unwrap());
    }
}

#[test]
fn softmax_vjp() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..SHAPES {
        let (m, n) = shape2(&mut rng);
        let x = rand_tensor(&mut rng, &[m, n], 2.0);
        let r = rand_tensor(&mut rng, &[m, n], 1.0);
        let y = softmax_rows(&x).unwrap();
        let dx = softmax_rows_backward(&y, &r).unwrap();
        check("softmax", case, |t| Ok(dot(&softmax_rows(t)?, &r)), &x, &dx);
    }
}

#[test]
fn layer_norm_vjp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..SHAPES {
        let m = rng.random_range(1..6);
        let n = rng.random_range(3..9);
        let x = rand_tensor(&mut rng, &[m, n], 2.0);
        let g = rand_tensor(&mut rng, &[n], 1.5);
        let b = rand_tensor(&mut rng, &[n], 1.0);
        let r = rand_tensor(&mut rng, &[m, n], 1.0);
        let eps = 1e-5;
        let (_, cache) = layer_norm_with_cache(&x, &g, &b, eps).unwrap();
        let (dx, dg, db) = layer_norm_backward(&cache, &g, &r).unwrap();
        check("layer_norm/x", case, |t| Ok(dot(&layer_norm(t, &g, &b, eps)?, &r)), &x, &dx);
        check("layer_norm/gamma", case, |t| Ok(dot(&layer_norm(&x, t, &b, eps)?, &r)), &g, &dg);
        check("layer_norm/beta", case, |t| Ok(dot(&layer_norm(&x, &g, t, eps)?, &r)), &b, &db);
    }
}

#[test]
fn layer_norm_with_excluded_statistics_vjp() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..SHAPES {
        let m = rng.random_range(1..6);
        let n = rng.random_range(4..10);
        let x = rand_tensor(&mut rng, &[m, n], 2.0);
        let g = rand_tensor(&mut rng, &[n], 1.5);
        let b = rand_tensor(&mut rng, &[n], 1.0);
        let r = rand_tensor(&mut rng, &[m, n], 1.0);
        let mut excluded: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        excluded[0] = false;
        excluded[1] = false;
        let eps = 1e-5;
        let f = |t: &Tensor, g: &Tensor, b: &Tensor| -> Result<f64> {
            Ok(dot(&layer_norm_excluding(t, g, b, eps, Some(&excluded))?.0, &r))
        };
        let (_, cache) = layer_norm_excluding(&x, &g, &b, eps, Some(&excluded)).unwrap();
        let (dx, dg, db) = layer_norm_backward(&cache, &g, &r).unwrap();
        check("layer_norm_excluding/x", case, |t| f(t, &g, &b), &x, &dx);
        check("layer_norm_excluding/gamma", case, |t| f(&x, t, &b), &g, &dg);
        check("layer_norm_excluding/beta", case, |t| f(&x, &g, t), &b, &db);
    }
}

#[test]
fn excluded_statistics_match_layer_norm_on_kept_columns() {
    let x = Tensor::from_rows(&[&[1.0, 9.0, -1.0, 40.0], &[3.0, -7.0, 5.0, 0.5]]).unwrap();
    let g = Tensor::vector(vec![1.0, 2.0, 0.5, 3.0]);
    let b = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
    let excluded = [false, true, false, true];
    let (y, _) = layer_norm_excluding(&x, &g, &b, 1e-5, Some(&excluded)).unwrap();
    let kept = Tensor::from_rows(&[&[1.0, -1.0], &[3.0, 5.0]]).unwrap();
    let want = layer_norm(&kept, &Tensor::vector(vec![1.0, 0.5]), &Tensor::vector(vec![0.1, 0.3]), 1e-5).unwrap();
    for i in 0..2 {
        assert_eq!(y.at(i, 0), want.at(i, 0));
        assert_eq!(y.at(i, 2), want.at(i, 1));
    }
    // No exclusions is plain layer norm.
    let (plain, _) = layer_norm_excluding(&x, &g, &b, 1e-5, Some(&[false; 4])).unwrap();
    assert_eq!(plain, layer_norm(&x, &g, &b, 1e-5).unwrap());
    assert!(layer_norm_excluding(&x, &g, &b, 1e-5, Some(&[true; 4])).is_err());
}

#[test]
fn gelu_vjp() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..SHAPES {
        let (m, n) = shape2(&mut rng);
        let x = rand_tensor(&mut rng, &[m, n], 3.0);
        let r = rand_tensor(&mut rng, &[m, n], 1.0);
        let dx = gelu_backward(&x, &r).unwrap();
        check("gelu", case, |t| Ok(dot(&gelu(t), &r)), &x, &dx);
    }
}

#[test]
fn embedding_vjp() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..SHAPES {
        let (vocab, d) = shape2(&mut rng);
        let n = rng.random_range(1..9);
        let table = rand_tensor(&mut rng, &[vocab, d], 1.0);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..vocab as u32)).collect();
        let r = rand_tensor(&mut rng, &[n, d], 1.0);
        let dt = embedding_backward(&ids, &r, vocab).unwrap();
        check("embedding", case, |t| Ok(dot(&embedding_gather(t, &ids)?, &r)), &table, &dt);
    }
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..SHAPES {
        let n = rng.random_range(1..7);
        let v = rng.random_range(2..9);
        let logits = rand_tensor(&mut rng, &[n, v], 3.0);
        let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..v as u32)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        let ce = mlm_cross_entropy(&logits, &targets, &mask).unwrap();
        check(
            "cross_entropy",
            case,
            |t| Ok(mlm_cross_entropy(t, &targets, &mask)?.loss),
            &logits,
            &ce.grad,
        );
    }
}

#[test]
fn kd_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..SHAPES {
        let (n, v) = (rng.random_range(1..6), rng.random_range(2..9));
        let s = rand_tensor(&mut rng, &[n, v], 3.0);
        let t = rand_tensor(&mut rng, &[n, v], 3.0);
        let tau = rng.random_range(0.5..3.0);
        let (_, g) = kd_logit_loss_with_grad(&s, &t, tau).unwrap();
        check("kd", case, |x| Ok(kd_logit_loss_with_grad(x, &t, tau)?.0), &s, &g);
    }
}

fn penalty(w: &Tensor, orientation: Orientation, p: f64) -> Result<f64> {
    let norms = match orientation {
        Orientation::Column => w.column_norms(p)?,
        Orientation::Row => w.row_norms(p)?,
    };
    Ok(norms.iter().sum())
}

#[test]
fn penalty_gradient_vjp() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..SHAPES {
        let (m, n) = shape2(&mut rng);
        // Entries bounded away from zero keep every norm differentiable.
        let mut w = rand_tensor(&mut rng, &[m, n], 1.0);
        for v in w.data_mut() {
            *v += 0.3 * v.signum();
        }
        for orientation in [Orientation::Column, Orientation::Row] {
            for p in [2.0, 3.0] {
                let g = penalty_gradient(&w, orientation, p).unwrap();
                check(&format!("penalty/{orientation:?}/p={p}"), case, |t| penalty(t, orientation, p), &w, &g);
            }
        }
    }
}

#[test]
fn penalty_gradient_is_zero_on_zero_columns() {
    let w = Tensor::from_rows(&[&[0.0, 3.0], &[0.0, 4.0]]).unwrap();
    let g = penalty_gradient(&w, Orientation::Column, 2.0).unwrap();
    assert_eq!(g.data(), &[0.0, 0.6, 0.0, 0.8]);
}
