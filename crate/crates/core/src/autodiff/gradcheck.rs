//! Central finite-difference checks for every primitive.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;

enum Init {
    Normal,
    Positive,
    /// `[n, d, d]` symmetric positive definite blocks.
    Spd,
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], init: &Init) -> Tensor {
    match init {
        Init::Normal => Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5)),
        Init::Positive => Tensor::from_fn(shape, |_| rng.gen_range(0.3..2.0)),
        Init::Spd => {
            let (n, d) = (shape[0], shape[1]);
            let mut data = Vec::with_capacity(n * d * d);
            for _ in 0..n {
                let b = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
                let a = &b * b.transpose() + DMatrix::identity(d, d) * 0.5;
                data.extend_from_slice(a.as_slice());
            }
            Tensor::new(shape.to_vec(), data).unwrap()
        }
    }
}

/// Builds `Σ out ∘ w` for fixed random `w` and compares analytic gradients
/// of every input with central differences.
fn check<F>(name: &str, inputs: &[(&[usize], Init)], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<Tensor> = inputs.iter().map(|(s, init)| sample(&mut rng, s, init)).collect();

        let eval = |vals: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor, Option<Vec<Tensor>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            let out_value = tape.value(out).clone();
            let Some(w) = weights else {
                return (0.0, out_value, None);
            };
            let wv = tape.constant(w.clone());
            let prod = tape.mul(out, wv).unwrap();
            let loss = tape.sum(prod).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g = vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect();
            (tape.value(loss).item(), out_value, Some(g))
        };

        let (_, out, _) = eval(&values, None);
        let weights = Tensor::from_fn(out.shape(), |_| rng.gen_range(-1.0..1.0));
        let (_, _, analytic) = eval(&values, Some(&weights));
        let analytic = analytic.unwrap();

        for (i, value) in values.iter().enumerate() {
            for j in 0..value.numel() {
                let mut plus = values.clone();
                plus[i].data_mut()[j] += H;
                let mut minus = values.clone();
                minus[i].data_mut()[j] -= H;
                let fp = eval(&plus, Some(&weights)).0;
                let fm = eval(&minus, Some(&weights)).0;
                let numeric = (fp - fm) / (2.0 * H);
                let a = analytic[i].data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    err < TOL,
                    "{name}: seed {seed}, input {i}, entry {j}: analytic {a}, numeric {numeric}"
                );
            }
        }
    }
}

fn topology() -> Arc<EdgeTopology> {
    // 5 nodes, a triangle plus a pendant path; node 4 has degree 1
    Arc::new(EdgeTopology::new(5, &[(0, 1), (1, 2), (2, 0), (2, 3), (3, 4)]))
}

#[test]
fn matmul() {
    check("matmul", &[(&[3, 4], Init::Normal), (&[4, 2], Init::Normal)], |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn add_sub_mul() {
    let shapes = [(&[2, 3][..], Init::Normal), (&[2, 3][..], Init::Normal)];
    check("add", &shapes, |t, v| t.add(v[0], v[1]).unwrap());
    check("sub", &shapes, |t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", &shapes, |t, v| t.mul(v[0], v[1]).unwrap());
}

#[test]
fn scale_sum_mean() {
    check("scale", &[(&[3, 2], Init::Normal)], |t, v| t.scale(v[0], -2.5).unwrap());
    check("sum", &[(&[3, 2], Init::Normal)], |t, v| t.sum(v[0]).unwrap());
    check("mean", &[(&[3, 2], Init::Normal)], |t, v| t.mean(v[0]).unwrap());
}

#[test]
fn pointwise() {
    check("square", &[(&[4, 3], Init::Normal)], |t, v| t.square(v[0]).unwrap());
    check("sqrt", &[(&[4, 3], Init::Positive)], |t, v| t.sqrt(v[0]).unwrap());
    check("log", &[(&[4, 3], Init::Positive)], |t, v| t.log(v[0]).unwrap());
    check("sigmoid", &[(&[4, 3], Init::Normal)], |t, v| t.sigmoid(v[0]).unwrap());
    check("softplus", &[(&[4, 3], Init::Normal)], |t, v| t.softplus(v[0]).unwrap());
}

#[test]
fn activations() {
    for act in [Activation::Elu, Activation::Relu, Activation::Tanh, Activation::Identity] {
        check(act.name(), &[(&[5, 3], Init::Normal)], |t, v| t.activation(v[0], act).unwrap());
    }
}

#[test]
fn concat_reshape() {
    check("concat rows", &[(&[2, 3], Init::Normal), (&[1, 3], Init::Normal)], |t, v| {
        t.concat(v[0], v[1], 0).unwrap()
    });
    check("concat cols", &[(&[2, 3], Init::Normal), (&[2, 1], Init::Normal)], |t, v| {
        t.concat(v[0], v[1], 1).unwrap()
    });
    check("reshape", &[(&[2, 6], Init::Normal)], |t, v| {
        let r = t.reshape(v[0], vec![4, 3]).unwrap();
        t.square(r).unwrap()
    });
}

#[test]
fn gather_scatter_rowsum() {
    let index: Arc<[usize]> = Arc::from(vec![2, 0, 2, 3]);
    check("gather", &[(&[4, 3], Init::Normal)], |t, v| t.gather_rows(v[0], index.clone()).unwrap());
    check("scatter", &[(&[4, 3], Init::Normal)], |t, v| t.scatter_rows(v[0], index.clone(), 5).unwrap());
    check("row-sum", &[(&[4, 3], Init::Normal)], |t, v| t.row_sum(v[0]).unwrap());
}

#[test]
fn degree_blocks() {
    let topo = topology();
    for (de, dn) in [(2, 2), (1, 3), (3, 1)] {
        let shape = [topo.n_edges(), de * dn];
        check("degree-blocks", &[(&shape, Init::Normal), (&shape, Init::Normal)], |t, v| {
            t.degree_blocks(v[0], v[1], topo.clone(), de, dn).unwrap()
        });
    }
}

#[test]
fn block_inv_sqrt() {
    check("block-inv-sqrt", &[(&[3, 3, 3], Init::Spd)], |t, v| t.block_inv_sqrt(v[0], 1e-6).unwrap());
    check("block-inv-sqrt 1x1", &[(&[4, 1, 1], Init::Spd)], |t, v| t.block_inv_sqrt(v[0], 0.0).unwrap());
}

#[test]
fn block_diag_and_kron() {
    check("block-diag-apply", &[(&[3, 2, 2], Init::Normal), (&[6, 3], Init::Normal)], |t, v| {
        t.block_diag_apply(v[0], v[1]).unwrap()
    });
    check("kron-apply", &[(&[2, 2], Init::Normal), (&[8, 3], Init::Normal)], |t, v| t.kron_apply(v[0], v[1]).unwrap());
}

#[test]
fn coboundary_and_transpose() {
    let topo = topology();
    for (de, dn, f) in [(2, 2, 1), (1, 3, 2), (3, 1, 2)] {
        let maps = [topo.n_edges(), de * dn];
        let x = [topo.n_nodes() * dn, f];
        let r = [topo.n_edges() * de, f];
        check(
            "coboundary",
            &[(&maps, Init::Normal), (&maps, Init::Normal), (&x, Init::Normal)],
            |t, v| t.coboundary(v[0], v[1], v[2], topo.clone(), de, dn).unwrap(),
        );
        check(
            "coboundary-transpose",
            &[(&maps, Init::Normal), (&maps, Init::Normal), (&r, Init::Normal)],
            |t, v| t.coboundary_transpose(v[0], v[1], v[2], topo.clone(), de, dn).unwrap(),
        );
    }
}

#[test]
fn normalized_diffusion_chain() {
    // Full normalized Laplacian applied to x, as used by the model.
    let topo = topology();
    let (de, dn, f) = (2, 2, 2);
    let maps = [topo.n_edges(), de * dn];
    let x = [topo.n_nodes() * dn, f];
    check(
        "normalized laplacian",
        &[(&maps, Init::Normal), (&maps, Init::Normal), (&x, Init::Normal)],
        |t, v| {
            let deg = t.degree_blocks(v[0], v[1], topo.clone(), de, dn).unwrap();
            let s = t.block_inv_sqrt(deg, 1e-6).unwrap();
            let z = t.block_diag_apply(s, v[2]).unwrap();
            let r = t.coboundary(v[0], v[1], z, topo.clone(), de, dn).unwrap();
            let lz = t.coboundary_transpose(v[0], v[1], r, topo.clone(), de, dn).unwrap();
            t.block_diag_apply(s, lz).unwrap()
        },
    );
}

#[test]
fn least_squares_gradient_is_analytic() {
    // ∇_x ‖Ax − b‖² = 2Aᵀ(Ax − b)
    let a = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0]).unwrap();
    let x0 = Tensor::matrix(2, 1, vec![0.3, -0.7]).unwrap();
    let b0 = Tensor::matrix(3, 1, vec![1.0, 0.0, -1.0]).unwrap();
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let x = tape.leaf(x0.clone(), true);
    let b = tape.constant(b0.clone());
    let ax = tape.matmul(av, x).unwrap();
    let r = tape.sub(ax, b).unwrap();
    let sq = tape.square(r).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();

    let am = DMatrix::from_row_slice(3, 2, a.data());
    let xm = DMatrix::from_row_slice(2, 1, x0.data());
    let bm = DMatrix::from_row_slice(3, 1, b0.data());
    let expected = am.transpose() * (&am * xm - bm) * 2.0;
    for (got, want) in g.get(x).unwrap().data().iter().zip(expected.iter()) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn backward_is_linear_in_upstream_scale() {
    let build = |c: f64| {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![0.1, -0.4, 0.9, 2.0]).unwrap(), true);
        let y = tape.activation(x, Activation::Elu).unwrap();
        let s = tape.sum(y).unwrap();
        let l = tape.scale(s, c).unwrap();
        tape.backward(l).unwrap().take(x).unwrap()
    };
    let g1 = build(1.0);
    let g3 = build(3.0);
    for (a, b) in g1.data().iter().zip(g3.data()) {
        assert!((3.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let topo = topology();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let tm = tape.leaf(sample(&mut rng, &[5, 4], &Init::Normal), true);
        let hm = tape.leaf(sample(&mut rng, &[5, 4], &Init::Normal), true);
        let x = tape.leaf(sample(&mut rng, &[10, 3], &Init::Normal), true);
        let r = tape.coboundary(tm, hm, x, topo, 2, 2).unwrap();
        let sq = tape.square(r).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        [tm, hm, x].map(|v| g.get(v).unwrap().clone())
    };
    assert_eq!(run(), run());
}
