//! Finite-difference checks of every differentiable op.

use std::rc::Rc;

use cdr_tensor::{
    grad_check, CoordSet, GatherMap, GradCheckOptions, GruParams, Precision, SparseTensor3D, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights so every
/// output entry carries a distinct upstream gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> cdr_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> cdr_tensor::Result<Var>) -> f64 {
    grad_check(f, &inputs, &GradCheckOptions::default()).unwrap().max_rel_error
}

fn block_coords(n: i32, drop_every: usize) -> Rc<CoordSet> {
    let mut v = Vec::new();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                v.push([x, y, z]);
            }
        }
    }
    let v = v
        .into_iter()
        .enumerate()
        .filter(|(i, _)| drop_every == 0 || i % drop_every != 0)
        .map(|(_, c)| c)
        .collect();
    Rc::new(CoordSet::new(v).unwrap())
}

#[test]
fn linear_graph_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = check(vec![rt(&mut rng, &[4, 3]), rt(&mut rng, &[3, 2])], |t, v| {
        let y = t.linear(v[0], v[1], None)?;
        project(t, y, 1)
    });
    assert!(err < 1e-10, "{err}");
}

#[test]
fn sigmoid_matches_analytic_derivative() {
    for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
        let mut tape = Tape::new();
        let v = tape.var(Tensor::scalar(x));
        let y = tape.sigmoid(v);
        let g = tape.backward(y).unwrap();
        let s = 1.0 / (1.0 + f64::exp(-x));
        assert!((g.get(v).unwrap().item() - s * (1.0 - s)).abs() < 1e-7);
    }
}

#[test]
fn every_op_passes_on_twenty_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: Vec<(&str, f64)> = Vec::new();

        worst.push(("elementwise", check(vec![rt(&mut rng, &[3, 4]), rt(&mut rng, &[3, 4])], |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[1])?;
            let c = t.mul(b, v[1])?;
            let d = t.tanh(c);
            let e = t.sigmoid(d);
            let f = t.affine(e, 2.0, -0.3);
            let g = t.log_transform(f);
            project(t, g, seed)
        })));

        worst.push(("relu_clamp", check(vec![rt(&mut rng, &[5, 3])], |t, v| {
            let a = t.relu(v[0]);
            let b = t.clamp(v[0], -0.5, 0.5);
            let c = t.add(a, b)?;
            project(t, c, seed)
        })));

        worst.push(("softmax", check(vec![rt(&mut rng, &[4, 5])], |t, v| {
            let s = t.softmax_rows(v[0]);
            project(t, s, seed)
        })));

        worst.push(("rows_and_bias", check(vec![rt(&mut rng, &[4, 3]), rt(&mut rng, &[4, 1]), rt(&mut rng, &[3])], |t, v| {
            let a = t.mul_rows(v[0], v[1])?;
            let b = t.add_row_vector(a, v[2])?;
            let m = t.mean(b);
            let p = project(t, b, seed)?;
            t.add(p, m)
        })));

        worst.push(("linear_bias", check(vec![rt(&mut rng, &[6, 3]), rt(&mut rng, &[3, 4]), rt(&mut rng, &[4])], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, seed)
        })));

        worst.push(("conv2d", check(vec![rt(&mut rng, &[2, 6, 5]), rt(&mut rng, &[3, 2, 3, 3]), rt(&mut rng, &[3])], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let p = t.avg_pool2d(y, 1)?;
            project(t, p, seed)
        })));

        worst.push(("pool_shape", check(vec![rt(&mut rng, &[2, 4, 4])], |t, v| {
            let p = t.avg_pool2d(v[0], 2)?;
            let r = t.chw_to_rows(p)?;
            let back = t.rows_to_chw(r, 2, 2)?;
            let c = t.concat_rows(&[back, p])?;
            project(t, c, seed)
        })));

        worst.push(("concat_gather", check(vec![rt(&mut rng, &[4, 2]), rt(&mut rng, &[4, 3])], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            let mut m = GatherMap::new(4);
            m.push_row([(0, 0.25), (3, 0.75)]);
            m.push_row([(2, 1.0)]);
            m.push_row([]);
            let g = t.gather(c, Rc::new(m))?;
            project(t, g, seed)
        })));

        let coords = block_coords(3, 4);
        let n = coords.len();
        worst.push(("sparse_conv", check(vec![rt(&mut rng, &[n, 2]), rt(&mut rng, &[3, 3, 3, 2, 3]), rt(&mut rng, &[3])], |t, v| {
            let st = SparseTensor3D::new(t, coords.clone(), v[0], 3)?;
            let y = t.sparse_conv3d(&st, v[1], Some(v[2]))?;
            project(t, y.values, seed)
        })));

        let pts = Tensor::from_fn(&[6, 3], |_| rng.gen_range(0.05..1.95));
        worst.push(("trilinear", check(vec![rt(&mut rng, &[n, 2]), pts], |t, v| {
            let st = SparseTensor3D::new(t, coords.clone(), v[0], 2)?;
            let y = t.trilinear_sample(&st, v[1])?;
            project(t, y, seed)
        })));

        let gc = block_coords(2, 0);
        let mut inputs = vec![rt(&mut rng, &[8, 2]), rt(&mut rng, &[8, 2])];
        for _ in 0..3 {
            inputs.push(Tensor::from_fn(&[27, 4, 2], |_| rng.gen_range(-0.5..0.5)));
            inputs.push(rt(&mut rng, &[2]));
        }
        worst.push(("gru", check(inputs, |t, v| {
            let h = SparseTensor3D::new(t, gc.clone(), v[0], 2)?;
            let x = SparseTensor3D::new(t, gc.clone(), v[1], 2)?;
            let p = GruParams {
                w_update: v[2],
                b_update: v[3],
                w_reset: v[4],
                b_reset: v[5],
                w_cand: v[6],
                b_cand: v[7],
            };
            let y = t.gru_cell(&h, &x, &p)?;
            project(t, y.values, seed)
        })));

        for (name, err) in worst {
            assert!(err < TOL, "seed {seed}: {name} relative error {err}");
        }
    }
}

#[test]
fn gradcheck_refuses_32_bit_mode() {
    let opts = GradCheckOptions {
        precision: Precision::F32,
        ..Default::default()
    };
    let r = grad_check(|t, v| Ok(t.sum(v[0])), &[Tensor::zeros(&[2])], &opts);
    assert!(r.is_err());
}

#[test]
fn gradcheck_flags_non_finite_gradients() {
    let r = grad_check(
        |t, v| {
            let inf = t.constant(Tensor::full(&[1], f64::INFINITY));
            let y = t.mul(v[0], inf)?;
            Ok(t.sum(y))
        },
        &[Tensor::zeros(&[1])],
        &GradCheckOptions::default(),
    );
    assert!(r.is_err());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let coords = block_coords(3, 5);
    let x = rt(&mut rng, &[coords.len(), 3]);
    let w = Tensor::from_fn(&[27, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let run = || {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let st = SparseTensor3D::new(&t, coords.clone(), xv, 2).unwrap();
        let y = t.sparse_conv3d(&st, wv, None).unwrap();
        t.value(y.values).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn f32_mode_rounds_outputs() {
    let mut t = Tape::with_precision(Precision::F32);
    let x = t.constant(Tensor::scalar(0.1));
    let y = t.affine(x, 3.0, 0.0);
    assert_eq!(t.value(y).item(), (0.1f32 as f64 * 3.0) as f32 as f64);
}
