use std::rc::Rc;

use cdr_tensor::{CoordSet, GruParams, SparseTensor3D, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn block(n: i32) -> Vec<[i32; 3]> {
    let mut v = Vec::new();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                v.push([x, y, z]);
            }
        }
    }
    v
}

/// Dense zero-padded 3x3x3 correlation over an `n^3` block, rows ordered x,y,z.
fn dense_conv3d(n: i32, x: &[f64], ci: usize, w: &[f64], co: usize, b: Option<&[f64]>) -> Vec<f64> {
    let idx = |c: [i32; 3]| ((c[0] * n + c[1]) * n + c[2]) as usize;
    let mut out = vec![0.0; (n * n * n) as usize * co];
    for p in block(n) {
        let o = idx(p);
        for oc in 0..co {
            let mut s = b.map_or(0.0, |b| b[oc]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let q = [p[0] + dx, p[1] + dy, p[2] + dz];
                        if q.iter().any(|v| *v < 0 || *v >= n) {
                            continue;
                        }
                        let k = ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize;
                        for c in 0..ci {
                            s += x[idx(q) * ci + c] * w[(k * ci + c) * co + oc];
                        }
                    }
                }
            }
            out[o * co + oc] = s;
        }
    }
    out
}

#[test]
fn sparse_conv_on_dense_cube_matches_dense_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (ci, co) = (3, 4);
    let x = rand_tensor(&mut rng, &[64, ci], 1.0);
    let w = rand_tensor(&mut rng, &[3, 3, 3, ci, co], 1.0);
    let b = rand_tensor(&mut rng, &[co], 1.0);
    let mut tape = Tape::new();
    let coords = Rc::new(CoordSet::new(block(4)).unwrap());
    let xv = tape.constant(x.clone());
    let st = SparseTensor3D::new(&tape, coords, xv, 2).unwrap();
    let wv = tape.constant(w.clone());
    let bv = tape.constant(b.clone());
    let y = tape.sparse_conv3d(&st, wv, Some(bv)).unwrap();
    let oracle = dense_conv3d(4, x.data(), ci, w.data(), co, Some(b.data()));
    let err = tape
        .value(y.values)
        .data()
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-10, "max error {err}");
}

#[test]
fn sparse_conv_output_independent_of_coordinate_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut coords = block(3);
    let x = rand_tensor(&mut rng, &[27, 2], 1.0);
    let w = rand_tensor(&mut rng, &[27, 2, 2], 1.0);
    let mut tape = Tape::new();
    let cs = Rc::new(CoordSet::new(coords.clone()).unwrap());
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let y = tape.sparse_conv3d(&SparseTensor3D::new(&tape, cs, xv, 2).unwrap(), wv, None).unwrap();
    let forward = tape.value(y.values).clone();

    coords.reverse();
    let xr = Tensor::from_fn(&[27, 2], |i| x.data()[(26 - i / 2) * 2 + i % 2]);
    let cs = Rc::new(CoordSet::new(coords).unwrap());
    let xv = tape.constant(xr);
    let yr = tape.sparse_conv3d(&SparseTensor3D::new(&tape, cs, xv, 2).unwrap(), wv, None).unwrap();
    for r in 0..27 {
        assert_eq!(forward.row(r), tape.value(yr.values).row(26 - r));
    }
}

fn closed_form_trilinear(grid: &dyn Fn(i32, i32, i32) -> f64, p: [f64; 3]) -> f64 {
    let (x0, y0, z0) = (p[0].floor(), p[1].floor(), p[2].floor());
    let (fx, fy, fz) = (p[0] - x0, p[1] - y0, p[2] - z0);
    let (x0, y0, z0) = (x0 as i32, y0 as i32, z0 as i32);
    let c00 = grid(x0, y0, z0) * (1.0 - fx) + grid(x0 + 1, y0, z0) * fx;
    let c01 = grid(x0, y0, z0 + 1) * (1.0 - fx) + grid(x0 + 1, y0, z0 + 1) * fx;
    let c10 = grid(x0, y0 + 1, z0) * (1.0 - fx) + grid(x0 + 1, y0 + 1, z0) * fx;
    let c11 = grid(x0, y0 + 1, z0 + 1) * (1.0 - fx) + grid(x0 + 1, y0 + 1, z0 + 1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

#[test]
fn trilinear_matches_closed_form_in_dense_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let vals = rand_tensor(&mut rng, &[27, 1], 1.0);
    let coords = Rc::new(CoordSet::new(block(3)).unwrap());
    let grid = |x: i32, y: i32, z: i32| vals.data()[((x * 3 + y) * 3 + z) as usize];
    let pts: Vec<[f64; 3]> = (0..50)
        .map(|_| [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)])
        .collect();
    let mut tape = Tape::new();
    let v = tape.constant(vals.clone());
    let st = SparseTensor3D::new(&tape, coords.clone(), v, 2).unwrap();
    let p = tape.constant(Tensor::new(vec![pts.len(), 3], pts.iter().flatten().copied().collect()).unwrap());
    let y = tape.trilinear_sample(&st, p).unwrap();
    for (i, q) in pts.iter().enumerate() {
        let expect = closed_form_trilinear(&grid, *q);
        assert!((tape.value(y).data()[i] - expect).abs() < 1e-10);
        let wsum: f64 = cdr_tensor::trilinear_weights(&coords, *q).iter().map(|w| w.1).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn gru_matches_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (ch, cx) = (3, 2);
    let h = rand_tensor(&mut rng, &[8, ch], 1.0);
    let x = rand_tensor(&mut rng, &[8, cx], 1.0);
    let ws: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[3, 3, 3, ch + cx, ch], 0.5)).collect();
    let bs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[ch], 0.5)).collect();

    let mut tape = Tape::new();
    let coords = Rc::new(CoordSet::new(block(2)).unwrap());
    let hv = tape.constant(h.clone());
    let xv = tape.constant(x.clone());
    let p = GruParams {
        w_update: tape.constant(ws[0].clone()),
        b_update: tape.constant(bs[0].clone()),
        w_reset: tape.constant(ws[1].clone()),
        b_reset: tape.constant(bs[1].clone()),
        w_cand: tape.constant(ws[2].clone()),
        b_cand: tape.constant(bs[2].clone()),
    };
    let hs = SparseTensor3D::new(&tape, coords.clone(), hv, 2).unwrap();
    let xs = SparseTensor3D::new(&tape, coords, xv, 2).unwrap();
    let out = tape.gru_cell(&hs, &xs, &p).unwrap();

    let cat = |a: &[f64], ca: usize, b: &[f64], cb: usize| -> Vec<f64> {
        (0..8)
            .flat_map(|r| a[r * ca..(r + 1) * ca].iter().chain(&b[r * cb..(r + 1) * cb]).copied().collect::<Vec<_>>())
            .collect()
    };
    let hx = cat(h.data(), ch, x.data(), cx);
    let z: Vec<f64> = dense_conv3d(2, &hx, ch + cx, ws[0].data(), ch, Some(bs[0].data())).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = dense_conv3d(2, &hx, ch + cx, ws[1].data(), ch, Some(bs[1].data())).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h.data()).map(|(a, b)| a * b).collect();
    let rhx = cat(&rh, ch, x.data(), cx);
    let c: Vec<f64> = dense_conv3d(2, &rhx, ch + cx, ws[2].data(), ch, Some(bs[2].data())).into_iter().map(f64::tanh).collect();
    for i in 0..8 * ch {
        let expect = (1.0 - z[i]) * h.data()[i] + z[i] * c[i];
        assert!((tape.value(out.values).data()[i] - expect).abs() < 1e-8);
    }
}

#[test]
fn gru_with_shut_update_gate_returns_hidden() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut tape = Tape::new();
    let coords = Rc::new(CoordSet::new(block(2)).unwrap());
    let h = rand_tensor(&mut rng, &[8, 2], 1.0);
    let hv = tape.constant(h.clone());
    let xv = tape.constant(rand_tensor(&mut rng, &[8, 2], 1.0));
    let mut k = || rand_tensor(&mut rng, &[27, 4, 2], 0.5);
    let p = GruParams {
        w_update: tape.constant(k()),
        b_update: tape.constant(Tensor::full(&[2], -1e30)),
        w_reset: tape.constant(k()),
        b_reset: tape.constant(Tensor::zeros(&[2])),
        w_cand: tape.constant(k()),
        b_cand: tape.constant(Tensor::zeros(&[2])),
    };
    let hs = SparseTensor3D::new(&tape, coords.clone(), hv, 2).unwrap();
    let xs = SparseTensor3D::new(&tape, coords, xv, 2).unwrap();
    let out = tape.gru_cell(&hs, &xs, &p).unwrap();
    assert_eq!(tape.value(out.values), &h);
}

#[test]
fn gru_rejects_mismatched_coords() {
    let mut tape = Tape::new();
    let a = Rc::new(CoordSet::new(block(2)).unwrap());
    let b = Rc::new(CoordSet::new(block(2).into_iter().rev().collect()).unwrap());
    let hv = tape.constant(Tensor::zeros(&[8, 1]));
    let xv = tape.constant(Tensor::zeros(&[8, 1]));
    let z = tape.constant(Tensor::zeros(&[27, 2, 1]));
    let zb = tape.constant(Tensor::zeros(&[1]));
    let p = GruParams { w_update: z, b_update: zb, w_reset: z, b_reset: zb, w_cand: z, b_cand: zb };
    let hs = SparseTensor3D::new(&tape, a, hv, 2).unwrap();
    let xs = SparseTensor3D::new(&tape, b, xv, 2).unwrap();
    assert!(tape.gru_cell(&hs, &xs, &p).is_err());
}
