use fitnet::autodiff::{Tape, Var};
use fitnet::tensor::{ParamSet, Tensor};
use fitnet::Result;
use proptest::prelude::*;

const EPS: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Reduces any node to a scalar through fixed, uneven weights so that
/// every output element matters.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let (r, c) = tape.shape(out);
    if (r, c) == (1, 1) {
        return Ok(out);
    }
    let u = tape.constant(1, r, (0..r).map(|i| 0.7 + 0.3 * (i as f64).sin()).collect())?;
    let v = tape.constant(c, 1, (0..c).map(|j| -0.4 + 0.9 * (j as f64 * 1.3).cos()).collect())?;
    let left = tape.matmul(u, out)?;
    tape.matmul(left, v)
}

/// Largest relative error between backprop and central differences over
/// every input entry.
fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut params = ParamSet::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| params.add(format!("x{i}"), t.clone()))
        .collect();
    let eval = |params: &ParamSet| -> f64 {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = project(&mut tape, out).unwrap();
        tape.scalar(loss)
    };
    let grads = {
        let mut tape = Tape::new(&params);
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = project(&mut tape, out).unwrap();
        tape.backward(loss).unwrap().into_params()
    };
    let mut worst = 0.0f64;
    for &id in &ids {
        let analytic = grads.dense(id, &params);
        for k in 0..analytic.len() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + EPS;
            let up = eval(&params);
            params.get_mut(id).data_mut()[k] = orig - EPS;
            let down = eval(&params);
            params.get_mut(id).data_mut()[k] = orig;
            worst = worst.max(rel_err(analytic[k], (up - down) / (2.0 * EPS)));
        }
    }
    worst
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..5, 1usize..5)
}

/// Keeps entries away from the relu kink.
fn off_kink(t: Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let d = t.into_data().into_iter().map(|x| if x.abs() < 1e-3 { x + 0.01 } else { x }).collect();
    Tensor::matrix(r, c, d).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_grad((m, k, n) in (1usize..5, 1usize..5, 1usize..5), seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let a = Tensor::uniform(&[m, k], -2.0, 2.0, &mut rng);
        let b = Tensor::uniform(&[k, n], -2.0, 2.0, &mut rng);
        prop_assert!(fd_check(&[a, b], |t, v| t.matmul(v[0], v[1])) < 1e-4);
    }

    #[test]
    fn add_and_broadcast_grad(a in matrix(3, 4), b in matrix(3, 4), row in matrix(1, 4)) {
        prop_assert!(fd_check(&[a.clone(), b], |t, v| t.add(v[0], v[1])) < 1e-4);
        prop_assert!(fd_check(&[a, row], |t, v| t.add(v[0], v[1])) < 1e-4);
    }

    #[test]
    fn elementwise_grads(a in dims().prop_flat_map(|(r, c)| matrix(r, c)), c in -2.0f64..2.0) {
        prop_assert!(fd_check(&[a.clone()], |t, v| Ok(t.scale(v[0], c))) < 1e-4);
        prop_assert!(fd_check(&[a.clone()], |t, v| Ok(t.sigmoid(v[0]))) < 1e-4);
        prop_assert!(fd_check(&[off_kink(a.clone())], |t, v| Ok(t.relu(v[0]))) < 1e-4);
        prop_assert!(fd_check(&[a.clone()], |t, v| t.softmax(v[0])) < 1e-4);
        prop_assert!(fd_check(&[a.clone()], |t, v| Ok(t.transpose(v[0]))) < 1e-4);
        prop_assert!(fd_check(&[a.clone()], |t, v| t.mean_rows(v[0])) < 1e-4);
        prop_assert!(fd_check(&[a], |t, v| Ok(t.sum(v[0]))) < 1e-4);
    }

    #[test]
    fn structural_grads(a in matrix(2, 3), b in matrix(2, 1), r1 in matrix(1, 3), r2 in matrix(1, 3)) {
        prop_assert!(fd_check(&[a.clone(), b], |t, v| t.concat(&[v[0], v[1]])) < 1e-4);
        prop_assert!(fd_check(&[r1.clone(), r2.clone()], |t, v| t.stack_rows(&[v[0], v[1], v[0]])) < 1e-4);
        prop_assert!(fd_check(&[r1.clone(), r2.clone()], |t, v| t.dot(v[0], v[1])) < 1e-4);
        prop_assert!(fd_check(&[r1, r2], |t, v| t.add_n(&[v[0], v[1], v[1]])) < 1e-4);
    }

    #[test]
    fn lookup_grad(table in matrix(4, 3), row in 0usize..4) {
        let err = fd_check(&[table], |t, v| {
            let id = t.params().id_of("x0").unwrap();
            let r = t.lookup(id, row)?;
            t.add(v[0], r)
        });
        prop_assert!(err < 1e-4);
    }

    #[test]
    fn bce_grads(x in matrix(1, 1), xs in matrix(2, 3), label in 0u8..2, labels in prop::collection::vec(0u8..2, 6)) {
        let single = fd_check(&[x], |t, v| {
            let p = t.sigmoid(v[0]);
            t.bce(p, f64::from(label))
        });
        prop_assert!(single < 1e-4);
        let labels: Vec<f64> = labels.into_iter().map(f64::from).collect();
        let summed = fd_check(&[xs], |t, v| {
            let p = t.sigmoid(v[0]);
            t.bce_sum(p, &labels)
        });
        prop_assert!(summed < 1e-4);
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        xs in prop::collection::vec(-30.0f64..30.0, 1..12),
        c in -100.0f64..100.0,
    ) {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let n = xs.len();
        let a = tape.constant(1, n, xs.clone()).unwrap();
        let b = tape.constant(1, n, xs.iter().map(|x| x + c).collect()).unwrap();
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        let (pa, pb) = (tape.value(sa), tape.value(sb));
        prop_assert!(pa.iter().all(|p| *p >= 0.0));
        prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (x, y) in pa.iter().zip(pb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_bit_identical(a in matrix(3, 3), b in matrix(3, 2)) {
        let mut params = ParamSet::new();
        let ia = params.add("a", a);
        let ib = params.add("b", b);
        let run = || {
            let mut tape = Tape::new(&params);
            let (va, vb) = (tape.param(ia).unwrap(), tape.param(ib).unwrap());
            let s = tape.softmax(va).unwrap();
            let m = tape.matmul(s, vb).unwrap();
            let p = tape.sigmoid(m);
            let loss = tape.bce_sum(p, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
            let g = tape.backward(loss).unwrap().into_params();
            [g.dense(ia, &params), g.dense(ib, &params)]
                .concat()
                .into_iter()
                .map(f64::to_bits)
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
