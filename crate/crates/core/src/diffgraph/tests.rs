use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    t(
        shape,
        &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
    )
}

/// Re-draws until no relu input sits within `margin` of its kink.
fn random_away_from_zero(shape: &[usize], margin: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() > margin {
                break v;
            }
        })
        .collect();
    t(shape, &data)
}

fn check<F>(f: F, leaves: &[Tensor])
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, GraphError>,
{
    let report = gradient_check(f, leaves, 1e-5, 1e-4).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn relu_matmul_sigmoid_values() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
    let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let v = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
    assert_eq!(eye.matmul(v).unwrap().value().data(), v.value().data());
    assert_eq!(tape.scalar(0.0).sigmoid().value().item(), 0.5);
}

#[test]
fn sum_of_squares_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let root = x.square().sum();
    let g = tape.backward(root).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn constant_root_gives_zero_gradients() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let root = tape.scalar(3.0);
    let g = tape.backward(root).unwrap();
    assert!(g.get(x).is_none());
    assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
}

#[test]
fn sigmoid_of_relu_derivative() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.0));
    let root = x.relu().sigmoid();
    let g = tape.backward(root).unwrap().wrt(x).item();
    let s = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((g - s * (1.0 - s)).abs() < 1e-15);
    assert!((g - 0.19661).abs() < 1e-5);
}

#[test]
fn non_scalar_root_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert_eq!(
        tape.backward(x).err(),
        Some(GraphError::NonScalarRoot(vec![2]))
    );
}

#[test]
fn shape_errors_name_the_operands() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 2]));
    match a.add(b) {
        Err(GraphError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!((op, lhs, rhs), ("add", vec![2, 3], vec![2, 2]));
        }
        other => panic!("{other:?}"),
    }
    assert!(a.matmul(a).is_err());
    assert!(a.slice(1, 2, 4).is_err());
    assert!(a.reshape(&[5]).is_err());
    assert!(tape.concat(&[a, b], 0).is_err());
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn leading_dimension_broadcast_only() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[4, 3]));
    let bias = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let out = a.add(bias).unwrap();
    assert_eq!(out.shape(), vec![4, 3]);
    assert_eq!(&out.value().data()[9..], &[1.0, 2.0, 3.0]);
    let col = tape.constant(Tensor::zeros(&[4, 1]));
    assert!(a.add(col).is_err());
}

#[test]
fn concat_and_slice_layouts() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2, 1], &[9., 8.]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(c.value().data(), &[1., 2., 9., 3., 4., 8.]);
    assert_eq!(c.slice(1, 1, 3).unwrap().value().data(), &[2., 9., 4., 8.]);
    let r = tape.concat(&[a, a], 0).unwrap();
    assert_eq!(r.shape(), vec![4, 2]);
    assert_eq!(
        a.exclusive_cumsum().unwrap().value().data(),
        &[0., 1., 0., 3.]
    );
    assert_eq!(a.sum_last().unwrap().value().data(), &[3., 7.]);
    assert_eq!(b.broadcast(2).shape(), vec![2, 2, 1]);
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 5, 4], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    for stride in [1, 2] {
        let tape = Tape::new();
        let out = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), tape.constant(b.clone()), stride)
            .unwrap()
            .to_tensor();
        let (ho, wo) = (out.shape()[1], out.shape()[2]);
        assert_eq!((ho, wo), (5usize.div_ceil(stride), 4usize.div_ceil(stride)));
        for co in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let y = (oy * stride + ky) as isize - 1;
                                let xx = (ox * stride + kx) as isize - 1;
                                if y < 0 || xx < 0 || y >= 5 || xx >= 4 {
                                    continue;
                                }
                                acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * x.data()[(ci * 5 + y as usize) * 4 + xx as usize];
                            }
                        }
                    }
                    let got = out.data()[(co * ho + oy) * wo + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn gradients_of_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    let m = random(&[4, 2], &mut rng);
    check(
        |_, v| Ok(v[0].add(v[1])?.mul(v[0])?.sub(v[2])?.sin().sum()),
        &[a.clone(), b.clone(), row.clone()],
    );
    check(
        |_, v| Ok(v[0].mul(v[1])?.cos().mean()),
        &[a.clone(), row.clone()],
    );
    check(
        |_, v| Ok(v[0].matmul(v[1])?.sigmoid().exp().sum()),
        &[a.clone(), m.clone()],
    );
    check(
        |_, v| Ok(v[0].transpose()?.scale(0.7).add_scalar(0.3).square().sum()),
        &[a.clone()],
    );
    check(
        |tape, v| {
            let c = tape.concat(&[v[0], v[1]], 1)?;
            Ok(c.slice(1, 2, 7)?
                .exclusive_cumsum()?
                .sin()
                .sum_last()?
                .square()
                .sum())
        },
        &[a.clone(), b.clone()],
    );
    check(
        |tape, v| {
            let c = tape.concat(&[v[0], v[1]], 0)?;
            Ok(c.reshape(&[4, 6])?.slice(0, 1, 3)?.cos().sum())
        },
        &[a.clone(), b.clone()],
    );
    check(
        |tape, v| Ok(tape.mean_of(&[v[0], v[1], v[0]])?.neg().exp().sum()),
        &[a.clone(), b.clone()],
    );
    check(
        |_, v| Ok(v[0].broadcast(3).mul(v[1].broadcast(1))?.sin().sum()),
        &[row.clone(), a.clone()],
    );
    let away = random_away_from_zero(&[3, 4], 0.05, &mut rng);
    check(|_, v| Ok(v[0].relu().square().sum()), &[away]);
}

#[test]
fn conv_and_gather_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 6, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    for stride in [1, 2] {
        check(
            move |_, v| Ok(v[0].conv2d(v[1], v[2], stride)?.sin().sum()),
            &[x.clone(), w.clone(), b.clone()],
        );
    }
    let table = random(&[12, 3], &mut rng);
    let mut taps = BilinearTaps::new(3, 4);
    for _ in 0..20 {
        taps.push(rng.gen_range(-1.0..5.0), rng.gen_range(-1.0..4.0));
    }
    let taps = Rc::new(taps);
    check(
        move |_, v| Ok(v[0].gather_rows(taps.clone())?.sin().sum()),
        &[table],
    );
}

#[test]
fn linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[5], &mut rng);
    let k = random(&[5], &mut rng);
    let report = gradient_check(
        |tape, v| Ok(v[0].mul(tape.constant(k.clone()))?.sum()),
        &[x],
        1e-4,
        1e-10,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-10, "{report:?}");
}

#[test]
fn gradients_of_summed_losses_add_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[4, 3], &mut rng);
    let w = random(&[3, 2], &mut rng);
    let grad_of = |combine: u8| {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let a = v.matmul(tape.constant(w.clone())).unwrap().sin().sum();
        let b = v.cos().square().mean();
        let root = match combine {
            0 => a,
            1 => b,
            _ => a.add(b).unwrap(),
        };
        tape.backward(root).unwrap().wrt(v)
    };
    let (ga, gb, gab) = (grad_of(0), grad_of(1), grad_of(2));
    for ((a, b), ab) in ga.data().iter().zip(gb.data()).zip(gab.data()) {
        assert!((a + b - ab).abs() < 1e-10);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let x = tape.leaf(random(&[16, 8], &mut rng));
        let w = tape.leaf(random(&[8, 8], &mut rng));
        let y = x.matmul(w).unwrap().sigmoid().sum();
        let g = tape.backward(y).unwrap();
        let bits = y.value().item().to_bits();
        (bits, g.wrt(w).into_data())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert!(a
        .1
        .iter()
        .zip(&b.1)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn relu_margin_tracks_nearest_kink() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[0.5, -0.01, 2.0]));
    let _ = x.relu();
    assert_eq!(tape.relu_margin(), 0.01);
    let c = tape.constant(t(&[1], &[0.0]));
    let _ = c.relu();
    assert_eq!(tape.relu_margin(), 0.01);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn smooth_ops_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[2, 3], &mut rng);
        let m = random(&[3, 3], &mut rng);
        let report = gradient_check(
            |_, v| {
                let h = v[0].matmul(v[1])?;
                Ok(h.sigmoid().mul(h.sin())?.add(h.cos().exp())?.mean())
            },
            &[a, m],
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn relu_matches_finite_differences_away_from_kinks(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_away_from_zero(&[6], 1e-3, &mut rng);
        let report = gradient_check(
            |_, v| Ok(v[0].relu().sin().sum()),
            &[x], 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(report.relu_margin > 1e-5);
        prop_assert!(report.passed, "{:?}", report);
    }
}
