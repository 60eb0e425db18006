use super::*;
use crate::jpeg;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randv(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Central-difference gradient check against the tape's backward pass.
/// `f` must rebuild the computation from the given leaves on a fresh tape.
fn grad_check<F>(param_inits: &[(Shape, Vec<f64>)], f: F)
where
    F: Fn(&mut Tape<f64>, &[Tensor]) -> Tensor,
{
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = param_inits
        .iter()
        .map(|(s, v)| tape.leaf(*s, v.clone(), true).unwrap())
        .collect();
    let loss = f(&mut tape, &leaves);
    assert_eq!(loss.shape, Shape::scalar());
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&t| {
            grads
                .get(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.shape.len()])
        })
        .collect();

    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (pi, (_, vals)) in param_inits.iter().enumerate() {
        for _ in 0..vals.len().min(20) {
            let ci = rng.random_range(0..vals.len());
            let eval = |delta: f64| -> f64 {
                let mut tape = Tape::new();
                let leaves: Vec<Tensor> = param_inits
                    .iter()
                    .enumerate()
                    .map(|(pj, (s, v))| {
                        let mut v = v.clone();
                        if pj == pi {
                            v[ci] += delta;
                        }
                        tape.leaf(*s, v, true).unwrap()
                    })
                    .collect();
                let loss = f(&mut tape, &leaves);
                tape.value(loss)[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic[pi][ci];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "leaf {pi} coord {ci}: fd={fd} analytic={an}"
            );
        }
    }
}

#[test]
fn conv2d_matches_nested_loop_reference() {
    // brute-force reference straight from the definition
    fn reference(
        x: &[f64],
        (ci, h, w): (usize, usize, usize),
        k: &[f64],
        (co, kh, kw): (usize, usize, usize),
        stride: usize,
        dil: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
        let ow = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
        let mut y = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x[(c * h + iy as usize) * w + ix as usize]
                                        * k[((o * ci + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    y[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(stride, dil, pad) in &[(1usize, 1usize, 1usize), (1, 2, 2), (2, 1, 1), (1, 1, 0)] {
        let (ci, h, w, co, k) = (3, 5, 5, 2, 3);
        let x = randv(&mut rng, ci * h * w, -1.0, 1.0);
        let kern = randv(&mut rng, co * ci * k * k, -1.0, 1.0);
        let want = reference(&x, (ci, h, w), &kern, (co, k, k), stride, dil, pad);

        let mut tape: Tape<f64> = Tape::new();
        let xt = tape.constant(Shape::new(1, ci, h, w), x).unwrap();
        let wt = tape.constant(Shape::new(co, ci, k, k), kern).unwrap();
        let y = tape
            .conv2d(
                xt,
                wt,
                None,
                ConvSpec {
                    stride,
                    dilation: dil,
                    padding: pad,
                },
            )
            .unwrap();
        let got = tape.value(y);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "stride={stride} dil={dil} pad={pad}");
        }
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randv(&mut rng, 49, -5.0, 5.0);
    let mut tape: Tape<f64> = Tape::new();
    let xt = tape.constant(Shape::new(1, 1, 7, 7), x.clone()).unwrap();
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let wt = tape.constant(Shape::new(1, 1, 3, 3), k).unwrap();
    let y = tape.conv2d(xt, wt, None, ConvSpec::same(3, 1)).unwrap();
    assert_eq!(tape.value(y), x.as_slice());
}

#[test]
fn conv2d_dilated_impulse_spread() {
    // a unit impulse through a dilated ones-kernel lands on the d-spaced grid
    let (h, w) = (9, 9);
    let mut x = vec![0.0; h * w];
    x[4 * w + 4] = 1.0;
    let mut tape: Tape<f64> = Tape::new();
    let xt = tape.constant(Shape::new(1, 1, h, w), x).unwrap();
    let wt = tape.constant(Shape::new(1, 1, 3, 3), vec![1.0; 9]).unwrap();
    let y = tape.conv2d(xt, wt, None, ConvSpec::same(3, 2)).unwrap();
    let got = tape.value(y);
    let mut ones = 0;
    for yy in 0..h {
        for xx in 0..w {
            let v = got[yy * w + xx];
            let on_grid = [2usize, 4, 6].contains(&yy) && [2usize, 4, 6].contains(&xx);
            assert_eq!(v != 0.0, on_grid, "({yy},{xx})");
            if v != 0.0 {
                assert_eq!(v, 1.0);
                ones += 1;
            }
        }
    }
    assert_eq!(ones, 9);
}

#[test]
fn conv2d_batch_matches_per_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, ci, h, w, co, k) = (3, 2, 10, 11, 4, 3);
    let x = randv(&mut rng, n * ci * h * w, -1.0, 1.0);
    let kern = randv(&mut rng, co * ci * k * k, -1.0, 1.0);
    let bias = randv(&mut rng, co, -0.5, 0.5);
    let spec = ConvSpec::same(3, 1);

    let mut tape: Tape<f64> = Tape::new();
    let xt = tape.constant(Shape::new(n, ci, h, w), x.clone()).unwrap();
    let wt = tape.constant(Shape::new(co, ci, k, k), kern.clone()).unwrap();
    let bt = tape.constant(Shape::new(1, co, 1, 1), bias.clone()).unwrap();
    let y = tape.conv2d(xt, wt, Some(bt), spec).unwrap();
    let batch_out = tape.value(y).to_vec();

    let img = ci * h * w;
    let oimg = co * h * w;
    for b in 0..n {
        let mut tape: Tape<f64> = Tape::new();
        let xt = tape
            .constant(Shape::new(1, ci, h, w), x[b * img..(b + 1) * img].to_vec())
            .unwrap();
        let wt = tape.constant(Shape::new(co, ci, k, k), kern.clone()).unwrap();
        let bt = tape.constant(Shape::new(1, co, 1, 1), bias.clone()).unwrap();
        let y = tape.conv2d(xt, wt, Some(bt), spec).unwrap();
        assert_eq!(tape.value(y), &batch_out[b * oimg..(b + 1) * oimg]);
    }
}

#[test]
fn conv_transpose_shape_and_zero_input() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(Shape::new(1, 3, 14, 14), vec![0.0; 3 * 196]).unwrap();
    let w = tape
        .constant(Shape::new(3, 2, 4, 4), vec![0.3; 3 * 2 * 16])
        .unwrap();
    let b = tape.constant(Shape::new(1, 2, 1, 1), vec![1.5, -2.0]).unwrap();
    let y = tape
        .conv2d_transpose(x, w, Some(b), ConvTransposeSpec { stride: 2, padding: 1 })
        .unwrap();
    assert_eq!(y.shape, Shape::new(1, 2, 28, 28));
    let vals = tape.value(y);
    assert!(vals[..784].iter().all(|&v| v == 1.5));
    assert!(vals[784..].iter().all(|&v| v == -2.0));
}

#[test]
fn conv_transpose_equals_conv_backward_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (ci, co, h, w, k, stride, pad) = (3, 2, 6, 7, 4, 2, 1);
    let x = randv(&mut rng, ci * h * w, -1.0, 1.0);
    let kern = randv(&mut rng, ci * co * k * k, -1.0, 1.0);

    // forward through the transposed convolution
    let mut tape: Tape<f64> = Tape::new();
    let xt = tape.constant(Shape::new(1, ci, h, w), x.clone()).unwrap();
    let wt = tape.constant(Shape::new(ci, co, k, k), kern.clone()).unwrap();
    let y = tape
        .conv2d_transpose(xt, wt, None, ConvTransposeSpec { stride, padding: pad })
        .unwrap();
    let t_out = tape.value(y).to_vec();
    let ys = y.shape;

    // data gradient of the matching convolution, via an actual backward pass
    let mut tape: Tape<f64> = Tape::new();
    let z = tape.leaf(ys, vec![0.0; ys.len()], true).unwrap();
    let wt = tape.constant(Shape::new(ci, co, k, k), kern).unwrap();
    let yc = tape
        .conv2d(
            z,
            wt,
            None,
            ConvSpec {
                stride,
                dilation: 1,
                padding: pad,
            },
        )
        .unwrap();
    assert_eq!(yc.shape, Shape::new(1, ci, h, w));
    let mask = tape.constant(yc.shape, x).unwrap();
    let loss = tape.masked_sum(yc, mask).unwrap();
    let grads = tape.backward(loss).unwrap();
    let via_backward = grads.get(z).unwrap();

    let max_diff = t_out
        .iter()
        .zip(via_backward)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_diff < 1e-6, "max diff {max_diff}");
}

#[test]
fn prelu_values() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape
        .constant(Shape::new(1, 2, 1, 2), vec![-2.0, 3.0, -2.0, 3.0])
        .unwrap();
    let a = tape.constant(Shape::new(1, 2, 1, 1), vec![0.1, 1.0]).unwrap();
    let y = tape.prelu(x, a).unwrap();
    assert_eq!(tape.value(y), &[-0.2, 3.0, -2.0, 3.0]);
}

#[test]
fn scale_add_affine_values() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 4.0]).unwrap();
    let zero = tape.scalar_leaf(0.0, false).unwrap();
    let y = tape.scale(x, zero).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);
    let z = tape.add(x, y).unwrap();
    assert_eq!(tape.value(z), &[1.0, -2.0, 4.0]);
    let w = tape.affine(z, 2.0, 1.0).unwrap();
    assert_eq!(tape.value(w), &[3.0, -3.0, 9.0]);
}

#[test]
fn concat_shapes() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(Shape::new(1, 3, 8, 8), vec![1.0; 3 * 64]).unwrap();
    let b = tape.constant(Shape::new(1, 1, 8, 8), vec![2.0; 64]).unwrap();
    let y = tape.concat_channels(a, b).unwrap();
    assert_eq!(y.shape, Shape::new(1, 4, 8, 8));
    let v = tape.value(y);
    assert!(v[..192].iter().all(|&x| x == 1.0));
    assert!(v[192..].iter().all(|&x| x == 2.0));
}

#[test]
fn mse_values_and_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.leaf(Shape::new(1, 1, 1, 1), vec![2.0], true).unwrap();
    let b = tape.constant(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap();
    let y = tape.mse(a, b).unwrap();
    assert_eq!(tape.value(y), &[4.0]);
    let grads = tape.backward(y).unwrap();
    // d/da mean (a-b)^2 = 2(a-b)/N = 4
    assert_eq!(grads.get(a).unwrap(), &[4.0]);
}

#[test]
fn mse_identical_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = randv(&mut rng, 32, -3.0, 3.0);
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(Shape::new(1, 2, 4, 4), v.clone()).unwrap();
    let b = tape.constant(Shape::new(1, 2, 4, 4), v).unwrap();
    let y = tape.mse(a, b).unwrap();
    assert_eq!(tape.value(y), &[0.0]);
}

#[test]
fn block_idct_matches_codec() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (bh, bw) = (2, 3);
    let grid_vals = randv(&mut rng, bh * bw * 64, -100.0, 100.0);
    let grid = jpeg::CoeffGrid::new(bh, bw, grid_vals.clone()).unwrap();
    let want = jpeg::block_idct(&grid);

    // channel-major gather, independently of the net's own conversion
    let mut chans = vec![0.0; 64 * bh * bw];
    for by in 0..bh {
        for bx in 0..bw {
            for c in 0..64 {
                chans[c * bh * bw + by * bw + bx] = grid_vals[(by * bw + bx) * 64 + c];
            }
        }
    }
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(Shape::new(1, 64, bh, bw), chans).unwrap();
    let y = tape.block_idct(x).unwrap();
    assert_eq!(y.shape, Shape::new(1, 1, bh * 8, bw * 8));
    for (a, b) in tape.value(y).iter().zip(want.samples()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn dru_clamps_and_gates_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape
        .leaf(Shape::new(1, 1, 1, 3), vec![13.0, 20.0, 16.0], true)
        .unwrap();
    let lo = tape.constant(Shape::new(1, 1, 1, 3), vec![14.0; 3]).unwrap();
    let hi = tape.constant(Shape::new(1, 1, 1, 3), vec![18.0; 3]).unwrap();
    let y = tape.dru(x, lo, hi).unwrap();
    assert_eq!(tape.value(y), &[14.0, 18.0, 16.0]);
    let mask = tape.constant(Shape::new(1, 1, 1, 3), vec![1.0; 3]).unwrap();
    let loss = tape.masked_sum(y, mask).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn gradients_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (ci, co, h, w, k) = (2, 3, 6, 6, 3);
    let inits = vec![
        (Shape::new(1, ci, h, w), randv(&mut rng, ci * h * w, -1.0, 1.0)),
        (Shape::new(co, ci, k, k), randv(&mut rng, co * ci * k * k, -1.0, 1.0)),
        (Shape::new(1, co, 1, 1), randv(&mut rng, co, -0.5, 0.5)),
    ];
    for spec in [
        ConvSpec::same(3, 1),
        ConvSpec::same(3, 2),
        ConvSpec {
            stride: 2,
            dilation: 1,
            padding: 1,
        },
    ] {
        grad_check(&inits, |tape, leaves| {
            let y = tape.conv2d(leaves[0], leaves[1], Some(leaves[2]), spec).unwrap();
            let target = tape.constant(y.shape, vec![0.1; y.shape.len()]).unwrap();
            tape.mse(y, target).unwrap()
        });
    }
}

#[test]
fn gradients_conv2d_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (ci, co, h, w, k) = (3, 2, 5, 5, 4);
    let inits = vec![
        (Shape::new(1, ci, h, w), randv(&mut rng, ci * h * w, -1.0, 1.0)),
        (Shape::new(ci, co, k, k), randv(&mut rng, ci * co * k * k, -1.0, 1.0)),
        (Shape::new(1, co, 1, 1), randv(&mut rng, co, -0.5, 0.5)),
    ];
    grad_check(&inits, |tape, leaves| {
        let y = tape
            .conv2d_transpose(
                leaves[0],
                leaves[1],
                Some(leaves[2]),
                ConvTransposeSpec { stride: 2, padding: 1 },
            )
            .unwrap();
        let target = tape.constant(y.shape, vec![-0.2; y.shape.len()]).unwrap();
        tape.mse(y, target).unwrap()
    });
}

#[test]
fn gradients_prelu() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // keep inputs away from the kink at zero
    let xv: Vec<f64> = randv(&mut rng, 2 * 16, 0.2, 1.0)
        .into_iter()
        .enumerate()
        .map(|(i, v)| if i % 3 == 0 { -v } else { v })
        .collect();
    let inits = vec![
        (Shape::new(1, 2, 4, 4), xv),
        (Shape::new(1, 2, 1, 1), vec![0.1, 0.3]),
    ];
    grad_check(&inits, |tape, leaves| {
        let y = tape.prelu(leaves[0], leaves[1]).unwrap();
        let target = tape.constant(y.shape, vec![0.0; y.shape.len()]).unwrap();
        tape.mse(y, target).unwrap()
    });
}

#[test]
fn gradients_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inits = vec![
        (Shape::new(1, 2, 4, 4), randv(&mut rng, 32, -1.0, 1.0)),
        (Shape::new(1, 2, 4, 4), randv(&mut rng, 32, -1.0, 1.0)),
        (Shape::scalar(), vec![0.7]),
    ];
    grad_check(&inits, |tape, leaves| {
        let a = tape.add(leaves[0], leaves[1]).unwrap();
        let b = tape.affine(a, 1.7, -0.3).unwrap();
        let c = tape.scale(b, leaves[2]).unwrap();
        let d = tape.concat_channels(c, leaves[0]).unwrap();
        let p = tape.avg_pool(d, 2).unwrap();
        let target = tape.constant(p.shape, vec![0.05; p.shape.len()]).unwrap();
        tape.mse(p, target).unwrap()
    });
}

#[test]
fn gradients_block_idct_and_dru() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xv = randv(&mut rng, 64, -40.0, 40.0);
    // boxes comfortably away from the current values so fd stays differentiable
    let lo: Vec<f64> = xv.iter().map(|v| v - 5.0).collect();
    let hi: Vec<f64> = xv.iter().map(|v| v + 5.0).collect();
    let inits = vec![(Shape::new(1, 64, 1, 1), xv)];
    grad_check(&inits, |tape, leaves| {
        let lo = tape.constant(Shape::new(1, 64, 1, 1), lo.clone()).unwrap();
        let hi = tape.constant(Shape::new(1, 64, 1, 1), hi.clone()).unwrap();
        let boxed = tape.dru(leaves[0], lo, hi).unwrap();
        let pix = tape.block_idct(boxed).unwrap();
        let target = tape.constant(pix.shape, vec![128.0; 64]).unwrap();
        tape.mse(pix, target).unwrap()
    });
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let xv = randv(&mut rng, 18, -1.0, 1.0);
    let shape = Shape::new(1, 2, 3, 3);
    let (alpha, beta) = (0.3, 1.7);

    let run = |mode: u8| -> Vec<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(shape, xv.clone(), true).unwrap();
        let t1 = tape.constant(shape, vec![0.5; 18]).unwrap();
        let t2 = tape.constant(shape, vec![-0.25; 18]).unwrap();
        let l1 = tape.mse(x, t1).unwrap();
        let l2 = tape.mse(x, t2).unwrap();
        let loss = match mode {
            0 => l1,
            1 => l2,
            _ => {
                let a = tape.affine(l1, alpha, 0.0).unwrap();
                let b = tape.affine(l2, beta, 0.0).unwrap();
                tape.add(a, b).unwrap()
            }
        };
        let grads = tape.backward(loss).unwrap();
        grads.get(x).unwrap().to_vec()
    };

    let g1 = run(0);
    let g2 = run(1);
    let gc = run(2);
    for i in 0..18 {
        assert!((gc[i] - (alpha * g1[i] + beta * g2[i])).abs() < 1e-12);
    }
}

#[test]
fn disconnected_parameter_has_no_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Shape::scalar(), vec![1.0], true).unwrap();
    let unused = tape.leaf(Shape::scalar(), vec![2.0], true).unwrap();
    let t = tape.constant(Shape::scalar(), vec![0.0]).unwrap();
    let loss = tape.mse(x, t).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(x).is_some());
    assert!(grads.get(unused).is_none());
}

#[test]
fn tape_reuse_is_an_error() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Shape::scalar(), vec![1.0], true).unwrap();
    let t = tape.constant(Shape::scalar(), vec![0.0]).unwrap();
    let loss = tape.mse(x, t).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.backward(loss).is_err());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Shape::new(1, 1, 1, 2), vec![1.0, 2.0], true).unwrap();
    assert!(tape.backward(x).is_err());
}

#[test]
fn inference_tape_records_nothing() {
    let mut tape: Tape<f64> = Tape::inference();
    let x = tape.leaf(Shape::scalar(), vec![1.0], true).unwrap();
    let t = tape.constant(Shape::scalar(), vec![0.0]).unwrap();
    let loss = tape.mse(x, t).unwrap();
    assert_eq!(tape.value(loss), &[1.0]);
    assert!(tape.backward(loss).is_err());
}

#[test]
fn non_finite_values_are_a_numeric_fault() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Shape::scalar(), vec![1.0e308], true).unwrap();
    let doubled = tape.affine(x, 10.0, 0.0);
    assert!(matches!(doubled, Err(crate::Error::Numeric(_))));
}

#[test]
fn simple_weight_gradient() {
    // loss = mse(w*x, y) with scalars: d/dw = 2x(wx - y)
    let (w0, x0, y0) = (1.5, 2.0, 7.0);
    let mut tape: Tape<f64> = Tape::new();
    let w = tape.scalar_leaf(w0, true).unwrap();
    let x = tape.constant(Shape::scalar(), vec![x0]).unwrap();
    let y = tape.constant(Shape::scalar(), vec![y0]).unwrap();
    let wx = tape.scale(x, w).unwrap();
    let loss = tape.mse(wx, y).unwrap();
    let grads = tape.backward(loss).unwrap();
    let got = grads.get(w).unwrap()[0];
    assert!((got - 2.0 * x0 * (w0 * x0 - y0)).abs() < 1e-12);
}

#[test]
fn tensor_dump_round_trip_and_fixture() {
    let shape = Shape::new(1, 2, 3, 4);
    let vals: Vec<f64> = (0..24).map(|i| i as f64 / 10.0).collect();
    let mut buf = Vec::new();
    write_tensor_dump(shape, &vals, &mut buf).unwrap();
    let (s, v) = read_tensor_dump(&buf).unwrap();
    assert_eq!(s, shape);
    assert_eq!(v, vals);

    // an independently written file in the documented format decodes equal
    let fixture = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/tensor_1x2x3x4_f64.bin");
    let bytes = std::fs::read(fixture).unwrap();
    assert_eq!(bytes, buf);
    let (s, v) = read_tensor_dump(&bytes).unwrap();
    assert_eq!(s, shape);
    assert_eq!(v, vals);

    // f32 dumps widen losslessly for these values
    let vals32: Vec<f32> = vals.iter().map(|&v| v as f32).collect();
    let mut buf32 = Vec::new();
    write_tensor_dump(shape, &vals32, &mut buf32).unwrap();
    let (s32, v32) = read_tensor_dump(&buf32).unwrap();
    assert_eq!(s32, shape);
    assert_eq!(v32.len(), 24);
    assert!(read_tensor_dump(&buf32[..10]).is_err());
}
