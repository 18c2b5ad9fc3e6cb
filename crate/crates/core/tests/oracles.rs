//! Convolution kernels against direct nested-loop evaluations.

use csanet::tensor::kernels::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward,
};
use csanet::tensor::{ConvGeometry, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{naive_conv, naive_conv_transpose};

mod support;

fn close(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}");
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!(
            (x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs())),
            "{what}[{i}]: {x} vs {y}"
        );
    }
}

/// Gradients of `<dy, f(x, w)>` with respect to `x` and `w`, by linearity of `f` in each argument.
fn naive_grads(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    f: impl Fn(&Tensor, &Tensor) -> Tensor,
) -> (Tensor, Tensor) {
    let basis = |t: &Tensor, i: usize| {
        let mut e = Tensor::zeros(t.shape());
        e.data_mut()[i] = 1.0;
        e
    };
    let dx: Vec<f64> = (0..x.numel()).map(|i| f(&basis(x, i), w).dot(dy)).collect();
    let dw: Vec<f64> = (0..w.numel()).map(|i| f(x, &basis(w, i)).dot(dy)).collect();
    (
        Tensor::from_vec(x.shape(), dx).unwrap(),
        Tensor::from_vec(w.shape(), dw).unwrap(),
    )
}

#[test]
fn conv2d_matches_nested_loops_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    for (n, cin, cout) in [(1, 1, 1), (2, 3, 4), (1, 4, 2)] {
        for (h, w) in [(5, 5), (8, 8), (7, 6)] {
            for k in [1, 3, 4] {
                for stride in [1, 2] {
                    for dilation in [1, 2] {
                        for pad in [0, 1] {
                            let g = ConvGeometry::new(stride, pad, dilation);
                            if g.conv_out(h, k).is_none() || g.conv_out(w, k).is_none() {
                                continue;
                            }
                            let x = Tensor::uniform(Shape::new(n, cin, h, w), -1.0, 1.0, &mut rng);
                            let wt =
                                Tensor::uniform(Shape::new(cout, cin, k, k), -1.0, 1.0, &mut rng);
                            let b = Tensor::uniform(Shape::new(1, cout, 1, 1), -1.0, 1.0, &mut rng);
                            let got = conv2d(&x, &wt, Some(&b), g).unwrap();
                            assert_eq!(
                                got,
                                naive_conv(&x, &wt, Some(&b), g),
                                "{n} {cin} {cout} {h}x{w} k{k} {g:?}"
                            );
                            let got = conv2d(&x, &wt, None, g).unwrap();
                            assert_eq!(got, naive_conv(&x, &wt, None, g));
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(cases > 150);
}

#[test]
fn conv_transpose2d_matches_nested_loops_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (n, cin, cout) in [(1, 1, 1), (2, 3, 4), (1, 4, 2)] {
        for (h, w) in [(3, 3), (4, 5), (8, 8)] {
            for k in [1, 2, 3, 4] {
                for stride in [1, 2] {
                    for pad in [0, 1] {
                        if (h - 1) * stride + k <= 2 * pad || (w - 1) * stride + k <= 2 * pad {
                            continue;
                        }
                        let x = Tensor::uniform(Shape::new(n, cin, h, w), -1.0, 1.0, &mut rng);
                        let wt = Tensor::uniform(Shape::new(cin, cout, k, k), -1.0, 1.0, &mut rng);
                        let b = Tensor::uniform(Shape::new(1, cout, 1, 1), -1.0, 1.0, &mut rng);
                        let got = conv_transpose2d(&x, &wt, Some(&b), stride, pad).unwrap();
                        let want = naive_conv_transpose(&x, &wt, Some(&b), stride, pad);
                        assert_eq!(got, want, "{n} {cin} {cout} {h}x{w} k{k} s{stride} p{pad}");
                    }
                }
            }
        }
    }
}

#[test]
fn upsampling_deconv_doubles_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::uniform(Shape::new(1, 2, 8, 6), -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(Shape::new(2, 3, 4, 4), -1.0, 1.0, &mut rng);
    let y = conv_transpose2d(&x, &w, None, 2, 1).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 3, 16, 12));
}

#[test]
fn conv2d_backward_matches_linear_probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, g) in [
        (3, ConvGeometry::new(1, 1, 1)),
        (3, ConvGeometry::new(2, 1, 1)),
        (3, ConvGeometry::new(1, 2, 2)),
        (1, ConvGeometry::new(1, 0, 1)),
        (4, ConvGeometry::new(2, 1, 1)),
    ] {
        let x = Tensor::uniform(Shape::new(2, 2, 6, 5), -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(Shape::new(3, 2, k, k), -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &w, None, g).unwrap();
        let dy = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let grads = conv2d_backward(&x, &w, g, &dy, [true, true, true]);
        let (dx, dw) = naive_grads(&x, &w, &dy, |x, w| naive_conv(x, w, None, g));
        close(grads.dx.as_ref().unwrap(), &dx, "dx");
        close(grads.dw.as_ref().unwrap(), &dw, "dw");
        assert!((grads.db.unwrap().sum() - dy.sum()).abs() < 1e-12);
    }
}

#[test]
fn conv_transpose2d_backward_matches_linear_probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (k, stride, pad) in [(4, 2, 1), (3, 1, 1), (2, 2, 0), (1, 1, 0)] {
        let x = Tensor::uniform(Shape::new(2, 3, 4, 3), -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(Shape::new(3, 2, k, k), -1.0, 1.0, &mut rng);
        let y = conv_transpose2d(&x, &w, None, stride, pad).unwrap();
        let dy = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let grads = conv_transpose2d_backward(&x, &w, stride, pad, &dy, [true, true, false]);
        let (dx, dw) = naive_grads(&x, &w, &dy, |x, w| {
            naive_conv_transpose(x, w, None, stride, pad)
        });
        close(grads.dx.as_ref().unwrap(), &dx, "dx");
        close(grads.dw.as_ref().unwrap(), &dw, "dw");
    }
}
