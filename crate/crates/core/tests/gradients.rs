mod common;

use common::{gradient_check_model, model_gradient_check, random_tensor, random_tokens};
use lexrecycle::autodiff::{finite_difference_check, finite_difference_check_many, Tape, Tensor};
use lexrecycle::model::{init_params, logits, ModelConfig};

const PRIMITIVE_TOL: f64 = 1e-5;

#[test]
fn two_layer_model_matches_finite_differences() {
    let params = gradient_check_model();
    let tokens = random_tokens(17, 32, 1);
    let report = model_gradient_check(&params, &tokens, 5e-4, 1e-4);
    assert!(report.checked > 6000);
    assert!(report.passed(), "max rel error {}: {:?}", report.max_rel_error, &report.failing[..report.failing.len().min(5)]);
}

#[test]
fn one_layer_model_on_eight_tokens() {
    let params = init_params(&ModelConfig::new(1, 8, 2, 8, 20, 3)).unwrap();
    let report = model_gradient_check(&params, &random_tokens(9, 20, 2), 5e-4, 1e-4);
    assert!(report.passed(), "max rel error {}", report.max_rel_error);
}

#[test]
fn matmul_gradient_is_b_transposed_broadcast() {
    let (a, b) = (random_tensor(&[3, 4], 1), random_tensor(&[4, 2], 2));
    let report = finite_difference_check_many(
        |tape, v| {
            let p = tape.matmul(v[0], v[1])?;
            Ok(tape.sum(p))
        },
        &[a.clone(), b.clone()],
        1e-5,
        PRIMITIVE_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");

    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a, true), tape.leaf(&b, false));
    let p = tape.matmul(va, vb).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    let ga = g.get(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expected: f64 = b.row(k).iter().sum();
            assert!((ga.get(i, k) - expected).abs() < 1e-14);
        }
    }
}

#[test]
fn sum_gradient_is_exact() {
    let report = finite_difference_check(|tape, x| Ok(tape.sum(x)), &random_tensor(&[3, 5], 4), 1e-3, 1e-10).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn layer_norm_then_sum() {
    // A plain sum of a normalised row is constant, so weight the outputs.
    let x = random_tensor(&[1, 5], 5);
    let w = random_tensor(&[1, 5], 6);
    let (gain, bias) = (random_tensor(&[5], 7), random_tensor(&[5], 8));
    let report = finite_difference_check_many(
        |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2])?;
            let wv = tape.leaf_owned(w.clone(), false);
            let y = tape.mul(y, wv)?;
            Ok(tape.sum(y))
        },
        &[x, gain, bias],
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

/// Every primitive, composed with a random linear read-out so that no
/// gradient is trivially constant.
#[test]
fn each_primitive_passes_at_tolerance() {
    type Op = fn(&mut Tape<'_>, &[lexrecycle::autodiff::Var]) -> lexrecycle::Result<lexrecycle::autodiff::Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Op)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("matmul_t", vec![vec![3, 4], vec![2, 4]], |t, v| t.matmul_t(v[0], v[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("gather", vec![vec![5, 3]], |t, v| t.gather(v[0], &[4, 0, 4, 2])),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |t, v| t.layer_norm(v[0], v[1], v[2])),
        ("gelu", vec![vec![3, 4]], |t, v| Ok(t.gelu(v[0]))),
        ("softmax", vec![vec![3, 4]], |t, v| Ok(t.softmax(v[0]))),
        ("causal_softmax", vec![vec![4, 4]], |t, v| t.causal_softmax(v[0])),
        ("slice_cols", vec![vec![3, 5]], |t, v| t.slice_cols(v[0], 1, 3)),
        ("concat_cols", vec![vec![3, 2], vec![3, 3]], |t, v| t.concat_cols(&[v[0], v[1]])),
    ];
    for (i, (name, shapes, op)) in cases.into_iter().enumerate() {
        let points: Vec<Tensor> = shapes.iter().enumerate().map(|(j, s)| random_tensor(s, 100 * i as u64 + j as u64)).collect();
        let readout_seed = 1000 + i as u64;
        let report = finite_difference_check_many(
            |tape, v| {
                let y = op(tape, v)?;
                let shape = tape.value(y).shape().to_vec();
                let w = tape.leaf_owned(random_tensor(&shape, readout_seed), false);
                let y = tape.mul(y, w)?;
                Ok(tape.sum(y))
            },
            &points,
            1e-4,
            PRIMITIVE_TOL,
        )
        .unwrap();
        assert!(report.passed(), "{name}: {report:?}");
    }
}

#[test]
fn cross_entropy_gradient() {
    let report = finite_difference_check(
        |tape, x| tape.cross_entropy(x, &[0, 3, 1], 1.0 / 3.0),
        &random_tensor(&[3, 4], 9),
        1e-4,
        PRIMITIVE_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn softmax_rows_are_distributions() {
    let x = random_tensor(&[6, 9], 10);
    let mut tape = Tape::new();
    let v = tape.leaf(&x, false);
    let s = tape.softmax(v);
    for r in 0..6 {
        let row = tape.value(s).row(r);
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn later_tokens_never_change_earlier_logits() {
    let params = init_params(&ModelConfig::new(2, 16, 2, 12, 30, 4)).unwrap();
    let a = random_tokens(12, 30, 5);
    let full = logits(&params, &a).unwrap();
    for t in 0..11 {
        let mut b = a.clone();
        for (i, tok) in b.iter_mut().enumerate().skip(t + 1) {
            *tok = (*tok + 1 + i as u32) % 30;
        }
        let other = logits(&params, &b).unwrap();
        for r in 0..=t {
            assert_eq!(full.row(r), other.row(r), "position {r} changed after editing beyond {t}");
        }
    }
}

#[test]
fn backward_is_bitwise_repeatable() {
    let params = gradient_check_model();
    let tokens = random_tokens(16, 32, 6);
    let run = || {
        let fwd = lexrecycle::model::forward(&params, &tokens[..15], Some(&lexrecycle::model::FreezeSpec::full())).unwrap();
        let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
        let mut tape = fwd.tape;
        let loss = tape.cross_entropy(fwd.logits, &targets, 1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        fwd.params.iter().map(|v| g.get(*v).unwrap().data().to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
