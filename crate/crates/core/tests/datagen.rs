use wdlab::datagen::{
    binary_labels, gen_heldout, gen_task, gen_task_pair, pad_orthogonalize, parse_idx, sin_label, IdxData, TaskSpec,
};
use wdlab::Error;

#[test]
fn disjoint_subspaces_give_orthogonal_unit_inputs() {
    let pair = gen_task_pair(&TaskSpec::on_range(40, 50, 0..20, 3), &TaskSpec::on_range(40, 50, 20..40, 3)).unwrap();
    assert_eq!(pair.eps, 0.0);
    for x in pair.a.data.inputs.iter().chain(&pair.b.data.inputs) {
        assert!((x.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(pair.a.data.inputs.iter().all(|x| x[20..].iter().all(|&v| v == 0.0)));
    assert!(pair.b.data.inputs.iter().all(|x| x[..20].iter().all(|&v| v == 0.0)));
}

#[test]
fn labels_follow_the_sine_labeler() {
    let spec = TaskSpec {
        label_freq: 10.0,
        ..TaskSpec::on_range(6, 30, 0..6, 1)
    };
    let t = gen_task(&spec, "x").unwrap();
    for (x, &y) in t.data.inputs.iter().zip(&t.data.labels) {
        let z: f64 = t.labeler.iter().zip(x).map(|(w, v)| w * v).sum();
        assert_eq!(y, if (10.0 * z).sin() >= 0.0 { 1.0 } else { -1.0 });
        assert_eq!(y, sin_label(&t.labeler, 10.0, x));
    }
    let held = gen_heldout(&spec, "x", &t, 10).unwrap();
    assert_ne!(held.inputs[0], t.data.inputs[0]);
}

#[test]
fn generation_is_deterministic_per_seed_and_tag() {
    let spec = TaskSpec::on_range(5, 8, 0..5, 9);
    assert_eq!(gen_task(&spec, "a").unwrap(), gen_task(&spec, "a").unwrap());
    assert_ne!(gen_task(&spec, "a").unwrap().data, gen_task(&spec, "b").unwrap().data);
}

#[test]
fn bad_specs_are_rejected() {
    let mut s = TaskSpec::on_range(4, 5, 0..4, 0);
    s.subspace.push(4);
    assert!(s.validate().is_err());
    assert!(TaskSpec::on_range(4, 0, 0..4, 0).validate().is_err());
    assert!(TaskSpec::on_range(4, 5, 0..0, 0).validate().is_err());
}

#[test]
fn padding_makes_tasks_orthogonal() {
    let a = gen_task(&TaskSpec::on_range(3, 4, 0..3, 0), "a").unwrap().data;
    let b = gen_task(&TaskSpec::on_range(3, 4, 0..3, 1), "b").unwrap().data;
    let (pa, pb) = pad_orthogonalize(&a, &b, true).unwrap();
    assert_eq!(pa.dim(), 6);
    for (x, y) in pa.inputs.iter().zip(&pb.inputs) {
        assert_eq!(x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>(), 0.0);
    }
    assert!(pb.labels.iter().zip(&b.labels).all(|(p, q)| *p == -q));
}

fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(body);
    out
}

#[test]
fn idx_images_and_labels_parse() {
    let imgs = idx(0x0803, &[2, 2, 2], &[0, 255, 51, 102, 255, 0, 0, 0]);
    match parse_idx(&imgs).unwrap() {
        IdxData::Images { rows, cols, pixels } => {
            assert_eq!((rows, cols), (2, 2));
            assert_eq!(pixels, vec![vec![0.0, 1.0, 0.2, 0.4], vec![1.0, 0.0, 0.0, 0.0]]);
        }
        other => panic!("{other:?}"),
    }
    let labels = idx(0x0801, &[3], &[0, 4, 9]);
    let IdxData::Labels(l) = parse_idx(&labels).unwrap() else { panic!() };
    assert_eq!(binary_labels(&l).unwrap(), vec![-1.0, -1.0, 1.0]);
    assert!(binary_labels(&[10]).is_err());
}

#[test]
fn idx_errors_are_format_errors() {
    assert!(matches!(parse_idx(&idx(0x0803, &[2, 2, 2], &[0; 7])), Err(Error::Format(_))));
    assert!(matches!(parse_idx(&idx(0x0802, &[1], &[0])), Err(Error::Format(_))));
    assert!(matches!(parse_idx(&[0, 0]), Err(Error::Format(_))));
}
