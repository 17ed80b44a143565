use proptest::prelude::*;
use stn_icnn::gradcheck::randn;
use stn_icnn::nn::Forward;
use stn_icnn::stn::{
    affine_grid, crop_with_rows, integer_window, remap_parts, theta_for_center, theta_ground_truth, LocNet,
    LocNetConfig, ThetaForm, ThetaRow,
};
use stn_icnn::tensor::{Graph, Mode, Tensor};

fn small_locnet() -> LocNet<f64> {
    let cfg = LocNetConfig {
        input_size: 16,
        widths: [2, 2, 3, 3, 4, 4, 4, 4],
        ..LocNetConfig::default()
    };
    LocNet::new(cfg, 5).unwrap()
}

fn locnet_theta(net: &LocNet<f64>, rough: Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = net.store.bind(&mut g, false);
    let x = g.constant(rough);
    let mut f = Forward::new(&mut g, &p, Mode::Train);
    let th = net.forward(&mut f, x).unwrap();
    g.value(th).clone()
}

#[test]
fn constrain_theta_at_zero() {
    let mut g = Graph::<f64>::new();
    let raw = g.constant(Tensor::zeros(vec![1, 2, 4]));
    let th = g.constrain_theta(raw).unwrap();
    assert_eq!(g.shape(th), &[1, 2, 2, 3]);
    for row in g.value(th).data().chunks(6) {
        assert!((row[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
        assert_eq!((row[1], row[3]), (0.0, 0.0));
    }
}

#[test]
fn locnet_emits_six_sparse_rows_that_depend_on_input() {
    let net = small_locnet();
    let a = locnet_theta(&net, randn(&[2, 9, 16, 16], 1));
    assert_eq!(a.shape(), &[2, 6, 2, 3]);
    for row in a.data().chunks(6) {
        assert_eq!((row[1], row[3]), (0.0, 0.0));
        assert!(row[0] > 0.0 && row[4] > 0.0);
    }
    let b = locnet_theta(&net, randn(&[2, 9, 16, 16], 2));
    assert_ne!(a, b);
    let mut g = Graph::new();
    let p = net.store.bind(&mut g, false);
    let x = g.constant(Tensor::<f64>::zeros(vec![1, 9, 15, 16]));
    let mut f = Forward::new(&mut g, &p, Mode::Train);
    assert!(net.forward(&mut f, x).is_err());
}

#[test]
fn literal_and_corner_aligned_forms_agree_to_first_order() {
    let mut mask = vec![false; 512 * 512];
    mask[256 * 512 + 256] = true;
    let lit = theta_ground_truth(&mask, 512, 512, (81, 81), ThetaForm::Literal, "nose").unwrap();
    let ca = theta_ground_truth(&mask, 512, 512, (81, 81), ThetaForm::CornerAligned, "nose").unwrap();
    assert!((lit.sx - 81.0 / 512.0).abs() < 1e-12);
    assert!((lit.sx - ca.sx).abs() < 2.0 / 512.0);
    assert!((lit.tx - ca.tx).abs() < 2.0 / 512.0);
}

#[test]
fn identity_row_gives_identity_grid() {
    let grid = affine_grid::<f64>(ThetaRow::IDENTITY, (5, 7)).unwrap();
    for y in 0..5 {
        for x in 0..7 {
            let i = (y * 7 + x) * 2;
            assert!((grid.data()[i] - (-1.0 + 2.0 * x as f64 / 6.0)).abs() < 1e-15);
            assert!((grid.data()[i + 1] - (-1.0 + 2.0 * y as f64 / 4.0)).abs() < 1e-15);
        }
    }
}

#[test]
fn translation_shifts_every_grid_point_equally() {
    let base = ThetaRow { sx: 0.4, tx: 0.0, sy: 0.3, ty: 0.0 };
    let moved = ThetaRow { tx: 0.25, ty: -0.1, ..base };
    let a = affine_grid::<f64>(base, (4, 6)).unwrap();
    let b = affine_grid::<f64>(moved, (4, 6)).unwrap();
    for (p, q) in a.data().chunks(2).zip(b.data().chunks(2)) {
        assert!((q[0] - p[0] - 0.25).abs() < 1e-15);
        assert!((q[1] - p[1] + 0.1).abs() < 1e-15);
    }
}

#[test]
fn odd_window_at_integer_centre_samples_pixel_centres() {
    let (s, win) = (301usize, 81usize);
    let row = theta_for_center(140.0, 97.0, s, s, (win, win), ThetaForm::CornerAligned);
    let grid = affine_grid::<f64>(row, (win, win)).unwrap();
    for p in grid.data().chunks(2) {
        for &v in p {
            let px = (v + 1.0) / 2.0 * (s - 1) as f64;
            assert!((px - px.round()).abs() < 1e-9, "{px}");
        }
    }
}

#[test]
fn crop_matches_integer_window_exactly_in_f64() {
    let img = randn(&[3, 120, 120], 3);
    let (cx, cy) = (50, 71);
    let row = theta_for_center(cx as f64, cy as f64, 120, 120, (81, 81), ThetaForm::CornerAligned);
    let crop = crop_with_rows(&img, &[row], (81, 81)).unwrap().remove(0);
    let base = integer_window(&img, (cx, cy), (81, 81)).unwrap();
    assert_eq!(crop.max_abs_diff(&base), Some(0.0));

    let f = img.cast::<f32>();
    let crop = crop_with_rows(&f, &[row], (81, 81)).unwrap().remove(0);
    let base = integer_window(&f, (cx, cy), (81, 81)).unwrap();
    assert!(crop.max_abs_diff(&base).unwrap() <= 1e-5);
}

#[test]
fn even_window_is_half_a_pixel_off() {
    let img = randn(&[3, 120, 120], 4);
    let row = theta_for_center(60.0, 60.0, 120, 120, (80, 80), ThetaForm::CornerAligned);
    let crop = crop_with_rows(&img, &[row], (80, 80)).unwrap().remove(0);
    for center in [(60, 60), (61, 61), (60, 61), (61, 60)] {
        let base = integer_window(&img, center, (80, 80)).unwrap();
        assert!(crop.max_abs_diff(&base).unwrap() > 1e-3);
    }
}

#[test]
fn window_outside_the_image_is_zero() {
    let img = Tensor::<f64>::full(vec![3, 40, 40], 1.0);
    let row = ThetaRow { sx: 0.2, tx: 3.0, sy: 0.2, ty: -3.0 };
    let crop = crop_with_rows(&img, &[row], (9, 9)).unwrap().remove(0);
    assert!(crop.data().iter().all(|&v| v == 0.0));
}

#[test]
fn remap_restores_window_and_zeroes_the_rest() {
    let s = 90;
    let img = randn(&[2, s, s], 6);
    let rows = [
        theta_for_center(20.0, 25.0, s, s, (15, 15), ThetaForm::CornerAligned),
        theta_for_center(60.0, 60.0, s, s, (15, 15), ThetaForm::CornerAligned),
    ];
    let patches = crop_with_rows(&img, &rows, (15, 15)).unwrap();
    let maps = remap_parts(&patches, &rows, (s, s)).unwrap();
    for (map, (cx, cy)) in maps.iter().zip([(20usize, 25usize), (60, 60)]) {
        for c in 0..2 {
            for y in 0..s {
                for x in 0..s {
                    let v = map.data()[(c * s + y) * s + x];
                    if x.abs_diff(cx) <= 7 && y.abs_diff(cy) <= 7 {
                        assert!((v - img.data()[(c * s + y) * s + x]).abs() <= 1e-4);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }
    let support = |m: &Tensor<f64>| m.data().iter().map(|&v| v != 0.0).collect::<Vec<_>>();
    let (a, b) = (support(&maps[0]), support(&maps[1]));
    assert!(a.iter().zip(&b).all(|(p, q)| !(*p && *q)));
}

#[test]
fn identity_remap_passes_through() {
    let img = randn(&[1, 12, 12], 8);
    let maps = remap_parts(std::slice::from_ref(&img), &[ThetaRow::IDENTITY], (12, 12)).unwrap();
    assert_eq!(maps[0], img);
    let zero = ThetaRow { sx: 0.0, ..ThetaRow::IDENTITY };
    assert!(remap_parts(&[img], &[zero], (12, 12)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constrained_rows_are_sparse_and_positive(raw in prop::collection::vec(-30.0f64..30.0, 24)) {
        let mut g = Graph::new();
        let r = g.constant(Tensor::from_vec(vec![1, 6, 4], raw).unwrap());
        let th = g.constrain_theta(r).unwrap();
        for row in g.value(th).data().chunks(6) {
            prop_assert_eq!((row[1], row[3]), (0.0, 0.0));
            prop_assert!(row[0] > 0.0 && row[4] > 0.0);
            prop_assert!(row[2].abs() <= 1.0 && row[5].abs() <= 1.0);
        }
    }

    #[test]
    fn double_inverse_is_identity(sx in 0.05f64..3.0, tx in -1.0f64..1.0, sy in 0.05f64..3.0, ty in -1.0f64..1.0) {
        let row = ThetaRow { sx, tx, sy, ty };
        let back = row.inverse().unwrap().inverse().unwrap();
        for (a, b) in row.to_array().iter().zip(back.to_array()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        let arr = row.inverse().unwrap().to_array();
        prop_assert_eq!((arr[1], arr[3]), (0.0, 0.0));
    }

    #[test]
    fn odd_crop_at_integer_centre_equals_integer_window(
        half in 1usize..20, cx in 0i64..64, cy in 0i64..64, seed in 0u64..500
    ) {
        let win = 2 * half + 1;
        let img = randn(&[2, 64, 64], seed);
        let row = theta_for_center(cx as f64, cy as f64, 64, 64, (win, win), ThetaForm::CornerAligned);
        let crop = crop_with_rows(&img, &[row], (win, win)).unwrap().remove(0);
        let base = integer_window(&img, (cx, cy), (win, win)).unwrap();
        prop_assert_eq!(crop.max_abs_diff(&base), Some(0.0));
    }
}
