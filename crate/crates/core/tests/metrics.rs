mod common;

use common::*;
use rand::Rng;
use vmrnn::metrics::{gaussian_window, mae, mse, psnr, report, ssim, Convention};
use vmrnn::Tensor;

fn pair(shape: &[usize], seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    (uniform(shape, 0.0, 1.0, &mut r), uniform(shape, 0.0, 1.0, &mut r))
}

#[test]
fn ssim_matches_window_loop_oracle() {
    let (a, b) = pair(&[2, 20, 17, 2], 1);
    let got = ssim(&a, &b, 1.0).unwrap();
    let mut want = 0.0;
    for f in 0..2 {
        for ch in 0..2 {
            let plane =
                |t: &Tensor<f64>| -> Vec<f64> { (0..20 * 17).map(|p| t.data()[(f * 20 * 17 + p) * 2 + ch]).collect() };
            want += ssim_window_oracle(&plane(&a), &plane(&b), 20, 17, 1.0);
        }
    }
    want /= 4.0;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn ssim_identical_is_one_and_symmetric() {
    let (a, b) = pair(&[3, 16, 16, 1], 2);
    assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
    assert_eq!(ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
    let small = uniform(&[4, 4, 1], 0.0, 1.0, &mut rng(3));
    assert_eq!(ssim(&small, &small, 1.0).unwrap(), 1.0);
}

#[test]
fn ssim_shifted_by_range_is_below_one() {
    let (a, _) = pair(&[1, 12, 12, 1], 4);
    let shifted = a.map(|v| v + 1.0);
    assert!(ssim(&a, &shifted, 1.0).unwrap() < 1.0);
}

#[test]
fn window_taps_sum_to_one() {
    let w = gaussian_window(11, 1.5);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert_eq!(w[0], w[10]);
}

#[test]
fn mse_and_mae_match_double_loops() {
    let (a, b) = pair(&[3, 5, 7, 2], 5);
    let (mut se, mut ae) = (0.0, 0.0);
    for f in 0..3 {
        let (mut fse, mut fae) = (0.0, 0.0);
        for p in 0..70 {
            let d = a.data()[f * 70 + p] - b.data()[f * 70 + p];
            fse += d * d;
            fae += d.abs();
        }
        se += fse;
        ae += fae;
    }
    assert!((mse(&a, &b, Convention::PerFrameSum).unwrap() - se / 3.0).abs() < 1e-10);
    assert!((mae(&a, &b, Convention::PerFrameSum).unwrap() - ae / 3.0).abs() < 1e-10);
    assert!((mse(&a, &b, Convention::PerPixelMean).unwrap() - se / 210.0).abs() < 1e-10);
    assert!((mae(&a, &b, Convention::PerPixelMean).unwrap() - ae / 210.0).abs() < 1e-10);
    assert_eq!(mse(&a, &b, Convention::PerPixelMean).unwrap(), mse(&b, &a, Convention::PerPixelMean).unwrap());
    assert_eq!(mae(&a, &b, Convention::PerPixelMean).unwrap(), mae(&b, &a, Convention::PerPixelMean).unwrap());
}

#[test]
fn per_frame_sum_is_per_pixel_times_pixels() {
    for (seed, shape) in [(6, [2usize, 64, 64, 1]), (7, [5, 32, 32, 2]), (8, [1, 3, 9, 3])] {
        let (a, b) = pair(&shape, seed);
        let pixels = (shape[1] * shape[2] * shape[3]) as f64;
        let pp = mse(&a, &b, Convention::PerPixelMean).unwrap();
        assert_eq!(mse(&a, &b, Convention::PerFrameSum).unwrap(), pp * pixels);
        let pp = mae(&a, &b, Convention::PerPixelMean).unwrap();
        assert_eq!(mae(&a, &b, Convention::PerFrameSum).unwrap(), pp * pixels);
    }
}

#[test]
fn unit_error_on_64x64_frame_counts_pixels() {
    let a = Tensor::<f64>::zeros(&[64, 64, 1]);
    let b = Tensor::full(&[64, 64, 1], 1.0);
    assert_eq!(mse(&a, &b, Convention::PerFrameSum).unwrap(), 4096.0);
    assert_eq!(mae(&a, &b, Convention::PerFrameSum).unwrap(), 4096.0);
    assert_eq!(mse(&a, &a, Convention::PerFrameSum).unwrap(), 0.0);
}

#[test]
fn psnr_closed_forms() {
    let a = Tensor::<f64>::zeros(&[8, 8, 1]);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
    assert!(psnr(&a, &a.map(|_| 1.0), 1.0).unwrap().abs() < 1e-12);
    assert!((psnr(&a, &a.map(|_| 0.1), 1.0).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn growing_noise_degrades_every_metric() {
    let (target, _) = pair(&[4, 16, 16, 1], 9);
    let mut r = rng(10);
    let noise: Vec<f64> = (0..target.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let scores: Vec<(f64, f64, f64, f64)> = [0.05, 0.1, 0.2]
        .iter()
        .map(|&amp| {
            let pred =
                Tensor::from_vec(target.shape(), target.data().iter().zip(&noise).map(|(t, n)| t + amp * n).collect())
                    .unwrap();
            (
                mse(&pred, &target, Convention::PerPixelMean).unwrap(),
                mae(&pred, &target, Convention::PerPixelMean).unwrap(),
                ssim(&pred, &target, 1.0).unwrap(),
                psnr(&pred, &target, 1.0).unwrap(),
            )
        })
        .collect();
    for w in scores.windows(2) {
        assert!(w[1].0 > w[0].0 && w[1].1 > w[0].1);
        assert!(w[1].2 < w[0].2 && w[1].3 < w[0].3);
    }
}

#[test]
fn report_csv_has_one_row_per_horizon_frame() {
    let (a, b) = pair(&[2, 7, 8, 8, 1], 11);
    let rep = report(&a, &b, Convention::PerFrameSum, 1.0).unwrap();
    let csv = rep.to_csv();
    let rows: Vec<&str> = csv.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).collect();
    assert_eq!(rows.len(), 7);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
}
