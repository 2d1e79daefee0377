mod common;

use plate_restore::degrade::{degrade, degrade_pass, motion_blur_kernel, pass_seed, DegradeConfig, Stage};
use plate_restore::image::Image;
use plate_restore::plates::{dataset_sample, PlateStyle};
use proptest::prelude::*;

fn plate(i: usize) -> Image {
    dataset_sample(&PlateStyle::default(), 99, i).unwrap().image
}

fn disabled() -> DegradeConfig {
    let mut cfg = DegradeConfig::default();
    for s in &mut cfg.stages {
        s.set_probability(0.0);
    }
    cfg
}

#[test]
fn zero_probability_pipeline_is_identity() {
    let img = plate(0);
    let out = degrade(&img, &disabled(), 5).unwrap();
    assert_eq!(out.to_u8(), img.to_u8());
    assert_eq!(out, img);
}

#[test]
fn gaussian_blur_of_impulse_matches_closed_form() {
    let sigma = 1.3f64;
    let (w, h) = (31, 25);
    let (cx, cy) = (15i64, 12i64);
    let mut img = Image::filled(w, h, 1, 0.0);
    img.set(0, cy as usize, cx as usize, 1.0);
    let cfg = DegradeConfig {
        orders: 1,
        stages: vec![Stage::GaussianBlur {
            probability: 1.0,
            sigma: [sigma, sigma],
        }],
    };
    let out = degrade(&img, &cfg, 0).unwrap();
    // truncated at ceil(3 sigma) and normalized per axis
    let r = (3.0 * sigma).ceil() as i64;
    let z: f64 = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).sum();
    let g = |d: i64| {
        if d.abs() > r {
            0.0
        } else {
            (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() / z
        }
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let want = g(x - cx) * g(y - cy);
            let got = out.get(0, y as usize, x as usize);
            assert!((got - want).abs() < 1e-6, "({x},{y}) {got} vs {want}");
        }
    }
}

#[test]
fn motion_kernel_support_hugs_the_segment() {
    for len in 1..10usize {
        for deg in (0..360).step_by(15) {
            let k = motion_blur_kernel(len, deg as f64).unwrap();
            let half = (len as f64 - 1.0) / 2.0;
            let (dx, dy) = ((deg as f64).to_radians().cos(), (deg as f64).to_radians().sin());
            for y in 0..k.height {
                for x in 0..k.width {
                    if k.at(x, y) == 0.0 {
                        continue;
                    }
                    let px = x as f64 - k.anchor.0 as f64;
                    let py = y as f64 - k.anchor.1 as f64;
                    // the segment must pass through this pixel's square
                    let (mut lo, mut hi) = (-half, half);
                    for (p, d) in [(px, dx), (py, dy)] {
                        if d.abs() < 1e-12 {
                            if p.abs() > 0.5 {
                                hi = lo - 1.0;
                            }
                        } else {
                            let (a, b) = ((p - 0.5 - 1e-9) / d, (p + 0.5 + 1e-9) / d);
                            lo = lo.max(a.min(b));
                            hi = hi.min(a.max(b));
                        }
                    }
                    assert!(lo <= hi, "len {len} angle {deg} ({x},{y})");
                }
            }
            for s in [-half, half] {
                let (ex, ey) = (s * dx, s * dy);
                let hit = (0..k.height).any(|y| {
                    (0..k.width).any(|x| {
                        let px = x as f64 - k.anchor.0 as f64;
                        let py = y as f64 - k.anchor.1 as f64;
                        k.at(x, y) > 0.0 && (px - ex).abs() <= 0.5 + 1e-9 && (py - ey).abs() <= 0.5 + 1e-9
                    })
                });
                assert!(hit, "endpoint len {len} angle {deg}");
            }
        }
    }
}

#[test]
fn same_inputs_same_output() {
    let img = plate(1);
    let cfg = DegradeConfig::default();
    let a = degrade(&img, &cfg, 42).unwrap();
    let b = degrade(&img, &cfg, 42).unwrap();
    assert_eq!(a, b);
    let c = degrade(&img, &cfg, 43).unwrap();
    assert_ne!(a, c);
}

#[test]
fn two_orders_equal_two_single_passes() {
    let img = plate(2);
    let cfg = DegradeConfig::default();
    for seed in 0..10u64 {
        let two = degrade(&img, &cfg, seed).unwrap();
        let once = degrade_pass(&img, &cfg.stages, pass_seed(seed, 0));
        let twice = degrade_pass(&once, &cfg.stages, pass_seed(seed, 1));
        assert_eq!(two, twice);
    }
}

#[test]
fn doubling_noise_lowers_mean_psnr() {
    let noise = |s: f64| DegradeConfig {
        orders: 2,
        stages: DegradeConfig::default()
            .stages
            .into_iter()
            .map(|st| match st {
                Stage::GaussianNoise { probability, .. } => Stage::GaussianNoise {
                    probability: probability.max(0.5),
                    sigma: [s, s],
                },
                other => other,
            })
            .collect(),
    };
    let mean_psnr = |cfg: &DegradeConfig| {
        (0..50usize)
            .map(|i| {
                let hq = plate(i);
                let lq = degrade(&hq, cfg, 1000 + i as u64).unwrap();
                common::psnr_f64(hq.data(), lq.data(), 255.0)
            })
            .sum::<f64>()
            / 50.0
    };
    let (a, b) = (mean_psnr(&noise(6.0)), mean_psnr(&noise(12.0)));
    assert!(b < a, "{b} !< {a}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn dimensions_and_range_are_preserved(seed in any::<u64>(), idx in 0usize..20, large in any::<bool>()) {
        let style = if large { PlateStyle::large() } else { PlateStyle::default() };
        let hq = dataset_sample(&style, 7, idx).unwrap().image;
        let mut cfg = DegradeConfig::default();
        for s in &mut cfg.stages {
            s.set_probability(1.0);
        }
        let lq = degrade(&hq, &cfg, seed).unwrap();
        prop_assert!(lq.same_dims(&hq));
        prop_assert!(lq.data().iter().all(|v| (0.0..=255.0).contains(v)));
    }
}
