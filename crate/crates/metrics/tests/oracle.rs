//! Brute-force oracles for Dice and HD95.
//!
//! The oracle recomputes both metrics from first principles: Dice by plain
//! voxel counting, HD95 from the full all-pairs distance matrix between
//! 6-connectivity boundary sets. It shares no code with the library path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg_core::LabelMap;
use volseg_metrics::{dice, hd95};

fn brute_dice(pred: &LabelMap, gt: &LabelMap, class: u8) -> f64 {
    let p: usize = pred.data().iter().filter(|&&v| v == class).count();
    let g: usize = gt.data().iter().filter(|&&v| v == class).count();
    let inter: usize = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(&a, &b)| a == class && b == class)
        .count();
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

fn brute_surface(lab: &LabelMap, class: u8) -> Vec<[i64; 3]> {
    let [d, h, w] = lab.shape().map(|v| v as i64);
    let at = |z: i64, y: i64, x: i64| -> Option<u8> {
        if z < 0 || y < 0 || x < 0 || z >= d || y >= h || x >= w {
            None
        } else {
            Some(lab.get(z as usize, y as usize, x as usize))
        }
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if at(z, y, x) != Some(class) {
                    continue;
                }
                let offsets = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                if offsets
                    .iter()
                    .any(|o| at(z + o[0], y + o[1], x + o[2]) != Some(class))
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn brute_hd95(pred: &LabelMap, gt: &LabelMap, class: u8) -> Option<f64> {
    let sp = brute_surface(pred, class);
    let sg = brute_surface(gt, class);
    if sp.is_empty() || sg.is_empty() {
        return None;
    }
    let spacing = gt.spacing_mm();
    let dist = |a: &[i64; 3], b: &[i64; 3]| -> f64 {
        let dz = (a[0] - b[0]) as f64 * spacing[0];
        let dy = (a[1] - b[1]) as f64 * spacing[1];
        let dx = (a[2] - b[2]) as f64 * spacing[2];
        (dz * dz + dy * dy + dx * dx).sqrt()
    };
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| -> f64 {
        let mut mins: Vec<f64> = from
            .iter()
            .map(|a| to.iter().map(|b| dist(a, b)).fold(f64::MAX, f64::min))
            .collect();
        mins.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((0.95 * mins.len() as f64).ceil() as usize).max(1);
        mins[rank - 1]
    };
    Some(directed(&sp, &sg).max(directed(&sg, &sp)))
}

fn random_map(rng: &mut ChaCha8Rng, shape: [usize; 3], spacing: [f64; 3]) -> LabelMap {
    let n = shape[0] * shape[1] * shape[2];
    let data: Vec<u8> = (0..n).map(|_| rng.gen_range(0u8..6)).collect();
    LabelMap::new(shape, spacing, data).unwrap()
}

#[test]
fn dice_and_hd95_match_brute_force_on_random_pairs() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let shape = [
            rng.gen_range(1usize..=6),
            rng.gen_range(1usize..=6),
            rng.gen_range(1usize..=6),
        ];
        let spacing = [
            rng.gen_range(0.5f64..3.0),
            rng.gen_range(0.5f64..3.0),
            rng.gen_range(0.5f64..3.0),
        ];
        let pred = random_map(&mut rng, shape, spacing);
        let gt = random_map(&mut rng, shape, spacing);
        for class in 0..6u8 {
            let d = dice(&pred, &gt, class).unwrap();
            let bd = brute_dice(&pred, &gt, class);
            assert_eq!(d, bd, "case {case} class {class}: dice {d} vs oracle {bd}");

            let h = hd95(&pred, &gt, class).unwrap();
            let bh = brute_hd95(&pred, &gt, class);
            match (h, bh) {
                (None, None) => {}
                (Some(a), Some(b)) => assert!(
                    (a - b).abs() < 1e-9,
                    "case {case} class {class}: hd95 {a} vs oracle {b}"
                ),
                other => panic!("case {case} class {class}: definedness mismatch {other:?}"),
            }
        }
    }
    assert!(
        start.elapsed().as_secs() < 30,
        "oracle sweep took {:?}",
        start.elapsed()
    );
}

#[test]
fn metrics_are_symmetric_and_reflexive() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let shape = [5, 5, 5];
        let pred = random_map(&mut rng, shape, [1.0; 3]);
        let gt = random_map(&mut rng, shape, [1.0; 3]);
        for class in 0..6u8 {
            assert_eq!(
                dice(&pred, &gt, class).unwrap(),
                dice(&gt, &pred, class).unwrap()
            );
            assert_eq!(
                hd95(&pred, &gt, class).unwrap(),
                hd95(&gt, &pred, class).unwrap()
            );
            assert_eq!(dice(&pred, &pred, class).unwrap(), 1.0);
            let self_hd = hd95(&pred, &pred, class).unwrap();
            assert!(self_hd == Some(0.0) || self_hd.is_none());
        }
    }
}

#[test]
fn hd95_scales_linearly_with_isotropic_spacing() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let shape = [5, 5, 5];
        let base_p = random_map(&mut rng, shape, [1.0; 3]);
        let base_g = random_map(&mut rng, shape, [1.0; 3]);
        let s = rng.gen_range(0.5f64..4.0);
        let scaled_p =
            LabelMap::new(shape, [s, s, s], base_p.data().to_vec()).unwrap();
        let scaled_g =
            LabelMap::new(shape, [s, s, s], base_g.data().to_vec()).unwrap();
        for class in 0..6u8 {
            let a = hd95(&base_p, &base_g, class).unwrap();
            let b = hd95(&scaled_p, &scaled_g, class).unwrap();
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert!((b - s * a).abs() < 1e-9, "{b} != {s} * {a}")
                }
                other => panic!("definedness mismatch {other:?}"),
            }
        }
    }
}

#[test]
fn hd95_is_bounded_by_hd100() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..30 {
        let shape = [5, 5, 5];
        let pred = random_map(&mut rng, shape, [1.3, 0.9, 1.1]);
        let gt = random_map(&mut rng, shape, [1.3, 0.9, 1.1]);
        for class in 0..6u8 {
            let sp = brute_surface(&pred, class);
            let sg = brute_surface(&gt, class);
            if sp.is_empty() || sg.is_empty() {
                continue;
            }
            let spacing = gt.spacing_mm();
            let dist = |a: &[i64; 3], b: &[i64; 3]| -> f64 {
                let dz = (a[0] - b[0]) as f64 * spacing[0];
                let dy = (a[1] - b[1]) as f64 * spacing[1];
                let dx = (a[2] - b[2]) as f64 * spacing[2];
                (dz * dz + dy * dy + dx * dx).sqrt()
            };
            let directed_max = |from: &[[i64; 3]], to: &[[i64; 3]]| -> f64 {
                from.iter()
                    .map(|a| to.iter().map(|b| dist(a, b)).fold(f64::MAX, f64::min))
                    .fold(0.0, f64::max)
            };
            let hd100 = directed_max(&sp, &sg).max(directed_max(&sg, &sp));
            let h = hd95(&pred, &gt, class).unwrap().unwrap();
            assert!(h <= hd100 + 1e-12, "hd95 {h} > hd100 {hd100}");
        }
    }
}

#[test]
fn three_case_fixture_means_match_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [4, 4, 4];
    let pairs_owned: Vec<(String, LabelMap, LabelMap)> = (0..3)
        .map(|i| {
            (
                format!("case{i}"),
                random_map(&mut rng, shape, [1.0; 3]),
                random_map(&mut rng, shape, [1.0; 3]),
            )
        })
        .collect();
    let pairs: Vec<(String, &LabelMap, &LabelMap)> = pairs_owned
        .iter()
        .map(|(id, p, g)| (id.clone(), p, g))
        .collect();
    let report = volseg_metrics::evaluate(&pairs).unwrap();
    for (i, &class) in volseg_metrics::FOREGROUND_CLASSES.iter().enumerate() {
        let mut dices = Vec::new();
        let mut hds = Vec::new();
        for (_, p, g) in &pairs {
            dices.push(brute_dice(p, g, class));
            if let Some(h) = brute_hd95(p, g, class) {
                hds.push(h);
            }
        }
        let mean_dice = dices.iter().sum::<f64>() / dices.len() as f64;
        assert!((report.per_class[i].mean_dice - mean_dice).abs() < 1e-12);
        match report.per_class[i].mean_hd95_mm {
            Some(m) => {
                let expected = hds.iter().sum::<f64>() / hds.len() as f64;
                assert!((m - expected).abs() < 1e-9);
            }
            None => assert!(hds.is_empty()),
        }
    }
}
