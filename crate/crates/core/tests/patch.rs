use std::collections::{HashSet, VecDeque};

use proptest::prelude::*;
use surrogate_core::image::RenderedImage;
use surrogate_core::patch::{hsv_similarity, rgb_to_hsv, select_patch, PatchOptions, PatchSelection};
use surrogate_core::Error;

#[test]
fn similarity_examples() {
    assert_eq!(hsv_similarity([0.3, 0.6, 0.2], [0.3, 0.6, 0.2]).unwrap(), 1.0);
    // hue just below a full turn and pure red are neighbours on the circle
    let near_one = [1.0, 0.0, 1e-9];
    assert!(rgb_to_hsv(near_one)[0] > 0.99);
    assert!((hsv_similarity(near_one, [1.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-8);
    // red (h=0, s=1, v=1) vs (0, .5, 1): h = 7/12, circular distance 5/12 → 5/6 after rescaling
    let got = hsv_similarity([1.0, 0.0, 0.0], [0.0, 0.5, 1.0]).unwrap();
    assert!((got - (1.0 - 0.5 * 5.0 / 6.0)).abs() < 1e-6, "{got}");
    assert!((got - 0.583333).abs() < 1e-6);
    assert!(matches!(hsv_similarity([1.2, 0.0, 0.0], [0.0; 3]), Err(Error::Data(_))));
}

fn two_tone(w: usize, h: usize) -> RenderedImage {
    let mut img = RenderedImage::filled(w, h, [0.9, 0.1, 0.1]);
    for y in 0..h {
        for x in w / 2..w {
            img.set_pixel(x, y, [0.1, 0.1, 0.9]);
        }
    }
    img
}

fn opts(d: f64, r: f64) -> PatchOptions {
    PatchOptions { threshold: d, radius: r, max_extent: None }
}

#[test]
fn uniform_image_selects_everything() {
    let img = RenderedImage::filled(9, 7, [0.4, 0.5, 0.6]);
    let sel = select_patch(&img, [4, 3], &opts(0.95, 1.0)).unwrap();
    assert_eq!(sel.pixels.len(), 63);
}

/// Independent 4-neighbour flood fill over an exact color match.
fn oracle_fill(img: &RenderedImage, p: [i64; 2]) -> HashSet<[i64; 2]> {
    let c = img.pixel(p[0] as usize, p[1] as usize);
    let mut seen = HashSet::from([p]);
    let mut q = VecDeque::from([p]);
    while let Some([x, y]) = q.pop_front() {
        for [dx, dy] in [[1, 0], [-1, 0], [0, 1], [0, -1]] {
            let n = [x + dx, y + dy];
            if n[0] >= 0 && n[1] >= 0 && (n[0] as usize) < img.width && (n[1] as usize) < img.height
                && img.pixel(n[0] as usize, n[1] as usize) == c
                && seen.insert(n)
            {
                q.push_back(n);
            }
        }
    }
    seen
}

#[test]
fn two_tone_selects_exactly_the_clicked_half() {
    let img = two_tone(12, 8);
    let sel = select_patch(&img, [2, 5], &opts(0.95, 1.0)).unwrap();
    let got: HashSet<_> = sel.pixels.iter().copied().collect();
    assert_eq!(got, oracle_fill(&img, [2, 5]));
    assert_eq!(got.len(), 48);
    assert!(got.iter().all(|p| p[0] < 6));
}

#[test]
fn radius_bridges_gaps_and_cap_limits_extent() {
    let mut img = RenderedImage::filled(11, 1, [0.9, 0.1, 0.1]);
    img.set_pixel(5, 0, [0.1, 0.9, 0.1]);
    assert_eq!(select_patch(&img, [0, 0], &opts(0.95, 1.0)).unwrap().pixels.len(), 5);
    assert_eq!(select_patch(&img, [0, 0], &opts(0.95, 2.0)).unwrap().pixels.len(), 10);
    let capped = PatchOptions { max_extent: Some(3.0), ..opts(0.95, 2.0) };
    assert_eq!(select_patch(&img, [0, 0], &capped).unwrap().pixels.len(), 4);
}

#[test]
fn invalid_arguments() {
    let img = RenderedImage::filled(4, 4, [0.5; 3]);
    assert!(matches!(select_patch(&img, [4, 0], &opts(0.9, 1.0)), Err(Error::Argument(_))));
    assert!(matches!(select_patch(&img, [-1, 0], &opts(0.9, 1.0)), Err(Error::Argument(_))));
    assert!(select_patch(&img, [0, 0], &opts(0.0, 1.0)).is_err());
    assert!(select_patch(&img, [0, 0], &opts(0.9, 0.5)).is_err());
}

#[test]
fn json_shape() {
    let img = RenderedImage::filled(2, 1, [0.5; 3]);
    let sel = select_patch(&img, [0, 0], &opts(0.9, 1.0)).unwrap().with_target([1, 0]);
    let v = serde_json::to_value(&sel).unwrap();
    assert_eq!(v["seed"], serde_json::json!([0, 0]));
    assert_eq!(v["target"], serde_json::json!([1, 0]));
    assert_eq!(v["pixels"], serde_json::json!([[0, 0], [1, 0]]));
    // minimal client payloads parse
    let min: PatchSelection = serde_json::from_str(r#"{"seed":[0,0],"target":[1,0],"pixels":[[0,0]]}"#).unwrap();
    assert!(min.active);
    assert_eq!(min.initial(), [0, 0]);
}

fn noisy(seed: u64, w: usize, h: usize) -> RenderedImage {
    let mut s = seed.wrapping_add(0x9e37_79b9);
    let mut img = RenderedImage::filled(w, h, [0.0; 3]);
    // a few flat regions with slight variations
    for y in 0..h {
        for x in 0..w {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let jitter = ((s >> 33) % 100) as f32 / 1000.0;
            let base = if (x / 4 + y / 3) % 2 == 0 { [0.8, 0.2, 0.2] } else { [0.2, 0.3, 0.8] };
            img.set_pixel(x, y, base.map(|v| v + jitter));
        }
    }
    img
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn monotone_in_threshold_and_radius(seed in 0u64..1000, x in 0i64..12, y in 0i64..10, d1 in 0.5f64..1.0, d2 in 0.5f64..1.0, r1 in 1.0f64..4.0, r2 in 1.0f64..4.0) {
        let img = noisy(seed, 12, 10);
        let (dl, dh) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        let (rl, rh) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        let set = |d, r| -> HashSet<[i64; 2]> { select_patch(&img, [x, y], &opts(d, r)).unwrap().pixels.into_iter().collect() };
        let base = set(dh, rl);
        prop_assert!(base.contains(&[x, y]));
        prop_assert!(set(dl, rl).is_superset(&base));
        prop_assert!(set(dh, rh).is_superset(&base));
        prop_assert_eq!(set(dh, rl), base);
        let seed_color = img.pixel(x as usize, y as usize).map(|v| v as f64);
        for p in set(dh, rh) {
            let c = img.pixel(p[0] as usize, p[1] as usize).map(|v| v as f64);
            prop_assert!(hsv_similarity(c, seed_color).unwrap() >= dh);
        }
    }
}
