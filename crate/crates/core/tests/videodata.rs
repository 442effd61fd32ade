use everest::videodata::{
    decode_clip, encode_clip, gen_moving_square, load_clip, motion_class_clips, save_clip, uniform_indices, Background,
    ClassClipSpec, DatasetManifest, Direction, SquareSpec, VideoClip,
};
use proptest::prelude::*;

/// Pixels whose value in any channel differs from the previous frame.
fn differencing(clip: &VideoClip) -> Vec<bool> {
    let (c, h, w) = (clip.channels, clip.height, clip.width);
    let mut out = vec![false; clip.t_frames * h * w];
    for t in 1..clip.t_frames {
        let (prev, cur) = (clip.frame(t - 1), clip.frame(t));
        for ch in 0..c {
            for p in 0..h * w {
                if prev[ch * h * w + p] != cur[ch * h * w + p] {
                    out[t * h * w + p] = true;
                }
            }
        }
    }
    out
}

#[test]
fn motion_mask_equals_frame_differencing() {
    for (seed, velocity) in [(0, (1, 0)), (1, (0, -2)), (2, (3, 1)), (3, (0, 0))] {
        let spec = SquareSpec::new(32, 32, 12, 6, velocity, seed);
        let (clip, mask) = gen_moving_square(&spec).unwrap();
        assert_eq!(mask.bits, differencing(&clip), "velocity {velocity:?}");
        assert!(mask.frame(0).iter().all(|&b| !b));
        assert_eq!(mask.count() == 0, velocity == (0, 0));
    }
}

#[test]
fn horizontal_motion_touches_only_the_square_rows() {
    let spec = SquareSpec { start: Some((4, 10)), ..SquareSpec::new(32, 32, 6, 6, (1, 0), 5) };
    let (_, mask) = gen_moving_square(&spec).unwrap();
    for t in 1..6 {
        for y in 0..32 {
            let any = (0..32).any(|x| mask.get(t, y, x));
            assert!(!any || (10..16).contains(&y), "row {y} moved at frame {t}");
        }
        // leading and trailing columns always change against a textured backdrop
        let x0 = 4 + t - 1;
        assert!((10..16).all(|y| mask.get(t, y, x0) && mask.get(t, y, x0 + 6)));
    }
}

fn square_centroid(clip: &VideoClip, t: usize) -> (f64, f64) {
    let (h, w) = (clip.height, clip.width);
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if clip.pixel(t, 0, y, x) > 135 {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
    }
    (sx / n, sy / n)
}

#[test]
fn class_displacement_matches_label() {
    let spec = ClassClipSpec { max_speed: 2, frames: 8, ..ClassClipSpec::default() };
    let clips = motion_class_clips(40, &Direction::ALL, &spec, 4).unwrap();
    for (clip, label) in &clips {
        let (x0, y0) = square_centroid(clip, 0);
        let (x1, y1) = square_centroid(clip, clip.t_frames - 1);
        let (ux, uy) = Direction::ALL[*label].unit();
        let (dx, dy) = (x1 - x0, y1 - y0);
        assert_eq!(dx.signum() * (dx.abs() > 0.5) as i64 as f64, ux as f64, "label {label}");
        assert_eq!(dy.signum() * (dy.abs() > 0.5) as i64 as f64, uy as f64, "label {label}");
    }
}

#[test]
fn flat_background_is_uniform() {
    let spec = SquareSpec::new(16, 16, 2, 4, (0, 0), 1).with_background(Background::Flat(60));
    let (clip, _) = gen_moving_square(&spec).unwrap();
    let grey = clip.frame(0).iter().filter(|&&p| p == 60).count();
    assert_eq!(grey, 3 * (16 * 16 - 16));
}

#[test]
fn manifest_round_trip_with_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ClassClipSpec { frames: 8, ..ClassClipSpec::default() };
    let written = everest::videodata::gen_motion_class_dataset(dir.path(), 8, &Direction::ALL, &spec, 2).unwrap();
    let loaded = DatasetManifest::load(dir.path().join("manifest.json"), 1, 8).unwrap();
    assert_eq!(loaded.entries, written.entries);
    let labels: Vec<_> = loaded.entries.iter().map(|e| e.label.unwrap()).collect();
    assert_eq!(labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    let clip = loaded.load_clip(5).unwrap();
    assert_eq!(clip, load_clip(dir.path().join("clip_00005.evc")).unwrap());
    assert_eq!(loaded.num_classes(), Some(4));
}

#[test]
fn k400_stride_four() {
    assert_eq!(uniform_indices(64, 16, 4, 0).unwrap(), (0..16).map(|i| 4 * i).collect::<Vec<_>>());
}

#[test]
fn generators_are_pure() {
    let spec = ClassClipSpec::default();
    assert_eq!(motion_class_clips(8, &Direction::ALL, &spec, 7).unwrap(), motion_class_clips(8, &Direction::ALL, &spec, 7).unwrap());
}

proptest! {
    #[test]
    fn disk_round_trip(t in 1usize..5, c in 1usize..4, h in 1usize..10, w in 1usize..10, fill in any::<u64>()) {
        let pixels: Vec<u8> = (0..t * c * h * w).map(|i| (fill.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let clip = VideoClip::new(t, c, h, w, pixels).unwrap();
        prop_assert_eq!(&decode_clip(&encode_clip(&clip).unwrap()).unwrap(), &clip);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_clip(&clip, f.path()).unwrap();
        prop_assert_eq!(load_clip(f.path()).unwrap(), clip);
    }

    #[test]
    fn noise_free_mask_is_exact(vx in -3i64..=3, vy in -3i64..=3, seed in 0u64..1000) {
        let (clip, mask) = gen_moving_square(&SquareSpec::new(24, 24, 6, 5, (vx, vy), seed)).unwrap();
        prop_assert_eq!(mask.bits, differencing(&clip));
    }
}
