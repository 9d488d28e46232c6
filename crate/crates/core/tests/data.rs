use noisy_lstm::data::{
    apply_augmentation, augment_sequence, frame_indices, generate_clips, generate_dataset, load_dataset, sample_sequence,
    save_dataset, valid_targets, AugmentConfig, Augmentation, GenConfig, Image, VideoClip,
};
use noisy_lstm::ops::IGNORE_INDEX;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> GenConfig {
    GenConfig { train_clips: 4, val_clips: 2, noise_pool: 3, clip_len: 12, ..GenConfig::default() }
}

#[test]
fn generation_is_deterministic_and_fully_labeled() {
    let cfg = small_config();
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.train.len(), a.val.len(), a.noise_pool.len()), (4, 2, 3));
    for clip in a.train.iter().chain(&a.val) {
        assert_eq!(clip.frames.len(), clip.labels.len());
        assert!((2..=4).contains(&clip.shapes.len()));
        for label in &clip.labels {
            let hist = label.histogram();
            assert_eq!(hist.iter().sum::<usize>(), cfg.height * cfg.width);
            assert_eq!(hist[cfg.classes..].iter().sum::<usize>(), 0);
        }
    }
    let other = generate_dataset(&GenConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a.train[0].frames, other.train[0].frames);
}

#[test]
fn dataset_round_trips_through_disk() {
    let ds = generate_dataset(&small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

/// Closed-form bounce: unfold the straight-line motion, then fold it back
/// into `[lo, hi]` with a triangle wave.
fn analytic_position(start: f64, velocity: f64, t: usize, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let r = (start + velocity * t as f64 - lo).rem_euclid(2.0 * span);
    lo + if r <= span { r } else { 2.0 * span - r }
}

#[test]
fn shape_motion_matches_the_analytic_tracker() {
    let cfg = GenConfig { jump_prob: 0.0, clip_len: 60, ..small_config() };
    for clip in generate_clips(&cfg, false, 6) {
        for track in &clip.shapes {
            assert!(track.jumps.is_empty());
            let speed = track.velocity[0].hypot(track.velocity[1]);
            assert!((cfg.speed_min..=cfg.speed_max).contains(&speed));
            for axis in 0..2 {
                let extent = if axis == 0 { cfg.width } else { cfg.height } as f64;
                let (lo, hi) = (track.size, extent - track.size);
                // The stored velocity is the final one, so the starting direction is either sign.
                let fits = |v: f64| {
                    track.centers.iter().enumerate().all(|(t, c)| (c[axis] - analytic_position(track.centers[0][axis], v, t, lo, hi)).abs() < 1e-9)
                };
                let v = track.velocity[axis];
                assert!(fits(v) || fits(-v), "clip {} axis {axis} leaves the analytic path", clip.id);
            }
            for pair in track.centers.windows(2) {
                let step = (pair[1][0] - pair[0][0]).hypot(pair[1][1] - pair[0][1]);
                assert!(step <= speed + 1e-9);
            }
        }
    }
}

#[test]
fn jumps_move_four_times_as_far() {
    let cfg = GenConfig { jump_prob: 0.3, clip_len: 30, ..small_config() };
    let clips = generate_clips(&cfg, false, 4);
    let mut seen = 0;
    for track in clips.iter().flat_map(|c| &c.shapes) {
        let speed = track.velocity[0].hypot(track.velocity[1]);
        let (lo, hi) = (track.size + 4.0 * speed, cfg.width as f64 - track.size - 4.0 * speed);
        for &t in &track.jumps {
            let (a, b) = (track.centers[t], track.centers[t + 1]);
            // Only jumps far from every wall move in a straight line.
            if [a[0], a[1]].iter().all(|&x| x > lo && x < hi) {
                let step = (b[0] - a[0]).hypot(b[1] - a[1]);
                assert!((step - 4.0 * speed).abs() < 1e-9);
                seen += 1;
            }
        }
    }
    assert!(seen > 0);
}

fn clip() -> VideoClip {
    generate_clips(&GenConfig { clip_len: 20, ..small_config() }, true, 1).remove(0)
}

#[test]
fn sequence_indices_follow_the_interval() {
    let c = clip();
    assert_eq!(frame_indices(10, 1, 4).unwrap(), vec![7, 8, 9, 10]);
    assert_eq!(frame_indices(15, 5, 4).unwrap(), vec![0, 5, 10, 15]);
    assert!(frame_indices(5, 2, 4).is_err());
    assert!(sample_sequence(&c, 5, 2, 4).is_err());
    let s = sample_sequence(&c, 15, 5, 4).unwrap();
    for (frame, idx) in s.frames.iter().zip([0, 5, 10, 15]) {
        assert_eq!(frame, &Image::from_rgb(&c.frames[idx]));
    }
    assert_eq!(s.target_label, c.labels[15]);
    assert_eq!((s.clip_id, s.target_index, s.interval), (c.id, 15, 5));
    assert_eq!(valid_targets(20, 5, 4), 15..20);
}

proptest! {
    #[test]
    fn indices_increase_with_constant_gap(k in 1usize..6, t in 1usize..6, extra in 0usize..20) {
        let target = (t - 1) * k + extra;
        let idx = frame_indices(target, k, t).unwrap();
        prop_assert_eq!(idx.len(), t);
        prop_assert_eq!(*idx.last().unwrap(), target);
        for w in idx.windows(2) {
            prop_assert_eq!(w[1] - w[0], k);
        }
    }

    #[test]
    fn ignore_pixels_are_exactly_out_of_canvas(seed in any::<u64>()) {
        let c = clip();
        let s = sample_sequence(&c, 10, 1, 4).unwrap();
        let cfg = AugmentConfig { crop: Some([48, 56]), ..AugmentConfig::default() };
        let out = augment_sequence(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let aug = out.augmentation.unwrap();
        for i in 0..48 {
            for j in 0..56 {
                let ignored = out.target_label.data[i * 56 + j] == IGNORE_INDEX;
                prop_assert_eq!(ignored, aug.nearest(i, j, 64, 64).is_none());
            }
        }
        // One transform, recorded once, reproduces every frame.
        for (orig, got) in s.frames.iter().zip(&out.frames) {
            prop_assert_eq!(&aug.apply_image(orig).unwrap(), got);
        }
        prop_assert_eq!(&aug.apply_label(&s.target_label).unwrap(), &out.target_label);
    }
}

#[test]
fn flip_is_an_involution() {
    let s = sample_sequence(&clip(), 8, 2, 4).unwrap();
    let flip = Augmentation { flip: true, ..Augmentation::identity(64, 64) };
    let once = apply_augmentation(&s, &flip).unwrap();
    for (a, b) in s.frames.iter().zip(&once.frames) {
        assert_ne!(a, b);
    }
    let twice = apply_augmentation(&once, &flip).unwrap();
    assert_eq!(twice.frames, s.frames);
    assert_eq!(twice.target_label, s.target_label);
}

#[test]
fn unrotated_crop_is_the_identity_on_its_region() {
    let s = sample_sequence(&clip(), 8, 1, 4).unwrap();
    let aug = Augmentation { angle_deg: 0.0, flip: false, crop_origin: [8, 4], crop_size: [48, 56] };
    let out = apply_augmentation(&s, &aug).unwrap();
    for (orig, got) in s.frames.iter().zip(&out.frames) {
        for c in 0..3 {
            for i in 0..48 {
                for j in 0..56 {
                    assert_eq!(got.plane(c)[i * 56 + j], orig.plane(c)[(i + 8) * 64 + j + 4]);
                }
            }
        }
    }
    for i in 0..48 {
        for j in 0..56 {
            assert_eq!(out.target_label.data[i * 56 + j], s.target_label.data[(i + 8) * 64 + j + 4]);
        }
    }
}

/// Class of the topmost shape covering the point, from the analytic geometry.
fn analytic_class(clip: &VideoClip, t: usize, x: f64, y: f64) -> u8 {
    let mut class = 0;
    for s in &clip.shapes {
        let [cx, cy] = s.centers[t];
        if s.kind.contains(x - cx, y - cy, s.size) {
            class = s.class;
        }
    }
    class
}

#[test]
fn augmented_labels_agree_with_shape_interiors() {
    let cfg = GenConfig { occlusion_prob: 0.0, clip_len: 12, ..small_config() };
    let clips = generate_clips(&cfg, false, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut interior, mut agree) = (0usize, 0usize);
    for c in &clips {
        let s = sample_sequence(c, 11, 2, 4).unwrap();
        let out = augment_sequence(&s, &AugmentConfig::default(), &mut rng).unwrap();
        let aug = out.augmentation.unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let (sy, sx) = aug.source(i, j, 64, 64);
                let (x, y) = (sx + 0.5, sy + 0.5);
                let class = analytic_class(c, 11, x, y);
                let margin = [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)];
                if class == 0 || margin.iter().any(|(dx, dy)| analytic_class(c, 11, x + dx, y + dy) != class) {
                    continue;
                }
                interior += 1;
                agree += usize::from(out.target_label.data[i * 64 + j] == class);
            }
        }
    }
    assert!(interior > 1000);
    assert!(agree as f64 >= 0.99 * interior as f64, "{agree} of {interior}");
}
