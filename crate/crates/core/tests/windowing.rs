use std::collections::{BTreeSet, HashMap};

use lam_core::annotations::{dataset_stats, group_tracks, AnnotationRecord, BBox};
use lam_core::image::Image;
use lam_core::windowing::{
    build_window, crop_and_resize, materialize_window, select_centers, windows_for_tracks, FrameSlot, MemoryFrameStore,
    SamplingSpec,
};
use proptest::prelude::*;

fn record(clip: &str, face: &str, frame_index: u32, label: u8) -> AnnotationRecord {
    AnnotationRecord {
        clip_id: clip.into(),
        face_id: face.into(),
        frame_index,
        bbox: BBox::new(1.0, 2.0, 10.0, 12.0),
        label,
    }
}

/// Random records with unique keys: (clip, face, frame, label).
fn records_strategy(max: usize) -> impl Strategy<Value = Vec<AnnotationRecord>> {
    prop::collection::btree_set((0u8..4, 0u8..3, 0u32..60), 1..max)
        .prop_flat_map(|keys| {
            let n = keys.len();
            (Just(keys), prop::collection::vec(0u8..2, n))
        })
        .prop_map(|(keys, labels)| {
            keys.into_iter()
                .zip(labels)
                .map(|((c, f, fr), l)| record(&format!("clip{c}"), &format!("face{f}"), fr, l))
                .collect::<Vec<_>>()
        })
        .prop_shuffle()
}

proptest! {
    #[test]
    fn grouping_matches_hash_partition(records in records_strategy(500)) {
        let mut oracle: HashMap<(String, String), Vec<(u32, u8)>> = HashMap::new();
        for r in &records {
            oracle.entry((r.clip_id.clone(), r.face_id.clone())).or_default().push((r.frame_index, r.label));
        }
        let tracks = group_tracks(records.clone());
        prop_assert_eq!(tracks.len(), oracle.len());
        for t in &tracks {
            let mut want = oracle[&(t.clip_id.clone(), t.face_id.clone())].clone();
            want.sort();
            let got: Vec<(u32, u8)> = t.records.iter().map(|r| (r.frame_index, r.label)).collect();
            prop_assert_eq!(got, want);
        }
        let stats = dataset_stats(&tracks).unwrap();
        let n_pos = records.iter().filter(|r| r.label == 1).count();
        prop_assert_eq!(stats.n_positive, n_pos);
        prop_assert_eq!(stats.n_negative, records.len() - n_pos);
        let clips: BTreeSet<_> = records.iter().map(|r| r.clip_id.clone()).collect();
        prop_assert_eq!(stats.n_clips, clips.len());
        if n_pos > 0 {
            prop_assert_eq!(stats.ratio_neg_to_pos, Some((records.len() - n_pos) as f64 / n_pos as f64));
        }
    }

    #[test]
    fn windows_match_brute_force_scan(records in records_strategy(200), stride in 1usize..6) {
        let spec = SamplingSpec::new(stride, 3, 8).unwrap();
        let tracks = group_tracks(records);
        for t in &tracks {
            let existing: BTreeSet<u32> = t.records.iter().map(|r| r.frame_index).collect();
            let positions: Vec<u32> = existing.iter().copied().collect();
            let want_centers: Vec<u32> = (0..positions.len()).filter(|p| p % stride == 0).map(|p| positions[p]).collect();
            let centers = select_centers(t, &spec);
            prop_assert_eq!(&centers, &want_centers);
            for &c in &centers {
                let w = build_window(t, c, &spec).unwrap();
                prop_assert_eq!(w.slots.len(), 7);
                for (k, slot) in w.slots.iter().enumerate() {
                    let idx = c as i64 + k as i64 - 3;
                    let present = idx >= 0 && existing.contains(&(idx as u32));
                    match slot {
                        FrameSlot::Frame { frame_index, .. } => {
                            prop_assert!(present);
                            prop_assert_eq!(*frame_index as i64, idx);
                        }
                        FrameSlot::Blank => prop_assert!(!present),
                    }
                }
                prop_assert!(!w.slots[3].is_blank());
                let idx: Vec<u32> = w.slots.iter().filter_map(|s| s.frame_index()).collect();
                prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
                prop_assert_eq!(w.label, t.record(c).unwrap().label);
            }
            for missing in 0..70u32 {
                if !existing.contains(&missing) {
                    prop_assert!(build_window(t, missing, &spec).is_err());
                }
            }
        }
    }

    #[test]
    fn stride_one_gives_one_window_per_record(records in records_strategy(200)) {
        let n = records.len();
        let tracks = group_tracks(records);
        let windows = windows_for_tracks(&tracks, &SamplingSpec::new(1, 3, 8).unwrap());
        prop_assert_eq!(windows.len(), n);
        let keys: BTreeSet<_> = windows.iter().map(|w| (w.clip_id.clone(), w.face_id.clone(), w.center_frame_index)).collect();
        prop_assert_eq!(keys.len(), n);
    }
}

fn gradient_image(h: usize, w: usize, salt: f32) -> Image {
    let mut img = Image::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            img.set_pixel(i, j, [i as f32 / h as f32, j as f32 / w as f32, salt]);
        }
    }
    img
}

#[test]
fn materialized_window_matches_per_frame_crops() {
    let mut store = MemoryFrameStore::new();
    let mut recs = Vec::new();
    for f in [0u32, 1, 2, 4, 5] {
        store.insert("c", f, gradient_image(20, 24, 0.1 * f as f32 + 0.1));
        let mut r = record("c", "f", f, 1);
        r.bbox = BBox::new(2.0 + f as f64, 3.0, 12.0, 10.0);
        recs.push(r);
    }
    let tracks = group_tracks(recs);
    let spec = SamplingSpec::new(1, 3, 8).unwrap();
    let w = build_window(&tracks[0], 2, &spec).unwrap();
    let tensor = materialize_window(&w, &store, &spec).unwrap();
    assert_eq!((tensor.frames, tensor.height, tensor.width), (7, 8, 8));
    for (t, slot) in w.slots.iter().enumerate() {
        let got = tensor.frame(t);
        match slot {
            FrameSlot::Blank => assert!(got.data.iter().all(|&v| v == 0.0), "slot {t}"),
            FrameSlot::Frame { frame_index, bbox } => {
                let src = gradient_image(20, 24, 0.1 * *frame_index as f32 + 0.1);
                assert_eq!(got, crop_and_resize(&src, bbox, 8).unwrap());
            }
        }
    }
    // frame -1 and the gap at 3 are blank
    let blanks: Vec<bool> = w.slots.iter().map(|s| s.is_blank()).collect();
    assert_eq!(blanks, [true, false, false, false, true, false, false]);
}

#[test]
fn missing_frame_is_reported() {
    let store = MemoryFrameStore::new();
    let tracks = group_tracks(vec![record("c", "f", 0, 0)]);
    let spec = SamplingSpec::new(1, 3, 8).unwrap();
    let w = build_window(&tracks[0], 0, &spec).unwrap();
    let err = materialize_window(&w, &store, &spec).unwrap_err().to_string();
    assert!(err.contains("c/000000.png"), "{err}");
}
