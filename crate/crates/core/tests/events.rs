mod common;

use proptest::prelude::*;

use eventclip::events_io::{
    format_text_events, parse_dataset_binary, parse_text_events, reverse_time,
    serialize_dataset_binary, Event, EventStream, Manifest, Polarity, Split,
};
use eventclip::representation::{build_est, resize_tensor, EventTensor};
use eventclip::Error;

fn event() -> impl Strategy<Value = Event> {
    (0u16..64, 0u16..48, 0u64..(1 << 23), any::<bool>()).prop_map(|(x, y, t, on)| {
        Event::new(x, y, t, if on { Polarity::On } else { Polarity::Off })
    })
}

fn stream(max: usize) -> impl Strategy<Value = EventStream> {
    prop::collection::vec(event(), 1..max).prop_map(|e| EventStream::new(e, 64, 48).unwrap())
}

/// Per-event triangular deposit written out directly.
fn est_oracle(s: &EventStream, bins: usize) -> Vec<f64> {
    let (h, w) = (s.height() as usize, s.width() as usize);
    let mut out = vec![0.0; 2 * bins * h * w];
    let t0 = s.t_min() as f64;
    let span = (s.t_max() - s.t_min()) as f64;
    for e in s.events() {
        let ts = if span > 0.0 {
            (bins - 1) as f64 * (e.t as f64 - t0) / span
        } else {
            0.0
        };
        for b in 0..bins {
            let k = (1.0 - (ts - b as f64).abs()).max(0.0);
            let p = if e.p == Polarity::On { 1 } else { 0 };
            out[((p * bins + b) * h + e.y as usize) * w + e.x as usize] += k;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn binary_round_trip(s in stream(300)) {
        let bytes = serialize_dataset_binary(&s).unwrap();
        prop_assert_eq!(bytes.len(), 5 * s.len());
        let back = parse_dataset_binary(&bytes, 64, 48).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(serialize_dataset_binary(&back).unwrap(), bytes);
    }

    #[test]
    fn text_round_trip(s in stream(200)) {
        let back = parse_text_events(&format_text_events(&s), 64, 48).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn events_come_out_time_ordered(events in prop::collection::vec(event(), 1..200)) {
        let s = EventStream::new(events.clone(), 64, 48).unwrap();
        prop_assert!(s.events().windows(2).all(|w| w[0].t <= w[1].t));
        // stable: equal timestamps keep file order
        let mut expected = events;
        expected.sort_by_key(|e| e.t);
        prop_assert_eq!(s.events(), &expected[..]);
    }

    #[test]
    fn reversal_keeps_events_and_polarity(s in stream(200)) {
        let r = reverse_time(&s);
        prop_assert_eq!(r.len(), s.len());
        prop_assert!(r.events().windows(2).all(|w| w[0].t <= w[1].t));
        prop_assert_eq!(r.t_max() - r.t_min(), s.t_max() - s.t_min());
        let on = |s: &EventStream| s.events().iter().filter(|e| e.p == Polarity::On).count();
        prop_assert_eq!(on(&r), on(&s));
        let last = s.events()[s.len() - 1];
        let first = r.events()[0];
        prop_assert_eq!((first.x, first.y, first.p, first.t), (last.x, last.y, last.p, 0));
    }

    #[test]
    fn est_matches_kernel_oracle(s in stream(400), bins in 1usize..12) {
        let t = build_est(&s, bins, 48, 64).unwrap();
        let want = est_oracle(&s, bins);
        for (a, b) in t.data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!((t.sum() - s.len() as f64).abs() <= 1e-9 * s.len() as f64);
    }

    #[test]
    fn est_ignores_reversal_twice(s in stream(400), bins in 1usize..12) {
        let a = build_est(&s, bins, 48, 64).unwrap();
        let b = build_est(&reverse_time(&reverse_time(&s)), bins, 48, 64).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn resize_preserves_shape_and_dump_round_trips(s in stream(200), size in 4usize..40) {
        let t = build_est(&s, 3, 48, 64).unwrap();
        let r = resize_tensor(&t, size, size).unwrap();
        prop_assert_eq!((r.t_bins(), r.height(), r.width()), (3, size, size));
        // the dump stores f32 entries
        let back = EventTensor::from_dump_bytes(&r.to_dump_bytes()).unwrap();
        prop_assert_eq!((back.t_bins(), back.height(), back.width()), (3, size, size));
        prop_assert_eq!(back.source_events(), s.len());
        for (a, b) in back.data().iter().zip(r.data()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }
}

#[test]
fn worked_record() {
    let s = parse_dataset_binary(&[0x10, 0x20, 0x80, 0x00, 0x05], 64, 64).unwrap();
    let e = s.events()[0];
    assert_eq!((e.x, e.y, e.p, e.t), (16, 32, Polarity::On, 5));
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(matches!(
        parse_dataset_binary(&[1, 2, 3, 4], 64, 64),
        Err(Error::MalformedFile(_))
    ));
    assert!(parse_dataset_binary(&[70, 0, 0, 0, 1], 64, 64).is_err());
    assert!(parse_text_events("1 2 3\n", 8, 8).is_err());
    assert!(parse_text_events("1 2 3 7\n", 8, 8).is_err());
    let big = EventStream::new(vec![Event::new(0, 0, 1 << 23, Polarity::On)], 8, 8).unwrap();
    assert!(serialize_dataset_binary(&big).is_err());
    assert!(matches!(
        EventStream::new(vec![], 8, 8),
        Err(Error::EmptyStream)
    ));
}

#[test]
fn single_timestamp_goes_to_first_bin() {
    let s = EventStream::new(
        vec![
            Event::new(1, 1, 7, Polarity::On),
            Event::new(2, 1, 7, Polarity::Off),
        ],
        4,
        4,
    )
    .unwrap();
    let t = build_est(&s, 5, 4, 4).unwrap();
    assert_eq!(t.get(1, 0, 1, 1), 1.0);
    assert_eq!(t.get(0, 0, 1, 2), 1.0);
    assert_eq!(t.sum(), 2.0);
}

#[test]
fn manifest_round_trip() {
    let text = "relative_path,category_name,split\ntrain/a/0.bin,a,train\ntest/b/0.bin,b,test\n";
    let m = Manifest::parse(text, "/data").unwrap();
    assert_eq!(m.entries.len(), 2);
    assert_eq!(m.split(Split::Test).count(), 1);
    assert_eq!(m.categories(), vec!["a".to_string(), "b".to_string()]);
    let again = Manifest::parse(&m.to_csv(), "/data").unwrap();
    assert_eq!(again.entries, m.entries);
}
