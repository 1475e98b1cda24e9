//! Round-trip properties of the three on-disk formats.

use evdeblur_core::autodiff::{container, Tensor};
use evdeblur_core::events::{
    load_image_pnm, parse_event_csv, save_image_pnm, write_event_csv, Event, EventStream,
    ImagePlane,
};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn arb_stream() -> impl Strategy<Value = EventStream> {
    (1u32..20, 1u32..20, 0u64..500, 1u64..5000).prop_flat_map(|(w, h, t0, span)| {
        let event = (t0..=t0 + span, 0..w, 0..h, prop::bool::ANY).prop_map(
            move |(t, x, y, pos)| Event {
                t,
                x,
                y,
                p: if pos { 1 } else { -1 },
            },
        );
        prop::collection::vec(event, 0..64).prop_map(move |events| {
            EventStream::from_unsorted(events, w, h, t0, t0 + span).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn event_csv_round_trip(stream in arb_stream()) {
        let text = write_event_csv(&stream);
        let parsed = parse_event_csv(&text).unwrap();
        prop_assert_eq!(parsed, stream);
    }
}

fn arb_image() -> impl Strategy<Value = ImagePlane> {
    (1usize..12, 1usize..12, prop::sample::select(vec![1usize, 3])).prop_flat_map(
        |(h, w, c)| {
            prop::collection::vec(0u8..=255, h * w * c).prop_map(move |bytes| {
                let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
                ImagePlane::new(h, w, c, data).unwrap()
            })
        },
    )
}

proptest! {
    #[test]
    fn pnm_round_trip_is_byte_identical(img in arb_image()) {
        let bytes = save_image_pnm(&img);
        let loaded = load_image_pnm(&bytes).unwrap();
        prop_assert_eq!(&loaded, &img);
        prop_assert_eq!(save_image_pnm(&loaded), bytes);
    }
}

fn arb_tensor_map() -> impl Strategy<Value = BTreeMap<String, Tensor>> {
    let name = "[a-z][a-z0-9._]{0,12}";
    let tensor = prop::collection::vec(-1000i32..1000, 1..16).prop_map(|vals| {
        // f32-exact values so the on-disk narrowing is lossless.
        let data: Vec<f64> = vals.iter().map(|&v| v as f64 / 16.0).collect();
        Tensor::new(vec![data.len()], data)
    });
    prop::collection::btree_map(name, tensor, 0..6)
}

proptest! {
    #[test]
    fn container_round_trip(map in arb_tensor_map()) {
        let bytes = container::save_tensors(&map).unwrap();
        let loaded = container::load_tensors(&bytes).unwrap();
        prop_assert_eq!(loaded, map);
    }

    #[test]
    fn container_rejects_any_truncation(map in arb_tensor_map(), cut in 0usize..64) {
        let bytes = container::save_tensors(&map).unwrap();
        // Any strict prefix must fail to parse, never panic.
        let len = bytes.len().saturating_sub(1 + cut % bytes.len().max(1));
        prop_assert!(container::load_tensors(&bytes[..len]).is_err());
    }
}

#[test]
fn parser_rejects_out_of_bounds_and_window() {
    let bad_x = "# sensor 4x4 window 0 100\n10,4,0,1\n";
    assert!(parse_event_csv(bad_x).is_err());
    let bad_t = "# sensor 4x4 window 50 100\n10,0,0,1\n";
    assert!(parse_event_csv(bad_t).is_err());
}
