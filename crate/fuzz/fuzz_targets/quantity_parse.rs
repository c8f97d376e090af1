#![no_main]

use arzdelay::io::units::{parse_quantity, Dimension};
use libfuzzer_sys::fuzz_target;

const DIMENSIONS: [Dimension; 7] = [
    Dimension::Length,
    Dimension::Time,
    Dimension::Speed,
    Dimension::Density,
    Dimension::Flow,
    Dimension::Rate,
    Dimension::Ratio,
];

fuzz_target!(|data: &[u8]| {
    let Some((&pick, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let dim = DIMENSIONS[pick as usize % DIMENSIONS.len()];
    if let Ok(v) = parse_quantity(text, dim) {
        assert!(v.is_finite(), "{text:?} parsed to {v}");
    }
});
