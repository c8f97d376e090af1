#![no_main]

use arzdelay::io::output::{read_norms, write_norms};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(rows) = read_norms(data) else { return };
    let mut buf = Vec::new();
    write_norms(&mut buf, &rows).expect("writing parsed rows");
    let again = read_norms(buf.as_slice()).expect("re-reading written rows");
    assert_eq!(rows.len(), again.len());
    for (a, b) in rows.iter().zip(&again) {
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
});
