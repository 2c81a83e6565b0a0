#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(schema) = c3r::schema::parse_schema(text) {
            let again = c3r::schema::parse_schema(&schema.to_manifest()).expect("manifest round trip");
            assert_eq!(again, schema);
        }
    }
});
