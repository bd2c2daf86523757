#![no_main]

use libfuzzer_sys::fuzz_target;
use recnet::model::ArchSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = s.parse::<ArchSpec>() {
        assert_eq!(spec.to_string().parse::<ArchSpec>().ok(), Some(spec));
    }
});
