#![no_main]

use libfuzzer_sys::fuzz_target;
use recnet::data::{parse_records, DatasetKind};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_records(data, DatasetKind::Cifar10) {
        assert_eq!(ds.to_bytes(), data);
    }
});
