#![no_main]

use libfuzzer_sys::fuzz_target;
use recnet::checkpoint::Checkpoint;

// Anything that decodes must encode back to the same bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode().expect("decoded checkpoint re-encodes");
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.tensors.len(), ck.tensors.len());
        for (a, b) in again.tensors.iter().zip(&ck.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(again.meta.tuple, ck.meta.tuple);
    }
});
