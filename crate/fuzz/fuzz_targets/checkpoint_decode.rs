#![no_main]

use libfuzzer_sys::fuzz_target;
use sbnet::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = checkpoint::decode(data) {
        let bytes = checkpoint::encode(&tensors).expect("decoded tensors re-encode");
        let again = checkpoint::decode(&bytes).expect("re-encoded bytes decode");
        assert_eq!(again.len(), tensors.len());
        for ((na, ta), (nb, tb)) in tensors.iter().zip(&again) {
            assert_eq!(na, nb);
            assert_eq!(ta.dims(), tb.dims());
            assert!(ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
});
