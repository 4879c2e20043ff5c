#![no_main]

use libfuzzer_sys::fuzz_target;
use sbnet::train::{parse_cifar, write_cifar, CifarVariant};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_cifar(data, CifarVariant::Cifar10) {
        assert_eq!(write_cifar(&ds, CifarVariant::Cifar10).expect("parsed set writes"), data);
    }
    let _ = parse_cifar(data, CifarVariant::Cifar100);
});
