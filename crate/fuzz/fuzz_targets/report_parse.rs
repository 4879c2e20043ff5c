#![no_main]

use libfuzzer_sys::fuzz_target;
use sbnet::analysis::{report_from_str, report_to_string, ReportFormat};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for format in [ReportFormat::Json, ReportFormat::Csv] {
        if let Ok(report) = report_from_str(text, format) {
            let _ = report_to_string(&report, format);
        }
    }
});
