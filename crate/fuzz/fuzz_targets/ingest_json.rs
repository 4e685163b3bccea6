#![no_main]

use libfuzzer_sys::fuzz_target;
use stancevote::corpus::{ingest_reader, ColumnMap, DatasetSpec, SourceFormat};
use stancevote::Mode;

fuzz_target!(|data: &[u8]| {
    for pointer in [None, Some("/records".to_string())] {
        let format = SourceFormat::Json { records_pointer: pointer };
        let mut spec = DatasetSpec::new("fuzz", Mode::TwoClass, "fuzz.json", format);
        spec.columns = Some(ColumnMap {
            id: Some("/id".into()),
            topic: None,
            text: "/premises/0/text".into(),
            thesis: Some("/conclusion".into()),
            gold: "/premises/0/stance".into(),
        });
        let _ = ingest_reader(&spec, data);
    }
    let canonical = DatasetSpec::new("fuzz", Mode::ThreeClass, "fuzz.jsonl", SourceFormat::Canonical);
    let _ = ingest_reader(&canonical, data);
});
