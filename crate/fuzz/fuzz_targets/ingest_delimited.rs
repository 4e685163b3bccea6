#![no_main]

use libfuzzer_sys::fuzz_target;
use stancevote::corpus::{ingest_reader, ColumnMap, DatasetSpec, SourceFormat};
use stancevote::Mode;

fuzz_target!(|data: &[u8]| {
    for quoting in [false, true] {
        let format = SourceFormat::Delimited { delimiter: '\t', has_header: true, quoting };
        let mut spec = DatasetSpec::new("fuzz", Mode::ThreeClass, "fuzz.tsv", format);
        spec.columns = Some(ColumnMap {
            id: Some("sentenceHash".into()),
            topic: Some("topic".into()),
            text: "sentence".into(),
            thesis: None,
            gold: "annotation".into(),
        });
        let _ = ingest_reader(&spec, data);
    }
});
