#![no_main]
use isoformer::analysis::{annotate_regions, parse_region_table, region_table_text};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(rows) = parse_region_table(text) {
        assert_eq!(parse_region_table(&region_table_text(&rows)).unwrap(), rows);
        if let Some(first) = rows.first() {
            for k in 1..4 {
                let _ = annotate_regions(&first.transcript_id, 64, k, &rows);
            }
        }
    }
});
