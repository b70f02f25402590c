#![no_main]

use libfuzzer_sys::fuzz_target;
use zslvit::data::{format_attributes, parse_attributes};
use zslvit::prototypes::PrototypeTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(classes) = parse_attributes(text, None) else { return };
    let Ok(table) = PrototypeTable::new(classes.clone()) else { return };
    let again = parse_attributes(&format_attributes(&table), None).expect("formatted table parses");
    assert_eq!(again, table.classes());
});
