//! The closed set of 96 Wikidata properties annotated in DocRED.
//!
//! Class index 0 is N/A; properties map to 1..=96 in ascending numeric order.

use std::collections::HashMap;
use std::sync::OnceLock;

pub const NUM_RELATIONS: usize = 96;
pub const NA_CLASS: usize = 0;
pub const NA_LABEL: &str = "NA";

const PROPERTY_IDS: [u32; NUM_RELATIONS] = [
    6, 17, 19, 20, 22, 25, 26, 27, 30, 31, 35, 36, 37, 39, 40, 50, 54, 57, 58, 69, 86, 102, 108,
    112, 118, 123, 127, 131, 136, 137, 140, 150, 155, 156, 159, 161, 162, 166, 170, 171, 172, 175,
    176, 178, 179, 190, 194, 205, 206, 241, 264, 272, 276, 279, 355, 361, 364, 400, 403, 449, 463,
    488, 495, 527, 551, 569, 570, 571, 576, 577, 580, 582, 585, 607, 674, 676, 706, 710, 737, 740,
    749, 800, 807, 840, 937, 1001, 1056, 1198, 1336, 1344, 1365, 1366, 1376, 1412, 1441, 3373,
];

fn table() -> &'static (Vec<String>, HashMap<String, usize>) {
    static TABLE: OnceLock<(Vec<String>, HashMap<String, usize>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut names = vec![NA_LABEL.to_string()];
        names.extend(PROPERTY_IDS.iter().map(|p| format!("P{p}")));
        let index = names
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, n)| (n.clone(), i))
            .collect();
        (names, index)
    })
}

/// Class index (1..=96) of a relation id such as `"P17"`.
pub fn class_of(relation: &str) -> Option<usize> {
    table().1.get(relation).copied()
}

/// Relation id of a class index; class 0 is `"NA"`.
pub fn relation_of(class: usize) -> Option<&'static str> {
    table().0.get(class).map(String::as_str)
}

/// All 96 relation ids in class order.
pub fn relation_ids() -> impl Iterator<Item = &'static str> {
    table().0[1..].iter().map(String::as_str)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ninety_six_distinct_dense_classes() {
        let ids: Vec<_> = relation_ids().collect();
        assert_eq!(ids.len(), 96);
        let mut sorted = PROPERTY_IDS.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), 96);
        for (i, id) in ids.iter().enumerate() {
            assert_eq!(class_of(id), Some(i + 1));
            assert_eq!(relation_of(i + 1), Some(*id));
        }
        assert_eq!(class_of("NA"), None);
        assert_eq!(class_of("P9999"), None);
        assert_eq!(relation_of(0), Some("NA"));
    }
}
