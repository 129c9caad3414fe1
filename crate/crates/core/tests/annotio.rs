mod common;

use noisy_adapt::annotio::{corrupt_annotations, parse_voc, voc_universe, write_voc, VocDoc};
use noisy_adapt::rng::stream;
use noisy_adapt::Error;

fn fixtures(count: usize, objects: impl Fn(usize) -> usize) -> Vec<String> {
    let mut rng = stream(99, 0, 0);
    (0..count).map(|i| common::voc_fixture(&mut rng, i, objects(i))).collect()
}

#[test]
fn parse_write_parse_is_identity_on_generated_fixtures() {
    for text in fixtures(20, |i| i % 6) {
        let doc = parse_voc(&text).unwrap();
        let canonical = write_voc(&doc);
        let again = parse_voc(&canonical).unwrap();
        assert_eq!(again, doc);
        assert_eq!(write_voc(&again), canonical);
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect()
}

#[test]
fn canonical_text_survives_a_round_trip_modulo_whitespace() {
    let canonical = write_voc(&parse_voc(&fixtures(1, |_| 3)[0]).unwrap());
    let reindented = canonical.replace("  ", "\t").replace('\n', "\n ");
    assert_eq!(normalize(&write_voc(&parse_voc(&reindented).unwrap())), normalize(&canonical));
}

#[test]
fn single_object_golden() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");
    let doc = parse_voc(&std::fs::read_to_string(format!("{dir}/single_object.xml")).unwrap()).unwrap();
    let golden = std::fs::read_to_string(format!("{dir}/single_object_rate1_seed7.xml")).unwrap();
    let (out, log) = corrupt_annotations(&[doc], &voc_universe(), 1.0, 7).unwrap();
    assert_eq!(write_voc(&out[0]), golden);
    assert_eq!(log.changes.len(), 1);
    assert_eq!(log.changes[0].old_label, "chair");
}

#[test]
fn hundred_objects_at_twenty_percent() {
    let docs: Vec<VocDoc> = fixtures(20, |_| 5).iter().map(|t| parse_voc(t).unwrap()).collect();
    assert_eq!(docs.iter().map(|d| d.objects.len()).sum::<usize>(), 100);
    let (out, log) = corrupt_annotations(&docs, &voc_universe(), 0.2, 5).unwrap();
    assert_eq!(log.changes.len(), 20);
    let (mut renamed, mut removed) = (0, 0);
    for (a, b) in docs.iter().zip(&out) {
        let (r, m) = common::name_and_removal_diff(&write_voc(a), &write_voc(b)).unwrap();
        renamed += r;
        removed += m;
    }
    assert_eq!(renamed + removed, 20);
    assert_eq!(removed, log.changes.iter().filter(|c| c.new_label.is_none()).count());
}

#[test]
fn difficult_objects_are_corrupted_too() {
    let docs: Vec<VocDoc> = fixtures(40, |_| 5).iter().map(|t| parse_voc(t).unwrap()).collect();
    let (_, log) = corrupt_annotations(&docs, &voc_universe(), 1.0, 1).unwrap();
    let difficult: usize = docs.iter().flat_map(|d| &d.objects).filter(|o| o.difficult).count();
    assert!(difficult > 0);
    assert_eq!(log.changes.len(), 200);
}

#[test]
fn unknown_category_is_rejected_with_names() {
    let mut doc = parse_voc(&fixtures(1, |_| 2)[0]).unwrap();
    doc.objects[1].name = "giraffe".into();
    let err = corrupt_annotations(&[doc], &voc_universe(), 0.5, 0).unwrap_err();
    assert!(matches!(&err, Error::InvalidInput(m) if m.contains("giraffe")));
}
