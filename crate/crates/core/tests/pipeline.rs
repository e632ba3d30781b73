use std::fs;

use noisebench::corpus::{self, Miner, RevisionReader};
use noisebench::datasets::{self, LabeledDataset, LabeledExample, Task};
use noisebench::inject::{self, InjectionConfig};
use noisebench::metrics::{self, Condition, Prediction};
use noisebench::noisedict::{word_pair_filter, FrozenNoiseDictionary, NoiseDictionaryBuilder};
use noisebench::Lang;

fn en() -> Lang {
    Lang::parse("en").unwrap()
}

const REVISIONS: &str = r#"{"old": "Show me teh flights to Boston. It is late.", "new": "Show me the flights to Boston. It is late.", "lang": "en"}
{"old": "I want teh fare form Denver.", "new": "I want the fare from Denver.", "lang": "en"}
not json
{"old": "List flihgts to Dallas please.", "new": "List flights to Dallas please.", "lang": "en"}
"#;

fn dataset() -> LabeledDataset {
    let rows = [
        ("a", "show me the flights to boston", "O O O O O B-city"),
        ("b", "the fare from denver", "O O O B-city"),
        ("c", "list flights to dallas", "O O O B-city"),
    ];
    let examples = rows
        .iter()
        .map(|(id, t, l)| LabeledExample {
            id: id.to_string(),
            lang: en(),
            tokens: t.split(' ').map(String::from).collect(),
            slot_labels: l.split(' ').map(String::from).collect(),
            utterance_label: Some("flight".into()),
        })
        .collect();
    LabeledDataset::new(Task::IcSl, Some(en()), examples).unwrap()
}

#[test]
fn mine_build_inject_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let rev_path = dir.path().join("rev.jsonl");
    fs::write(&rev_path, REVISIONS).unwrap();

    let mut reader = RevisionReader::open(&rev_path, Vec::<String>::new()).unwrap();
    let revisions: Vec<_> = reader.by_ref().collect::<Result<_, _>>().unwrap();
    assert_eq!(revisions.len(), 3);
    assert_eq!(reader.warnings().len(), 1);
    assert_eq!(reader.warnings()[0].line, 3);

    let (deltas, stats) = Miner::default().mine(&revisions);
    assert_eq!(stats.revisions, 3);
    let pairs: Vec<(&str, &str)> = deltas.iter().map(|d| (d.original.as_str(), d.edited.as_str())).collect();
    assert_eq!(pairs, [("teh", "the"), ("teh", "the"), ("form", "from"), ("flihgts", "flights")]);

    let delta_path = dir.path().join("deltas.tsv");
    corpus::write_deltas(&delta_path, &deltas).unwrap();
    assert_eq!(corpus::read_deltas(&delta_path).unwrap(), deltas);

    let mut builder = NoiseDictionaryBuilder::new(en());
    for d in deltas.iter().filter(|d| word_pair_filter(d).is_accept()) {
        builder.add_delta(d).unwrap();
    }
    let dict = builder.freeze().unwrap();
    let dict_path = dir.path().join("dict.json");
    dict.save(&dict_path).unwrap();
    let dict = FrozenNoiseDictionary::load(&dict_path).unwrap();
    assert_eq!(dict.lookup("the").unwrap().1, &[("teh".to_string(), 1.0)]);
    assert_eq!(dict.lookup("The").unwrap().0, "the");

    let data = dataset();
    let cfg = InjectionConfig::new(0.5, 4).unwrap();
    let (noised, log) = inject::inject_dataset(&data, &dict, &cfg).unwrap();
    assert!(!log.is_empty());
    for (clean, dirty) in data.examples.iter().zip(&noised.examples) {
        assert_eq!(clean.slot_labels, dirty.slot_labels);
        assert_eq!(clean.tokens.len(), dirty.tokens.len());
    }
    for row in &log {
        let ex = noised.examples.iter().find(|e| e.id == row.example_id).unwrap();
        assert_eq!(ex.tokens[row.position], row.replacement);
    }

    // A perfect tagger scores 100 on clean and noisy text alike.
    let gold: Vec<Prediction> = data
        .examples
        .iter()
        .map(|e| Prediction {
            example_id: e.id.clone(),
            predicted_slot_labels: Some(e.slot_labels.clone()),
            predicted_utterance_label: e.utterance_label.clone(),
        })
        .collect();
    let clean = metrics::evaluate_labeled(&data, &gold, Condition::Clean, Some(4)).unwrap();
    let noisy = metrics::evaluate_labeled(&noised, &gold, Condition::Noisy, Some(4)).unwrap();
    assert!(metrics::disparity(&clean, &noisy).unwrap().values().all(|v| *v == 0.0));
}

#[test]
fn injection_does_not_depend_on_dataset_order() {
    let mut b = NoiseDictionaryBuilder::new(en());
    b.add_count("the", "teh", 3).unwrap();
    b.add_count("the", "th", 1).unwrap();
    b.add_count("flights", "flihgts", 1).unwrap();
    let dict = b.freeze().unwrap();
    let data = dataset();
    let mut reversed = data.clone();
    reversed.examples.reverse();
    let cfg = InjectionConfig::new(0.5, 99).unwrap();
    let (a, _) = inject::inject_dataset(&data, &dict, &cfg).unwrap();
    let (mut r, _) = inject::inject_dataset(&reversed, &dict, &cfg).unwrap();
    r.examples.reverse();
    assert_eq!(a, r);
}

#[test]
fn conll_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.conll");
    let data = dataset();
    datasets::write_conll(&data, &path).unwrap();
    assert_eq!(datasets::conll_header_task(&path).unwrap(), Some(Task::IcSl));
    assert_eq!(datasets::read_conll(&path, Task::IcSl).unwrap(), data);
}

#[test]
fn dictionary_language_must_match_dataset() {
    let mut b = NoiseDictionaryBuilder::new(Lang::parse("de").unwrap());
    b.add_pair("und", "udn").unwrap();
    let dict = b.freeze().unwrap();
    let cfg = InjectionConfig::new(0.1, 0).unwrap();
    assert!(inject::inject_dataset(&dataset(), &dict, &cfg).is_err());
}
