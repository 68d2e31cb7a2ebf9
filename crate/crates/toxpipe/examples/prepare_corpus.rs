//! Dataset preparation: schema parsing, label mapping, prefix subsetting
//! and the deterministic train/test split.
//!
//! Run with `cargo run --example prepare_corpus`.

use toxpipe::corpus::{class_balance, map_records, parse_csv_reader, split, take_prefix, Schema};

fn main() {
    // A Davidson-style file: class 0 hate, 1 offensive, 2 neither.
    let csv = "\
tweet,class
this venom ruins everything,0
what a lovely garden path,2
\"quoted, with a comma\",2
rude but not hateful words,1
pure venom again and again,0
rivers run calm tonight,2
more offensive filler,1
hate filled rant,0
";
    let parsed = parse_csv_reader(csv.as_bytes(), Schema::Davidson, "inline").unwrap();
    println!("parsed {} rows", parsed.records.len());

    let corpus = map_records(&parsed.records, Schema::Davidson, 0.5).unwrap();
    println!("kept {} after dropping the offensive class", corpus.len());
    for example in &corpus {
        println!("  label {} <- {:?}", example.label, example.text);
    }

    let balance = class_balance(&corpus).unwrap();
    println!(
        "\nbalance: {}/{} positive ({:.1}%)",
        balance.n_positive,
        balance.n_total,
        balance.positive_fraction * 100.0
    );

    let head = take_prefix(&corpus, 4);
    println!("first {} examples kept by take_prefix", head.len());

    let parts = split(&corpus, 0.34, 42).unwrap();
    println!(
        "split at ratio 0.34 with seed 42: {} train / {} test",
        parts.train.len(),
        parts.test.len()
    );
    let again = split(&corpus, 0.34, 42).unwrap();
    assert_eq!(parts, again);
    println!("same seed, same split: verified");
}
