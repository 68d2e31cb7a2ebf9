//! Text cleaning walkthrough: the fixed rule sequence, stop-word removal
//! and the noun-plural lemmatizer.
//!
//! Run with `cargo run --example clean_text`.

use toxpipe::preprocess::{clean, lemmatize, length_histogram, CleaningConfig};

fn main() {
    let config = CleaningConfig::bundled();

    let samples = [
        "Check THIS out: https://t.co/x @user [link] &amp; I LOVE it!!!",
        "#StopHate now, please — these stories matter to the children",
        "visit www.example.com <b>bold</b> claims & nonsense",
        "@only_a_mention https://nothing.else/here",
    ];

    println!(
        "cleaning pipeline ({} stop words):\n",
        config.stopwords().len()
    );
    let mut cleaned = Vec::new();
    for text in samples {
        let tokens = clean(text, &config);
        println!("  {text:?}");
        println!("    -> {:?}\n", tokens.tokens);
        cleaned.push(tokens);
    }

    println!("lemmatizer:");
    for word in ["children", "stories", "glasses", "cats", "bus", "analysis"] {
        println!("  {word} -> {}", lemmatize(word, &config));
    }

    let histogram = length_histogram(&cleaned);
    println!("\ntoken-count histogram (length,count):");
    print!("{}", histogram.to_csv());
}
