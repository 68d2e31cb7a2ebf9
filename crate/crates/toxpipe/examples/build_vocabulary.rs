//! Vocabulary construction, pretrained-vector loading and fixed-length
//! encoding with attention masks.
//!
//! Run with `cargo run --example build_vocabulary`.

use toxpipe::preprocess::{clean, CleaningConfig};
use toxpipe::vocab::{encode, load_embeddings_reader, RowProvenance, Vocabulary};

fn main() {
    let cleaning = CleaningConfig::bundled();
    let train_docs = [
        "the venom spreads fast through this venom thread",
        "gardens and rivers and gardens again",
        "venom rivers gardens once more",
    ];
    let tokens: Vec<_> = train_docs.iter().map(|d| clean(d, &cleaning)).collect();

    let vocab = Vocabulary::build(&tokens, 1, 50).unwrap();
    println!(
        "vocabulary ({} ids, digest {}):",
        vocab.size(),
        vocab.digest()
    );
    for id in 0..vocab.size() as u32 {
        println!("  {id} -> {:?}", vocab.token(id).unwrap());
    }

    // A tiny three-dimensional vector file; "venom" is covered, the rest
    // fall back to seeded random rows. The PAD row stays zero.
    let vector_file = "venom 0.9 -0.3 0.1\nunrelated 1.0 1.0 1.0\n";
    let matrix = load_embeddings_reader(vector_file.as_bytes(), &vocab, 3, 42, "inline").unwrap();
    println!(
        "\nembeddings: dim {}, coverage {:.0}%",
        matrix.dim,
        matrix.coverage() * 100.0
    );
    for id in 0..vocab.size() as u32 {
        let kind = match matrix.provenance(id) {
            RowProvenance::Pretrained => "pretrained",
            RowProvenance::Initialized => "initialized",
        };
        println!(
            "  {:10} {kind:12} {:?}",
            vocab.token(id).unwrap(),
            matrix.row(id)
        );
    }

    let doc = clean("venom gardens overflow with unknown slang", &cleaning);
    let encoded = encode(&doc, &vocab, 8, 1);
    println!("\nencoded {:?}:", doc.tokens);
    println!("  ids  {:?}", encoded.ids);
    println!("  mask {:?}", encoded.mask);
}
