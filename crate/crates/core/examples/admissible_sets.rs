//! Admissible loss words and bucket-admissible interval words.

use stmpc::controller::interval_words;
use stmpc::network::{enumerate_admissible, TokenBucketSpec};

fn main() {
    for r in 0..=2 {
        let set = enumerate_admissible(3, 2, r).unwrap();
        let words: Vec<String> = set.words.iter().map(|w| w.to_string()).collect();
        println!("N=3 P=2 r={r}: {} words", set.len());
        println!("  {}", words.join(" "));
    }
    let set = enumerate_admissible(6, 2, 0).unwrap();
    println!("N=6 P=2 r=0: {} scenarios", set.len());

    let spec = TokenBucketSpec::new(1, 3, 14).unwrap();
    println!("bucket g={} c={} b={} base period M={}", spec.g, spec.c, spec.b, spec.base_period());
    for beta in [2, 8, 14] {
        let words = interval_words(beta, 6, 5, &spec);
        println!(
            "beta0={beta:2}: {:5} interval words, first {:?}, last {:?}",
            words.len(),
            words.first(),
            words.last()
        );
    }
}
