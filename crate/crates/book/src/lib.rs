//! The guide in `book/`, one module per chapter, so `cargo test` runs its code blocks.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/sheaves.md")]
pub mod sheaves {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    #[test]
    fn every_chapter_is_compiled() {
        let summary = include_str!("../../../book/src/SUMMARY.md");
        let listed: BTreeSet<&str> = summary
            .lines()
            .filter_map(|l| l.split_once("](").map(|(_, rest)| rest.trim_end_matches(')')))
            .collect();
        let lib = include_str!("lib.rs");
        for chapter in &listed {
            assert!(lib.contains(&format!("book/src/{chapter}\")")), "{chapter} is not included");
        }
        assert_eq!(listed.len(), 6);
    }
}
