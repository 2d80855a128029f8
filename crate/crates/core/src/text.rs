//! Tokenization shared by the policy and the metrics.
//!
//! Text is lowercased, ASCII punctuation is removed, and the remainder is
//! split on whitespace.

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Canonical text form: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Token-level Levenshtein distance.
pub fn edit_distance<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta.as_ref() != tb.as_ref());
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_strips_punctuation() {
        assert_eq!(
            tokenize("Yes, there is an Effusion."),
            vec!["yes", "there", "is", "an", "effusion"]
        );
        assert_eq!(tokenize("  \t "), Vec::<String>::new());
        assert_eq!(tokenize("left-sided"), vec!["leftsided"]);
    }

    #[test]
    fn edit_distance_cases() {
        let t = |s: &str| tokenize(s);
        assert_eq!(edit_distance(&t("a b c"), &t("a b c")), 0);
        assert_eq!(edit_distance(&t("yes"), &t("no")), 1);
        assert_eq!(edit_distance(&t("a b c"), &t("a c")), 1);
        assert_eq!(edit_distance(&t(""), &t("a b")), 2);
    }
}
