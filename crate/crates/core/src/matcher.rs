//! Answer equivalence: the predicate behind every reward, vote, accuracy and
//! agreement computation.
//!
//! The default policy is normalized exact match plus a 5% relative numeric
//! tolerance. The tolerance check uses the larger magnitude of the two values
//! so that `matches` stays symmetric.

use serde::{Deserialize, Serialize};

const NUMERIC_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NumericMode {
    Off,
    Relative { tolerance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherPolicy {
    pub case_fold: bool,
    pub strip_punct_ws: bool,
    pub numeric_mode: NumericMode,
    /// Only has an effect when the caller passes choices.
    pub mc_letter_mode: bool,
}

impl Default for MatcherPolicy {
    fn default() -> Self {
        MatcherPolicy {
            case_fold: true,
            strip_punct_ws: true,
            numeric_mode: NumericMode::Relative { tolerance: 0.05 },
            mc_letter_mode: true,
        }
    }
}

impl MatcherPolicy {
    pub fn exact() -> Self {
        MatcherPolicy {
            numeric_mode: NumericMode::Off,
            ..Default::default()
        }
    }

    pub fn describe(&self) -> String {
        let numeric = match self.numeric_mode {
            NumericMode::Off => "off".to_string(),
            NumericMode::Relative { tolerance } => format!("relative {tolerance}"),
        };
        format!(
            "case_fold={} strip_punct_ws={} numeric={} mc_letter_mode={}",
            self.case_fold, self.strip_punct_ws, numeric, self.mc_letter_mode
        )
    }
}

/// A normalized answer. `number` is set when numeric mode is on and the
/// answer parsed as a finite number.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub text: String,
    pub number: Option<f64>,
}

pub fn normalize(raw: &str, policy: &MatcherPolicy, choices: Option<&[String]>) -> String {
    normalize_full(raw, policy, choices).text
}

pub fn normalize_full(raw: &str, policy: &MatcherPolicy, choices: Option<&[String]>) -> Normalized {
    let trimmed = raw.trim();
    let resolved = match choices {
        Some(ch) if policy.mc_letter_mode && !ch.is_empty() => {
            resolve_choice_letter(trimmed, policy, ch).unwrap_or(trimmed)
        }
        _ => trimmed,
    };
    base_normalize(resolved, policy)
}

fn base_normalize(s: &str, policy: &MatcherPolicy) -> Normalized {
    if let NumericMode::Relative { .. } = policy.numeric_mode {
        if let Some(x) = parse_number(s) {
            return Normalized {
                text: format!("{x}"),
                number: Some(x),
            };
        }
    }
    Normalized {
        text: fold_text(s, policy),
        number: None,
    }
}

fn fold_text(s: &str, policy: &MatcherPolicy) -> String {
    let folded = if policy.case_fold {
        s.to_lowercase()
    } else {
        s.to_string()
    };
    if !policy.strip_punct_ws {
        return folded.trim().to_string();
    }
    let chars: Vec<char> = folded.chars().collect();
    let mut kept = String::with_capacity(folded.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() || c.is_whitespace() {
            kept.push(c);
            continue;
        }
        // Punctuation survives only inside a token ("3.5", "e-mail").
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        if prev.is_some_and(char::is_alphanumeric) && next.is_some_and(char::is_alphanumeric) {
            kept.push(c);
        }
    }
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses chart/document style numbers: `$1,200`, `25%`, `3.5.`
pub fn parse_number(s: &str) -> Option<f64> {
    let mut t = s.trim();
    t = t.strip_suffix('.').unwrap_or(t).trim();
    t = t.strip_suffix('%').unwrap_or(t).trim();
    let (sign, body) = match t.strip_prefix('-') {
        Some(rest) => ("-", rest.trim_start()),
        None => ("", t),
    };
    let body = body.strip_prefix('$').unwrap_or(body);
    let cleaned: String = body.chars().filter(|&c| c != ',').collect();
    if cleaned.is_empty()
        || !cleaned.chars().next().is_some_and(|c| c.is_ascii_digit() || c == '.')
        || !cleaned
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-'))
    {
        return None;
    }
    let x: f64 = format!("{sign}{cleaned}").parse().ok()?;
    x.is_finite().then_some(x)
}

/// Resolves a bare choice letter such as `B`, `(B)` or `B.` to the text of
/// that choice. An answer that already equals some choice is left alone.
fn resolve_choice_letter<'a>(
    s: &str,
    policy: &MatcherPolicy,
    choices: &'a [String],
) -> Option<&'a str> {
    let own = base_normalize(s, policy).text;
    let letter = bare_letter(&own)?;
    let idx = (letter.to_ascii_uppercase() as u8 - b'A') as usize;
    let choice = choices.get(idx)?;
    if choices.iter().any(|c| base_normalize(c, policy).text == own) {
        return None;
    }
    Some(choice.as_str())
}

fn bare_letter(s: &str) -> Option<char> {
    let inner = s.strip_prefix('(').map_or(s, |r| r.strip_suffix(')').unwrap_or(r));
    let inner = inner
        .strip_suffix('.')
        .or_else(|| inner.strip_suffix(')'))
        .or_else(|| inner.strip_suffix(':'))
        .unwrap_or(inner);
    let mut it = inner.chars();
    match (it.next(), it.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some(c),
        _ => None,
    }
}

fn normalized_match(a: &Normalized, b: &Normalized, policy: &MatcherPolicy) -> bool {
    if a.text == b.text {
        return true;
    }
    match (policy.numeric_mode, a.number, b.number) {
        (NumericMode::Relative { tolerance }, Some(x), Some(y)) => {
            (x - y).abs() <= tolerance * x.abs().max(y.abs()).max(NUMERIC_EPS)
        }
        _ => false,
    }
}

/// Symmetric and reflexive answer equivalence.
pub fn matches(a: &str, b: &str, policy: &MatcherPolicy, choices: Option<&[String]>) -> bool {
    let na = normalize_full(a, policy, choices);
    let nb = normalize_full(b, policy, choices);
    normalized_match(&na, &nb, policy)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    /// Raw text of the founding answer.
    pub representative: String,
    pub members: Vec<usize>,
}

/// Greedy single-pass clustering anchored on representatives. Each answer
/// joins the first cluster whose representative it matches; clusters appear
/// in order of first appearance.
pub fn equivalence_cluster(
    answers: &[impl AsRef<str>],
    policy: &MatcherPolicy,
    choices: Option<&[String]>,
) -> Vec<Cluster> {
    let mut clusters: Vec<(Normalized, Cluster)> = Vec::new();
    for (i, a) in answers.iter().enumerate() {
        let n = normalize_full(a.as_ref(), policy, choices);
        match clusters
            .iter_mut()
            .find(|(rep, _)| normalized_match(&n, rep, policy))
        {
            Some((_, c)) => c.members.push(i),
            None => clusters.push((
                n,
                Cluster {
                    representative: a.as_ref().to_string(),
                    members: vec![i],
                },
            )),
        }
    }
    clusters.into_iter().map(|(_, c)| c).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> MatcherPolicy {
        MatcherPolicy::default()
    }

    #[test]
    fn fold_and_strip() {
        assert_eq!(normalize("  Paris. ", &p(), None), "paris");
        assert_eq!(normalize("e-mail, please!", &p(), None), "e-mail please");
    }

    #[test]
    fn choice_letters() {
        let ch = vec!["cat".to_string(), "dog".to_string()];
        for raw in ["(B)", "B", "B.", "b)"] {
            assert_eq!(normalize(raw, &p(), Some(&ch)), "dog", "{raw}");
        }
        // out of range letter is treated as text
        assert_eq!(normalize("(C)", &p(), Some(&ch)), "c");
        // without choices, no resolution
        assert_eq!(normalize("B", &p(), None), "b");
    }

    #[test]
    fn letter_that_is_a_choice_stays_put() {
        let ch = vec!["x".to_string(), "a".to_string()];
        assert_eq!(normalize("a", &p(), Some(&ch)), "a");
        assert_eq!(normalize("(B)", &p(), Some(&ch)), "a");
    }

    #[test]
    fn numeric_forms() {
        let n = normalize_full("25%", &p(), None);
        assert_eq!(n.text, "25");
        assert_eq!(n.number, Some(25.0));
        assert_eq!(normalize("$1,200", &p(), None), "1200");
        assert_eq!(normalize("3.50", &p(), None), "3.5");
        assert_eq!(normalize("-4", &p(), None), "-4");
        assert_eq!(parse_number("nan"), None);
        assert_eq!(parse_number("inf"), None);
        assert_eq!(parse_number("1e400"), None);
    }

    #[test]
    fn numeric_tolerance() {
        // 4/100 = 0.04 <= 0.05; 6/100 = 0.06 > 0.05 (6/106 = 0.0566 > 0.05 too)
        assert!(matches("104", "100", &p(), None));
        assert!(!matches("106", "100", &p(), None));
        assert!(matches("Paris", "paris", &p(), None));
        assert!(!matches("104", "100", &MatcherPolicy::exact(), None));
        assert!(matches("0", "0.0", &p(), None));
    }

    #[test]
    fn clustering() {
        let c = equivalence_cluster(&["A", "a", "B"], &p(), None);
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].representative.as_str(), c[0].members.clone()), ("A", vec![0, 1]));
        assert_eq!((c[1].representative.as_str(), c[1].members.clone()), ("B", vec![2]));

        // 104 joins 100; 109 is 9% from 100 and founds its own cluster even
        // though it is within 5% of 104.
        let c = equivalence_cluster(&["100", "104", "109"], &p(), None);
        assert_eq!(c[0].members, vec![0, 1]);
        assert_eq!(c[1].representative, "109");
        assert_eq!(c[1].members, vec![2]);

        let c = equivalence_cluster(&["x"], &p(), None);
        assert_eq!(c, vec![Cluster { representative: "x".into(), members: vec![0] }]);
    }

    fn answer_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            "[ a-zA-Z.,!()-]{0,12}",
            (-1000.0f64..1000.0).prop_map(|x| format!("{x:.2}")),
            (0u32..500).prop_map(|x| format!("{x}%")),
            "\\(?[A-F][).]?",
        ]
    }

    proptest! {
        #[test]
        fn matches_symmetric_reflexive(a in answer_strategy(), b in answer_strategy()) {
            let ch: Vec<String> = ["cat", "dog", "7", "a", "x y", "12%"].map(String::from).to_vec();
            for choices in [None, Some(ch.as_slice())] {
                prop_assert!(matches(&a, &a, &p(), choices));
                prop_assert_eq!(matches(&a, &b, &p(), choices), matches(&b, &a, &p(), choices));
            }
        }

        #[test]
        fn normalize_idempotent(a in answer_strategy(), fold in any::<bool>(), strip in any::<bool>()) {
            let policy = MatcherPolicy { case_fold: fold, strip_punct_ws: strip, ..p() };
            let ch: Vec<String> = ["cat", "Dog", "7", "a", "x y", "12%"].map(String::from).to_vec();
            for choices in [None, Some(ch.as_slice())] {
                let once = normalize(&a, &policy, choices);
                prop_assert_eq!(normalize(&once, &policy, choices), once.clone());
            }
        }
    }
}
