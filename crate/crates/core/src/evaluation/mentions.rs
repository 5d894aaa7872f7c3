//! Rule-based extraction of attribute mentions from free-text answers.
//!
//! An answer is lowercased and split into sentences at `.`, `!`, `?`, `;`
//! and newlines. Tokens are runs of letters, digits and inner hyphens, so
//! `parked-on` and `top-left` stay whole. Within each sentence:
//!
//! * a category matches when its label tokens appear in sequence; the last
//!   token may carry a plural `s` or `es`;
//! * a quantity is the cardinal (digits, or a number word up to twenty)
//!   closest to a category mention within three tokens, preceding numbers
//!   winning ties; the first claim for a category is kept;
//! * a location is a grid-cell name or synonym, attributed to every category
//!   mentioned in the same sentence;
//! * a relation is a predicate with the nearest category before it as subject
//!   and the nearest category after it as object.
//!
//! At each position the longest vocabulary phrase wins.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use crate::scene_graph::GridCell;

/// Versioned grid-cell synonym table: `phrase<TAB>cell` per line.
pub const GRID_SYNONYMS: &str = include_str!("../../resources/grid_synonyms_v1.tsv");

const NUMBER_WORDS: [&str; 21] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
];

const QUANTITY_WINDOW: usize = 3;

/// A `(subject, predicate, object)` triple over normalized labels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationKey {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl RelationKey {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }

    /// `"subject predicate object"`, as rendered in chunks.
    pub fn phrase(&self) -> String {
        format!("{} {} {}", self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractedMentions {
    pub categories: BTreeSet<String>,
    pub quantities: BTreeMap<String, usize>,
    pub locations: BTreeMap<String, BTreeSet<GridCell>>,
    pub relations: BTreeSet<RelationKey>,
}

impl ExtractedMentions {
    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
            && self.quantities.is_empty()
            && self.locations.is_empty()
            && self.relations.is_empty()
    }
}

/// Phrase → grid cell lookup used for location mentions.
#[derive(Debug, Clone)]
pub struct LocationLexicon {
    phrases: Vec<(Vec<String>, GridCell)>,
}

impl LocationLexicon {
    /// Parses a synonym table. Blank lines and `#` comments are skipped; the
    /// nine canonical cell names are always included.
    pub fn parse(table: &str) -> Result<Self, String> {
        let mut phrases: Vec<(Vec<String>, GridCell)> = GridCell::ALL
            .iter()
            .map(|&c| (tokenize(c.name()), c))
            .collect();
        for (i, line) in table.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (phrase, cell) = line
                .split_once('\t')
                .ok_or_else(|| format!("synonym line {}: expected `phrase<TAB>cell`", i + 1))?;
            let cell: GridCell = cell
                .trim()
                .parse()
                .map_err(|e| format!("synonym line {}: {e}", i + 1))?;
            let tokens = tokenize(phrase);
            if tokens.is_empty() {
                return Err(format!("synonym line {}: empty phrase", i + 1));
            }
            if !phrases.iter().any(|(p, _)| *p == tokens) {
                phrases.push((tokens, cell));
            }
        }
        Ok(Self { phrases })
    }

    /// The shipped table.
    pub fn builtin() -> &'static LocationLexicon {
        static LEXICON: OnceLock<LocationLexicon> = OnceLock::new();
        LEXICON.get_or_init(|| {
            LocationLexicon::parse(GRID_SYNONYMS).expect("shipped synonym table parses")
        })
    }

    pub fn lookup(&self, phrase: &str) -> Option<GridCell> {
        let tokens = tokenize(phrase);
        self.phrases
            .iter()
            .find(|(p, _)| *p == tokens)
            .map(|&(_, c)| c)
    }
}

/// Lowercased tokens of one text fragment: letters, digits and inner hyphens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .map(|t| t.trim_matches('-'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn sentences(text: &str) -> impl Iterator<Item = &str> {
    text.split(['.', '!', '?', ';', '\n'])
        .filter(|s| !s.trim().is_empty())
}

fn parse_number(token: &str) -> Option<usize> {
    if !token.is_empty() && token.bytes().all(|b| b.is_ascii_digit()) {
        return token.parse().ok();
    }
    NUMBER_WORDS.iter().position(|w| *w == token)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Category,
    Predicate,
    Location(GridCell),
    Number(usize),
}

#[derive(Debug, Clone)]
struct Pattern {
    tokens: Vec<String>,
    kind: Kind,
    label: String,
}

#[derive(Debug, Clone)]
struct Span<'p> {
    start: usize,
    end: usize,
    kind: Kind,
    label: &'p str,
}

fn token_matches(token: &str, word: &str, plural: bool) -> bool {
    token == word
        || (plural
            && (token.strip_suffix('s') == Some(word) || token.strip_suffix("es") == Some(word)))
}

impl Pattern {
    fn matches_at(&self, tokens: &[String], at: usize) -> bool {
        let n = self.tokens.len();
        if at + n > tokens.len() {
            return false;
        }
        self.tokens.iter().enumerate().all(|(i, word)| {
            let plural = self.kind == Kind::Category && i + 1 == n;
            token_matches(&tokens[at + i], word, plural)
        })
    }
}

/// Compiled vocabularies for [`extract_mentions`].
#[derive(Debug, Clone)]
pub struct MentionMatcher {
    patterns: Vec<Pattern>,
}

impl MentionMatcher {
    pub fn new<C, P>(categories: C, predicates: P, locations: &LocationLexicon) -> Self
    where
        C: IntoIterator,
        C::Item: AsRef<str>,
        P: IntoIterator,
        P::Item: AsRef<str>,
    {
        let mut patterns = Vec::new();
        let mut push = |label: &str, kind: Kind| {
            let tokens = tokenize(label);
            if !tokens.is_empty() {
                patterns.push(Pattern {
                    tokens,
                    kind,
                    label: label.to_lowercase(),
                });
            }
        };
        for c in categories {
            push(c.as_ref(), Kind::Category);
        }
        for p in predicates {
            push(p.as_ref(), Kind::Predicate);
        }
        for (tokens, cell) in &locations.phrases {
            patterns.push(Pattern {
                tokens: tokens.clone(),
                kind: Kind::Location(*cell),
                label: cell.name().into(),
            });
        }
        // Longest first; among equal lengths categories beat predicates beat locations.
        let rank = |k: &Kind| match k {
            Kind::Category => 0,
            Kind::Predicate => 1,
            Kind::Location(_) => 2,
            Kind::Number(_) => 3,
        };
        patterns.sort_by(|a, b| {
            b.tokens
                .len()
                .cmp(&a.tokens.len())
                .then(rank(&a.kind).cmp(&rank(&b.kind)))
        });
        Self { patterns }
    }

    fn spans<'p>(&'p self, tokens: &[String]) -> Vec<Span<'p>> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if let Some(p) = self.patterns.iter().find(|p| p.matches_at(tokens, i)) {
                spans.push(Span {
                    start: i,
                    end: i + p.tokens.len(),
                    kind: p.kind,
                    label: &p.label,
                });
                i += p.tokens.len();
            } else {
                if let Some(n) = parse_number(&tokens[i]) {
                    spans.push(Span {
                        start: i,
                        end: i + 1,
                        kind: Kind::Number(n),
                        label: "",
                    });
                }
                i += 1;
            }
        }
        spans
    }

    pub fn extract(&self, answer_text: &str) -> ExtractedMentions {
        let mut out = ExtractedMentions::default();
        for sentence in sentences(answer_text) {
            let tokens = tokenize(sentence);
            let spans = self.spans(&tokens);
            let categories: Vec<&Span> =
                spans.iter().filter(|s| s.kind == Kind::Category).collect();

            for c in &categories {
                out.categories.insert(c.label.to_string());
                let nearest = spans
                    .iter()
                    .filter_map(|s| match s.kind {
                        Kind::Number(n) => {
                            let distance = if s.start < c.start {
                                c.start - s.start
                            } else {
                                s.start + 1 - c.end
                            };
                            Some((distance, s.start, n))
                        }
                        _ => None,
                    })
                    .filter(|&(d, _, _)| d <= QUANTITY_WINDOW)
                    .min();
                if let Some((_, _, n)) = nearest {
                    out.quantities.entry(c.label.to_string()).or_insert(n);
                }
            }

            for loc in spans.iter() {
                if let Kind::Location(cell) = loc.kind {
                    for c in &categories {
                        out.locations
                            .entry(c.label.to_string())
                            .or_default()
                            .insert(cell);
                    }
                }
            }

            for p in spans.iter().filter(|s| s.kind == Kind::Predicate) {
                let subject = categories.iter().rev().find(|c| c.end <= p.start);
                let object = categories.iter().find(|c| c.start >= p.end);
                if let (Some(s), Some(o)) = (subject, object) {
                    out.relations
                        .insert(RelationKey::new(s.label, p.label, o.label));
                }
            }
        }
        out
    }
}

/// Extracts mentions with the shipped location lexicon.
pub fn extract_mentions<C, P>(
    answer_text: &str,
    category_vocabulary: C,
    predicate_vocabulary: P,
) -> ExtractedMentions
where
    C: IntoIterator,
    C::Item: AsRef<str>,
    P: IntoIterator,
    P::Item: AsRef<str>,
{
    MentionMatcher::new(
        category_vocabulary,
        predicate_vocabulary,
        LocationLexicon::builtin(),
    )
    .extract(answer_text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NONE: [&str; 0] = [];

    #[test]
    fn counts_and_location_in_one_sentence() {
        let m = extract_mentions("There are 3 cars in the top-left region.", ["car"], NONE);
        assert_eq!(m.categories, BTreeSet::from(["car".to_string()]));
        assert_eq!(m.quantities, BTreeMap::from([("car".to_string(), 3)]));
        assert_eq!(m.locations["car"], BTreeSet::from([GridCell::TopLeft]));
        assert!(m.relations.is_empty());
    }

    #[test]
    fn empty_answer() {
        assert!(extract_mentions("", ["car"], ["on"]).is_empty());
        assert!(extract_mentions("I cannot tell.", ["car"], ["on"]).is_empty());
    }

    #[test]
    fn relation_in_order() {
        let m = extract_mentions(
            "A car is parked-on the road.",
            ["car", "road"],
            ["parked-on"],
        );
        let phrases: Vec<String> = m.relations.iter().map(RelationKey::phrase).collect();
        assert_eq!(phrases, ["car parked-on road"]);
        let reversed = extract_mentions(
            "The road is parked-on by a car. ",
            ["car", "road"],
            ["parked-on"],
        );
        assert_eq!(
            reversed.relations,
            BTreeSet::from([RelationKey::new("road", "parked-on", "car")])
        );
        let split = extract_mentions("A car. Parked-on the road.", ["car", "road"], ["parked-on"]);
        assert!(split.relations.is_empty());
    }

    #[test]
    fn plural_folding_and_multiword_labels() {
        let m = extract_mentions(
            "Two storage tanks and several buses",
            ["storage tank", "bus", "tank"],
            NONE,
        );
        assert_eq!(
            m.categories,
            BTreeSet::from(["storage tank".to_string(), "bus".to_string()])
        );
        assert_eq!(m.quantities.get("storage tank"), Some(&2));
        assert_eq!(m.quantities.get("bus"), None);
    }

    #[test]
    fn number_window_and_nearest() {
        let m = extract_mentions("3 cars and 2 trees", ["car", "tree"], NONE);
        assert_eq!(
            m.quantities,
            BTreeMap::from([("car".into(), 3), ("tree".into(), 2)])
        );
        let far = extract_mentions("12 of them are visible here as cars", ["car"], NONE);
        assert!(far.quantities.is_empty());
        let words = extract_mentions("twenty ships", ["ship"], NONE);
        assert_eq!(words.quantities["ship"], 20);
        let too_big = extract_mentions("twentyone ships", ["ship"], NONE);
        assert!(too_big.quantities.is_empty());
    }

    #[test]
    fn synonyms_and_longest_match() {
        let m = extract_mentions(
            "The plane sits in the upper left; a ship is in the middle",
            ["plane", "ship"],
            NONE,
        );
        assert_eq!(m.locations["plane"], BTreeSet::from([GridCell::TopLeft]));
        assert_eq!(m.locations["ship"], BTreeSet::from([GridCell::Center]));
        let m = extract_mentions("A ship at the middle left", ["ship"], NONE);
        assert_eq!(m.locations["ship"], BTreeSet::from([GridCell::MiddleLeft]));
    }

    #[test]
    fn location_needs_category_in_sentence() {
        let m = extract_mentions("There is a car. It is at the center.", ["car"], NONE);
        assert!(m.locations.is_empty());
    }

    #[test]
    fn lexicon_parsing() {
        let lex = LocationLexicon::builtin();
        assert_eq!(lex.lookup("Upper Left"), Some(GridCell::TopLeft));
        assert_eq!(lex.lookup("centre"), Some(GridCell::Center));
        assert_eq!(lex.lookup("bottom-right"), Some(GridCell::BottomRight));
        assert!(LocationLexicon::parse("foo\tnowhere").is_err());
        assert!(LocationLexicon::parse("no tab here").is_err());
    }

    #[test]
    fn tokenizer_keeps_inner_hyphens() {
        assert_eq!(
            tokenize("Car, parked-on -the- ROAD!"),
            ["car", "parked-on", "the", "road"]
        );
    }
}
