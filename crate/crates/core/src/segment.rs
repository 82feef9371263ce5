//! Rule-based sentence segmentation.
//!
//! A sentence ends at a run of `.`, `!` or `?` (plus closing quotes or
//! brackets) that is followed by whitespace and an uppercase letter, unless
//! the word ending in `.` is a known abbreviation.

use crate::error::DocumentError;
use crate::types::{Document, Sentence, Span};

/// Abbreviations (lowercase, without the final period) that never end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "gen", "col", "lt", "sgt",
    "capt", "cmdr", "adm", "gov", "sen", "rep", "rev", "hon", "pres", "vs", "etc", "e.g", "i.e",
    "u.s", "u.k", "u.n", "inc", "ltd", "co", "corp", "bros", "no", "nos", "fig", "figs", "vol",
    "vols", "approx", "dept", "est", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep",
    "sept", "oct", "nov", "dec", "ca", "cf", "al", "pp", "ed", "eds", "a.m", "p.m",
];

const TERMINATORS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 7] = ['"', '\'', ')', ']', '\u{201d}', '\u{2019}', '}'];
const OPENERS: [char; 6] = ['"', '\'', '(', '[', '\u{201c}', '\u{2018}'];

/// Segments `text` into a [`Document`]. Deterministic for a fixed input.
pub fn segment_document(
    id: impl Into<String>,
    title: impl Into<String>,
    text: &str,
) -> Result<Document, DocumentError> {
    if text.trim().is_empty() {
        return Err(DocumentError::EmptyDocument);
    }
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0usize;
    while i < chars.len() {
        let c = chars[i];
        if start.is_none() {
            if !c.is_whitespace() {
                start = Some(i);
            } else {
                i += 1;
                continue;
            }
        }
        if TERMINATORS.contains(&c) {
            let term_start = i;
            let mut j = i;
            while j < chars.len() && TERMINATORS.contains(&chars[j]) {
                j += 1;
            }
            while j < chars.len() && CLOSERS.contains(&chars[j]) {
                j += 1;
            }
            if is_boundary(&chars, term_start, j) {
                push_sentence(&chars, start.take().unwrap(), j, &mut sentences);
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        let mut end = chars.len();
        while end > s && chars[end - 1].is_whitespace() {
            end -= 1;
        }
        push_sentence(&chars, s, end, &mut sentences);
    }
    Ok(Document {
        id: id.into(),
        title: title.into(),
        text: text.to_string(),
        sentences,
    })
}

fn push_sentence(chars: &[char], start: usize, end: usize, out: &mut Vec<Sentence>) {
    out.push(Sentence {
        sentence_id: out.len(),
        span: Span { start, end },
        text: chars[start..end].iter().collect(),
    });
}

/// `term_start..after` is the terminator run including closers.
fn is_boundary(chars: &[char], term_start: usize, after: usize) -> bool {
    let mut k = after;
    if k >= chars.len() || !chars[k].is_whitespace() {
        return false;
    }
    while k < chars.len() && chars[k].is_whitespace() {
        k += 1;
    }
    while k < chars.len() && OPENERS.contains(&chars[k]) {
        k += 1;
    }
    if k >= chars.len() || !chars[k].is_uppercase() {
        return false;
    }
    // Only a lone period can be an abbreviation.
    if chars[term_start] == '.' && after - term_start == 1 {
        let mut w = term_start;
        while w > 0 && !chars[w - 1].is_whitespace() {
            w -= 1;
        }
        let word: String = chars[w..term_start]
            .iter()
            .skip_while(|c| OPENERS.contains(c))
            .collect::<String>()
            .to_lowercase();
        if ABBREVIATIONS.contains(&word.as_str()) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(text: &str) -> Vec<String> {
        segment_document("d", "T", text)
            .unwrap()
            .sentences
            .into_iter()
            .map(|s| s.text)
            .collect()
    }

    #[test]
    fn one_sentence_per_terminator() {
        let d = segment_document("d", "T", "A. B. C.").unwrap();
        let ids: Vec<usize> = d.sentences.iter().map(|s| s.sentence_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn no_terminator_is_whole_text() {
        assert_eq!(split("One sentence without period"), vec!["One sentence without period"]);
    }

    #[test]
    fn blank_text_is_rejected() {
        assert!(matches!(
            segment_document("d", "T", "  \n\t "),
            Err(DocumentError::EmptyDocument)
        ));
    }

    /// Hand-built reference segmentations.
    #[test]
    fn curated_reference_segmentation() {
        let cases: &[(&str, &[&str])] = &[
            ("Dr. Smith arrived. He left.", &["Dr. Smith arrived.", "He left."]),
            ("Hello world. Goodbye world.", &["Hello world.", "Goodbye world."]),
            ("Is it raining? Yes it is!", &["Is it raining?", "Yes it is!"]),
            ("Wait... What happened?", &["Wait...", "What happened?"]),
            ("Mr. and Mrs. Dursley lived at No. 4 Privet Drive. They were normal.",
                &["Mr. and Mrs. Dursley lived at No. 4 Privet Drive.", "They were normal."]),
            ("He said \"Stop.\" Then he left.", &["He said \"Stop.\"", "Then he left."]),
            ("The U.S. Army fought. It won.", &["The U.S. Army fought.", "It won."]),
            ("Apples, pears, etc. Are fruits.", &["Apples, pears, etc. Are fruits."]),
            ("Version 2.5 was released in 2010. It failed.",
                &["Version 2.5 was released in 2010.", "It failed."]),
            ("lowercase after period. still same sentence", &["lowercase after period. still same sentence"]),
            ("The price rose 5%. Analysts were surprised.",
                &["The price rose 5%.", "Analysts were surprised."]),
            ("She studied at St. Andrews. Then she moved.",
                &["She studied at St. Andrews.", "Then she moved."]),
            ("Really?! No way.", &["Really?!", "No way."]),
            ("(This is bracketed.) This is not.", &["(This is bracketed.)", "This is not."]),
            ("It ended in 1945. (Some disagree.)", &["It ended in 1945.", "(Some disagree.)"]),
            ("  Leading space. Trailing space.  ", &["Leading space.", "Trailing space."]),
            ("Line one.\nLine two.", &["Line one.", "Line two."]),
            ("See Fig. 3 for details. It helps.", &["See Fig. 3 for details.", "It helps."]),
            ("Prof. Jones vs. Dr. Who. A classic.", &["Prof. Jones vs. Dr. Who.", "A classic."]),
            ("Harry Potter is a series of seven fantasy novels. The novels chronicle the lives of a young wizard.",
                &["Harry Potter is a series of seven fantasy novels.", "The novels chronicle the lives of a young wizard."]),
        ];
        assert_eq!(cases.len(), 20);
        for (text, expected) in cases {
            assert_eq!(&split(text), expected, "input: {text:?}");
            segment_document("d", "T", text).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn spans_are_char_offsets() {
        let d = segment_document("d", "T", "Café au lait. Très bon.").unwrap();
        assert_eq!(d.sentences[1].span, Span { start: 14, end: 23 });
        d.validate().unwrap();
    }

    #[test]
    fn deterministic() {
        let t = "One. Two! Three? Four";
        assert_eq!(segment_document("a", "b", t).unwrap(), segment_document("a", "b", t).unwrap());
    }
}
