//! Question templates, the attribute-source interface and response parsing.

use serde::{Deserialize, Serialize};

use crate::attributes::AttributeOrigin;
use crate::error::{Error, Result};
use crate::image::Image;

pub const MAX_ATTRIBUTE_WORDS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Question {
    /// Everything visible in the images.
    Q1,
    /// Which listed items are parts of the category.
    Q2,
    /// Detailed description of the category object.
    Q3,
}

/// Paraphrase lists for each question. `{category}` is replaced by the
/// category name and, for Q2, `{items}` by the Q1 items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryTemplates {
    pub q1: Vec<String>,
    pub q2: Vec<String>,
    pub q3: Vec<String>,
}

impl Default for QueryTemplates {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            q1: v(&[
                "Name every visual element you can see in these pictures of a {category}. Answer with one short bullet per element.",
                "Which things are visible in these images of a {category}? Reply as a bulleted list of short phrases.",
                "Enumerate all objects, colors and patterns shown in these photos of a {category}, one bullet each.",
            ]),
            q2: v(&[
                "For each item below, say whether it is a part of a {category}. Answer with one bullet per item in the form 'item: yes' or 'item: no'.\n{items}",
                "Is each of the following a physical part of the {category} itself? Reply 'item: yes' or 'item: no' per bullet.\n{items}",
                "Decide for every listed item if it belongs to the {category} object rather than its surroundings. Bullet format 'item: yes/no'.\n{items}",
            ]),
            q3: v(&[
                "Describe the {category} in these pictures in detail. List its visual features as short bullets.",
                "What does the {category} itself look like here? Give its distinguishing features as a bulleted list.",
                "List the defining visual traits of the {category} shown in these images, one short bullet each.",
            ]),
        }
    }
}

impl QueryTemplates {
    pub fn variants(&self, q: Question) -> &[String] {
        match q {
            Question::Q1 => &self.q1,
            Question::Q2 => &self.q2,
            Question::Q3 => &self.q3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for q in [Question::Q1, Question::Q2, Question::Q3] {
            if self.variants(q).is_empty() {
                return Err(Error::config(format!("no templates configured for {q:?}")));
            }
        }
        Ok(())
    }

    /// Number of query rounds: the longest paraphrase list.
    pub fn rounds(&self) -> usize {
        self.q1.len().max(self.q2.len()).max(self.q3.len())
    }

    pub fn render(&self, q: Question, round: usize, category: &str, items: &[String]) -> String {
        let list = self.variants(q);
        let bullets: Vec<String> = items.iter().map(|i| format!("- {i}")).collect();
        list[round % list.len()]
            .replace("{category}", category)
            .replace("{items}", &bullets.join("\n"))
    }
}

/// One question put to an attribute source.
#[derive(Debug, Clone)]
pub struct Query<'a> {
    pub question: Question,
    pub round: usize,
    pub prompt: String,
    pub category: &'a str,
    pub image_ids: &'a [String],
    pub images: &'a [&'a Image],
    /// Items under review (Q2 only).
    pub items: &'a [String],
}

/// Anything that can answer the probing questions with free text.
pub trait AttributeSource {
    fn origin(&self) -> AttributeOrigin;
    fn ask(&mut self, query: &Query<'_>) -> Result<String>;
}

impl<S: AttributeSource + ?Sized> AttributeSource for Box<S> {
    fn origin(&self) -> AttributeOrigin {
        (**self).origin()
    }

    fn ask(&mut self, query: &Query<'_>) -> Result<String> {
        (**self).ask(query)
    }
}

fn strip_bullet(line: &str) -> Option<&str> {
    let t = line.trim();
    if let Some(rest) = t.strip_prefix('-').or_else(|| t.strip_prefix('*')) {
        return Some(rest);
    }
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 && t[digits..].starts_with('.') {
        return Some(&t[digits + 1..]);
    }
    None
}

fn clean(item: &str) -> Option<String> {
    let s = item.trim().trim_end_matches(['.', ';', ',']).trim().to_lowercase();
    let words = s.split_whitespace().count();
    (words > 0 && words <= MAX_ATTRIBUTE_WORDS).then(|| s.split_whitespace().collect::<Vec<_>>().join(" "))
}

/// Bullet items of a free-text answer. Lines without a bullet marker and
/// items longer than [`MAX_ATTRIBUTE_WORDS`] words are dropped.
pub fn parse_bullets(response: &str) -> Vec<String> {
    response.lines().filter_map(strip_bullet).filter_map(clean).collect()
}

/// Items confirmed by a Q2 answer: `item: yes` bullets, plus bare bullets.
/// Anything else, including hedged verdicts, counts as not confirmed.
pub fn parse_confirmations(response: &str) -> Vec<String> {
    let mut out = Vec::new();
    for body in response.lines().filter_map(strip_bullet) {
        match body.rsplit_once(':') {
            Some((item, verdict)) => {
                let v = verdict.trim().trim_end_matches('.').to_lowercase();
                if v == "yes" {
                    out.extend(clean(item));
                } else if v != "no" {
                    log::info!("unclear part-of verdict '{}' for '{}'; treated as no", v, item.trim());
                }
            }
            None => out.extend(clean(body)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bullets_are_filtered_and_normalized() {
        let r = "Sure! Here you go:\n- Red Background.\n* two stacked loops\n3. Narrow Waist\n- a very long phrase that goes on far too long\nno bullet here\n-   \n12) nope";
        assert_eq!(parse_bullets(r), ["red background", "two stacked loops", "narrow waist"]);
    }

    #[test]
    fn confirmations() {
        let r = "- wheel: yes\n- road: no\n- frame: Yes.\n- sky: maybe\n- handle";
        assert_eq!(parse_confirmations(r), ["wheel", "frame", "handle"]);
    }

    #[test]
    fn templates_render() {
        let t = QueryTemplates::default();
        assert_eq!(t.rounds(), 3);
        let p = t.render(Question::Q2, 4, "seven", &["a".into(), "b".into()]);
        assert!(p.contains("seven") && p.contains("- a\n- b"));
        assert!(!p.contains('{'));
    }
}
