//! Verifiable reward functions: box accuracy (IoU), template format, exact
//! match, and the smooth numeric decay.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::BoundingBox;
use crate::vocab::{Tag, Token, TokenId, Vocabulary};

/// Number of coordinate tokens inside the answer braces.
pub const ANSWER_COORDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: f64,
    pub format: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Unit-weight sum of the two components.
    pub fn new(accuracy: f64, format: f64) -> Self {
        Self {
            accuracy,
            format,
            total: accuracy + format,
        }
    }

    pub fn accuracy_only(accuracy: f64) -> Self {
        Self::new(accuracy, 0.0)
    }
}

/// IoU against the ground truth, or 0 for an unparseable answer.
pub fn accuracy_reward(predicted: Option<&BoundingBox>, gt: &BoundingBox) -> f64 {
    predicted.map_or(0.0, |b| b.iou(gt))
}

/// Locates the four coordinate tokens when `tokens` follows
/// `<think> free* </think> <answer> { n n n n } </answer>`; free tokens are any
/// non-structural tokens.
fn match_template(tokens: &[TokenId], vocab: &Vocabulary) -> Option<[u32; ANSWER_COORDS]> {
    if !vocab.has_tags() {
        return None;
    }
    const TAIL: usize = 3 + ANSWER_COORDS + 2;
    let n = tokens.len();
    if n < 1 + TAIL || !vocab.is_tag(tokens[0], Tag::ThinkOpen) {
        return None;
    }
    let tail = &tokens[n - TAIL..];
    let free = &tokens[1..n - TAIL];
    if free.iter().any(|&id| !matches!(vocab.decode(id), Some(Token::Noun(_) | Token::Number(_)))) {
        return None;
    }
    let expect = [Tag::ThinkClose, Tag::AnswerOpen, Tag::BraceOpen];
    if !expect.iter().zip(tail).all(|(&t, &id)| vocab.is_tag(id, t)) {
        return None;
    }
    if !vocab.is_tag(tail[TAIL - 2], Tag::BraceClose) || !vocab.is_tag(tail[TAIL - 1], Tag::AnswerClose) {
        return None;
    }
    let mut coords = [0u32; ANSWER_COORDS];
    for (slot, &id) in coords.iter_mut().zip(&tail[3..3 + ANSWER_COORDS]) {
        *slot = vocab.numeric_value(id)?;
    }
    Some(coords)
}

pub fn format_reward(tokens: &[TokenId], vocab: &Vocabulary) -> f64 {
    if match_template(tokens, vocab).is_some() {
        1.0
    } else {
        0.0
    }
}

/// The answer box, when the sequence is well formed and the four coordinates
/// form a valid box on the grid.
pub fn extract_box(tokens: &[TokenId], vocab: &Vocabulary, grid: u32) -> Option<BoundingBox> {
    let [x1, y1, x2, y2] = match_template(tokens, vocab)?;
    BoundingBox::checked(x1.into(), y1.into(), x2.into(), y2.into(), grid)
}

/// Sparse binary reward: 1 only for the exact answer.
pub fn reasoning_reward(answer: i64, target: i64) -> f64 {
    if answer == target {
        1.0
    } else {
        0.0
    }
}

/// `max(0, 1 - lambda * |answer - target|)`.
pub fn numeric_decay_reward(answer: i64, target: i64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(LabError::config("lambda", format!("must be a positive number, got {lambda}")));
    }
    let dist = (answer - target).unsigned_abs() as f64;
    Ok((1.0 - lambda * dist).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(4, 16)
    }

    fn answer(v: &Vocabulary, free: &[TokenId], nums: &[u32]) -> Vec<TokenId> {
        let mut seq = vec![v.tag(Tag::ThinkOpen)];
        seq.extend_from_slice(free);
        seq.extend([v.tag(Tag::ThinkClose), v.tag(Tag::AnswerOpen), v.tag(Tag::BraceOpen)]);
        seq.extend(nums.iter().map(|&n| v.number(n)));
        seq.extend([v.tag(Tag::BraceClose), v.tag(Tag::AnswerClose)]);
        seq
    }

    #[test]
    fn accuracy_examples() {
        let gt = BoundingBox::new(1, 1, 3, 3, 16).unwrap();
        let p = BoundingBox::new(0, 0, 2, 2, 16).unwrap();
        assert_eq!(accuracy_reward(Some(&gt), &gt), 1.0);
        assert_eq!(accuracy_reward(None, &gt), 0.0);
        assert_eq!(accuracy_reward(Some(&p), &gt), 1.0 / 7.0);
    }

    #[test]
    fn format_template_cases() {
        let v = vocab();
        let good = answer(&v, &[v.noun(3)], &[1, 2, 3, 4]);
        assert_eq!(good.len(), 11);
        assert_eq!(format_reward(&good, &v), 1.0);

        let missing_close = &good[..good.len() - 1];
        assert_eq!(format_reward(missing_close, &v), 0.0);

        let three = answer(&v, &[v.noun(3)], &[1, 2, 3]);
        assert_eq!(format_reward(&three, &v), 0.0);

        // zero free tokens is allowed, structural tags in the free slot are not
        assert_eq!(format_reward(&answer(&v, &[], &[1, 2, 3, 4]), &v), 1.0);
        assert_eq!(format_reward(&answer(&v, &[v.tag(Tag::BraceOpen)], &[1, 2, 3, 4]), &v), 0.0);

        let mut extra = good.clone();
        extra.push(v.noun(0));
        assert_eq!(format_reward(&extra, &v), 0.0);

        let mut noun_in_answer = good.clone();
        noun_in_answer[6] = v.noun(1);
        assert_eq!(format_reward(&noun_in_answer, &v), 0.0);
    }

    #[test]
    fn extract_examples() {
        let v = vocab();
        let good = answer(&v, &[v.noun(3)], &[1, 2, 3, 4]);
        assert_eq!(extract_box(&good, &v, 16), Some(BoundingBox::new(1, 2, 3, 4, 16).unwrap()));
        let flipped = answer(&v, &[v.noun(3)], &[3, 2, 1, 4]);
        assert_eq!(format_reward(&flipped, &v), 1.0);
        assert_eq!(extract_box(&flipped, &v, 16), None);
        assert_eq!(extract_box(&good[..10], &v, 16), None);
        // coordinates beyond the grid
        assert_eq!(extract_box(&answer(&v, &[], &[0, 0, 12, 4]), &v, 10), None);
    }

    #[test]
    fn reasoning_examples() {
        assert_eq!(reasoning_reward(20, 20), 1.0);
        assert_eq!(reasoning_reward(19, 20), 0.0);
        assert_eq!(reasoning_reward(21, 20), 0.0);
    }

    #[test]
    fn decay_examples() {
        assert_eq!(numeric_decay_reward(20, 20, 0.05).unwrap(), 1.0);
        assert!((numeric_decay_reward(10, 20, 0.05).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(numeric_decay_reward(40, 20, 0.05).unwrap(), 0.0);
        assert!(numeric_decay_reward(1, 2, 0.0).is_err());
        assert!(numeric_decay_reward(1, 2, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn decay_symmetric_and_monotone(t in -50i64..50, d in 0i64..60, lambda in 0.001f64..2.0) {
            let up = numeric_decay_reward(t + d, t, lambda).unwrap();
            let down = numeric_decay_reward(t - d, t, lambda).unwrap();
            prop_assert_eq!(up, down);
            let further = numeric_decay_reward(t + d + 1, t, lambda).unwrap();
            prop_assert!(further <= up);
            prop_assert!((0.0..=1.0).contains(&up));
        }

        #[test]
        fn binary_matches_decay_peak(a in -30i64..30, t in -30i64..30, lambda in 0.001f64..=1.0) {
            let peak = numeric_decay_reward(a, t, lambda).unwrap() == 1.0;
            prop_assert_eq!(reasoning_reward(a, t) == 1.0, peak);
        }

        #[test]
        fn format_gates_extraction(ids in proptest::collection::vec(0usize..27, 0..14)) {
            let v = vocab();
            if format_reward(&ids, &v) == 0.0 {
                prop_assert!(extract_box(&ids, &v, 16).is_none());
            }
        }

        #[test]
        fn breakdown_additive(acc in 0.0f64..=1.0, fmt in prop::bool::ANY) {
            let r = RewardBreakdown::new(acc, f64::from(u8::from(fmt)));
            prop_assert_eq!(r.total, r.accuracy + r.format);
            prop_assert!((0.0..=2.0).contains(&r.total));
        }
    }
}
