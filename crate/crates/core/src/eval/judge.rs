use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::gateway::{prompts, Gateway, GatewayError, LlmRole};
use crate::model::{Role, SessionState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
    #[serde(rename = "no-decision")]
    NoDecision,
}

impl Verdict {
    fn swapped(self) -> Self {
        match self {
            Verdict::A => Verdict::B,
            Verdict::B => Verdict::A,
            Verdict::NoDecision => Verdict::NoDecision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub verdict: Verdict,
    pub rationale: String,
    /// Verdicts of the two orderings, mapped back to the caller's labels.
    pub orderings: [Verdict; 2],
}

const A_WINS: &str = "Dialogue A is more personalized";
const B_WINS: &str = "Dialogue B is more personalized";

/// Extracts the verdict sentence; the rest of the reply is the rationale.
pub fn parse_verdict(reply: &str) -> Option<(Verdict, String)> {
    let a = reply.find(A_WINS);
    let b = reply.find(B_WINS);
    let (verdict, at, len) = match (a, b) {
        (Some(i), None) => (Verdict::A, i, A_WINS.len()),
        (None, Some(i)) => (Verdict::B, i, B_WINS.len()),
        _ => return None,
    };
    let rationale = format!("{} {}", reply[..at].trim(), reply[at + len..].trim_start_matches(['.', ':', ' ']).trim());
    Some((verdict, rationale.trim().to_string()))
}

pub fn render_dialogue(session: &SessionState) -> String {
    session
        .turns
        .iter()
        .map(|t| match t.role {
            Role::Student => format!("Student: {}", t.text),
            Role::Tutor => format!("Tutor: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn judge_once(first: &str, second: &str, context: &str, gateway: &Gateway) -> Result<Option<(Verdict, String)>, GatewayError> {
    let messages = prompts::render_prompt(
        prompts::JUDGE.id,
        [("student_context", context), ("dialogue_a", first), ("dialogue_b", second)],
    )?;
    for _ in 0..2 {
        if let Some(v) = parse_verdict(&gateway.complete(LlmRole::Judge, messages.clone())?) {
            return Ok(Some(v));
        }
    }
    Ok(None)
}

/// Judges both orderings; the pair is decided only when they agree.
pub fn judge_pair(dialogue_a: &str, dialogue_b: &str, student_context: &str, gateway: &Gateway) -> Result<JudgeOutcome, GatewayError> {
    let forward = judge_once(dialogue_a, dialogue_b, student_context, gateway)?;
    let backward = judge_once(dialogue_b, dialogue_a, student_context, gateway)?;
    let fv = forward.as_ref().map_or(Verdict::NoDecision, |(v, _)| *v);
    let bv = backward.as_ref().map_or(Verdict::NoDecision, |(v, _)| v.swapped());
    let verdict = if fv == bv { fv } else { Verdict::NoDecision };
    let rationale = forward.map(|(_, r)| r).unwrap_or_default();
    Ok(JudgeOutcome { verdict, rationale, orderings: [fv, bv] })
}

/// Percentage of decided pairs won by `target`.
pub fn win_rate(verdicts: &[Verdict], target: Verdict) -> Result<f64, EvalError> {
    let decided: Vec<&Verdict> = verdicts.iter().filter(|v| **v != Verdict::NoDecision).collect();
    if decided.is_empty() {
        return Err(EvalError::NoDecidedPairs);
    }
    let wins = decided.iter().filter(|v| ***v == target).count();
    Ok(wins as f64 / decided.len() as f64 * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CompletionRequest, FnProvider};
    use std::sync::Arc;

    #[test]
    fn parses_verdicts() {
        let (v, r) = parse_verdict("Dialogue A is more personalized. It revisits the forgotten topic.").unwrap();
        assert_eq!(v, Verdict::A);
        assert_eq!(r, "It revisits the forgotten topic.");
        assert_eq!(parse_verdict("Dialogue B is more personalized").unwrap().0, Verdict::B);
        assert!(parse_verdict("Both are fine").is_none());
        assert!(parse_verdict("Dialogue A is more personalized or Dialogue B is more personalized").is_none());
    }

    #[test]
    fn win_rates() {
        assert_eq!(win_rate(&[Verdict::A; 4], Verdict::A).unwrap(), 100.0);
        let r = win_rate(&[Verdict::A, Verdict::A, Verdict::B, Verdict::NoDecision], Verdict::A).unwrap();
        assert!((r - 200.0 / 3.0).abs() < 1e-12);
        assert!(matches!(win_rate(&[Verdict::NoDecision], Verdict::A), Err(EvalError::NoDecidedPairs)));
        assert!(matches!(win_rate(&[], Verdict::A), Err(EvalError::NoDecidedPairs)));
    }

    fn judge_with(f: impl Fn(&str) -> String + Send + Sync + 'static) -> Gateway {
        Gateway::uniform(Arc::new(FnProvider::new(move |r: &CompletionRequest| Ok(f(&r.messages[1].content)))), "judge")
    }

    #[test]
    fn consistent_judge_decides() {
        // prefers whichever dialogue mentions "review"
        let g = judge_with(|user| {
            let a_start = user.find("review").unwrap_or(usize::MAX);
            let b_at = user.find("Dialogue B").unwrap_or(0);
            if a_start < b_at { "Dialogue A is more personalized" } else { "Dialogue B is more personalized" }.to_string()
        });
        let out = judge_pair("Tutor: let's review", "Tutor: next", "ctx", &g).unwrap();
        assert_eq!(out.verdict, Verdict::A);
    }

    #[test]
    fn position_biased_judge_is_undecided() {
        let g = judge_with(|_| "Dialogue A is more personalized".to_string());
        let out = judge_pair("x", "y", "ctx", &g).unwrap();
        assert_eq!(out.verdict, Verdict::NoDecision);
        assert_eq!(out.orderings, [Verdict::A, Verdict::B]);
    }

    #[test]
    fn malformed_after_retry_is_undecided() {
        let g = judge_with(|_| "I cannot decide".to_string());
        let out = judge_pair("x", "y", "ctx", &g).unwrap();
        assert_eq!(out.verdict, Verdict::NoDecision);
        assert_eq!(g.calls_made(), 4);
    }
}
