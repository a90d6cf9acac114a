//! The atomic browser action space and its canonical wire grammar.
//!
//! Wire forms:
//!
//! ```text
//! click [id]        type [id] [text]   hover [id]       press [key_comb]
//! scroll [up|down]  goto [url]         go_back          go_forward
//! none [answer]     stop [reason]
//! ```
//!
//! Values are bracket-delimited with no escaping, so a literal `]` inside a
//! value cannot be represented and is rejected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActionError {
    #[error("malformed action `{text}`: {reason}")]
    Malformed { text: String, reason: String },
    #[error("invalid action: {0}")]
    Invalid(String),
}

fn malformed(text: &str, reason: impl Into<String>) -> ActionError {
    ActionError::Malformed {
        text: text.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Click,
    Type,
    Hover,
    Press,
    Scroll,
    Goto,
    GoBack,
    GoForward,
    None,
    Stop,
}

impl ActionKind {
    pub const ALL: [ActionKind; 10] = [
        ActionKind::Click,
        ActionKind::Type,
        ActionKind::Hover,
        ActionKind::Press,
        ActionKind::Scroll,
        ActionKind::Goto,
        ActionKind::GoBack,
        ActionKind::GoForward,
        ActionKind::None,
        ActionKind::Stop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Click => "click",
            ActionKind::Type => "type",
            ActionKind::Hover => "hover",
            ActionKind::Press => "press",
            ActionKind::Scroll => "scroll",
            ActionKind::Goto => "goto",
            ActionKind::GoBack => "go_back",
            ActionKind::GoForward => "go_forward",
            ActionKind::None => "none",
            ActionKind::Stop => "stop",
        }
    }

    /// Kinds that address an element of the current observation.
    pub fn targets_element(self) -> bool {
        matches!(self, ActionKind::Click | ActionKind::Type | ActionKind::Hover)
    }

    pub fn requires_value(self) -> bool {
        matches!(
            self,
            ActionKind::Type
                | ActionKind::Press
                | ActionKind::Scroll
                | ActionKind::Goto
                | ActionKind::None
                | ActionKind::Stop
        )
    }

    /// `none` and `stop` end an episode.
    pub fn is_terminal(self) -> bool {
        matches!(self, ActionKind::None | ActionKind::Stop)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionKind {
    type Err = ActionError;

    /// Case-insensitive; accepts the upper-case spellings oracles tend to emit.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        ActionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == lower)
            .ok_or_else(|| malformed(s, "unknown action kind"))
    }
}

/// One atomic browser interaction.
///
/// `low_level_instruction` is descriptive metadata and is not part of the
/// wire string, so `parse_action(render_action(a))` reproduces every field
/// except it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "ActionRecord", try_from = "ActionRecord")]
pub struct Action {
    pub kind: ActionKind,
    pub element_id: Option<u32>,
    pub value: String,
    pub low_level_instruction: String,
}

impl Action {
    fn raw(kind: ActionKind, element_id: Option<u32>, value: impl Into<String>) -> Self {
        Action {
            kind,
            element_id,
            value: value.into(),
            low_level_instruction: String::new(),
        }
    }

    pub fn click(id: u32) -> Self {
        Self::raw(ActionKind::Click, Some(id), "")
    }

    pub fn type_text(id: u32, text: impl Into<String>) -> Self {
        Self::raw(ActionKind::Type, Some(id), text)
    }

    pub fn hover(id: u32) -> Self {
        Self::raw(ActionKind::Hover, Some(id), "")
    }

    pub fn press(keys: impl Into<String>) -> Self {
        Self::raw(ActionKind::Press, None, keys)
    }

    pub fn scroll(direction: impl Into<String>) -> Self {
        Self::raw(ActionKind::Scroll, None, direction)
    }

    pub fn goto(url: impl Into<String>) -> Self {
        Self::raw(ActionKind::Goto, None, url)
    }

    pub fn go_back() -> Self {
        Self::raw(ActionKind::GoBack, None, "")
    }

    pub fn go_forward() -> Self {
        Self::raw(ActionKind::GoForward, None, "")
    }

    pub fn none(answer: impl Into<String>) -> Self {
        Self::raw(ActionKind::None, None, answer)
    }

    pub fn stop(reason: impl Into<String>) -> Self {
        Self::raw(ActionKind::Stop, None, reason)
    }

    pub fn with_instruction(mut self, instruction: impl Into<String>) -> Self {
        self.low_level_instruction = instruction.into();
        self
    }

    /// Checks the structural invariants of the action space.
    pub fn validate(&self) -> Result<(), ActionError> {
        let kind = self.kind;
        if kind.targets_element() && self.element_id.is_none() {
            return Err(ActionError::Invalid(format!("{kind} requires an element id")));
        }
        if !kind.targets_element() && self.element_id.is_some() {
            return Err(ActionError::Invalid(format!("{kind} takes no element id")));
        }
        if kind.requires_value() && self.value.is_empty() {
            return Err(ActionError::Invalid(format!("{kind} requires a non-empty value")));
        }
        if !kind.requires_value() && !self.value.is_empty() {
            return Err(ActionError::Invalid(format!("{kind} takes no value")));
        }
        if kind == ActionKind::Scroll && self.value != "up" && self.value != "down" {
            return Err(ActionError::Invalid(format!(
                "scroll direction must be up or down, got `{}`",
                self.value
            )));
        }
        if self.value.contains(']') {
            return Err(ActionError::Invalid("value must not contain `]`".into()));
        }
        Ok(())
    }

    /// `none` with a non-empty answer.
    pub fn is_valid_completion(&self) -> bool {
        self.kind == ActionKind::None && !self.value.is_empty()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.as_str())?;
        if let Some(id) = self.element_id {
            write!(f, " [{id}]")?;
        }
        if self.kind.requires_value() {
            write!(f, " [{}]", self.value)?;
        }
        Ok(())
    }
}

/// Renders the canonical wire string.
pub fn render_action(action: &Action) -> Result<String, ActionError> {
    action.validate()?;
    Ok(action.to_string())
}

/// Parses a wire string such as `click [7]` or `type [3] [hello]`.
pub fn parse_action(text: &str) -> Result<Action, ActionError> {
    let trimmed = text.trim();
    let (head, rest) = match trimmed.find(|c: char| c.is_whitespace() || c == '[') {
        Some(pos) => trimmed.split_at(pos),
        None => (trimmed, ""),
    };
    if head.is_empty() {
        return Err(malformed(text, "missing action kind"));
    }
    let kind: ActionKind = head.parse().map_err(|_| malformed(text, "unknown action kind"))?;
    let args = bracket_args(text, rest)?;

    let expected = usize::from(kind.targets_element()) + usize::from(kind.requires_value());
    if args.len() != expected {
        return Err(malformed(
            text,
            format!("{kind} takes {expected} bracketed argument(s), found {}", args.len()),
        ));
    }

    let mut args = args.into_iter();
    let element_id = if kind.targets_element() {
        let raw = args.next().unwrap_or_default();
        let id = raw
            .trim()
            .parse::<u32>()
            .map_err(|_| malformed(text, format!("element id `{raw}` is not a non-negative integer")))?;
        Some(id)
    } else {
        None
    };
    let value = if kind.requires_value() {
        args.next().unwrap_or_default()
    } else {
        String::new()
    };

    let action = Action::raw(kind, element_id, value);
    action.validate().map_err(|e| match e {
        ActionError::Invalid(reason) => malformed(text, reason),
        other => other,
    })?;
    Ok(action)
}

fn bracket_args(text: &str, mut rest: &str) -> Result<Vec<String>, ActionError> {
    let mut out = Vec::new();
    loop {
        rest = rest.trim_start();
        if rest.is_empty() {
            return Ok(out);
        }
        let Some(body) = rest.strip_prefix('[') else {
            return Err(malformed(text, "expected `[`"));
        };
        let Some(close) = body.find(']') else {
            return Err(malformed(text, "unterminated `[`"));
        };
        out.push(body[..close].to_string());
        rest = &body[close + 1..];
        if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
            return Err(malformed(text, "unexpected text after `]`"));
        }
    }
}

impl FromStr for Action {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_action(s)
    }
}

/// Serialized form: the wire string plus the free-text instruction.
#[derive(Serialize, Deserialize)]
struct ActionRecord {
    action: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    low_level_instruction: String,
}

impl From<Action> for ActionRecord {
    fn from(a: Action) -> Self {
        ActionRecord {
            action: a.to_string(),
            low_level_instruction: a.low_level_instruction,
        }
    }
}

impl TryFrom<ActionRecord> for Action {
    type Error = ActionError;

    fn try_from(r: ActionRecord) -> Result<Self, Self::Error> {
        Ok(parse_action(&r.action)?.with_instruction(r.low_level_instruction))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_click() {
        let a = parse_action("click [12]").unwrap();
        assert_eq!(a.kind, ActionKind::Click);
        assert_eq!(a.element_id, Some(12));
        assert_eq!(a.value, "");
    }

    #[test]
    fn parses_no_argument_kinds() {
        assert_eq!(parse_action("go_back").unwrap(), Action::go_back());
        assert_eq!(parse_action("  go_forward ").unwrap(), Action::go_forward());
    }

    #[test]
    fn rejects_empty_type_value() {
        assert!(matches!(
            parse_action("type [3] []"),
            Err(ActionError::Malformed { .. })
        ));
    }

    #[test]
    fn renders_scroll_and_none() {
        assert_eq!(render_action(&Action::scroll("down")).unwrap(), "scroll [down]");
        assert_eq!(
            render_action(&Action::none("Cheapest is X")).unwrap(),
            "none [Cheapest is X]"
        );
    }

    #[test]
    fn type_value_keeps_inner_spaces_and_open_brackets() {
        let a = parse_action("type [3] [red [large] shoes]");
        assert!(a.is_err(), "closing bracket inside value is ambiguous");
        let a = parse_action("type [3] [red [large shoes]").unwrap();
        assert_eq!(a.value, "red [large shoes");
    }

    #[test]
    fn render_rejects_invalid() {
        let mut a = Action::click(1);
        a.element_id = None;
        assert!(matches!(render_action(&a), Err(ActionError::Invalid(_))));
        assert!(render_action(&Action::scroll("left")).is_err());
        assert!(render_action(&Action::none("")).is_err());
    }

    #[test]
    fn upper_case_kinds_parse() {
        assert_eq!(parse_action("CLICK [4]").unwrap(), Action::click(4));
        assert_eq!("GO_BACK".parse::<ActionKind>().unwrap(), ActionKind::GoBack);
    }

    #[test]
    fn serde_goes_through_wire_grammar() {
        let a = Action::type_text(3, "hello").with_instruction("Type hello");
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, r#"{"action":"type [3] [hello]","low_level_instruction":"Type hello"}"#);
        let back: Action = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<Action>(r#"{"action":"click [x]"}"#).is_err());
    }
}
