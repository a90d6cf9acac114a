use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use regex::Regex;

use super::site_graph::{PageSpec, SiteGraph, Transition};
use super::{EnvError, Environment, TransitionOutcome};
use crate::action::{Action, ActionKind};
use crate::model::{Element, Observation};

/// One single-owner episode over a [`SiteGraph`].
#[derive(Debug, Clone)]
pub struct SimSession {
    graph: Arc<SiteGraph>,
    /// Browser history; the last entry is the current page. Never empty.
    history_stack: Vec<String>,
    forward_stack: Vec<String>,
    state: BTreeMap<String, String>,
    scrolled: bool,
    terminal: bool,
    step_counter: usize,
    navigated: bool,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z0-9_.:\-]+)\s*\}\}").unwrap())
}

fn fill(template: &str, state: &BTreeMap<String, String>) -> String {
    placeholder_re()
        .replace_all(template, |caps: &regex::Captures<'_>| {
            state.get(&caps[1]).cloned().unwrap_or_default()
        })
        .into_owned()
}

impl SimSession {
    /// Validates the graph and starts a session at its start page.
    pub fn reset(graph: Arc<SiteGraph>) -> Result<SimSession, EnvError> {
        let mut check = (*graph).clone();
        check.validate()?;
        Ok(Self::fresh(graph))
    }

    /// Starts a session over a graph that is already known to be valid.
    pub(crate) fn fresh(graph: Arc<SiteGraph>) -> SimSession {
        let start = graph.start_page.clone();
        SimSession {
            graph,
            history_stack: vec![start],
            forward_stack: Vec::new(),
            state: BTreeMap::new(),
            scrolled: false,
            terminal: false,
            step_counter: 0,
            navigated: false,
        }
    }

    pub fn current_page_id(&self) -> &str {
        self.history_stack.last().expect("history stack never empty")
    }

    pub fn state(&self) -> &BTreeMap<String, String> {
        &self.state
    }

    pub fn step_counter(&self) -> usize {
        self.step_counter
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    fn page(&self) -> &PageSpec {
        self.graph
            .page(self.current_page_id())
            .expect("validated graph contains every visited page")
    }

    fn visible_elements(&self) -> Vec<Element> {
        let page = self.page();
        let fold = page.below_fold.as_ref().filter(|_| self.scrolled);
        page.elements
            .iter()
            .chain(fold.into_iter().flat_map(|b| b.elements.iter()))
            .map(|e| Element {
                name: fill(&e.name, &self.state),
                ..e.clone()
            })
            .collect()
    }

    fn snapshot(&self) -> Observation {
        let page = self.page();
        let mut tree = fill(&page.tree_template, &self.state);
        if let (true, Some(fold)) = (self.scrolled, &page.below_fold) {
            tree.push('\n');
            tree.push_str(&fill(&fold.tree_template, &self.state));
        }
        Observation {
            url: page.url.clone(),
            accessibility_tree: tree,
            elements: self.visible_elements(),
            screenshot_ref: None,
        }
    }

    fn navigate(&mut self, page_id: String) {
        self.history_stack.push(page_id);
        self.forward_stack.clear();
        self.scrolled = false;
        self.navigated = true;
    }

    fn find_transition(&self, action: &Action) -> Option<Transition> {
        self.page()
            .transitions
            .iter()
            .find(|t| {
                t.kind == action.kind
                    && t.element_id == action.element_id
                    && t.value_matches(&action.value)
                    && t.guard_holds(&self.state)
            })
            .cloned()
    }

    /// Applies the action; returns an error message for failed-but-consumed
    /// actions.
    fn apply(&mut self, action: &Action) -> Option<String> {
        if let Some(tr) = self.find_transition(action) {
            for (key, value) in &tr.effect.set {
                let value = fill(&value.replace("$value", &action.value), &self.state);
                self.state.insert(key.clone(), value);
            }
            if let Some(target) = tr.effect.goto.clone() {
                self.navigate(target);
            }
            return tr.effect.error.clone();
        }
        match action.kind {
            ActionKind::Type => {
                let key = format!(
                    "input.{}.{}",
                    self.current_page_id(),
                    action.element_id.unwrap_or_default()
                );
                self.state.insert(key, action.value.clone());
                None
            }
            ActionKind::Scroll => {
                let has_fold = self.page().below_fold.is_some();
                match action.value.as_str() {
                    "down" if has_fold => self.scrolled = true,
                    "up" => self.scrolled = false,
                    _ => {}
                }
                None
            }
            ActionKind::Goto => match self.graph.page_by_url(&action.value) {
                Some(id) => {
                    let id = id.to_string();
                    self.navigate(id);
                    None
                }
                None => Some(format!("404 Not Found: {}", action.value)),
            },
            ActionKind::GoBack => {
                if self.history_stack.len() > 1 {
                    let departed = self.history_stack.pop().expect("len > 1");
                    self.forward_stack.push(departed);
                    self.scrolled = false;
                    self.navigated = true;
                }
                None
            }
            ActionKind::GoForward => {
                if let Some(next) = self.forward_stack.pop() {
                    self.history_stack.push(next);
                    self.scrolled = false;
                    self.navigated = true;
                }
                None
            }
            ActionKind::None | ActionKind::Stop => {
                self.terminal = true;
                None
            }
            ActionKind::Click | ActionKind::Hover | ActionKind::Press => None,
        }
    }
}

impl Environment for SimSession {
    fn reset(&mut self) -> Result<(), EnvError> {
        *self = SimSession::fresh(self.graph.clone());
        Ok(())
    }

    fn observe(&mut self) -> Result<Observation, EnvError> {
        Ok(self.snapshot())
    }

    fn execute(&mut self, action: &Action) -> Result<TransitionOutcome, EnvError> {
        if self.terminal {
            return Err(EnvError::SessionTerminal);
        }
        self.step_counter += 1;
        if let Err(e) = action.validate() {
            return Ok(TransitionOutcome::failed(e.to_string()));
        }
        let before = self.snapshot();
        if let Some(id) = action.element_id {
            if before.element(id).is_none() {
                return Err(EnvError::ElementNotFound(id));
            }
        }
        self.navigated = false;
        let mut error = self.apply(action);
        if error.is_none() && self.navigated {
            error = self.page().error_text.clone();
        }
        let after = self.snapshot();
        Ok(TransitionOutcome {
            changed: before.canonical_json() != after.canonical_json(),
            error,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRAPH: &str = r#"{
  "schema_version": 1,
  "start_page": "a",
  "pages": {
    "a": {
      "url": "http://x/a",
      "tree_template": "RootWebArea \"A\"\n  link \"To B\" [1]\n  textbox \"Name: {{input.a.2}}\" [2]\n  StaticText \"user={{user}} {{missing}}\"",
      "elements": [
        {"id": 1, "role": "link", "name": "To B", "interactive": true},
        {"id": 2, "role": "textbox", "name": "Name: {{input.a.2}}", "interactive": true},
        {"id": 3, "role": "button", "name": "Save", "interactive": true}
      ],
      "transitions": [
        {"element_id": 1, "kind": "click", "effect": {"goto": "b"}},
        {"element_id": 3, "kind": "click", "when": {"input.a.2": "*"}, "effect": {"set": {"user": "{{input.a.2}}"}}},
        {"element_id": 3, "kind": "click", "effect": {"error": "Name is required"}}
      ],
      "below_fold": {
        "tree_template": "  link \"More\" [4]",
        "elements": [{"id": 4, "role": "link", "name": "More", "interactive": true}]
      }
    },
    "b": {
      "url": "http://x/b",
      "tree_template": "RootWebArea \"B\"\n  link \"To C\" [1]",
      "elements": [{"id": 1, "role": "link", "name": "To C", "interactive": true}],
      "transitions": [{"element_id": 1, "kind": "click", "effect": {"goto": "c"}}]
    },
    "c": {
      "url": "http://x/c",
      "tree_template": "RootWebArea \"C\"",
      "elements": [{"id": 1, "role": "heading", "name": "C", "interactive": false}]
    }
  }
}"#;

    fn session() -> SimSession {
        SimSession::reset(Arc::new(SiteGraph::from_json(GRAPH, "t").unwrap())).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = session();
        let mut b = session();
        assert_eq!(a.observe().unwrap(), b.observe().unwrap());
        assert_eq!(a.observe().unwrap().url, "http://x/a");
    }

    #[test]
    fn unknown_state_keys_render_empty() {
        let obs = session().observe().unwrap();
        assert!(obs.accessibility_tree.contains("StaticText \"user= \""));
    }

    #[test]
    fn click_link_navigates() {
        let mut s = session();
        let out = s.execute(&Action::click(1)).unwrap();
        assert!(out.changed);
        assert_eq!(s.observe().unwrap().url, "http://x/b");
    }

    #[test]
    fn scroll_without_fold_is_noop_and_fold_reveals_elements() {
        let mut s = session();
        s.execute(&Action::click(1)).unwrap();
        let out = s.execute(&Action::scroll("down")).unwrap();
        assert_eq!(out, TransitionOutcome::noop());

        let mut s = session();
        assert!(s.execute(&Action::click(4)).is_err());
        let out = s.execute(&Action::scroll("down")).unwrap();
        assert!(out.changed);
        assert!(s.observe().unwrap().element(4).is_some());
        assert!(!s.execute(&Action::scroll("down")).unwrap().changed);
        assert!(s.execute(&Action::scroll("up")).unwrap().changed);
    }

    #[test]
    fn missing_element_is_an_error() {
        let mut s = session();
        assert!(matches!(
            s.execute(&Action::click(99)),
            Err(EnvError::ElementNotFound(99))
        ));
    }

    #[test]
    fn history_semantics() {
        let mut s = session();
        let a = s.observe().unwrap();
        s.execute(&Action::click(1)).unwrap();
        let b = s.observe().unwrap();
        assert!(s.execute(&Action::go_back()).unwrap().changed);
        assert_eq!(s.observe().unwrap(), a);
        assert!(s.execute(&Action::go_forward()).unwrap().changed);
        assert_eq!(s.observe().unwrap(), b);
        // New navigation clears the forward stack.
        s.execute(&Action::go_back()).unwrap();
        s.execute(&Action::goto("http://x/c")).unwrap();
        assert!(!s.execute(&Action::go_forward()).unwrap().changed);
        // Nothing before the start page.
        let mut s = session();
        assert!(!s.execute(&Action::go_back()).unwrap().changed);
    }

    #[test]
    fn guarded_transitions_model_forms() {
        let mut s = session();
        let out = s.execute(&Action::click(3)).unwrap();
        assert_eq!(out.error.as_deref(), Some("Name is required"));
        assert!(!out.changed);
        assert!(s.execute(&Action::type_text(2, "emma")).unwrap().changed);
        s.execute(&Action::click(3)).unwrap();
        assert_eq!(s.state().get("user").map(String::as_str), Some("emma"));
        assert!(s.observe().unwrap().accessibility_tree.contains("user=emma"));
    }

    #[test]
    fn unknown_goto_reports_error() {
        let mut s = session();
        let out = s.execute(&Action::goto("http://x/nope")).unwrap();
        assert!(!out.changed);
        assert!(out.error.unwrap().starts_with("404"));
    }

    #[test]
    fn terminal_actions_end_session() {
        let mut s = session();
        let out = s.execute(&Action::none("done")).unwrap();
        assert!(!out.changed);
        assert!(matches!(
            s.execute(&Action::click(1)),
            Err(EnvError::SessionTerminal)
        ));
        s.reset_session();
        assert!(s.execute(&Action::click(1)).is_ok());
    }

    impl SimSession {
        fn reset_session(&mut self) {
            Environment::reset(self).unwrap();
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let script = [
            Action::scroll("down"),
            Action::type_text(2, "bob"),
            Action::click(1),
            Action::go_back(),
            Action::click(3),
        ];
        let run = || {
            let mut s = session();
            let mut seen = vec![s.observe().unwrap()];
            for a in &script {
                s.execute(a).unwrap();
                seen.push(s.observe().unwrap());
            }
            seen
        };
        assert_eq!(run(), run());
    }
}
