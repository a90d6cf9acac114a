//! Live-browser environment over the W3C WebDriver wire protocol.
//!
//! Each observation runs a snapshot script in the page that tags the visible
//! interactive elements with `data-sw-id` attributes (1, 2, … in document
//! order) and returns a text tree. Ids are reassigned on every observation,
//! so an id is only meaningful against the observation it came from.
//! Screenshots are written as `{sha256}.png` under the screenshot directory
//! and referenced by path.

use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use base64::Engine as _;
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::action::{Action, ActionKind};
use crate::env::{EnvError, EnvFactory, Environment, TransitionOutcome};
use crate::model::{Element, Observation};

/// W3C web-element reference key.
const ELEMENT_KEY: &str = "element-6066-11e4-a52e-4f735466cecf";

const SNAPSHOT_JS: &str = r#"
const SEL = 'a[href],button,input:not([type=hidden]),select,textarea,[role=button],[role=link],[role=checkbox],[role=tab],[role=menuitem],[role=combobox],[role=searchbox],[role=textbox],[onclick],[contenteditable=true]';
document.querySelectorAll('[data-sw-id]').forEach(e => e.removeAttribute('data-sw-id'));
const shown = e => { const r = e.getBoundingClientRect(); const s = getComputedStyle(e);
  return r.width > 0 && r.height > 0 && s.visibility !== 'hidden' && s.display !== 'none'
    && r.bottom > 0 && r.top < innerHeight; };
const roleOf = e => e.getAttribute('role')
  || ({A: 'link', BUTTON: 'button', SELECT: 'combobox', TEXTAREA: 'textbox'})[e.tagName]
  || (e.tagName === 'INPUT' ? (({checkbox: 'checkbox', radio: 'radio', submit: 'button', button: 'button', search: 'searchbox'})[e.type] || 'textbox') : e.tagName.toLowerCase());
const nameOf = e => (e.getAttribute('aria-label') || e.innerText || e.value || e.placeholder || e.title || e.alt || '')
  .trim().replace(/\s+/g, ' ').replace(/"/g, "'").slice(0, 80);
const lines = ['RootWebArea "' + document.title.replace(/"/g, "'") + '"'];
const elements = [];
let id = 0;
for (const e of document.querySelectorAll(SEL)) {
  if (!shown(e)) continue;
  id += 1;
  e.setAttribute('data-sw-id', String(id));
  const role = roleOf(e), name = nameOf(e);
  elements.push({id, role, name, interactive: true});
  lines.push('  ' + role + ' "' + name + '" [' + id + ']');
}
let alert = null;
for (const h of document.querySelectorAll('h1,h2,h3,[role=alert]')) {
  if (!shown(h)) continue;
  const role = h.getAttribute('role') || 'heading';
  if (role === 'alert' && alert === null) alert = nameOf(h);
  lines.push('  ' + role + ' "' + nameOf(h) + '"');
}
return {url: location.href, tree: lines.join('\n'), elements, alert};
"#;

#[derive(Debug, Deserialize)]
struct Snapshot {
    url: String,
    tree: String,
    elements: Vec<Element>,
    #[serde(default)]
    alert: Option<String>,
}

/// A failed WebDriver command, as reported by the remote end.
#[derive(Debug)]
enum WdError {
    Transport(String),
    Command { error: String, message: String },
}

impl WdError {
    fn into_env(self) -> EnvError {
        match self {
            WdError::Transport(m) => EnvError::ConnectFailed(m),
            WdError::Command { error, message } => EnvError::Protocol(format!("{error}: {message}")),
        }
    }
}

#[derive(Clone)]
struct Client {
    agent: ureq::Agent,
    base: String,
}

impl Client {
    fn new(endpoint: &str, timeout: Duration) -> Client {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Client {
            agent,
            base: endpoint.trim_end_matches('/').to_string(),
        }
    }

    fn call(&self, method: &str, path: &str, body: Option<Value>) -> Result<Value, WdError> {
        let url = format!("{}{path}", self.base);
        let transport = |e: ureq::Error| WdError::Transport(format!("{method} {url}: {e}"));
        let mut resp = match method {
            "GET" => self.agent.get(&url).call(),
            "DELETE" => self.agent.delete(&url).call(),
            _ => self.agent.post(&url).send_json(body.unwrap_or_else(|| json!({}))),
        }
        .map_err(transport)?;
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| WdError::Transport(format!("{method} {url}: reply is not JSON: {e}")))?;
        let value = v.get("value").cloned().unwrap_or(Value::Null);
        if let Some(error) = value.get("error").and_then(Value::as_str) {
            return Err(WdError::Command {
                error: error.to_string(),
                message: value["message"].as_str().unwrap_or("").to_string(),
            });
        }
        Ok(value)
    }
}

/// Opens one browser session per worker.
#[derive(Debug, Clone)]
pub struct WebDriverFactory {
    endpoint: String,
    start_url: String,
    screenshot_dir: PathBuf,
    capabilities: Value,
    timeout: Duration,
}

impl WebDriverFactory {
    pub fn new(endpoint: impl Into<String>, start_url: impl Into<String>, screenshot_dir: impl Into<PathBuf>) -> Self {
        WebDriverFactory {
            endpoint: endpoint.into(),
            start_url: start_url.into(),
            screenshot_dir: screenshot_dir.into(),
            capabilities: json!({"alwaysMatch": {"browserName": "chrome",
                "goog:chromeOptions": {"args": ["--headless=new", "--window-size=1280,1024"]}}}),
            timeout: Duration::from_secs(60),
        }
    }

    /// Replaces the `capabilities` object sent when creating sessions.
    pub fn with_capabilities(mut self, capabilities: Value) -> Self {
        self.capabilities = capabilities;
        self
    }
}

impl EnvFactory for WebDriverFactory {
    fn open(&self) -> Result<Box<dyn Environment + Send>, EnvError> {
        fs::create_dir_all(&self.screenshot_dir)
            .map_err(|e| EnvError::Protocol(format!("{}: {e}", self.screenshot_dir.display())))?;
        let client = Client::new(&self.endpoint, self.timeout);
        let v = client
            .call("POST", "/session", Some(json!({"capabilities": self.capabilities})))
            .map_err(WdError::into_env)?;
        let session_id = v["sessionId"]
            .as_str()
            .ok_or_else(|| EnvError::Protocol("new session reply has no sessionId".into()))?
            .to_string();
        let mut session = WebDriverSession {
            client,
            session_id,
            start_url: self.start_url.clone(),
            screenshot_dir: self.screenshot_dir.clone(),
            last: None,
            terminal: false,
        };
        session.reset()?;
        Ok(Box::new(session))
    }
}

pub struct WebDriverSession {
    client: Client,
    session_id: String,
    start_url: String,
    screenshot_dir: PathBuf,
    /// Observation whose element ids are currently valid.
    last: Option<Observation>,
    terminal: bool,
}

impl WebDriverSession {
    fn cmd(&self, method: &str, tail: &str, body: Option<Value>) -> Result<Value, WdError> {
        self.client
            .call(method, &format!("/session/{}{tail}", self.session_id), body)
    }

    fn script(&self, js: &str, args: Value) -> Result<Value, WdError> {
        self.cmd("POST", "/execute/sync", Some(json!({"script": js, "args": args})))
    }

    fn element_ref(&self, id: u32) -> Result<String, WdError> {
        let v = self.cmd(
            "POST",
            "/element",
            Some(json!({"using": "css selector", "value": format!("[data-sw-id=\"{id}\"]")})),
        )?;
        v[ELEMENT_KEY]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| WdError::Transport("element reply has no reference".into()))
    }

    fn save_screenshot(&self) -> Result<Option<String>, EnvError> {
        let v = self.cmd("GET", "/screenshot", None).map_err(WdError::into_env)?;
        let Some(b64) = v.as_str() else {
            return Ok(None);
        };
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| EnvError::Protocol(format!("screenshot is not base64: {e}")))?;
        let path = self
            .screenshot_dir
            .join(format!("{}.png", hex::encode(Sha256::digest(&bytes))));
        if !path.exists() {
            fs::write(&path, &bytes).map_err(|e| EnvError::Protocol(format!("{}: {e}", path.display())))?;
        }
        Ok(Some(path.display().to_string()))
    }

    fn snapshot(&mut self) -> Result<(Observation, Option<String>), EnvError> {
        let v = self.script(SNAPSHOT_JS, json!([])).map_err(WdError::into_env)?;
        let snap: Snapshot =
            serde_json::from_value(v).map_err(|e| EnvError::Protocol(format!("snapshot script: {e}")))?;
        let obs = Observation {
            url: snap.url,
            accessibility_tree: snap.tree,
            elements: snap.elements,
            screenshot_ref: self.save_screenshot()?,
        };
        self.last = Some(obs.clone());
        Ok((obs, snap.alert))
    }

    fn perform(&self, action: &Action) -> Result<(), WdError> {
        match action.kind {
            ActionKind::Click => {
                let r = self.element_ref(action.element_id.unwrap_or_default())?;
                self.cmd("POST", &format!("/element/{r}/click"), None)?;
            }
            ActionKind::Type => {
                let r = self.element_ref(action.element_id.unwrap_or_default())?;
                self.cmd("POST", &format!("/element/{r}/clear"), None)?;
                self.cmd("POST", &format!("/element/{r}/value"), Some(json!({"text": action.value})))?;
            }
            ActionKind::Hover => {
                let r = self.element_ref(action.element_id.unwrap_or_default())?;
                self.cmd(
                    "POST",
                    "/actions",
                    Some(json!({"actions": [{
                        "type": "pointer", "id": "mouse", "parameters": {"pointerType": "mouse"},
                        "actions": [{"type": "pointerMove", "duration": 0, "x": 0, "y": 0,
                                     "origin": {ELEMENT_KEY: r}}]
                    }]})),
                )?;
            }
            ActionKind::Press => {
                let keys = key_codes(&action.value);
                let mut seq: Vec<Value> = keys.iter().map(|k| json!({"type": "keyDown", "value": k})).collect();
                seq.extend(keys.iter().rev().map(|k| json!({"type": "keyUp", "value": k})));
                self.cmd(
                    "POST",
                    "/actions",
                    Some(json!({"actions": [{"type": "key", "id": "keyboard", "actions": seq}]})),
                )?;
            }
            ActionKind::Scroll => {
                let dir = if action.value == "up" { -1 } else { 1 };
                self.script("window.scrollBy(0, arguments[0] * window.innerHeight * 0.8);", json!([dir]))?;
            }
            ActionKind::Goto => {
                self.cmd("POST", "/url", Some(json!({"url": action.value})))?;
            }
            ActionKind::GoBack => {
                self.cmd("POST", "/back", None)?;
            }
            ActionKind::GoForward => {
                self.cmd("POST", "/forward", None)?;
            }
            ActionKind::None | ActionKind::Stop => {}
        }
        Ok(())
    }
}

/// `Enter`, `Control+a`, … as WebDriver key code points.
fn key_codes(spec: &str) -> Vec<String> {
    spec.split('+')
        .map(|k| {
            let named = match k.to_ascii_lowercase().as_str() {
                "enter" | "return" => '\u{E007}',
                "tab" => '\u{E004}',
                "escape" | "esc" => '\u{E00C}',
                "backspace" => '\u{E003}',
                "delete" => '\u{E017}',
                "space" => '\u{E00D}',
                "arrowup" | "up" => '\u{E013}',
                "arrowdown" | "down" => '\u{E015}',
                "arrowleft" | "left" => '\u{E012}',
                "arrowright" | "right" => '\u{E014}',
                "pageup" => '\u{E00E}',
                "pagedown" => '\u{E00F}',
                "home" => '\u{E011}',
                "end" => '\u{E010}',
                "shift" => '\u{E008}',
                "control" | "ctrl" => '\u{E009}',
                "alt" => '\u{E00A}',
                "meta" | "cmd" => '\u{E03D}',
                _ => return k.to_string(),
            };
            named.to_string()
        })
        .collect()
}

/// Screenshots differ between renders of the same page, so they do not count
/// as a change.
fn same_view(a: &Observation, b: &Observation) -> bool {
    a.url == b.url && a.accessibility_tree == b.accessibility_tree && a.elements == b.elements
}

impl Environment for WebDriverSession {
    fn reset(&mut self) -> Result<(), EnvError> {
        self.terminal = false;
        self.last = None;
        // Cookies can only be cleared for the current origin, so load the
        // start page first, clear, and load it again.
        let start = json!({"url": self.start_url});
        self.cmd("POST", "/url", Some(start.clone())).map_err(WdError::into_env)?;
        self.cmd("DELETE", "/cookie", None).map_err(WdError::into_env)?;
        self.script("try { localStorage.clear(); sessionStorage.clear(); } catch (e) {}", json!([]))
            .map_err(WdError::into_env)?;
        self.cmd("POST", "/url", Some(start)).map_err(WdError::into_env)?;
        Ok(())
    }

    fn observe(&mut self) -> Result<Observation, EnvError> {
        Ok(self.snapshot()?.0)
    }

    fn execute(&mut self, action: &Action) -> Result<TransitionOutcome, EnvError> {
        if self.terminal {
            return Err(EnvError::SessionTerminal);
        }
        if let Err(e) = action.validate() {
            return Ok(TransitionOutcome::failed(e.to_string()));
        }
        let before = match self.last.clone() {
            Some(o) => o,
            None => self.observe()?,
        };
        if let Some(id) = action.element_id {
            if before.element(id).is_none() {
                return Err(EnvError::ElementNotFound(id));
            }
        }
        if matches!(action.kind, ActionKind::None | ActionKind::Stop) {
            self.terminal = true;
            return Ok(TransitionOutcome::noop());
        }
        let failure = match self.perform(action) {
            Ok(()) => None,
            // The command reached the browser and was refused: the action is
            // consumed and reported, the episode goes on.
            Err(WdError::Command { error, message }) => Some(format!("{error}: {message}")),
            Err(e) => return Err(e.into_env()),
        };
        let (after, alert) = self.snapshot()?;
        Ok(TransitionOutcome {
            changed: !same_view(&before, &after),
            error: failure.or(alert),
        })
    }
}

impl Drop for WebDriverSession {
    fn drop(&mut self) {
        let _ = self.client.call("DELETE", &format!("/session/{}", self.session_id), None);
    }
}
