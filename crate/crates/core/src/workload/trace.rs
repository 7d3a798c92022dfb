//! JSON-Lines allocation traces.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Spawn,
    Alloc,
    Free,
    Exit,
}

fn one() -> u64 {
    1
}

/// One line of a trace. `free` releases `n` live blocks of `order`, which
/// ones is up to the replay. `parent` marks page-table stand-in domains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub t: u64,
    pub dom: u32,
    pub act: Action,
    #[serde(default)]
    pub order: u32,
    #[serde(default = "one")]
    pub n: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<u32>,
}

impl TraceEvent {
    pub fn spawn(t: u64, dom: u32, parent: Option<u32>) -> Self {
        TraceEvent {
            t,
            dom,
            act: Action::Spawn,
            order: 0,
            n: 1,
            parent,
        }
    }

    pub fn alloc(t: u64, dom: u32, order: u32, n: u64) -> Self {
        TraceEvent {
            t,
            dom,
            act: Action::Alloc,
            order,
            n,
            parent: None,
        }
    }

    pub fn free(t: u64, dom: u32, order: u32, n: u64) -> Self {
        TraceEvent {
            act: Action::Free,
            ..TraceEvent::alloc(t, dom, order, n)
        }
    }

    pub fn exit(t: u64, dom: u32) -> Self {
        TraceEvent {
            act: Action::Exit,
            ..TraceEvent::spawn(t, dom, None)
        }
    }

    /// Pages requested or released by this event.
    pub fn pages(&self) -> u64 {
        match self.act {
            Action::Alloc | Action::Free => self.n << self.order,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Life {
    Alive(BTreeMap<u32, u64>),
    Exited,
}

/// Incremental ordering and balance checks.
#[derive(Clone, Debug, Default)]
pub struct Validator {
    last_t: u64,
    doms: BTreeMap<u32, Life>,
}

impl Validator {
    pub fn check(&mut self, line: usize, ev: &TraceEvent) -> Result<()> {
        let bad = |reason: String| Error::Trace { line, reason };
        if ev.t < self.last_t {
            return Err(bad(format!("time went back from {} to {}", self.last_t, ev.t)));
        }
        self.last_t = ev.t;
        if ev.parent.is_some() && ev.act != Action::Spawn {
            return Err(bad("only spawn events carry a parent".into()));
        }
        match ev.act {
            Action::Spawn => {
                if self.doms.contains_key(&ev.dom) {
                    return Err(bad(format!("domain {} spawned twice", ev.dom)));
                }
                if let Some(p) = ev.parent {
                    if !matches!(self.doms.get(&p), Some(Life::Alive(_))) {
                        return Err(bad(format!("parent {p} of domain {} is not running", ev.dom)));
                    }
                }
                self.doms.insert(ev.dom, Life::Alive(BTreeMap::new()));
            }
            Action::Alloc | Action::Free => {
                if ev.n == 0 {
                    return Err(bad("n must be at least 1".into()));
                }
                if ev.order > 20 {
                    return Err(bad(format!("order {} is too large", ev.order)));
                }
                let Some(Life::Alive(live)) = self.doms.get_mut(&ev.dom) else {
                    return Err(bad(format!("{:?} for domain {} outside its lifetime", ev.act, ev.dom)));
                };
                let count = live.entry(ev.order).or_insert(0);
                if ev.act == Action::Alloc {
                    *count += ev.n;
                } else if *count < ev.n {
                    return Err(bad(format!(
                        "domain {} frees {} order-{} block(s) but holds {}",
                        ev.dom, ev.n, ev.order, count
                    )));
                } else {
                    *count -= ev.n;
                }
            }
            Action::Exit => match self.doms.get(&ev.dom) {
                Some(Life::Alive(live)) => {
                    if live.values().any(|&c| c > 0) {
                        return Err(bad(format!("domain {} exits holding memory", ev.dom)));
                    }
                    self.doms.insert(ev.dom, Life::Exited);
                }
                _ => return Err(bad(format!("exit of domain {} that is not running", ev.dom))),
            },
        }
        Ok(())
    }
}

/// Validates a whole event sequence, numbering lines from 1.
pub fn validate(events: &[TraceEvent]) -> Result<()> {
    let mut v = Validator::default();
    for (i, ev) in events.iter().enumerate() {
        v.check(i + 1, ev)?;
    }
    Ok(())
}

pub fn parse_trace<R: BufRead>(r: R) -> Result<Vec<TraceEvent>> {
    let mut v = Validator::default();
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(&line).map_err(|e| Error::Trace {
            line: i + 1,
            reason: e.to_string(),
        })?;
        v.check(i + 1, &ev)?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(events: &[TraceEvent], mut w: W) -> Result<()> {
    for ev in events {
        serde_json::to_writer(&mut w, ev)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(events: &[TraceEvent]) -> String {
        let mut buf = Vec::new();
        write_trace(events, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_trace() {
        assert!(parse_trace(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn line_format() {
        let evs = vec![
            TraceEvent::spawn(0, 7, None),
            TraceEvent::alloc(1, 7, 0, 3),
            TraceEvent::spawn(1, 8, Some(7)),
        ];
        let s = text(&evs);
        let first = s.lines().next().unwrap();
        assert_eq!(first, r#"{"t":0,"dom":7,"act":"spawn","order":0,"n":1}"#);
        assert!(s.lines().nth(2).unwrap().ends_with(r#""parent":7}"#));
        assert_eq!(parse_trace(s.as_bytes()).unwrap(), evs);
    }

    #[test]
    fn defaults_for_missing_fields() {
        let evs = parse_trace(&b"{\"t\":0,\"dom\":1,\"act\":\"spawn\"}\n{\"t\":0,\"dom\":1,\"act\":\"alloc\"}\n"[..]).unwrap();
        assert_eq!(evs[1], TraceEvent::alloc(0, 1, 0, 1));
    }

    #[test]
    fn alloc_before_spawn_names_line() {
        let s = text(&[TraceEvent::spawn(0, 1, None), TraceEvent::alloc(1, 2, 0, 1)]);
        match parse_trace(s.as_bytes()) {
            Err(Error::Trace { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_sequences() {
        let cases: Vec<Vec<TraceEvent>> = vec![
            vec![TraceEvent::spawn(5, 1, None), TraceEvent::spawn(4, 2, None)],
            vec![TraceEvent::spawn(0, 1, None), TraceEvent::free(0, 1, 0, 1)],
            vec![
                TraceEvent::spawn(0, 1, None),
                TraceEvent::alloc(0, 1, 1, 1),
                TraceEvent::free(0, 1, 0, 1),
            ],
            vec![TraceEvent::spawn(0, 1, None), TraceEvent::alloc(0, 1, 0, 1), TraceEvent::exit(1, 1)],
            vec![TraceEvent::spawn(0, 1, None), TraceEvent::exit(1, 1), TraceEvent::spawn(2, 1, None)],
            vec![TraceEvent::spawn(0, 2, Some(1))],
        ];
        for evs in cases {
            assert!(validate(&evs).is_err(), "{evs:?}");
        }
    }

    #[test]
    fn malformed_line() {
        let err = parse_trace(&b"{\"t\":0,\"dom\":1,\"act\":\"spawn\"}\n{\"t\":1,\"dom\":1,\"act\":\"grow\"}\n"[..]);
        assert!(matches!(err, Err(Error::Trace { line: 2, .. })));
    }
}
