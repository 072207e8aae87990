use std::fmt;

use super::RankId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Put,
    Get,
    FetchAdd,
    Send,
    Recv,
    Expose,
    Resize,
    Collective,
    Fail,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Op::Put => "put",
            Op::Get => "get",
            Op::FetchAdd => "fetch_add",
            Op::Send => "send",
            Op::Recv => "recv",
            Op::Expose => "expose",
            Op::Resize => "resize",
            Op::Collective => "collective",
            Op::Fail => "fail",
        };
        f.write_str(s)
    }
}

/// One fabric event. `scope` is the label the calling rank had active, which
/// lets tests attribute traffic to a code path (e.g. `ckpt.amft`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub op: Op,
    pub src: RankId,
    pub dst: Option<RankId>,
    pub bytes: usize,
    pub scope: &'static str,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dst = match self.dst {
            Some(d) => d.to_string(),
            None => "-".into(),
        };
        write!(
            f,
            "{} {} src={} dst={} bytes={} scope={}",
            self.seq, self.op, self.src, dst, self.bytes, self.scope
        )
    }
}

/// Events whose scope starts with `prefix`.
pub fn in_scope<'a>(events: &'a [TraceEvent], prefix: &'a str) -> impl Iterator<Item = &'a TraceEvent> {
    events.iter().filter(move |e| e.scope.starts_with(prefix))
}
