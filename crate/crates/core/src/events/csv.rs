//! Event CSV format.
//!
//! Line 1 is a mandatory directive `# sensor <W>x<H> window <T0> <T1>`,
//! optionally followed by a header line `t,x,y,p`, then one `t,x,y,p` record
//! per line with integer fields. Records may be unsorted on disk; parsing
//! stable-sorts them by timestamp.

use super::{Event, EventError, EventStream};

/// Parses the event CSV format, validating bounds and window membership.
pub fn parse_event_csv(text: &str) -> Result<EventStream, EventError> {
    let mut lines = text.lines().enumerate();
    let (_, directive) = lines
        .next()
        .ok_or_else(|| EventError::BadDirective("empty input".into()))?;
    let (width, height, t_start, t_end) = parse_directive(directive)?;

    let mut events = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed == "t,x,y,p" {
            continue;
        }
        let ev = parse_record(trimmed, line_no)?;
        // Validate here so errors carry the offending line number.
        if ev.x >= width || ev.y >= height {
            return Err(EventError::OutOfBounds {
                line: line_no,
                x: ev.x,
                y: ev.y,
                width,
                height,
            });
        }
        if ev.t < t_start || ev.t > t_end {
            return Err(EventError::OutsideWindow {
                line: line_no,
                t: ev.t,
                t_start,
                t_end,
            });
        }
        events.push(ev);
    }
    EventStream::from_unsorted(events, width, height, t_start, t_end)
}

fn parse_directive(line: &str) -> Result<(u32, u32, u64, u64), EventError> {
    let bad = |msg: &str| EventError::BadDirective(format!("{msg}: {line:?}"));
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 6 || tokens[0] != "#" || tokens[1] != "sensor" || tokens[3] != "window" {
        return Err(bad("expected `# sensor WxH window T0 T1`"));
    }
    let (w, h) = tokens[2]
        .split_once('x')
        .ok_or_else(|| bad("sensor size must be WxH"))?;
    let width: u32 = w.parse().map_err(|_| bad("bad sensor width"))?;
    let height: u32 = h.parse().map_err(|_| bad("bad sensor height"))?;
    let t_start: u64 = tokens[4].parse().map_err(|_| bad("bad window start"))?;
    let t_end: u64 = tokens[5].parse().map_err(|_| bad("bad window end"))?;
    Ok((width, height, t_start, t_end))
}

fn parse_record(line: &str, line_no: usize) -> Result<Event, EventError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return Err(EventError::MalformedLine {
            line: line_no,
            msg: format!("expected 4 comma-separated fields, got {}", fields.len()),
        });
    }
    let t: u64 = fields[0].trim().parse().map_err(|_| EventError::MalformedLine {
        line: line_no,
        msg: format!("bad timestamp {:?}", fields[0]),
    })?;
    let x: u32 = fields[1].trim().parse().map_err(|_| EventError::MalformedLine {
        line: line_no,
        msg: format!("bad x {:?}", fields[1]),
    })?;
    let y: u32 = fields[2].trim().parse().map_err(|_| EventError::MalformedLine {
        line: line_no,
        msg: format!("bad y {:?}", fields[2]),
    })?;
    let p_raw: i64 = fields[3].trim().parse().map_err(|_| EventError::MalformedLine {
        line: line_no,
        msg: format!("bad polarity {:?}", fields[3]),
    })?;
    if p_raw != -1 && p_raw != 1 {
        return Err(EventError::BadPolarity {
            line: line_no,
            value: p_raw,
        });
    }
    Ok(Event {
        t,
        x,
        y,
        p: p_raw as i8,
    })
}

/// Serializes a stream; `parse_event_csv(write_event_csv(s)) == s`.
pub fn write_event_csv(stream: &EventStream) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# sensor {}x{} window {} {}\n",
        stream.sensor_width, stream.sensor_height, stream.t_start, stream.t_end
    ));
    for ev in stream.events() {
        out.push_str(&format!("{},{},{},{}\n", ev.t, ev.x, ev.y, ev.p));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_record() {
        let s = parse_event_csv("# sensor 4x4 window 0 100\n10,1,2,1").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.events()[0], Event { t: 10, x: 1, y: 2, p: 1 });
        assert_eq!((s.sensor_width, s.sensor_height), (4, 4));
        assert_eq!((s.t_start, s.t_end), (0, 100));
    }

    #[test]
    fn parses_empty_stream() {
        let s = parse_event_csv("# sensor 4x4 window 0 100\n").unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn skips_header_line() {
        let s = parse_event_csv("# sensor 4x4 window 0 100\nt,x,y,p\n10,1,2,1\n").unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn sorts_unsorted_records() {
        let s = parse_event_csv("# sensor 4x4 window 0 100\n30,1,1,1\n10,2,2,-1\n").unwrap();
        let ts: Vec<u64> = s.events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![10, 30]);
    }

    #[test]
    fn rejects_zero_polarity_with_line() {
        let err = parse_event_csv("# sensor 4x4 window 0 100\n10,1,2,0\n").unwrap_err();
        match err {
            EventError::BadPolarity { line, value } => {
                assert_eq!(line, 2);
                assert_eq!(value, 0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_line_with_number() {
        let err = parse_event_csv("# sensor 4x4 window 0 100\n10,1,2,1\nbogus\n").unwrap_err();
        match err {
            EventError::MalformedLine { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_window_record() {
        let err = parse_event_csv("# sensor 4x4 window 0 100\n101,1,2,1\n").unwrap_err();
        assert!(matches!(err, EventError::OutsideWindow { .. }));
    }

    #[test]
    fn rejects_missing_directive() {
        assert!(parse_event_csv("10,1,2,1\n").is_err());
    }

    #[test]
    fn writes_empty_stream_as_directive_only() {
        let s = EventStream::new(Vec::new(), 4, 4, 0, 100).unwrap();
        assert_eq!(write_event_csv(&s), "# sensor 4x4 window 0 100\n");
    }

    #[test]
    fn round_trips_one_event() {
        let s = EventStream::new(
            vec![Event { t: 10, x: 1, y: 2, p: -1 }],
            4,
            4,
            0,
            100,
        )
        .unwrap();
        let text = write_event_csv(&s);
        assert_eq!(text, "# sensor 4x4 window 0 100\n10,1,2,-1\n");
        assert_eq!(parse_event_csv(&text).unwrap(), s);
    }
}
