//! Event CSV and the binary event container.
//!
//! CSV: header `t,neuron,polarity`, one event per row, polarity `1` (ON),
//! `-1` (OFF) or `0` (untagged), `\n` line endings.
//!
//! Binary container, all integers little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 8    | magic `SPKEVTS\0`                      |
//! | 8      | 4    | format version (u32, currently 1)      |
//! | 12     | 4    | horizon in steps (u32)                 |
//! | 16     | 8    | dt in seconds (f64)                    |
//! | 24     | 8    | event count n (u64)                    |
//! | 32     | 12 n | records: t (u32), neuron (u32), polarity (i32) |

use std::io::Write;

use super::{EncodingError, Polarity, SpikeEvent, SpikeEvents};

pub const EVENTS_MAGIC: &[u8; 8] = b"SPKEVTS\0";
pub const EVENTS_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;
const RECORD_LEN: usize = 12;

pub fn write_events_csv<W: Write>(events: &SpikeEvents, mut out: W) -> std::io::Result<()> {
    let mut buf = String::with_capacity(16 + events.len() * 12);
    buf.push_str("t,neuron,polarity\n");
    for e in events.events() {
        use std::fmt::Write as _;
        let _ = writeln!(buf, "{},{},{}", e.t, e.neuron, Polarity::code(e.polarity));
    }
    out.write_all(buf.as_bytes())
}

/// Parse an event CSV. The CSV carries no horizon or step length, so the
/// caller supplies them.
pub fn parse_events_csv(
    text: &str,
    horizon_steps: u32,
    dt: f64,
) -> Result<SpikeEvents, EncodingError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == "t,neuron,polarity" => {}
        _ => {
            return Err(EncodingError::Csv {
                line: 1,
                detail: "expected header `t,neuron,polarity`".into(),
            })
        }
    }
    let mut events = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let err = |detail: String| EncodingError::Csv {
            line: line_no,
            detail,
        };
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let t = fields[0]
            .parse()
            .map_err(|e| err(format!("timestep: {e}")))?;
        let neuron = fields[1].parse().map_err(|e| err(format!("neuron: {e}")))?;
        let code: i32 = fields[2]
            .parse()
            .map_err(|e| err(format!("polarity: {e}")))?;
        let polarity = Polarity::from_code(code)
            .ok_or_else(|| err(format!("polarity {code} not in {{1,-1,0}}")))?;
        events.push(SpikeEvent {
            t,
            neuron,
            polarity,
        });
    }
    SpikeEvents::new(events, horizon_steps, dt)
}

pub fn events_to_bytes(events: &SpikeEvents) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + events.len() * RECORD_LEN);
    out.extend_from_slice(EVENTS_MAGIC);
    out.extend_from_slice(&EVENTS_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&events.horizon_steps().to_le_bytes());
    out.extend_from_slice(&events.dt().to_le_bytes());
    out.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for e in events.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.neuron.to_le_bytes());
        out.extend_from_slice(&Polarity::code(e.polarity).to_le_bytes());
    }
    out
}

pub fn events_from_bytes(bytes: &[u8]) -> Result<SpikeEvents, EncodingError> {
    let bad = |m: String| EncodingError::Binary(m);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..8] != EVENTS_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != EVENTS_FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let horizon = u32_at(12);
    let dt = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let expected = (count as usize)
        .checked_mul(RECORD_LEN)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| bad(format!("event count {count} overflows")))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {count} events, found {}",
            bytes.len()
        )));
    }
    let events = bytes[HEADER_LEN..]
        .chunks_exact(RECORD_LEN)
        .map(|r| {
            let code = i32::from_le_bytes(r[8..12].try_into().unwrap());
            Ok(SpikeEvent {
                t: u32::from_le_bytes(r[0..4].try_into().unwrap()),
                neuron: u32::from_le_bytes(r[4..8].try_into().unwrap()),
                polarity: Polarity::from_code(code)
                    .ok_or_else(|| bad(format!("polarity code {code}")))?,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    SpikeEvents::new(events, horizon, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_events() -> impl Strategy<Value = SpikeEvents> {
        prop::collection::btree_set((0u32..50, 0u32..100, -1i32..=1), 0..60).prop_map(|set| {
            let events = set
                .into_iter()
                .map(|(t, neuron, c)| SpikeEvent {
                    t,
                    neuron,
                    polarity: Polarity::from_code(c).unwrap(),
                })
                .collect::<Vec<_>>();
            let mut events = events;
            events.sort();
            events.dedup();
            SpikeEvents::new(events, 50, 1e-3).unwrap()
        })
    }

    #[test]
    fn header_only_csv() {
        let mut buf = Vec::new();
        write_events_csv(&SpikeEvents::empty(10, 1e-3).unwrap(), &mut buf).unwrap();
        assert_eq!(buf, b"t,neuron,polarity\n");
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(parse_events_csv("a,b,c\n", 5, 1.0).is_err());
        assert!(matches!(
            parse_events_csv("t,neuron,polarity\n0,1,2\n", 5, 1.0),
            Err(EncodingError::Csv { line: 2, .. })
        ));
        assert!(parse_events_csv("t,neuron,polarity\n1,0,0\n0,0,0\n", 5, 1.0).is_err());
    }

    #[test]
    fn binary_rejects_corruption() {
        let ev = SpikeEvents::new(vec![SpikeEvent::new(1, 2)], 4, 1e-3).unwrap();
        let bytes = events_to_bytes(&ev);
        assert!(events_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(events_from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(events_from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip(ev in arb_events()) {
            let mut buf = Vec::new();
            write_events_csv(&ev, &mut buf).unwrap();
            let back = parse_events_csv(std::str::from_utf8(&buf).unwrap(), 50, 1e-3).unwrap();
            prop_assert_eq!(back, ev);
        }

        #[test]
        fn binary_round_trip(ev in arb_events()) {
            let bytes = events_to_bytes(&ev);
            prop_assert_eq!(bytes.len(), 32 + 12 * ev.len());
            prop_assert_eq!(events_from_bytes(&bytes).unwrap(), ev);
        }
    }
}
