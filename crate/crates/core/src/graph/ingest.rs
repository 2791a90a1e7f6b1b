use std::path::Path;
use std::str::FromStr;

use super::{EventLog, GraphError, RawEvent, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsvFormat {
    /// Header, then `user,item,timestamp,state_label,f_1..f_de`. Item ids are
    /// offset by the user count to share one id space.
    Jodie,
    /// `src,dst,t[,f_1..f_de]`, optional header.
    EdgeList,
}

impl FromStr for CsvFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jodie" => Ok(CsvFormat::Jodie),
            "edgelist" | "edge-list" => Ok(CsvFormat::EdgeList),
            other => Err(format!("unknown format `{other}` (expected jodie or edgelist)")),
        }
    }
}

pub fn ingest_csv(path: &Path, format: CsvFormat) -> Result<EventLog> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, format)
}

fn field<T: FromStr>(s: Option<&str>, line: usize, what: &str) -> Result<T> {
    let s = s.ok_or_else(|| GraphError::Malformed {
        line,
        msg: format!("missing {what}"),
    })?;
    s.trim().parse().map_err(|_| GraphError::Malformed {
        line,
        msg: format!("bad {what} `{}`", s.trim()),
    })
}

fn looks_like_header(line: &str) -> bool {
    line.split(',')
        .next()
        .is_some_and(|f| f.trim().parse::<f64>().is_err())
}

/// Parses CSV text. Timestamps are shifted so the earliest event is at 0.
pub fn parse_csv(text: &str, format: CsvFormat) -> Result<EventLog> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();
    match format {
        CsvFormat::Jodie => {
            lines.next();
        }
        CsvFormat::EdgeList => {
            if lines.peek().is_some_and(|(_, l)| looks_like_header(l)) {
                lines.next();
            }
        }
    }
    let mut raw = Vec::new();
    let mut width = None;
    for (no, line) in lines {
        let mut it = line.split(',');
        let src: usize = field(it.next(), no, "source id")?;
        let dst: usize = field(it.next(), no, "destination id")?;
        let t: f64 = field(it.next(), no, "timestamp")?;
        if !t.is_finite() || t < 0.0 {
            return Err(GraphError::Malformed {
                line: no,
                msg: format!("timestamp {t} must be finite and non-negative"),
            });
        }
        if format == CsvFormat::Jodie {
            let _label: f64 = field(it.next(), no, "state label")?;
        }
        let feats = it
            .map(|f| field::<f64>(Some(f), no, "feature"))
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(GraphError::Malformed {
                    line: no,
                    msg: format!("{} features, expected {w}", feats.len()),
                })
            }
            _ => {}
        }
        raw.push(RawEvent {
            src,
            dst,
            t,
            edge_feat: feats,
        });
    }
    if raw.is_empty() {
        return Err(GraphError::Empty);
    }
    let num_nodes = if format == CsvFormat::Jodie {
        let users = raw.iter().map(|e| e.src).max().unwrap() + 1;
        let items = raw.iter().map(|e| e.dst).max().unwrap() + 1;
        for e in &mut raw {
            e.dst += users;
        }
        users + items
    } else {
        raw.iter().map(|e| e.src.max(e.dst)).max().unwrap() + 1
    };
    let t0 = raw.iter().map(|e| e.t).fold(f64::INFINITY, f64::min);
    for e in &mut raw {
        e.t -= t0;
    }
    EventLog::new(raw, Some(num_nodes), 0, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edgelist_three_lines() {
        let log = parse_csv("0,1,1.0\n1,2,2.0\n0,2,3.0\n", CsvFormat::EdgeList).unwrap();
        assert_eq!((log.num_nodes(), log.len(), log.d_e()), (3, 3, 0));
        assert_eq!(log.events()[0].t, 0.0);
        assert_eq!(log.events()[2].t, 2.0);
    }

    #[test]
    fn jodie_features_and_offset() {
        let text = "user_id,item_id,timestamp,state_label,comma_separated_list_of_features\n\
                    0,0,10.0,0,0.1,0.2,0.3,0.4\n\
                    1,0,12.0,0,1,2,3,4\n";
        let log = parse_csv(text, CsvFormat::Jodie).unwrap();
        assert_eq!(log.d_e(), 4);
        assert_eq!(log.num_nodes(), 3);
        assert_eq!(log.events()[1].dst, 2);
        assert_eq!(log.events()[1].edge_feat, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unsorted_equals_sorted() {
        let a = parse_csv("0,1,3\n1,2,1\n2,0,2\n", CsvFormat::EdgeList).unwrap();
        let b = parse_csv("1,2,1\n2,0,2\n0,1,3\n", CsvFormat::EdgeList).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse_csv("0,1,1\n0,x,2\n", CsvFormat::EdgeList) {
            Err(GraphError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_csv("", CsvFormat::EdgeList), Err(GraphError::Empty)));
        assert!(matches!(
            parse_csv("src,dst,t\n", CsvFormat::EdgeList),
            Err(GraphError::Empty)
        ));
    }

    #[test]
    fn edgelist_header_is_skipped() {
        let log = parse_csv("src,dst,t\n0,1,5\n", CsvFormat::EdgeList).unwrap();
        assert_eq!(log.len(), 1);
    }
}
