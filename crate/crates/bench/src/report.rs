use serde::Serialize;

/// Latency summary in nanoseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Latency {
    pub avg_ns: f64,
    pub p95_ns: u64,
    pub p99_ns: u64,
}

impl Latency {
    pub fn from_samples(mut ns: Vec<u64>) -> Option<Latency> {
        if ns.is_empty() {
            return None;
        }
        ns.sort_unstable();
        let pct = |p: f64| ns[((ns.len() as f64 * p).ceil() as usize).clamp(1, ns.len()) - 1];
        Some(Latency {
            avg_ns: ns.iter().sum::<u64>() as f64 / ns.len() as f64,
            p95_ns: pct(0.95),
            p99_ns: pct(0.99),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Phase {
    pub name: String,
    pub ops: u64,
    pub seconds: f64,
    pub ops_per_sec: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<Latency>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dirtied_nodes_per_op: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shifted_entries_per_op: Option<f64>,
    /// Bytes the storage adapter was asked to write during the phase.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file_bytes_written: Option<u64>,
    /// Payload bytes the caller wrote during the phase.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logical_bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub write_amplification: Option<f64>,
}

impl Phase {
    pub fn timed(name: &str, ops: u64, seconds: f64) -> Phase {
        Phase {
            name: name.to_string(),
            ops,
            seconds,
            ops_per_sec: if seconds > 0.0 {
                ops as f64 / seconds
            } else {
                f64::INFINITY
            },
            ..Default::default()
        }
    }

    pub fn with_bytes(mut self, file: u64, logical: u64) -> Phase {
        self.file_bytes_written = Some(file);
        self.logical_bytes = Some(logical);
        self.write_amplification = (logical > 0).then(|| file as f64 / logical as f64);
        self
    }
}

/// Machine-readable result of one benchmark run. Field order is fixed, so
/// two runs diff cleanly.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BenchReport {
    pub bench: String,
    /// Run parameters as given.
    pub params: serde_json::Map<String, serde_json::Value>,
    pub phases: Vec<Phase>,
}

impl BenchReport {
    pub fn new(bench: &str, params: serde_json::Value) -> BenchReport {
        BenchReport {
            bench: bench.to_string(),
            params: match params {
                serde_json::Value::Object(m) => m,
                _ => Default::default(),
            },
            phases: Vec::new(),
        }
    }

    pub fn phase(&self, name: &str) -> Option<&Phase> {
        self.phases.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let l = Latency::from_samples((1..=100).collect()).unwrap();
        assert_eq!((l.avg_ns, l.p95_ns, l.p99_ns), (50.5, 95, 99));
        assert!(Latency::from_samples(vec![]).is_none());
    }

    #[test]
    fn json_keeps_field_order() {
        let mut r = BenchReport::new("x", serde_json::json!({"b": 1, "a": 2}));
        r.phases.push(Phase::timed("p", 10, 2.0).with_bytes(6, 3));
        let j = r.to_json();
        let at = |s: &str| j.find(s).unwrap();
        assert!(at("\"bench\"") < at("\"params\"") && at("\"params\"") < at("\"phases\""));
        assert!(at("\"ops_per_sec\"") < at("\"write_amplification\""));
        assert!(j.contains("\"write_amplification\": 2.0"));
        assert_eq!(j, r.clone().to_json());
    }
}
