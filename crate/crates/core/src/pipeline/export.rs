use serde::{Deserialize, Serialize};

/// The four serial execution resources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    /// Stream A.
    Cpu,
    /// Stream B.
    Launch,
    /// Stream C.
    Transfer,
    /// Stream D.
    Gpu,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Cpu, Stream::Launch, Stream::Transfer, Stream::Gpu];

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Cpu => "cpu",
            Stream::Launch => "launch",
            Stream::Transfer => "transfer",
            Stream::Gpu => "gpu",
        }
    }
}

/// One bar of a Gantt chart. `gemm_index` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub gemm_index: usize,
    pub stream: Stream,
    pub start_s: f64,
    pub end_s: f64,
}

impl TaskRecord {
    pub fn new(gemm_index: usize, stream: Stream, start_s: f64, end_s: f64) -> Self {
        Self {
            gemm_index,
            stream,
            start_s,
            end_s,
        }
    }
}

pub fn records_to_json(records: &[TaskRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records serialize")
}

pub fn records_to_csv(records: &[TaskRecord]) -> String {
    let mut out = String::from("gemm_index,stream,start_s,end_s\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:?},{:?}\n",
            r.gemm_index,
            r.stream.as_str(),
            r.start_s,
            r.end_s
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_formats() {
        let recs = [TaskRecord::new(1, Stream::Gpu, 0.0, 1.5e-4)];
        let json: serde_json::Value = serde_json::from_str(&records_to_json(&recs)).unwrap();
        assert_eq!(json[0]["stream"], "gpu");
        assert_eq!(json[0]["end_s"], 1.5e-4);
        assert_eq!(
            records_to_csv(&recs),
            "gemm_index,stream,start_s,end_s\n1,gpu,0.0,0.00015\n"
        );
    }
}
