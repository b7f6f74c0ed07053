use serde::{Deserialize, Serialize};

use super::export::{Stream, TaskRecord};
use super::{CaseLabel, StageTimes};

/// Completion timestamps per stream; index 0 is the origin (all zero) and
/// index `i` the completion of GEMM `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub stage: StageTimes,
    pub tau_launch: Vec<f64>,
    pub tau_transfer: Vec<f64>,
    pub tau_gpu: Vec<f64>,
    pub tau_cpu: Vec<f64>,
    pub t_fin: f64,
    pub case_label: CaseLabel,
}

impl Timeline {
    pub(crate) fn from_taus(
        stage: StageTimes,
        tau_launch: Vec<f64>,
        tau_transfer: Vec<f64>,
        tau_gpu: Vec<f64>,
        tau_cpu: Vec<f64>,
    ) -> Self {
        let n = tau_gpu.len() - 1;
        let gpu_end = tau_gpu[n];
        let cpu_end = tau_cpu[n];
        let case_label = if stage.gpu_side_idle() {
            CaseLabel::Degenerate
        } else if cpu_end > gpu_end {
            CaseLabel::CpuBound
        } else {
            classify_case(&stage)
        };
        Self {
            stage,
            tau_launch,
            tau_transfer,
            tau_gpu,
            tau_cpu,
            t_fin: gpu_end.max(cpu_end),
            case_label,
        }
    }

    pub fn gemms(&self) -> usize {
        self.tau_gpu.len() - 1
    }

    pub fn gpu_finish(&self) -> f64 {
        self.tau_gpu[self.gemms()]
    }

    pub fn cpu_finish(&self) -> f64 {
        self.tau_cpu[self.gemms()]
    }

    /// Adds a cost paid after both streams finish (e.g. copying the CPU
    /// partial result to the GPU).
    pub fn with_post_cost(mut self, extra_s: f64) -> Self {
        self.t_fin += extra_s;
        self
    }

    /// Start/end of every task implied by the timestamps.
    pub fn records(&self) -> Vec<TaskRecord> {
        let mut out = Vec::with_capacity(4 * self.gemms());
        for i in 1..=self.gemms() {
            out.push(TaskRecord::new(i, Stream::Cpu, self.tau_cpu[i - 1], self.tau_cpu[i]));
            out.push(TaskRecord::new(
                i,
                Stream::Launch,
                self.tau_launch[i - 1],
                self.tau_launch[i],
            ));
            out.push(TaskRecord::new(
                i,
                Stream::Transfer,
                self.tau_launch[i].max(self.tau_transfer[i - 1]),
                self.tau_transfer[i],
            ));
            out.push(TaskRecord::new(
                i,
                Stream::Gpu,
                self.tau_transfer[i].max(self.tau_gpu[i - 1]),
                self.tau_gpu[i],
            ));
        }
        out
    }

    /// Largest absolute difference between matching timestamps.
    pub fn max_deviation(&self, other: &Timeline) -> f64 {
        let pairs = [
            (&self.tau_launch, &other.tau_launch),
            (&self.tau_transfer, &other.tau_transfer),
            (&self.tau_gpu, &other.tau_gpu),
            (&self.tau_cpu, &other.tau_cpu),
        ];
        let mut worst = (self.t_fin - other.t_fin).abs();
        for (a, b) in pairs {
            if a.len() != b.len() {
                return f64::INFINITY;
            }
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

/// Evaluates the stream timestamps GEMM by GEMM:
///
/// ```text
/// tau_L[i]   = tau_L[i-1] + t_L
/// tau_C2G[i] = max(tau_L[i], tau_C2G[i-1]) + t_C2G
/// tau_G[i]   = max(tau_C2G[i], tau_G[i-1]) + t_G
/// tau_C[i]   = tau_C[i-1] + t_C
/// ```
///
/// with every stream starting at zero. `t_fin = max(tau_G[n_l], tau_C[n_l])`.
pub fn evaluate_recurrence(stage: &StageTimes, n_l: usize) -> Timeline {
    assert!(n_l >= 1, "a layer needs at least one GEMM");
    let mut l = vec![0.0; n_l + 1];
    let mut x = vec![0.0; n_l + 1];
    let mut g = vec![0.0; n_l + 1];
    let mut c = vec![0.0; n_l + 1];
    for i in 1..=n_l {
        l[i] = l[i - 1] + stage.launch;
        x[i] = l[i].max(x[i - 1]) + stage.transfer;
        g[i] = x[i].max(g[i - 1]) + stage.gpu;
        c[i] = c[i - 1] + stage.cpu;
    }
    Timeline::from_taus(*stage, l, x, g, c)
}

/// `t_fin` of [`evaluate_recurrence`] without materialising the timeline.
#[inline]
pub fn finish_time(stage: &StageTimes, n_l: usize) -> f64 {
    let (mut l, mut x, mut g, mut c) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n_l {
        l += stage.launch;
        x = l.max(x) + stage.transfer;
        g = x.max(g) + stage.gpu;
        c += stage.cpu;
    }
    g.max(c)
}

/// Which stage bounds the GPU side:
///
/// * `Case1` iff `t_L < t_C2G` and `t_G < t_C2G`;
/// * `Case2` iff `t_L < t_C2G <= t_G`, or `t_C2G <= t_L < t_G`;
/// * `Case3` iff `t_L >= t_C2G` and `t_L >= t_G`.
///
/// The three predicates partition all inputs; equalities fall to the later
/// case.
pub fn classify_case(stage: &StageTimes) -> CaseLabel {
    let (l, x, g) = (stage.launch, stage.transfer, stage.gpu);
    if l < x {
        if g < x {
            CaseLabel::Case1
        } else {
            CaseLabel::Case2
        }
    } else if l < g {
        CaseLabel::Case2
    } else {
        CaseLabel::Case3
    }
}

/// GPU-side finish `tau_G[n_l]` under the schedule shape `case`:
///
/// * Case1: `t_L + n_l * t_C2G + t_G`
/// * Case2: `t_L + t_C2G + n_l * t_G`
/// * Case3: `n_l * t_L + t_C2G + t_G`
///
/// Returns `None` for labels that are not one of the three shapes.
pub fn gpu_finish_closed_form(stage: &StageTimes, n_l: usize, case: CaseLabel) -> Option<f64> {
    let n = n_l as f64;
    let (l, x, g) = (stage.launch, stage.transfer, stage.gpu);
    match case {
        CaseLabel::Case1 => Some(l + n * x + g),
        CaseLabel::Case2 => Some(l + x + n * g),
        CaseLabel::Case3 => Some(n * l + x + g),
        CaseLabel::CpuBound | CaseLabel::Degenerate => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpu_only_layer() {
        let tl = evaluate_recurrence(&StageTimes::new(0.0, 0.0, 0.0, 0.25), 4);
        assert_eq!(tl.t_fin, 1.0);
        assert_eq!(tl.case_label, CaseLabel::Degenerate);
        assert_eq!(tl.tau_cpu, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn copy_dominated_layer_matches_case1() {
        let st = StageTimes::new(1.0, 5.0, 2.0, 0.0);
        let tl = evaluate_recurrence(&st, 3);
        assert_eq!(tl.gpu_finish(), 1.0 + 3.0 * 5.0 + 2.0);
        assert_eq!(tl.case_label, CaseLabel::Case1);
        assert_eq!(gpu_finish_closed_form(&st, 3, CaseLabel::Case1), Some(tl.gpu_finish()));
    }

    #[test]
    fn launch_dominated_layer() {
        let st = StageTimes::new(1.0, 0.0, 0.1, 0.0);
        let tl = evaluate_recurrence(&st, 3);
        assert!((tl.gpu_finish() - 3.1).abs() < 1e-15);
        assert_eq!(tl.case_label, CaseLabel::Case3);
    }

    #[test]
    fn cpu_bound_label() {
        let tl = evaluate_recurrence(&StageTimes::new(1.0, 5.0, 2.0, 100.0), 2);
        assert_eq!(tl.case_label, CaseLabel::CpuBound);
        assert_eq!(tl.t_fin, 200.0);
    }

    #[test]
    fn case_predicates() {
        assert_eq!(classify_case(&StageTimes::new(1.0, 5.0, 2.0, 0.0)), CaseLabel::Case1);
        assert_eq!(classify_case(&StageTimes::new(1.0, 5.0, 7.0, 0.0)), CaseLabel::Case2);
        assert_eq!(classify_case(&StageTimes::new(5.0, 1.0, 2.0, 0.0)), CaseLabel::Case3);
        assert_eq!(classify_case(&StageTimes::new(2.0, 1.0, 5.0, 0.0)), CaseLabel::Case2);
        // Ties go to the later case.
        assert_eq!(classify_case(&StageTimes::new(1.0, 5.0, 5.0, 0.0)), CaseLabel::Case2);
        assert_eq!(classify_case(&StageTimes::new(5.0, 5.0, 1.0, 0.0)), CaseLabel::Case3);
        assert_eq!(classify_case(&StageTimes::new(3.0, 1.0, 3.0, 0.0)), CaseLabel::Case3);
        assert_eq!(classify_case(&StageTimes::default()), CaseLabel::Case3);
    }

    #[test]
    fn finish_time_agrees_with_timeline() {
        let st = StageTimes::new(0.3, 0.7, 0.2, 0.9);
        for n in 1..6 {
            assert_eq!(finish_time(&st, n), evaluate_recurrence(&st, n).t_fin);
        }
    }

    #[test]
    fn records_cover_every_task() {
        let tl = evaluate_recurrence(&StageTimes::new(0.1, 0.2, 0.3, 0.4), 2);
        let recs = tl.records();
        assert_eq!(recs.len(), 8);
        for r in &recs {
            assert!(r.end_s >= r.start_s);
        }
        let post = tl.clone().with_post_cost(0.5);
        assert_eq!(post.t_fin, tl.t_fin + 0.5);
    }
}
