//! Event-driven replay of a layer over the four streams.
//!
//! Every task is queued on its stream at time zero in GEMM order. A task
//! starts as soon as it is at the head of its stream, the stream is idle and
//! all its dependencies have completed; the simulator advances by popping
//! completion events in time order.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use super::export::{Stream, TaskRecord};
use super::{StageTimes, Timeline};

#[derive(Debug, Clone)]
pub struct Schedule {
    pub timeline: Timeline,
    pub records: Vec<TaskRecord>,
}

struct Task {
    gemm: usize,
    stream: Stream,
    duration: f64,
    deps: Vec<usize>,
}

#[derive(PartialEq)]
struct Completion {
    time: f64,
    seq: u64,
    task: usize,
}

impl Eq for Completion {}

impl Ord for Completion {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn stream_slot(s: Stream) -> usize {
    match s {
        Stream::Cpu => 0,
        Stream::Launch => 1,
        Stream::Transfer => 2,
        Stream::Gpu => 3,
    }
}

struct Simulator {
    tasks: Vec<Task>,
    queues: [VecDeque<usize>; 4],
    busy: [bool; 4],
    done: Vec<Option<f64>>,
    events: BinaryHeap<Reverse<Completion>>,
    seq: u64,
    records: Vec<TaskRecord>,
}

impl Simulator {
    fn new(stage: &StageTimes, n_l: usize) -> Self {
        let mut tasks = Vec::with_capacity(4 * n_l);
        let mut queues: [VecDeque<usize>; 4] = Default::default();
        for gemm in 1..=n_l {
            // The launch block of a GEMM issues the copy launch, then the
            // kernel launch; both must finish before the copy starts.
            let launch = tasks.len();
            tasks.push(Task {
                gemm,
                stream: Stream::Launch,
                duration: stage.launch,
                deps: vec![],
            });
            let copy = tasks.len();
            tasks.push(Task {
                gemm,
                stream: Stream::Transfer,
                duration: stage.transfer,
                deps: vec![launch],
            });
            tasks.push(Task {
                gemm,
                stream: Stream::Gpu,
                duration: stage.gpu,
                deps: vec![copy, launch],
            });
            tasks.push(Task {
                gemm,
                stream: Stream::Cpu,
                duration: stage.cpu,
                deps: vec![],
            });
        }
        for (id, t) in tasks.iter().enumerate() {
            queues[stream_slot(t.stream)].push_back(id);
        }
        let done = vec![None; tasks.len()];
        Self {
            tasks,
            queues,
            busy: [false; 4],
            done,
            events: BinaryHeap::new(),
            seq: 0,
            records: Vec::new(),
        }
    }

    fn dispatch(&mut self, now: f64) {
        for slot in 0..4 {
            if self.busy[slot] {
                continue;
            }
            let Some(&head) = self.queues[slot].front() else {
                continue;
            };
            if self.tasks[head].deps.iter().all(|&d| self.done[d].is_some()) {
                self.queues[slot].pop_front();
                self.busy[slot] = true;
                let task = &self.tasks[head];
                let end = now + task.duration;
                self.records.push(TaskRecord::new(task.gemm, task.stream, now, end));
                self.events.push(Reverse(Completion {
                    time: end,
                    seq: self.seq,
                    task: head,
                }));
                self.seq += 1;
            }
        }
    }

    fn run(mut self, stage: &StageTimes, n_l: usize) -> Schedule {
        self.dispatch(0.0);
        while let Some(Reverse(ev)) = self.events.pop() {
            self.done[ev.task] = Some(ev.time);
            self.busy[stream_slot(self.tasks[ev.task].stream)] = false;
            self.dispatch(ev.time);
        }
        debug_assert!(self.done.iter().all(Option::is_some), "simulation deadlocked");

        let mut taus = [
            vec![0.0; n_l + 1],
            vec![0.0; n_l + 1],
            vec![0.0; n_l + 1],
            vec![0.0; n_l + 1],
        ];
        for (task, end) in self.tasks.iter().zip(&self.done) {
            taus[stream_slot(task.stream)][task.gemm] = end.expect("all tasks complete");
        }
        let [cpu, launch, transfer, gpu] = taus;
        self.records
            .sort_by(|a, b| a.gemm_index.cmp(&b.gemm_index).then(a.stream.cmp(&b.stream)));
        Schedule {
            timeline: Timeline::from_taus(*stage, launch, transfer, gpu, cpu),
            records: self.records,
        }
    }
}

/// Runs the event simulation and returns both the timeline and every task's
/// start/end time.
pub fn simulate_schedule(stage: &StageTimes, n_l: usize) -> Schedule {
    assert!(n_l >= 1, "a layer needs at least one GEMM");
    Simulator::new(stage, n_l).run(stage, n_l)
}

pub fn simulate_streams(stage: &StageTimes, n_l: usize) -> Timeline {
    simulate_schedule(stage, n_l).timeline
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::evaluate_recurrence;

    #[test]
    fn launch_dominated_hand_walk() {
        // Launch blocks end at 1, 2, 3; each zero-length copy follows
        // immediately and the last kernel ends at 3.1.
        let tl = simulate_streams(&StageTimes::new(1.0, 0.0, 0.1, 0.0), 3);
        assert_eq!(tl.tau_launch, vec![0.0, 1.0, 2.0, 3.0]);
        assert!((tl.tau_gpu[3] - 3.1).abs() < 1e-15);
    }

    #[test]
    fn all_zero_stage() {
        let tl = simulate_streams(&StageTimes::default(), 5);
        for tau in [&tl.tau_launch, &tl.tau_transfer, &tl.tau_gpu, &tl.tau_cpu] {
            assert!(tau.iter().all(|&t| t == 0.0));
        }
        assert_eq!(tl.t_fin, 0.0);
    }

    #[test]
    fn matches_recurrence_on_examples() {
        for st in [
            StageTimes::new(0.0, 0.0, 0.0, 0.7),
            StageTimes::new(1.0, 5.0, 2.0, 0.5),
            StageTimes::new(1.0, 5.0, 7.0, 3.0),
            StageTimes::new(5.0, 1.0, 2.0, 9.0),
        ] {
            for n in 1..=8 {
                let a = evaluate_recurrence(&st, n);
                let b = simulate_streams(&st, n);
                assert!(a.max_deviation(&b) <= 1e-12, "{st:?} n={n}");
                assert_eq!(a.case_label, b.case_label);
            }
        }
    }

    #[test]
    fn records_are_consistent_with_dependencies() {
        let s = simulate_schedule(&StageTimes::new(0.2, 0.5, 0.3, 0.1), 3);
        assert_eq!(s.records.len(), 12);
        for r in &s.records {
            if r.stream == Stream::Gpu {
                let copy = s
                    .records
                    .iter()
                    .find(|c| c.gemm_index == r.gemm_index && c.stream == Stream::Transfer)
                    .unwrap();
                assert!(r.start_s >= copy.end_s);
            }
        }
        assert_eq!(s.timeline.records(), s.records);
    }
}
