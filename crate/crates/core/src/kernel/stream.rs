//! Bounded stream channels, the stage abstraction and the two pipeline
//! drivers (single-threaded round-robin and one thread per stage).
//!
//! A pipeline is a chain `source → stage 0 → … → stage n-1 → sink`.
//! Channel `i` feeds stage `i`; channel `n` feeds the sink. Every stage
//! consumes its input in fixed quanta and may emit any number of elements
//! per firing.

use std::collections::VecDeque;

use crossbeam_channel::{bounded, Receiver, Sender};

use crate::error::{Error, Result};

/// Bounded FIFO with transfer accounting.
#[derive(Debug, Clone)]
pub struct StreamChannel {
    capacity: usize,
    buf: VecDeque<i32>,
    pushed: u64,
    popped: u64,
    peak: usize,
}

impl StreamChannel {
    pub fn new(capacity: usize) -> Self {
        StreamChannel {
            capacity,
            buf: VecDeque::with_capacity(capacity),
            pushed: 0,
            popped: 0,
            peak: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn space(&self) -> usize {
        self.capacity - self.buf.len()
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn popped(&self) -> u64 {
        self.popped
    }

    /// Highest occupancy seen.
    pub fn peak(&self) -> usize {
        self.peak
    }

    /// Pushes one element; fails when full.
    pub fn push(&mut self, v: i32) -> Result<()> {
        if self.buf.len() == self.capacity {
            return Err(Error::Runtime(format!("push into full channel (capacity {})", self.capacity)));
        }
        self.buf.push_back(v);
        self.pushed += 1;
        self.peak = self.peak.max(self.buf.len());
        Ok(())
    }

    pub fn pop(&mut self) -> Option<i32> {
        let v = self.buf.pop_front()?;
        self.popped += 1;
        Some(v)
    }

    /// Moves `n` elements (which must be present) into `out`.
    pub fn pop_into(&mut self, n: usize, out: &mut Vec<i32>) {
        debug_assert!(n <= self.buf.len());
        out.extend(self.buf.drain(..n));
        self.popped += n as u64;
    }
}

/// One streaming operator: a deterministic state machine.
pub trait Stage: Send {
    fn name(&self) -> &str;
    /// Elements consumed per firing.
    fn quantum(&self) -> usize;
    /// Elements the stage consumes over one invocation.
    fn input_len(&self) -> usize;
    /// Elements the stage emits over one invocation.
    fn output_len(&self) -> usize;
    /// Consumes exactly `quantum()` elements and appends its outputs.
    fn fire(&mut self, input: &[i32], out: &mut Vec<i32>) -> Result<()>;
}

/// `(step, channel, element)`: one element entering a channel. Channel `i`
/// is the input of stage `i`; the last channel feeds the sink.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub channel: usize,
    pub element: i32,
}

/// One line per event: `step channel element`.
pub fn format_trace(events: &[TraceEvent]) -> String {
    let mut s = String::with_capacity(events.len() * 12);
    for e in events {
        s.push_str(&format!("{} {} {}\n", e.step, e.channel, e.element));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunStats {
    /// Elements that entered each channel.
    pub transfers: Vec<u64>,
    /// Peak occupancy per channel (round-robin driver only; zero otherwise).
    pub peaks: Vec<usize>,
    pub steps: u64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub output: Vec<i32>,
    pub stats: RunStats,
    pub trace: Option<Vec<TraceEvent>>,
}

/// Channel depth in elements. A stage whose quantum exceeds the depth of
/// its input channel can never fire, so such pipelines are rejected.
fn check_depths(stages: &[Box<dyn Stage>], depth: usize) -> Result<()> {
    if depth == 0 {
        return Err(Error::Deadlock("FIFO depth must be positive".into()));
    }
    for s in stages {
        if s.quantum() > depth {
            return Err(Error::Deadlock(format!(
                "stage {} needs {} elements per firing but FIFO depth is {depth}",
                s.name(),
                s.quantum()
            )));
        }
    }
    Ok(())
}

fn check_chain(stages: &[Box<dyn Stage>], input_len: usize) -> Result<()> {
    let mut expected = input_len;
    for s in stages {
        if s.quantum() == 0 || s.input_len() % s.quantum() != 0 {
            return Err(Error::Runtime(format!(
                "stage {}: input length {} is not a multiple of its quantum {}",
                s.name(),
                s.input_len(),
                s.quantum()
            )));
        }
        if expected > s.input_len() {
            return Err(Error::Runtime(format!(
                "stage {} expects {} elements but its producer emits {expected}",
                s.name(),
                s.input_len()
            )));
        }
        expected = s.output_len();
    }
    Ok(())
}

/// Runs the pipeline on one thread, visiting source, stages and sink in
/// order each step. Each stage holds at most one firing's output in an
/// output register that drains into its (bounded) output channel.
pub fn run_round_robin(
    stages: &mut [Box<dyn Stage>],
    input: &[i32],
    depth: usize,
    trace: bool,
) -> Result<RunOutput> {
    check_depths(stages, depth)?;
    check_chain(stages, input.len())?;
    let n = stages.len();
    let mut ch: Vec<StreamChannel> = (0..=n).map(|_| StreamChannel::new(depth)).collect();
    let mut pending: Vec<VecDeque<i32>> = vec![VecDeque::new(); n];
    let mut consumed = vec![0usize; n];
    let mut src = 0usize;
    let mut out = Vec::with_capacity(stages.last().map(|s| s.output_len()).unwrap_or(input.len()));
    let mut events = trace.then(Vec::new);
    let mut scratch_in = Vec::new();
    let mut scratch_out = Vec::new();
    let mut step = 0u64;

    fn push(c: &mut StreamChannel, idx: usize, v: i32, step: u64, events: &mut Option<Vec<TraceEvent>>) {
        c.push(v).expect("space checked");
        if let Some(ev) = events {
            ev.push(TraceEvent {
                step,
                channel: idx,
                element: v,
            });
        }
    }

    loop {
        let mut progress = false;
        // source
        let k = ch[0].space().min(input.len() - src);
        for &v in &input[src..src + k] {
            push(&mut ch[0], 0, v, step, &mut events);
        }
        src += k;
        progress |= k > 0;

        for i in 0..n {
            let (left, right) = ch.split_at_mut(i + 1);
            let (cin, cout) = (&mut left[i], &mut right[0]);
            // drain the output register
            while cout.space() > 0 {
                let Some(v) = pending[i].pop_front() else { break };
                push(cout, i + 1, v, step, &mut events);
                progress = true;
            }
            let q = stages[i].quantum();
            if pending[i].is_empty() && consumed[i] < stages[i].input_len() && cin.len() >= q {
                scratch_in.clear();
                scratch_out.clear();
                cin.pop_into(q, &mut scratch_in);
                stages[i].fire(&scratch_in, &mut scratch_out)?;
                consumed[i] += q;
                pending[i].extend(scratch_out.iter().copied());
                while cout.space() > 0 {
                    let Some(v) = pending[i].pop_front() else { break };
                    push(cout, i + 1, v, step, &mut events);
                }
                progress = true;
            }
        }

        // sink
        let last = &mut ch[n];
        if !last.is_empty() {
            let l = last.len();
            last.pop_into(l, &mut out);
            progress = true;
        }
        step += 1;

        if !progress {
            let idle = src == input.len() && ch.iter().all(StreamChannel::is_empty) && pending.iter().all(VecDeque::is_empty);
            if idle {
                break;
            }
            for i in 0..n {
                if consumed[i] == stages[i].input_len() && !ch[i].is_empty() {
                    return Err(Error::Runtime(format!(
                        "stage {} received more than its {} input elements",
                        stages[i].name(),
                        stages[i].input_len()
                    )));
                }
            }
            // blocked with data in flight: a stage is stuck below its quantum
            for i in 0..n {
                if consumed[i] < stages[i].input_len() && ch[i].len() < stages[i].quantum() {
                    let upstream_done = src == input.len()
                        && (0..i).all(|j| pending[j].is_empty() && ch[j].is_empty() && consumed[j] == stages[j].input_len());
                    if upstream_done {
                        return Err(Error::Underrun {
                            stage: stages[i].name().to_string(),
                            expected: stages[i].input_len(),
                            received: consumed[i] + ch[i].len(),
                        });
                    }
                }
            }
            return Err(Error::Deadlock(format!(
                "no stage can fire at step {step}; occupancy {:?}",
                ch.iter().map(StreamChannel::len).collect::<Vec<_>>()
            )));
        }
    }

    for i in 0..n {
        if consumed[i] != stages[i].input_len() {
            return Err(Error::Underrun {
                stage: stages[i].name().to_string(),
                expected: stages[i].input_len(),
                received: consumed[i],
            });
        }
    }
    if let Some(s) = stages.last() {
        if out.len() != s.output_len() {
            return Err(Error::Runtime(format!(
                "stage {} emitted {} elements, declared {}",
                s.name(),
                out.len(),
                s.output_len()
            )));
        }
    }
    Ok(RunOutput {
        output: out,
        stats: RunStats {
            transfers: ch.iter().map(StreamChannel::pushed).collect(),
            peaks: ch.iter().map(StreamChannel::peak).collect(),
            steps: step,
        },
        trace: events,
    })
}

fn stage_thread(
    stage: &mut dyn Stage,
    rx: Receiver<i32>,
    tx: Sender<i32>,
) -> Result<u64> {
    let q = stage.quantum();
    let rounds = stage.input_len() / q;
    let mut inbuf = Vec::with_capacity(q);
    let mut outbuf = Vec::new();
    let mut sent = 0u64;
    for r in 0..rounds {
        inbuf.clear();
        for _ in 0..q {
            match rx.recv() {
                Ok(v) => inbuf.push(v),
                Err(_) => {
                    return Err(Error::Underrun {
                        stage: stage.name().to_string(),
                        expected: stage.input_len(),
                        received: r * q + inbuf.len(),
                    })
                }
            }
        }
        outbuf.clear();
        stage.fire(&inbuf, &mut outbuf)?;
        for &v in &outbuf {
            if tx.send(v).is_err() {
                return Err(Error::Runtime(format!("{}: downstream closed", stage.name())));
            }
        }
        sent += outbuf.len() as u64;
    }
    Ok(sent)
}

/// Runs every stage on its own scoped thread, connected by bounded
/// channels of `depth` elements. Produces the same output and transfer
/// counts as [`run_round_robin`].
pub fn run_threaded(stages: &mut [Box<dyn Stage>], input: &[i32], depth: usize) -> Result<RunOutput> {
    check_depths(stages, depth)?;
    check_chain(stages, input.len())?;
    let n = stages.len();
    let mut txs = Vec::with_capacity(n + 1);
    let mut rxs = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        let (t, r) = bounded::<i32>(depth);
        txs.push(t);
        rxs.push(r);
    }
    let mut rx_iter = rxs.into_iter();
    let mut tx_iter = txs.into_iter();
    let src_tx = tx_iter.next().expect("channel 0");
    let (results, output) = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(n);
        for stage in stages.iter_mut() {
            let rx = rx_iter.next().expect("stage input");
            let tx = tx_iter.next().expect("stage output");
            handles.push(scope.spawn(move || stage_thread(stage.as_mut(), rx, tx)));
        }
        let sink_rx = rx_iter.next().expect("sink");
        let sink = scope.spawn(move || sink_rx.iter().collect::<Vec<i32>>());
        let mut sent = 0u64;
        for &v in input {
            if src_tx.send(v).is_err() {
                break;
            }
            sent += 1;
        }
        drop(src_tx);
        let mut res = vec![Ok(sent)];
        res.extend(handles.into_iter().map(|h| h.join().expect("stage thread panicked")));
        (res, sink.join().expect("sink thread panicked"))
    });
    let mut transfers = Vec::with_capacity(n + 1);
    // channel i receives what its producer (source or stage i-1) sent
    for r in results {
        transfers.push(r?);
    }
    if let Some(s) = stages.last() {
        if output.len() != s.output_len() {
            return Err(Error::Runtime(format!(
                "stage {} emitted {} elements, declared {}",
                s.name(),
                output.len(),
                s.output_len()
            )));
        }
    }
    Ok(RunOutput {
        output,
        stats: RunStats {
            transfers,
            peaks: vec![0; n + 1],
            steps: 0,
        },
        trace: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Emits `factor` copies of each element.
    struct Repeat {
        factor: usize,
        len: usize,
    }

    impl Stage for Repeat {
        fn name(&self) -> &str {
            "repeat"
        }
        fn quantum(&self) -> usize {
            1
        }
        fn input_len(&self) -> usize {
            self.len
        }
        fn output_len(&self) -> usize {
            self.len * self.factor
        }
        fn fire(&mut self, input: &[i32], out: &mut Vec<i32>) -> Result<()> {
            out.extend(std::iter::repeat_n(input[0], self.factor));
            Ok(())
        }
    }

    /// Sums groups of `q` elements.
    struct Sum {
        q: usize,
        len: usize,
    }

    impl Stage for Sum {
        fn name(&self) -> &str {
            "sum"
        }
        fn quantum(&self) -> usize {
            self.q
        }
        fn input_len(&self) -> usize {
            self.len
        }
        fn output_len(&self) -> usize {
            self.len / self.q
        }
        fn fire(&mut self, input: &[i32], out: &mut Vec<i32>) -> Result<()> {
            out.push(input.iter().sum());
            Ok(())
        }
    }

    fn chain(len: usize) -> Vec<Box<dyn Stage>> {
        vec![Box::new(Repeat { factor: 3, len }), Box::new(Sum { q: 3, len: 3 * len })]
    }

    #[test]
    fn channel_is_fifo_and_bounded() {
        let mut c = StreamChannel::new(2);
        c.push(1).unwrap();
        c.push(2).unwrap();
        assert!(c.push(3).is_err());
        assert_eq!(c.pop(), Some(1));
        c.push(3).unwrap();
        assert_eq!((c.pop(), c.pop(), c.pop()), (Some(2), Some(3), None));
        assert_eq!((c.pushed(), c.popped(), c.peak()), (3, 3, 2));
    }

    #[test]
    fn drivers_agree() {
        let input: Vec<i32> = (0..50).collect();
        for depth in [3, 4, 17] {
            let a = run_round_robin(&mut chain(50), &input, depth, false).unwrap();
            let b = run_threaded(&mut chain(50), &input, depth).unwrap();
            let want: Vec<i32> = input.iter().map(|v| 3 * v).collect();
            assert_eq!(a.output, want);
            assert_eq!(b.output, want);
            assert_eq!(a.stats.transfers, b.stats.transfers);
            assert_eq!(a.stats.transfers, vec![50, 150, 50]);
            assert!(a.stats.peaks.iter().all(|&p| p <= depth));
        }
    }

    #[test]
    fn shallow_fifo_rejected() {
        let err = run_round_robin(&mut chain(4), &[1, 2, 3, 4], 2, false).unwrap_err();
        assert!(matches!(err, Error::Deadlock(_)), "{err}");
    }

    #[test]
    fn early_end_is_an_underrun() {
        let mut s: Vec<Box<dyn Stage>> = vec![Box::new(Sum { q: 2, len: 8 })];
        let err = run_round_robin(&mut s, &[1, 2, 3, 4, 5, 6], 4, false).unwrap_err();
        assert!(matches!(err, Error::Underrun { expected: 8, received: 6, .. }), "{err}");
        let mut s: Vec<Box<dyn Stage>> = vec![Box::new(Sum { q: 2, len: 8 })];
        let err = run_threaded(&mut s, &[1, 2, 3, 4, 5, 6], 4).unwrap_err();
        assert!(matches!(err, Error::Underrun { expected: 8, received: 6, .. }), "{err}");
    }

    #[test]
    fn trace_records_every_transfer() {
        let r = run_round_robin(&mut chain(3), &[5, 6, 7], 3, true).unwrap();
        let t = r.trace.unwrap();
        assert_eq!(t.len() as u64, r.stats.transfers.iter().sum::<u64>());
        assert_eq!(format_trace(&t[..1]), "0 0 5\n");
    }
}
