//! Named tabular fixtures with hand-computable behaviour.
//!
//! Step-structured fixtures use one word per step followed by the separator
//! token `<sep>` rendered as `".\n\n"`, so a student step is a single word and
//! the teacher's value for it is one smoothed table entry.
//!
//! * `delayed-*`: the student walks `a1 a2 b3 b4 b5`. Under the teacher
//!   (λ = 0.01, |V| = 12) the step values are about 0.892, 0.892, 0.298,
//!   0.496, 0.021. Only step 5 breaches, the deepest drop is at step 3, so the
//!   rewind point is 3 and the depth is 2. The teacher's own continuation from
//!   `a1 a2` is `a3 a4 a5`.
//! * `regime-*`: six steps; at each the student picks the bad word `b_i` with
//!   probability `q` (default 0.06, about 31% of trajectories breach) and the
//!   teacher puts 0.05 on it, which falls under the boundary.
//! * `absorbing-*`: the student leaves `g` for the absorbing `e` with
//!   probability ε per token; the teacher always emits `g`. TV at length L is
//!   `1 - (1 - ε)^L`.
//! * `ood-teacher` / `flawed-student`: a deterministic order-2 chain over 8
//!   tokens smoothed with λ; prefixes off the chain have no row, so the
//!   teacher is uniform there. The flawed student jumps off the chain with
//!   probability ε per token.
//! * `coverage-*`: a 4-token order-1 pair whose one-token steps breach at
//!   moderate γ₀.

use super::tabular::{TabularBuilder, TabularPolicy};

pub const SEP_SURFACE: &str = ".\n\n";

pub const NAMES: &[&str] = &[
    "chain-abc",
    "uniform4",
    "delayed-student",
    "delayed-teacher",
    "regime-student",
    "regime-teacher",
    "absorbing-student",
    "absorbing-teacher",
    "ood-teacher",
    "flawed-student",
    "coverage-student",
    "coverage-teacher",
];

pub const ABSORBING_EPS: f64 = 0.05;
pub const OOD_LAMBDA: f64 = 0.01;
pub const FLAW_EPS: f64 = 0.1;
pub const REGIME_BAD_PROB: f64 = 0.06;
pub const REGIME_STEPS: usize = 6;
pub const DELAYED_LAMBDA: f64 = 0.01;

pub fn by_name(name: &str) -> Option<TabularPolicy> {
    Some(match name {
        "chain-abc" => chain_abc(),
        "uniform4" => uniform4(),
        "delayed-student" => delayed_pair().0,
        "delayed-teacher" => delayed_pair().1,
        "regime-student" => regime_pair(REGIME_BAD_PROB).0,
        "regime-teacher" => regime_pair(REGIME_BAD_PROB).1,
        "absorbing-student" => absorbing_pair(ABSORBING_EPS).0,
        "absorbing-teacher" => absorbing_pair(ABSORBING_EPS).1,
        "ood-teacher" => ood_teacher(OOD_LAMBDA),
        "flawed-student" => flawed_student(FLAW_EPS),
        "coverage-student" => coverage_pair().0,
        "coverage-teacher" => coverage_pair().1,
        _ => return None,
    })
}

/// Deterministic `a -> b -> c -> STOP`, with `STOP` rendered as the step
/// delimiter.
pub fn chain_abc() -> TabularPolicy {
    TabularBuilder::new("chain-abc", &["a", "b", "c", "STOP", "<eos>"], 1, "<eos>")
        .separator("STOP", SEP_SURFACE)
        .row(&["a"], &[("b", 1.0)])
        .row(&["b"], &[("c", 1.0)])
        .row(&["c"], &[("STOP", 1.0)])
        .row(&["STOP"], &[("<eos>", 1.0)])
        .build()
        .expect("valid fixture")
}

pub fn uniform4() -> TabularPolicy {
    TabularBuilder::new("uniform4", &["w", "x", "y", "z"], 1, "z")
        .row(&[], &[("w", 0.25), ("x", 0.25), ("y", 0.25), ("z", 0.25)])
        .build()
        .expect("valid fixture")
}

const DELAYED_VOCAB: &[&str] = &["Q", "a1", "a2", "a3", "a4", "a5", "b3", "b4", "b5", "x", "<sep>", "<eos>"];

fn delayed_base(name: &str) -> TabularBuilder {
    TabularBuilder::new(name, DELAYED_VOCAB, 2, "<eos>").separator("<sep>", SEP_SURFACE)
}

/// `(student, teacher)` for the delayed-error walk. The question text is `Q`.
pub fn delayed_pair() -> (TabularPolicy, TabularPolicy) {
    let mut student = delayed_base("delayed-student")
        .row(&["Q"], &[("a1", 1.0)])
        .row(&["Q", "a1"], &[("<sep>", 1.0)]);
    let walk = ["a1", "a2", "b3", "b4", "b5"];
    for w in walk.windows(2) {
        student = student.row(&[w[0], "<sep>"], &[(w[1], 1.0)]).row(&["<sep>", w[1]], &[("<sep>", 1.0)]);
    }
    let student = student.row(&["b5", "<sep>"], &[("<eos>", 1.0)]).build().expect("valid fixture");

    let teacher = delayed_base("delayed-teacher")
        .lambda(DELAYED_LAMBDA)
        .row(&["Q"], &[("a1", 0.9), ("a2", 0.1)])
        .row(&["Q", "a1"], &[("<sep>", 1.0)])
        .row(&["a1", "<sep>"], &[("a2", 0.9), ("x", 0.1)])
        .row(&["<sep>", "a2"], &[("<sep>", 1.0)])
        .row(&["a2", "<sep>"], &[("a3", 0.4), ("b3", 0.3), ("x", 0.3)])
        .row(&["<sep>", "a3"], &[("<sep>", 1.0)])
        .row(&["a3", "<sep>"], &[("a4", 1.0)])
        .row(&["<sep>", "a4"], &[("<sep>", 1.0)])
        .row(&["a4", "<sep>"], &[("a5", 1.0)])
        .row(&["<sep>", "a5"], &[("<eos>", 1.0)])
        .row(&["<sep>", "b3"], &[("<sep>", 1.0)])
        .row(&["b3", "<sep>"], &[("b4", 0.5), ("a4", 0.5)])
        .row(&["<sep>", "b4"], &[("<sep>", 1.0)])
        .row(&["b4", "<sep>"], &[("a5", 0.98), ("b5", 0.02)])
        .row(&["<sep>", "x"], &[("<sep>", 1.0)])
        .build()
        .expect("valid fixture");
    (student, teacher)
}

/// `(student, teacher)` over six steps `g_i` / `b_i`; the student picks `b_i`
/// with probability `bad_prob`.
pub fn regime_pair(bad_prob: f64) -> (TabularPolicy, TabularPolicy) {
    let n = REGIME_STEPS;
    let g: Vec<String> = (1..=n).map(|i| format!("g{i}")).collect();
    let b: Vec<String> = (1..=n).map(|i| format!("b{i}")).collect();
    let mut vocab: Vec<&str> = vec!["Q"];
    vocab.extend(g.iter().map(String::as_str));
    vocab.extend(b.iter().map(String::as_str));
    vocab.extend(["<sep>", "<eos>"]);

    let build = |name: &str, lambda: f64, bad: f64, student: bool| {
        let mut t = TabularBuilder::new(name, &vocab, 2, "<eos>").separator("<sep>", SEP_SURFACE).lambda(lambda);
        t = t.row(&["Q"], &[(&g[0], 1.0 - bad), (&b[0], bad)]);
        t = t.row(&["Q", &g[0]], &[("<sep>", 1.0)]).row(&["Q", &b[0]], &[("<sep>", 1.0)]);
        for i in 0..n {
            t = t.row(&["<sep>", &g[i]], &[("<sep>", 1.0)]).row(&["<sep>", &b[i]], &[("<sep>", 1.0)]);
            let next: Vec<(&str, f64)> =
                if i + 1 < n { vec![(&g[i + 1], 1.0 - bad), (&b[i + 1], bad)] } else { vec![("<eos>", 1.0)] };
            t = t.row(&[&g[i], "<sep>"], &next);
            // Only the student knows how to continue after its own mistakes.
            if student {
                t = t.row(&[&b[i], "<sep>"], &next);
            }
        }
        t.build().expect("valid fixture")
    };
    (build("regime-student", 0.0, bad_prob, true), build("regime-teacher", 0.01, 0.05, false))
}

/// `(student, teacher)` over `{g, e, <eos>}` with λ = 0.
pub fn absorbing_pair(eps: f64) -> (TabularPolicy, TabularPolicy) {
    let vocab = ["g", "e", "<eos>"];
    let student = TabularBuilder::new("absorbing-student", &vocab, 1, "<eos>")
        .row(&[], &[("g", 1.0 - eps), ("e", eps)])
        .row(&["g"], &[("g", 1.0 - eps), ("e", eps)])
        .row(&["e"], &[("e", 1.0)])
        .build()
        .expect("valid fixture");
    let teacher = TabularBuilder::new("absorbing-teacher", &vocab, 1, "<eos>")
        .row(&[], &[("g", 1.0)])
        .row(&["g"], &[("g", 1.0)])
        .row(&["e"], &[("g", 1.0)])
        .build()
        .expect("valid fixture");
    (student, teacher)
}

pub const OOD_VOCAB: &[&str] = &["t0", "t1", "t2", "t3", "t4", "t5", "t6", "<eos>"];

/// Successor of chain token `i` (index into [`OOD_VOCAB`]); 7 is `<eos>`.
fn chain_next(i: usize) -> usize {
    (i + 1).min(7)
}

fn chain_rows(mut t: TabularBuilder, eps: f64) -> TabularBuilder {
    let v = OOD_VOCAB;
    // Off-chain jump target for position i.
    let wrong = |i: usize| (i + 3) % 7;
    let dist = |next: usize, from: usize| -> Vec<(&str, f64)> {
        if eps == 0.0 || next == 7 {
            vec![(v[next], 1.0)]
        } else {
            vec![(v[next], 1.0 - eps), (v[wrong(from)], eps)]
        }
    };
    t = t.row(&[], &dist(0, 6));
    t = t.row(&[v[0]], &dist(1, 0));
    for i in 1..7 {
        t = t.row(&[v[i - 1], v[i]], &dist(chain_next(i), i));
    }
    t.row(&[v[6], v[7]], &[(v[7], 1.0)]).row(&[v[7], v[7]], &[(v[7], 1.0)])
}

/// Deterministic chain `t0 .. t6 <eos>` smoothed with `lambda`.
pub fn ood_teacher(lambda: f64) -> TabularPolicy {
    chain_rows(TabularBuilder::new("ood-teacher", OOD_VOCAB, 2, "<eos>").lambda(lambda), 0.0)
        .build()
        .expect("valid fixture")
}

/// Follows the chain but jumps off it with probability `eps` per token.
/// Off-chain contexts have no row and are uniform.
pub fn flawed_student(eps: f64) -> TabularPolicy {
    chain_rows(TabularBuilder::new("flawed-student", OOD_VOCAB, 2, "<eos>"), eps).build().expect("valid fixture")
}

/// `(student, teacher)` over `{u, v, w, <eos>}` with one-token steps.
pub fn coverage_pair() -> (TabularPolicy, TabularPolicy) {
    let vocab = ["u", "v", "w", "<eos>"];
    let student_row = [("u", 0.35), ("v", 0.3), ("w", 0.3), ("<eos>", 0.05)];
    let student = TabularBuilder::new("coverage-student", &vocab, 1, "<eos>")
        .row(&[], &student_row)
        .row(&["u"], &student_row)
        .row(&["v"], &student_row)
        .row(&["w"], &student_row)
        .row(&["<eos>"], &student_row)
        .build()
        .expect("valid fixture");
    let teacher = TabularBuilder::new("coverage-teacher", &vocab, 1, "<eos>")
        .lambda(0.05)
        .row(&[], &[("u", 0.6), ("v", 0.3), ("w", 0.1)])
        .row(&["u"], &[("u", 0.5), ("v", 0.4), ("w", 0.1)])
        .row(&["v"], &[("v", 0.7), ("u", 0.2), ("w", 0.1)])
        .row(&["w"], &[("u", 0.4), ("v", 0.3), ("w", 0.3)])
        .row(&["<eos>"], &[("u", 1.0)])
        .build()
        .expect("valid fixture");
    (student, teacher)
}
