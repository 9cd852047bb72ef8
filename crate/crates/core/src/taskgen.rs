//! Synthetic single-formula physics questions with step-by-step gold
//! answers, plus corruption of those answers into graded wrong ones.
//!
//! Every gold answer has five lines:
//!
//! ```text
//! v = 12 m/s, t = 5 s      givens
//! d = v * t                formula
//! d = 12 * 5               substitution
//! d = 60                   result
//! Answer: 60 m             final line
//! ```

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topic {
    Kinematics,
    Energy,
    OhmsLaw,
    Density,
    Momentum,
}

impl Topic {
    pub const ALL: [Topic; 5] = [Topic::Kinematics, Topic::Energy, Topic::OhmsLaw, Topic::Density, Topic::Momentum];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::Kinematics => "kinematics",
            Topic::Energy => "energy",
            Topic::OhmsLaw => "ohms-law",
            Topic::Density => "density",
            Topic::Momentum => "momentum",
        }
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Base,
    Substitution,
    Paraphrase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAItem {
    pub id: String,
    pub topic: Topic,
    pub question: String,
    pub answer: String,
    pub transform: Transform,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    Computation,
    Conceptual,
    Grounding,
    Deduction,
    StepDrop,
}

impl CorruptionMode {
    pub const ALL: [CorruptionMode; 5] = [
        CorruptionMode::Computation,
        CorruptionMode::Conceptual,
        CorruptionMode::Grounding,
        CorruptionMode::Deduction,
        CorruptionMode::StepDrop,
    ];

    /// Modes whose output carries a wrong final value.
    pub const WRONG_VALUE: [CorruptionMode; 4] = [
        CorruptionMode::Computation,
        CorruptionMode::Conceptual,
        CorruptionMode::Grounding,
        CorruptionMode::Deduction,
    ];
}

/// The two given quantities of a question, in formula order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Givens {
    pub a: f64,
    pub b: f64,
}

struct TopicSpec {
    /// Symbols and units of the two givens.
    vars: [(&'static str, &'static str); 2],
    target: &'static str,
    unit: &'static str,
    formula: &'static str,
    /// Question templates; index 0 is the base wording, 1..=3 paraphrases.
    templates: [&'static str; 4],
}

fn spec(topic: Topic) -> &'static TopicSpec {
    const KIN: TopicSpec = TopicSpec {
        vars: [("v", "m/s"), ("t", "s")],
        target: "d",
        unit: "m",
        formula: "v * t",
        templates: [
            "A car moves at {a} m/s for {b} s. How far does it travel?",
            "How far does a car travel in {b} s at a speed of {a} m/s?",
            "A runner keeps a speed of {a} m/s for {b} s. Find the distance covered.",
            "Find the distance covered by a cart moving at {a} m/s for {b} s.",
        ],
    };
    const EN: TopicSpec = TopicSpec {
        vars: [("m", "kg"), ("v", "m/s")],
        target: "E",
        unit: "J",
        formula: "m * v^2 / 2",
        templates: [
            "A ball of mass {a} kg moves at {b} m/s. Find its kinetic energy.",
            "Find the kinetic energy of a {a} kg ball moving at {b} m/s.",
            "What is the kinetic energy of a {a} kg cart with speed {b} m/s?",
            "A {a} kg body has speed {b} m/s. How much kinetic energy does it have?",
        ],
    };
    const OHM: TopicSpec = TopicSpec {
        vars: [("I", "A"), ("R", "ohm")],
        target: "V",
        unit: "V",
        formula: "I * R",
        templates: [
            "A current of {a} A flows through a {b} ohm resistor. Find the voltage.",
            "Find the voltage across a {b} ohm resistor carrying {a} A.",
            "What voltage drives {a} A through a resistance of {b} ohm?",
            "A {b} ohm resistor carries a current of {a} A. What is the voltage?",
        ],
    };
    const DEN: TopicSpec = TopicSpec {
        vars: [("m", "kg"), ("V", "m^3")],
        target: "rho",
        unit: "kg/m^3",
        formula: "m / V",
        templates: [
            "A block has mass {a} kg and volume {b} m^3. Find its density.",
            "Find the density of a {a} kg object with volume {b} m^3.",
            "What is the density of a body of volume {b} m^3 and mass {a} kg?",
            "An object of {a} kg fills {b} m^3. What is its density?",
        ],
    };
    const MOM: TopicSpec = TopicSpec {
        vars: [("m", "kg"), ("v", "m/s")],
        target: "p",
        unit: "kg*m/s",
        formula: "m * v",
        templates: [
            "A cart of mass {a} kg moves at {b} m/s. Find its momentum.",
            "Find the momentum of a {a} kg cart moving at {b} m/s.",
            "What is the momentum of a {a} kg ball with speed {b} m/s?",
            "A {a} kg body moves at {b} m/s. How much momentum does it have?",
        ],
    };
    match topic {
        Topic::Kinematics => &KIN,
        Topic::Energy => &EN,
        Topic::OhmsLaw => &OHM,
        Topic::Density => &DEN,
        Topic::Momentum => &MOM,
    }
}

/// A formula over the two givens: display text, substitution text, value.
#[derive(Clone, Copy)]
struct Formula {
    target: &'static str,
    unit: &'static str,
    text: &'static str,
    eval: fn(f64, f64) -> f64,
}

fn substitute(text: &str, a: f64, b: f64) -> String {
    text.replace("{a}", &fmt_num(a)).replace("{b}", &fmt_num(b))
}

fn gold_formula(topic: Topic) -> Formula {
    let s = spec(topic);
    Formula { target: s.target, unit: s.unit, text: s.formula, eval: topic_eval(topic) }
}

fn topic_eval(topic: Topic) -> fn(f64, f64) -> f64 {
    match topic {
        Topic::Kinematics | Topic::OhmsLaw | Topic::Momentum => |a, b| a * b,
        Topic::Energy => |m, v| m * v * v / 2.0,
        Topic::Density => |m, vol| m / vol,
    }
}

/// Applies the topic formula to the givens.
pub fn evaluate(topic: Topic, g: Givens) -> f64 {
    topic_eval(topic)(g.a, g.b)
}

/// Formula text with the given symbols replaced by `{a}` / `{b}` markers.
fn marker_text(topic: Topic, text: &str) -> String {
    let s = spec(topic);
    let mut out = String::new();
    for tok in text.split(' ') {
        if !out.is_empty() {
            out.push(' ');
        }
        let (sym, rest) = match tok.find('^') {
            Some(i) => (&tok[..i], &tok[i..]),
            None => (tok, ""),
        };
        if sym == s.vars[0].0 {
            out.push_str("{a}");
        } else if sym == s.vars[1].0 {
            out.push_str("{b}");
        } else {
            out.push_str(sym);
        }
        out.push_str(rest);
    }
    out
}

/// Formats a value with at most two decimals, dropping trailing zeros.
pub fn fmt_num(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{}", x.round() as i64)
    } else {
        let s = format!("{x:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn answer_lines(topic: Topic, g: Givens, f: &Formula, shown: Givens) -> Vec<String> {
    let s = spec(topic);
    let value = (f.eval)(g.a, g.b);
    let rounded: f64 = fmt_num(value).parse().unwrap_or(value);
    vec![
        format!(
            "{} = {} {}, {} = {} {}",
            s.vars[0].0,
            fmt_num(shown.a),
            s.vars[0].1,
            s.vars[1].0,
            fmt_num(shown.b),
            s.vars[1].1
        ),
        format!("{} = {}", f.target, f.text),
        format!("{} = {}", f.target, f.substituted_with(topic, g)),
        format!("{} = {}", f.target, fmt_num(rounded)),
        format!("Answer: {} {}", fmt_num(rounded), f.unit),
    ]
}

impl Formula {
    fn substituted_with(&self, topic: Topic, g: Givens) -> String {
        substitute(&marker_text(topic, self.text), g.a, g.b)
    }
}

/// Gold step-by-step answer for a topic and givens.
pub fn gold_answer(topic: Topic, g: Givens) -> String {
    answer_lines(topic, g, &gold_formula(topic), g).join("\n")
}

pub fn question_text(topic: Topic, template: usize, g: Givens) -> String {
    substitute(spec(topic).templates[template], g.a, g.b)
}

/// Builds a base item directly from givens.
pub fn make_item(id: impl Into<String>, topic: Topic, g: Givens, template: usize, transform: Transform) -> QAItem {
    QAItem {
        id: id.into(),
        topic,
        question: question_text(topic, template, g),
        answer: gold_answer(topic, g),
        transform,
        split: Split::Train,
    }
}

/// `A car moves at {v} m/s for {t} s...` with its gold answer.
pub fn kinematics_item(v: f64, t: f64) -> QAItem {
    let g = Givens { a: v, b: t };
    make_item(format!("kinematics-v{}-t{}", fmt_num(v), fmt_num(t)), Topic::Kinematics, g, 0, Transform::Base)
}

fn sample_givens<R: Rng>(topic: Topic, rng: &mut R) -> Givens {
    match topic {
        Topic::Energy => Givens { a: (2 * rng.random_range(1..=4)) as f64, b: rng.random_range(2..=9) as f64 },
        Topic::Density => {
            let rho = rng.random_range(2..=9) as f64;
            let vol = rng.random_range(2..=9) as f64;
            Givens { a: rho * vol, b: vol }
        }
        _ => Givens { a: rng.random_range(2..=9) as f64, b: rng.random_range(2..=9) as f64 },
    }
}

/// `n_base` base problems per topic, each followed by one substitution and
/// one paraphrase variant: `3 * n_base * 5` items, a pure function of the
/// arguments.
pub fn generate_dataset(n_base: usize, seed: u64) -> Result<Vec<QAItem>> {
    if n_base == 0 {
        return Err(Error::InvalidArgument("n_base must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n_base * 15);
    for topic in Topic::ALL {
        for i in 0..n_base {
            let g = sample_givens(topic, &mut rng);
            items.push(make_item(format!("{topic}-{i:05}-base"), topic, g, 0, Transform::Base));
            let base_value = evaluate(topic, g);
            let sub = loop {
                let cand = sample_givens(topic, &mut rng);
                if (evaluate(topic, cand) - base_value).abs() > 1e-9 {
                    break cand;
                }
            };
            items.push(make_item(format!("{topic}-{i:05}-sub"), topic, sub, 0, Transform::Substitution));
            let template = rng.random_range(1..=3);
            items.push(make_item(format!("{topic}-{i:05}-para"), topic, g, template, Transform::Paraphrase));
        }
    }
    Ok(items)
}

/// Seeded split. `round(fraction * N)` items go to train, clamped so both
/// sides are non-empty when `N >= 2`. Both halves keep input order.
pub fn split_dataset(items: &[QAItem], train_fraction: f64, seed: u64) -> Result<(Vec<QAItem>, Vec<QAItem>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = items.len();
    let mut n_train = (train_fraction * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for (item, &t) in items.iter().zip(&is_train) {
        let mut item = item.clone();
        if t {
            item.split = Split::Train;
            train.push(item);
        } else {
            item.split = Split::Test;
            test.push(item);
        }
    }
    Ok((train, test))
}

/// Recovers the givens by matching the question against the topic templates.
pub fn extract_givens(topic: Topic, question: &str) -> Option<Givens> {
    spec(topic).templates.iter().find_map(|t| match_template(t, question))
}

fn match_template(template: &str, text: &str) -> Option<Givens> {
    let mut rest = text;
    let mut a = None;
    let mut b = None;
    let mut tpl = template;
    while !tpl.is_empty() {
        if let Some(after) = tpl.strip_prefix("{a}").or_else(|| tpl.strip_prefix("{b}")) {
            let slot_a = tpl.starts_with("{a}");
            let end = rest.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(rest.len());
            let (num, tail) = rest.split_at(end);
            let v: f64 = num.trim_end_matches('.').parse().ok()?;
            let tail = if num.ends_with('.') { &rest[end - 1..] } else { tail };
            if slot_a {
                a = Some(v);
            } else {
                b = Some(v);
            }
            rest = tail;
            tpl = after;
        } else {
            let next = tpl.find('{').unwrap_or(tpl.len());
            let lit = &tpl[..next];
            rest = rest.strip_prefix(lit)?;
            tpl = &tpl[next..];
        }
    }
    if rest.is_empty() {
        Some(Givens { a: a?, b: b? })
    } else {
        None
    }
}

/// Parsed `Answer: <value> <unit>` line.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalAnswer {
    pub value: f64,
    pub unit: String,
}

impl FinalAnswer {
    /// Same unit and value within 1e-6 relative.
    pub fn matches(&self, other: &FinalAnswer) -> bool {
        self.unit == other.unit && (self.value - other.value).abs() <= 1e-6 * other.value.abs().max(1e-12)
    }
}

/// Parses the last non-empty line as `Answer: <value> <unit>`.
pub fn parse_final_answer(text: &str) -> Option<FinalAnswer> {
    let last = text.lines().rev().find(|l| !l.trim().is_empty())?;
    let body = last.trim().strip_prefix("Answer:")?.trim();
    let mut parts = body.splitn(2, ' ');
    let value: f64 = parts.next()?.parse().ok()?;
    if !value.is_finite() {
        return None;
    }
    let unit = parts.next().unwrap_or("").trim().to_string();
    Some(FinalAnswer { value, unit })
}

pub fn step_count(text: &str) -> usize {
    text.lines().filter(|l| !l.trim().is_empty()).count()
}

/// Rule-based quality: correct final value first, then closeness of the
/// step count to the gold answer. Unparseable answers sort last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Grade {
    unparseable: bool,
    wrong_value: bool,
    step_distance: usize,
}

impl Grade {
    pub fn value_matches(&self) -> bool {
        !self.unparseable && !self.wrong_value
    }

    pub fn step_distance(&self) -> usize {
        self.step_distance
    }
}

/// Lower grades are better.
pub fn grade(answer: &str, gold: &str) -> Grade {
    let step_distance = step_count(answer).abs_diff(step_count(gold));
    match (parse_final_answer(answer), parse_final_answer(gold)) {
        (Some(a), Some(g)) => Grade { unparseable: false, wrong_value: !a.matches(&g), step_distance },
        _ => Grade { unparseable: true, wrong_value: true, step_distance },
    }
}

fn conceptual_swaps(topic: Topic) -> &'static [Formula] {
    const KIN: [Formula; 2] = [
        Formula { target: "d", unit: "m", text: "v / t", eval: |a, b| a / b },
        Formula { target: "d", unit: "m", text: "v + t", eval: |a, b| a + b },
    ];
    const EN: [Formula; 2] = [
        Formula { target: "E", unit: "J", text: "m * v", eval: |a, b| a * b },
        Formula { target: "E", unit: "J", text: "m * v^2", eval: |a, b| a * b * b },
    ];
    const OHM: [Formula; 2] = [
        Formula { target: "V", unit: "V", text: "I / R", eval: |a, b| a / b },
        Formula { target: "V", unit: "V", text: "I + R", eval: |a, b| a + b },
    ];
    const DEN: [Formula; 2] = [
        Formula { target: "rho", unit: "kg/m^3", text: "m * V", eval: |a, b| a * b },
        Formula { target: "rho", unit: "kg/m^3", text: "V / m", eval: |a, b| b / a },
    ];
    const MOM: [Formula; 2] = [
        Formula { target: "p", unit: "kg*m/s", text: "m / v", eval: |a, b| a / b },
        Formula { target: "p", unit: "kg*m/s", text: "m * v^2", eval: |a, b| a * b * b },
    ];
    match topic {
        Topic::Kinematics => &KIN,
        Topic::Energy => &EN,
        Topic::OhmsLaw => &OHM,
        Topic::Density => &DEN,
        Topic::Momentum => &MOM,
    }
}

fn deduction_formula(topic: Topic) -> Formula {
    match topic {
        Topic::Kinematics => Formula { target: "a", unit: "m/s^2", text: "v / t", eval: |a, b| a / b },
        Topic::Energy => Formula { target: "p", unit: "kg*m/s", text: "m * v", eval: |a, b| a * b },
        Topic::OhmsLaw => Formula { target: "P", unit: "W", text: "I^2 * R", eval: |a, b| a * a * b },
        Topic::Density => Formula { target: "W", unit: "N", text: "m * 10", eval: |a, _| a * 10.0 },
        Topic::Momentum => Formula { target: "E", unit: "J", text: "m * v^2 / 2", eval: |a, b| a * b * b / 2.0 },
    }
}

const COMPUTATION_FACTORS: [[f64; 2]; 3] = [[6.0 / 5.0, 5.0 / 6.0], [3.0 / 2.0, 2.0 / 3.0], [10.0, 0.1]];

/// Produces a wrong answer for `item`. Severity 1..=3, higher is worse.
///
/// Wrong-value modes keep all five lines at severity 1 and drop
/// `severity - 1` intermediate lines beyond that; step-drop deletes
/// `severity` intermediate lines and keeps the final line.
pub fn corrupt_answer(item: &QAItem, mode: CorruptionMode, severity: u8, seed: u64) -> Result<String> {
    if !(1..=3).contains(&severity) {
        return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=3")));
    }
    let g = extract_givens(item.topic, &item.question)
        .ok_or_else(|| Error::Parse(format!("cannot extract givens from {:?}", item.question)))?;
    let topic = item.topic;
    let gold_value = evaluate(topic, g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gold = gold_formula(topic);
    // index of the line carrying the fault; it is never dropped
    let (mut lines, fault_line) = match mode {
        CorruptionMode::Computation => {
            let factors = COMPUTATION_FACTORS[severity as usize - 1];
            let factor = factors[rng.random_range(0..2)];
            let wrong: f64 = fmt_num(gold_value * factor).parse().unwrap_or(gold_value * factor);
            let wrong = if (wrong - gold_value).abs() < 1e-9 { gold_value + 1.0 } else { wrong };
            let mut lines = answer_lines(topic, g, &gold, g);
            lines[3] = format!("{} = {}", gold.target, fmt_num(wrong));
            lines[4] = format!("Answer: {} {}", fmt_num(wrong), gold.unit);
            (lines, 3)
        }
        CorruptionMode::Conceptual => {
            let swaps = conceptual_swaps(topic);
            let start = rng.random_range(0..swaps.len());
            let f = (0..swaps.len())
                .map(|k| swaps[(start + k) % swaps.len()])
                .find(|f| differs((f.eval)(g.a, g.b), gold_value))
                .ok_or_else(|| Error::Generator { name: "conceptual".into(), msg: "no distinct formula".into() })?;
            (answer_lines(topic, g, &f, g), 1)
        }
        CorruptionMode::Grounding => {
            let options = [
                Givens { a: g.b, b: g.a },
                Givens { a: g.a, b: g.a },
                Givens { a: g.b, b: g.b },
                Givens { a: g.a * 10.0, b: g.b },
            ];
            let wrong = options
                .into_iter()
                .find(|w| differs(evaluate(topic, *w), gold_value))
                .expect("scaled given always changes the value");
            (answer_lines(topic, wrong, &gold, wrong), 0)
        }
        CorruptionMode::Deduction => (answer_lines(topic, g, &deduction_formula(topic), g), 1),
        CorruptionMode::StepDrop => {
            let mut lines = answer_lines(topic, g, &gold, g);
            let mut idx: Vec<usize> = (0..4).collect();
            idx.shuffle(&mut rng);
            let mut drop: Vec<usize> = idx[..severity as usize].to_vec();
            drop.sort_unstable_by(|a, b| b.cmp(a));
            for i in drop {
                lines.remove(i);
            }
            return Ok(lines.join("\n"));
        }
    };
    let mut droppable: Vec<usize> = (0..4).filter(|&i| i != fault_line).collect();
    droppable.shuffle(&mut rng);
    let mut drop: Vec<usize> = droppable[..severity as usize - 1].to_vec();
    drop.sort_unstable_by(|a, b| b.cmp(a));
    for i in drop {
        lines.remove(i);
    }
    Ok(lines.join("\n"))
}

fn differs(x: f64, y: f64) -> bool {
    let fx: f64 = fmt_num(x).parse().unwrap_or(x);
    (fx - y).abs() > 1e-9 * y.abs().max(1.0)
}
