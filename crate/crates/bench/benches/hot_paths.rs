use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};
use rust_decimal::Decimal;

use synthweaver::dataset::split_examples;
use synthweaver::env::{EnvFactory, SimFactory, SiteGraph};
use synthweaver::oracle::{extract_json, RefineDecision, RefineTrajectoryReply};
use synthweaver::refiner::apply_edits;
use synthweaver::{parse_action, Action, Element, Observation, Step, Task, Trajectory};

fn trajectory(len: usize) -> Trajectory {
    let steps = (0..len)
        .map(|i| Step {
            index: i,
            observation: Observation {
                url: format!("http://shop.local/p/{i}"),
                accessibility_tree: "RootWebArea\n  link \"Home\" [1]\n".repeat(20),
                elements: vec![Element { id: 1, role: "link".into(), name: "Home".into(), interactive: true }],
                screenshot_ref: None,
            },
            action: if i + 1 == len { Action::none("done") } else { Action::click(1) },
            task_snapshot: "Find the cheapest item".into(),
            reasoning: "next".into(),
            state_summary: String::new(),
        })
        .collect();
    Trajectory::new(Task::new("shop-t0001", "shop", "Find the cheapest item", "Shopping"), steps, 30, Decimal::ZERO)
}

fn actions(c: &mut Criterion) {
    let wires = ["click [12]", "type [3] [wireless headphones]", "scroll [down]", "none [USB-C Cable 2m]"];
    c.bench_function("parse_action", |b| {
        b.iter(|| {
            for w in wires {
                black_box(parse_action(black_box(w)).unwrap());
            }
        })
    });
    let reply = "Sure, here it is:\n```json\n{\"task\": \"t\", \"score\": 80, \"order\": [0, 1, 2, 3],}\n```";
    c.bench_function("extract_json", |b| b.iter(|| black_box(extract_json(black_box(reply)).unwrap())));
}

fn corpus(c: &mut Criterion) {
    let t = trajectory(30);
    c.bench_function("split_examples_30", |b| b.iter(|| black_box(split_examples(&t, 3).unwrap())));
    let reply = RefineTrajectoryReply {
        task: "Find the cheapest item".into(),
        score: 70,
        decision: RefineDecision::Refine,
        order: (0..30).filter(|i| i % 3 != 1 || *i == 29).collect(),
        modify_end: false,
        append_end: false,
        final_none_value: "done".into(),
        drop_reason: String::new(),
        modification_reason: String::new(),
    };
    c.bench_function("apply_edits_30", |b| b.iter(|| black_box(apply_edits(&t, &reply).unwrap())));
}

fn simulator(c: &mut Criterion) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/shop.site.json");
    let factory = SimFactory::new(SiteGraph::load(&path).unwrap()).unwrap();
    let tour = [Action::click(3), Action::click(3), Action::go_back(), Action::scroll("down"), Action::click(1)];
    c.bench_function("sim_step_observe", |b| {
        let mut env = factory.open().unwrap();
        b.iter(|| {
            for a in &tour {
                black_box(env.execute(a).unwrap());
                black_box(env.observe().unwrap());
            }
        })
    });
}

criterion_group!(benches, actions, corpus, simulator);
criterion_main!(benches);
