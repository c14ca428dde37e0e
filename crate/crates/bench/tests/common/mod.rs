#![allow(dead_code)]

use std::path::Path;

use minidisc::distiller::DistillConfig;
use minidisc::model::ModelConfig;
use minidisc::scheduler::SchedulePlan;
use minidisc_bench::config::{ExperimentConfig, Method, TeacherConfig};
use minidisc_bench::tasks::{TaskKind, TaskSpec};

/// A config that runs every method end to end in a few seconds.
pub fn tiny_config(out: &Path, steps: usize) -> ExperimentConfig {
    let model = ModelConfig {
        layers: 2,
        heads: 4,
        d_model: 16,
        d_ffn: 32,
        vocab: 16,
        max_len: 8,
        n_classes: 2,
        with_cross_attention: false,
    };
    let tasks = TaskKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &kind)| TaskSpec {
            kind,
            vocab: 16,
            length: 8,
            n_classes: 2,
            train_size: 128,
            dev_size: 64,
            seed: 7 + i as u64,
        })
        .collect();
    let plan = SchedulePlan {
        student_scale: 0.25,
        grid_n: 3,
        fixed_ta_scale: 0.5,
        importance_batches: 2,
        ..SchedulePlan::default()
    };
    let distill = DistillConfig {
        eta: 2,
        eval_every: 0,
        eval_batch: 64,
        lr: 3e-3,
        ..DistillConfig::default()
    };
    ExperimentConfig {
        model,
        tasks,
        plan,
        distill,
        teacher: TeacherConfig::default(),
        seeds: vec![0, 1],
        out_dir: out.to_path_buf(),
        methods: Method::ALL.to_vec(),
    }
    .with_all_steps(steps)
}

/// Parses `text` as XML end to end, failing on the first error.
pub fn assert_valid_xml(text: &str) {
    let mut reader = quick_xml::Reader::from_str(text);
    let mut depth = 0i64;
    loop {
        match reader.read_event() {
            Ok(quick_xml::events::Event::Start(_)) => depth += 1,
            Ok(quick_xml::events::Event::End(_)) => depth -= 1,
            Ok(quick_xml::events::Event::Eof) => break,
            Ok(_) => {}
            Err(e) => panic!("invalid xml at {}: {e}", reader.buffer_position()),
        }
    }
    assert_eq!(depth, 0, "unbalanced tags");
}

pub fn svgs_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "svg") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}
