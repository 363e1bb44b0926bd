use std::collections::BTreeSet;

use partfield::dataset::{instance_seed, InstanceSplit};
use partfield::env::*;
use partfield::geometry::io::{read_jsonl_records, write_jsonl_records};
use partfield::geometry::Category;
use partfield::policy::{ActionChunk, Observation, MAX_STEP};
use partfield::mat::Mat;

fn small_env() -> EnvConfig {
    EnvConfig { n_points: 256, ..Default::default() }
}

fn all_specs() -> Vec<TaskSpec> {
    seen_tasks().into_iter().chain(unseen_tasks()).collect()
}

#[test]
fn expert_succeeds_on_a_hundred_tasks() {
    let env = small_env();
    let specs = all_specs();
    for i in 0..100u64 {
        let spec = &specs[i as usize % specs.len()];
        let task = make_task(spec, i % 7, 1000 + i, &env).unwrap();
        let ep = scripted_expert(&task, i % 7).unwrap();
        assert!(ep.success, "task {i}");
        assert_eq!(ep.states.len(), ep.actions.len() + 1);
        assert!(ep.actions.len() <= env.max_steps);
        for (t, a) in ep.actions.iter().enumerate() {
            assert!(a[..3].iter().all(|d| d.abs() <= MAX_STEP + 1e-15));
            let closes = task.distance(&ep.states[t + 1]) < task.success_radius;
            assert_eq!(a[3] == 1.0, closes);
        }
    }
}

#[test]
fn start_state_lies_above_the_object() {
    let env = small_env();
    for (i, spec) in all_specs().iter().enumerate() {
        let task = make_task(spec, 2, i as u64, &env).unwrap();
        let c = task.cloud.centroid();
        let top = task.cloud.points.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
        assert!((task.start[0] - c[0]).abs() <= 0.1 && (task.start[1] - c[1]).abs() <= 0.1);
        assert!(task.start[2] >= top + 0.05 && task.start[2] <= top + 0.15);
        assert_eq!(task.start[3], 0.0);
        let target = task.cloud.part_centroid(&spec.part).unwrap();
        assert_eq!(task.target_point, target);
    }
}

#[test]
fn held_out_instances_never_coincide_with_training_instances() {
    let env = small_env();
    let train: BTreeSet<u64> = Category::SEEN
        .iter()
        .flat_map(|&c| (0..env.train_instances as u64).map(move |i| instance_seed(c, InstanceSplit::Train, i, 0)))
        .collect();
    for i in 0..60 {
        let (task, inst) = split_task(Split::OI, i, 3, 0, &env).unwrap();
        assert_eq!(InstanceSplit::of_seed(inst), InstanceSplit::Heldout);
        assert!(!train.contains(&inst));
        assert!(task.spec.category.is_seen());
        let (_, os_inst) = split_task(Split::OS, i, 3, 0, &env).unwrap();
        assert!(train.contains(&os_inst));
        let (oc, _) = split_task(Split::OC, i, 3, 0, &env).unwrap();
        assert_eq!(oc.spec.category, Category::MicrowaveWithDoor);
    }
}

#[test]
fn split_tasks_are_deterministic_and_seed_dependent() {
    let env = small_env();
    let (a, ia) = split_task(Split::OI, 4, 1, 0, &env).unwrap();
    let (b, ib) = split_task(Split::OI, 4, 1, 0, &env).unwrap();
    let (c, _) = split_task(Split::OI, 4, 2, 0, &env).unwrap();
    assert_eq!((a.clone(), ia), (b, ib));
    assert_ne!(a.start, c.start);
}

/// Aims at a point `offset` away from the target.
struct Biased {
    offset: [f64; 3],
}

impl ChunkPolicy for Biased {
    fn act(&self, task: &Task, obs: &Observation, _seed: u64) -> partfield::Result<ActionChunk> {
        let aim = [
            task.target_point[0] + self.offset[0],
            task.target_point[1] + self.offset[1],
            task.target_point[2] + self.offset[2],
        ];
        let mut s = obs.agent;
        let mut m = Mat::zeros(16, 4);
        for h in 0..16 {
            let a = expert_action(&s, &aim, 0.0);
            s = step(&s, &a);
            m.row_mut(h).copy_from_slice(&a);
        }
        ActionChunk::new(m)
    }
}

#[test]
fn success_is_monotone_in_radius() {
    let env = small_env();
    let spec = &seen_tasks()[1];
    let base = make_task(spec, 0, 5, &env).unwrap();
    let policy = Biased { offset: [0.04, 0.0, 0.0] };
    let scene = partfield::policy::SceneEncoding { feature: vec![], position: [0.0; 3] };
    let radii: Vec<f64> = (1..=20).map(|i| i as f64 * 0.005).collect();
    let outcomes: Vec<bool> = radii
        .iter()
        .map(|&r| {
            let task = Task { success_radius: r, ..base.clone() };
            rollout(&policy, &scene, &task, 8, 0).unwrap().success
        })
        .collect();
    for w in outcomes.windows(2) {
        assert!(!w[0] || w[1]);
    }
    // Success flips exactly at the closest approach of the unstopped path.
    let free = rollout(&policy, &scene, &Task { success_radius: 1e-9, ..base.clone() }, 8, 0).unwrap();
    let closest = free.trajectory.iter().map(|s| base.distance(s)).fold(f64::INFINITY, f64::min);
    assert!(closest > 0.005 && closest < 0.1);
    for (r, ok) in radii.iter().zip(&outcomes) {
        assert_eq!(*ok, *r > closest, "radius {r}");
    }
}

#[test]
fn rollouts_of_reference_policies() {
    let env = small_env();
    let task = make_task(&seen_tasks()[0], 1, 2, &env).unwrap();
    let scene = partfield::policy::SceneEncoding { feature: vec![], position: [0.0; 3] };
    let r = rollout(&ExpertPolicy { horizon: 16 }, &scene, &task, 8, 0).unwrap();
    assert!(r.success && r.final_distance < task.success_radius);
    let z = rollout(&ZeroPolicy { horizon: 16 }, &scene, &task, 8, 0).unwrap();
    assert!(!z.success);
    assert_eq!(z.trajectory.len(), task.max_steps + 1);
    assert!(z.trajectory.iter().all(|s| *s == task.start));
}

#[test]
fn expert_scores_perfectly_on_every_split() {
    let env = small_env();
    let pipeline = FieldPipeline::raw(0, env.k_neighbors).unwrap();
    let res = evaluate_splits(&ExpertPolicy { horizon: 16 }, &pipeline, 0.01, &Split::ALL, 4, &[0, 1], 0, &env).unwrap();
    assert_eq!(res.len(), 3);
    for r in &res {
        assert_eq!(r.per_seed, vec![1.0, 1.0]);
        assert_eq!((r.mean, r.stderr), (1.0, 0.0));
    }
    let mut out = Vec::new();
    write_split_csv(&mut out, &[("expert".into(), res)]).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next(), Some("representation,split,mean,stderr,seeds"));
    assert_eq!(text.lines().nth(2), Some("expert,OI,1.000000,0.000000,2"));
}

#[test]
fn episodes_round_trip_through_jsonl() {
    let env = small_env();
    let demos = collect_demos(&seen_tasks()[..2], &EnvConfig { demos_per_task: 3, ..env }, 0).unwrap();
    assert_eq!(demos.len(), 6);
    let episodes: Vec<Episode> = demos.into_iter().map(|d| d.episode).collect();
    let mut buf = Vec::new();
    write_jsonl_records(&mut buf, &episodes).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 6);
    let back: Vec<Episode> = read_jsonl_records(buf.as_slice()).unwrap();
    assert_eq!(back, episodes);
}

#[test]
fn split_names_parse() {
    for s in Split::ALL {
        assert_eq!(s.to_string().parse::<Split>().unwrap(), s);
    }
    assert!("XX".parse::<Split>().is_err());
}
