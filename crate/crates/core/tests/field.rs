mod common;

use common::*;
use partfield::codebook::category_codebooks;
use partfield::descriptors::{extract_descriptors, DescriptorMatrix, DESCRIPTOR_DIM};
use partfield::field::*;
use partfield::geometry::{generate_object, Category};
use partfield::losses::{sample_batch_entries, LabeledFeatureBatch, LossConfig};
use partfield::mat::Mat;
use partfield::Error;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn full_chain_gradient_matches_central_differences() {
    let mut r = rng(5);
    let desc = Mat::from_vec(3, DESCRIPTOR_DIM, (0..3 * DESCRIPTOR_DIM).map(|_| StandardNormal.sample(&mut r)).collect());
    let labels = [0, 0, 1];
    let cb = two_name_codebook(4);
    for cfg in [
        LossConfig { tau_geo: 0.5, tau_sem: 0.5, ..Default::default() },
        LossConfig { enable_sem: false, tau_geo: 0.3, ..Default::default() },
    ] {
        let mut p = init_refine_net(DESCRIPTOR_DIM, 6, 2, 4, 3).unwrap();
        let analytic = net_gradient(&p, &desc, &labels, &cb, &cfg);
        let h = 1e-5;
        for i in 0..p.param_count() {
            let x = p.params()[i];
            p.params_mut()[i] = x + h;
            let up = net_loss(&p, &desc, &labels, &cb, &cfg);
            p.params_mut()[i] = x - h;
            let down = net_loss(&p, &desc, &labels, &cb, &cfg);
            p.params_mut()[i] = x;
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(analytic[i], fd) <= 1e-4, "param {i}: {} vs {fd}", analytic[i]);
        }
    }
}

fn small_set() -> Vec<FieldSample> {
    Category::SEEN
        .iter()
        .flat_map(|&c| (0..5).map(move |s| generate_object(c, s, 128).unwrap()))
        .map(|cloud| {
            let descriptors = extract_descriptors(&cloud, 8).unwrap();
            FieldSample { cloud, descriptors }
        })
        .collect()
}

fn small_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        points_per_part: 8,
        instances_per_batch: 2,
        net: NetShape { hidden: 32, depth: 2, dim: 16 },
        ..Default::default()
    }
}

/// Loss over a fixed evaluation batch drawn from every category.
fn eval_loss(params: &RefineNetParams, set: &[FieldSample], cfg: &TrainConfig) -> f64 {
    let cbs = category_codebooks(cfg.net.dim, 0).unwrap();
    let clouds: Vec<_> = set.iter().map(|s| &s.cloud).collect();
    let mut total = 0.0;
    for c in Category::SEEN {
        let cb = &cbs[c.name()];
        let entries = sample_batch_entries(&clouds, c.name(), &cb.names, 8, 5, 99).unwrap();
        let mut d = Mat::zeros(entries.len(), DESCRIPTOR_DIM);
        for (row, &(i, p, _)) in entries.iter().enumerate() {
            d.row_mut(row).copy_from_slice(set[i].descriptors.mat().row(p));
        }
        let f = forward(params, &DescriptorMatrix(d)).unwrap();
        let labels = entries.iter().map(|e| e.2).collect();
        let b = LabeledFeatureBatch::new(f.values, labels, c.name()).unwrap();
        total += partfield::losses::total_loss(&b, cb, &cfg.loss).unwrap();
    }
    total
}

#[test]
fn training_lowers_loss_and_is_deterministic() {
    let set = small_set();
    assert_eq!(set.len(), 20);
    let cfg = small_config(200);
    let cbs = category_codebooks(cfg.net.dim, 0).unwrap();
    let a = train_field(&set, &cbs, &cfg).unwrap();
    let init = init_refine_net(DESCRIPTOR_DIM, 32, 2, 16, cfg.seed).unwrap();
    assert!(eval_loss(&a.params, &set, &cfg) < eval_loss(&init, &set, &cfg));
    assert_eq!(a.log.len(), 200);
    let b = train_field(&set, &cbs, &cfg).unwrap();
    assert_eq!(a.params.params(), b.params.params());
}

#[test]
fn semantic_ablation_logs_only_geometric_term() {
    let set = small_set();
    let mut cfg = small_config(12);
    cfg.loss.enable_sem = false;
    let cbs = category_codebooks(cfg.net.dim, 0).unwrap();
    let t = train_field(&set, &cbs, &cfg).unwrap();
    assert!(t.log.iter().all(|e| e.sem.is_none() && e.geo.is_some()));
    let mut csv = Vec::new();
    write_log_csv(&mut csv, &t.log).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,L_Geo,L_Sem,total"));
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 4);
        assert!(cols[2].is_empty() && !cols[1].is_empty());
    }
}

#[test]
fn training_rejects_missing_codebook_and_empty_set() {
    let set = small_set();
    let cfg = small_config(1);
    let mut cbs = category_codebooks(cfg.net.dim, 0).unwrap();
    cbs.remove("bottle_with_cap");
    assert!(matches!(train_field(&set, &cbs, &cfg), Err(Error::InvalidArgument(_))));
    assert!(train_field(&[], &cbs, &cfg).is_err());
}

#[test]
fn checkpoint_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("field.ckpt");
    let p = init_refine_net(DESCRIPTOR_DIM, 8, 2, 4, 1).unwrap();
    p.save(&path).unwrap();
    assert_eq!(RefineNetParams::load(&path).unwrap(), p);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[12] = 99;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(RefineNetParams::load(&path), Err(Error::Format(_))));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(RefineNetParams::load(&path).is_err());
}

#[test]
fn standard_dataset_training_stays_finite() {
    // Low temperatures stress the log-sum-exp path.
    let set = small_set();
    let mut cfg = small_config(300);
    cfg.loss.tau_geo = 0.01;
    cfg.loss.tau_sem = 0.01;
    let cbs = category_codebooks(cfg.net.dim, 0).unwrap();
    let t = train_field(&set, &cbs, &cfg).unwrap();
    assert!(t.log.iter().all(|e| e.total.is_finite()));
}
