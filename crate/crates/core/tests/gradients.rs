//! Finite-difference checks of the full training objectives.

use dap_core::autograd::{Graph, Var};
use dap_core::gradcheck::check_subset;
use dap_core::model::{tiny_config, Model};
use dap_core::params::Bound;
use dap_core::prompting::PromptLayers;
use dap_core::relevance::PromptMap;
use dap_core::synth::{generate_dataset, Sample, SynthConfig};
use dap_core::trainer::{dap_batch_graph, pretrain_batch_graph, supervised_batch_graph, LossGraph, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn data(seed: u64, n: usize) -> Vec<Sample> {
    let cfg = SynthConfig {
        image_size: 16,
        patch_size: 4,
        lesion_area_fraction: (0.05, 0.2),
        lesions_per_image: (1, 2),
        seed,
        ..Default::default()
    };
    generate_dataset(&cfg, n).unwrap()
}

fn prompt(seed: u64) -> PromptMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
    PromptMap::from_raw(4, 4, &raw).unwrap()
}

fn probes(model: &Model, per: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    model
        .params
        .tensors()
        .iter()
        .map(|t| (0..per.min(t.len())).map(|_| rng.gen_range(0..t.len())).collect())
        .collect()
}

#[test]
fn encoder_decoder_dice_chain() {
    for seed in 0..3 {
        let model = Model::new(tiny_config(8, 2, seed)).unwrap();
        let s = &data(seed, 1)[0];
        let phi = prompt(seed);
        let patches = model.patches(&s.image).unwrap();
        let target: Vec<f64> = phi.upsample(16, 16);
        let layers = PromptLayers::full(2);
        let n = model.config().vision.num_patches();
        let build = |g: &mut Graph, vars: &[Var]| {
            let p = Bound::from_vars(vars.to_vec());
            let x = g.constant(patches.clone());
            let (plain, prompted) = model.vision.forward_pair(g, &p, x, phi.weights.data(), &layers);
            let v = g.slice_rows(plain.tokens, 1, n);
            let vp = g.slice_rows(prompted.tokens, 1, n);
            let v = g.add(v, vp);
            let cls = model.text.forward(g, &p, &s.text_tokens).unwrap();
            let pred = model.decoder.forward(g, &p, v, cls);
            g.soft_dice(pred, target.clone(), 1.0)
        };
        let r = check_subset(model.params.tensors(), &probes(&model, 3, seed), EPS, build);
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?} at {}", model.params.names()[r.worst_input]);
    }
}

/// Perturbs model parameters directly and compares against the graph's gradients.
fn check_objective(model: &Model, per: usize, seed: u64, f: impl Fn(&Model) -> LossGraph) -> f64 {
    let mut lg = f(model);
    lg.graph.backward(lg.root);
    let grads = model.params.collect_grads(&lg.graph, &lg.params);
    let mut worst: f64 = 0.0;
    let mut work = model.clone();
    for (k, coords) in probes(model, per, seed).iter().enumerate() {
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &c in coords {
            let orig = work.params.tensors()[k].data()[c];
            work.params.tensors_mut()[k].data_mut()[c] = orig + EPS;
            let plus = f(&work).parts.total;
            work.params.tensors_mut()[k].data_mut()[c] = orig - EPS;
            let minus = f(&work).parts.total;
            work.params.tensors_mut()[k].data_mut()[c] = orig;
            let num = (plus - minus) / (2.0 * EPS);
            let a = grads[k].data()[c];
            d2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
        }
        // Gradients below the finite-difference noise floor are skipped.
        let scale = a2.max(n2).sqrt();
        if scale > 1e-8 {
            let rel = d2.sqrt() / scale;
            assert!(rel < TOL, "{}: rel {rel}", model.params.names()[k]);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn prompted_objective_all_terms() {
    for seed in 0..3 {
        let model = Model::new(tiny_config(8, 2, seed)).unwrap();
        let samples = data(seed + 10, 3);
        let maps: Vec<PromptMap> = (0..3).map(|i| prompt(seed * 7 + i)).collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let refs: Vec<&PromptMap> = maps.iter().collect();
        let mut cfg = TrainConfig::default();
        cfg.contrastive.temperature = 0.5;
        cfg.prompt.layers = "full".into();
        let parts = dap_batch_graph(&model, &batch, &refs, &cfg).unwrap().parts;
        assert!(parts.glb > 0.0 && parts.lcl > 0.0 && parts.seg > 0.0, "{parts:?}");
        check_objective(&model, 2, seed, |m| dap_batch_graph(m, &batch, &refs, &cfg).unwrap());
    }
}

#[test]
fn pretraining_and_supervised_objectives() {
    for seed in 0..3 {
        let model = Model::new(tiny_config(8, 1, seed)).unwrap();
        let samples = data(seed + 20, 4);
        let batch: Vec<&Sample> = samples.iter().collect();
        let cfg = TrainConfig { pretrain_temperature: 0.3, ..Default::default() };
        check_objective(&model, 2, seed, |m| pretrain_batch_graph(m, &batch, &cfg).unwrap());
        check_objective(&model, 2, seed, |m| supervised_batch_graph(m, &batch, &cfg).unwrap());
    }
}
