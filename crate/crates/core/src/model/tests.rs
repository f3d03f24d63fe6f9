use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataio::{generate_synthetic, SyntheticConfig};
use crate::numcore::grad_check_many;

fn tiny_data() -> Dataset {
    let cfg = SyntheticConfig {
        n_classes: 5,
        per_class: 4,
        channels: 3,
        n_unseen: 2,
        holdout_fraction: 0.0,
        semantic_groups: 2,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg, 3).unwrap()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 3,
        hidden_dim: 4,
        encoder_layers: 2,
        decoder_layers: 1,
        gcn_hidden: 3,
        gcn_layers: 2,
        gt_layers: 1,
        n_bands: 3,
    }
}

fn objective(flags: &[AblationFlag]) -> ObjectiveConfig {
    ObjectiveConfig {
        weights: LossWeights::default(),
        sinkhorn: SinkhornConfig { epsilon: 0.05, iters: 20 },
        compatibility_mode: CompatibilityMode::Pairwise,
        gradient_reversal: true,
        flags: flags.iter().copied().collect(),
    }
}

/// One triplet per seen class: first sketch, first photo, and a photo of
/// the next seen class.
fn triplets(ds: &Dataset) -> Vec<Triplet<'_>> {
    let seen = ds.seen_classes();
    let first = |label: &str, d: Domain| ds.samples().iter().find(|s| s.label == label && s.domain == d).unwrap();
    seen.iter()
        .enumerate()
        .map(|(i, l)| Triplet {
            anchor: first(l, Domain::Sketch),
            positive: first(l, Domain::Photo),
            negative: first(&seen[(i + 1) % seen.len()], Domain::Photo),
        })
        .collect()
}

fn setup() -> (Dataset, ModelParams, ObjectiveContext) {
    let ds = tiny_data();
    let ctx = ObjectiveContext::new(&ds, 3).unwrap();
    let params = ModelParams::init(&tiny_config(), 3, ctx.seen.len(), ctx.graph.num_edge_types(), 9).unwrap();
    (ds, params, ctx)
}

fn grads(params: &ModelParams, batch: &[Triplet<'_>], ctx: &ObjectiveContext, cfg: &ObjectiveConfig) -> Vec<(String, Vec<f64>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let (loss, _) = batch_objective(&tape, &bound, batch, ctx, cfg).unwrap();
    tape.backward(loss).unwrap();
    let vars = bound.vars();
    params
        .named()
        .into_iter()
        .zip(vars)
        .map(|((n, _), v)| (n, tape.grad(v).unwrap().into_data()))
        .collect()
}

#[test]
fn named_and_mutable_views_align() {
    let (_, mut params, _) = setup();
    let shapes: Vec<Vec<usize>> = params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let muts: Vec<Vec<usize>> = params.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(shapes, muts);
    let unique: BTreeSet<&String> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
    assert!(params.named().iter().all(|(_, t)| t.requires_grad()));
}

#[test]
fn bound_handles_round_trip() {
    let (_, params, _) = setup();
    let tape = Tape::new();
    let vars = params.bind(&tape).vars();
    assert_eq!(params.bind_vars(&vars).unwrap().vars(), vars);
    assert!(matches!(params.bind_vars(&vars[1..]), Err(Error::Contract(_))));
}

#[test]
fn init_is_seeded() {
    let (_, params, ctx) = setup();
    let again = ModelParams::init(&tiny_config(), 3, ctx.seen.len(), ctx.graph.num_edge_types(), 9).unwrap();
    assert_eq!(params, again);
    let other = ModelParams::init(&tiny_config(), 3, ctx.seen.len(), ctx.graph.num_edge_types(), 10).unwrap();
    assert_ne!(params, other);
}

#[test]
fn sketch_and_photo_weights_are_separate() {
    let (ds, mut params, _) = setup();
    let sketches: Vec<&FeatureSample> = ds.samples().iter().filter(|s| s.domain == Domain::Sketch).collect();
    let photos: Vec<&FeatureSample> = ds.samples().iter().filter(|s| s.domain == Domain::Photo).collect();
    let es = params.embed(&sketches, Domain::Sketch, true).unwrap();
    let ep = params.embed(&photos, Domain::Photo, true).unwrap();
    params.photo.layers[0].weight.data_mut()[0] += 1.0;
    params.photo.attention_bias.data_mut()[0] -= 2.0;
    assert_eq!(params.embed(&sketches, Domain::Sketch, true).unwrap(), es);
    params.sketch.layers[1].bias.data_mut()[0] += 1.0;
    let mut params2 = params.clone();
    params2.photo = setup().1.photo;
    assert_eq!(params2.embed(&photos, Domain::Photo, true).unwrap(), ep);
}

#[test]
fn all_auxiliary_flags_leave_wasserstein_only() {
    let (ds, params, ctx) = setup();
    let batch = triplets(&ds);
    let cfg = objective(&[AblationFlag::Comp, AblationFlag::Dom, AblationFlag::Cls, AblationFlag::Sem]);
    let tape = Tape::new();
    let (_, r) = batch_objective(&tape, &params.bind(&tape), &batch, &ctx, &cfg).unwrap();
    assert!(r.wasserstein > 0.0);
    assert_eq!(r.total, r.wasserstein);
    assert_eq!((r.compatibility, r.domain, r.classification, r.semantic), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn report_matches_weighted_sum() {
    let (ds, params, ctx) = setup();
    let batch = triplets(&ds);
    let cfg = objective(&[]);
    let tape = Tape::new();
    let (loss, r) = batch_objective(&tape, &params.bind(&tape), &batch, &ctx, &cfg).unwrap();
    let w = cfg.weights;
    let want = r.wasserstein
        + w.compatibility * r.compatibility
        + w.domain * r.domain
        + w.classification * r.classification
        + w.semantic * r.semantic;
    assert!((r.total - want).abs() < 1e-9);
    assert_eq!(tape.item(loss), r.total);
}

#[test]
fn contradictory_flags_are_rejected() {
    let (ds, params, ctx) = setup();
    let cfg = objective(&[AblationFlag::Gt, AblationFlag::GcnOnly]);
    let tape = Tape::new();
    let r = batch_objective(&tape, &params.bind(&tape), &triplets(&ds), &ctx, &cfg);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn flags_parse_and_print() {
    for f in AblationFlag::ALL {
        assert_eq!(f.as_str().parse::<AblationFlag>().unwrap(), f);
        assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{f}\""));
    }
    assert!(matches!("nope".parse::<AblationFlag>(), Err(Error::Config(_))));
}

fn zero_prefixes(g: &[(String, Vec<f64>)], prefixes: &[&str]) -> bool {
    g.iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .all(|(_, v)| v.iter().all(|&x| x == 0.0))
}

fn nonzero_prefixes(g: &[(String, Vec<f64>)], prefixes: &[&str]) -> bool {
    prefixes
        .iter()
        .all(|p| g.iter().any(|(n, v)| n.starts_with(p) && v.iter().any(|&x| x != 0.0)))
}

#[test]
fn disabled_terms_cut_their_gradient_paths() {
    let (ds, params, ctx) = setup();
    let batch = triplets(&ds);
    let full = grads(&params, &batch, &ctx, &objective(&[]));
    assert!(nonzero_prefixes(
        &full,
        &["head.domain", "head.label", "head.decoder", "gt0", "gcn", "sketch.attention", "photo.attention"]
    ));
    let cases: [(&[AblationFlag], &[&str]); 6] = [
        (&[AblationFlag::Dom], &["head.domain"]),
        (&[AblationFlag::Cls], &["head.label"]),
        (&[AblationFlag::Sem], &["head.decoder", "gt", "gcn"]),
        (&[AblationFlag::Gt], &["gt", "gcn"]),
        (&[AblationFlag::GcnOnly], &["gt"]),
        (&[AblationFlag::Attention], &["sketch.attention", "photo.attention"]),
    ];
    for (flags, dead) in cases {
        let g = grads(&params, &batch, &ctx, &objective(flags));
        assert!(zero_prefixes(&g, dead), "{flags:?}");
    }
}

#[test]
fn reversal_only_touches_the_domain_path() {
    let (ds, params, ctx) = setup();
    let batch = triplets(&ds);
    let mut on = objective(&[]);
    on.weights.domain = 0.0;
    let mut off = on.clone();
    off.gradient_reversal = false;
    assert_eq!(grads(&params, &batch, &ctx, &on), grads(&params, &batch, &ctx, &off));
}

#[test]
fn total_objective_passes_gradient_check() {
    let (ds, params, ctx) = setup();
    let batch = triplets(&ds);
    for seed in 0..3u64 {
        // jitter parameters away from the shared init
        let mut p = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05));
        }
        let mut cfg = objective(&[]);
        cfg.gradient_reversal = false;
        let points: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        let err = grad_check_many(
            |t, v| {
                let bound = p.bind_vars(v)?;
                Ok(batch_objective(t, &bound, &batch, &ctx, &cfg)?.0)
            },
            &points,
        )
        .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}
