//! Tape gradients against central differences at small sizes.

use damper_core::autodiff::{Graph, Var};
use damper_core::encoders::{CoarseImageEncoder, PatchEncoder, TextEncoder};
use damper_core::gradcheck::check_params;
use damper_core::hfg::{
    build_visual_hypergraph, embedding_matching_loss_graph, hgcn_forward, node_matching_loss_graph, NodeMatchMode,
    RelationalConv,
};
use damper_core::mca_cmg::{fuse_views_attention, gan_loss_terms, softpool, FusionParams, GanPair, MaskKind, ViewMask};
use damper_core::mesh_graph::MeshGcn;
use damper_core::nn::{sequence_nll_from_logits, teacher_inputs, TransformerDecoder};
use damper_core::params::{ParamGroup, ParamId, ParamStore};
use damper_core::report_gen::{forward_study, StudyDraw, Trainer};

use crate::support::{ensure, random_matrix, rng, small_config, small_records, Check, Checks};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    let w = g.constant(random_matrix(&mut rng(seed), r, c));
    let prod = g.mul(out, w);
    g.sum_all(prod)
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

fn verdict(worst: f64) -> Check {
    ensure!(worst < TOL, "worst relative error {worst:.3e}");
    Ok(())
}

fn image(seed: u64, side: usize) -> damper_core::corpus::Image {
    let px = random_matrix(&mut rng(seed), side, side).map(|v| 0.5 + 0.5 * v);
    damper_core::corpus::Image::new(px, "PA").expect("pixels in range")
}

pub fn run(c: &mut Checks) {
    c.run("text encoder", || {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, 7, 8, &mut rng(60));
        verdict(check_params(&store, &all_ids(&store), H, |s| {
            let mut g = Graph::new();
            let out = enc.forward(&mut g, s, &[1, 4, 4, 6, 2]).unwrap();
            let l = readout(&mut g, out, 61);
            (g, l)
        }))
    });
    c.run("coarse image encoder", || {
        let mut store = ParamStore::new();
        let enc = CoarseImageEncoder::new(&mut store, 16, 8, &mut rng(62))?;
        let img = image(63, 16);
        verdict(check_params(&store, &all_ids(&store), H, |s| {
            let mut g = Graph::new();
            let out = enc.forward(&mut g, s, &img).unwrap();
            let l = readout(&mut g, out, 64);
            (g, l)
        }))
    });
    c.run("patch encoder", || {
        let mut store = ParamStore::new();
        let enc = PatchEncoder::new(&mut store, 16, 4, 8, &mut rng(65))?;
        let img = image(66, 16);
        verdict(check_params(&store, &all_ids(&store), H, |s| {
            let mut g = Graph::new();
            let out = enc.forward(&mut g, s, &img).unwrap();
            let l = readout(&mut g, out, 67);
            (g, l)
        }))
    });
    c.run("MeSH graph convolution", || {
        let mut store = ParamStore::new();
        let gcn = MeshGcn::new(&mut store, 6, &mut rng(68));
        let x = random_matrix(&mut rng(69), 4, 6);
        let edges: Vec<(usize, usize)> = (0..4).flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        verdict(check_params(&store, &all_ids(&store), H, |s| {
            let mut g = Graph::new();
            let f = g.constant(x.clone());
            let out = gcn.forward_on(&mut g, s, f, &edges);
            let l = readout(&mut g, out.nodes, 70);
            (g, l)
        }))
    });
    c.run("hypergraph convolution", || {
        let mut store = ParamStore::new();
        let conv = RelationalConv::new(&mut store, "v", 6, &mut rng(71));
        let patches = random_matrix(&mut rng(72), 4, 6);
        verdict(check_params(&store, &all_ids(&store), H, |s| {
            let mut g = Graph::new();
            let p = g.constant(patches.clone());
            let h = build_visual_hypergraph(&mut g, p, 2, 2, 2).unwrap();
            let out = hgcn_forward(&mut g, s, &conv, &h).unwrap();
            let l = readout(&mut g, out.nodes, 73);
            (g, l)
        }))
    });
    c.run("view fusion attention", || {
        let mut store = ParamStore::new();
        let params = FusionParams::new(&mut store, 6, 5, &mut rng(74));
        let views = [random_matrix(&mut rng(75), 1, 6), random_matrix(&mut rng(76), 1, 6)];
        let mask = ViewMask::all(2, MaskKind::MeshStage)?;
        verdict(check_params(&store, &all_ids(&store), H, |s| {
            let mut g = Graph::new();
            let vs: Vec<Var> = views.iter().map(|m| g.constant(m.clone())).collect();
            let out = fuse_views_attention(&mut g, s, &vs, &mask, &params).unwrap();
            let l = readout(&mut g, out.v_m, 77);
            (g, l)
        }))
    });
    c.run("GAN losses", || {
        let mut store = ParamStore::new();
        let pair = GanPair::new(&mut store, 0, 4, 6, 5, &mut rng(78));
        let (v_im, f_m) = (random_matrix(&mut rng(79), 1, 6), random_matrix(&mut rng(80), 1, 5));
        let z = [0.3, -0.8, 1.1, 0.05];
        let generator: Vec<ParamId> = store.group_ids(ParamGroup::Generator).collect();
        let mse_err = check_params(&store, &generator, H, |s| {
            let mut g = Graph::new();
            let v = g.constant(v_im.clone());
            let f = g.constant(f_m.clone());
            let gen = pair.generate(&mut g, s, v, &z).unwrap();
            let t = gan_loss_terms(&mut g, s, &pair, v, gen, f);
            (g, t.mse)
        });
        verdict(mse_err)?;
        verdict(check_params(&store, &all_ids(&store), H, |s| {
            let mut g = Graph::new();
            let v = g.constant(v_im.clone());
            let f = g.constant(f_m.clone());
            let gen = pair.generate(&mut g, s, v, &z).unwrap();
            let t = gan_loss_terms(&mut g, s, &pair, v, gen, f);
            (g, t.total)
        }))
    });
    c.run("decoder likelihood and softpool", || {
        let mut store = ParamStore::new();
        let dec = TransformerDecoder::new(&mut store, "d", ParamGroup::ReportDecoder, 9, 8, 1, 8, &mut rng(81));
        let memory = random_matrix(&mut rng(82), 3, 8);
        let targets = [4, 7, 5, 2];
        verdict(check_params(&store, &all_ids(&store), H, |s| {
            let mut g = Graph::new();
            let m = g.constant(memory.clone());
            let pass = dec.forward(&mut g, s, &teacher_inputs(1, &targets), m).unwrap();
            let nll = sequence_nll_from_logits(&mut g, pass.logits, &targets);
            let pooled = softpool(&mut g, pass.hidden);
            let r = readout(&mut g, pooled, 83);
            let l = g.add(nll, r);
            (g, l)
        }))
    });
    c.run("node matching loss wrt node features", || {
        let mut store = ParamStore::new();
        let mut r = rng(84);
        let ids: Vec<ParamId> = (0..4)
            .map(|i| store.add(&format!("n{i}"), ParamGroup::Hypergraph, random_matrix(&mut r, 3, 5)))
            .collect();
        for mode in [NodeMatchMode::PerNodeMax, NodeMatchMode::DoubleSum] {
            verdict(check_params(&store, &ids, H, |s| {
                let mut g = Graph::new();
                let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let l = node_matching_loss_graph(&mut g, v[0], v[1], v[2], v[3], 2.0, mode);
                (g, l)
            }))?;
        }
        Ok(())
    });
    c.run("embedding matching loss wrt embeddings", || {
        let mut store = ParamStore::new();
        let mut r = rng(85);
        let ids: Vec<ParamId> = (0..6)
            .map(|i| store.add(&format!("e{i}"), ParamGroup::Hypergraph, random_matrix(&mut r, 1, 5)))
            .collect();
        verdict(check_params(&store, &ids, H, |s| {
            let mut g = Graph::new();
            let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let m = embedding_matching_loss_graph(&mut g, v[0], v[1], &[v[2], v[4]], &[v[3], v[5]], 2.0).unwrap();
            (g, m.loss)
        }))
    });
    c.run("full study objective, one tensor per group", || {
        let records = small_records(4, 2);
        let t = Trainer::new(small_config(), &records)?;
        let study = t.studies()[0].clone();
        let mut draw = StudyDraw::evaluation(2, t.config.noise_dim)?;
        draw.noise = vec![(0..t.config.noise_dim).map(|i| 0.3 * i as f64 - 0.5).collect(); 2];
        // smallest tensor of every group keeps the probe count low
        let mut ids = Vec::new();
        for group in ParamGroup::ALL {
            if let Some(id) = t.store.group_ids(group).min_by_key(|&id| t.store.get(id).data().len()) {
                ids.push(id);
            }
        }
        let objective = |s: &ParamStore| {
            let mut g = Graph::new();
            let f = forward_study(&mut g, s, &t.model, &t.config, &t.vocab, &study, &draw).unwrap();
            let mut l = f.report_nll;
            if let Some(m) = f.mesh_nll {
                l = g.add(l, m);
            }
            if let Some(rg) = &f.report_graph {
                let r = readout(&mut g, rg.pooled, 86);
                l = g.add(l, r);
            }
            (g, l)
        };
        let (g, l) = objective(&t.store);
        let grads = g.backward(l);
        for &id in &ids {
            let group = t.store.entry(id).group;
            if matches!(group, ParamGroup::MeshGcn | ParamGroup::Discriminator) {
                continue;
            }
            let nonzero = grads.param(id).is_some_and(|m| m.data().iter().any(|&v| v != 0.0));
            ensure!(nonzero, "{group:?} receives no gradient");
        }
        // the GAN terms see detached copies of upstream features, so the
        // probe objective uses only the fully differentiable terms
        verdict(check_params(&t.store, &ids, H, objective))
    });
}
