//! Exact identities and the small hand-checkable examples.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use damper::checkpoint::Checkpoint;
use damper::dataset::{load_dataset, write_dataset, DATASET_FILE};
use damper::formats::{read_generations, read_json, read_loss_log, write_generations, Generation};
use damper_core::autodiff::Graph;
use damper_core::corpus::{
    build_vocabulary, generate_synthetic_corpus, segment_phrases, Image, PatientRecord, Split, SyntheticSpec,
    TokenVocabulary, EOS, UNK,
};
use damper_core::encoders::{encode_image_coarse, encode_image_patches, encode_text_tokens, CoarseImageEncoder, PatchEncoder, TextEncoder};
use damper_core::hfg::{
    build_report_hypergraph, build_visual_hypergraph, concat_fine_features, embedding_matching_loss, hfg_loss,
    hgcn_forward, node_match_score, node_matching_loss, Hypergraph, Incidence, NodeMatchMode, RelationalConv,
};
use damper_core::mca_cmg::{
    discriminator_probability, fuse_views_attention, gan_loss, generator_forward, mcg_loss, mesh_decode, mesh_nll_loss,
    sample_view_mask, softpool_summary, train_gan_step, FusionParams, GanMode, GanPair, GanSample, MaskKind,
    MeshDecoder, ViewMask,
};
use damper_core::mesh_graph::{build_mesh_graph, MeshGcn};
use damper_core::metrics::{bleu_n, ce_metrics, evaluate, extract_labels, meteor_simplified, rouge_l, LabelLexicon};
use damper_core::nn::DecodeMode;
use damper_core::params::{Adam, ParamGroup, ParamStore};
use damper_core::report_gen::{
    generate_report, report_decode, report_nll_loss, total_loss, DamperModel, DecoderContext, ModelShape, Trainer,
};
use damper_core::tensor::Matrix;

use crate::support::{cli_call, close, ensure, mat_close, random_matrix, rng, small_config, small_records, Check, Checks, SMALL};

const LN_HALF: f64 = -std::f64::consts::LN_2;

fn record(id: &str, report: &str) -> PatientRecord {
    PatientRecord {
        study_id: id.into(),
        views: vec![Image::new(Matrix::zeros(4, 4), "frontal").unwrap()],
        report: report.into(),
        mesh_terms: vec![],
        split: Split::Train,
    }
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn row(xs: &[f64]) -> Matrix {
    Matrix::row_vector(xs.to_vec())
}

/// Rows `e_{offset}, e_{offset+1}, ...` of the `dim`-dimensional identity.
fn basis(count: usize, offset: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(count, dim);
    for i in 0..count {
        m.set(i, offset + i, 1.0);
    }
    m
}

fn one_hot_rows(targets: &[usize], vocab: usize) -> Matrix {
    let mut m = Matrix::zeros(targets.len(), vocab);
    for (t, &y) in targets.iter().enumerate() {
        m.set(t, y, 1.0);
    }
    m
}

fn zero_group(store: &mut ParamStore, group: ParamGroup) {
    let ids: Vec<_> = store.group_ids(group).collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
}

fn row_sums_are_one(m: &Matrix, what: &str) -> Check {
    for r in 0..m.rows() {
        let s: f64 = m.row(r).iter().sum();
        close(s, 1.0, 1e-6, &format!("{what} row {r} sum"))?;
    }
    Ok(())
}

pub fn run(c: &mut Checks) {
    corpus(c);
    encoders(c);
    mesh_graph(c);
    gan(c);
    masks_and_fusion(c);
    decoding(c);
    hypergraphs(c);
    matching(c);
    report_generation(c);
    checkpoint(c);
    metrics(c);
    cli(c);
}

fn corpus(c: &mut Checks) {
    c.run("vocabulary min_freq 2", || {
        let v = build_vocabulary(&[record("1", "a b"), record("2", "a c")], 2)?;
        ensure!(v.tokens() == ["<pad>", "<bos>", "<eos>", "<unk>", "a"], "got {:?}", v.tokens());
        ensure!(v.encode("a x") == vec![v.id("a"), UNK], "encode gave {:?}", v.encode("a x"));
        Ok(())
    });
    c.run("vocabulary min_freq 1", || {
        let v = build_vocabulary(&[record("1", "a b"), record("2", "a c")], 1)?;
        let words: BTreeSet<&str> = v.tokens()[4..].iter().map(String::as_str).collect();
        ensure!(words == BTreeSet::from(["a", "b", "c"]) && v.len() == 7, "got {:?}", v.tokens());
        Ok(())
    });
    c.run("phrase segmentation", || {
        ensure!(segment_phrases("no acute disease. heart size normal.").len() == 2, "two phrases expected");
        ensure!(segment_phrases("clear lungs") == vec![strings(&["clear", "lungs"])], "one phrase expected");
        ensure!(segment_phrases("").is_empty(), "empty report has no phrases");
        Ok(())
    });
    c.run("synthetic corpus is deterministic", || {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic_corpus(&spec)?;
        let b = generate_synthetic_corpus(&spec)?;
        ensure!(a == b, "two generations differ");
        ensure!(a.len() == 8, "{} records", a.len());
        ensure!(a.iter().all(|r| r.views.len() == spec.num_views), "view counts differ from the spec");
        Ok(())
    });
    c.run("dataset file with two views per record", || {
        let dir = tempfile::tempdir()?;
        let path = write_dataset(dir.path(), &small_records(2, 2))?;
        let loaded = load_dataset(&path, None)?;
        ensure!(loaded.len() == 2, "{} records", loaded.len());
        ensure!(loaded.iter().all(|r| r.views.len() == 2), "expected two views each");
        Ok(())
    });
    c.run("train record without report is rejected", || {
        let dir = tempfile::tempdir()?;
        let path = write_dataset(dir.path(), &small_records(1, 1))?;
        let text = fs::read_to_string(&path)?;
        let mut line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap())?;
        line.as_object_mut().unwrap().remove("report");
        fs::write(&path, format!("{line}\n"))?;
        let err = load_dataset(&path, None).err().ok_or(crate::support::Fail("loaded".into()))?;
        ensure!(err.to_string().contains("report"), "error does not name the field: {err}");
        Ok(())
    });
}

fn encoders(c: &mut Checks) {
    c.run("text encoder shape and determinism", || {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, 10, 8, &mut rng(1));
        let a = encode_text_tokens(&enc, &store, &[4, 5, 6, 7, 8])?;
        let b = encode_text_tokens(&enc, &store, &[4, 5, 6, 7, 8])?;
        ensure!(a.vectors.shape() == (5, 8), "shape {:?}", a.vectors.shape());
        ensure!(a == b, "repeat differs");
        Ok(())
    });
    c.run("coarse encoder shape and zero image", || {
        let mut store = ParamStore::new();
        let enc = CoarseImageEncoder::new(&mut store, 32, 8, &mut rng(2))?;
        let img = Image::new(Matrix::filled(32, 32, 0.3), "frontal")?;
        ensure!(encode_image_coarse(&enc, &store, &img)?.vector.shape() == (1, 8), "not a 1x8 row");
        let zero = Image::new(Matrix::zeros(32, 32), "frontal")?;
        let mut g = Graph::new();
        let pre = enc.conv1_preactivation(&mut g, &store, &zero)?;
        ensure!(g.value(pre).data().iter().all(|&v| v == 0.0), "nonzero preactivation");
        let wrong = Image::new(Matrix::zeros(16, 16), "frontal")?;
        ensure!(encode_image_coarse(&enc, &store, &wrong).is_err(), "wrong side accepted");
        Ok(())
    });
    c.run("patch encoder rows and duplicates", || {
        let mut store = ParamStore::new();
        let enc = PatchEncoder::new(&mut store, 64, 16, 8, &mut rng(3))?;
        let px = random_matrix(&mut rng(4), 64, 64).map(|v| v.abs());
        let img = Image::new(px, "frontal")?;
        let a = encode_image_patches(&enc, &store, &img)?;
        ensure!(a.features.shape() == (16, 8) && a.num_patches() == 16, "shape {:?}", a.features.shape());
        ensure!(a == encode_image_patches(&enc, &store, &img.clone())?, "duplicate image differs");
        ensure!(PatchEncoder::new(&mut store, 64, 10, 8, &mut rng(3)).is_err(), "indivisible patch accepted");
        Ok(())
    });
}

fn mesh_graph(c: &mut Checks) {
    let vocab = TokenVocabulary::from_tokens(&["pleural", "effusion", "edema", "cardiomegaly", "normal"]);
    c.run("mesh graph sizes", || {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, vocab.len(), 8, &mut rng(5));
        let mut g = Graph::new();
        let three = build_mesh_graph(&mut g, &store, &strings(&["pleural effusion", "edema", "cardiomegaly"]), &enc, &vocab)?;
        ensure!(three.num_nodes() == 3 && three.edges.len() == 6, "{} nodes {} edges", three.num_nodes(), three.edges.len());
        let one = build_mesh_graph(&mut g, &store, &strings(&["edema"]), &enc, &vocab)?;
        ensure!(one.num_nodes() == 1 && one.edges.is_empty(), "single term graph wrong");
        let empty = build_mesh_graph(&mut g, &store, &[], &enc, &vocab)?;
        ensure!(empty.labels == ["normal"], "empty list gave {:?}", empty.labels);
        Ok(())
    });
    c.run("graph convolution identity case", || {
        let mut store = ParamStore::new();
        let gcn = MeshGcn::new(&mut store, 4, &mut rng(6));
        *store.get_mut(gcn.layer1) = Matrix::identity(4);
        *store.get_mut(gcn.layer2) = Matrix::identity(4);
        let x = row(&[0.5, 0.0, 1.5, 2.0]);
        let mut g = Graph::new();
        let f = g.constant(x.clone());
        let out = gcn.forward_on(&mut g, &store, f, &[]);
        mat_close(g.value(out.nodes), &x, 0.0, "single node output")
    });
}

fn gan_fixture() -> (ParamStore, GanPair) {
    let mut store = ParamStore::new();
    let pair = GanPair::new(&mut store, 0, 4, 6, 5, &mut rng(7));
    (store, pair)
}

fn gan(c: &mut Checks) {
    let v_im = random_matrix(&mut rng(8), 1, 6);
    let z = [0.3, -0.2, 0.9, 0.0];
    c.run("generator determinism and zero weights", || {
        let (mut store, pair) = gan_fixture();
        let a = generator_forward(&pair, &store, &v_im, &z)?;
        ensure!(a == generator_forward(&pair, &store, &v_im, &z)?, "repeat differs");
        zero_group(&mut store, ParamGroup::Generator);
        let out = generator_forward(&pair, &store, &v_im, &z)?;
        ensure!(out == Matrix::zeros(1, 5), "zero generator gave {:?}", out.data());
        Ok(())
    });
    c.run("mse vanishes when generated equals the target", || {
        let (store, pair) = gan_fixture();
        let target = generator_forward(&pair, &store, &v_im, &z)?;
        close(gan_loss(&pair, &store, &v_im, &z, &target)?.mse, 0.0, 0.0, "mse")
    });
    c.run("half-probability discriminator gives 2 ln 0.5", || {
        let (mut store, pair) = gan_fixture();
        zero_group(&mut store, ParamGroup::Discriminator);
        let f_m = random_matrix(&mut rng(9), 1, 5);
        close(discriminator_probability(&pair, &store, &f_m, &v_im), 0.5, 0.0, "D")?;
        let l = gan_loss(&pair, &store, &v_im, &z, &f_m)?;
        close(l.adv_real + l.adv_fake, 2.0 * LN_HALF, 1e-6, "adv_real + adv_fake")
    });
    c.run("each GAN half-step touches only its own side", || {
        let (mut store, pair) = gan_fixture();
        let pairs = [pair];
        let mut adam = Adam::new(&store, 1e-2);
        let sample = GanSample { view: 0, v_im: v_im.clone(), f_m: random_matrix(&mut rng(10), 1, 5), z: z.to_vec() };
        let before = store.clone();
        train_gan_step(&mut store, &pairs, &mut adam, std::slice::from_ref(&sample), GanMode::Discriminator)?;
        let changed = store.changed_groups(&before);
        ensure!(changed == [ParamGroup::Discriminator], "discriminator step changed {changed:?}");
        let before = store.clone();
        train_gan_step(&mut store, &pairs, &mut adam, &[sample], GanMode::Generator)?;
        let changed = store.changed_groups(&before);
        ensure!(changed == [ParamGroup::Generator], "generator step changed {changed:?}");
        Ok(())
    });
}

fn masks_and_fusion(c: &mut Checks) {
    c.run("mask sampling edge cases", || {
        let mut r = rng(11);
        for _ in 0..100 {
            let m = sample_view_mask(3, 1.0, MaskKind::MeshStage, &mut r)?;
            ensure!(m.bits() == [true, true, true], "p=1 dropped a view");
            let m = sample_view_mask(1, 0.2, MaskKind::ReportStage, &mut r)?;
            ensure!(m.bits() == [true], "single view dropped");
        }
        ensure!(sample_view_mask(2, 0.0, MaskKind::MeshStage, &mut r).is_err(), "p=0 accepted");
        ensure!(sample_view_mask(2, -0.5, MaskKind::MeshStage, &mut r).is_err(), "p<0 accepted");
        Ok(())
    });
    c.run("fusion of one view and of a duplicated view", || {
        let mut store = ParamStore::new();
        let params = FusionParams::new(&mut store, 5, 4, &mut rng(12));
        let x = random_matrix(&mut rng(13), 1, 5);
        let expected = x.matmul(store.get(params.value));
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let one = fuse_views_attention(&mut g, &store, &[v], &ViewMask::all(1, MaskKind::MeshStage)?, &params)?;
        mat_close(g.value(one.v_m), &expected, 1e-12, "single view")?;
        let v2 = g.constant(x.clone());
        let two = fuse_views_attention(&mut g, &store, &[v, v2], &ViewMask::all(2, MaskKind::MeshStage)?, &params)?;
        mat_close(g.value(two.v_m), g.value(one.v_m), 1e-12, "duplicated view")
    });
}

fn decoding(c: &mut Checks) {
    c.run("mesh decoder distributions and greedy determinism", || {
        let mut store = ParamStore::new();
        let dec = MeshDecoder::new(&mut store, 9, 8, 1, 6, &mut rng(14));
        let v_m = random_matrix(&mut rng(15), 1, 8);
        let a = mesh_decode(&dec, &store, &v_m, DecodeMode::Greedy { max_len: 6 })?;
        row_sums_are_one(&a.distributions, "greedy")?;
        ensure!(a == mesh_decode(&dec, &store, &v_m, DecodeMode::Greedy { max_len: 6 })?, "greedy repeat differs");
        let tf = mesh_decode(&dec, &store, &v_m, DecodeMode::TeacherForced(&[4, 5, EOS]))?;
        ensure!(tf.distributions.rows() == 3, "teacher forcing gave {} rows", tf.distributions.rows());
        row_sums_are_one(&tf.distributions, "teacher-forced")?;
        ensure!(mesh_decode(&dec, &store, &v_m, DecodeMode::Greedy { max_len: 0 }).is_err(), "max_len 0 accepted");
        Ok(())
    });
    c.run("sequence likelihood closed forms", || {
        let targets = [4, 1, 3];
        close(mesh_nll_loss(&one_hot_rows(&targets, 5), &targets)?, 0.0, 1e-12, "one-hot mesh")?;
        close(report_nll_loss(&one_hot_rows(&targets, 5), &targets)?, 0.0, 1e-12, "one-hot report")?;
        let uniform = Matrix::filled(3, 5, 0.2);
        let expected = 3.0 * 5f64.ln();
        close(mesh_nll_loss(&uniform, &targets)?, expected, 1e-9, "uniform mesh")?;
        close(report_nll_loss(&uniform, &targets)?, expected, 1e-9, "uniform report")?;
        ensure!(mesh_nll_loss(&uniform, &targets[..2]).is_err(), "length mismatch accepted");
        Ok(())
    });
    c.run("softpool of identical rows and of one row", || {
        let v = [0.3, -1.2, 2.0];
        let same = Matrix::from_rows(&[v, v, v, v])?;
        mat_close(&softpool_summary(&same)?.d_m, &row(&v), 1e-12, "identical rows")?;
        mat_close(&softpool_summary(&row(&v))?.d_m, &row(&v), 1e-12, "single row")
    });
    c.run("stage losses follow the view masks", || {
        let all = ViewMask::all(2, MaskKind::MeshStage)?;
        let first = ViewMask::new(vec![true, false], MaskKind::MeshStage)?;
        close(mcg_loss(&[1.25, 0.5], &all, 2.0)?, 3.75, 1e-12, "mcg all kept")?;
        close(mcg_loss(&[1.25, 0.5], &first, 2.0)?, 3.25, 1e-12, "mcg view 2 dropped")?;
        let all = ViewMask::all(2, MaskKind::ReportStage)?;
        let first = ViewMask::new(vec![true, false], MaskKind::ReportStage)?;
        close(hfg_loss(&[0.1, 0.2], &[0.3, 0.4], &all, 1.0)?, 2.0, 1e-12, "hfg all kept")?;
        close(hfg_loss(&[0.1, 0.2], &[0.3, 0.4], &first, 1.0)?, 1.4, 1e-12, "hfg view 2 dropped")
    });
}

fn hypergraphs(c: &mut Checks) {
    let vocab = TokenVocabulary::from_tokens(&["a", "b", "c", "d", "e", "."]);
    c.run("report hypergraph construction", || {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, vocab.len(), 8, &mut rng(16));
        let mut g = Graph::new();
        let h = build_report_hypergraph(&mut g, &store, "a b . c d e .", &enc, &vocab, 1)?;
        let inc = &h.incidence;
        ensure!(inc.num_nodes == 7, "{} nodes", inc.num_nodes);
        ensure!(inc.hyperedges[..2] == [vec![0, 1, 2], vec![3, 4, 5, 6]], "phrase edges {:?}", &inc.hyperedges[..2]);
        ensure!(inc.num_hyperedges() == 9, "{} hyperedges", inc.num_hyperedges());
        ensure!(inc.hyperedges[2..].iter().all(|e| e.len() == 2), "KNN hyperedges not of size 2");
        let single = build_report_hypergraph(&mut g, &store, "a", &enc, &vocab, 1)?;
        ensure!(single.incidence.hyperedges == [vec![0], vec![0]], "single token gave {:?}", single.incidence.hyperedges);
        Ok(())
    });
    c.run("visual hypergraph construction", || {
        let mut g = Graph::new();
        let p = g.constant(random_matrix(&mut rng(17), 16, 6));
        let h = build_visual_hypergraph(&mut g, p, 4, 4, 1)?;
        ensure!(h.incidence.num_nodes == 16, "{} nodes", h.incidence.num_nodes);
        ensure!(h.incidence.num_hyperedges() == 8 + 16, "{} hyperedges", h.incidence.num_hyperedges());
        h.incidence.validate()?;
        Ok(())
    });
    c.run("hypergraph convolution identity case", || {
        let mut store = ParamStore::new();
        let conv = RelationalConv::new(&mut store, "t", 3, &mut rng(18));
        *store.get_mut(conv.theta) = Matrix::identity(3);
        let x = row(&[0.0, 0.7, 1.1]);
        let mut g = Graph::new();
        let features = g.constant(x.clone());
        let h = Hypergraph { features, incidence: Incidence::new(1, vec![vec![0]]), knn_pairs: vec![] };
        let out = hgcn_forward(&mut g, &store, &conv, &h)?;
        mat_close(g.value(out.nodes), &x, 1e-15, "single node output")
    });
}

fn matching(c: &mut Checks) {
    let mode = NodeMatchMode::PerNodeMax;
    c.run("node matching score extremes", || {
        close(node_match_score(&basis(3, 0, 5), &basis(3, 0, 5), mode)?, 3.0, 1e-12, "identical orthonormal")?;
        close(node_match_score(&basis(2, 0, 5), &basis(3, 2, 5), mode)?, 0.0, 1e-12, "orthogonal sets")
    });
    c.run("node matching loss margins", || {
        let (r, v) = (basis(3, 0, 6), basis(3, 0, 6));
        let far = basis(3, 3, 6);
        close(node_matching_loss(&r, &v, &far, &far, 0.2, mode)?, 0.0, 1e-12, "margin satisfied")?;
        let (r, v) = (random_matrix(&mut rng(19), 3, 4), random_matrix(&mut rng(20), 4, 4));
        close(node_matching_loss(&r, &v, &r, &v, 0.2, mode)?, 0.4, 1e-12, "negatives equal positives")
    });
    c.run("embedding matching loss margins", || {
        let f = row(&[1.0, 0.0, 0.0]);
        let neg = row(&[0.6, 0.8, 0.0]);
        let (l, _, _) = embedding_matching_loss(&f, &f, &[neg.clone(), basis(1, 2, 3)], &[neg], 0.2)?;
        close(l, 0.0, 1e-12, "negatives below 1 - gamma")?;
        let (r, v) = (random_matrix(&mut rng(21), 1, 4), random_matrix(&mut rng(22), 1, 4));
        let (l, _, _) = embedding_matching_loss(&r, &v, &[r.clone()], &[v.clone()], 0.2)?;
        close(l, 0.4, 1e-12, "negatives equal positives")?;
        ensure!(embedding_matching_loss(&r, &v, &[], &[], 0.2).is_err(), "empty pool accepted");
        Ok(())
    });
    c.run("fine feature concatenation", || {
        let views = [random_matrix(&mut rng(23), 16, 4), random_matrix(&mut rng(24), 16, 4)];
        let both = concat_fine_features(&views, &ViewMask::all(2, MaskKind::ReportStage)?)?;
        ensure!(both.rows() == 32, "{} rows", both.rows());
        let first = concat_fine_features(&views, &ViewMask::new(vec![true, false], MaskKind::ReportStage)?)?;
        ensure!(first == views[0], "masked concatenation differs from view 1");
        Ok(())
    });
}

fn small_model() -> Result<(ParamStore, DamperModel), damper_core::Error> {
    let mut store = ParamStore::new();
    let shape = ModelShape {
        vocab_size: 10,
        num_views: 2,
        image_size: 16,
        dim: 8,
        noise_dim: 4,
        patch_size: 8,
        decoder_layers: 1,
        max_mesh_len: 6,
        max_report_len: 7,
    };
    let model = DamperModel::new(&mut store, shape, 3)?;
    Ok((store, model))
}

fn report_generation(c: &mut Checks) {
    c.run("report decoder distributions, determinism, empty memory", || {
        let (store, model) = small_model()?;
        let mut r = rng(25);
        let ctx = DecoderContext::new(&random_matrix(&mut r, 1, 8), Some(&random_matrix(&mut r, 1, 8)), &random_matrix(&mut r, 8, 8))?;
        let a = report_decode(&model, &store, &ctx, DecodeMode::Greedy { max_len: 7 })?;
        row_sums_are_one(&a.distributions, "greedy")?;
        ensure!(a == report_decode(&model, &store, &ctx, DecodeMode::Greedy { max_len: 7 })?, "greedy repeat differs");
        let tf = report_decode(&model, &store, &ctx, DecodeMode::TeacherForced(&[5, 6, EOS]))?;
        row_sums_are_one(&tf.distributions, "teacher-forced")?;
        ensure!(DecoderContext::new(&Matrix::zeros(0, 8), None, &Matrix::zeros(0, 8)).is_err(), "empty memory accepted");
        Ok(())
    });
    c.run("total loss additions", || {
        close(total_loss(0.0, 0.0)?, 0.0, 0.0, "(0, 0)")?;
        close(total_loss(1.5, 2.5)?, 4.0, 0.0, "(1.5, 2.5)")
    });
    c.run("mesh stage off leaves its decoder alone", || {
        let mut config = small_config();
        config.cmg = false;
        let mut t = Trainer::new(config, &small_records(6, 2))?;
        let before = t.store.clone();
        for _ in 0..3 {
            let b = t.train_step()?;
            ensure!(b.mesh_nll.is_none(), "L_md present");
            ensure!(!b.entries().iter().any(|(k, _)| *k == "L_md"), "L_md logged");
        }
        let changed = t.store.changed_groups(&before);
        ensure!(!changed.contains(&ParamGroup::MeshDecoder), "mesh decoder changed: {changed:?}");
        Ok(())
    });
    c.run("same seed gives identical loss streams", || {
        let records = small_records(6, 2);
        let stream = || -> Result<Vec<_>, damper_core::Error> {
            let mut t = Trainer::new(small_config(), &records)?;
            (0..3).map(|_| t.train_step()).collect()
        };
        let (a, b) = (stream()?, stream()?);
        let bits = |s: &[damper_core::report_gen::LossBreakdown]| -> Vec<u64> {
            s.iter().flat_map(|x| x.entries().into_iter().map(|(_, v)| v.to_bits())).collect()
        };
        ensure!(bits(&a) == bits(&b), "streams differ");
        Ok(())
    });
    c.run("cross-study matching with one study per batch is refused", || {
        let mut config = small_config();
        config.batch_size = 1;
        let refused = Trainer::new(config, &small_records(6, 2)).and_then(|mut t| t.train_step().map(|_| ()));
        ensure!(refused.is_err(), "batch of one trained with inter_rca on");
        Ok(())
    });
    c.run("generation from two views and from none", || {
        let t = Trainer::new(small_config(), &small_records(6, 2))?;
        let study = &t.studies()[0];
        let out = generate_report(&t.model, &t.store, &t.vocab, &t.config, &study.views)?;
        let toks = &out.report_tokens;
        ensure!(!toks.is_empty(), "empty report");
        ensure!(toks.last() == Some(&EOS) || toks.len() == t.model.shape.max_report_len, "neither EOS nor max_len: {toks:?}");
        ensure!(generate_report(&t.model, &t.store, &t.vocab, &t.config, &[]).is_err(), "zero views accepted");
        Ok(())
    });
}

fn checkpoint(c: &mut Checks) {
    c.run("checkpoint bytes round-trip exactly", || {
        let mut t = Trainer::new(small_config(), &small_records(4, 2))?;
        t.train_step()?;
        let ckpt = Checkpoint::from_trainer(&t);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes())?;
        ensure!(back.store.entries().len() == t.store.entries().len(), "parameter count differs");
        for (a, b) in back.store.entries().iter().zip(t.store.entries()) {
            ensure!(a.name == b.name && a.group == b.group, "layout differs at {}", b.name);
            let same = a.value.shape() == b.value.shape()
                && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure!(same, "values differ at {}", b.name);
        }
        ensure!(back.adam == t.adam && back.step == 1 && back.vocab == t.vocab, "optimizer, step or vocab differ");
        Ok(())
    });
    c.run("mismatched config is refused with a warning", || {
        let t = Trainer::new(small_config(), &small_records(4, 2))?;
        let ckpt = Checkpoint::from_trainer(&t);
        let mut other = small_config();
        other.tau = 0.5;
        let compat = ckpt.compatibility(&other);
        ensure!(compat.refuse && !compat.warnings.is_empty(), "not refused: {:?}", compat.warnings);
        ensure!(!ckpt.compatibility(&small_config()).refuse, "identical config refused");
        Ok(())
    });
}

fn metrics(c: &mut Checks) {
    c.run("BLEU extremes", || {
        let refs = ["heart size is normal .", "lungs are clear"];
        for n in 1..=4 {
            close(bleu_n(&refs, &refs, n)?, 1.0, 1e-12, &format!("identical bleu_{n}"))?;
            close(bleu_n(&["x y z w", "v u t"], &refs, n)?, 0.0, 0.0, &format!("disjoint bleu_{n}"))?;
        }
        Ok(())
    });
    c.run("ROUGE-L and METEOR extremes", || {
        close(rouge_l(&["a b c"], &["a b c"])?, 1.0, 1e-12, "identical rouge")?;
        close(rouge_l(&["a b c"], &["d e"])?, 0.0, 0.0, "disjoint rouge")?;
        close(meteor_simplified(&["a b c"], &["d e"])?, 0.0, 0.0, "disjoint meteor")
    });
    c.run("label extraction", || {
        let lex = LabelLexicon::default();
        let got = extract_labels("no acute disease. cardiomegaly.", &lex);
        ensure!(got == BTreeSet::from(["cardiomegaly".to_string()]), "got {got:?}");
        ensure!(extract_labels("", &lex).is_empty(), "empty report has labels");
        Ok(())
    });
    c.run("clinical efficacy conventions", || {
        let sets = vec![BTreeSet::from(["edema".to_string()]), BTreeSet::from(["fracture".to_string()])];
        let same = ce_metrics(&sets, &sets)?;
        ensure!((same.precision, same.recall, same.f1) == (1.0, 1.0, 1.0), "identical gave {same:?}");
        let none = ce_metrics(&[BTreeSet::new(), BTreeSet::new()], &sets)?;
        ensure!((none.precision, none.recall, none.f1) == (0.0, 0.0, 0.0), "empty predictions gave {none:?}");
        Ok(())
    });
}

/// Runs the binary's entry point in-process.
fn call_ok(args: &[&str]) -> Check {
    let (code, _, err) = cli_call(args);
    ensure!(code == 0, "`{}` exited {code}: {err}", args.join(" "));
    Ok(())
}

fn dir_bytes(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("images")] {
        let mut names: Vec<_> = fs::read_dir(&sub)?.filter_map(|e| e.ok()).filter(|e| e.path().is_file()).collect();
        names.sort_by_key(|e| e.file_name());
        for e in names {
            if e.file_name() != "config.txt" {
                out.push((e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?));
            }
        }
    }
    Ok(out)
}


fn cli(c: &mut Checks) {
    c.run("synth-data writes 8 records deterministically", || {
        let tmp = tempfile::tempdir()?;
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        for d in [&a, &b] {
            call_ok(&["synth-data", "--records", "8", "--views", "2", "--seed", "7", "--out", d.to_str().unwrap()])?;
        }
        let text = fs::read_to_string(a.join(DATASET_FILE))?;
        ensure!(text.lines().count() == 8, "{} lines", text.lines().count());
        ensure!(dir_bytes(&a)? == dir_bytes(&b)?, "reruns differ");
        Ok(())
    });
    c.run("train, generate and evaluate through the CLI", || {
        let tmp = tempfile::tempdir()?;
        let root = tmp.path();
        let data_dir = root.join("data");
        let d = data_dir.to_str().unwrap();
        call_ok(&["synth-data", "--records", "20", "--image-size", "16", "--out", d])?;
        let data = data_dir.join(DATASET_FILE);
        let data = data.to_str().unwrap();

        let run = root.join("train");
        let mut args = vec!["train", "--data", data, "--steps", "50", "--run-dir", run.to_str().unwrap()];
        args.extend(SMALL);
        call_ok(&args)?;
        let log = read_loss_log(&run.join("loss_log.jsonl"))?;
        ensure!(log.len() == 50, "{} log lines", log.len());
        ensure!(run.join("checkpoint.bin").is_file(), "no checkpoint");

        let ablated = root.join("no_cmg");
        let mut args = vec!["train", "--data", data, "--steps", "3", "--no-cmg", "--run-dir", ablated.to_str().unwrap()];
        args.extend(SMALL);
        call_ok(&args)?;
        let log = read_loss_log(&ablated.join("loss_log.jsonl"))?;
        ensure!(log.iter().all(|(_, terms)| !terms.contains_key("L_md")), "L_md logged with --no-cmg");

        let ckpt = run.join("checkpoint.bin");
        let mut gens = Vec::new();
        for name in ["gen_a", "gen_b"] {
            let out = root.join(name);
            call_ok(&["generate", "--data", data, "--checkpoint", ckpt.to_str().unwrap(), "--run-dir", out.to_str().unwrap()])?;
            gens.push(fs::read(out.join("generations.jsonl"))?);
        }
        ensure!(gens[0] == gens[1], "generation reruns differ");
        let parsed = read_generations(&root.join("gen_a").join("generations.jsonl"))?;
        ensure!(parsed.len() == 2, "{} generations for the 2-study test split", parsed.len());

        let records = load_dataset(Path::new(data), None)?;
        let refs: Vec<Generation> = records
            .iter()
            .filter(|r| r.split == Split::Test)
            .map(|r| Generation { study_id: r.study_id.clone(), generated_mesh: r.mesh_terms.clone(), generated_report: r.report.clone() })
            .collect();
        let perfect = root.join("perfect.jsonl");
        write_generations(&perfect, &refs)?;
        let empty: Vec<Generation> = refs.iter().map(|g| Generation { generated_report: String::new(), ..g.clone() }).collect();
        let blank = root.join("blank.jsonl");
        write_generations(&blank, &empty)?;
        for (file, want_text, want_ce) in [(&perfect, 1.0, 1.0), (&blank, 0.0, 0.0)] {
            let out = root.join(format!("eval_{want_text}"));
            call_ok(&["evaluate", "--data", data, "--generations", file.to_str().unwrap(), "--run-dir", out.to_str().unwrap()])?;
            let m = read_json(&out.join("metrics.json"))?;
            for key in ["bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "meteor"] {
                let v = m[key].as_f64().unwrap_or(f64::NAN);
                if key == "meteor" && want_text == 1.0 {
                    ensure!(v > 0.9, "meteor {v} on identical text");
                } else {
                    close(v, want_text, 1e-12, key)?;
                }
            }
            if want_ce == 1.0 {
                for key in ["ce_precision", "ce_recall", "ce_f1"] {
                    close(m[key].as_f64().unwrap_or(f64::NAN), 1.0, 1e-12, key)?;
                }
            }
        }
        Ok(())
    });
}

/// Criterion 9.
pub fn run_metric_sanity(c: &mut Checks) {
    let refs = generate_synthetic_corpus(&SyntheticSpec { num_records: 12, ..SyntheticSpec::default() })
        .expect("valid spec")
        .into_iter()
        .map(|r| r.report)
        .collect::<Vec<_>>();
    let ids: Vec<String> = (0..refs.len()).map(|i| format!("s{i}")).collect();
    c.run("identical corpus scores one", || {
        let m = evaluate(&ids, &refs, &refs, &LabelLexicon::default())?;
        for (n, b) in m.bleu.iter().enumerate() {
            close(*b, 1.0, 1e-12, &format!("bleu_{}", n + 1))?;
        }
        close(m.rouge_l, 1.0, 1e-12, "rouge_l")?;
        ensure!((m.ce.precision, m.ce.recall, m.ce.f1) == (1.0, 1.0, 1.0), "ce {:?}", m.ce);
        Ok(())
    });
    c.run("disjoint corpus scores zero", || {
        let hyps: Vec<String> = (0..refs.len()).map(|i| format!("zz{i} qq{i} ww xx yy")).collect();
        let m = evaluate(&ids, &hyps, &refs, &LabelLexicon::default())?;
        for (n, b) in m.bleu.iter().enumerate() {
            close(*b, 0.0, 0.0, &format!("bleu_{}", n + 1))?;
        }
        close(m.rouge_l, 0.0, 0.0, "rouge_l")?;
        close(m.meteor, 0.0, 0.0, "meteor")?;
        ensure!(m.ce.f1 == 0.0 && m.ce.recall == 0.0, "ce {:?}", m.ce);
        Ok(())
    });
}
