//! Fixtures shared by several integration-test targets.

#![allow(dead_code)]

use xdr_core::connector::{contrastive_loss_graph, pool_graph, Connector, ConnectorConfig};
use xdr_core::encoder::{Encoder, EncoderConfig, InitMode};
use xdr_core::lvlm::{instruct_loss, Decoder, DecoderConfig, PromptKind, PromptMode, TokenSequence, Vlm, Vocabulary};
use xdr_core::nn::{ModelError, Module};
use xdr_core::evaluation::{per_class_prf, AxisMeans, ClassPrf, ConfusionMatrix};
use xdr_core::labels::{Finding, Grade, LesionKind, Location};
use xdr_core::report::{render_concept_answer, render_report};
use xdr_core::synthfundus::{generate_samples, DatasetConfig, FundusSample};
use xdr_numerics::gradcheck::{check_model, CheckReport, FdConfig, FdRng};
use rand::Rng;
use xdr_numerics::{Graph, Param, Tensor, Var};

/// Every findings list: each concept absent or at one of the five locations.
pub fn all_findings() -> Vec<Vec<Finding>> {
    let mut out = vec![Vec::new()];
    for kind in LesionKind::ALL {
        let mut next = Vec::with_capacity(out.len() * 6);
        for base in &out {
            next.push(base.clone());
            for location in Location::ALL {
                let mut f = base.clone();
                f.push(Finding { kind, location });
                next.push(f);
            }
        }
        out = next;
    }
    out
}

/// Published per-grade precision and recall (tenths of a percent) with the
/// F1 printed next to them.
pub const TABLE4: [(u64, u64, f64); 5] = [
    (901, 925, 91.3),
    (785, 750, 76.7),
    (832, 851, 84.1),
    (705, 689, 69.7),
    (850, 872, 86.1),
];

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Class 0 of a two-class matrix built so that its precision is `p` and its
/// recall `r`, both in tenths of a percent.
pub fn prf_from_counts(p: u64, r: u64) -> ClassPrf {
    let tp = p * r;
    let counts = vec![vec![tp, 1000 * p - tp], vec![1000 * r - tp, 1]];
    per_class_prf(&ConfusionMatrix::from_counts(counts, vec![0, 0]))[0]
}

/// A random findings list that renders as a valid report for `grade`.
pub fn consistent_findings(grade: Grade, rng: &mut impl Rng) -> Vec<Finding> {
    let kind = match grade {
        Grade::NoDr => return Vec::new(),
        Grade::Mild => LesionKind::Microaneurysm,
        Grade::Moderate => LesionKind::HardExudate,
        Grade::Severe => LesionKind::Irma,
        Grade::Proliferative => LesionKind::Neovascularization,
    };
    let location = Location::ALL[rng.random_range(0..Location::ALL.len())];
    vec![Finding { kind, location }]
}

/// Five raters by one hundred samples with integer scores whose per-axis
/// means are 72, 61 and 73 by construction.
pub fn ratings_fixture() -> (String, AxisMeans) {
    let mut csv = String::from("rater_id,sample_id,fluency,accuracy_of_explanation,clinical_utility\n");
    for r in 0..5 {
        for s in 0..100 {
            let fluency = 60 + 5 * r + s % 5;
            let accuracy = 50 + 2 * (s % 10) + r;
            let utility = 70 + 2 * ((r + s) % 4);
            csv.push_str(&format!("r{r},s{s:03},{fluency},{accuracy},{utility}\n"));
        }
    }
    let means = AxisMeans {
        fluency: 72.0,
        accuracy_of_explanation: 61.0,
        clinical_utility: 73.0,
    };
    (csv, means)
}

pub fn samples(per_grade: usize, seed: u64) -> Vec<FundusSample> {
    generate_samples(&DatasetConfig::balanced(per_grade, seed)).unwrap()
}

pub fn fresh_vlm(seed: u64) -> Vlm {
    let vocab = Vocabulary::standard();
    Vlm {
        encoder: Encoder::random(EncoderConfig::default(), seed, InitMode::Generic).unwrap(),
        connector: Connector::new(ConnectorConfig::default(), seed + 1),
        decoder: Decoder::new(DecoderConfig::with_vocab(vocab.len()), seed + 2).unwrap(),
        vocab,
        prompt_mode: PromptMode::Multitask,
        max_len: 96,
    }
}

/// `sum(out ⊙ w)` for a fixed random `w`, so every output entry matters.
/// `w` is scaled by `1/sqrt(n)` to keep the loss near unit size, which keeps
/// finite-difference round-off well below the comparison floor.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, ModelError> {
    let n = g.value(out).numel() as f64;
    let w = FdRng::new(seed).tensor(g.value(out).shape(), 1.0 / n.sqrt());
    let w = g.constant(w)?;
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod)?)
}

/// A short training sequence for `sample`: generic prompt, concept answer.
fn short_sequence(vlm: &Vlm, sample: &FundusSample) -> TokenSequence {
    let prompt = vlm.vocab.tokenize(PromptKind::Generic.text()).unwrap();
    let answer = render_concept_answer(&sample.findings()).unwrap();
    let response = vlm.vocab.tokenize(&answer).unwrap();
    TokenSequence::assemble(vlm.encoder.config.num_patches(), &prompt, Some(&response))
}

/// Finite-difference checks of every model and of both training losses,
/// each with respect to all parameter tensors involved.
pub fn model_gradient_suite() -> Vec<CheckReport> {
    let cfg = FdConfig::default();
    let data = samples(1, 404);
    let vlm = fresh_vlm(17);
    let mut reports = Vec::new();
    let timed = |r: CheckReport, t: std::time::Instant| {
        eprintln!("{} [{:.1}s]", r.name, t.elapsed().as_secs_f64());
        r
    };

    let images: Vec<_> = data.iter().take(1).map(|s| &s.image).collect();
    let patches = vlm.encoder.patch_batch(&images).unwrap();
    let t = std::time::Instant::now();
    reports.push(timed(check_model(
        "encoder",
        &vlm.encoder,
        |m: &mut Encoder| m.params_mut(),
        |m, g| {
            let x = g.constant(patches.clone())?;
            let f = m.forward(g, x, 1)?;
            project(g, f, 1)
        },
        &cfg,
    ), t));

    let features = FdRng::new(5).tensor(&[64, vlm.encoder.config.embed_dim], 1.0);
    let t = std::time::Instant::now();
    reports.push(timed(check_model(
        "connector",
        &vlm.connector,
        |m: &mut Connector| m.params_mut(),
        |m, g| {
            let x = g.constant(features.clone())?;
            let y = m.forward(g, x)?;
            project(g, y, 2)
        },
        &cfg,
    ), t));

    let seq = &short_sequence(&vlm, &data[1]);
    let image_rows = FdRng::new(6).tensor(&[64, vlm.decoder.config.dim], 0.5);
    let t = std::time::Instant::now();
    reports.push(timed(check_model(
        "decoder",
        &vlm.decoder,
        |m: &mut Decoder| m.params_mut(),
        |m, g| {
            let img = g.constant(image_rows.clone())?;
            let x = m.embed(g, img, seq)?;
            let h = m.hidden(g, x, &[seq.len()])?;
            let (rows, targets) = seq.loss_rows();
            let logits = m.logits_at(g, h, &rows)?;
            Ok::<_, ModelError>(g.cross_entropy(logits, &targets, &vec![true; rows.len()])?)
        },
        &cfg,
    ), t));

    let pairs = &data[1..3];
    let text: Vec<Vec<f64>> = pairs
        .iter()
        .map(|s| {
            let ids = vlm.vocab.tokenize(&render_report(s.grade, &s.findings()).unwrap()).unwrap();
            vlm.decoder.caption_vector(&ids).unwrap()
        })
        .collect();
    let text_rows: Vec<&[f64]> = text.iter().map(Vec::as_slice).collect();
    let text = Tensor::from_rows(&text_rows).unwrap();
    let pair_images: Vec<_> = pairs.iter().map(|s| &s.image).collect();
    let pair_patches = vlm.encoder.patch_batch(&pair_images).unwrap();
    let t = std::time::Instant::now();
    reports.push(timed(check_model(
        "contrastive_end_to_end",
        &(vlm.encoder.clone(), vlm.connector.clone()),
        |(e, c): &mut (Encoder, Connector)| {
            let mut p: Vec<&mut Param> = e.params_mut();
            p.extend(c.params_mut());
            p
        },
        |(e, c), g| {
            let x = g.constant(pair_patches.clone())?;
            let f = e.forward(g, x, 2)?;
            let y = c.forward(g, f)?;
            let img = pool_graph(g, y, 2)?;
            let txt = g.constant(text.clone())?;
            contrastive_loss_graph(g, img, txt, 0.07)
        },
        &cfg,
    ), t));

    let batch = [(1, seq)];
    let t = std::time::Instant::now();
    reports.push(timed(check_model(
        "generation_end_to_end",
        &vlm,
        |m: &mut Vlm| m.params_mut(true, true),
        |m, g| instruct_loss(m, g, &batch, &data, None),
        &cfg,
    ), t));
    reports
}
