//! Finite-difference gradient checks for the model objectives, in
//! 64-bit mode on toy configurations.

mod common;

use milrex::bpe::SpecialTokens;
use milrex::mil::{bag_loss, EncodedBag};
use milrex::model::{lm_loss, Mode, ModelConfig, ParamNodes, Parameters};
use milrex::rng::Rng;
use milrex::tensor::Graph;

const SPECIALS: SpecialTokens = SpecialTokens {
    start: 46,
    delim: 47,
    clf: 48,
    pad: 49,
};

fn toy_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        dim: 8,
        ff_dim: 16,
        context: 16,
        vocab_size: 50,
        relations: 4,
        dropout_residual: 0.0,
        dropout_attention: 0.0,
        dropout_classifier: 0.0,
    }
}

fn analytic_grads(
    params: &Parameters<f64>,
    loss_of: impl Fn(&mut Graph<f64>, &ParamNodes) -> milrex::tensor::NodeId,
) -> Vec<(String, Vec<f64>)> {
    let mut params = params.clone();
    let mut graph = Graph::new();
    let nodes = ParamNodes::bind(&mut graph, &params);
    let loss = loss_of(&mut graph, &nodes);
    graph.backward(loss).unwrap();
    nodes.collect_grads(&graph, &mut params);
    params
        .visit()
        .into_iter()
        .map(|(name, t)| (name, t.grad().unwrap().to_vec()))
        .collect()
}

#[test]
fn lm_loss_gradient_wrt_token_embedding_matches_fd() {
    let cfg = toy_config();
    let mut rng = Rng::new(31);
    let params = Parameters::<f64>::init(&cfg, &mut rng);
    let ids = [3usize, 17, 42, 8, 8, 1];
    let mask = vec![true; ids.len()];

    let eval = |p: &Parameters<f64>| {
        let mut g = Graph::new();
        let n = ParamNodes::bind(&mut g, p);
        let loss = lm_loss(&mut g, &n, &cfg, &ids, &mask, Mode::Eval, &mut Rng::new(0)).unwrap();
        g.scalar(loss)
    };
    let analytic = analytic_grads(&params, |g, n| {
        lm_loss(g, n, &cfg, &ids, &mask, Mode::Eval, &mut Rng::new(0)).unwrap()
    });
    let (err, worst) = common::fd_max_rel_error(
        &params,
        &analytic,
        |name| name == "token_embedding",
        1e-5,
        eval,
    );
    assert!(err <= 1e-4, "worst {worst}: {err}");
}

#[test]
fn bag_loss_gradient_wrt_relation_weight_matches_fd() {
    let cfg = toy_config();
    let mut rng = Rng::new(32);
    let params = Parameters::<f64>::init(&cfg, &mut rng);
    let bag = EncodedBag {
        sequences: vec![
            vec![SPECIALS.start, 5, 9, SPECIALS.clf],
            vec![SPECIALS.start, 11, 2, 30, SPECIALS.clf],
            vec![SPECIALS.start, 7, SPECIALS.clf],
        ],
        label: 2,
    };

    let eval = |p: &Parameters<f64>| {
        let mut g = Graph::new();
        let n = ParamNodes::bind(&mut g, p);
        let loss = bag_loss(&mut g, &n, &cfg, &bag, Mode::Eval, &mut Rng::new(0), SPECIALS)
            .unwrap();
        g.scalar(loss)
    };
    let analytic = analytic_grads(&params, |g, n| {
        bag_loss(g, n, &cfg, &bag, Mode::Eval, &mut Rng::new(0), SPECIALS).unwrap()
    });
    let (err, worst) = common::fd_max_rel_error(
        &params,
        &analytic,
        |name| name == "relation_weight" || name == "relation_bias",
        1e-5,
        eval,
    );
    assert!(err <= 1e-4, "worst {worst}: {err}");
}
