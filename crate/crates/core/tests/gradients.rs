mod common;

use proptest::prelude::*;
use tsrmcl_core::contrastive::{contrastive_loss, contrastive_loss_var, loss_and_grads, Temperature};
use tsrmcl_core::encoders::EncoderParams;
use tsrmcl_core::tensor::{Tape, Tensor};
use tsrmcl_core::tokenizer::TokenSequence;

use common::{gradcheck_end_to_end, toy_batch, toy_configs};

#[test]
fn end_to_end_loss_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let r = gradcheck_end_to_end(seed, 1e-5, 3);
        assert!(r.params_checked > 40, "seed {seed}: only {} params checked", r.params_checked);
        assert!(r.worst_rel_err <= 1e-4, "seed {seed}: {} has rel err {:.3e}", r.worst_param, r.worst_rel_err);
    }
}

#[test]
fn every_parameter_receives_a_nonzero_gradient() {
    let (vit, text) = toy_configs(12);
    let mut params = EncoderParams::init(vit, text, 5).unwrap();
    Temperature::default().store_into(&mut params);
    let (images, texts) = toy_batch(5, 12);
    let ims: Vec<&Tensor> = images.iter().collect();
    let txs: Vec<&TokenSequence> = texts.iter().collect();
    let (_, grads) = loss_and_grads(&params, &ims, &txs).unwrap();
    assert_eq!(grads.len(), params.store.len());
    for (name, g) in &grads {
        assert!(g.data().iter().all(|v| v.is_finite()), "{name} has a non-finite gradient");
        assert!(g.data().iter().any(|v| *v != 0.0), "{name} received no gradient");
    }
}

fn unit_rows(b: usize, d: usize, raw: &[f64]) -> Tensor {
    let mut data = raw[..b * d].to_vec();
    for r in data.chunks_mut(d) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        r.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::matrix(b, d, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_gradient_wrt_similarity_and_gamma(
        b in prop::sample::select(vec![2usize, 4, 8]),
        raw in prop::collection::vec(-1.0f64..1.0, 64),
        gamma in -1.0f64..3.0,
    ) {
        let s = Tensor::matrix(b, b, raw[..b * b].to_vec()).unwrap();
        let mut tape = Tape::new();
        let sv = tape.param(s.clone());
        let gv = tape.param(Tensor::scalar(gamma).unwrap());
        let loss = contrastive_loss_var(&mut tape, sv, gv).unwrap();
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        let (gs, gg) = (grads.wrt(sv), grads.wrt(gv));
        let at = |s: &Tensor, g: f64| contrastive_loss(s, Temperature { gamma: g }).unwrap();
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..b * b {
            let bump = |delta: f64| {
                let mut d = s.data().to_vec();
                d[i] += delta;
                at(&Tensor::matrix(b, b, d).unwrap(), gamma)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            diff2 += (gs.data()[i] - numeric).powi(2);
            norm2 += numeric * numeric;
        }
        let numeric_g = (at(&s, gamma + h) - at(&s, gamma - h)) / (2.0 * h);
        diff2 += (gg.item() - numeric_g).powi(2);
        norm2 += numeric_g * numeric_g;
        prop_assert!(diff2.sqrt() <= 1e-4 * norm2.sqrt().max(1e-8));
    }

    #[test]
    fn loss_is_nonnegative_and_zero_for_single_pair(
        b in 1usize..6,
        raw in prop::collection::vec(-1.0f64..1.0, 48),
        tau in 0.5f64..50.0,
    ) {
        let e = unit_rows(b, 8, &raw);
        let s = tsrmcl_core::contrastive::similarity(&e, &e).unwrap();
        let l = contrastive_loss(&s, Temperature::from_tau(tau).unwrap()).unwrap();
        prop_assert!(l >= -1e-12);
        if b == 1 {
            prop_assert_eq!(l, 0.0);
        }
    }
}
