use std::path::Path;

use eclip::data::{LoadedDataset, Manifest};
use eclip::model::decoder::{build_queries_vars, decode_vars, Modality, PromptVar};
use eclip::model::encoder::{encode_image_vars, encode_text_vars};
use eclip::model::layers::Bound;
use eclip::model::EclipModel;
use eclip::objectives::intra_loss_sample;
use eclip::tensor::graph::Graph;
use eclip::tensor::Tensor;
use eclip::train::checkpoint::{restore_params, TrainState};

fn intra_value_and_grads(
    model: &EclipModel,
    ds: &LoadedDataset,
    grad_names: &[&str],
) -> (f64, Vec<Tensor>) {
    let cfg = &model.config;
    let ids = &model.ids;
    let vocab = cfg.vocab_size as u32;
    let g = Graph::new();
    let bound = Bound::trainable(&g, &model.params);
    let inv_tau = bound.var(ids.log_tau).mul_scalar(-1.0).exp();

    let anchor = ds.images[0][0].clone();
    let enc_img = encode_image_vars(&bound, &ids.img, cfg, &anchor).unwrap();
    let text = ds.manifest.text_sample(0, vocab).unwrap();
    let enc_txt = encode_text_vars(&bound, &ids.txt, cfg, &text).unwrap();

    let mut prompts = Vec::new();
    prompts.push(PromptVar {
        embedding: enc_txt.projected_cls.detach(),
        modality: Modality::Text,
        is_positive: true,
    });
    for j in 1..cfg.num_queries {
        let tj = ds.manifest.text_sample(j, vocab).unwrap();
        let ej = encode_text_vars(&bound, &ids.txt, cfg, &tj).unwrap();
        prompts.push(PromptVar {
            embedding: ej.projected_cls.detach(),
            modality: Modality::Text,
            is_positive: false,
        });
    }
    let queries = build_queries_vars(&bound, &ids.dec, cfg, &prompts).unwrap();
    let z = enc_img.projected_tokens.detach();
    let dec = decode_vars(&bound, &ids.dec, z, &queries).unwrap();
    let txt_det = enc_txt.projected_cls.detach();
    let intra = intra_loss_sample(dec.h_final, txt_det, 0, inv_tau).unwrap();
    let val = intra.value_with(|t| t.item());
    let mut store = g.backward(intra).unwrap();
    let grads = grad_names
        .iter()
        .map(|n| {
            let id = model.params.index_of(n).unwrap();
            store.take_or_zeros(bound.var(id))
        })
        .collect();
    (val, grads)
}

#[test]
fn fd_check_and_overfit() {
    let state = TrainState::load(Path::new("/tmp/desk/full1.ckpt")).unwrap();
    let config = state.config.clone();
    let mut model =
        EclipModel::init_seeded(config.model.clone(), config.train.tau_init, 0).unwrap();
    restore_params(&mut model.params, &state.base).unwrap();

    let manifest = Manifest::load(Path::new("/tmp/desk/data2/manifest.jsonl")).unwrap();
    let ds = LoadedDataset::load(manifest).unwrap();

    // FD vs AD on a few coordinates of several decoder params.
    let names = [
        "dec.blocks.1.w_q",
        "dec.blocks.0.w_z",
        "dec.blocks.0.w_v",
        "dec.blocks.1.w_o",
        "dec.query_pos",
    ];
    let (_, grads) = intra_value_and_grads(&model, &ds, &names);
    let eps = 1e-6;
    for (ni, name) in names.iter().enumerate() {
        let id = model.params.index_of(name).unwrap();
        for k in [0usize, 7, 130 % model.params.get(id).numel()] {
            let orig = model.params.get(id).data()[k];
            model.params.get_mut(id).data_mut()[k] = orig + eps;
            let (up, _) = intra_value_and_grads(&model, &ds, &[]);
            model.params.get_mut(id).data_mut()[k] = orig - eps;
            let (dn, _) = intra_value_and_grads(&model, &ds, &[]);
            model.params.get_mut(id).data_mut()[k] = orig;
            let fd = (up - dn) / (2.0 * eps);
            let ad = grads[ni].data()[k];
            println!("{name}[{k}]: ad {ad:+.6e} fd {fd:+.6e}");
        }
    }

    // Single-sample overfit: plain SGD on decoder params only.
    let dec_ids: Vec<_> = model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("dec."))
        .map(|(n, _)| (n.to_string(), model.params.index_of(n).unwrap()))
        .collect();
    let dec_names: Vec<&str> = dec_ids.iter().map(|(n, _)| n.as_str()).collect();
    let lr = 0.05;
    for step in 0..400 {
        let (val, grads) = intra_value_and_grads(&model, &ds, &dec_names);
        if step % 40 == 0 {
            println!("overfit step {step}: intra {val:.6}");
        }
        for ((_, id), grad) in dec_ids.iter().zip(&grads) {
            let p = model.params.get_mut(*id);
            for (x, g) in p.data_mut().iter_mut().zip(grad.data()) {
                *x -= lr * g;
            }
        }
    }
    let (val, _) = intra_value_and_grads(&model, &ds, &[]);
    println!("overfit final: intra {val:.6} (ln6 = {:.6})", 6f64.ln());
}
