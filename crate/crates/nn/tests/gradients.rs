//! Finite-difference verification (f64, step 1e-5) for every differentiable
//! op and for composite transformer stacks. Analytic gradients must match
//! central differences with max relative error < 1e-4.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ueidg_nn::{
    grad_check_params, scaled_dot_attention, Axis, DecoderBlock, EncoderBlock, ModelConfig,
    MultiHeadAttention, ParamBuilder, Tensor, TransformerDecoder, TransformerEncoder,
};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn param(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    let v = rand_vec(rng, r * c);
    Tensor::param(r, c, v)
}

/// Fixed untracked weights turn a matrix output into a scalar with
/// non-uniform per-coordinate sensitivity.
fn weights(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    let v = rand_vec(rng, r * c);
    Tensor::new(r, c, v)
}

fn assert_grads<F: FnMut() -> Tensor<f64>>(f: F, params: &[Tensor<f64>], what: &str) {
    let err = grad_check_params(f, params, STEP).unwrap();
    assert!(err < TOL, "{what}: max relative error {err:.3e} >= {TOL:.0e}");
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = param(&mut rng, 3, 4);
    let b = param(&mut rng, 3, 4);
    let w = weights(&mut rng, 3, 4);
    let offset = rand_vec(&mut rng, 12);

    let (ac, bc, wc) = (a.clone(), b.clone(), w.clone());
    assert_grads(
        move || ac.add(&bc).mul(&wc).sum_all(),
        &[a.clone(), b.clone()],
        "add",
    );
    let (ac, bc, wc) = (a.clone(), b.clone(), w.clone());
    assert_grads(
        move || ac.sub(&bc).mul(&wc).sum_all(),
        &[a.clone(), b.clone()],
        "sub",
    );
    let (ac, bc, wc) = (a.clone(), b.clone(), w.clone());
    assert_grads(
        move || ac.mul(&bc).mul(&wc).sum_all(),
        &[a.clone(), b.clone()],
        "mul",
    );
    let (ac, wc) = (a.clone(), w.clone());
    assert_grads(move || ac.scale(-1.7).mul(&wc).sum_all(), &[a.clone()], "scale");
    let (ac, wc, off) = (a.clone(), w.clone(), offset.clone());
    assert_grads(
        move || ac.add_const(&off).mul(&wc).sum_all(),
        &[a.clone()],
        "add_const",
    );
    let (ac, wc) = (a.clone(), w.clone());
    assert_grads(move || ac.gelu().mul(&wc).sum_all(), &[a.clone()], "gelu");
}

#[test]
fn bias_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = param(&mut rng, 4, 3);
    let bias = param(&mut rng, 1, 3);
    let w = weights(&mut rng, 4, 3);

    let (xc, bc, wc) = (x.clone(), bias.clone(), w.clone());
    assert_grads(
        move || xc.add_bias(&bc).mul(&wc).sum_all(),
        &[x.clone(), bias.clone()],
        "add_bias",
    );
    let (xc, wc) = (x.clone(), weights(&mut rng, 3, 4));
    assert_grads(
        move || xc.transpose().mul(&wc).sum_all(),
        &[x.clone()],
        "transpose",
    );
    let (xc, wc) = (x.clone(), weights(&mut rng, 2, 6));
    assert_grads(
        move || xc.reshape(2, 6).mul(&wc).sum_all(),
        &[x.clone()],
        "reshape",
    );
    let (xc, wc) = (x.clone(), weights(&mut rng, 4, 2));
    assert_grads(
        move || xc.slice_cols(1, 3).mul(&wc).sum_all(),
        &[x.clone()],
        "slice_cols",
    );
    // A repeated row index exercises scatter-add accumulation.
    let (xc, wc) = (x.clone(), weights(&mut rng, 4, 3));
    assert_grads(
        move || xc.gather_rows(&[2, 0, 2, 3]).mul(&wc).sum_all(),
        &[x.clone()],
        "gather_rows",
    );
}

#[test]
fn concat_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = param(&mut rng, 2, 3);
    let b = param(&mut rng, 4, 3);
    let w = weights(&mut rng, 6, 3);
    let (ac, bc, wc) = (a.clone(), b.clone(), w.clone());
    assert_grads(
        move || Tensor::concat_rows(&[ac.clone(), bc.clone()]).mul(&wc).sum_all(),
        &[a.clone(), b.clone()],
        "concat_rows",
    );

    let c = param(&mut rng, 2, 5);
    let w2 = weights(&mut rng, 2, 8);
    let (ac, cc, wc) = (a.clone(), c.clone(), w2.clone());
    assert_grads(
        move || Tensor::concat_cols(&[ac.clone(), cc.clone()]).mul(&wc).sum_all(),
        &[a, c],
        "concat_cols",
    );
}

#[test]
fn reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = param(&mut rng, 5, 3);
    let w = weights(&mut rng, 1, 3);

    let (xc, wc) = (x.clone(), w.clone());
    assert_grads(
        move || xc.mean_rows().mul(&wc).sum_all(),
        &[x.clone()],
        "mean_rows",
    );
    let xc = x.clone();
    assert_grads(move || xc.sum_all(), &[x.clone()], "sum_all");
    let xc = x.clone();
    assert_grads(move || xc.mean_all(), &[x.clone()], "mean_all");
}

#[test]
fn softmax_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = param(&mut rng, 3, 5);
    let w = weights(&mut rng, 3, 5);
    let (xc, wc) = (x.clone(), w.clone());
    assert_grads(
        move || xc.softmax_rows().mul(&wc).sum_all(),
        &[x.clone()],
        "softmax_rows",
    );
    let w2 = weights(&mut rng, 3, 5);
    let (xc, wc) = (x.clone(), w2.clone());
    assert_grads(
        move || xc.softmax(Axis::Cols).mul(&wc).sum_all(),
        &[x.clone()],
        "softmax_cols",
    );
}

#[test]
fn layer_norm_all_parents() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = param(&mut rng, 4, 6);
    let gamma = param(&mut rng, 1, 6);
    let beta = param(&mut rng, 1, 6);
    let w = weights(&mut rng, 4, 6);
    let (xc, gc, bc, wc) = (x.clone(), gamma.clone(), beta.clone(), w.clone());
    assert_grads(
        move || xc.layer_norm(&gc, &bc, 1e-5).mul(&wc).sum_all(),
        &[x, gamma, beta],
        "layer_norm",
    );
}

#[test]
fn matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = param(&mut rng, 3, 4);
    let b = param(&mut rng, 4, 5);
    let w = weights(&mut rng, 3, 5);
    let (ac, bc, wc) = (a.clone(), b.clone(), w.clone());
    assert_grads(
        move || ac.matmul(&bc).mul(&wc).sum_all(),
        &[a.clone(), b.clone()],
        "matmul",
    );

    let bt = param(&mut rng, 5, 4);
    let (ac, bc, wc) = (a.clone(), bt.clone(), w.clone());
    assert_grads(
        move || ac.matmul_nt(&bc).mul(&wc).sum_all(),
        &[a, bt],
        "matmul_nt",
    );
}

#[test]
fn cross_entropy_with_and_without_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = param(&mut rng, 4, 6);
    let lc = logits.clone();
    assert_grads(
        move || lc.cross_entropy_rows(&[2, 0, 5, 1], None),
        &[logits.clone()],
        "cross_entropy",
    );
    let lc = logits.clone();
    assert_grads(
        move || lc.cross_entropy_rows(&[2, 0, 5, 0], Some(0)),
        &[logits],
        "cross_entropy (ignore pad)",
    );
}

#[test]
fn attention_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = param(&mut rng, 3, 4);
    let k = param(&mut rng, 5, 4);
    let v = param(&mut rng, 5, 4);
    let w = weights(&mut rng, 3, 4);
    let (qc, kc, vc, wc) = (q.clone(), k.clone(), v.clone(), w.clone());
    assert_grads(
        move || scaled_dot_attention(&qc, &kc, &vc).mul(&wc).sum_all(),
        &[q, k, v],
        "scaled_dot_attention",
    );
}

#[test]
fn parameter_reuse_accumulates_correctly() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = param(&mut rng, 3, 3);
    // x appears four times in the graph, including as both matmul operands.
    let xc = x.clone();
    assert_grads(
        move || xc.matmul(&xc).add(&xc.mul(&xc)).mean_all(),
        &[x],
        "reused parameter",
    );
}

fn micro_cfg(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 6,
        n_heads: 2,
        n_layers_enc: 1,
        n_layers_dec: 1,
        d_ff: 8,
        max_seq_len: 8,
        dropout: 0.0,
        seed,
    }
}

#[test]
fn multi_head_attention_parameters() {
    let cfg = micro_cfg(11);
    let mut pb = ParamBuilder::<f64>::new(cfg.seed);
    let mha = MultiHeadAttention::new(&mut pb, "mha", &cfg);
    let params = pb.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = weights(&mut rng, 4, 6);
    let w = weights(&mut rng, 4, 6);
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.clone()).collect();
    assert_grads(
        move || mha.forward(&x, &x, true).mul(&w).sum_all(),
        &tensors,
        "multi_head_attention (causal)",
    );
}

#[test]
fn encoder_block_parameters() {
    let cfg = micro_cfg(13);
    let mut pb = ParamBuilder::<f64>::new(cfg.seed);
    let block = EncoderBlock::new(&mut pb, "b", &cfg);
    let params = pb.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = weights(&mut rng, 5, 6);
    let w = weights(&mut rng, 5, 6);
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.clone()).collect();
    assert_grads(
        move || block.forward(&x).mul(&w).sum_all(),
        &tensors,
        "encoder_block",
    );
}

#[test]
fn decoder_block_parameters() {
    let cfg = micro_cfg(15);
    let mut pb = ParamBuilder::<f64>::new(cfg.seed);
    let block = DecoderBlock::new(&mut pb, "b", &cfg);
    let params = pb.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = weights(&mut rng, 4, 6);
    let enc = weights(&mut rng, 3, 6);
    let w = weights(&mut rng, 4, 6);
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.clone()).collect();
    assert_grads(
        move || block.forward(&x, &enc).mul(&w).sum_all(),
        &tensors,
        "decoder_block",
    );
}

#[test]
fn full_encoder_decoder_stack() {
    let cfg = micro_cfg(17);
    let mut pb = ParamBuilder::<f64>::new(cfg.seed);
    let enc = TransformerEncoder::new(&mut pb, "enc", &cfg);
    let dec_emb = ueidg_nn::Embedding::with_table(enc.embedding.table.clone(), &cfg);
    let dec = TransformerDecoder::with_embedding(&mut pb, "dec", dec_emb, &cfg);
    let params = pb.finish();
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.clone()).collect();
    let src = [1usize, 4, 7, 2];
    let tgt = [3usize, 5, 6];
    let gold = [5usize, 6, 2];
    assert_grads(
        move || {
            let h_enc = enc.forward(&src);
            let h_dec = dec.forward(&tgt, &h_enc);
            // Tied output projection: logits = H · Embᵀ.
            let logits = h_dec.matmul_nt(&enc.embedding.table);
            logits.cross_entropy_rows(&gold, None)
        },
        &tensors,
        "full encoder-decoder with tied projection",
    );
}
