mod common;

use common::{random_batches, reference_forward, scramble, tiny, toy};
use proptest::prelude::*;
use snf_core::importance::{compute_tables, score_subnetwork, weight_magnitude_tables, ImportanceTables, Source};
use snf_core::model::{LayerChoice, Supernet, SubnetworkConfig, SupernetConfig};

fn scrambled(sup: SupernetConfig, seed: u64) -> Supernet {
    let mut s = Supernet::new(sup, seed).unwrap();
    scramble(s.weights_mut(), seed, 0.5);
    s
}

fn close(a: f32, b: f64) -> bool {
    (a as f64 - b).abs() <= 1e-5 * (1.0 + b.abs())
}

fn row_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn activation_tables_match_a_scalar_oracle() {
    let sup = SupernetConfig { n_layer: 1, ..toy() };
    let model = scrambled(sup, 1);
    let batches = random_batches(2, 3, sup.vocab_size, 2, 8);
    let tables = compute_tables(&model, &batches).unwrap();
    assert_eq!(tables.source, Source::Activation);

    let mut ffn = vec![0.0; sup.intermediate_size];
    let mut emb = vec![0.0; sup.n_embd];
    let mut heads = vec![0.0; sup.n_head];
    let mut block = 0.0;
    for b in &batches {
        let tr = reference_forward(model.weights(), &b.inputs, b.batch, b.seq_len);
        let rows = tr.logits.len() as f64;
        for r in &tr.mlp_preact[0] {
            for (a, x) in ffn.iter_mut().zip(r) {
                *a += x.abs() / rows;
            }
        }
        for norm in &tr.norms {
            for r in norm {
                for (a, x) in emb.iter_mut().zip(r) {
                    *a += x.abs() / rows / tr.norms.len() as f64;
                }
            }
        }
        for r in &tr.attn_heads[0] {
            for (h, a) in heads.iter_mut().enumerate() {
                let seg = &r[h * sup.head_size..(h + 1) * sup.head_size];
                *a += seg.iter().map(|x| x * x).sum::<f64>().sqrt() / rows;
            }
        }
        let cos: f64 = tr.block_inputs[0]
            .iter()
            .zip(&tr.block_outputs[0])
            .map(|(i, o)| row_cosine(i, o))
            .sum();
        block += 1.0 - cos / rows;
    }
    let n = batches.len() as f64;
    for (t, o) in tables.ffn[0].iter().zip(&ffn) {
        assert!(close(*t, o / n), "ffn {t} vs {}", o / n);
    }
    for (t, o) in tables.emb.iter().zip(&emb) {
        assert!(close(*t, o / n), "emb {t} vs {}", o / n);
    }
    for (t, o) in tables.heads[0].iter().zip(&heads) {
        assert!(close(*t, o / n), "head {t} vs {}", o / n);
    }
    assert!(close(tables.blocks[0], block / n));
}

#[test]
fn identity_block_scores_zero() {
    let mut model = scrambled(toy(), 3);
    let b = &mut model.weights_mut().blocks[1];
    for t in [&mut b.wo, &mut b.bo, &mut b.w_proj, &mut b.b_proj] {
        t.data_mut().fill(0.0);
    }
    let tables = compute_tables(&model, &random_batches(4, 2, 256, 2, 8)).unwrap();
    assert!(tables.blocks[1].abs() < 1e-6, "{}", tables.blocks[1]);
    assert!(tables.blocks[0] > 1e-3);
}

#[test]
fn heads_reading_zero_values_score_zero() {
    let mut model = scrambled(toy(), 5);
    let hs = toy().head_size;
    let b = &mut model.weights_mut().blocks[2];
    // Group 0 serves query heads 0 and 1.
    let w = b.wv.last_dim();
    b.wv.data_mut()[..hs * w].fill(0.0);
    b.bv.data_mut()[..hs].fill(0.0);
    let tables = compute_tables(&model, &random_batches(6, 2, 256, 2, 8)).unwrap();
    assert_eq!(&tables.heads[2][..2], &[0.0, 0.0]);
    assert!(tables.heads[2][2..].iter().all(|&x| x > 0.0));
}

#[test]
fn weight_magnitude_scores() {
    let sup = toy();
    let zero = {
        let mut m = Supernet::new(sup, 0).unwrap();
        for t in m.weights_mut().params_mut() {
            t.data_mut().fill(0.0);
        }
        m
    };
    let z = weight_magnitude_tables(&zero);
    assert!(z.ffn.iter().flatten().chain(&z.emb).chain(z.heads.iter().flatten()).chain(&z.blocks).all(|&x| x == 0.0));

    let m = scrambled(sup, 7);
    let base = weight_magnitude_tables(&m);
    let mut doubled = m.clone();
    for t in doubled.weights_mut().params_mut() {
        for x in t.data_mut() {
            *x *= 2.0;
        }
    }
    let d = weight_magnitude_tables(&doubled);
    for (a, b) in base.ffn.iter().flatten().zip(d.ffn.iter().flatten()) {
        assert!((2.0 * a - b).abs() <= 1e-6 * b.abs());
    }
    for (a, b) in base.emb.iter().zip(&d.emb) {
        assert!((2.0 * a - b).abs() <= 1e-6 * b.abs());
    }

    // Neuron 5 of layer 1 by hand: its fc row and its proj column.
    let blk = &m.weights().blocks[1];
    let e = sup.n_embd;
    let fc_row = &blk.w_fc.data()[5 * e..6 * e];
    let proj_col: Vec<f32> = (0..e).map(|r| blk.w_proj.data()[r * sup.intermediate_size + 5]).collect();
    let manual: f64 = fc_row.iter().chain(&proj_col).map(|x| x.abs() as f64).sum::<f64>() / (2 * e) as f64;
    assert!(close(base.ffn[1][5], manual));

    // Head 3 lives in group 1.
    let hs = sup.head_size;
    let mut acc = Vec::new();
    for d in 0..hs {
        acc.extend_from_slice(&blk.wq.data()[(3 * hs + d) * e..(3 * hs + d + 1) * e]);
        acc.extend_from_slice(&blk.wk.data()[(hs + d) * e..(hs + d + 1) * e]);
        acc.extend_from_slice(&blk.wv.data()[(hs + d) * e..(hs + d + 1) * e]);
        let inner = sup.n_head * hs;
        acc.extend((0..e).map(|r| blk.wo.data()[r * inner + 3 * hs + d]));
    }
    let manual = acc.iter().map(|x| x.abs() as f64).sum::<f64>() / acc.len() as f64;
    assert!(close(base.heads[1][3], manual));
}

#[test]
fn full_network_collects_every_group() {
    let sup = toy();
    let m = scrambled(sup, 8);
    let tables = compute_tables(&m, &random_batches(9, 1, 256, 2, 8)).unwrap();
    let s = score_subnetwork(&tables, &sup, &SubnetworkConfig::full(&sup)).unwrap();
    assert!((s - (2.0 + 2.0 * sup.n_layer as f64)).abs() < 1e-9, "{s}");
}

#[test]
fn adding_units_raises_the_score() {
    let sup = toy();
    let m = scrambled(sup, 10);
    let t = weight_magnitude_tables(&m);
    let score = |c: &SubnetworkConfig| score_subnetwork(&t, &sup, c).unwrap();
    let base = SubnetworkConfig::uniform(2, 16, LayerChoice::coarse(2, 4, 32, 1));
    let bigger = [
        SubnetworkConfig::uniform(3, 16, LayerChoice::coarse(2, 4, 32, 1)),
        SubnetworkConfig::uniform(2, 17, LayerChoice::coarse(2, 4, 32, 1)),
        SubnetworkConfig::uniform(2, 16, LayerChoice::coarse(2, 4, 33, 1)),
        SubnetworkConfig::uniform(2, 16, LayerChoice::coarse(4, 4, 32, 2)),
    ];
    for b in &bigger {
        assert!(score(b) > score(&base));
    }
    // The head-size choice does not change which units are kept.
    let narrow = SubnetworkConfig::uniform(2, 16, LayerChoice::coarse(2, 2, 32, 1));
    assert_eq!(score(&narrow), score(&base));
}

#[test]
fn tables_round_trip_through_disk() {
    let sup = tiny();
    let m = scrambled(sup, 11);
    let batches = random_batches(12, 2, sup.vocab_size, 2, 8);
    let a = compute_tables(&m, &batches).unwrap();
    assert_eq!(a, compute_tables(&m, &batches).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("imp.snfw");
    a.save(&path).unwrap();
    assert_eq!(ImportanceTables::load(&path).unwrap(), a);
    assert!(a.check_shape(&toy()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_ignores_constant_shifts(seed in 0u64..1000, shift in -5.0f32..5.0, l in 1usize..=4, e in 1usize..=32) {
        let sup = toy();
        let m = scrambled(sup, seed);
        let t = weight_magnitude_tables(&m);
        let mut shifted = t.clone();
        for x in shifted.ffn.iter_mut().flatten().chain(&mut shifted.emb).chain(shifted.heads.iter_mut().flatten()).chain(&mut shifted.blocks) {
            *x += shift;
        }
        let cfg = SubnetworkConfig::uniform(l, e, LayerChoice::coarse(2, 8, 40, 2));
        let a = score_subnetwork(&t, &sup, &cfg).unwrap();
        let b = score_subnetwork(&shifted, &sup, &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-5);
    }
}
