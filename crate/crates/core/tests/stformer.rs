use lvst_core::embedding::CalendarIndex;
use lvst_core::numerics::{softmax_lastdim, MaskMode, OpKind, Tape, Tensor, Var};
use lvst_core::params::{BoundParams, ParamStore};
use lvst_core::stformer::{
    encoder_layer, fuse_and_ffn, gated_filter, masked_spatial_attention, model_gradcheck, mvsa, regression_head,
    rescale_pivotal, stcb, temporal_attention, AttentionParams, HeadParams, LayerOptions, LayerParams, Model,
    ModelConfig, ModelInput, SpatialMasks, GRADCHECK_EPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_mask(n: usize, density: f64, r: &mut ChaCha8Rng) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i == j || r.gen_bool(density) {
                m.set2(i, j, 1.0);
            }
        }
    }
    m
}

fn opts(heads: usize) -> LayerOptions {
    LayerOptions { spatial_heads: heads, temporal_heads: heads, mask_mode: MaskMode::Exclude, stcb: true }
}

/// Plain matrix product written out for the oracles below.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

fn set(store: &mut ParamStore, id: lvst_core::params::ParamId, t: Tensor) {
    *store.get_mut(id) = t;
}

struct Branch {
    store: ParamStore,
    p: AttentionParams,
}

fn branch(d: usize, seed: u64) -> Branch {
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut store, "b", d, &mut rng(seed));
    Branch { store, p }
}

fn run_spatial(b: &Branch, z: &Tensor, mask: &Tensor, heads: usize, mode: MaskMode) -> (Tensor, Vec<f64>) {
    let mut tape = Tape::new();
    let bp = b.store.register(&mut tape, false);
    let zv = tape.constant(z.clone());
    let r = masked_spatial_attention(&mut tape, &b.p, &bp, zv, mask, heads, mode, None).unwrap();
    (tape.value(r.out).clone(), tape.attention_probs(r.probs).unwrap().to_vec())
}

#[test]
fn all_ones_mask_with_zero_scores_averages_values() {
    let (n, d) = (5, 4);
    let mut b = branch(d, 1);
    set(&mut b.store, b.p.wq, Tensor::zeros(&[d, d]));
    set(&mut b.store, b.p.wo, Tensor::identity(d));
    let z = random(&[n, d], &mut rng(2));
    let (out, probs) = run_spatial(&b, &z, &Tensor::full(&[n, n], 1.0), 2, MaskMode::Exclude);
    assert!(probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    let v = mm(z.data(), b.store.get(b.p.wv).data(), n, d, d);
    for c in 0..d {
        let mean: f64 = (0..n).map(|i| v[i * d + c]).sum::<f64>() / n as f64;
        for i in 0..n {
            assert!((out.get2(i, c) - mean).abs() < 1e-14);
        }
    }
}

#[test]
fn identity_mask_returns_own_projected_value() {
    let (n, d) = (4, 6);
    let b = branch(d, 3);
    let z = random(&[n, d], &mut rng(4));
    let (out, _) = run_spatial(&b, &z, &Tensor::identity(n), 3, MaskMode::Exclude);
    let v = mm(z.data(), b.store.get(b.p.wv).data(), n, d, d);
    let expect = mm(&v, b.store.get(b.p.wo).data(), n, d, d);
    for (a, e) in out.data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-14);
    }
}

#[test]
fn pivotal_weight_two_raises_attention_on_that_pair() {
    let (n, d) = (3, 2);
    let mut b = branch(d, 5);
    set(&mut b.store, b.p.wq, Tensor::identity(d));
    set(&mut b.store, b.p.wk, Tensor::identity(d));
    let z = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.8, 0.2], vec![-0.3, 0.9]]).unwrap();
    let mut weighted = Tensor::full(&[n, n], 1.0);
    weighted.set2(0, 1, 2.0);
    let (_, ones) = run_spatial(&b, &z, &Tensor::full(&[n, n], 1.0), 1, MaskMode::Exclude);
    let (_, two) = run_spatial(&b, &z, &weighted, 1, MaskMode::Exclude);

    // Oracle: row 0 logits s(0,j) = z0·zj / √2, pair (0,1) doubled.
    let s: Vec<f64> = (0..n).map(|j| (z.row(0)[0] * z.row(j)[0] + z.row(0)[1] * z.row(j)[1]) / 2f64.sqrt()).collect();
    let soft = |l: Vec<f64>| softmax_lastdim(&Tensor::new(vec![n], l).unwrap()).unwrap().into_data();
    let base = soft(s.clone());
    let boosted = soft(vec![s[0], 2.0 * s[1], s[2]]);
    assert!(s[1] > 0.0);
    for j in 0..n {
        assert!((ones[j] - base[j]).abs() < 1e-14);
        assert!((two[j] - boosted[j]).abs() < 1e-14);
    }
    assert!(two[1] > ones[1]);
}

#[test]
fn rescaled_pivotal_mask_peaks_at_one() {
    let m = Tensor::from_rows(&[vec![4.0, 2.0], vec![0.0, 8.0]]).unwrap();
    assert_eq!(rescale_pivotal(&m).data(), &[0.5, 0.25, 0.0, 1.0]);
    let z = Tensor::zeros(&[2, 2]);
    assert_eq!(rescale_pivotal(&z), z);
}

#[test]
fn random_masks_exclude_zero_entries_and_rows_sum_to_one() {
    let (n, d, heads) = (10, 8, 2);
    let mut r = rng(6);
    for trial in 0..20 {
        let b = branch(d, 100 + trial);
        let mask = random_mask(n, 0.3, &mut r);
        let z = random(&[3, n, d], &mut r);
        let (_, probs) = run_spatial(&b, &z, &mask, heads, MaskMode::Exclude);
        for (row_idx, row) in probs.chunks(n).enumerate() {
            let i = row_idx % n;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..n {
                if mask.get2(i, j) == 0.0 {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }
}

#[test]
fn fully_masked_row_attends_to_itself() {
    let (n, d) = (3, 4);
    let b = branch(d, 7);
    let mut mask = Tensor::full(&[n, n], 1.0);
    for j in 0..n {
        mask.set2(1, j, 0.0);
    }
    let (out, probs) = run_spatial(&b, &random(&[n, d], &mut rng(8)), &mask, 2, MaskMode::Exclude);
    assert!(out.is_finite());
    for h in 0..2 {
        assert_eq!(&probs[h * n * n + n..h * n * n + 2 * n], &[0.0, 1.0, 0.0]);
    }
}

#[test]
fn multiply_mode_keeps_zero_entries_in_softmax() {
    let (n, d) = (4, 4);
    let b = branch(d, 9);
    let (_, probs) = run_spatial(&b, &random(&[n, d], &mut rng(10)), &Tensor::identity(n), 1, MaskMode::Multiply);
    assert!(probs.iter().all(|&p| p > 0.0));
}

#[test]
fn zeroing_more_mask_entries_never_lowers_surviving_weights() {
    let (n, d) = (6, 4);
    let mut r = rng(11);
    for trial in 0..30 {
        let b = branch(d, 200 + trial);
        let z = random(&[n, d], &mut r);
        let mask = random_mask(n, 0.7, &mut r);
        let mut tighter = mask.clone();
        let (i, j) = loop {
            let (i, j) = (r.gen_range(0..n), r.gen_range(0..n));
            if i != j && mask.get2(i, j) > 0.0 {
                break (i, j);
            }
            if (0..n).all(|a| (0..n).all(|c| a == c || mask.get2(a, c) == 0.0)) {
                break (0, 0);
            }
        };
        if i == j {
            continue;
        }
        tighter.set2(i, j, 0.0);
        let (_, before) = run_spatial(&b, &z, &mask, 1, MaskMode::Exclude);
        let (_, after) = run_spatial(&b, &z, &tighter, 1, MaskMode::Exclude);
        assert_eq!(after[i * n + j], 0.0);
        for c in 0..n {
            if tighter.get2(i, c) > 0.0 {
                assert!(after[i * n + c] >= before[i * n + c] - 1e-15);
            }
        }
    }
}

struct LayerFixture {
    store: ParamStore,
    lp: LayerParams,
}

fn layer(d: usize, seed: u64) -> LayerFixture {
    let mut store = ParamStore::new();
    let lp = LayerParams::init(&mut store, "l", d, &mut rng(seed));
    LayerFixture { store, lp }
}

fn masks(n: usize, r: &mut ChaCha8Rng) -> SpatialMasks {
    let mut pivotal = random_mask(n, 0.5, r);
    pivotal.set2(0, 1, 2.0);
    SpatialMasks { local: random_mask(n, 0.4, r), global: random_mask(n, 0.4, r), pivotal: rescale_pivotal(&pivotal) }
}

fn with_tape<T>(store: &ParamStore, f: impl FnOnce(&mut Tape, &BoundParams) -> T) -> T {
    let mut tape = Tape::new();
    let bp = store.register(&mut tape, false);
    f(&mut tape, &bp)
}

#[test]
fn mvsa_single_step_equals_direct_branch_calls() {
    let (n, d) = (5, 4);
    let mut r = rng(12);
    let f = layer(d, 13);
    let m = masks(n, &mut r);
    let z = random(&[1, 1, n, d], &mut r);
    with_tape(&f.store, |tape, bp| {
        let zv = tape.constant(z.clone());
        let (outs, _) = mvsa(tape, &f.lp, bp, zv, &m, &opts(2), None).unwrap();
        let slice = tape.constant(z.reshape(&[n, d]).unwrap());
        for (k, (p, mask)) in [(&f.lp.local, &m.local), (&f.lp.global, &m.global), (&f.lp.pivotal, &m.pivotal)]
            .into_iter()
            .enumerate()
        {
            let direct = masked_spatial_attention(tape, p, bp, slice, mask, 2, MaskMode::Exclude, None).unwrap();
            assert_eq!(tape.value(outs[k]).data(), tape.value(direct.out).data());
        }
    });
}

#[test]
fn mvsa_identical_slices_give_identical_outputs() {
    let (n, d, t) = (4, 4, 3);
    let mut r = rng(14);
    let f = layer(d, 15);
    let m = masks(n, &mut r);
    let slice = random(&[n, d], &mut r);
    let z = Tensor::new(vec![1, t, n, d], slice.data().repeat(t)).unwrap();
    with_tape(&f.store, |tape, bp| {
        let zv = tape.constant(z);
        let (outs, _) = mvsa(tape, &f.lp, bp, zv, &m, &opts(2), None).unwrap();
        for o in outs {
            let data = tape.value(o).data();
            for s in 1..t {
                assert_eq!(&data[..n * d], &data[s * n * d..(s + 1) * n * d]);
            }
        }
    });
}

#[test]
fn swapping_local_and_global_masks_swaps_branches_when_tied() {
    let (n, d) = (5, 4);
    let mut r = rng(16);
    let mut f = layer(d, 17);
    for (src, dst) in [
        (f.lp.local.wq, f.lp.global.wq),
        (f.lp.local.wk, f.lp.global.wk),
        (f.lp.local.wv, f.lp.global.wv),
        (f.lp.local.wo, f.lp.global.wo),
    ] {
        let t = f.store.get(src).clone();
        set(&mut f.store, dst, t);
    }
    let m = masks(n, &mut r);
    let swapped = SpatialMasks { local: m.global.clone(), global: m.local.clone(), pivotal: m.pivotal.clone() };
    let z = random(&[1, 2, n, d], &mut r);
    with_tape(&f.store, |tape, bp| {
        let zv = tape.constant(z);
        let (a, _) = mvsa(tape, &f.lp, bp, zv, &m, &opts(2), None).unwrap();
        let (b, _) = mvsa(tape, &f.lp, bp, zv, &swapped, &opts(2), None).unwrap();
        assert_eq!(tape.value(a[0]), tape.value(b[1]));
        assert_eq!(tape.value(a[1]), tape.value(b[0]));
    });
}

#[test]
fn gated_filter_cases() {
    let (n, d) = (3, 4);
    let mut f = layer(d, 18);
    with_tape(&f.store, |tape, bp| {
        let zero = tape.constant(Tensor::zeros(&[1, 2, n, d]));
        let out = gated_filter(tape, &f.lp, bp, zero).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let z = tape.constant(random(&[1, 2, n, d], &mut rng(19)).map(|v| 50.0 * v));
        let out = gated_filter(tape, &f.lp, bp, z).unwrap();
        assert!(tape.value(out).data().iter().all(|v| v.abs() < 1.0));
    });
    set(&mut f.store, f.lp.gate_b, Tensor::full(&[d], -20.0));
    set(&mut f.store, f.lp.gate_w, Tensor::zeros(&[d, d]));
    with_tape(&f.store, |tape, bp| {
        let z = tape.constant(random(&[1, 2, n, d], &mut rng(20)));
        let out = gated_filter(tape, &f.lp, bp, z).unwrap();
        assert!(tape.value(out).max_abs() < 1e-8);
    });
}

#[test]
fn temporal_attention_cases() {
    let (n, d) = (3, 4);
    let f = layer(d, 21);
    let p = &f.lp.temporal;
    // T = 1: output is the projected value.
    let z = random(&[1, 1, n, d], &mut rng(22));
    with_tape(&f.store, |tape, bp| {
        let zv = tape.constant(z.clone());
        let r = temporal_attention(tape, p, bp, zv, 2, None).unwrap();
        let v = mm(z.data(), f.store.get(p.wv).data(), n, d, d);
        let expect = mm(&v, f.store.get(p.wo).data(), n, d, d);
        for (a, e) in tape.value(r.out).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-14);
        }
    });
    // Nodes 0 and 2 share a series.
    let t = 5;
    let mut z = random(&[1, t, n, d], &mut rng(23));
    for s in 0..t {
        for c in 0..d {
            let v = z.data()[(s * n) * d + c];
            z.data_mut()[(s * n + 2) * d + c] = v;
        }
    }
    with_tape(&f.store, |tape, bp| {
        let zv = tape.constant(z);
        let r = temporal_attention(tape, p, bp, zv, 2, None).unwrap();
        for row in tape.attention_probs(r.probs).unwrap().chunks(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let out = tape.value(r.out).data();
        for s in 0..t {
            assert_eq!(&out[(s * n) * d..(s * n + 1) * d], &out[(s * n + 2) * d..(s * n + 3) * d]);
        }
    });
}

#[test]
fn stcb_hand_cases_and_mean_preservation() {
    let two = Tensor::new(vec![1, 2, 1], vec![0.0, 2.0]).unwrap();
    assert_eq!(stcb(&two).data(), &[0.5, 1.5]);
    let constant = Tensor::new(vec![2, 3, 2], [1.5, -2.0].repeat(6)).unwrap();
    assert_eq!(stcb(&constant), constant);

    let (t, n, d) = (4, 7, 5);
    let x = random(&[t, n, d], &mut rng(24));
    let y = stcb(&x);
    for s in 0..t {
        for c in 0..d {
            let mean = |z: &Tensor| (0..n).map(|i| z.data()[(s * n + i) * d + c]).sum::<f64>() / n as f64;
            assert!((mean(&x) - mean(&y)).abs() < 1e-12);
        }
    }
    assert!(stcb(&y).max_abs_diff(&y) > 1e-3);
}

#[test]
fn fuse_and_ffn_shapes_and_stcb_effect() {
    let (n, d) = (4, 4);
    let mut r = rng(25);
    let mut f = layer(d, 26);
    let z = random(&[1, 3, n, d], &mut r);
    let branches: Vec<Tensor> = (0..4).map(|_| random(&[1, 3, n, d], &mut r)).collect();
    let run = |store: &ParamStore, stcb_on: bool, branches: &[Tensor]| {
        with_tape(store, |tape, bp| {
            let bs: Vec<Var> = branches.iter().map(|b| tape.constant(b.clone())).collect();
            let zv = tape.constant(z.clone());
            let out = fuse_and_ffn(tape, &f.lp, bp, [bs[0], bs[1], bs[2], bs[3]], zv, stcb_on, None).unwrap();
            tape.value(out).clone()
        })
    };
    let with = run(&f.store, true, &branches);
    let without = run(&f.store, false, &branches);
    assert_eq!(with.shape(), &[1, 3, n, d]);
    assert!(with.is_finite());
    assert!(with.max_abs_diff(&without) > 1e-6);

    for id in [f.lp.ffn1_w, f.lp.ffn2_w, f.lp.ffn2_b] {
        let shape = f.store.get(id).shape().to_vec();
        set(&mut f.store, id, Tensor::zeros(&shape));
    }
    let zeros = vec![Tensor::zeros(&[1, 3, n, d]); 4];
    let out = run(&f.store, true, &zeros);
    assert_eq!(out.shape(), &[1, 3, n, d]);
    assert!(out.is_finite());

    let bad = with_tape(&f.store, |tape, bp| {
        let zv = tape.constant(z.clone());
        let short = tape.constant(Tensor::zeros(&[1, 2, n, d]));
        fuse_and_ffn(tape, &f.lp, bp, [zv, zv, zv, short], zv, true, None).is_err()
    });
    assert!(bad);
}

fn permute_nodes(z: &Tensor, perm: &[usize]) -> Tensor {
    // out[.., perm[i], :] = z[.., i, :]
    let s = z.shape();
    let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = z.clone();
    for (blk_in, blk_out) in z.data().chunks(n * d).zip(out.data_mut().chunks_mut(n * d)) {
        for i in 0..n {
            blk_out[perm[i] * d..(perm[i] + 1) * d].copy_from_slice(&blk_in[i * d..(i + 1) * d]);
        }
    }
    out
}

fn permute_mask(m: &Tensor, perm: &[usize]) -> Tensor {
    let n = m.shape()[0];
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set2(perm[i], perm[j], m.get2(i, j));
        }
    }
    out
}

#[test]
fn encoder_layer_is_node_permutation_equivariant() {
    let (n, d, t) = (7, 8, 3);
    let mut r = rng(27);
    let f = layer(d, 28);
    let m = masks(n, &mut r);
    let z = random(&[2, t, n, d], &mut r);
    let perm = [3, 6, 0, 5, 1, 4, 2];
    let pm = SpatialMasks {
        local: permute_mask(&m.local, &perm),
        global: permute_mask(&m.global, &perm),
        pivotal: permute_mask(&m.pivotal, &perm),
    };
    let run = |z: &Tensor, m: &SpatialMasks| {
        with_tape(&f.store, |tape, bp| {
            let zv = tape.constant(z.clone());
            let tr = encoder_layer(tape, &f.lp, bp, zv, m, &opts(2), None).unwrap();
            tape.value(tr.out).clone()
        })
    };
    let out = run(&z, &m);
    let out_p = run(&permute_nodes(&z, &perm), &pm);
    assert!(permute_nodes(&out, &perm).max_abs_diff(&out_p) < 1e-10);
}

fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        n_nodes: 6,
        d: 8,
        k: 3,
        t_in: 4,
        t_out: 2,
        steps_per_day: 24,
        layers,
        spatial_heads: 2,
        temporal_heads: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn tiny_input(cfg: &ModelConfig, batch: usize, r: &mut ChaCha8Rng) -> ModelInput {
    let calendar = (0..batch * cfg.t_in)
        .map(|i| CalendarIndex { tod: (3 + i) % cfg.steps_per_day, dow: (i / 5) % 7 })
        .collect();
    ModelInput { x: random(&[batch, cfg.t_in, cfg.n_nodes], r), calendar }
}

#[test]
fn two_layer_forward_equals_chained_layers() {
    let cfg = tiny_config(2);
    let model = Model::new(cfg.clone(), 29).unwrap();
    let mut r = rng(30);
    let m = masks(cfg.n_nodes, &mut r);
    let basis = random(&[cfg.n_nodes, cfg.k], &mut r);
    let input = tiny_input(&cfg, 2, &mut r);
    let full = model.predict(&input, &m, &basis).unwrap();

    let chained = with_tape(&model.params, |tape, bp| {
        let x = tape.constant(input.x.clone());
        let b = tape.constant(basis.clone());
        let z0 = lvst_core::embedding::embed(tape, &model.embedding, bp, &cfg.embed_config(), x, &input.calendar, b).unwrap();
        let o = opts(2);
        let z1 = encoder_layer(tape, &model.layers[0], bp, z0, &m, &o, None).unwrap().out;
        let z2 = encoder_layer(tape, &model.layers[1], bp, z1, &m, &o, None).unwrap().out;
        let y = regression_head(tape, &model.head, bp, z2, cfg.t_out).unwrap();
        tape.value(y).clone()
    });
    assert_eq!(full, chained);
}

#[test]
fn six_layer_model_is_finite_with_expected_shape() {
    let cfg = ModelConfig { layers: 6, ..tiny_config(6) };
    let model = Model::new(cfg.clone(), 31).unwrap();
    let mut r = rng(32);
    let m = masks(cfg.n_nodes, &mut r);
    let basis = random(&[cfg.n_nodes, cfg.k], &mut r);
    let input = tiny_input(&cfg, 3, &mut r);
    let y = model.predict(&input, &m, &basis).unwrap();
    assert_eq!(y.shape(), &[3, cfg.t_out, cfg.n_nodes]);
    assert!(y.is_finite());
    let maps = model.attention_maps(&input, &m, &basis).unwrap();
    assert_eq!(maps.len(), 6);
    for row in maps[0].local.data().chunks(cfg.n_nodes) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn head_fixture(d: usize, t: usize, t_out: usize, seed: u64) -> (ParamStore, HeadParams) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let head = HeadParams {
        w1: store.add_uniform("w1", &[d, d], 0.5, &mut r),
        b1: store.add_zeros("b1", &[d]),
        w2: store.add_uniform("w2", &[t * d, t_out], 0.5, &mut r),
        b2: store.add_zeros("b2", &[t_out]),
    };
    (store, head)
}

#[test]
fn regression_head_zero_input_and_shape() {
    let (d, t, n, t_out) = (4, 3, 5, 2);
    let (store, head) = head_fixture(d, t, t_out, 33);
    with_tape(&store, |tape, bp| {
        let z = tape.constant(Tensor::zeros(&[2, t, n, d]));
        let y = regression_head(tape, &head, bp, z, t_out).unwrap();
        assert_eq!(tape.shape(y), &[2, t_out, n]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!(regression_head(tape, &head, bp, z, t_out + 1).is_err());
    });
}

#[test]
fn regression_head_gradients_match_finite_differences() {
    let (d, t, n, t_out) = (4, 3, 5, 2);
    let (store, head) = head_fixture(d, t, t_out, 34);
    let z = random(&[2, t, n, d], &mut rng(35));
    let target = random(&[2, t_out, n], &mut rng(36));
    let loss = |store: &ParamStore| {
        let mut tape = Tape::new();
        let bp = store.register(&mut tape, true);
        let zv = tape.constant(z.clone());
        let y = regression_head(&mut tape, &head, &bp, zv, t_out).unwrap();
        let l = tape.mse_loss(y, &target).unwrap();
        (tape, bp, l)
    };
    let (tape, bp, l) = loss(&store);
    let grads = tape.backward(l).unwrap();
    for id in [head.w1, head.b1, head.w2, head.b2] {
        let mut probe = store.clone();
        let numeric = lvst_core::numerics::finite_diff_grad(
            |theta| {
                probe.get_mut(id).data_mut().copy_from_slice(theta);
                let (t, _, l) = loss(&probe);
                t.value(l).data()[0]
            },
            store.get(id).data(),
            1e-6,
        );
        let err = lvst_core::numerics::relative_error(grads.get(bp.var(id)).unwrap(), &numeric);
        assert!(err <= 1e-4, "{} rel err {err}", store.name(id));
    }
}

fn gradcheck_setup() -> (Model, ModelInput, Tensor, SpatialMasks, Tensor) {
    let cfg = tiny_config(2);
    let model = Model::new(cfg.clone(), 37).unwrap();
    let mut r = rng(38);
    let m = masks(cfg.n_nodes, &mut r);
    let basis = random(&[cfg.n_nodes, cfg.k], &mut r);
    let input = tiny_input(&cfg, 1, &mut r);
    let target = random(&[1, cfg.t_out, cfg.n_nodes], &mut r);
    (model, input, target, m, basis)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let (model, input, target, m, basis) = gradcheck_setup();
    let report = model_gradcheck(&model, &input, &target, &m, &basis, GRADCHECK_EPS, None).unwrap();
    assert_eq!(report.len(), model.params.len());
    for g in &report {
        assert!(g.max_rel_err <= 1e-4, "{} rel err {}", g.name, g.max_rel_err);
    }
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let (model, input, target, m, basis) = gradcheck_setup();
    let report = model_gradcheck(&model, &input, &target, &m, &basis, GRADCHECK_EPS, Some(OpKind::Gelu)).unwrap();
    let worst = report.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    assert!(worst > 1e-2, "fault went unnoticed: {worst}");
}

#[test]
fn model_config_validation() {
    assert!(tiny_config(2).validate().is_ok());
    let bad = [
        ModelConfig { spatial_heads: 3, ..tiny_config(2) },
        ModelConfig { temporal_heads: 0, ..tiny_config(2) },
        ModelConfig { layers: 0, ..tiny_config(2) },
        ModelConfig { k: 6, ..tiny_config(2) },
        ModelConfig { dropout: 1.0, ..tiny_config(2) },
        ModelConfig { n_nodes: 1, ..tiny_config(2) },
    ];
    for cfg in bad {
        assert!(Model::new(cfg.clone(), 0).is_err(), "{cfg:?}");
    }
}

#[test]
fn from_params_round_trips_and_rejects_mismatch() {
    let cfg = tiny_config(1);
    let model = Model::new(cfg.clone(), 39).unwrap();
    let copy = Model::from_params(cfg.clone(), model.params.clone()).unwrap();
    assert_eq!(copy.params.iter().collect::<Vec<_>>(), model.params.iter().collect::<Vec<_>>());
    assert!(Model::from_params(tiny_config(2), model.params.clone()).is_err());
}

#[test]
fn forward_rejects_mismatched_input() {
    let cfg = tiny_config(1);
    let model = Model::new(cfg.clone(), 40).unwrap();
    let mut r = rng(41);
    let m = masks(cfg.n_nodes, &mut r);
    let basis = random(&[cfg.n_nodes, cfg.k], &mut r);
    let mut input = tiny_input(&cfg, 1, &mut r);
    input.x = random(&[1, cfg.t_in, cfg.n_nodes + 1], &mut r);
    assert!(model.predict(&input, &m, &basis).is_err());
}

