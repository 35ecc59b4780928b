use proptest::prelude::*;

use super::*;
use crate::gradcheck::{check_module, GradCheckOptions};
use crate::testutil::{dense_attention_oracle, max_abs_diff, randn};

#[test]
fn single_window_partition() {
    let f = randn(&[1, 4, 4], 1);
    let w = window_partition(&f, &WindowSpec::plain(4, 1)).unwrap();
    assert_eq!(w.shape(), &[1, 16, 1]);
    assert_eq!(w.data(), f.data());
}

#[test]
fn window_count_is_hw_over_m_squared() {
    let f = randn(&[2, 8, 8], 2);
    let w = window_partition(&f, &WindowSpec::plain(4, 1)).unwrap();
    assert_eq!(w.shape(), &[4, 16, 2]);
    // second window (top-right) starts at column 4
    assert_eq!(w.data()[16 * 2], f.data()[4]);
}

#[test]
fn merge_of_full_image_window_is_identity() {
    let f = randn(&[3, 4, 4], 3);
    let spec = WindowSpec::plain(4, 1);
    let back = window_merge(&window_partition(&f, &spec).unwrap(), &spec, 4, 4).unwrap();
    assert_eq!(back.data(), f.data());
}

#[test]
fn shifted_round_trip_is_bit_identical() {
    let f = randn(&[3, 8, 12], 4);
    for shift in [0, 2] {
        let spec = WindowSpec::new(4, shift, 1).unwrap();
        let w = window_partition(&f, &spec).unwrap();
        assert_eq!(w.shape(), &[6, 16, 3]);
        assert_eq!(window_merge(&w, &spec, 8, 12).unwrap().data(), f.data());
    }
}

#[test]
fn shift_rolls_by_half_window() {
    let f = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let spec = WindowSpec::new(2, 1, 1).unwrap();
    let w = window_partition(&f, &spec).unwrap();
    // first window holds original positions (1,1),(1,2),(2,1),(2,2)
    assert_eq!(&w.data()[..4], &[5.0, 6.0, 9.0, 10.0]);
}

#[test]
fn padding_is_zero_and_cropped_on_merge() {
    let f = randn(&[2, 5, 6], 5);
    let spec = WindowSpec::plain(4, 1);
    let w = window_partition(&f, &spec).unwrap();
    assert_eq!(w.shape(), &[4, 16, 2]);
    // token (3, 0) of window 0 is row 3 (valid); token (0, 0) of window 2 is row 4 (valid);
    // token (1, 0) of window 2 is row 5 (padding)
    assert_eq!(w.data()[(2 * 16 + 4) * 2], 0.0);
    assert_eq!(window_merge(&w, &spec, 5, 6).unwrap().data(), f.data());
}

#[test]
fn merge_rejects_inconsistent_extents() {
    let spec = WindowSpec::plain(4, 1);
    let w = randn(&[3, 16, 2], 6);
    assert!(window_merge(&w, &spec, 8, 8).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(WindowSpec::new(4, 1, 1).is_err());
    assert!(WindowSpec::new(0, 0, 1).is_err());
    assert!(WindowSpec::plain(4, 3).check_channels(8).is_err());
}

fn attention_fixture(
    d: usize,
    heads: usize,
    m: usize,
    seed: u64,
) -> (PositionalEncoding2D, MultiHeadAttention) {
    let mut init = Init::new(seed);
    let pe = PositionalEncoding2D::new("pe", m, d, &mut init).unwrap();
    let mut attn = MultiHeadAttention::new("attn", d, heads, &mut init).unwrap();
    for lin in [
        &mut attn.query,
        &mut attn.key,
        &mut attn.value,
        &mut attn.output,
    ] {
        let n = lin.bias.data().len();
        lin.bias.set_data(init.normal_vec(n)).unwrap();
    }
    (pe, attn)
}

fn z_with_pe(x: &Tensor, pe: &PositionalEncoding2D) -> Vec<f64> {
    x.add(&pe.forward().unwrap()).unwrap().to_vec()
}

#[test]
fn single_token_window_outputs_projected_value() {
    let d = 4;
    let (pe, attn) = attention_fixture(d, 2, 1, 7);
    let x = randn(&[1, d], 8);
    let out = window_mhsa(&x, &pe, &attn, None).unwrap();
    let z = Tensor::new(&[1, d], z_with_pe(&x, &pe)).unwrap();
    let want = attn
        .output
        .forward(&attn.value.forward(&z).unwrap())
        .unwrap();
    assert!(max_abs_diff(out.data(), want.data()) < 1e-12);
}

#[test]
fn identical_keys_give_uniform_weights() {
    let d = 4;
    let (mut pe, attn) = attention_fixture(d, 2, 2, 9);
    pe.zero();
    let row = randn(&[1, 1, d], 10).to_vec();
    let x = Tensor::new(&[1, 4, d], row.repeat(4)).unwrap();
    let (out, weights) = attn.forward_with_weights(&x, &x, None).unwrap();
    assert!(weights.data().iter().all(|w| (w - 0.25).abs() < 1e-15));
    let z = Tensor::new(&[1, d], row).unwrap();
    let want = attn
        .output
        .forward(&attn.value.forward(&z).unwrap())
        .unwrap();
    for tok in out.data().chunks(d) {
        assert!(max_abs_diff(tok, want.data()) < 1e-12);
    }
}

#[test]
fn two_by_two_window_matches_dense_oracle() {
    let d = 6;
    let (pe, attn) = attention_fixture(d, 1, 2, 11);
    let x = randn(&[4, d], 12);
    let out = window_mhsa(&x, &pe, &attn, None).unwrap();
    let z = z_with_pe(&x, &pe);
    let want = dense_attention_oracle(&z, &z, d, &attn, None);
    assert!(max_abs_diff(out.data(), &want) < 1e-12);
}

#[test]
fn full_map_window_equals_global_attention() {
    let (d, hw) = (4, 4);
    let (pe, attn) = attention_fixture(d, 2, hw, 13);
    let f = randn(&[d, hw, hw], 14);
    let spec = WindowSpec::plain(hw, 2);
    let out = window_mhsa(&window_partition(&f, &spec).unwrap(), &pe, &attn, None).unwrap();
    let tokens = crate::nn::chw_to_tokens(&f).unwrap();
    let z = z_with_pe(&tokens, &pe);
    let want = dense_attention_oracle(&z, &z, d, &attn, None);
    assert!(max_abs_diff(out.data(), &want) < 1e-12);
}

#[test]
fn unshifted_mask_is_all_zero() {
    let mask = shifted_window_mask(8, 8, &WindowSpec::plain(4, 1)).unwrap();
    assert_eq!(mask.shape(), &[4, 16, 16]);
    assert!(mask.data().iter().all(|&v| v == 0.0));
}

#[test]
fn region_labels_match_contiguity_oracle() {
    let (h, w) = (8, 8);
    let spec = WindowSpec::new(4, 2, 1).unwrap();
    let regions = shifted_window_regions(h, w, &spec);
    let m = spec.size;
    let nwx = w / m;
    for (win, labels) in regions.iter().enumerate() {
        let (wy, wx) = (win / nwx, win % nwx);
        let coords: Vec<(usize, usize)> = (0..m * m)
            .map(|t| (wy * m + t / m, wx * m + t % m))
            .collect();
        let original = |(y, x): (usize, usize)| ((y + spec.shift) % h, (x + spec.shift) % w);
        for i in 0..m * m {
            for j in 0..m * m {
                let (a, b) = (coords[i], coords[j]);
                let (oa, ob) = (original(a), original(b));
                let contiguous = oa.0 as i64 - ob.0 as i64 == a.0 as i64 - b.0 as i64
                    && oa.1 as i64 - ob.1 as i64 == a.1 as i64 - b.1 as i64;
                assert_eq!(
                    labels[i] == labels[j],
                    contiguous,
                    "window {win} tokens {i},{j}"
                );
            }
        }
    }
    // interior window (0,0) is a single region; the corner window has four
    let distinct = |l: &Vec<usize>| {
        let mut v = l.clone();
        v.sort();
        v.dedup();
        v.len()
    };
    assert_eq!(distinct(&regions[0]), 1);
    assert_eq!(distinct(&regions[3]), 4);
}

#[test]
fn masked_pairs_get_negligible_weight() {
    let (d, m) = (4, 2);
    let (h, w) = (2 * m, 2 * m);
    let spec = WindowSpec::new(m, 1, 2).unwrap();
    let (pe, attn) = attention_fixture(d, 2, m, 15);
    let mask = shifted_window_mask(h, w, &spec).unwrap();
    let windows = partition_tokens(&randn(&[h * w, d], 16), h, w, &spec).unwrap();
    let z = windows.add(&pe.forward().unwrap()).unwrap();
    let (_, weights) = attn.forward_with_weights(&z, &z, Some(&mask)).unwrap();
    let n = m * m;
    let nw = spec.num_windows(h, w);
    let mut masked_seen = 0;
    for win in 0..nw {
        for head in 0..2 {
            for i in 0..n {
                let row = &weights.data()[((win * 2 + head) * n + i) * n..][..n];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..n {
                    if mask.data()[(win * n + i) * n + j] != 0.0 {
                        masked_seen += 1;
                        assert!(row[j] < 1e-30);
                    }
                }
            }
        }
    }
    assert!(masked_seen > 0);
}

#[test]
fn attention_is_permutation_equivariant_without_positions() {
    let d = 4;
    let (mut pe, attn) = attention_fixture(d, 2, 2, 17);
    pe.zero();
    let x = randn(&[4, d], 18);
    let perm = [2usize, 0, 3, 1];
    let idx: Vec<usize> = perm
        .iter()
        .flat_map(|&p| (0..d).map(move |c| p * d + c))
        .collect();
    let xp = x.gather(&[4, d], idx.clone().into()).unwrap();
    let out = window_mhsa(&x, &pe, &attn, None).unwrap();
    let out_p = window_mhsa(&xp, &pe, &attn, None).unwrap();
    let permuted = out.gather(&[4, d], idx.into()).unwrap();
    assert!(max_abs_diff(out_p.data(), permuted.data()) < 1e-12);
}

#[test]
fn mask_shape_mismatch_is_a_contract_error() {
    let (_, attn) = attention_fixture(4, 2, 2, 19);
    let x = randn(&[2, 4, 4], 20);
    let bad = Tensor::zeros(&[2, 4, 3]);
    assert!(matches!(
        attn.forward(&x, &x, Some(&bad)),
        Err(Error::Contract(_))
    ));
}

fn block(d: usize, spec: WindowSpec, seed: u64) -> LocalTransformerBlock {
    LocalTransformerBlock::new(
        "blk",
        d,
        spec,
        BlockOptions::default(),
        &mut Init::new(seed),
    )
    .unwrap()
}

#[test]
fn zeroed_residual_branches_make_block_identity() {
    let mut b = block(8, WindowSpec::new(4, 2, 4).unwrap(), 21);
    b.zero_residual_branches();
    let f = randn(&[8, 8, 12], 22);
    assert_eq!(b.forward(&f).unwrap().data(), f.data());
}

#[test]
fn block_preserves_shape() {
    for shift in [0, 2] {
        let b = block(8, WindowSpec::new(4, shift, 4).unwrap(), 23);
        let out = b.forward(&randn(&[8, 8, 12], 24)).unwrap();
        assert_eq!(out.shape(), &[8, 8, 12]);
        let odd = b.forward(&randn(&[8, 5, 7], 25)).unwrap();
        assert_eq!(odd.shape(), &[8, 5, 7]);
    }
}

#[test]
fn two_block_stack_gradients_match_finite_differences() {
    let d = 4;
    let mut blocks = vec![
        block(d, WindowSpec::alternating(4, 2, 0), 26),
        block(d, WindowSpec::alternating(4, 2, 1), 27),
    ];
    let f = randn(&[d, 8, 8], 28);
    let r = randn(&[d, 8, 8], 29);
    let report = check_module(&mut blocks, &GradCheckOptions::default(), |b| {
        Ok(run_blocks(b, &f)?.mul(&r)?.sum())
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn alternating_specs_shift_odd_blocks() {
    let shifts: Vec<usize> = (0..4)
        .map(|i| WindowSpec::alternating(4, 1, i).shift)
        .collect();
    assert_eq!(shifts, vec![0, 2, 0, 2]);
}

#[test]
fn cost_examples() {
    let run = |mode, hw, d, m| {
        attention_flop_count(AttnCostConfig {
            mode,
            height: hw,
            width: hw,
            d,
            window: m,
        })
        .unwrap()
    };
    let g = run(AttnMode::Global, 8, 4, 4);
    assert_eq!((g.analytic_macs, g.measured_macs), (32768, 32768));
    let w = run(AttnMode::Window, 8, 4, 4);
    assert_eq!((w.analytic_macs, w.measured_macs), (8192, 8192));
    let g2 = run(AttnMode::Global, 16, 4, 4);
    let w2 = run(AttnMode::Window, 16, 4, 4);
    assert_eq!(w2.measured_macs, 4 * w.measured_macs);
    assert_eq!(g2.measured_macs, 16 * g.measured_macs);
    assert_eq!(w.csv_row(), "window,8,8,4,4,8192,8192");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn partition_merge_round_trip(
        d in 1usize..4,
        h in 1usize..13,
        w in 1usize..13,
        m in 1usize..6,
        shifted in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let shift = if shifted { m / 2 } else { 0 };
        let spec = WindowSpec::new(m, shift, 1).unwrap();
        let f = randn(&[d, h, w], seed);
        let back = window_merge(&window_partition(&f, &spec).unwrap(), &spec, h, w).unwrap();
        prop_assert_eq!(back.data(), f.data());
    }
}
