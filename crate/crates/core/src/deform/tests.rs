use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::check_gradients_with_params;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Zero-padded bilinear read of an `[h, w, c]` image, written out longhand.
fn bilerp(img: &[f64], h: usize, w: usize, c: usize, y: f64, x: f64, ch: usize) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                continue;
            }
            acc += wy * wx * img[((yy as usize) * w + xx as usize) * c + ch];
        }
    }
    acc
}

fn randomize(store: &mut ParamStore, std: f64, r: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(shape, std, r);
    }
}

fn forward1(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Tensor {
    let mut g = Graph::inference();
    let v = f(&mut g).unwrap();
    g.value(v).clone()
}

fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(out).to_vec(), 1.0, &mut rng(seed ^ 0x5eed));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

#[test]
fn fixed_offset_lattices() {
    assert_eq!(fixed_offsets(1), vec![(0, 0)]);
    let three = fixed_offsets(3);
    assert_eq!(three.len(), 9);
    assert_eq!(three[0], (-1, -1));
    assert_eq!(three[4], (0, 0));
    assert_eq!(three[8], (1, 1));
    let two = fixed_offsets(2);
    assert_eq!(two.len(), 4);
    assert!(two.iter().all(|&(a, b)| (-1..=1).contains(&a) && (-1..=1).contains(&b)));
}

#[test]
fn clamp_examples() {
    let raw = OffsetField::new(1, 1, 1, vec![10.0, -100.0]).unwrap();
    let c = clamp_offsets(&raw, 16, 32, Some(4)).unwrap();
    assert_eq!(c.data, vec![4.0, -8.0]);
    let zero = OffsetField::new(1, 1, 1, vec![0.0, 0.0]).unwrap();
    assert_eq!(clamp_offsets(&zero, 16, 32, Some(4)).unwrap().data, vec![0.0, 0.0]);
    assert!(clamp_offsets(&raw, 16, 32, Some(0)).is_err());
    assert_eq!(clamp_offsets(&raw, 16, 32, None).unwrap().data, raw.data);
}

proptest! {
    #[test]
    fn clamped_fields_stay_in_bounds(
        h in 1usize..64,
        w in 1usize..64,
        r in prop::sample::select(vec![1u32, 2, 4, 8]),
        vals in prop::collection::vec(-500.0f64..500.0, 2..64),
    ) {
        let n = vals.len() / 2;
        let raw = OffsetField::new(1, n, 1, vals[..2 * n].to_vec()).unwrap();
        let c = clamp_offsets(&raw, h, w, Some(r)).unwrap();
        prop_assert!(c.within_bounds());
        for p in c.data.chunks_exact(2) {
            prop_assert!(p[0].abs() <= h as f64 / r as f64);
            prop_assert!(p[1].abs() <= w as f64 / r as f64);
        }
    }
}

#[test]
fn dpe_output_shape() {
    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, "pe", PatchEmbedConfig::new(4, 4, 3, 16), &mut rng(0)).unwrap();
    let x = Tensor::randn([1, 64, 64, 3], 1.0, &mut rng(1));
    let y = forward1(|g| {
        let x = g.constant(x);
        pe.forward(g, &store, x)
    });
    assert_eq!(y.shape(), &[1, 16, 16, 16]);
}

#[test]
fn dpe_rejects_indivisible_input() {
    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, "pe", PatchEmbedConfig::new(3, 2, 2, 4), &mut rng(0)).unwrap();
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros([1, 5, 6, 2]));
    assert!(pe.forward(&mut g, &store, x).is_err());
}

fn standard_equivalent(pe: &PatchEmbed) -> PatchEmbed {
    PatchEmbed {
        offset: None,
        cfg: PatchEmbedConfig {
            deformable: false,
            ..pe.cfg
        },
        proj: pe.proj.clone(),
    }
}

#[test]
fn zeroed_dpe_equals_standard_embedding() {
    for (seed, (s, stride)) in [(3, 1), (3, 2), (4, 4), (7, 4)].into_iter().enumerate() {
        let mut r = rng(seed as u64);
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut store, "pe", PatchEmbedConfig::new(s, stride, 3, 5), &mut r).unwrap();
        let std_pe = standard_equivalent(&pe);
        let x = Tensor::randn([2, 8, 8, 3], 1.0, &mut r);
        let a = forward1(|g| {
            let x = g.constant(x.clone());
            pe.forward(g, &store, x)
        });
        let b = forward1(|g| {
            let x = g.constant(x.clone());
            std_pe.forward(g, &store, x)
        });
        assert!(a.max_abs_diff(&b) < 1e-12, "s={s} stride={stride}");
    }
}

/// Explicit DPE: loop-level offset convolution, clamp, tap gather, projection.
fn dpe_oracle(pe: &PatchEmbed, store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let c = pe.cfg;
    let (n, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo, s) = (c.out_extent(h), c.out_extent(w), c.patch_size);
    let pred = pe.offset.as_ref().unwrap();
    let (ow, ob) = (store.get(pred.proj.weight).data(), store.get(pred.proj.bias).data());
    let (pw, pb) = (store.get(pe.proj.weight).data(), store.get(pe.proj.bias).data());
    let n_off = 2 * s * s;
    let (bh, bw) = (h as f64 / 4.0, w as f64 / 4.0);
    let mut out = Vec::new();
    for b in 0..n {
        let img = &x.data()[b * h * w * cin..(b + 1) * h * w * cin];
        let pix = |y: isize, xx: isize, ch: usize| -> f64 {
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                img[(y as usize * w + xx as usize) * cin + ch]
            }
        };
        for oy in 0..ho {
            for ox in 0..wo {
                let top = (oy * c.stride) as isize - c.pad as isize;
                let left = (ox * c.stride) as isize - c.pad as isize;
                let mut off = ob.to_vec();
                for ky in 0..s {
                    for kx in 0..s {
                        for ch in 0..cin {
                            let v = pix(top + ky as isize, left + kx as isize, ch);
                            let row = (ky * s + kx) * cin + ch;
                            for (o, slot) in off.iter_mut().enumerate() {
                                *slot += v * ow[row * n_off + o];
                            }
                        }
                    }
                }
                let mut taps = Vec::with_capacity(s * s * cin);
                for k in 0..s * s {
                    let dy = off[2 * k].clamp(-bh, bh);
                    let dx = off[2 * k + 1].clamp(-bw, bw);
                    let y = (top + (k / s) as isize) as f64 + dy;
                    let xx = (left + (k % s) as isize) as f64 + dx;
                    for ch in 0..cin {
                        taps.push(bilerp(img, h, w, cin, y, xx, ch));
                    }
                }
                for o in 0..c.out_channels {
                    let mut acc = pb[o];
                    for (i, t) in taps.iter().enumerate() {
                        acc += t * pw[i * c.out_channels + o];
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn dpe_matches_gather_oracle() {
    for seed in 0..4 {
        let mut r = rng(100 + seed);
        let mut store = ParamStore::new();
        let cfg = PatchEmbedConfig::new(3, 2, 2, 4);
        let pe = PatchEmbed::new(&mut store, "pe", cfg, &mut r).unwrap();
        randomize(&mut store, 0.8, &mut r);
        let x = Tensor::randn([2, 6, 8, 2], 1.0, &mut r);
        let got = forward1(|g| {
            let x = g.constant(x.clone());
            pe.forward(g, &store, x)
        });
        let want = dpe_oracle(&pe, &store, &x);
        let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn coarse_dpe_shares_one_offset_per_location() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let cfg = PatchEmbedConfig {
        granularity: OffsetGranularity::PerLocation,
        ..PatchEmbedConfig::new(3, 1, 2, 3)
    };
    let pe = PatchEmbed::new(&mut store, "pe", cfg, &mut r).unwrap();
    randomize(&mut store, 0.5, &mut r);
    let x = Tensor::randn([1, 4, 4, 2], 1.0, &mut r);
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let (_, off) = pe.forward_with_offsets(&mut g, &store, xv).unwrap();
    assert_eq!(g.shape(off.unwrap()), &[1, 4, 4, 1, 2]);
}

#[test]
fn dpe_offsets_respect_bounds() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, "pe", PatchEmbedConfig::new(3, 1, 2, 3), &mut r).unwrap();
    randomize(&mut store, 50.0, &mut r);
    let x = Tensor::randn([1, 8, 12, 2], 1.0, &mut r);
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let (_, off) = pe.forward_with_offsets(&mut g, &store, xv).unwrap();
    let field = offsets_of(g.value(off.unwrap()), 0, (2.0, 3.0)).unwrap();
    assert!(field.within_bounds());
    assert!(field.data.iter().any(|v| v.abs() == 2.0 || v.abs() == 3.0));
}

fn dmlp_oracle(x: &Tensor, offsets: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = bias.len();
    let mut out = Vec::new();
    for b in 0..n {
        let img = &x.data()[b * h * w * c..(b + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let gathered: Vec<f64> = (0..c)
                    .map(|ch| {
                        let i = ((((b * h + y) * w + xx) * c) + ch) * 2;
                        bilerp(img, h, w, c, y as f64 + offsets[i], xx as f64 + offsets[i + 1], ch)
                    })
                    .collect();
                for o in 0..cout {
                    let mut acc = bias[o];
                    for (ch, v) in gathered.iter().enumerate() {
                        acc += v * wt[ch * cout + o];
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn dmlp_zero_offsets_is_channel_mlp() {
    let mut r = rng(21);
    let mut store = ParamStore::new();
    let dm = Dmlp::new(&mut store, "dm", 3, Some(4), &mut r).unwrap();
    let x = Tensor::randn([1, 4, 5, 3], 1.0, &mut r);
    let a = forward1(|g| {
        let x = g.constant(x.clone());
        dm.forward(g, &store, x)
    });
    let b = forward1(|g| {
        let x = g.constant(x.clone());
        dm.fc.forward(g, &store, x)
    });
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn dmlp_unit_shift_moves_columns_left() {
    let mut store = ParamStore::new();
    let eye = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let fc = Linear::with_init(&mut store, "fc", eye, Tensor::zeros([1]));
    let x = Tensor::new(vec![1, 2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut off = vec![0.0; 2 * 3 * 2];
    for p in off.chunks_exact_mut(2) {
        p[1] = 1.0;
    }
    let y = forward1(|g| {
        let xv = g.constant(x);
        let o = g.constant(Tensor::new(vec![1, 2, 3, 1, 2], off).unwrap());
        dmlp_mix(g, &store, xv, o, &fc)
    });
    assert_eq!(y.data(), &[2.0, 3.0, 0.0, 5.0, 6.0, 0.0]);
}

#[test]
fn dmlp_integer_offsets_are_a_permutation_gather() {
    let mut r = rng(22);
    let (h, w, c) = (4, 5, 3);
    let mut store = ParamStore::new();
    let fc = Linear::new(&mut store, "fc", c, 2, &mut r);
    let x = Tensor::randn([1, h, w, c], 1.0, &mut r);
    let shifts: Vec<(i64, i64)> = (0..h * w * c).map(|_| (r.gen_range(-2..=2), r.gen_range(-2..=2))).collect();
    let off: Vec<f64> = shifts.iter().flat_map(|&(a, b)| [a as f64, b as f64]).collect();
    let y = forward1(|g| {
        let xv = g.constant(x.clone());
        let o = g.constant(Tensor::new(vec![1, h, w, c, 2], off.clone()).unwrap());
        dmlp_mix(g, &store, xv, o, &fc)
    });
    let mut gathered = vec![0.0; h * w * c];
    for yy in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let (dy, dx) = shifts[(yy * w + xx) * c + ch];
                let (sy, sx) = (yy as i64 + dy, xx as i64 + dx);
                if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 {
                    gathered[(yy * w + xx) * c + ch] = x.data()[((sy as usize) * w + sx as usize) * c + ch];
                }
            }
        }
    }
    let want = forward1(|g| {
        let gv = g.constant(Tensor::new(vec![1, h, w, c], gathered).unwrap());
        fc.forward(g, &store, gv)
    });
    assert_eq!(y.data(), want.data());
}

#[test]
fn dmlp_matches_gather_oracle() {
    for seed in 0..4 {
        let mut r = rng(200 + seed);
        let mut store = ParamStore::new();
        let dm = Dmlp::new(&mut store, "dm", 3, Some(2), &mut r).unwrap();
        randomize(&mut store, 0.7, &mut r);
        let x = Tensor::randn([1, 4, 4, 3], 1.0, &mut r);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let (y, off) = dm.forward_with_offsets(&mut g, &store, xv).unwrap();
        // oracle recomputes the offsets with its own loops
        let (ow, ob) = (store.get(dm.offset.weight).data(), store.get(dm.offset.bias).data());
        let mut offsets = Vec::new();
        for px in x.data().chunks_exact(3) {
            for o in 0..6 {
                let v: f64 = ob[o] + (0..3).map(|i| px[i] * ow[i * 6 + o]).sum::<f64>();
                offsets.push(v.clamp(-2.0, 2.0));
            }
        }
        let off_err = g.value(off).data().iter().zip(&offsets).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(off_err < 1e-12);
        let want = dmlp_oracle(&x, &offsets, store.get(dm.fc.weight).data(), store.get(dm.fc.bias).data());
        let err = g.value(y).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn pool_mixer_examples() {
    let c = forward1(|g| {
        let x = g.constant(Tensor::full([1, 4, 4, 1], 2.0));
        pool_mixer_px(g, x)
    });
    assert!((c.at(&[0, 1, 1, 0]) - 2.0).abs() < 1e-15);
    assert!((c.at(&[0, 0, 0, 0]) - 2.0 * 4.0 / 9.0).abs() < 1e-15);
    assert!((c.at(&[0, 0, 1, 0]) - 2.0 * 6.0 / 9.0).abs() < 1e-15);

    let mut imp = Tensor::zeros([1, 5, 5, 1]);
    imp.data_mut()[2 * 5 + 2] = 1.0;
    let y = forward1(|g| {
        let x = g.constant(imp);
        pool_mixer_px(g, x)
    });
    for yy in 0..5 {
        for xx in 0..5 {
            let want = if (1..=3).contains(&yy) && (1..=3).contains(&xx) { 1.0 / 9.0 } else { 0.0 };
            assert_eq!(y.at(&[0, yy, xx, 0]), want);
        }
    }
}

#[test]
fn pool_mixer_matches_loops_exactly() {
    let x = Tensor::randn([1, 5, 5, 2], 1.0, &mut rng(31));
    let y = forward1(|g| {
        let xv = g.constant(x.clone());
        pool_mixer_px(g, xv)
    });
    let inv = 1.0 / 9.0;
    for yy in 0..5i64 {
        for xx in 0..5i64 {
            for ch in 0..2 {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (sy, sx) = (yy + dy, xx + dx);
                        if (0..5).contains(&sy) && (0..5).contains(&sx) {
                            acc += inv * x.at(&[0, sy as usize, sx as usize, ch]);
                        }
                    }
                }
                assert_eq!(y.at(&[0, yy as usize, xx as usize, ch]), acc);
            }
        }
    }
}

#[test]
fn saturated_channel_gate_is_identity() {
    let mut r = rng(41);
    let mut store = ParamStore::new();
    let cx = ChannelMixer::new(&mut store, "cx", 8, &mut r);
    *store.get_mut(cx.excite.weight) = Tensor::zeros([2, 8]);
    *store.get_mut(cx.excite.bias) = Tensor::full([8], 40.0);
    let x = Tensor::randn([2, 3, 3, 8], 1.0, &mut r);
    let y = forward1(|g| {
        let xv = g.constant(x.clone());
        cx.forward(g, &store, xv)
    });
    assert_eq!(y.data(), x.data());
}

#[test]
fn channel_gate_never_amplifies() {
    let mut r = rng(42);
    let mut store = ParamStore::new();
    let cx = ChannelMixer::new(&mut store, "cx", 8, &mut r);
    randomize(&mut store, 3.0, &mut r);
    let x = Tensor::randn([1, 4, 4, 8], 2.0, &mut r);
    let y = forward1(|g| {
        let xv = g.constant(x.clone());
        cx.forward(g, &store, xv)
    });
    assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
}

#[test]
fn channel_mixer_matches_oracle() {
    let mut r = rng(43);
    let mut store = ParamStore::new();
    let c = 8;
    let cx = ChannelMixer::new(&mut store, "cx", c, &mut r);
    randomize(&mut store, 0.9, &mut r);
    let (h, w) = (3, 4);
    let x = Tensor::randn([1, h, w, c], 1.0, &mut r);
    let y = forward1(|g| {
        let xv = g.constant(x.clone());
        cx.forward(g, &store, xv)
    });
    let mean: Vec<f64> = (0..c)
        .map(|ch| x.data().chunks_exact(c).map(|p| p[ch]).sum::<f64>() / (h * w) as f64)
        .collect();
    let (w1, b1) = (store.get(cx.squeeze.weight).data(), store.get(cx.squeeze.bias).data());
    let (w2, b2) = (store.get(cx.excite.weight).data(), store.get(cx.excite.bias).data());
    let hidden: Vec<f64> = (0..2)
        .map(|j| (b1[j] + (0..c).map(|i| mean[i] * w1[i * 2 + j]).sum::<f64>()).max(0.0))
        .collect();
    let gate: Vec<f64> = (0..c)
        .map(|o| 1.0 / (1.0 + (-(b2[o] + (0..2).map(|j| hidden[j] * w2[j * c + o]).sum::<f64>())).exp()))
        .collect();
    for (i, v) in y.data().iter().enumerate() {
        assert!((v - x.data()[i] * gate[i % c]).abs() < 1e-6);
    }
}

#[test]
fn composite_operator_gradients() {
    for seed in 0..3u64 {
        let mut r = rng(300 + seed);
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut store, "pe", PatchEmbedConfig::new(3, 2, 2, 3), &mut r).unwrap();
        let dm = Dmlp::new(&mut store, "dm", 3, Some(2), &mut r).unwrap();
        let cx = ChannelMixer::new(&mut store, "cx", 3, &mut r);
        randomize(&mut store, 0.5, &mut r);
        let x = Tensor::randn([1, 4, 6, 2], 1.0, &mut r);
        let report = check_gradients_with_params(&[x], &store, 1e-5, None, |g, st, v| {
            let t = pe.forward(g, st, v[0])?;
            let m = dm.forward(g, st, t)?;
            let p = pool_mixer_px(g, m)?;
            let c = cx.forward(g, st, p)?;
            project(g, c, seed)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}

#[test]
fn offset_csv_rows_scale_to_image_pixels() {
    let cfg = PatchEmbedConfig::new(1, 1, 1, 1);
    let field = OffsetField::new(1, 2, 1, vec![0.5, -0.25, 1.0, 0.0]).unwrap();
    let mut out = String::new();
    write_offset_csv(&mut out, 3, &field, &cfg, 8);
    assert_eq!(out, "3,0,0,4,-2\n3,0,8,8,0\n");
}
