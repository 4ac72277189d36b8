//! 3D dynamic bit assignment: a learned importance map decides how many code
//! channels each spatio-temporal site transmits.
//!
//! The map lives at code resolution with values in (0,1). Quantized to L
//! integer levels (floor(L*b)), it drives a channel mask that zeros the tail
//! channels per site; the mask's straight-through backward routes gradients
//! back into the map. Serialization crops the masked bits and sends the
//! quantized map as a base-2 prefix so the decoder can reshape the stream.

use rand_chacha::ChaCha8Rng;

use crate::bitstream::{ceil_log2, BitBuf, BitReader};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Shape5, Tensor5};

/// Sigmoid outputs are clamped this far inside (0, 1).
pub const MAP_EPS: f64 = 1e-6;

/// Learned per-site bit budget controller, shaped (1, 1, T/8, H/8, W/8).
pub struct ImportanceMap<S: Scalar> {
    pub values: Tensor5<S>,
    pub levels: usize,
    pub c_bnd: usize,
}

impl<S: Scalar> ImportanceMap<S> {
    pub fn new(values: Tensor5<S>, levels: usize, c_bnd: usize) -> Result<Self> {
        if levels == 0 || levels > c_bnd || c_bnd % levels != 0 {
            return Err(Error::Config(format!(
                "importance map needs 1 <= L <= C_bnd with C_bnd divisible by L, got L={levels} C_bnd={c_bnd}"
            )));
        }
        let s = values.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::shape("importance map", s, "(1,1,t,h,w)"));
        }
        Ok(ImportanceMap {
            values,
            levels,
            c_bnd,
        })
    }

    pub fn sites(&self) -> usize {
        self.values.numel()
    }

    /// Bits per site spent on the transmitted quantized map.
    pub fn prefix_bits_per_site(&self) -> usize {
        ceil_log2(self.levels)
    }
}

/// Registers the importance subnetwork parameters: two 3x3x3 conv layers and
/// a 1x1x1 head producing the single-channel map.
pub fn init_importance_params<S: Scalar>(
    params: &mut ParamSet<S>,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    params.init_conv("imp.c0", width, width, (3, 3, 3), rng)?;
    params.init_conv("imp.c1", width, width, (3, 3, 3), rng)?;
    params.init_conv("imp.head", 1, width, (1, 1, 1), rng)
}

/// Maps penultimate encoder features to the importance map (sigmoid output,
/// clamped inside (0,1)); participates in autodiff.
pub fn importance_forward<S: Scalar>(
    penultimate: &Tensor5<S>,
    params: &ParamSet<S>,
    levels: usize,
    c_bnd: usize,
) -> Result<ImportanceMap<S>> {
    let a = penultimate
        .conv3d(
            params.get("imp.c0.w")?,
            Some(params.get("imp.c0.b")?),
            (1, 1, 1),
            (1, 1, 1),
            (1, 1, 1),
        )?
        .leaky_relu(0.2);
    let a = a
        .conv3d(
            params.get("imp.c1.w")?,
            Some(params.get("imp.c1.b")?),
            (1, 1, 1),
            (1, 1, 1),
            (1, 1, 1),
        )?
        .leaky_relu(0.2);
    let head = a.conv3d(
        params.get("imp.head.w")?,
        Some(params.get("imp.head.b")?),
        (1, 1, 1),
        (1, 1, 1),
        (0, 0, 0),
    )?;
    ImportanceMap::new(head.sigmoid_clamped(MAP_EPS), levels, c_bnd)
}

/// Eq-style quantizer: floor(L * b) per site, in {0, ..., L-1}.
pub fn quantize_importance<S: Scalar>(map: &ImportanceMap<S>) -> Vec<u8> {
    map.values
        .values()
        .iter()
        .map(|b| {
            let q = (map.levels as f64 * b.to_f64_()).floor() as i64;
            q.clamp(0, map.levels as i64 - 1) as u8
        })
        .collect()
}

/// Straight-through derivative of the mask w.r.t. the map value: L inside the
/// band L*b - 1 <= ceil(c*L/C_bnd) <= L*b + 2 (1-based channel c), else 0.
pub fn mask_derivative(c_1based: usize, b: f64, c_bnd: usize, levels: usize) -> f64 {
    let r = (c_1based * levels).div_ceil(c_bnd) as f64;
    let lb = levels as f64 * b;
    if lb - 1.0 <= r && r <= lb + 2.0 {
        levels as f64
    } else {
        0.0
    }
}

/// Channel mask from the quantized map: channel c (1-based) survives at a
/// site iff c <= (C_bnd/L) * Q. Backward applies [`mask_derivative`] and sums
/// over channels into the map's gradient.
pub fn build_mask<S: Scalar>(map: &ImportanceMap<S>) -> Tensor5<S> {
    let q = quantize_importance(map);
    let map_shape = map.values.shape();
    let sites = map_shape.numel();
    let group = map.c_bnd / map.levels;
    let c_bnd = map.c_bnd;
    let levels = map.levels;
    let out_shape = Shape5::new(1, c_bnd, map_shape.t, map_shape.h, map_shape.w);

    let mut values = vec![S::zero(); out_shape.numel()];
    for c in 0..c_bnd {
        for (site, &qv) in q.iter().enumerate() {
            if c + 1 <= group * qv as usize {
                values[c * sites + site] = S::one();
            }
        }
    }
    Tensor5::from_op(
        out_shape,
        values,
        vec![map.values.clone()],
        Box::new(move |go, _out, parents| {
            let bvals = parents[0].value_vec();
            let mut gmap = vec![S::zero(); sites];
            for (site, gm) in gmap.iter_mut().enumerate() {
                let b = bvals[site].to_f64_();
                let mut acc = 0.0;
                for c in 1..=c_bnd {
                    let d = mask_derivative(c, b, c_bnd, levels);
                    if d != 0.0 {
                        acc += go[(c - 1) * sites + site].to_f64_() * d;
                    }
                }
                *gm = S::from_f64_(acc);
            }
            parents[0].accum_grad(gmap);
        }),
    )
}

/// Eq-style rate loss: plain sum of the map values.
pub fn rate_loss<S: Scalar>(map: &ImportanceMap<S>) -> Tensor5<S> {
    map.values.sum_all()
}

/// Crops the masked code for transmission. Per site in (t, h, w) raster
/// order, the payload carries the first (C_bnd/L)*Q channel bits with the
/// mapping -1 -> 0, +1 -> 1; the prefix carries each Q as ceil(log2 L) bits,
/// most significant first.
pub fn pack_code<S: Scalar>(
    code: &Tensor5<S>,
    q: &[u8],
    c_bnd: usize,
    levels: usize,
) -> Result<(BitBuf, BitBuf)> {
    let shape = code.shape();
    let sites = shape.t * shape.h * shape.w;
    if shape.c != c_bnd || shape.n != 1 || q.len() != sites {
        return Err(Error::shape(
            "pack_code",
            shape,
            format!("(1,{},...) with {} sites", c_bnd, q.len()),
        ));
    }
    let group = c_bnd / levels;
    let qbits = ceil_log2(levels);
    let mut prefix = BitBuf::new();
    let mut payload = BitBuf::new();
    let vals = code.values();
    for (site, &qv) in q.iter().enumerate() {
        prefix.push_bits(qv as u64, qbits);
        let kept = group * qv as usize;
        for c in 0..kept {
            let v = vals[c * sites + site];
            payload.push_bit(v > S::zero());
        }
    }
    Ok((prefix, payload))
}

/// Packs the full code without masking (the no-DBA path): C_bnd bits per
/// site, no prefix.
pub fn pack_full_code<S: Scalar>(code: &Tensor5<S>) -> BitBuf {
    let shape = code.shape();
    let sites = shape.t * shape.h * shape.w;
    let mut payload = BitBuf::new();
    let vals = code.values();
    for site in 0..sites {
        for c in 0..shape.c {
            payload.push_bit(vals[c * sites + site] > S::zero());
        }
    }
    payload
}

/// Reconstructs the ternary code: kept channels in {-1, +1}, masked channels
/// zero-padded back to C_bnd.
pub fn unpack_code<S: Scalar>(
    prefix: &BitBuf,
    payload: &BitBuf,
    dims: (usize, usize, usize),
    c_bnd: usize,
    levels: usize,
) -> Result<Tensor5<S>> {
    let (t, h, w) = dims;
    let sites = t * h * w;
    let group = c_bnd / levels;
    let qbits = ceil_log2(levels);
    if prefix.len_bits() != sites * qbits {
        return Err(Error::truncated(
            "importance prefix",
            sites * qbits,
            prefix.len_bits(),
        ));
    }
    let shape = Shape5::new(1, c_bnd, t, h, w);
    let mut values = vec![S::zero(); shape.numel()];
    let mut pr = BitReader::new(prefix);
    let mut pl = BitReader::new(payload);
    for site in 0..sites {
        let qv = pr.read_bits(qbits)? as usize;
        if qv >= levels {
            return Err(Error::Format(format!(
                "importance prefix declares level {qv} >= L = {levels}"
            )));
        }
        let kept = group * qv;
        for c in 0..kept {
            let bit = pl.read_bit().map_err(|_| {
                Error::truncated("masked code payload", (site + 1) * kept, payload.len_bits())
            })?;
            values[c * sites + site] = if bit { S::one() } else { -S::one() };
        }
    }
    if pl.remaining() != 0 {
        return Err(Error::truncated(
            "masked code payload tail",
            payload.len_bits() - pl.remaining(),
            payload.len_bits(),
        ));
    }
    Ok(Tensor5::constant(shape, values))
}

/// Inverse of [`pack_full_code`].
pub fn unpack_full_code<S: Scalar>(
    payload: &BitBuf,
    dims: (usize, usize, usize),
    c_bnd: usize,
) -> Result<Tensor5<S>> {
    let (t, h, w) = dims;
    let sites = t * h * w;
    if payload.len_bits() != sites * c_bnd {
        return Err(Error::truncated(
            "full code payload",
            sites * c_bnd,
            payload.len_bits(),
        ));
    }
    let shape = Shape5::new(1, c_bnd, t, h, w);
    let mut values = vec![S::zero(); shape.numel()];
    let mut pl = BitReader::new(payload);
    for site in 0..sites {
        for c in 0..c_bnd {
            values[c * sites + site] = if pl.read_bit()? { S::one() } else { -S::one() };
        }
    }
    Ok(Tensor5::constant(shape, values))
}

/// Exact transmitted-bit law: sum over sites of prefix and kept-payload bits.
pub fn transmitted_bits(q: &[u8], c_bnd: usize, levels: usize) -> usize {
    let group = c_bnd / levels;
    q.iter()
        .map(|&qv| ceil_log2(levels) + group * qv as usize)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_from(
        values: Vec<f64>,
        t: usize,
        h: usize,
        w: usize,
        levels: usize,
        c_bnd: usize,
    ) -> ImportanceMap<f64> {
        ImportanceMap::new(
            Tensor5::param(Shape5::new(1, 1, t, h, w), values),
            levels,
            c_bnd,
        )
        .unwrap()
    }

    #[test]
    fn quantizer_matches_floor_examples() {
        let m = map_from(vec![0.5], 1, 1, 1, 8, 8);
        assert_eq!(quantize_importance(&m), vec![4]);
        let m = map_from(vec![0.999999], 1, 1, 1, 4, 8);
        assert_eq!(quantize_importance(&m), vec![3]);
        let m = map_from(vec![0.49], 1, 1, 1, 2, 8);
        assert_eq!(quantize_importance(&m), vec![0]);
    }

    #[test]
    fn mask_follows_bit_group_rule() {
        // C_bnd=8, L=4, b=0.6 -> Q=2 -> 4 kept channels
        let m = map_from(vec![0.6], 1, 1, 1, 4, 8);
        let mask = build_mask(&m);
        let v = mask.value_vec();
        assert_eq!(v, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_derivative_matches_band_examples() {
        // c=5, b=0.6, C_bnd=8, L=4: ceil(20/8)=3 in [1.4, 4.4] -> 4
        assert_eq!(mask_derivative(5, 0.6, 8, 4), 4.0);
        // c=8, b=0.6: ceil(32/8)=4 in [1.4, 4.4] -> 4
        assert_eq!(mask_derivative(8, 0.6, 8, 4), 4.0);
        // c=8, b=0.2: 4 outside [-0.2, 2.8] -> 0
        assert_eq!(mask_derivative(8, 0.2, 8, 4), 0.0);
    }

    #[test]
    fn mask_backward_sums_derivative_over_channels() {
        let m = map_from(vec![0.6, 0.2], 1, 1, 2, 4, 8);
        let mask = build_mask(&m);
        let loss = mask.sum_all();
        loss.backward().unwrap();
        let g = m.values.grad_vec().unwrap();
        for (site, &b) in [0.6, 0.2].iter().enumerate() {
            let expect: f64 = (1..=8).map(|c| mask_derivative(c, b, 8, 4)).sum();
            assert_eq!(g[site], expect, "site {site}");
        }
    }

    #[test]
    fn mask_ones_count_is_monotone_in_b() {
        let bs: Vec<f64> = (1..99).map(|i| i as f64 / 100.0).collect();
        let m = map_from(bs.clone(), 1, 1, bs.len(), 4, 8);
        let mask = build_mask(&m);
        let v = mask.value_vec();
        let sites = bs.len();
        let ones = |site: usize| (0..8).filter(|c| v[c * sites + site] == 1.0).count();
        for i in 1..sites {
            assert!(ones(i) >= ones(i - 1), "b {} -> {}", bs[i - 1], bs[i]);
        }
    }

    #[test]
    fn rate_loss_is_plain_sum() {
        let m = map_from(vec![0.5; 192], 1, 1, 192, 8, 8);
        assert_eq!(rate_loss(&m).item(), 96.0);
    }

    #[test]
    fn pack_single_site_example() {
        // C_bnd=8, L=8, Q=3, code channels alternating +1/-1
        let code = Tensor5::<f64>::constant(
            Shape5::new(1, 8, 1, 1, 1),
            vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
        );
        let (prefix, payload) = pack_code(&code, &[3], 8, 8).unwrap();
        assert_eq!(prefix.len_bits(), 3);
        assert_eq!(prefix.bytes()[0] >> 5, 0b011);
        assert_eq!(payload.len_bits(), 3);
        assert_eq!(payload.bytes()[0] >> 5, 0b101);
    }

    #[test]
    fn q_zero_everywhere_keeps_only_prefix() {
        let code = Tensor5::<f64>::constant(Shape5::new(1, 8, 1, 2, 2), vec![1.0; 32]);
        let (prefix, payload) = pack_code(&code, &[0; 4], 8, 8).unwrap();
        assert_eq!(prefix.len_bits(), 4 * 3);
        assert_eq!(payload.len_bits(), 0);
    }

    #[test]
    fn all_zero_payload_bits_decode_to_minus_one() {
        let mut prefix = BitBuf::new();
        // one site, L=8 -> Q=7 in 3 bits
        prefix.push_bits(7, 3);
        let mut payload = BitBuf::new();
        payload.push_bits(0, 7);
        let code: Tensor5<f64> = unpack_code(&prefix, &payload, (1, 1, 1), 8, 8).unwrap();
        let v = code.value_vec();
        assert_eq!(&v[..7], &[-1.0; 7]);
        assert_eq!(v[7], 0.0);
    }

    #[test]
    fn prefix_declaring_more_payload_than_present_is_truncation() {
        let mut prefix = BitBuf::new();
        prefix.push_bits(7, 3);
        let payload = BitBuf::new(); // empty, but prefix wants 7 bits
        assert!(matches!(
            unpack_code::<f64>(&prefix, &payload, (1, 1, 1), 8, 8),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn importance_forward_zero_weights_gives_half() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_importance_params(&mut params, 4, &mut rng).unwrap();
        // zero all weights and biases
        for (_, t) in params.iter() {
            t.set_values(vec![0.0; t.numel()]);
        }
        let feats = Tensor5::constant(Shape5::new(1, 4, 2, 4, 4), vec![0.3; 128]);
        let map = importance_forward(&feats, &params, 8, 8).unwrap();
        assert_eq!(map.values.shape(), Shape5::new(1, 1, 2, 4, 4));
        assert!(map.values.values().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn importance_forward_stays_in_open_interval() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_importance_params(&mut params, 4, &mut rng).unwrap();
        let feats = Tensor5::constant(
            Shape5::new(1, 4, 2, 4, 4),
            (0..128).map(|i| ((i * 23 % 41) as f64) / 10.0 - 2.0).collect(),
        );
        let map = importance_forward(&feats, &params, 8, 8).unwrap();
        assert!(map.values.values().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn rate_gradient_reaches_importance_parameters() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_importance_params(&mut params, 4, &mut rng).unwrap();
        let feats = Tensor5::constant(
            Shape5::new(1, 4, 1, 2, 2),
            (0..16).map(|i| (i as f64) / 8.0 - 1.0).collect(),
        );
        let map = importance_forward(&feats, &params, 4, 8).unwrap();
        let loss = rate_loss(&map).scale(1e-4);
        loss.backward().unwrap();
        let g = params.get("imp.head.w").unwrap().grad_vec().unwrap();
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn masked_code_gradient_reaches_map() {
        let m = map_from(vec![0.6, 0.4, 0.9, 0.1], 1, 2, 2, 4, 8);
        let mask = build_mask(&m);
        let code = Tensor5::constant(Shape5::new(1, 8, 1, 2, 2), vec![1.0; 32]);
        let loss = mask.mul(&code).unwrap().sum_all();
        loss.backward().unwrap();
        let g = m.values.grad_vec().unwrap();
        assert!(g.iter().any(|v| *v != 0.0));
    }

    mod props {
        use super::{
            pack_code, pack_full_code, quantize_importance, transmitted_bits, unpack_code,
            unpack_full_code, ImportanceMap,
        };
        use crate::dba::build_mask;
        use crate::tensor::{Shape5, Tensor5};
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #[test]
            fn pack_unpack_roundtrips_masked_code(
                seed in 0u64..1000,
                levels_pow in 0usize..4,
                t in 1usize..3, h in 1usize..4, w in 1usize..4,
            ) {
                let levels = 1usize << levels_pow; // 1, 2, 4, 8
                let c_bnd = 8usize;
                let sites = t * h * w;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bvals: Vec<f64> = (0..sites).map(|_| rng.gen_range(0.01..0.99)).collect();
                let code_vals: Vec<f64> = (0..c_bnd * sites)
                    .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                let map = ImportanceMap::new(
                    Tensor5::constant(Shape5::new(1, 1, t, h, w), bvals),
                    levels,
                    c_bnd,
                ).unwrap();
                let q = quantize_importance(&map);
                let mask = build_mask(&map);
                let code = Tensor5::constant(Shape5::new(1, c_bnd, t, h, w), code_vals);
                let masked = code.mul(&mask).unwrap();

                let (prefix, payload) = pack_code(&code, &q, c_bnd, levels).unwrap();
                // transmitted-bit law
                prop_assert_eq!(
                    prefix.len_bits() + payload.len_bits(),
                    transmitted_bits(&q, c_bnd, levels)
                );
                let unpacked: Tensor5<f64> = unpack_code(&prefix, &payload, (t, h, w), c_bnd, levels).unwrap();
                prop_assert_eq!(unpacked.value_vec(), masked.value_vec());
            }

            #[test]
            fn full_code_roundtrips(seed in 0u64..1000, c_bnd in 1usize..9) {
                let (t, h, w) = (1usize, 2usize, 3usize);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let code_vals: Vec<f64> = (0..c_bnd * t * h * w)
                    .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                let code = Tensor5::constant(Shape5::new(1, c_bnd, t, h, w), code_vals.clone());
                let payload = pack_full_code(&code);
                prop_assert_eq!(payload.len_bits(), c_bnd * t * h * w);
                let back: Tensor5<f64> = unpack_full_code(&payload, (t, h, w), c_bnd).unwrap();
                prop_assert_eq!(back.value_vec(), code_vals);
            }
        }
    }
}
