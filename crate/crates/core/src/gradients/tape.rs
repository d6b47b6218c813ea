//! Recorded forward pass of an [`AttentionBlock`] and its adjoint.
//!
//! The forward keeps every state `S_t` (and `c_t`), so the backward walks the
//! recurrence once in reverse without recomputation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};

use crate::attention::block::{HeadFeatures, KeyShift};
use crate::attention::gates::{GateActivations, GateParams};
use crate::attention::norm::{rms_floor, stable_norm_backward};
use crate::attention::rope::apply_rope_inverse;
use crate::attention::rules::SUM_NORM_EPS;
use crate::attention::AttentionBlock;
use crate::error::{ensure_finite, Error, Result};
use crate::feature_maps::FeatureMapKind;
use crate::Scalar;

#[derive(Clone, Debug)]
struct HeadTape<T> {
    feats: HeadFeatures<T>,
    acts: GateActivations<T>,
    /// `S_0 .. S_L`.
    states: Vec<Array2<T>>,
    /// `c_0 .. c_L`.
    accs: Vec<Array1<T>>,
    /// `S_t φ_q(t)` before any normalization, `d × L`.
    num: Array2<T>,
    /// `c_tᵀ φ_q(t)`.
    den: Array1<T>,
    /// Input of the stable norm, `d × L`.
    pre: Array2<T>,
    /// Stable-norm denominators.
    rms: Array1<T>,
}

/// Everything the backward pass needs from one forward over one sequence.
#[derive(Clone, Debug)]
pub struct BlockTape<T> {
    x: Array2<T>,
    heads: Vec<HeadTape<T>>,
    /// Concatenated head outputs, `(n_heads · d) × L`.
    concat: Array2<T>,
}

impl<T> BlockTape<T> {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }
}

/// Gradients of a scalar loss with respect to the block parameters and input.
#[derive(Clone, Debug)]
pub struct BlockGrads<T> {
    /// Same layout as the block, holding `∂loss/∂θ`.
    pub params: AttentionBlock<T>,
    pub dx: Array2<T>,
}

/// Forward over one sequence (`model_dim × L`), recording a tape. The output
/// equals [`AttentionBlock::forward`] up to rounding.
pub fn forward_with_tape<T: Scalar>(block: &AttentionBlock<T>, x: ArrayView2<T>) -> Result<(Array2<T>, BlockTape<T>)> {
    if x.nrows() != block.model_dim {
        return Err(Error::Shape(format!("block expects {} input rows, got {}", block.model_dim, x.nrows())));
    }
    ensure_finite(x.iter(), "block input")?;
    let cfg = block.config;
    let (d, m, len) = (cfg.d, cfg.m(), x.ncols());
    let mut heads = Vec::with_capacity(block.heads.len());
    let mut concat = Array2::zeros((cfg.n_heads * d, len));
    for (h, head) in block.heads.iter().enumerate() {
        let feats = block.head_features(h, x, 0);
        let acts = head.gate.activations(x);
        let decays = acts.decays(d, m);
        let mut states = Vec::with_capacity(len + 1);
        let mut accs = Vec::with_capacity(len + 1);
        states.push(Array2::zeros((d, m)));
        accs.push(Array1::zeros(m));
        let mut num = Array2::zeros((d, len));
        let mut den = Array1::zeros(len);
        for t in 0..len {
            let phi_k = feats.phi_k.column(t);
            let v = feats.v.column(t);
            let mut s = states[t].clone();
            let mut c = accs[t].clone();
            match (&acts, &decays) {
                (GateActivations::DeltaRule { beta }, _) => {
                    let b = beta[t];
                    let u = s.dot(&phi_k);
                    let coef = &v - &u;
                    for i in 0..d {
                        s.row_mut(i).scaled_add(b * coef[i], &phi_k);
                    }
                    let cu = c.dot(&phi_k);
                    c.scaled_add(b * (T::one() - cu), &phi_k);
                }
                (_, Some(dec)) => {
                    let (a, bcol, w) = (dec.row.column(t), dec.col.column(t), dec.write[t]);
                    let bv = bcol.to_vec();
                    let pk = phi_k.to_vec();
                    let sl = s.as_slice_mut().expect("owned state");
                    for i in 0..d {
                        let (ai, wv) = (a[i], w * v[i]);
                        for (j, e) in sl[i * m..(i + 1) * m].iter_mut().enumerate() {
                            *e = ai * bv[j] * *e + wv * pk[j];
                        }
                    }
                    for j in 0..m {
                        c[j] = bcol[j] * c[j] + w * phi_k[j];
                    }
                }
                _ => unreachable!("every non-delta rule has decays"),
            }
            let phi_q = feats.phi_q.column(t);
            num.column_mut(t).assign(&s.dot(&phi_q));
            den[t] = c.dot(&phi_q);
            states.push(s);
            accs.push(c);
        }
        let mut pre = num.clone();
        if cfg.sum_norm {
            for t in 0..len {
                if !(den[t] >= T::lit(SUM_NORM_EPS)) {
                    return Err(Error::Degenerate {
                        position: t,
                        value: den[t].as_f64(),
                        eps: SUM_NORM_EPS,
                    });
                }
                pre.column_mut(t).mapv_inplace(|v| v / den[t]);
            }
        } else if !feats.key_shift.correction.is_empty() {
            pre *= &feats.key_shift.correction.view().insert_axis(Axis(0));
        }
        let mut out = pre.clone();
        let mut rms = Array1::ones(len);
        if cfg.stable_norm {
            for t in 0..len {
                rms[t] = rms_floor(pre.column(t));
                let inv = T::one() / rms[t];
                Zip::from(out.column_mut(t)).and(&head.gain).for_each(|o, &g| *o = *o * inv * g);
            }
        }
        concat.slice_mut(s![h * d..(h + 1) * d, ..]).assign(&out);
        heads.push(HeadTape {
            feats,
            acts,
            states,
            accs,
            num,
            den,
            pre,
            rms,
        });
    }
    let y = block.w_o.dot(&concat);
    Ok((
        y,
        BlockTape {
            x: x.to_owned(),
            heads,
            concat,
        },
    ))
}

/// Adjoint of [`forward_with_tape`] for upstream gradient `dy`.
pub fn backward<T: Scalar>(block: &AttentionBlock<T>, tape: &BlockTape<T>, dy: ArrayView2<T>) -> Result<BlockGrads<T>> {
    let mut grads = block.zeros_like();
    let mut dx = Array2::zeros(tape.x.raw_dim());
    backward_accumulate(block, tape, dy, &mut grads, dx.view_mut())?;
    Ok(BlockGrads { params: grads, dx })
}

/// Like [`backward`] but adds into existing gradient buffers.
pub fn backward_accumulate<T: Scalar>(
    block: &AttentionBlock<T>,
    tape: &BlockTape<T>,
    dy: ArrayView2<T>,
    grads: &mut AttentionBlock<T>,
    mut dx: ArrayViewMut2<T>,
) -> Result<()> {
    let cfg = block.config;
    let (d, len) = (cfg.d, tape.x.ncols());
    if dy.dim() != (block.model_dim, len) || dx.dim() != tape.x.dim() || tape.heads.len() != block.heads.len() {
        return Err(Error::Shape("tape and gradient shapes do not match the block".into()));
    }
    let x = tape.x.view();
    grads.w_o += &dy.dot(&tape.concat.t());
    let dconcat = block.w_o.t().dot(&dy);
    let scale: T = cfg.scale();

    for (h, (head, ht)) in block.heads.iter().zip(&tape.heads).enumerate() {
        let gh = &mut grads.heads[h];
        let dout = dconcat.slice(s![h * d..(h + 1) * d, ..]);

        // Stable norm.
        let mut dpre = Array2::zeros((d, len));
        if cfg.stable_norm {
            for t in 0..len {
                stable_norm_backward(
                    ht.pre.column(t),
                    ht.rms[t],
                    head.gain.view(),
                    dout.column(t),
                    dpre.column_mut(t),
                    gh.gain.view_mut(),
                );
            }
        } else {
            dpre.assign(&dout);
        }

        // Sum normalization or key-max correction back to numerator/denominator.
        let feats = &ht.feats;
        let global_key = !feats.key_shift.correction.is_empty();
        let mut dnum = dpre.clone();
        let mut dden = Array1::zeros(len);
        let mut dcorr = Array1::zeros(len);
        if cfg.sum_norm {
            for t in 0..len {
                let den = ht.den[t];
                let inv = T::one() / den;
                let dot = dpre.column(t).dot(&ht.num.column(t));
                dden[t] = -dot * inv * inv;
                dnum.column_mut(t).mapv_inplace(|v| v * inv);
            }
        } else if global_key {
            for t in 0..len {
                let rho = feats.key_shift.correction[t];
                dcorr[t] = dpre.column(t).dot(&ht.num.column(t));
                dnum.column_mut(t).mapv_inplace(|v| v * rho);
            }
        }

        // Reverse recurrence.
        let (dphi_q, dphi_k, dv, gate_adj) = reverse_recurrence(ht, dnum.view(), dden.view());

        // Feature maps back to rotated projections.
        let mut dq = feature_backward(cfg.feature, &feats.q_raw, &feats.phi_q, &dphi_q, scale);
        let mut dk = if global_key {
            global_key_backward(&feats.k_raw, &feats.phi_k, &dphi_k, &feats.key_shift, &dcorr)
        } else {
            feature_backward(cfg.feature, &feats.k_raw, &feats.phi_k, &dphi_k, T::one())
        };
        if cfg.rope {
            apply_rope_inverse(dq.view_mut(), 0);
            apply_rope_inverse(dk.view_mut(), 0);
        }

        gh.feature.w_q += &dq.dot(&x.t());
        gh.feature.w_k += &dk.dot(&x.t());
        gh.w_v += &dv.dot(&x.t());
        dx += &head.feature.w_q.t().dot(&dq);
        dx += &head.feature.w_k.t().dot(&dk);
        dx += &head.w_v.t().dot(&dv);

        gate_backward(&head.gate, &ht.acts, &gate_adj, x, &mut gh.gate, dx.view_mut());
    }
    Ok(())
}

/// Adjoints with respect to the per-position decay factors.
struct GateAdjoint<T> {
    /// `∂/∂row`, `d × L` (or `∂/∂β` in row 0 for the delta rule).
    da: Array2<T>,
    /// `∂/∂col`, `m × L`.
    db: Array2<T>,
    /// `∂/∂write` (or `∂/∂β` for the delta rule).
    dw: Array1<T>,
}

fn reverse_recurrence<T: Scalar>(
    ht: &HeadTape<T>,
    dnum: ArrayView2<T>,
    dden: ArrayView1<T>,
) -> (Array2<T>, Array2<T>, Array2<T>, GateAdjoint<T>) {
    let feats = &ht.feats;
    let (d, m) = ht.states[0].dim();
    let len = dnum.ncols();
    let mut dphi_q = Array2::zeros((m, len));
    let mut dphi_k = Array2::zeros((m, len));
    let mut dv = Array2::zeros((d, len));
    let mut adj = GateAdjoint {
        da: Array2::zeros((d, len)),
        db: Array2::zeros((m, len)),
        dw: Array1::zeros(len),
    };
    let decays = ht.acts.decays(d, m);
    let mut ds = Array2::<T>::zeros((d, m));
    let mut dc = Array1::<T>::zeros(m);
    for t in (0..len).rev() {
        let s_t = &ht.states[t + 1];
        let c_t = &ht.accs[t + 1];
        let phi_q = feats.phi_q.column(t);
        let phi_k = feats.phi_k.column(t);
        let v = feats.v.column(t);
        let dn = dnum.column(t);

        // Read-out: num = S φq, den = cᵀ φq.
        let mut dq = transposed_mat_vec(s_t, dn);
        dq.scaled_add(dden[t], c_t);
        dphi_q.column_mut(t).assign(&dq);
        for i in 0..d {
            ds.row_mut(i).scaled_add(dn[i], &phi_q);
        }
        dc.scaled_add(dden[t], &phi_q);

        let s_prev = &ht.states[t];
        let c_prev = &ht.accs[t];
        match (&ht.acts, &decays) {
            (GateActivations::DeltaRule { beta }, _) => {
                let b = beta[t];
                let ds_phi = ds.dot(&phi_k);
                let u = s_prev.dot(&phi_k);
                let resid = &v - &u;
                dv.column_mut(t).assign(&(&ds_phi * b));
                let mut dbeta = resid.dot(&ds_phi);
                let dc_phi = dc.dot(&phi_k);
                let c_phi = c_prev.dot(&phi_k);
                dbeta += (T::one() - c_phi) * dc_phi;
                adj.dw[t] = dbeta;
                // ∂/∂φ of  -β S φφᵀ + β v φᵀ  and the accumulator analogue.
                let mut dphi = s_prev.t().dot(&ds_phi) + ds.t().dot(&u);
                dphi.mapv_inplace(|e| -b * e);
                dphi.scaled_add(b, &ds.t().dot(&v));
                dphi.scaled_add(-b * dc_phi, c_prev);
                dphi.scaled_add(-b * c_phi, &dc);
                dphi.scaled_add(b, &dc);
                dphi_k.column_mut(t).assign(&dphi);
                // dS_{t-1} = dS (I - β φ φᵀ), dc_{t-1} = dc - β (dcᵀφ) φ.
                for i in 0..d {
                    ds.row_mut(i).scaled_add(-b * ds_phi[i], &phi_k);
                }
                dc.scaled_add(-b * dc_phi, &phi_k);
            }
            (_, Some(dec)) => {
                let (a, bcol, w) = (dec.row.column(t), dec.col.column(t), dec.write[t]);
                let ds_phi = ds.dot(&phi_k);
                dv.column_mut(t).assign(&(&ds_phi * w));
                let mut dphi = transposed_mat_vec(&ds, v);
                dphi += &dc;
                dphi.mapv_inplace(|e| e * w);
                dphi_k.column_mut(t).assign(&dphi);
                adj.dw[t] = v.dot(&ds_phi) + dc.dot(&phi_k);
                // One pass over rows: gate adjoints from dS ⊙ S_{t-1}, then
                // dS_{t-1} = dS ⊙ (a bᵀ).
                let sp = s_prev.as_standard_layout();
                let sp = sp.as_slice().expect("standard layout");
                let bv = bcol.to_vec();
                let mut db_acc = vec![T::zero(); m];
                let dsl = ds.as_slice_mut().expect("owned state adjoint");
                for i in 0..d {
                    let ai = a[i];
                    let row = &mut dsl[i * m..(i + 1) * m];
                    let srow = &sp[i * m..(i + 1) * m];
                    let mut acc_a = T::zero();
                    for j in 0..m {
                        let p = row[j] * srow[j];
                        acc_a += p * bv[j];
                        db_acc[j] += p * ai;
                        row[j] *= ai * bv[j];
                    }
                    adj.da[[i, t]] = acc_a;
                }
                for j in 0..m {
                    adj.db[[j, t]] = db_acc[j] + dc[j] * c_prev[j];
                }
                Zip::from(&mut dc).and(&bcol).for_each(|g, &b| *g *= b);
            }
            _ => unreachable!("every non-delta rule has decays"),
        }
    }
    (dphi_q, dphi_k, dv, adj)
}

/// `aᵀ x` accumulated row by row, which keeps memory access contiguous.
fn transposed_mat_vec<T: Scalar>(a: &Array2<T>, x: ArrayView1<T>) -> Array1<T> {
    let mut out = Array1::zeros(a.ncols());
    for (row, &xi) in a.rows().into_iter().zip(x.iter()) {
        out.scaled_add(xi, &row);
    }
    out
}

/// Elementwise or per-column safe-exp feature adjoint. `phi` carries
/// `scale` already.
fn feature_backward<T: Scalar>(
    kind: FeatureMapKind,
    z: &Array2<T>,
    phi: &Array2<T>,
    dphi: &Array2<T>,
    scale: T,
) -> Array2<T> {
    let d = z.nrows();
    let mut dz = Array2::zeros(z.raw_dim());
    match kind {
        FeatureMapKind::Identity => dz.assign(&(dphi * scale)),
        FeatureMapKind::Relu => Zip::from(&mut dz)
            .and(z)
            .and(dphi)
            .for_each(|o, &z, &g| *o = if z > T::zero() { g * scale } else { T::zero() }),
        FeatureMapKind::EluPlusOne => Zip::from(&mut dz)
            .and(z)
            .and(dphi)
            .for_each(|o, &z, &g| *o = if z > T::zero() { g * scale } else { g * scale * z.exp() }),
        FeatureMapKind::CosSin => {
            for ((i, t), o) in dz.indexed_iter_mut() {
                let zv = z[[i, t]];
                *o = scale * (-zv.sin() * dphi[[i, t]] + zv.cos() * dphi[[i + d, t]]);
            }
        }
        FeatureMapKind::SafeExp => {
            // φ = scale·exp(z - max_col z): the max position absorbs -Σ φ⊙dφ.
            for t in 0..z.ncols() {
                let col = z.column(t);
                let arg = argmax(col);
                let mut total = T::zero();
                for i in 0..d {
                    let g = phi[[i, t]] * dphi[[i, t]];
                    dz[[i, t]] = g;
                    total += g;
                }
                dz[[arg, t]] -= total;
            }
        }
    }
    dz
}

/// Adjoint of `φ_k = exp(k - M)` with global max `M`, together with the
/// correction `ρ_t = exp(M - M_t)` applied to un-normalized outputs.
fn global_key_backward<T: Scalar>(
    k: &Array2<T>,
    phi: &Array2<T>,
    dphi: &Array2<T>,
    shift: &KeyShift<T>,
    dcorr: &Array1<T>,
) -> Array2<T> {
    let mut dk = phi * dphi;
    let mut dmax = -dk.sum();
    for t in 0..k.ncols() {
        let g = dcorr[t] * shift.correction[t];
        dmax += g;
        let (i, s) = shift.running_argmax[t];
        dk[[i, s]] -= g;
    }
    let (i, s) = shift.argmax;
    dk[[i, s]] += dmax;
    dk
}

fn argmax<T: Scalar>(col: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in col.iter().enumerate() {
        if v > col[best] {
            best = i;
        }
    }
    best
}

fn sig_grad<T: Scalar>(s: T) -> T {
    s * (T::one() - s)
}

fn gate_backward<T: Scalar>(
    params: &GateParams<T>,
    acts: &GateActivations<T>,
    adj: &GateAdjoint<T>,
    x: ArrayView2<T>,
    grads: &mut GateParams<T>,
    mut dx: ArrayViewMut2<T>,
) {
    let two = T::lit(2.0);
    let vector_gate = |w: &Array1<T>, dw: &mut Array1<T>, dlogit: Array1<T>, dx: &mut ArrayViewMut2<T>| {
        *dw += &x.dot(&dlogit);
        for (t, mut col) in dx.columns_mut().into_iter().enumerate() {
            col.scaled_add(dlogit[t], w);
        }
    };
    match (params, acts, grads) {
        (GateParams::None, _, _) => {}
        (GateParams::ScalarRfa { w_g }, GateActivations::ScalarRfa { g }, GateParams::ScalarRfa { w_g: gw }) => {
            let dlogit = Array1::from_shape_fn(g.len(), |t| {
                let dg = adj.db.column(t).sum() - adj.dw[t];
                dg * sig_grad(g[t])
            });
            vector_gate(w_g, gw, dlogit, &mut dx);
        }
        (GateParams::DeltaRule { w_beta }, GateActivations::DeltaRule { beta }, GateParams::DeltaRule { w_beta: gw }) => {
            let dlogit = Array1::from_shape_fn(beta.len(), |t| adj.dw[t] * sig_grad(beta[t]));
            vector_gate(w_beta, gw, dlogit, &mut dx);
        }
        (
            GateParams::FastDecay { w_z, w_f, .. },
            GateActivations::FastDecay { z, f },
            GateParams::FastDecay { w_z: gwz, b_z: gbz, w_f: gwf, b_f: gbf },
        ) => {
            let dz = Zip::from(&adj.da).and(z).map_collect(|&a, &z| a * sig_grad(z));
            let df = Zip::from(&adj.db).and(f).map_collect(|&b, &f| b * sig_grad(f));
            affine_backward(w_z, &dz, x, gwz, gbz, dx.view_mut());
            affine_backward(w_f, &df, x, gwf, gbf, dx.view_mut());
        }
        (
            GateParams::Regla { w_g, w_r, .. },
            GateActivations::Regla { g, r, .. },
            GateParams::Regla { w_g: gwg, b_g: gbg, w_r: gwr, b_r: gbr },
        ) => {
            let one = T::one();
            let dg = Zip::from(&adj.da)
                .and(g)
                .and(r)
                .map_collect(|&a, &g, &r| a * two * ((one - r) * g + r * (one - g)) * sig_grad(g));
            let dr = Zip::from(&adj.da)
                .and(g)
                .and(r)
                .map_collect(|&a, &g, &r| a * two * g * (one - g) * sig_grad(r));
            affine_backward(w_g, &dg, x, gwg, gbg, dx.view_mut());
            affine_backward(w_r, &dr, x, gwr, gbr, dx.view_mut());
        }
        _ => unreachable!("gate parameters, activations and gradients share a variant"),
    }
}

fn affine_backward<T: Scalar>(
    w: &Array2<T>,
    dlogit: &Array2<T>,
    x: ArrayView2<T>,
    gw: &mut Array2<T>,
    gb: &mut Array1<T>,
    mut dx: ArrayViewMut2<T>,
) {
    *gw += &dlogit.dot(&x.t());
    *gb += &dlogit.sum_axis(Axis(1));
    dx += &w.t().dot(dlogit);
}
