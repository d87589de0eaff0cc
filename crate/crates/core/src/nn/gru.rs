//! Gated recurrent unit cell with hand-written backpropagation.
//!
//! Gate equations (single bias per gate, reset applied to the recurrent
//! candidate term):
//!
//! ```text
//! z  = sigmoid(Wz x + Uz h + bz)        update gate
//! r  = sigmoid(Wr x + Ur h + br)        reset gate
//! n  = tanh(Wn x + r * (Un h) + bn)     candidate
//! h' = (1 - z) * n + z * h
//! ```

use rand::Rng;

use super::tensor::{Param, ParamVisitor, Tensor};
use super::NnError;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Debug, Clone)]
pub struct GruCell {
    pub wz: Param,
    pub uz: Param,
    pub bz: Param,
    pub wr: Param,
    pub ur: Param,
    pub br: Param,
    pub wn: Param,
    pub un: Param,
    pub bn: Param,
    input: usize,
    hidden: usize,
}

/// Intermediate values for one step, required by the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    /// Un·h before the reset gate is applied.
    m: Vec<f64>,
}

impl GruCell {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GruCell {
            wz: Param::uniform(&[hidden, input], input, rng),
            uz: Param::uniform(&[hidden, hidden], hidden, rng),
            bz: Param::zeros(&[hidden]),
            wr: Param::uniform(&[hidden, input], input, rng),
            ur: Param::uniform(&[hidden, hidden], hidden, rng),
            br: Param::zeros(&[hidden]),
            wn: Param::uniform(&[hidden, input], input, rng),
            un: Param::uniform(&[hidden, hidden], hidden, rng),
            bn: Param::zeros(&[hidden]),
            input,
            hidden,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn n_params(&self) -> usize {
        3 * (self.hidden * self.input + self.hidden * self.hidden + self.hidden)
    }

    fn gate(&self, w: &Tensor, u: &Tensor, b: Option<&Tensor>, x: &[f64], h: &[f64]) -> Vec<f64> {
        let (hid, inp) = (self.hidden, self.input);
        let mut out = vec![0.0; hid];
        let wd = w.data();
        let ud = u.data();
        for i in 0..hid {
            let mut acc = b.map_or(0.0, |b| b.data()[i]);
            let wrow = &wd[i * inp..(i + 1) * inp];
            for (wv, xv) in wrow.iter().zip(x) {
                acc += wv * xv;
            }
            let urow = &ud[i * hid..(i + 1) * hid];
            for (uv, hv) in urow.iter().zip(h) {
                acc += uv * hv;
            }
            out[i] = acc;
        }
        out
    }

    pub fn forward(&self, x: &[f64], h: &[f64]) -> Result<(Vec<f64>, GruCache), NnError> {
        if x.len() != self.input {
            return Err(NnError::ShapeMismatch {
                context: "GruCell::forward input",
                expected: self.input,
                actual: x.len(),
            });
        }
        if h.len() != self.hidden {
            return Err(NnError::ShapeMismatch {
                context: "GruCell::forward hidden",
                expected: self.hidden,
                actual: h.len(),
            });
        }
        let z: Vec<f64> = self
            .gate(&self.wz.value, &self.uz.value, Some(&self.bz.value), x, h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = self
            .gate(&self.wr.value, &self.ur.value, Some(&self.br.value), x, h)
            .into_iter()
            .map(sigmoid)
            .collect();

        // m = Un·h, kept pre-reset for the backward pass.
        let mut m = vec![0.0; self.hidden];
        let und = self.un.value.data();
        for i in 0..self.hidden {
            let urow = &und[i * self.hidden..(i + 1) * self.hidden];
            m[i] = urow.iter().zip(h).map(|(u, hv)| u * hv).sum();
        }

        let mut n = vec![0.0; self.hidden];
        let wnd = self.wn.value.data();
        for i in 0..self.hidden {
            let mut acc = self.bn.value.data()[i] + r[i] * m[i];
            let wrow = &wnd[i * self.input..(i + 1) * self.input];
            for (wv, xv) in wrow.iter().zip(x) {
                acc += wv * xv;
            }
            n[i] = acc.tanh();
        }

        let hp: Vec<f64> =
            (0..self.hidden).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect();
        let cache =
            GruCache { x: x.to_vec(), h: h.to_vec(), z, r, n, m };
        Ok((hp, cache))
    }

    /// Accumulates parameter gradients; returns (dL/dx, dL/dh).
    pub fn backward(&mut self, cache: &GruCache, dhp: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (hid, inp) = (self.hidden, self.input);
        let GruCache { x, h, z, r, n, m } = cache;

        let mut dx = vec![0.0; inp];
        let mut dh = vec![0.0; hid];

        let mut dz_pre = vec![0.0; hid];
        let mut dr_pre = vec![0.0; hid];
        let mut dn_pre = vec![0.0; hid];
        let mut dm = vec![0.0; hid];

        for i in 0..hid {
            let dz = dhp[i] * (h[i] - n[i]);
            let dn = dhp[i] * (1.0 - z[i]);
            dh[i] += dhp[i] * z[i];

            dn_pre[i] = dn * (1.0 - n[i] * n[i]);
            let dr = dn_pre[i] * m[i];
            dm[i] = dn_pre[i] * r[i];
            dz_pre[i] = dz * z[i] * (1.0 - z[i]);
            dr_pre[i] = dr * r[i] * (1.0 - r[i]);
        }

        let apply = |w: &Tensor,
                         dw: &mut Tensor,
                         u: Option<(&Tensor, &mut Tensor)>,
                         db: Option<&mut Tensor>,
                         src: &[f64],
                         dx: &mut [f64],
                         dh: &mut [f64]| {
            let wd = w.data();
            let dwd = dw.data_mut();
            for i in 0..hid {
                let g = src[i];
                let wrow = &mut dwd[i * inp..(i + 1) * inp];
                for (dwv, xv) in wrow.iter_mut().zip(x) {
                    *dwv += g * xv;
                }
                let wrow = &wd[i * inp..(i + 1) * inp];
                for (dxv, wv) in dx.iter_mut().zip(wrow) {
                    *dxv += g * wv;
                }
            }
            if let Some((u, du)) = u {
                let ud = u.data();
                let dud = du.data_mut();
                for i in 0..hid {
                    let g = src[i];
                    let urow = &mut dud[i * hid..(i + 1) * hid];
                    for (duv, hv) in urow.iter_mut().zip(h) {
                        *duv += g * hv;
                    }
                    let urow = &ud[i * hid..(i + 1) * hid];
                    for (dhv, uv) in dh.iter_mut().zip(urow) {
                        *dhv += g * uv;
                    }
                }
            }
            if let Some(db) = db {
                for (dbv, g) in db.data_mut().iter_mut().zip(src) {
                    *dbv += g;
                }
            }
        };

        apply(
            &self.wz.value,
            &mut self.wz.grad,
            Some((&self.uz.value, &mut self.uz.grad)),
            Some(&mut self.bz.grad),
            &dz_pre,
            &mut dx,
            &mut dh,
        );
        apply(
            &self.wr.value,
            &mut self.wr.grad,
            Some((&self.ur.value, &mut self.ur.grad)),
            Some(&mut self.br.grad),
            &dr_pre,
            &mut dx,
            &mut dh,
        );
        apply(
            &self.wn.value,
            &mut self.wn.grad,
            None,
            Some(&mut self.bn.grad),
            &dn_pre,
            &mut dx,
            &mut dh,
        );

        // Recurrent candidate term: m = Un·h.
        let und = self.un.value.data();
        let dund = self.un.grad.data_mut();
        for i in 0..hid {
            let g = dm[i];
            let urow = &mut dund[i * hid..(i + 1) * hid];
            for (duv, hv) in urow.iter_mut().zip(h) {
                *duv += g * hv;
            }
            let urow = &und[i * hid..(i + 1) * hid];
            for (dhv, uv) in dh.iter_mut().zip(urow) {
                *dhv += g * uv;
            }
        }

        (dx, dh)
    }
}

impl ParamVisitor for GruCell {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("wz", &mut self.wz);
        f("uz", &mut self.uz);
        f("bz", &mut self.bz);
        f("wr", &mut self.wr);
        f("ur", &mut self.ur);
        f("br", &mut self.br);
        f("wn", &mut self.wn);
        f("un", &mut self.un);
        f("bn", &mut self.bn);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn zero_cell_is_a_fixed_point_at_zero_state() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut cell = GruCell::new(3, 4, &mut rng);
        cell.for_each_param(&mut |_, p| p.value.fill(0.0));
        let (hp, _) = cell.forward(&[0.7, -2.0, 5.0], &[0.0; 4]).unwrap();
        assert_eq!(hp, vec![0.0; 4]);
    }

    #[test]
    fn state_stays_in_unit_interval_for_small_states() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..50 {
            let cell = GruCell::new(4, 6, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let h: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.999..0.999)).collect();
            let (hp, _) = cell.forward(&x, &h).unwrap();
            assert!(hp.iter().all(|v| v.abs() < 1.0), "state escaped (-1,1): {hp:?}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let cell = GruCell::new(3, 4, &mut rng);
        assert!(cell.forward(&[0.0; 2], &[0.0; 4]).is_err());
        assert!(cell.forward(&[0.0; 3], &[0.0; 5]).is_err());
    }

    struct CellProbe {
        cell: GruCell,
        x: Param,
        h: Param,
        readout: Vec<f64>,
    }

    impl ParamVisitor for CellProbe {
        fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            self.cell.for_each_param(f);
            f("x", &mut self.x);
            f("h", &mut self.h);
        }
    }

    fn cell_loss(m: &mut CellProbe) -> f64 {
        let x = m.x.value.data().to_vec();
        let h = m.h.value.data().to_vec();
        let (hp, cache) = m.cell.forward(&x, &h).unwrap();
        let loss: f64 = hp.iter().zip(&m.readout).map(|(a, b)| a * b).sum();
        let (dx, dh) = m.cell.backward(&cache, &m.readout.clone());
        for (g, d) in m.x.grad.data_mut().iter_mut().zip(dx) {
            *g += d;
        }
        for (g, d) in m.h.grad.data_mut().iter_mut().zip(dh) {
            *g += d;
        }
        loss
    }

    #[test]
    fn cell_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let inp = rng.gen_range(2..6);
            let hid = rng.gen_range(2..6);
            let cell = GruCell::new(inp, hid, &mut rng);
            let mut x = Param::zeros(&[inp]);
            let mut h = Param::zeros(&[hid]);
            for v in x.value.data_mut() {
                *v = rng.gen_range(-1.5..1.5);
            }
            for v in h.value.data_mut() {
                *v = rng.gen_range(-0.9..0.9);
            }
            let readout = (0..hid).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut probe = CellProbe { cell, x, h, readout };
            let report = finite_difference_check(&mut probe, cell_loss, 1e-6, 1e-5);
            assert!(report.pass, "seed {seed}: max rel err {}", report.max_rel_err);
        }
    }
}
