//! Token embedding table.

use rand::Rng;

use super::tensor::{Param, ParamVisitor};
use super::NnError;

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: Param,
}

impl EmbeddingTable {
    pub fn new(vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        EmbeddingTable { table: Param::uniform(&[vocab, dim], dim, rng) }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn lookup(&self, token: usize) -> Result<&[f64], NnError> {
        if token >= self.vocab_size() {
            return Err(NnError::TokenOutOfRange { token, vocab: self.vocab_size() });
        }
        Ok(self.table.value.row(token))
    }

    pub fn accumulate_grad(&mut self, token: usize, d: &[f64]) {
        let row = self.table.grad.row_mut(token);
        for (g, v) in row.iter_mut().zip(d) {
            *g += v;
        }
    }
}

impl ParamVisitor for EmbeddingTable {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("table", &mut self.table);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct EmbProbe {
        emb: EmbeddingTable,
        ids: Vec<usize>,
        readout: Vec<f64>,
    }

    impl ParamVisitor for EmbProbe {
        fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            self.emb.for_each_param(f);
        }
    }

    fn emb_loss(m: &mut EmbProbe) -> f64 {
        let mut loss = 0.0;
        for &id in &m.ids {
            let row = m.emb.lookup(id).unwrap().to_vec();
            loss += row.iter().zip(&m.readout).map(|(a, b)| a * b).sum::<f64>();
        }
        for &id in &m.ids.clone() {
            m.emb.accumulate_grad(id, &m.readout.clone());
        }
        loss
    }

    #[test]
    fn lookup_rejects_out_of_range() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let emb = EmbeddingTable::new(4, 3, &mut rng);
        assert!(emb.lookup(4).is_err());
        assert!(emb.lookup(3).is_ok());
    }

    #[test]
    fn repeated_ids_accumulate_gradient() {
        for seed in 0..20 {
            let mut rng = ChaCha20Rng::seed_from_u64(100 + seed);
            let vocab = rng.gen_range(3..8);
            let dim = rng.gen_range(2..5);
            let emb = EmbeddingTable::new(vocab, dim, &mut rng);
            let ids = vec![0, vocab - 1, 0];
            let readout = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut probe = EmbProbe { emb, ids, readout };
            let report = finite_difference_check(&mut probe, emb_loss, 1e-6, 1e-5);
            assert!(report.pass, "seed {seed}: max rel err {}", report.max_rel_err);
        }
    }
}
