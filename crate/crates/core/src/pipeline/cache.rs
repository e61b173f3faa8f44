//! Precomputed top-k advantage rows.
//!
//! For each state the DPO teacher's `k` most likely tokens are kept. A kept
//! token that is also in the reference teacher's top-k stores
//! `log π_dpo − log π_ref`. A kept token outside the reference top-k has its
//! reference log-probability replaced by a substitute derived from the
//! reference's lowest in-set probability. Reference top-k tokens the DPO
//! teacher did not keep are dropped. Values are stored without β.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::mdp::{State, Token};
use crate::objectives::AdvantageRow;
use crate::policy::TabularPolicy;

pub const CACHE_MAGIC: &[u8; 18] = b"ALIGNLAB-ACACHE-v1";

/// How the missing reference log-probability is substituted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Substitution {
    /// Use `log p_min`, the log of the reference's lowest top-k probability.
    #[default]
    LogSpace,
    /// Subtract `p_min` itself from `log π_dpo`.
    RawProbability,
}

impl Substitution {
    fn code(self) -> u8 {
        match self {
            Substitution::LogSpace => 0,
            Substitution::RawProbability => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Substitution::LogSpace),
            1 => Some(Substitution::RawProbability),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKAdvantageCache {
    k: usize,
    vocab_size: usize,
    dpo_hash: String,
    ref_hash: String,
    substitution: Substitution,
    rows: BTreeMap<State, Vec<(Token, f64)>>,
}

/// Indices of the `k` largest entries, largest first; ties to the lower index.
fn top_k(values: &[f64], k: usize) -> Vec<Token> {
    let mut idx: Vec<Token> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn cache_row(
    dpo: &TabularPolicy,
    reference: &TabularPolicy,
    state: &State,
    k: usize,
    substitution: Substitution,
) -> Vec<(Token, f64)> {
    let dpo_lp = dpo.log_probs(state);
    let ref_lp = reference.log_probs(state);
    let dpo_top = top_k(&dpo_lp, k);
    let ref_top = top_k(&ref_lp, k);
    let ref_min_lp = ref_lp[*ref_top.last().expect("k >= 1")];
    let mut row: Vec<(Token, f64)> = dpo_top
        .iter()
        .map(|&t| {
            let value = if ref_top.contains(&t) {
                dpo_lp[t] - ref_lp[t]
            } else {
                match substitution {
                    Substitution::LogSpace => dpo_lp[t] - ref_min_lp,
                    Substitution::RawProbability => dpo_lp[t] - ref_min_lp.exp(),
                }
            };
            (t, value)
        })
        .collect();
    row.sort_by_key(|&(t, _)| t);
    row
}

/// Builds rows for `states`. `k` above the vocabulary size is clamped, which
/// makes the cache exact.
pub fn build_advantage_cache<'s, I>(
    dpo: &TabularPolicy,
    reference: &TabularPolicy,
    states: I,
    k: usize,
    substitution: Substitution,
) -> Result<TopKAdvantageCache>
where
    I: IntoIterator<Item = &'s State>,
{
    if k == 0 {
        return Err(Error::config("cache.k", "must be at least 1"));
    }
    if dpo.vocab_size() != reference.vocab_size() {
        return Err(Error::precondition("teachers disagree on vocabulary size"));
    }
    let vocab_size = dpo.vocab_size();
    let k = k.min(vocab_size);
    let states: Vec<&State> = states.into_iter().collect();
    let rows: BTreeMap<State, Vec<(Token, f64)>> = states
        .par_iter()
        .map(|s| ((*s).clone(), cache_row(dpo, reference, s, k, substitution)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    Ok(TopKAdvantageCache {
        k,
        vocab_size,
        dpo_hash: dpo.content_hash(),
        ref_hash: reference.content_hash(),
        substitution,
        rows,
    })
}

impl TopKAdvantageCache {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn substitution(&self) -> Substitution {
        self.substitution
    }

    pub fn teacher_hashes(&self) -> (&str, &str) {
        (&self.dpo_hash, &self.ref_hash)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, state: &State) -> Result<AdvantageRow> {
        self.rows
            .get(state)
            .map(|entries| AdvantageRow {
                entries: entries.clone(),
            })
            .ok_or_else(|| Error::CacheMiss(state.clone()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        for h in [&self.dpo_hash, &self.ref_hash] {
            let bytes = hex::decode(h).expect("hashes are hex");
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        out.push(self.substitution.code());
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for (state, entries) in &self.rows {
            for seq in [&state.prompt, &state.generated] {
                out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
                for &t in seq {
                    out.extend_from_slice(&(t as u32).to_le_bytes());
                }
            }
            out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
            for &(t, v) in entries {
                out.extend_from_slice(&(t as u32).to_le_bytes());
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(CACHE_MAGIC.len())? != CACHE_MAGIC {
            return Err(r.err("bad magic"));
        }
        let k = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        let mut hashes = Vec::new();
        for _ in 0..2 {
            let n = r.u32()? as usize;
            hashes.push(hex::encode(r.take(n)?));
        }
        let substitution = Substitution::from_code(r.take(1)?[0])
            .ok_or_else(|| r.err("unknown substitution mode"))?;
        let n_rows = r.u64()?;
        let mut rows = BTreeMap::new();
        for _ in 0..n_rows {
            let mut seqs = Vec::new();
            for _ in 0..2 {
                let n = r.u32()? as usize;
                let seq = (0..n)
                    .map(|_| r.u32().map(|t| t as Token))
                    .collect::<Result<Vec<_>>>()?;
                seqs.push(seq);
            }
            let n = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let t = r.u32()? as Token;
                let v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                if t >= vocab_size || !v.is_finite() {
                    return Err(r.err("invalid cache entry"));
                }
                entries.push((t, v));
            }
            rows.insert(State::new(&seqs[0], &seqs[1]), entries);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        let ref_hash = hashes.pop().expect("two hashes");
        let dpo_hash = hashes.pop().expect("two hashes");
        Ok(TopKAdvantageCache {
            k,
            vocab_size,
            dpo_hash,
            ref_hash,
            substitution,
            rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Loads a cache and checks it was built from exactly these teachers.
    pub fn load(path: &Path, dpo: &TabularPolicy, reference: &TabularPolicy) -> Result<Self> {
        let cache = Self::from_bytes(&fs::read(path)?, path)?;
        for (what, stored, actual) in [
            ("DPO teacher", &cache.dpo_hash, dpo.content_hash()),
            (
                "reference teacher",
                &cache.ref_hash,
                reference.content_hash(),
            ),
        ] {
            if *stored != actual {
                return Err(Error::Integrity {
                    what: format!("advantage cache {} ({what})", path.display()),
                    expected: stored.clone(),
                    found: actual,
                });
            }
        }
        Ok(cache)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: &str) -> Error {
        Error::Format {
            path: self.origin.to_path_buf(),
            message: format!("{message} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyRole;

    fn from_probs(s: &State, probs: &[f64], role: PolicyRole) -> TabularPolicy {
        let mut logits = BTreeMap::new();
        logits.insert(s.clone(), probs.iter().map(|p| p.ln()).collect());
        TabularPolicy::from_logits(probs.len(), role, logits).unwrap()
    }

    #[test]
    fn top_k_orders_by_value_then_index() {
        assert_eq!(top_k(&[0.1, 0.4, 0.4, 0.1], 3), vec![1, 2, 0]);
    }

    #[test]
    fn zero_k_rejected() {
        let p = TabularPolicy::uniform(3, PolicyRole::DpoTeacher);
        assert!(
            build_advantage_cache(&p, &p, std::iter::empty(), 0, Substitution::LogSpace).is_err()
        );
    }

    #[test]
    fn miss_is_reported() {
        let p = TabularPolicy::uniform(3, PolicyRole::DpoTeacher);
        let c =
            build_advantage_cache(&p, &p, std::iter::empty(), 2, Substitution::LogSpace).unwrap();
        assert!(matches!(
            c.row(&State::new(&[1], &[])),
            Err(Error::CacheMiss(_))
        ));
    }

    #[test]
    fn raw_probability_substitution() {
        let s = State::new(&[1], &[]);
        let reference = from_probs(&s, &[0.4, 0.3, 0.2, 0.1], PolicyRole::ReferenceTeacher);
        let dpo = from_probs(&s, &[0.35, 0.15, 0.4, 0.1], PolicyRole::DpoTeacher);
        let c =
            build_advantage_cache(&dpo, &reference, [&s], 2, Substitution::RawProbability).unwrap();
        let row = c.row(&s).unwrap();
        let ref_lp = reference.log_probs(&s);
        let dpo_lp = dpo.log_probs(&s);
        assert_eq!(row.entries[1], (2, dpo_lp[2] - ref_lp[1].exp()));
    }
}
