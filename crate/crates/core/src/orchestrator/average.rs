use std::sync::{Arc, Condvar, Mutex};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Element-wise uniform mean of parameter sets with one schema.
///
/// Computed as `x₀ + Σ(xᵢ − x₀)/M`, which returns identical inputs bit for
/// bit; averaging an already averaged population is therefore the identity.
pub fn fed_average(sets: &[ParamSet]) -> Result<ParamSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Contract("cannot average zero parameter sets".into()))?;
    if let Some(i) = sets.iter().position(|s| !s.same_schema(first)) {
        return Err(Error::Contract(format!("parameter set {i} has a different schema from set 0")));
    }
    let m = sets.len() as f64;
    let mut out = ParamSet::default();
    for (name, base) in &first.0 {
        let x0 = base.data();
        let mut delta = vec![0.0; x0.len()];
        for s in &sets[1..] {
            for ((d, &x), &b) in delta.iter_mut().zip(s.0[name].data()).zip(x0) {
                *d += x - b;
            }
        }
        let data = x0.iter().zip(&delta).map(|(&b, &d)| b + d / m).collect();
        out.0.insert(name.clone(), Tensor::new(base.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Averages of one rendezvous: client parts, then server body.
pub type Averages = Arc<(ParamSet, ParamSet)>;

#[derive(Default)]
struct RvState {
    members: usize,
    generation: u64,
    entries: Vec<(u32, ParamSet, ParamSet)>,
    last: Option<Averages>,
    failed: Option<String>,
}

/// Stop-the-world averaging point shared by hierarchical server replicas.
/// Each live replica contributes once per period; the last arrival computes
/// the means (ordered by client id) and wakes the others. A replica that
/// stops calls [`Rendezvous::leave`] and is excluded from later rounds.
pub struct Rendezvous {
    state: Mutex<RvState>,
    cv: Condvar,
}

impl std::fmt::Debug for Rendezvous {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.state.lock().expect("rendezvous lock");
        f.debug_struct("Rendezvous")
            .field("members", &s.members)
            .field("generation", &s.generation)
            .finish()
    }
}

impl Rendezvous {
    pub fn new(members: usize) -> Self {
        Self {
            state: Mutex::new(RvState {
                members,
                ..Default::default()
            }),
            cv: Condvar::new(),
        }
    }

    fn complete(s: &mut RvState) {
        let mut entries = std::mem::take(&mut s.entries);
        entries.sort_by_key(|e| e.0);
        let (clients, bodies): (Vec<ParamSet>, Vec<ParamSet>) = entries.into_iter().map(|(_, c, b)| (c, b)).unzip();
        match fed_average(&clients).and_then(|c| Ok((c, fed_average(&bodies)?))) {
            Ok(avg) => s.last = Some(Arc::new(avg)),
            Err(e) => s.failed = Some(e.to_string()),
        }
        s.generation += 1;
    }

    /// Blocks until every live member has contributed, then returns the
    /// averages.
    pub fn contribute(&self, client_id: u32, client: ParamSet, body: ParamSet) -> Result<Averages> {
        let mut s = self.state.lock().expect("rendezvous lock");
        let gen = s.generation;
        s.entries.push((client_id, client, body));
        if s.entries.len() >= s.members {
            Self::complete(&mut s);
            self.cv.notify_all();
        } else {
            s = self.cv.wait_while(s, |s| s.generation == gen).expect("rendezvous lock");
        }
        if let Some(e) = &s.failed {
            return Err(Error::Contract(format!("averaging failed: {e}")));
        }
        Ok(s.last.clone().expect("completed generation has averages"))
    }

    pub fn leave(&self) {
        let mut s = self.state.lock().expect("rendezvous lock");
        s.members = s.members.saturating_sub(1);
        if !s.entries.is_empty() && s.entries.len() >= s.members {
            Self::complete(&mut s);
            self.cv.notify_all();
        }
    }

    pub fn members(&self) -> usize {
        self.state.lock().expect("rendezvous lock").members
    }
}
