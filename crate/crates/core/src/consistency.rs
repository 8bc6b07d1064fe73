//! Consensus of several view predictions and the Jensen-Shannon style
//! consistency loss `1/K sum_j KL(P_j || M)`, averaged over pixels.

use std::collections::BTreeMap;

use crate::backbone::{BackboneConfig, Binder, StageOutputs, PROB_EPS};
use crate::error::{Error, Result};
use crate::heterofusion::{hetero_forward_batch, HeteroRequest};
use crate::nn::{CustomOp, Graph, Tensor, Var};
use crate::synthdata::PhaseId;

fn check_set(preds: &[&Tensor]) -> Result<[usize; 4]> {
    let Some(first) = preds.first() else {
        return Err(Error::Contract("empty prediction set".into()));
    };
    let shape = first.shape();
    if preds.iter().any(|p| p.shape() != shape) {
        return Err(Error::Contract("predictions differ in shape".into()));
    }
    Ok(shape)
}

/// Per-pixel mean of the predictions.
pub fn consensus(preds: &[&Tensor]) -> Result<Tensor> {
    let shape = check_set(preds)?;
    let mut m = Tensor::zeros(shape);
    for p in preds {
        m.add_assign(p);
    }
    let k = preds.len() as f64;
    m.data_mut().iter_mut().for_each(|v| *v /= k);
    Ok(m)
}

fn xlogy_ratio(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (p.ln() - q.max(PROB_EPS).ln())
    } else {
        0.0
    }
}

/// `sum_c p_c ln(p_c / q_c)` with `0 ln 0 = 0` and `q` floored at 1e-7.
pub fn kl_pixel(p: [f64; 3], q: [f64; 3]) -> f64 {
    p.iter().zip(q).map(|(&a, b)| xlogy_ratio(a, b)).sum()
}

fn jsd_forward(preds: &[&Tensor], m: &Tensor) -> f64 {
    // M >= P_j / K, so M > 0 wherever P_j > 0 and no floor is needed.
    let [n, c, h, w] = m.shape();
    let hw = h * w;
    let md = m.data();
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..hw {
            let mut pixel = 0.0;
            for p in preds {
                let pd = p.data();
                for ch in 0..c {
                    let at = (i * c + ch) * hw + k;
                    let a = pd[at];
                    if a > 0.0 {
                        pixel += a * (a.ln() - md[at].ln());
                    }
                }
            }
            // exact value is non-negative; clip rounding noise
            total += pixel.max(0.0);
        }
    }
    total / (preds.len() * n * hw) as f64
}

/// Consistency loss of a prediction set, normalised per pixel.
pub fn jsd_loss(preds: &[&Tensor]) -> Result<f64> {
    let m = consensus(preds)?;
    Ok(jsd_forward(preds, &m))
}

/// Plain co-training loss on per-phase predictions.
pub fn co_training_loss(per_phase: &BTreeMap<PhaseId, Tensor>) -> Result<f64> {
    let preds: Vec<&Tensor> = per_phase.values().collect();
    jsd_loss(&preds)
}

struct Jsd {
    detach: bool,
}

impl CustomOp for Jsd {
    fn name(&self) -> &'static str {
        "jsd"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let m = consensus(inputs).expect("validated prediction set");
        Tensor::scalar(jsd_forward(inputs, &m))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        let m = consensus(inputs).expect("validated prediction set");
        let k = inputs.len() as f64;
        let [n, _, h, w] = m.shape();
        let scale = grad.item_scalar() / (k * (n * h * w) as f64);
        // d/dM of sum_j sum p_j ln(1/M), through the mean when not detached
        let through_m: Vec<f64> = if self.detach {
            vec![0.0; m.len()]
        } else {
            m.data()
                .iter()
                .enumerate()
                .map(|(i, &mv)| {
                    if mv > 0.0 {
                        let s: f64 = inputs.iter().map(|p| p.data()[i]).sum();
                        -s / (mv * k)
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        inputs
            .iter()
            .zip(wanted)
            .map(|(p, &want)| {
                want.then(|| {
                    let data = p
                        .data()
                        .iter()
                        .zip(m.data())
                        .zip(&through_m)
                        .map(|((&pv, &mv), &tm)| {
                            let direct = if pv > 0.0 {
                                pv.ln() + 1.0 - mv.ln()
                            } else {
                                0.0
                            };
                            scale * (direct + tm)
                        })
                        .collect();
                    Tensor::from_vec(p.shape(), data)
                })
            })
            .collect()
    }
}

/// Consistency loss as a graph op. With `detach` the consensus is treated
/// as a constant target.
pub fn jsd(g: &mut Graph, preds: &[Var], detach: bool) -> Result<Var> {
    {
        let vals: Vec<&Tensor> = preds.iter().map(|&v| g.value(v)).collect();
        check_set(&vals)?;
    }
    Ok(g.custom(Box::new(Jsd { detach }), preds))
}

/// Result of the unlabeled-batch forward pass shared by the consistency and
/// adversarial terms.
pub struct ConsistencyOutput {
    /// Batch mean of the per-item consistency losses.
    pub loss: Var,
    /// Consensus of each item's final-stage predictions.
    pub consensus: Vec<Var>,
    /// Per item, one output per combination in sorted combination order.
    pub views: Vec<Vec<StageOutputs>>,
}

/// Hetero forward over every item's sampled combinations, then the batch
/// mean of the per-item consistency losses. Items with a single view add 0.
pub fn cons_loss_batch(
    g: &mut Graph,
    p: &Binder,
    cfg: &BackboneConfig,
    items: &[HeteroRequest],
    detach: bool,
) -> Result<ConsistencyOutput> {
    if items.is_empty() {
        return Err(Error::Contract("consistency loss needs a non-empty batch".into()));
    }
    if items.iter().any(|r| r.combos.is_empty()) {
        return Err(Error::Contract("every unlabeled item needs at least one combination".into()));
    }
    // canonical combo order makes the loss independent of sampling order
    let sorted: Vec<HeteroRequest> = items
        .iter()
        .map(|r| {
            let mut combos = r.combos.clone();
            combos.sort();
            HeteroRequest {
                images: r.images.clone(),
                combos,
            }
        })
        .collect();
    let views = hetero_forward_batch(g, p, cfg, &sorted)?;
    let zero = g.input(Tensor::scalar(0.0));
    let weight = 1.0 / items.len() as f64;
    let mut terms = Vec::with_capacity(items.len());
    let mut cons = Vec::with_capacity(items.len());
    for outs in &views {
        let finals: Vec<Var> = outs.iter().map(StageOutputs::final_probs).collect();
        if finals.len() == 1 {
            terms.push((zero, weight));
            cons.push(finals[0]);
        } else {
            terms.push((jsd(g, &finals, detach)?, weight));
            cons.push(g.mean_list(&finals));
        }
    }
    let loss = g.lin(&terms);
    Ok(ConsistencyOutput {
        loss,
        consensus: cons,
        views,
    })
}
