//! Mapping between in-memory training state and checkpoint entries.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CheckpointError, Result};
use crate::model::{EraseNet, Variant};
use crate::tensor::Tensor;
use crate::train::checkpoint::{Checkpoint, Entry};
use crate::train::optim::{AdamState, PlateauState};

const WIDTH_SCALE: &str = "meta.width_scale";

fn stat_names(bn: &str) -> [String; 3] {
    [
        format!("{bn}.running_mean"),
        format!("{bn}.running_var"),
        format!("{bn}.updates"),
    ]
}

/// Parameters, running statistics and the width multiplier.
pub fn model_entries(net: &EraseNet<f32>) -> Vec<Entry> {
    let mut out = vec![Entry::f64s(WIDTH_SCALE, &[net.width_scale()])];
    for p in net.params().iter() {
        out.push(Entry::floats(p.name.clone(), p.dims(), p.value.data()));
    }
    for slot in net.norms() {
        let [mean, var, updates] = stat_names(&slot.name);
        let c = slot.state.channels();
        out.push(Entry::floats(mean, vec![c], &slot.state.running_mean));
        out.push(Entry::floats(var, vec![c], &slot.state.running_var));
        out.push(Entry::u64s(updates, &[slot.state.updates]));
    }
    out
}

/// Checkpoint holding only a model.
pub fn model_checkpoint(net: &EraseNet<f32>) -> Checkpoint {
    let variant = net.variant().expect("only named variants are checkpointed");
    Checkpoint {
        variant,
        entries: model_entries(net),
    }
}

fn shape_check(e: &Entry, expected: &[usize]) -> std::result::Result<(), CheckpointError> {
    if e.dims != expected {
        return Err(CheckpointError::ParameterShape {
            name: e.name.clone(),
            expected: expected.to_vec(),
            found: e.dims.clone(),
        });
    }
    Ok(())
}

fn one_u64(e: &Entry) -> std::result::Result<u64, CheckpointError> {
    match e.as_u64()?.as_slice() {
        [v] => Ok(*v),
        _ => Err(CheckpointError::Malformed(format!(
            "`{}` should hold one integer",
            e.name
        ))),
    }
}

/// Rebuilds the model stored in `ckpt`. With `expected` set, a checkpoint
/// of the other variant is refused. Entries that belong to neither the
/// model nor the optimizer/run state are rejected as unknown.
pub fn restore_model(ckpt: &Checkpoint, expected: Option<Variant>) -> Result<EraseNet<f32>> {
    if let Some(v) = expected {
        if v != ckpt.variant {
            return Err(CheckpointError::VariantMismatch {
                expected: v.tag(),
                found: ckpt.variant.tag(),
            }
            .into());
        }
    }
    let width = match ckpt.require(WIDTH_SCALE)?.as_f64()?.as_slice() {
        [w] if w.is_finite() && *w > 0.0 => *w,
        _ => return Err(CheckpointError::Malformed(format!("`{WIDTH_SCALE}`")).into()),
    };
    let mut net = EraseNet::<f32>::new(ckpt.variant, width, 0)?;
    let mut known: HashSet<String> = HashSet::from([WIDTH_SCALE.to_owned()]);
    for id in 0..net.params().len() {
        let p = net.params().get(id);
        let e = ckpt.require(&p.name)?;
        shape_check(e, &p.dims())?;
        known.insert(p.name.clone());
        let t = Tensor::new(p.value.shape(), e.as_f32())?;
        net.params_mut().set(id, t);
    }
    for slot in net.norms_mut() {
        let names = stat_names(&slot.name);
        let c = slot.state.channels();
        let mean = ckpt.require(&names[0])?;
        let var = ckpt.require(&names[1])?;
        shape_check(mean, &[c])?;
        shape_check(var, &[c])?;
        slot.state.running_mean = mean.as_f32();
        slot.state.running_var = var.as_f32();
        slot.state.updates = one_u64(ckpt.require(&names[2])?)?;
        known.extend(names);
    }
    let run_state = |n: &str| {
        ["adam.", "plateau.", "train."]
            .iter()
            .any(|p| n.starts_with(p))
    };
    if let Some(e) = ckpt
        .entries
        .iter()
        .find(|e| !known.contains(&e.name) && !run_state(&e.name))
    {
        return Err(CheckpointError::UnknownParameter(e.name.clone()).into());
    }
    Ok(net)
}

pub fn adam_entries(adam: &AdamState<f32>, net: &EraseNet<f32>) -> Vec<Entry> {
    let mut out = vec![
        Entry::f64s(
            "adam.hyper",
            &[adam.lr, adam.beta1, adam.beta2, adam.epsilon],
        ),
        Entry::u64s("adam.t", &[adam.t]),
    ];
    for (i, p) in net.params().iter().enumerate() {
        out.push(Entry::floats(
            format!("adam.m/{}", p.name),
            p.dims(),
            adam.m[i].data(),
        ));
        out.push(Entry::floats(
            format!("adam.v/{}", p.name),
            p.dims(),
            adam.v[i].data(),
        ));
    }
    out
}

pub fn restore_adam(ckpt: &Checkpoint, net: &EraseNet<f32>) -> Result<AdamState<f32>> {
    let hyper = ckpt.require("adam.hyper")?.as_f64()?;
    let [lr, beta1, beta2, epsilon] = hyper[..] else {
        return Err(CheckpointError::Malformed("`adam.hyper`".into()).into());
    };
    let mut adam = AdamState::new(net.params(), lr);
    adam.beta1 = beta1;
    adam.beta2 = beta2;
    adam.epsilon = epsilon;
    adam.t = one_u64(ckpt.require("adam.t")?)?;
    for (i, p) in net.params().iter().enumerate() {
        for (slot, key) in [(&mut adam.m, "m"), (&mut adam.v, "v")] {
            let e = ckpt.require(&format!("adam.{key}/{}", p.name))?;
            shape_check(e, &p.dims())?;
            slot[i] = Tensor::new(p.value.shape(), e.as_f32())?;
        }
    }
    Ok(adam)
}

pub fn plateau_entries(p: &PlateauState) -> Vec<Entry> {
    vec![
        Entry::f64s("plateau.values", &[p.best, p.factor, p.min_lr, p.threshold]),
        Entry::u64s("plateau.counts", &[p.num_bad as u64, p.patience as u64]),
    ]
}

pub fn restore_plateau(ckpt: &Checkpoint) -> Result<PlateauState> {
    let v = ckpt.require("plateau.values")?.as_f64()?;
    let c = ckpt.require("plateau.counts")?.as_u64()?;
    match (&v[..], &c[..]) {
        (&[best, factor, min_lr, threshold], &[num_bad, patience]) => Ok(PlateauState {
            best,
            num_bad: num_bad as usize,
            patience: patience as usize,
            factor,
            min_lr,
            threshold,
        }),
        _ => Err(CheckpointError::Malformed("plateau state".into()).into()),
    }
}

/// Seed, stream and word position of the generator.
pub fn rng_entries(rng: &ChaCha8Rng) -> Vec<Entry> {
    let seed = rng.get_seed();
    let words: Vec<u32> = seed
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let pos = rng.get_word_pos();
    vec![
        Entry {
            name: "train.rng_seed".into(),
            dims: vec![8],
            words,
        },
        Entry::u64s("train.rng_stream", &[rng.get_stream()]),
        Entry::u64s("train.rng_pos", &[pos as u64, (pos >> 64) as u64]),
    ]
}

pub fn restore_rng(ckpt: &Checkpoint) -> Result<ChaCha8Rng> {
    let seed_e = ckpt.require("train.rng_seed")?;
    if seed_e.words.len() != 8 {
        return Err(CheckpointError::Malformed("`train.rng_seed`".into()).into());
    }
    let mut seed = [0u8; 32];
    for (dst, w) in seed.chunks_exact_mut(4).zip(&seed_e.words) {
        dst.copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(one_u64(ckpt.require("train.rng_stream")?)?);
    match ckpt.require("train.rng_pos")?.as_u64()?[..] {
        [lo, hi] => rng.set_word_pos(lo as u128 | (hi as u128) << 64),
        _ => return Err(CheckpointError::Malformed("`train.rng_pos`".into()).into()),
    }
    Ok(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn rng_resumes_mid_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(3);
        for _ in 0..13 {
            rng.next_u32();
        }
        let ckpt = Checkpoint {
            variant: Variant::EraseNet3,
            entries: rng_entries(&rng),
        };
        let mut back = restore_rng(&ckpt).unwrap();
        for _ in 0..100 {
            assert_eq!(back.next_u64(), rng.next_u64());
        }
    }

    #[test]
    fn model_round_trip_and_guards() {
        let mut net = EraseNet::<f32>::new(Variant::EraseNet3, 0.0625, 4).unwrap();
        net.norms_mut()[2].state.updates = 9;
        net.norms_mut()[2].state.running_var[0] = 0.25;
        let ckpt = model_checkpoint(&net);
        let back = restore_model(&ckpt, Some(Variant::EraseNet3)).unwrap();
        assert_eq!(model_entries(&back), model_entries(&net));

        let err = restore_model(&ckpt, Some(Variant::EraseNet4)).unwrap_err();
        assert!(matches!(
            err,
            crate::Error::Checkpoint(CheckpointError::VariantMismatch {
                expected: 4,
                found: 3
            })
        ));

        let mut extra = ckpt.clone();
        extra
            .entries
            .push(Entry::floats("enc.block1.conv9.kernel", vec![1], &[0.0]));
        assert!(matches!(
            restore_model(&extra, None),
            Err(crate::Error::Checkpoint(CheckpointError::UnknownParameter(
                _
            )))
        ));

        let mut missing = ckpt.clone();
        missing.entries.retain(|e| e.name != "head.conv.bias");
        assert!(matches!(
            restore_model(&missing, None),
            Err(crate::Error::Checkpoint(CheckpointError::MissingParameter(
                _
            )))
        ));
    }
}
