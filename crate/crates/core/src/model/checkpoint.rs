//! Line-oriented text checkpoint of an [`AdaptiveModel`].
//!
//! ```text
//! dess-model v1
//! ladder <s_0> ... <s_n>
//! config <key>=<value> ...
//! chain <user|item> <k> w <values>     # W_{k,k+1}, row-major
//! chain <user|item> <k> b <values>
//! head <w1|w2|b2|mf_scale|mf_bias> <values>
//! bn <user|item|cat|hidden> <mean|var> <values>
//! emb <user|item> <id> <rung> <values>
//! ```
//!
//! Optimizer moments are not stored; a restored model restarts Adam.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{AdaptiveModel, Head, ModelConfig, SizeLadder, Task, NUM_CLASSES};
use crate::error::{DessError, Result};
use crate::harness::Side;

fn bad(msg: impl Into<String>) -> DessError {
    DessError::Checkpoint(msg.into())
}

fn values(out: &mut String, v: &[f64]) {
    for x in v {
        let _ = write!(out, " {x}");
    }
    out.push('\n');
}

fn parse_values(tokens: &[&str]) -> Result<Vec<f64>> {
    tokens.iter().map(|t| t.parse::<f64>().map_err(|e| bad(format!("{t}: {e}")))).collect()
}

impl AdaptiveModel {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::from("dess-model v1\nladder");
        for s in self.ladder.sizes() {
            let _ = write!(out, " {s}");
        }
        let _ = writeln!(
            out,
            "\nconfig head={} task={} hidden={} eta={} l2={} batch={} eps_bn={} bn_momentum={} normalize={} cold_init={} chain_noise={} seed={}",
            c.head, c.task, c.hidden, c.eta, c.l2, c.batch, c.eps_bn, c.bn_momentum, c.normalize, c.cold_init, c.chain_noise, c.seed
        );
        for side in [Side::User, Side::Item] {
            for k in 0..self.ladder.top_rung() {
                let (w, b) = self.transform(side, k);
                let _ = write!(out, "chain {side} {k} w");
                values(&mut out, w);
                let _ = write!(out, "chain {side} {k} b");
                values(&mut out, b);
            }
        }
        let top = self.ladder.top_size();
        let outs = c.task.outputs();
        let l = &self.layout;
        let mut head = |name: &str, at: usize, n: usize| {
            let _ = write!(out, "head {name}");
            values(&mut out, &self.dense[at..at + n]);
        };
        match c.head {
            Head::Mlp => {
                head("w1", l.w1, c.hidden * 2 * top);
                head("w2", l.w2, outs * c.hidden);
                head("b2", l.b2, outs);
            }
            Head::Mf if c.task == Task::Multiclass => {
                head("mf_scale", l.mf_scale, NUM_CLASSES);
                head("mf_bias", l.mf_bias, NUM_CLASSES);
            }
            Head::Mf => {}
        }
        let stats = [
            ("user", &self.side_stats[0]),
            ("item", &self.side_stats[1]),
            ("cat", &self.cat_stats),
            ("hidden", &self.hidden_stats),
        ];
        for (name, s) in stats {
            let _ = write!(out, "bn {name} mean");
            values(&mut out, &s.mean);
            let _ = write!(out, "bn {name} var");
            values(&mut out, &s.var);
        }
        for side in [Side::User, Side::Item] {
            for id in self.ids(side) {
                let e = &self.tables[side.index()][&id];
                let _ = write!(out, "emb {side} {id} {}", e.rung);
                values(&mut out, &e.vec);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next() != Some("dess-model v1") {
            return Err(bad("missing header"));
        }
        let ladder_line = lines.next().ok_or_else(|| bad("missing ladder"))?;
        let sizes = ladder_line
            .strip_prefix("ladder")
            .ok_or_else(|| bad("missing ladder"))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| bad(format!("ladder: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let ladder = SizeLadder::new(sizes)?;

        let config_line = lines.next().and_then(|l| l.strip_prefix("config")).ok_or_else(|| bad("missing config"))?;
        let kv: HashMap<&str, &str> = config_line.split_whitespace().filter_map(|t| t.split_once('=')).collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("config key {k} missing")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("config {k}"))) };
        let flag = |k: &str| -> Result<bool> { get(k)?.parse().map_err(|_| bad(format!("config {k}"))) };
        let config = ModelConfig {
            head: get("head")?.parse()?,
            task: get("task")?.parse()?,
            hidden: num("hidden")? as usize,
            eta: num("eta")?,
            l2: num("l2")?,
            batch: num("batch")? as usize,
            eps_bn: num("eps_bn")?,
            bn_momentum: num("bn_momentum")?,
            normalize: flag("normalize")?,
            cold_init: flag("cold_init")?,
            chain_noise: num("chain_noise")?,
            seed: get("seed")?.parse().map_err(|_| bad("config seed"))?,
        };
        let mut model = AdaptiveModel::new(config, ladder)?;

        for line in lines {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.as_slice() {
                ["chain", side, k, part, rest @ ..] => {
                    let side: Side = side.parse()?;
                    let k: usize = k.parse().map_err(|_| bad("chain index"))?;
                    let &(w, b) = model.layout.chain[side.index()].get(k).ok_or_else(|| bad("chain index"))?;
                    let at = if *part == "w" { w } else { b };
                    copy_into(&mut model.dense, at, &parse_values(rest)?)?;
                }
                ["head", name, rest @ ..] => {
                    let l = &model.layout;
                    let at = match *name {
                        "w1" => l.w1,
                        "w2" => l.w2,
                        "b2" => l.b2,
                        "mf_scale" => l.mf_scale,
                        "mf_bias" => l.mf_bias,
                        other => return Err(bad(format!("unknown head block {other}"))),
                    };
                    copy_into(&mut model.dense, at, &parse_values(rest)?)?;
                }
                ["bn", name, which, rest @ ..] => {
                    let stats = match *name {
                        "user" => &mut model.side_stats[0],
                        "item" => &mut model.side_stats[1],
                        "cat" => &mut model.cat_stats,
                        "hidden" => &mut model.hidden_stats,
                        other => return Err(bad(format!("unknown bn layer {other}"))),
                    };
                    let target = if *which == "mean" { &mut stats.mean } else { &mut stats.var };
                    let v = parse_values(rest)?;
                    if v.len() != target.len() {
                        return Err(bad(format!("bn {name}: wrong length")));
                    }
                    *target = v;
                }
                ["emb", side, id, rung, rest @ ..] => {
                    let side: Side = side.parse()?;
                    let id: u64 = id.parse().map_err(|_| bad("emb id"))?;
                    let rung: usize = rung.parse().map_err(|_| bad("emb rung"))?;
                    let v = parse_values(rest)?;
                    model.set_embedding(side, id, rung, v)?;
                }
                _ => return Err(bad(format!("unrecognized line: {line}"))),
            }
        }
        Ok(model)
    }
}

fn copy_into(dense: &mut [f64], at: usize, v: &[f64]) -> Result<()> {
    let slot = dense.get_mut(at..at + v.len()).ok_or_else(|| bad("block overruns parameters"))?;
    slot.copy_from_slice(v);
    Ok(())
}
