//! `--codec` values for `simulate`:
//! `none`, `cq:<c>c<b>b[:uniform|:fisher]`, `int:<bits>[:channel|:token][:gs<N>]`.

use std::str::FromStr;

use cqkv::baselines::{Axis, UniformQuantConfig};
use cqkv::{Coupling, Error, LearningMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodecArg {
    None,
    Cq(Coupling, LearningMode),
    Int(UniformQuantConfig),
}

impl FromStr for CodecArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = |why: &str| Error::InvalidConfig(format!("codec `{s}`: {why}"));
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let rest: Vec<&str> = parts.collect();
        match kind {
            "none" if rest.is_empty() => Ok(CodecArg::None),
            "none" => Err(bad("takes no options")),
            "cq" => {
                let (notation, opts) = rest.split_first().ok_or_else(|| bad("missing <c>c<b>b"))?;
                if notation.starts_with("CQ-") {
                    return Err(bad("write the coupling as <c>c<b>b"));
                }
                let coupling: Coupling = notation.parse()?;
                let mode = match opts {
                    [] | ["uniform"] => LearningMode::Uniform,
                    ["fisher"] => LearningMode::Fisher,
                    _ => return Err(bad("expected :uniform or :fisher")),
                };
                Ok(CodecArg::Cq(coupling, mode))
            }
            "int" => {
                let (bits, opts) = rest.split_first().ok_or_else(|| bad("missing bit width"))?;
                let bits: u8 = bits.parse().map_err(|_| bad("bit width must be 1..=8"))?;
                if !(1..=8).contains(&bits) {
                    return Err(bad("bit width must be 1..=8"));
                }
                let mut cfg = UniformQuantConfig::new(bits, Axis::PerChannel);
                for opt in opts {
                    match *opt {
                        "channel" => cfg.axis = Axis::PerChannel,
                        "token" => cfg.axis = Axis::PerToken,
                        gs if gs.starts_with("gs") => {
                            let n: usize = gs[2..]
                                .parse()
                                .map_err(|_| bad("group size must be a count"))?;
                            cfg = cfg.group_size(n);
                        }
                        _ => return Err(bad("unknown option")),
                    }
                }
                Ok(CodecArg::Int(cfg))
            }
            _ => Err(bad("expected none, cq:... or int:...")),
        }
    }
}
