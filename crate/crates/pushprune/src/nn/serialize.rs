//! Version-tagged textual serialization of [`NetworkSpec`].
//!
//! Line-oriented: one layer per line as `<kind> id=<id> key=value ...`,
//! wrapped in `begin <section>` / `end <section>` blocks for stem, stages,
//! modules, branches, transitions, head and aux heads. Layer ids are
//! written explicitly so a round trip is exact.

use super::{AuxHeadSpec, LayerKind, LayerSpec, ModuleSpec, NetworkSpec, StageSpec};
use crate::error::{Error, Result};

const HEADER: &str = "pushprune-netspec v1";

fn kind_line(layer: &LayerSpec) -> String {
    let id = &layer.id;
    match &layer.kind {
        LayerKind::Fc { in_dim, out_dim } => format!("fc id={id} in={in_dim} out={out_dim}"),
        LayerKind::Decision { in_dim, classes } => {
            format!("decision id={id} in={in_dim} classes={classes}")
        }
        LayerKind::Conv { in_ch, out_ch, kh, kw, stride, pad } => format!(
            "conv id={id} in={in_ch} out={out_ch} k={kh}x{kw} stride={stride} pad={pad}"
        ),
        LayerKind::Relu => format!("relu id={id}"),
        LayerKind::MaxPool { k, stride, pad } => {
            format!("maxpool id={id} k={k} stride={stride} pad={pad}")
        }
        LayerKind::AvgPool { k, stride, pad } => {
            format!("avgpool id={id} k={k} stride={stride} pad={pad}")
        }
        LayerKind::BatchNorm { ch } => format!("batchnorm id={id} ch={ch}"),
        LayerKind::Concat => format!("concat id={id}"),
    }
}

pub fn write_netspec(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    let dims: Vec<String> = spec.input_shape.iter().map(|d| d.to_string()).collect();
    out.push_str(&format!("input {}\n", dims.join("x")));

    if !spec.stem.is_empty() {
        out.push_str("begin stem\n");
        for l in &spec.stem {
            out.push_str(&kind_line(l));
            out.push('\n');
        }
        out.push_str("end stem\n");
    }
    for stage in &spec.stages {
        out.push_str("begin stage\n");
        for module in &stage.modules {
            out.push_str("begin module\n");
            match module {
                ModuleSpec::Chain(layers) => {
                    for l in layers {
                        out.push_str(&kind_line(l));
                        out.push('\n');
                    }
                }
                ModuleSpec::Branched { branches, concat } => {
                    for branch in branches {
                        out.push_str("begin branch\n");
                        for l in branch {
                            out.push_str(&kind_line(l));
                            out.push('\n');
                        }
                        out.push_str("end branch\n");
                    }
                    out.push_str(&kind_line(concat));
                    out.push('\n');
                }
            }
            out.push_str("end module\n");
        }
        if !stage.transition.is_empty() {
            out.push_str("begin transition\n");
            for l in &stage.transition {
                out.push_str(&kind_line(l));
                out.push('\n');
            }
            out.push_str("end transition\n");
        }
        out.push_str("end stage\n");
    }
    if !spec.head.is_empty() {
        out.push_str("begin head\n");
        for l in &spec.head {
            out.push_str(&kind_line(l));
            out.push('\n');
        }
        out.push_str("end head\n");
    }
    for aux in &spec.aux_heads {
        out.push_str(&format!(
            "begin aux stage={} module={} weight={}\n",
            aux.stage, aux.module, aux.loss_weight
        ));
        for l in &aux.layers {
            out.push_str(&kind_line(l));
            out.push('\n');
        }
        out.push_str(&kind_line(&aux.decision));
        out.push('\n');
        out.push_str("end aux\n");
    }
    out.push_str(&kind_line(&spec.decision));
    out.push('\n');
    out
}

struct LineParser<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    peeked: Option<(usize, &'a str)>,
}

impl<'a> LineParser<'a> {
    fn new(text: &'a str) -> Self {
        Self { lines: text.lines().enumerate(), peeked: None }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        if let Some(p) = self.peeked.take() {
            return Some(p);
        }
        for (i, raw) in self.lines.by_ref() {
            let line = raw.trim();
            if !line.is_empty() && !line.starts_with('#') {
                return Some((i + 1, line));
            }
        }
        None
    }

    fn peek(&mut self) -> Option<(usize, &'a str)> {
        if self.peeked.is_none() {
            self.peeked = self.next();
        }
        self.peeked
    }
}

fn perr(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset: line as u64, message: message.into() }
}

fn parse_kv(tokens: &[&str], line: usize) -> Result<std::collections::HashMap<String, String>> {
    let mut map = std::collections::HashMap::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| perr(line, format!("expected key=value, got '{tok}'")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn get_usize(map: &std::collections::HashMap<String, String>, key: &str, line: usize) -> Result<usize> {
    map.get(key)
        .ok_or_else(|| perr(line, format!("missing {key}=")))?
        .parse()
        .map_err(|_| perr(line, format!("{key} is not a number")))
}

fn parse_layer(line_no: usize, line: &str) -> Result<LayerSpec> {
    let mut tokens = line.split_whitespace();
    let kind_tok = tokens.next().ok_or_else(|| perr(line_no, "empty layer line"))?;
    let rest: Vec<&str> = tokens.collect();
    let map = parse_kv(&rest, line_no)?;
    let id = map
        .get("id")
        .ok_or_else(|| perr(line_no, "missing id="))?
        .clone();
    let kind = match kind_tok {
        "fc" => LayerKind::Fc {
            in_dim: get_usize(&map, "in", line_no)?,
            out_dim: get_usize(&map, "out", line_no)?,
        },
        "decision" => LayerKind::Decision {
            in_dim: get_usize(&map, "in", line_no)?,
            classes: get_usize(&map, "classes", line_no)?,
        },
        "conv" => {
            let kspec = map.get("k").ok_or_else(|| perr(line_no, "missing k="))?;
            let (kh, kw) = kspec
                .split_once('x')
                .ok_or_else(|| perr(line_no, "k must be KHxKW"))?;
            LayerKind::Conv {
                in_ch: get_usize(&map, "in", line_no)?,
                out_ch: get_usize(&map, "out", line_no)?,
                kh: kh.parse().map_err(|_| perr(line_no, "bad kernel height"))?,
                kw: kw.parse().map_err(|_| perr(line_no, "bad kernel width"))?,
                stride: get_usize(&map, "stride", line_no)?,
                pad: get_usize(&map, "pad", line_no)?,
            }
        }
        "relu" => LayerKind::Relu,
        "maxpool" => LayerKind::MaxPool {
            k: get_usize(&map, "k", line_no)?,
            stride: get_usize(&map, "stride", line_no)?,
            pad: get_usize(&map, "pad", line_no)?,
        },
        "avgpool" => LayerKind::AvgPool {
            k: get_usize(&map, "k", line_no)?,
            stride: get_usize(&map, "stride", line_no)?,
            pad: get_usize(&map, "pad", line_no)?,
        },
        "batchnorm" => LayerKind::BatchNorm { ch: get_usize(&map, "ch", line_no)? },
        "concat" => LayerKind::Concat,
        other => return Err(perr(line_no, format!("unknown layer kind '{other}'"))),
    };
    Ok(LayerSpec { id, kind })
}

fn parse_layers_until(parser: &mut LineParser, terminator: &str) -> Result<Vec<LayerSpec>> {
    let mut layers = Vec::new();
    loop {
        let (no, line) = parser
            .next()
            .ok_or_else(|| perr(0, format!("unexpected end of file, wanted '{terminator}'")))?;
        if line == terminator {
            return Ok(layers);
        }
        layers.push(parse_layer(no, line)?);
    }
}

pub fn parse_netspec(text: &str) -> Result<NetworkSpec> {
    let mut parser = LineParser::new(text);
    let (no, header) = parser.next().ok_or_else(|| perr(0, "empty spec file"))?;
    if header != HEADER {
        return Err(perr(no, format!("expected header '{HEADER}', got '{header}'")));
    }
    let (no, input_line) = parser.next().ok_or_else(|| perr(no, "missing input line"))?;
    let input_shape: Vec<usize> = input_line
        .strip_prefix("input ")
        .ok_or_else(|| perr(no, "expected 'input <dims>'"))?
        .split('x')
        .map(|d| d.trim().parse::<usize>().map_err(|_| perr(no, "bad input dims")))
        .collect::<Result<_>>()?;

    let mut spec = NetworkSpec {
        input_shape,
        stem: Vec::new(),
        stages: Vec::new(),
        head: Vec::new(),
        decision: LayerSpec::new("decision", LayerKind::Decision { in_dim: 0, classes: 0 }),
        aux_heads: Vec::new(),
    };
    let mut have_decision = false;

    while let Some((no, line)) = parser.next() {
        if line == "begin stem" {
            spec.stem = parse_layers_until(&mut parser, "end stem")?;
        } else if line == "begin stage" {
            let mut stage = StageSpec::default();
            loop {
                let (sno, sline) = parser
                    .peek()
                    .ok_or_else(|| perr(no, "unterminated stage"))?;
                if sline == "end stage" {
                    parser.next();
                    break;
                } else if sline == "begin module" {
                    parser.next();
                    // distinguish chain vs branched by the first line
                    let mut branches: Vec<Vec<LayerSpec>> = Vec::new();
                    let mut chain: Vec<LayerSpec> = Vec::new();
                    let mut concat: Option<LayerSpec> = None;
                    loop {
                        let (mno, mline) = parser
                            .next()
                            .ok_or_else(|| perr(sno, "unterminated module"))?;
                        if mline == "end module" {
                            break;
                        } else if mline == "begin branch" {
                            branches.push(parse_layers_until(&mut parser, "end branch")?);
                        } else if mline.starts_with("concat ") {
                            concat = Some(parse_layer(mno, mline)?);
                        } else {
                            chain.push(parse_layer(mno, mline)?);
                        }
                    }
                    if !branches.is_empty() {
                        let concat = concat
                            .ok_or_else(|| perr(sno, "branched module missing concat line"))?;
                        stage.modules.push(ModuleSpec::Branched { branches, concat });
                    } else {
                        stage.modules.push(ModuleSpec::Chain(chain));
                    }
                } else if sline == "begin transition" {
                    parser.next();
                    stage.transition = parse_layers_until(&mut parser, "end transition")?;
                } else {
                    return Err(perr(sno, format!("unexpected line in stage: '{sline}'")));
                }
            }
            spec.stages.push(stage);
        } else if line == "begin head" {
            spec.head = parse_layers_until(&mut parser, "end head")?;
        } else if let Some(rest) = line.strip_prefix("begin aux ") {
            let tokens: Vec<&str> = rest.split_whitespace().collect();
            let map = parse_kv(&tokens, no)?;
            let stage = get_usize(&map, "stage", no)?;
            let module = get_usize(&map, "module", no)?;
            let weight: f64 = map
                .get("weight")
                .ok_or_else(|| perr(no, "missing weight="))?
                .parse()
                .map_err(|_| perr(no, "bad aux weight"))?;
            let mut layers = parse_layers_until(&mut parser, "end aux")?;
            let decision = layers
                .pop()
                .ok_or_else(|| perr(no, "aux head needs at least a decision layer"))?;
            if !matches!(decision.kind, LayerKind::Decision { .. }) {
                return Err(perr(no, "last aux layer must be a decision layer"));
            }
            spec.aux_heads.push(AuxHeadSpec { stage, module, layers, decision, loss_weight: weight });
        } else if line.starts_with("decision ") {
            spec.decision = parse_layer(no, line)?;
            have_decision = true;
        } else {
            return Err(perr(no, format!("unexpected line: '{line}'")));
        }
    }
    if !have_decision {
        return Err(perr(0, "spec has no decision layer"));
    }
    Ok(spec)
}
