use std::fmt::Write;

use super::{Cfg, Region, RegionKind};

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT text with one node per block, in block order, and region colouring.
pub fn export_dot(c: &Cfg, regions: &[Region]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", escape(&c.name()));
    let _ = writeln!(out, "  node [shape=box, fontname=monospace];");
    for b in &c.blocks {
        let mut label = format!("B{}", b.id);
        if !b.labels.is_empty() {
            let ls: Vec<String> = b.labels.iter().map(u32::to_string).collect();
            let _ = write!(label, " [L{}]", ls.join(",L"));
        }
        for i in b.range() {
            let ins = c.ins(i);
            if !ins.is("label") {
                let _ = write!(label, "\\l{}", escape(&ins.to_string()));
            }
        }
        label.push_str("\\l");
        let fill = regions
            .iter()
            .filter(|r| r.blocks.contains(&b.id))
            .map(|r| match r.kind {
                RegionKind::Receive => "lightblue",
                RegionKind::Try => "lightpink",
                RegionKind::Catch => "lightyellow",
            })
            .next();
        let style = match fill {
            Some(color) => format!(", style=filled, fillcolor={color}"),
            None => String::new(),
        };
        let entry = if b.id == c.entry { ", penwidth=2" } else { "" };
        let _ = writeln!(out, "  b{} [label=\"{}\"{}{}];", b.id, label, style, entry);
    }
    let mut edges = c.edges.clone();
    edges.sort_by_key(|e| (e.from, e.to, e.kind));
    for e in edges {
        let _ = writeln!(out, "  b{} -> b{} [label=\"{}\"];", e.from, e.to, e.kind.name());
    }
    out.push_str("}\n");
    out
}
