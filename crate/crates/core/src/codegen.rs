//! Control software emission: ctrlRegion/ctrlLaw as a shared binary
//! decision tree in C, and a flat lookup table blob.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::quantize::Quantization;
use crate::synth::Controller;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodegenError {
    #[error("controller has an empty domain")]
    EmptyController,
    #[error("controller has {0} states, quantization has {1}")]
    Mismatch(usize, usize),
    #[error("action encoding: {0}")]
    Encoding(String),
    #[error("table format: {0}")]
    Format(String),
    #[error("C source: {0}")]
    Source(String),
}

/// Controller plus the integer command emitted for each abstract action.
#[derive(Debug, Clone)]
pub struct CodegenSpec<'a> {
    pub controller: &'a Controller,
    pub quantization: &'a Quantization,
    pub commands: Vec<i32>,
    pub fault: i32,
}

impl<'a> CodegenSpec<'a> {
    pub fn new(controller: &'a Controller, quantization: &'a Quantization, commands: Vec<i32>, fault: i32) -> Result<Self, CodegenError> {
        if controller.num_states() != quantization.num_states() {
            return Err(CodegenError::Mismatch(controller.num_states(), quantization.num_states()));
        }
        if commands.len() != controller.num_actions {
            return Err(CodegenError::Encoding(format!("{} commands for {} actions", commands.len(), controller.num_actions)));
        }
        let mut seen = commands.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != commands.len() {
            return Err(CodegenError::Encoding("commands are not distinct".into()));
        }
        if commands.contains(&fault) {
            return Err(CodegenError::Encoding(format!("fault value {fault} is also a command")));
        }
        Ok(CodegenSpec { controller, quantization, commands, fault })
    }

    /// Commands are the action indices, fault is -1.
    pub fn with_indices(controller: &'a Controller, quantization: &'a Quantization) -> Result<Self, CodegenError> {
        let n = controller.num_actions as i32;
        Self::new(controller, quantization, (0..n).collect(), -1)
    }

    /// Command issued in packed state `s`, or the fault value.
    pub fn command(&self, s: usize) -> i32 {
        self.controller.action(s).map_or(self.fault, |a| self.commands[a])
    }

    fn dims(&self) -> Vec<usize> {
        self.quantization.states.iter().map(|m| m.levels()).collect()
    }

    fn first_levels(&self) -> Vec<i64> {
        self.quantization.states.iter().map(|m| m.first_level()).collect()
    }
}

/// Decision DAG node reference: a leaf (command or fault) or an inner node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRef {
    Leaf(i32),
    Node(usize),
}

/// Inner node testing bit `shift` of the (offset) level of variable `var`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Branch {
    pub var: usize,
    pub shift: u32,
    pub zero: NodeRef,
    pub one: NodeRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionTree {
    pub nvars: usize,
    pub first: Vec<i64>,
    pub counts: Vec<usize>,
    pub nodes: Vec<Branch>,
    pub root: NodeRef,
    pub fault: i32,
}

impl DecisionTree {
    /// Builds the reduced, shared tree over variable-major MSB-first bits.
    pub fn build(spec: &CodegenSpec) -> Result<Self, CodegenError> {
        if spec.controller.dom_size() == 0 {
            return Err(CodegenError::EmptyController);
        }
        let q = spec.quantization;
        let bits: Vec<u32> = q.states.iter().map(|m| m.bits()).collect();
        let dims = spec.dims();
        let order: Vec<(usize, u32)> = bits.iter().enumerate().flat_map(|(v, &b)| (0..b).rev().map(move |k| (v, k))).collect();
        let total = order.len();
        // Leaves in bit-concatenation order; codes beyond a variable's count fault.
        let mut level = vec![NodeRef::Leaf(spec.fault); 1usize << total];
        for (code, slot) in level.iter_mut().enumerate() {
            let mut rest = code;
            let mut lv = vec![0usize; dims.len()];
            for v in (0..dims.len()).rev() {
                lv[v] = rest & ((1usize << bits[v]) - 1);
                rest >>= bits[v];
            }
            if lv.iter().zip(&dims).all(|(l, d)| l < d) {
                let s = lv.iter().zip(&dims).fold(0usize, |acc, (l, d)| acc * d + l);
                *slot = NodeRef::Leaf(spec.command(s));
            }
        }
        let mut nodes: Vec<Branch> = Vec::new();
        let mut unique: HashMap<Branch, usize> = HashMap::new();
        for &(var, shift) in order.iter().rev() {
            level = level
                .chunks(2)
                .map(|p| {
                    if p[0] == p[1] {
                        return p[0];
                    }
                    let b = Branch { var, shift, zero: p[0], one: p[1] };
                    let id = *unique.entry(b).or_insert_with(|| {
                        nodes.push(b);
                        nodes.len() - 1
                    });
                    NodeRef::Node(id)
                })
                .collect();
        }
        Ok(DecisionTree { nvars: dims.len(), first: spec.first_levels(), counts: dims, nodes, root: level[0], fault: spec.fault })
    }

    /// Longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        let mut memo = vec![0usize; self.nodes.len()];
        // Children always precede parents in `nodes`.
        for i in 0..self.nodes.len() {
            let d = |r: NodeRef| match r {
                NodeRef::Leaf(_) => 0,
                NodeRef::Node(j) => memo[j],
            };
            memo[i] = 1 + d(self.nodes[i].zero).max(d(self.nodes[i].one));
        }
        match self.root {
            NodeRef::Leaf(_) => 0,
            NodeRef::Node(j) => memo[j],
        }
    }

    /// Command for raw quantizer levels; fault when outside the level ranges.
    pub fn eval(&self, levels: &[i64]) -> i32 {
        if levels.len() != self.nvars {
            return self.fault;
        }
        let off: Vec<i64> = levels.iter().zip(&self.first).map(|(l, f)| l - f).collect();
        if off.iter().zip(&self.counts).any(|(o, c)| *o < 0 || *o >= *c as i64) {
            return self.fault;
        }
        let mut r = self.root;
        while let NodeRef::Node(i) = r {
            let b = &self.nodes[i];
            r = if off[b.var] >> b.shift & 1 == 1 { b.one } else { b.zero };
        }
        match r {
            NodeRef::Leaf(c) => c,
            NodeRef::Node(_) => unreachable!(),
        }
    }

    pub fn region(&self, levels: &[i64]) -> bool {
        self.eval(levels) != self.fault
    }
}

/// Emits ISO C99 with `ctrlRegion` and `ctrlLaw` over raw quantizer levels.
/// Child entries >= 0 are node indices; a leaf with command c is stored as
/// `QS_LEAF(c)`.
pub fn emit_c(spec: &CodegenSpec) -> Result<String, CodegenError> {
    let t = DecisionTree::build(spec)?;
    let n = t.nvars;
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(w, "/* Generated by qsynth. Quantized controller lookup. */");
    let _ = writeln!(w, "#define QS_NVARS {n}");
    let _ = writeln!(w, "#define QS_FAULT ({})", t.fault);
    let _ = writeln!(w, "#define QS_DEPTH {}", t.depth());
    let _ = writeln!(w, "#define QS_LEAF(c) (-(long long)(c) - 1099511627776LL)");
    let _ = writeln!(w);
    let join = |v: Vec<String>| if v.is_empty() { "0".to_string() } else { v.join(", ") };
    let _ = writeln!(w, "static const long long qs_first[QS_NVARS] = {{{}}};", join(t.first.iter().map(|x| format!("{x}LL")).collect()));
    let _ = writeln!(w, "static const long long qs_count[QS_NVARS] = {{{}}};", join(t.counts.iter().map(|x| format!("{x}LL")).collect()));
    let nn = t.nodes.len().max(1);
    let _ = writeln!(w, "static const unsigned char qs_var[{nn}] = {{{}}};", join(t.nodes.iter().map(|b| b.var.to_string()).collect()));
    let _ = writeln!(w, "static const unsigned char qs_shift[{nn}] = {{{}}};", join(t.nodes.iter().map(|b| b.shift.to_string()).collect()));
    let child = |r: NodeRef| match r {
        NodeRef::Node(i) => format!("{i}"),
        NodeRef::Leaf(c) => format!("QS_LEAF({c})"),
    };
    let _ = writeln!(w, "static const long long qs_child[{nn}][2] = {{");
    if t.nodes.is_empty() {
        let _ = writeln!(w, "    {{0, 0}}");
    }
    for (i, b) in t.nodes.iter().enumerate() {
        let sep = if i + 1 == t.nodes.len() { "" } else { "," };
        let _ = writeln!(w, "    {{{}, {}}}{sep}", child(b.zero), child(b.one));
    }
    let _ = writeln!(w, "}};");
    let _ = writeln!(w, "static const long long qs_root = {};", child(t.root));
    let _ = writeln!(w);
    let _ = writeln!(
        w,
        r#"static long long qs_lookup(const long long levels[QS_NVARS])
{{
    long long off[QS_NVARS];
    long long r = qs_root;
    int i;
    for (i = 0; i < QS_NVARS; i++) {{
        off[i] = levels[i] - qs_first[i];
        if (off[i] < 0 || off[i] >= qs_count[i]) {{
            return QS_FAULT;
        }}
    }}
    while (r >= 0) {{
        r = qs_child[r][(off[qs_var[r]] >> qs_shift[r]) & 1];
    }}
    return -r - 1099511627776LL;
}}

int ctrlRegion(const long long levels[QS_NVARS])
{{
    return qs_lookup(levels) != QS_FAULT;
}}

int ctrlLaw(const long long levels[QS_NVARS])
{{
    return (int)qs_lookup(levels);
}}"#
    );
    Ok(s)
}

/// Tables recovered from emitted C, evaluated the way the C code does.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CTables {
    pub first: Vec<i64>,
    pub count: Vec<i64>,
    pub var: Vec<usize>,
    pub shift: Vec<u32>,
    pub child: Vec<[i64; 2]>,
    pub root: i64,
    pub fault: i64,
    pub depth: usize,
}

fn array_body<'s>(src: &'s str, name: &str) -> Result<&'s str, CodegenError> {
    let at = src.find(&format!(" {name}[")).ok_or_else(|| CodegenError::Source(format!("missing `{name}`")))?;
    let rest = &src[at..];
    let open = rest.find("= {").ok_or_else(|| CodegenError::Source(format!("`{name}` has no initializer")))? + 3;
    let mut depth = 1;
    for (i, ch) in rest[open..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Ok(&rest[open..open + i]);
                }
            }
            _ => {}
        }
    }
    Err(CodegenError::Source(format!("unterminated `{name}`")))
}

fn define<'s>(src: &'s str, name: &str) -> Result<&'s str, CodegenError> {
    let key = format!("#define {name} ");
    let line = src.lines().find(|l| l.starts_with(&key)).ok_or_else(|| CodegenError::Source(format!("missing {name}")))?;
    Ok(line[key.len()..].trim())
}

fn c_value(tok: &str) -> Result<i64, CodegenError> {
    let tok = tok.trim().trim_matches(|c| c == '(' || c == ')');
    let bad = || CodegenError::Source(format!("bad value `{tok}`"));
    if let Some(inner) = tok.strip_prefix("QS_LEAF(") {
        let c: i64 = inner.trim_end_matches(')').trim().parse().map_err(|_| bad())?;
        return Ok(-c - (1 << 40));
    }
    tok.trim_end_matches("LL").parse().map_err(|_| bad())
}

fn c_list(body: &str) -> Result<Vec<i64>, CodegenError> {
    // QS_LEAF(...) holds no commas, so a plain split is enough once braces go.
    let flat: String = body.chars().filter(|&c| c != '{' && c != '}').collect();
    flat.split(',').filter(|t| !t.trim().is_empty()).map(c_value).collect()
}

impl CTables {
    pub fn parse(src: &str) -> Result<Self, CodegenError> {
        let fault = c_value(define(src, "QS_FAULT")?)?;
        let depth: usize = define(src, "QS_DEPTH")?.parse().map_err(|_| CodegenError::Source("bad QS_DEPTH".into()))?;
        let first = c_list(array_body(src, "qs_first")?)?;
        let count = c_list(array_body(src, "qs_count")?)?;
        let var: Vec<usize> = c_list(array_body(src, "qs_var")?)?.into_iter().map(|v| v as usize).collect();
        let shift: Vec<u32> = c_list(array_body(src, "qs_shift")?)?.into_iter().map(|v| v as u32).collect();
        let flat = c_list(array_body(src, "qs_child")?)?;
        if flat.len() % 2 != 0 {
            return Err(CodegenError::Source("odd child table".into()));
        }
        let child: Vec<[i64; 2]> = flat.chunks(2).map(|p| [p[0], p[1]]).collect();
        let root_line = src.lines().find(|l| l.contains("qs_root =")).ok_or_else(|| CodegenError::Source("missing qs_root".into()))?;
        let root = c_value(root_line.split('=').nth(1).unwrap_or("").trim_end_matches(';'))?;
        Ok(CTables { first, count, var, shift, child, root, fault, depth })
    }

    /// Mirrors `qs_lookup`; also returns the number of branches taken.
    pub fn lookup(&self, levels: &[i64]) -> (i64, usize) {
        let off: Vec<i64> = levels.iter().zip(&self.first).map(|(l, f)| l - f).collect();
        if off.len() != self.count.len() || off.iter().zip(&self.count).any(|(o, c)| *o < 0 || o >= c) {
            return (self.fault, 0);
        }
        let mut r = self.root;
        let mut steps = 0;
        while r >= 0 {
            let i = r as usize;
            r = self.child[i][((off[self.var[i]] >> self.shift[i]) & 1) as usize];
            steps += 1;
        }
        (-r - (1 << 40), steps)
    }

    pub fn ctrl_law(&self, levels: &[i64]) -> i64 {
        self.lookup(levels).0
    }

    pub fn ctrl_region(&self, levels: &[i64]) -> bool {
        self.lookup(levels).0 != self.fault
    }
}

const TABLE_MAGIC: &[u8; 8] = b"QSYNTBL\0";
const TABLE_VERSION: u32 = 1;

/// Flat command table indexed by packed abstract state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandTable {
    pub dims: Vec<usize>,
    pub first: Vec<i64>,
    pub fault: i32,
    pub entries: Vec<i32>,
}

impl CommandTable {
    pub fn from_spec(spec: &CodegenSpec) -> Self {
        CommandTable {
            dims: spec.dims(),
            first: spec.first_levels(),
            fault: spec.fault,
            entries: (0..spec.controller.num_states()).map(|s| spec.command(s)).collect(),
        }
    }

    pub fn lookup(&self, levels: &[i64]) -> i32 {
        if levels.len() != self.dims.len() {
            return self.fault;
        }
        let mut idx = 0usize;
        for ((l, f), d) in levels.iter().zip(&self.first).zip(&self.dims) {
            let o = l - f;
            if o < 0 || o >= *d as i64 {
                return self.fault;
            }
            idx = idx * d + o as usize;
        }
        self.entries[idx]
    }

    /// Magic, version, dimension count, per dimension (level count u64,
    /// first level i64), entry width in bytes, fault, entries; little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(32 + 16 * self.dims.len() + 4 * self.entries.len());
        v.extend_from_slice(TABLE_MAGIC);
        v.extend_from_slice(&TABLE_VERSION.to_le_bytes());
        v.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for (d, f) in self.dims.iter().zip(&self.first) {
            v.extend_from_slice(&(*d as u64).to_le_bytes());
            v.extend_from_slice(&f.to_le_bytes());
        }
        v.extend_from_slice(&4u32.to_le_bytes());
        v.extend_from_slice(&self.fault.to_le_bytes());
        for e in &self.entries {
            v.extend_from_slice(&e.to_le_bytes());
        }
        v
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, CodegenError> {
        let bad = |m: &str| CodegenError::Format(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], CodegenError> {
            let s = data.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != TABLE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_of(take(4)?);
        if version != TABLE_VERSION {
            return Err(CodegenError::Format(format!("unsupported version {version}")));
        }
        let nd = u32_of(take(4)?) as usize;
        if nd > 64 {
            return Err(bad("too many dimensions"));
        }
        let mut dims = Vec::with_capacity(nd);
        let mut first = Vec::with_capacity(nd);
        for _ in 0..nd {
            dims.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
            first.push(i64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
        }
        if u32_of(take(4)?) != 4 {
            return Err(bad("unsupported entry width"));
        }
        let fault = i32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        let n = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| bad("size overflow"))?;
        let body = take(n.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
        let entries = body.chunks(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if pos != data.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(CommandTable { dims, first, fault, entries })
    }
}

pub fn emit_table(spec: &CodegenSpec) -> Vec<u8> {
    CommandTable::from_spec(spec).to_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::QuantMap;
    use crate::rational::Rational;

    fn one_bit() -> (Controller, Quantization) {
        let q = Quantization::new(
            vec![QuantMap::uniform("x", Rational::zero(), Rational::one(), 1).unwrap()],
            vec![QuantMap::identity("u", 0, 1).unwrap()],
        );
        let k = Controller { num_actions: 2, layer: vec![1, 0], enabled: vec![0b10, 0] };
        (k, q)
    }

    #[test]
    fn one_bit_tree() {
        let (k, q) = one_bit();
        let spec = CodegenSpec::with_indices(&k, &q).unwrap();
        let t = DecisionTree::build(&spec).unwrap();
        assert_eq!(t.depth(), 1);
        assert!(t.region(&[0]));
        assert!(!t.region(&[1]));
        assert_eq!(t.eval(&[0]), 1);
        let c = CTables::parse(&emit_c(&spec).unwrap()).unwrap();
        assert_eq!(c.ctrl_law(&[0]), 1);
        assert!(!c.ctrl_region(&[1]));
        assert!(!c.ctrl_region(&[2]));
        assert_eq!(c.depth, 1);
    }

    #[test]
    fn empty_controller_rejected() {
        let (mut k, q) = one_bit();
        k.layer = vec![0, 0];
        k.enabled = vec![0, 0];
        let spec = CodegenSpec::with_indices(&k, &q).unwrap();
        assert_eq!(emit_c(&spec).unwrap_err(), CodegenError::EmptyController);
    }

    #[test]
    fn encoding_checked() {
        let (k, q) = one_bit();
        assert!(CodegenSpec::new(&k, &q, vec![3, 3], -1).is_err());
        assert!(CodegenSpec::new(&k, &q, vec![0, -1], -1).is_err());
        assert!(CodegenSpec::new(&k, &q, vec![0], -1).is_err());
    }

    #[test]
    fn two_state_table() {
        let (k, q) = one_bit();
        let spec = CodegenSpec::new(&k, &q, vec![10, 20], 99).unwrap();
        let t = CommandTable::from_spec(&spec);
        assert_eq!(t.entries, vec![20, 99]);
        let back = CommandTable::from_bytes(&emit_table(&spec)).unwrap();
        assert_eq!(back, t);
        assert!(CommandTable::from_bytes(&emit_table(&spec)[..10]).is_err());
    }
}
