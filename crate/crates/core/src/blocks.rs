//! Semantic blocks: the six-pattern intermediate representation, its text
//! grammar and schema checks.

use std::fmt;

use thiserror::Error;

use crate::kg::{KnowledgeGraph, Literal, LiteralKind, ID_ATTR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AggrOp {
    Count,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JoinOp {
    Intersection,
    Union,
    Exclude,
}

impl AggrOp {
    pub const ALL: [AggrOp; 2] = [AggrOp::Count, AggrOp::Average];

    pub fn name(self) -> &'static str {
        match self {
            AggrOp::Count => "count",
            AggrOp::Average => "average",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }
}

impl JoinOp {
    pub const ALL: [JoinOp; 3] = [JoinOp::Intersection, JoinOp::Union, JoinOp::Exclude];

    pub fn name(self) -> &'static str {
        match self {
            JoinOp::Intersection => "intersection",
            JoinOp::Union => "union",
            JoinOp::Exclude => "exclude",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }
}

/// The six block patterns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    Entity,
    Relation,
    Literal,
    Ordinal,
    Aggr,
    Join,
}

impl Pattern {
    pub const ALL: [Pattern; 6] = [
        Pattern::Entity,
        Pattern::Relation,
        Pattern::Literal,
        Pattern::Ordinal,
        Pattern::Aggr,
        Pattern::Join,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Entity => "entity",
            Pattern::Relation => "relation",
            Pattern::Literal => "literal",
            Pattern::Ordinal => "ordinal",
            Pattern::Aggr => "aggr",
            Pattern::Join => "join",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One semantic block. `V` is the constraint value type: a [`Literal`] in
/// ordinary sequences, a pointer or constant in decoder templates.
#[derive(Clone, Debug, PartialEq)]
pub enum SemanticBlock<V = Literal> {
    Entity {
        ty: String,
        constraint: Option<(String, V)>,
    },
    Relation {
        out: String,
        rel: String,
        input: String,
    },
    Literal {
        attr: String,
        ty: String,
    },
    Ordinal {
        op: String,
        ty: String,
    },
    Aggr {
        op: AggrOp,
        ty: String,
    },
    Join {
        op: JoinOp,
        ty: String,
    },
}

pub type BlockSequence = Vec<SemanticBlock>;

/// What a slot accepts.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SlotType {
    Entities(String),
    /// A numeric value projection over entities of this type.
    Values(String),
}

impl SlotType {
    pub fn ty(&self) -> &str {
        match self {
            SlotType::Entities(t) | SlotType::Values(t) => t,
        }
    }
}

impl fmt::Display for SlotType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotType::Entities(t) => write!(f, ":{t}"),
            SlotType::Values(t) => write!(f, ":{t} values"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OutputType {
    EntitySet(String),
    /// Attribute values of `kind` projected from entities of type `of`.
    ValueMultiset { of: String, kind: LiteralKind },
    Scalar,
}

impl fmt::Display for OutputType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputType::EntitySet(t) => write!(f, "entity-set({t})"),
            OutputType::ValueMultiset { kind, .. } => write!(f, "value-multiset({kind})"),
            OutputType::Scalar => f.write_str("scalar"),
        }
    }
}

impl<V> SemanticBlock<V> {
    pub fn pattern(&self) -> Pattern {
        match self {
            SemanticBlock::Entity { .. } => Pattern::Entity,
            SemanticBlock::Relation { .. } => Pattern::Relation,
            SemanticBlock::Literal { .. } => Pattern::Literal,
            SemanticBlock::Ordinal { .. } => Pattern::Ordinal,
            SemanticBlock::Aggr { .. } => Pattern::Aggr,
            SemanticBlock::Join { .. } => Pattern::Join,
        }
    }

    /// The type named in the block's last position (slot type, or the
    /// entity type for entity blocks).
    pub fn ty(&self) -> &str {
        match self {
            SemanticBlock::Entity { ty, .. } => ty,
            SemanticBlock::Relation { input, .. } => input,
            SemanticBlock::Literal { ty, .. }
            | SemanticBlock::Ordinal { ty, .. }
            | SemanticBlock::Aggr { ty, .. }
            | SemanticBlock::Join { ty, .. } => ty,
        }
    }

    /// Slots in left-to-right order.
    pub fn slots(&self) -> Vec<SlotType> {
        match self {
            SemanticBlock::Entity { .. } => vec![],
            SemanticBlock::Relation { input, .. } => vec![SlotType::Entities(input.clone())],
            SemanticBlock::Literal { ty, .. } | SemanticBlock::Ordinal { ty, .. } => {
                vec![SlotType::Entities(ty.clone())]
            }
            SemanticBlock::Aggr { op: AggrOp::Count, ty } => vec![SlotType::Entities(ty.clone())],
            SemanticBlock::Aggr { op: AggrOp::Average, ty } => vec![SlotType::Values(ty.clone())],
            SemanticBlock::Join { ty, .. } => {
                vec![SlotType::Entities(ty.clone()), SlotType::Entities(ty.clone())]
            }
        }
    }

    pub fn map_value<W>(&self, f: impl FnOnce(&V) -> W) -> SemanticBlock<W> {
        match self {
            SemanticBlock::Entity { ty, constraint } => SemanticBlock::Entity {
                ty: ty.clone(),
                constraint: constraint.as_ref().map(|(a, v)| (a.clone(), f(v))),
            },
            SemanticBlock::Relation { out, rel, input } => SemanticBlock::Relation {
                out: out.clone(),
                rel: rel.clone(),
                input: input.clone(),
            },
            SemanticBlock::Literal { attr, ty } => SemanticBlock::Literal {
                attr: attr.clone(),
                ty: ty.clone(),
            },
            SemanticBlock::Ordinal { op, ty } => SemanticBlock::Ordinal {
                op: op.clone(),
                ty: ty.clone(),
            },
            SemanticBlock::Aggr { op, ty } => SemanticBlock::Aggr { op: *op, ty: ty.clone() },
            SemanticBlock::Join { op, ty } => SemanticBlock::Join { op: *op, ty: ty.clone() },
        }
    }
}

/// Output type of a block under `kg`'s schema; `None` when the block does
/// not type-check.
pub fn block_output_type<V>(block: &SemanticBlock<V>, kg: &KnowledgeGraph) -> Option<OutputType> {
    match block {
        SemanticBlock::Entity { ty, .. } => Some(OutputType::EntitySet(ty.clone())),
        SemanticBlock::Relation { out, .. } => Some(OutputType::EntitySet(out.clone())),
        SemanticBlock::Literal { attr, ty } => match kg.literal_kind(attr, ty)? {
            LiteralKind::Boolean => Some(OutputType::EntitySet(ty.clone())),
            kind => Some(OutputType::ValueMultiset {
                of: ty.clone(),
                kind,
            }),
        },
        SemanticBlock::Ordinal { ty, .. } | SemanticBlock::Join { ty, .. } => {
            Some(OutputType::EntitySet(ty.clone()))
        }
        SemanticBlock::Aggr { .. } => Some(OutputType::Scalar),
    }
}

/// Whether a block with output `out` can fill `slot`.
pub fn fills(slot: &SlotType, out: &OutputType) -> bool {
    match (slot, out) {
        (SlotType::Entities(t), OutputType::EntitySet(u)) => t == u,
        (SlotType::Values(t), OutputType::ValueMultiset { of, kind }) => {
            t == of && kind.is_numeric()
        }
        _ => false,
    }
}

impl<V: fmt::Display> fmt::Display for SemanticBlock<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SemanticBlock::Entity { ty, constraint: None } => write!(f, "entity({ty})"),
            SemanticBlock::Entity {
                ty,
                constraint: Some((a, v)),
            } => write!(f, "entity({ty}, {a}, {v})"),
            SemanticBlock::Relation { out, rel, input } => {
                write!(f, "relation({out}, {rel}, :{input})")
            }
            SemanticBlock::Literal { attr, ty } => write!(f, "literal({attr}, :{ty})"),
            SemanticBlock::Ordinal { op, ty } => write!(f, "ordinal({op}, :{ty})"),
            SemanticBlock::Aggr { op, ty } => write!(f, "aggr({}, :{ty})", op.name()),
            SemanticBlock::Join { op, ty } => write!(f, "join({}, :{ty}, :{ty})", op.name()),
        }
    }
}

pub fn print_blocks<V: fmt::Display>(seq: &[SemanticBlock<V>]) -> String {
    seq.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("arity error at offset {offset}: {pattern} takes {expected} arguments, got {found}")]
    Arity {
        offset: usize,
        pattern: Pattern,
        expected: &'static str,
        found: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
enum Arg {
    Ident(String),
    Slot(String),
    Value(Literal),
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

fn ident_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, b'_' | b'-' | b'.')
}

impl Lexer<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn err(&self, message: impl Into<String>) -> BlockError {
        BlockError::Syntax {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), BlockError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", c as char)))
        }
    }

    fn word(&mut self) -> Result<String, BlockError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && ident_char(self.src[self.pos]) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected identifier"));
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn arg(&mut self) -> Result<Arg, BlockError> {
        match self.peek() {
            Some(b':') => {
                self.pos += 1;
                Ok(Arg::Slot(self.word()?))
            }
            Some(b'\'') => {
                let start = self.pos;
                self.pos += 1;
                let body = self.pos;
                while self.pos < self.src.len() && self.src[self.pos] != b'\'' {
                    self.pos += 1;
                }
                if self.pos >= self.src.len() {
                    self.pos = start;
                    return Err(self.err("unterminated quoted value"));
                }
                let s = String::from_utf8_lossy(&self.src[body..self.pos]).into_owned();
                self.pos += 1;
                Ok(Arg::Value(Literal::Text(s)))
            }
            Some(c) if c.is_ascii_digit() || c == b'-' => {
                let start = self.pos;
                let w = self.word()?;
                if let Ok(i) = w.parse::<i64>() {
                    Ok(Arg::Value(Literal::Integer(i)))
                } else if let Ok(x) = w.parse::<f64>() {
                    if x.is_finite() {
                        Ok(Arg::Value(Literal::Decimal(x)))
                    } else {
                        self.pos = start;
                        Err(self.err("non-finite number"))
                    }
                } else if c == b'-' {
                    self.pos = start;
                    Err(self.err("bad number"))
                } else {
                    Ok(Arg::Ident(w))
                }
            }
            Some(_) => Ok(Arg::Ident(self.word()?)),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

/// Parses whitespace-separated blocks. Input is case-folded.
pub fn parse_blocks(text: &str) -> Result<BlockSequence, BlockError> {
    let lower = text.to_lowercase();
    let mut lx = Lexer {
        src: lower.as_bytes(),
        pos: 0,
    };
    let mut out = Vec::new();
    while lx.peek().is_some() {
        out.push(parse_one(&mut lx)?);
    }
    if out.is_empty() {
        return Err(lx.err("empty block sequence"));
    }
    Ok(out)
}

/// Parses exactly one block.
pub fn parse_block(text: &str) -> Result<SemanticBlock, BlockError> {
    let mut seq = parse_blocks(text)?;
    if seq.len() != 1 {
        return Err(BlockError::Syntax {
            offset: 0,
            message: format!("expected one block, found {}", seq.len()),
        });
    }
    Ok(seq.remove(0))
}

fn parse_one(lx: &mut Lexer<'_>) -> Result<SemanticBlock, BlockError> {
    lx.skip_ws();
    let start = lx.pos;
    let name = lx.word()?;
    let pattern = Pattern::from_name(&name).ok_or_else(|| BlockError::Syntax {
        offset: start,
        message: format!("unknown pattern '{name}'"),
    })?;
    lx.expect(b'(')?;
    let mut args = vec![];
    let mut offsets = vec![];
    loop {
        lx.skip_ws();
        offsets.push(lx.pos);
        args.push(lx.arg()?);
        match lx.peek() {
            Some(b',') => lx.pos += 1,
            Some(b')') => {
                lx.pos += 1;
                break;
            }
            _ => return Err(lx.err("expected ',' or ')'")),
        }
    }
    let arity = |expected: &'static str| BlockError::Arity {
        offset: start,
        pattern,
        expected,
        found: args.len(),
    };
    let at = |i: usize, message: String| BlockError::Syntax {
        offset: offsets[i],
        message,
    };
    let ident = |i: usize| match &args[i] {
        Arg::Ident(s) => Ok(s.clone()),
        other => Err(at(i, format!("expected identifier, got {other:?}"))),
    };
    let slot = |i: usize| match &args[i] {
        Arg::Slot(s) => Ok(s.clone()),
        other => Err(at(i, format!("expected ':type' slot, got {other:?}"))),
    };
    Ok(match pattern {
        Pattern::Entity => match args.len() {
            1 => SemanticBlock::Entity {
                ty: ident(0)?,
                constraint: None,
            },
            3 => {
                let value = match &args[2] {
                    Arg::Value(v) => v.clone(),
                    other => return Err(at(2, format!("expected value, got {other:?}"))),
                };
                SemanticBlock::Entity {
                    ty: ident(0)?,
                    constraint: Some((ident(1)?, value)),
                }
            }
            _ => return Err(arity("1 or 3")),
        },
        Pattern::Relation => {
            if args.len() != 3 {
                return Err(arity("3"));
            }
            SemanticBlock::Relation {
                out: ident(0)?,
                rel: ident(1)?,
                input: slot(2)?,
            }
        }
        Pattern::Literal | Pattern::Ordinal | Pattern::Aggr => {
            if args.len() != 2 {
                return Err(arity("2"));
            }
            let (first, ty) = (ident(0)?, slot(1)?);
            match pattern {
                Pattern::Literal => SemanticBlock::Literal { attr: first, ty },
                Pattern::Ordinal => SemanticBlock::Ordinal { op: first, ty },
                _ => SemanticBlock::Aggr {
                    op: AggrOp::from_name(&first)
                        .ok_or_else(|| at(0, format!("unknown aggregate '{first}'")))?,
                    ty,
                },
            }
        }
        Pattern::Join => {
            if args.len() != 3 {
                return Err(arity("3"));
            }
            let first = ident(0)?;
            let op = JoinOp::from_name(&first)
                .ok_or_else(|| at(0, format!("unknown join '{first}'")))?;
            let (a, b) = (slot(1)?, slot(2)?);
            if a != b {
                return Err(at(2, format!("join slots differ: :{a} vs :{b}")));
            }
            SemanticBlock::Join { op, ty: a }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {}: {}", self.index, self.message)
    }
}

/// Schema violations of a single block, as messages.
pub fn block_violations(block: &SemanticBlock, kg: &KnowledgeGraph) -> Vec<String> {
    let mut v = Vec::new();
    let need_type = |t: &str, v: &mut Vec<String>| {
        if !kg.has_type(t) {
            v.push(format!("{t} is not a type"));
        }
    };
    match block {
        SemanticBlock::Entity { ty, constraint } => {
            need_type(ty, &mut v);
            if let Some((attr, value)) = constraint {
                match kg.literal_kind(attr, ty) {
                    None if kg.has_type(ty) => {
                        v.push(format!("{attr} is not a literal relation of {ty}"))
                    }
                    None => {}
                    Some(kind) => {
                        if value.coerce(kind).is_none() {
                            v.push(format!("{value} is not a {kind} value for {attr}"));
                        } else if attr == ID_ATTR {
                            if let Literal::Text(id) = value {
                                if kg.type_of(id) != Some(ty) {
                                    v.push(format!("no {ty} entity with id '{id}'"));
                                }
                            }
                        }
                    }
                }
            }
        }
        SemanticBlock::Relation { out, rel, input } => {
            need_type(out, &mut v);
            need_type(input, &mut v);
            if !kg.is_entity_relation(rel) {
                v.push(format!("{rel} is not an entity relation"));
            } else if !kg.entity_signatures(rel).any(|s| {
                let r = s.range_type().unwrap_or_default();
                (s.domain == *out && r == input) || (s.domain == *input && r == out)
            }) {
                v.push(format!("{rel} does not connect {out} and {input}"));
            }
        }
        SemanticBlock::Literal { attr, ty } => {
            need_type(ty, &mut v);
            if kg.has_type(ty) && kg.literal_kind(attr, ty).is_none() {
                v.push(format!("{attr} is not a literal relation of {ty}"));
            }
        }
        SemanticBlock::Ordinal { ty, .. } | SemanticBlock::Join { ty, .. } => {
            need_type(ty, &mut v)
        }
        SemanticBlock::Aggr { op, ty } => {
            need_type(ty, &mut v);
            if *op == AggrOp::Average
                && kg.has_type(ty)
                && !kg.attributes_of(ty).any(|(_, k)| k.is_numeric())
            {
                v.push(format!("{ty} has no numeric attribute to average"));
            }
        }
    }
    v
}

/// Every schema violation in `seq`; empty iff all blocks are valid.
pub fn validate_blocks(seq: &[SemanticBlock], kg: &KnowledgeGraph) -> Vec<Violation> {
    seq.iter()
        .enumerate()
        .flat_map(|(index, b)| {
            block_violations(b, kg)
                .into_iter()
                .map(move |message| Violation { index, message })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const GEO: &str = "literal(major, :city) relation(city, loc, :state) ordinal(smallest, :state) relation(state, loc, :country) entity(country, id, 'usa')";
    const ATIS: &str = "entity(flight) relation(flight, from, :city) entity(city, id, 'dallas') relation(flight, to, :city) entity(city, id, 'pittsburgh') entity(flight, day_number, '08') entity(flight, month, 'july')";

    #[test]
    fn table_notation_parses_and_prints_canonically() {
        let seq = parse_blocks(GEO).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(print_blocks(&seq), GEO);
        let spaced = "literal (major, : city) relation (city, loc, : state) ordinal (smallest, : state) relation (state, loc, : country) entity(country, id, 'usa')";
        assert_eq!(print_blocks(&parse_blocks(spaced).unwrap()), GEO);
        assert_eq!(print_blocks(&parse_blocks(ATIS).unwrap()), ATIS);
    }

    #[test]
    fn bare_entity_has_no_constraint() {
        assert_eq!(
            parse_blocks("entity(flight)").unwrap(),
            vec![SemanticBlock::Entity {
                ty: "flight".into(),
                constraint: None
            }]
        );
    }

    #[test]
    fn whitespace_is_normalised() {
        let seq = parse_blocks("aggr( count , :river )").unwrap();
        assert_eq!(print_blocks(&seq), "aggr(count, :river)");
        assert_eq!(print_blocks::<Literal>(&[]), "");
    }

    #[test]
    fn errors_carry_offsets() {
        assert!(matches!(
            parse_blocks("relation(city, loc)"),
            Err(BlockError::Arity { found: 2, .. })
        ));
        assert!(matches!(parse_blocks(""), Err(BlockError::Syntax { offset: 0, .. })));
        match parse_blocks("entity(city) relation(city loc, :state)") {
            Err(BlockError::Syntax { offset, .. }) => assert_eq!(offset, 27),
            other => panic!("{other:?}"),
        }
        assert!(parse_blocks("entity(city, id, 'x)").is_err());
        assert!(parse_blocks("join(union, :city, :state)").is_err());
        assert!(parse_blocks("frobnicate(city)").is_err());
    }

    #[test]
    fn mixed_case_is_folded() {
        let seq = parse_blocks("Entity(State, ID, 'Texas')").unwrap();
        assert_eq!(print_blocks(&seq), "entity(state, id, 'texas')");
    }

    #[test]
    fn output_types_follow_the_pattern() {
        let kg = KnowledgeGraph::parse(
            "type\triver\ntype\tcity\nattr\tlen\triver\t->\tdecimal\nattr\tmajor\tcity\t->\tboolean\n",
        )
        .unwrap();
        let ot = |s: &str| block_output_type(&parse_block(s).unwrap(), &kg);
        assert_eq!(ot("aggr(count, :city)"), Some(OutputType::Scalar));
        assert_eq!(ot("literal(len, :river)"), Some(OutputType::ValueMultiset {
            of: "river".into(),
            kind: LiteralKind::Decimal
        }));
        assert_eq!(ot("literal(major, :city)"), Some(OutputType::EntitySet("city".into())));
        assert_eq!(ot("entity(river)"), Some(OutputType::EntitySet("river".into())));
    }
}
