//! Semantic-block question answering over typed knowledge graphs.
//!
//! Questions are linked against a KG, turned into a question graph, and
//! decoded into a sequence of semantic blocks that assembles into a query
//! graph and executes against the KG.

pub mod blocks;
pub mod convert;
pub mod corpus;
pub mod encoder;
pub mod graph2seq;
pub mod kg;
pub mod prep;
pub mod query;
pub mod tensor;
pub mod train;

pub use blocks::{
    block_output_type, parse_blocks, print_blocks, validate_blocks, AggrOp, BlockError, BlockSequence, JoinOp,
    OutputType, Pattern, SemanticBlock, SlotType, Violation,
};
pub use convert::{atis_to_blocks, geo_to_blocks, parse_atis, parse_geo, ConvertError, PredicateTable};
pub use corpus::{generate, random_sequence, split, Domain, Example, Fixture};
pub use encoder::{BioLabel, EncoderConfig, Tagger, TaggerError};
pub use graph2seq::{Graph2Seq, ModelConfig, ModelError, Pooling};
pub use kg::{load_kg, KgError, KnowledgeGraph, Literal, LiteralKind};
pub use prep::{build_context, GraphMode, Lexicon, QuestionContext, QuestionGraph};
pub use query::{
    assemble, execute, legal_next, AnswerSet, AssemblyError, AssemblyState, ExecError, LegalNext, OrdinalLexicon,
    SemanticQueryGraph,
};
pub use tensor::{ParameterStore, Tape, Tensor, TensorError};
pub use train::{evaluate, train, CorpusStats, EvalReport, TrainConfig, TrainError};
