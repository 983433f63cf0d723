"""Synthetic-query pipeline and retrieval toolkit for legal passage search."""

from ._base import DataError, Ranking, Retriever, RunList, __version__
from .contrastive import InfoNCEBatch, ToyEncoder, TrainingExample, infonce_grad, infonce_loss, mine_hard_negatives, train_toy
from .corpus import Corpus, LegalDocument, Passage, PassageChunker, chunk_passage, ingest_documents, tokenize
from .dense import DenseRetriever, EmbeddingProvider, PseudoEmbedder, dense_search, pseudo_embed
from .late_interaction import (
    CompressedLateInteractionIndex,
    MultiVectorDoc,
    ResidualQuantizer,
    TokenEncoder,
    fit_quantizer,
    maxsim_score,
)
from .metrics import evaluate_run, f_beta_at_k, hit_rates, map_at_k, mrr_at_k, recall_at_k
from .pretrain import PretrainPair, apply_masking, sample_pairs, serialize_pairs
from .query_filter import FilterReport, filter_queries, recovery_filter, self_reference_filter
from .query_gen import (
    AspectQuery,
    CompletionBackend,
    GenerationResult,
    HTTPCompletionBackend,
    MockBackend,
    SyntheticQuery,
    build_prompt,
    generate_for_corpus,
    parse_generation,
)
from .sparse import BM25Retriever

__all__ = [name for name in dir() if not name.startswith("_")]
