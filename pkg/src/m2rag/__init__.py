"""Multi-modal retrieval-augmented generation engine: curation, In-Doc retrieval,
interleaved generation and judge-based evaluation."""

__version__ = "0.1.0"
