"""Cross-lingual topic modeling with LLM-refined topic words, weighted-MMD
topic-word alignment and embedding-based document-topic alignment."""

__version__ = "0.1.0"
