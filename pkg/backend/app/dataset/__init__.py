"""Preference pairs: JSONL ingestion, synthetic corpus, annotated storage, median-gap split."""
