"""Multimodal visualization-of-thought at desk scale: grid-world tasks,
interleaved text/image token datasets, a tiny numpy transformer trained with
cross-entropy plus token discrepancy, recursive interleaved decoding and
visualization metrics."""

__version__ = "0.1.0"
