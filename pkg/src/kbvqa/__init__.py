"""Entity knowledge injection and attention explainability for bi-modal VQA,
at desk scale: embedding alignment, weakly supervised entity spans, injected
tokenization, a small trainable two-stream transformer, relevancy-map
explainers, and an experiment harness."""

__version__ = "0.1.0"
