"""Word-level neural language modeling with an implicit cache pointer output
layer, on LSTM and Transformer backbones: training, perplexity evaluation,
rare-word analysis, and N-best rescoring."""

__version__ = "0.1.0"
