"""Order-agnostic autoregressive distribution estimation with an interleaved-input Transformer."""
from deformer.model import (DEformer, HeadConfig, ModelConfig, OrderedSample, build_mask, forward_heads,
                            nll_continuous, nll_discrete, shuffle_ordering)
from deformer.transformer import TransformerConfig

__all__ = ["DEformer", "HeadConfig", "ModelConfig", "OrderedSample", "TransformerConfig", "build_mask",
           "forward_heads", "nll_continuous", "nll_discrete", "shuffle_ordering"]
__version__ = "0.1.0"
