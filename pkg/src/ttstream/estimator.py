"""scikit-learn style front end for streaming recognition.

:class:`StreamingTransducer` wraps model loading, streaming encoding and
decoding behind ``fit`` / ``transform`` / ``predict`` so it composes with
``sklearn.pipeline`` and ``get_params`` / ``set_params`` tooling. There is
no training: ``fit`` only materialises the weights (from a checkpoint or a
seeded random initialisation) and validates the configuration.
"""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .core import DTYPE
from .encoder import encode_offline
from .maskgen import MaskSpec
from .model import ModelConfig
from .modelio import load_checkpoint, random_init
from .quant import quantize_model
from .streaming import encode_streaming
from .transducer import beam_search, greedy_decode, transducer_forward_logprob

__all__ = ["StreamingTransducer", "check_features", "check_utterances"]


def check_features(x, input_dim=None):
    """Validate one utterance: finite 2-D float32 array of ``T x input_dim``."""
    x = check_array(x, dtype=DTYPE, ensure_2d=True, order="C")
    if input_dim is not None and x.shape[1] != input_dim:
        raise ValueError(f"expected {input_dim} feature dims, got {x.shape[1]}")
    return x


def check_utterances(X, input_dim=None):
    """Accept one ``T x D`` array or a sequence of them; always return a list."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    return [check_features(x, input_dim) for x in X]


class StreamingTransducer(TransformerMixin, BaseEstimator):
    """Chunk-streaming transducer recognizer.

    Parameters
    ----------
    checkpoint : str, optional
        Path of a saved checkpoint. When omitted, weights come from
        ``random_init(config, seed)``.
    config : dict or ModelConfig, optional
        Architecture for random initialisation.
    seed : int
    chunk_size, history_window : int
        Attention mask; ``history_window=None`` is unbounded.
    block_size : int, optional
        Frames encoded per call (multiple of ``chunk_size``); speed only.
    decode : {"greedy", "beam"}
    beam_width : int
    precision : {"f32", "int8"}
    offline : bool
        Encode whole utterances with the masked offline path instead of
        streaming. Outputs agree to float32 rounding.
    """

    def __init__(self, checkpoint=None, config=None, seed=0, chunk_size=4, history_window=60,
                 block_size=None, decode="greedy", beam_width=5, precision="f32", offline=False):
        self.checkpoint = checkpoint
        self.config = config
        self.seed = seed
        self.chunk_size = chunk_size
        self.history_window = history_window
        self.block_size = block_size
        self.decode = decode
        self.beam_width = beam_width
        self.precision = precision
        self.offline = offline

    def fit(self, X=None, y=None):
        if self.decode not in ("greedy", "beam"):
            raise ValueError(f"decode must be 'greedy' or 'beam', got {self.decode!r}")
        if self.precision not in ("f32", "int8"):
            raise ValueError(f"precision must be 'f32' or 'int8', got {self.precision!r}")
        if self.checkpoint is not None:
            model = load_checkpoint(self.checkpoint)
        else:
            config = self.config
            if config is None:
                config = ModelConfig()
            elif isinstance(config, dict):
                config = ModelConfig.from_dict(config)
            model = random_init(config, self.seed)
        if self.precision == "int8" and not model.quantized:
            model = quantize_model(model)
        self.model_ = model
        self.spec_ = MaskSpec(self.chunk_size, self.history_window)
        self.n_features_in_ = model.config.encoder.input_dim
        return self

    def _encode(self, x):
        if self.offline:
            return encode_offline(x, self.model_, self.spec_)
        return encode_streaming(x, self.model_, self.spec_, self.block_size)

    def transform(self, X):
        """Encoder outputs, one ``T x d_model`` array per utterance."""
        check_is_fitted(self, "model_")
        return [self._encode(x) for x in check_utterances(X, self.n_features_in_)]

    def predict_nbest(self, X):
        check_is_fitted(self, "model_")
        out = []
        for enc in self.transform(X):
            if self.decode == "beam":
                out.append(beam_search(enc, self.model_, self.beam_width))
            else:
                tokens = greedy_decode(enc, self.model_)
                out.append([(tokens, transducer_forward_logprob(enc, tokens, self.model_))])
        return out

    def predict(self, X):
        """Best token sequence per utterance."""
        return [nbest[0][0] for nbest in self.predict_nbest(X)]

    def score(self, X, y):
        """Mean per-utterance ``log P(y | x)``."""
        encs = self.transform(X)
        return float(np.mean([transducer_forward_logprob(e, labels, self.model_)
                              for e, labels in zip(encs, y)]))
