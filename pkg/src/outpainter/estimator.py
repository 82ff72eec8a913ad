"""Estimator facade over the training and expansion pipeline.

Follows the scikit-learn conventions: constructor arguments are stored
verbatim and mirror RunConfig, `fit` trains and returns self, fitted state
lives in trailing-underscore attributes, and `get_params`/`set_params` come
from BaseEstimator so the object clones cleanly.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .backends import make_backend
from .conditioning import AblationFlags
from .config import RunConfig
from .pipeline import ExpansionState, expand, train


class LLMGuidedOutpainter(BaseEstimator):
    """Text-guided autoregressive outpainter with a fit/predict surface.

    `fit` consumes a prepared record store directory (see
    pipeline.prepare_dataset) and trains the denoiser plus fusion layers;
    `expand`/`predict` then grow a square input window step by step.  All
    constructor arguments double as hyperparameters for get_params.
    """

    def __init__(self, base_window=32, shift=16, mask_kept=1, mask_masked=1,
                 tokens=8, embed_dim=32, hidden=None, fusion_mode="dual",
                 imagine_count=4, base_channels=16, attn_levels=(1,),
                 downsample=4, timesteps=100, sample_steps=25, train_steps=200,
                 batch_size=8, learning_rate=2e-3, checkpoint_every=0, seed=0,
                 backend="stub", retries=3, backoff=0.5, workdir=None):
        self.base_window = base_window
        self.shift = shift
        self.mask_kept = mask_kept
        self.mask_masked = mask_masked
        self.tokens = tokens
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.fusion_mode = fusion_mode
        self.imagine_count = imagine_count
        self.base_channels = base_channels
        self.attn_levels = attn_levels
        self.downsample = downsample
        self.timesteps = timesteps
        self.sample_steps = sample_steps
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.checkpoint_every = checkpoint_every
        self.seed = seed
        self.backend = backend
        self.retries = retries
        self.backoff = backoff
        self.workdir = workdir

    def _run_config(self) -> RunConfig:
        params = self.get_params()
        params.pop("workdir")
        params["attn_levels"] = tuple(params["attn_levels"])
        return RunConfig(**params)

    def fit(self, store_dir, y=None, flags: AblationFlags | None = None, hook=None):
        """Train on a record store directory; `y` is ignored (API symmetry)."""
        config = self._run_config()
        out_dir = Path(self.workdir) if self.workdir else Path(tempfile.mkdtemp(prefix="outpaint_"))
        self.config_ = config
        self.out_dir_ = out_dir
        self.checkpoint_path_ = train(store_dir, out_dir, config, flags=flags, hook=hook)
        return self

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_path_"):
            raise NotFittedError(
                "this LLMGuidedOutpainter is not fitted yet; call fit with a record store first"
            )

    def expand(self, image, global_caption: str, steps: int, direction,
               backend=None, flags: AblationFlags | None = None, seed=0,
               hook=None) -> ExpansionState:
        """Grow `image` by `steps` shift-and-inpaint steps in `direction`."""
        self._check_fitted()
        if backend is None:
            skip_llm = flags is not None and not flags.use_local
            backend = None if skip_llm else make_backend(self.backend)
        return expand(image, global_caption, steps, direction, backend,
                      self.checkpoint_path_, flags=flags, seed=seed, hook=hook)

    def predict(self, image, global_caption: str, steps: int, direction,
                **kwargs) -> np.ndarray:
        """Like `expand`, returning just the grown canvas pixels."""
        return self.expand(image, global_caption, steps, direction, **kwargs).canvas.image
