"""Cross-task RSVP-EEG decoding engine.

Subpackages: tensor (autodiff), optim (Adam), signal (preprocessing),
data (datasets, bundles, synthetic generator), model (EEG feature
extractor), prompt (language-image head over frozen embeddings),
attention (cross bidirectional attention), fusion (fusion module and
losses), net (whole-model assembly), train (two-stage protocol, metrics,
cross-task runner), checkpoint / ioutil (binary containers), cli.
"""

from .model import ModelConfig, desk_config
from .tensor import Tensor

__all__ = ["ModelConfig", "Tensor", "desk_config"]
__version__ = "0.1.0"
