"""gsaf: few-shot multi-modal trait regression with gradient-similarity
multi-source domain adaptation.

Subpackages:
  tensor    dense float64 autodiff tape
  align     word-anchored modality alignment and dataset IO
  model     the Bi-LSTM / attention / bilinear-fusion predictor
  adapt     the similarity-weighted adaptation trainer and baselines
  datakit   synthetic corpora, k-means domains, split plans
  harness   experiment sweeps, metrics, CSV artifacts
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
