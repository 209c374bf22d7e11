"""Multi-task learning laboratory for translation quality estimation.

Core pieces: dense linear algebra for small Gram systems (`linalg`),
gradient-aggregation heuristics (`aggregators`), a compact three-head
encoder with exact manual gradients (`model`), AdamW with a linear
warmup/decay schedule (`optim`), dataset derivation and synthesis
(`data`), evaluation measures (`metrics`), and the experiment driver
(`experiment`, `cli`).
"""

__version__ = "0.1.0"

from . import aggregators, data, linalg, metrics, model, optim

__all__ = ["aggregators", "data", "linalg", "metrics", "model", "optim", "__version__"]
