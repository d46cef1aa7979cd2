"""Deep structural causal models with flow, amortised and Gumbel-max mechanisms."""

from .scm import Counterfactual, Node, Scm, Surrogate

__version__ = "0.1.0"

__all__ = ["Scm", "Node", "Surrogate", "Counterfactual", "__version__"]
