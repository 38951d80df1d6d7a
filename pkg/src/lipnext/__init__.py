"""1-Lipschitz networks trained on the orthogonal manifold, with certification."""
from .linalg import OrthogonalParam, matrix_exp, polar_project, random_orthogonal, svd
from .model import LipNeXt, ModelSpec

__version__ = "0.1.0"

__all__ = ["OrthogonalParam", "matrix_exp", "polar_project", "random_orthogonal", "svd", "LipNeXt", "ModelSpec"]
