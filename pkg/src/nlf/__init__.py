"""Neural parametric leaf model: shape space, deformation space, registration
and fitting on a small numpy autodiff engine."""

__version__ = "0.1.0"
