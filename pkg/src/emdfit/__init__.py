"""Earth Mover's Distance estimation with Lipschitz-constrained networks
and minimax geometric shape fitting."""

__version__ = "0.1.0"

from .errors import (ConfigError, DivergenceError, EmdfitError, InputError,
                     NumericalError)
from .events import (Event, gen_circle_event, gen_subjet_event,
                     gen_triangle_ellipse_event, load_event, normalize,
                     save_event)
from .fitter import (Adam, FitConfig, FitStep, FitTrace, estimate_emd, fit,
                     kr_objective, potential_heatmap, theta_forces)
from .lipnet import (DenseLayer, LipschitzMLP, constrain_weights, group_sort,
                     lipschitz_ratio_check, load_checkpoint, op_norm_inf_inf,
                     op_norm_p_inf, save_checkpoint)
from .ot import (DiscreteMeasure, TransportPlan, cost_matrix, emd_1d,
                 exact_emd, sinkhorn_emd)
from .shapes import (ShapeSpec, WeightedSample, load_shape_spec, sample,
                     sample_graph, sample_jacobian_check, save_shape_spec)

__all__ = [
    "Adam", "ConfigError", "DenseLayer", "DiscreteMeasure", "DivergenceError",
    "EmdfitError", "Event", "FitConfig", "FitStep", "FitTrace", "InputError",
    "LipschitzMLP", "NumericalError", "ShapeSpec", "TransportPlan",
    "WeightedSample", "constrain_weights", "cost_matrix", "emd_1d",
    "estimate_emd", "exact_emd", "fit", "gen_circle_event", "gen_subjet_event",
    "gen_triangle_ellipse_event", "group_sort", "kr_objective",
    "lipschitz_ratio_check", "load_checkpoint", "load_event",
    "load_shape_spec", "normalize", "op_norm_inf_inf", "op_norm_p_inf",
    "potential_heatmap", "sample", "sample_graph", "sample_jacobian_check",
    "save_checkpoint", "save_event", "save_shape_spec", "sinkhorn_emd",
    "theta_forces",
]
