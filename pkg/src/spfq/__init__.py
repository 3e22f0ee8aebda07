"""Stochastic path-following quantization for multilayer perceptrons."""

from .alphabet import Alphabet, QuantDraw, RandomStream, det_quantize, step_from_weights, stoc_quantize
from .align import (AlignResult, MinInfSolution, RankDeficientError, SimplexError, align_closed_form,
                    align_first_pass, align_order_r, solve_min_inf)
from .linalg import (ProjectionProduct, hadamard, project_complement, project_onto,
                     projection_product_norm, singular_extremes)
from .quantize import (LayerReport, NeuronQuantResult, QuantConfig, quantize_layer, quantize_neuron_fused,
                       quantize_neuron_gpfq, quantize_neuron_phase2)

__version__ = "0.1.0"
