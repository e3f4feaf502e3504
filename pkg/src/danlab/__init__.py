"""Deep adaptation networks: frozen base filters recombined per task by small controllers."""

from .bars import BarsConfig, BarsData, Dataset, gen_bars, scenario_setup, toy_network
from .dan import (
    Architecture,
    ControllerModule,
    ConvSpec,
    DanNetwork,
    adapt_filters,
    init_controller,
    parameter_cost,
    set_alpha,
    switched_conv,
)
from .quant import QuantSpec, quantize_linear, quantize_model
from .tensor import FilterBank, ShapeError, Tensor, conv2d
from .train import OptimizerConfig, evaluate, run_trials, train

__version__ = "0.1.0"
