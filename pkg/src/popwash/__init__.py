"""popwash: deterministic population training with pluggable coordination.

Train N small classifiers in lockstep while coordinating them with
stochastic parameter shuffling, consensus-EMA pulls, or periodic full
averaging, and measure what each strategy costs in communication and
buys in weight-averageability.
"""

from .coordination import (CommLedger, ShufflePlan, StrategyConfig, apply_shuffle,
                           expected_comm_fraction, layer_probability, papa_all_step,
                           papa_ema_step, sample_shuffle_plan)
from .errors import NumericAbort, ShapeMismatchError, ValidationError
from .evaluation import (EvalSummary, MetricsRecord, ensemble_accuracy, averaged_model,
                         evaluate_population, greedy_soup, interpolation_grid)
from .nn import (Batch, Dataset, NetSpec, accuracy, forward, init_params, loss_and_grad,
                 make_heterogeneous_stream, make_synthetic)
from .optim import OptState, cosine_lr, sgd_step
from .params import (LayeredParams, ParamLayout, PopulationView, consensus_distance,
                     consensus_mean, interpolate, weighted_average)
from .population import (DataConfig, OptConfig, RunConfig, RunResult, resume,
                         train_population)
from .rng import derive_seed, substream
from .toy2d import Landscape, classify_endpoint, run_toy

__version__ = "0.1.0"
