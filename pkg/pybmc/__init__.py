"""
Balance memory and compute when growing the KV cache of a transformer.
"""

# flake8: noqa

__version__ = "0.1.0"
version_info = tuple(map(int, __version__.split(".")))

from ._coreutils import BmcError, CapacityExceededError, DivisibilityError
from ._coreutils import BoundsError, DimensionError, PlacementError
from ._coreutils import ConsistencyError, CalibrationError, NumericError

from ._types import ModelDims, AllocationPolicy, Iterative, Upfront, Bmc
from ._types import policy_from_name
from ._ledger import CostLedger
from ._cache import KvCache, new_cache, append_token
from ._cache import copy_total_closed_form, realloc_copy_closed_form

from .attention import BiasMask, AttentionQuery, build_bias_mask, sdpa
from .attention import attention_probs, sdpa_flops_closed_form
from .costmodel import CostParams, OptimalT, total_time, total_time_sd
from .costmodel import optimal_T, optimal_T_sd, calibrate
from .specdecode import SpeculationTree, AcceptanceResult
from .specdecode import admit_candidates, place_candidates, tree_mask
from .specdecode import greedy_accept, verify_and_commit, wasted_rows
from .sim import ToyModel, DecodeReport, IterationRecord
from .sim import generate, generate_speculative, exact_reference_attention
from .sim import SelfProposer, ScriptedProposer

from . import costmodel, report, bench
