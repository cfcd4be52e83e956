"""caadnn: certified FP rounding-error bounds for neural-network inference.

Evaluates a trained sequential network in a combined absolute/relative
affine arithmetic layered over outward-rounded interval arithmetic,
producing per-output error bounds in units of u = 2^(1-k) that hold for
every precision k up to a configured ceiling, and deriving the minimal
precision that provably prevents misclassification for a given confidence
margin.
"""

from .interval import (DEFAULT_PRECISION_BITS, DomainError, IAContext,
                       Interval, ia_binary, ia_unary)
from .fpformat import (FpContext, FpFormat, RangeFlagError, fp_op,
                       parse_pow2, round_nearest)
from .caa import (PropagationTerms, Quantity, attach_bounds, caa_add,
                  caa_div, caa_exp, caa_log, caa_max, caa_min, caa_mul,
                  caa_neg, caa_sqrt, caa_sub, caa_tanh, clamp_range,
                  mk_const, mk_input, propagation_terms, refine)
from .model import (InputTensor, ModelError, ModelSchemaError, ModelSpec,
                    ShapeError, TensorSpec, infer_shapes, load_model,
                    load_tensor, save_model)
from .engine import (CaaTensor, EngineConfig, LayerSummary, ModelEvaluator,
                     run_model, tensor_from_input)
from .analysis import (SOFTMAX_PROPAGATION_FACTOR, AnalysisReport, Margin,
                       StabilityVerdict, argmax_stability, build_report,
                       emit_report, margins_from_confidence,
                       required_precision, softmax_input_tolerance)

__version__ = "0.1.0"
