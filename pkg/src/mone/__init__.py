"""Expert pruning for toy mixture-of-experts LMs with constant novice replacement."""

from .calibration import CalibrationRun, ExpertAccumulator, ExpertSummary, finalize, merge, observe, run_calibration
from .checkpoint import load_checkpoint, model_fingerprint, save_checkpoint
from .corpus import Corpus, markov_corpus
from .model import MoEModel, ModelConfig, MoNELayer, init_model, model_forward, moe_forward, route
from .pruning import PruningPlan, apply_plan, build_plan, mone_forward, param_counts
from .redundancy import LayerScores, ScoreMethod, phi_freq, phi_fused, phi_var, score_layer, select_prune_set

__version__ = "0.1.0"
