"""Low-rank non-negative tensor mixtures as triplet distributions.

A library plus CLI for learning (subject, predicate, object)
distributions as normalized CP decompositions with tensor-free
gradients, a frequency prior, a missing-annotation selection gate, and
a recall@N evaluation harness on synthetic relation scenes.
"""

from .cpdist import CpGrad, CpScores, log_partition, log_prob, marginal, mixture_weights, nll_gradient, nll_loss, sample
from .data import DatasetMeta, GenSpec, PairSample, Scene, SceneObject, gen_synthetic, load_dataset, save_dataset
from .evaluation import EvalReport, Prediction, evaluate, recall_at_n, score_pairs, select_free_k
from .network import ForwardCache, ModelParams, backward, forward, init_params, sel_backward, sel_forward
from .prior import PriorTensor, build_prior, fuse, prior_log_value
from .tensor3 import DenseTensor, Shape3, TripletIndex, dense_from_cp, elementwise_product, normalize, tensor_sum, top_k_entries
from .training import TrainConfig, TrainedModel, clip_gradients, load_model, save_model, train_selection, train_triplet

__version__ = "0.1.0"
