"""Recursive refinement fields: generators, rollout, path metrics and learned predictors."""
from .generators import (AffineGenerator, ConstantGenerator, IfsGenerator, NeuralCFG,
                         NeuralCfgHyper, contractivity_certificate, ifs_family, load_generator,
                         sample_neural_cfg)
from .hierarchy import Hierarchy, load_hierarchy, rollout, save_hierarchy, voronoi_cells
from .learn import (TrainConfig, affine_baseline, avg_residual_baseline, canonicalize_children,
                    learnable_const_baseline, train_cfp)
from .metric import MetricView, plan_truncation, tree_distance, truncation_gap
from .sampling import ReferencePacking, haar_sample, make_rng, reference_packing

__version__ = "0.1.0"
