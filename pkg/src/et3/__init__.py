"""Energy-guided test-time input transformation for adversarial robustness.

Small numpy classifiers, the energy ``-logsumexp(logits)`` and its input
gradient, projected energy descent on inputs, gradient attacks (PGD, FGSM,
BPDA), a checker for the single-step success conditions, a toy trainer and an
experiment harness.
"""
from .attacks import AttackConfig, AttackResult, bpda_attack, fgsm, pgd, worst_case
from .data import Dataset, concept_clusters, concept_means, gaussian_blobs, load_dataset, moons, save_dataset
from .defense import (PRESETS, DefenseConfig, NonFiniteGradientError, Pipeline, TransformResult, et3,
                      et3_with_proxy, norm_of)
from .energy import energy, energy_grad_input, energy_grad_logits, input_energy
from .harness import (ConfigError, ExperimentSpec, bundled_config, compare, parse_spec, run_experiment,
                      run_theorem_audit)
from .nets import (DimensionError, EmbeddingSimilarityClassifier, LinearClassifier, TwoLayerReluNet,
                   ZeroEmbeddingError, cosine_head, fd_jacobian, forward, input_jacobian, load_model, save_model)
from .theory import (ClusterSpec, TheoremReport, TheoremViolation, build_robust_cluster_net, check_theorem,
                     gradient_ratio, local_linearity_probe, random_theorem_instance, required_ratio, sample_clusters,
                     scatter_c_vs_margin, split_two_logit, theorem_alpha, theorem_audit)
from .trainer import ArchSpec, EvalReport, TrainConfig, evaluate_accuracy, train

__version__ = "0.1.0"
