"""Expert-label-driven metric learning and whitened diffusion embeddings."""

from .dataset import (DataMatrix, PolarityMap, ReferenceSet, apply_weights,
                      depolarize, load_matrix, preprocess, save_matrix,
                      select_reference, standardize)
from .cogeometry import (AffinityMatrix, Imputation, PartitionTree, TreeConfig,
                         build_partition_tree, cosine_affinity, coupled_refine,
                         impute, tree_emd_distance)
from .expert import (LabelFunction, LabelMap, PseudopointSet, export_centroids,
                     extract_pseudopoints, import_labels, propagate_labels)
from .netens import (HyperRanges, Net, NetEnsemble, NetHyper, dnn_distance,
                     ensemble_rank, lipschitz_bound, net_forward,
                     pretrain_autoencoder, representation, train_backprop,
                     train_ensemble)
from .spectral import (Embedding, Kernel, diffusion_embed, gaussian_kernel,
                       markov_normalize, nystrom_extend)
from .whiten import (LocalMoments, extend_standardized, local_moments,
                     standardized_embedding, whitened_distance)
from .synth import SynthConfig, acceptance_fixture, generate
from .errors import (BoundViolation, ExpertMapError, InternalError, ParseError,
                     TrainingDiverged, ValidationError)

__version__ = "0.1.0"
