"""Region retrieval for whole-slide-image feature grids.

Offline: partition each slide's patch-feature grid into connected tissue
graphs, encode every graph into a short binary code with a hierarchical
graph-convolutional hash model. Online: answer queries by exact Hamming
ranking over the code index.
"""

from .config import PipelineConfig, derive_seed
from .errors import ConfigError, DataError, NumericError, SlideSearchError
from .graphs import (
    GraphLabel,
    Partition,
    TissueGraph,
    ees,
    extract_graphs,
    hac_partition,
    target_graph_count,
)
from .index import BinaryCodeIndex, RetrievalResult, build_index, hamming, load_index, query, save_index
from .ingest import (
    PatchAdjacency,
    PatchGrid,
    SyntheticSpec,
    generate_synthetic_wsi,
    load_patch_grid,
    patch_adjacency,
    save_patch_grid,
)
from .metrics import (
    RelevanceTable,
    average_precision_at_k,
    interpolated_pr_curve,
    mean_average_precision,
    precision_at_k,
)
from .model import (
    ForwardCache,
    GcnHashParams,
    GcnStack,
    ModelDims,
    binarize,
    diffpool,
    encode_graph,
    gcn_forward,
    init_params,
    load_checkpoint,
    normalize_adjacency,
    save_checkpoint,
)
from .pipeline import run_pipeline
from .train import (
    TrainConfig,
    finite_diff_check,
    hash_loss,
    loss_gradients,
    pairwise_label_matrix,
    train,
)

__version__ = "0.1.0"
