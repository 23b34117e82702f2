"""Concept-based probing of fixed image classifiers.

The package discovers visual concepts for each class of a frozen
classifier (superpixel segments clustered in a latent layer), scores
their influence on class logits with CAV ensembles, organizes the
retained concepts into a navigable concept space, and serves immutable
pipeline snapshots over HTTP.
"""

from .analytics import (
    ConceptPresence,
    ConfusionMatrix,
    InstanceInfluenceRow,
    accuracy_histogram,
    class_concept_summary,
    concept_presence,
    confusion,
    instance_influence,
    order_instances,
)
from .clustering import (
    ClusteringConfig,
    ConceptCluster,
    cluster_concepts,
    concept_similarity,
    select_cluster_count,
    silhouette_score,
)
from .data import (
    DatasetManifest,
    InstanceMeta,
    compute_channel_means,
    load_image,
    load_manifest,
    sample_class_images,
)
from .discovery import ConceptRecord, discover_concepts, embed_patches, kmeans
from .layout import (
    ClassPoint,
    Clique,
    HexAssignment,
    build_cliques,
    cluster_boundaries,
    isomatch_layout,
    solve_assignment,
    tsne_embed,
)
from .model import (
    LayerSpec,
    ModelGraph,
    Prediction,
    forward,
    gradient_at_layer,
    load_model,
    predict_all,
    save_model,
)
from .pipeline import PipelineConfig, PipelineRunner, RunStatus, run_pipeline
from .planted import build_planted_fixture
from .segmentation import Patch, Segment, extract_segments, segment_to_patch, slic
from .snapshot import ConceptSpaceSnapshot, load_snapshot, save_snapshot
from .tcav import (
    Cav,
    InfluenceSample,
    TcavStats,
    build_counterexample_pool,
    directional_derivative,
    filter_concepts,
    tcav_ensemble,
    tcav_score,
    train_cav,
)

__version__ = "0.1.0"
