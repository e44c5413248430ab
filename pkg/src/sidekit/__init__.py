"""sidekit: vector quantizers, semantic IDs, table-free SID embeddings,
a multi-task VQ-fusion autoencoder, and the evaluation harness around them."""

from .nn_core import (
    AdamState,
    GraphError,
    NonFiniteError,
    ParamStore,
    TrainingDiverged,
    adam_step,
    backward,
    load_checkpoint,
    save_checkpoint,
    stop_gradient,
)
from .quantizers import (
    DpcaStack,
    FsqConfig,
    KMeansCodebook,
    LineCodebook,
    QuantizerError,
    dpca_decode,
    dpca_encode,
    fsq_quantize,
    kmeans_assign,
    kmeans_assign_topk,
    kmeans_fit,
    product_join,
    product_split,
    residual_fit,
    residual_quantize,
    structured_assign,
)
from .sid_codec import (
    SidError,
    SidScheme,
    pack,
    pack_all,
    read_sid_file,
    sid_hash,
    side_embed,
    unpack,
    unpack_all,
    write_sid_file,
)
from .fusion_vae import (
    FusionError,
    FusionModel,
    FusionSpec,
    QuantizerSpec,
    SignalSpec,
    TrainConfig,
    encode_corpus,
    fusion_loss,
    train,
)
from .metrics import (
    MetricError,
    NEReport,
    RecallReport,
    cosine_recon_loss,
    cosine_topk,
    delta_percent,
    knn_ground_truth,
    normalized_entropy,
    random_baseline_recall,
    recall_at_k,
)

__version__ = "0.1.0"
