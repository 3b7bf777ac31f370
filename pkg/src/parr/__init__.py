"""Person attribute recognition and attribute-based retrieval.

A two-branch transformer recognizer (hierarchical windowed branch fused with
a plain patch branch) trained with BCE over sigmoid attribute probabilities,
plus small frozen-backbone adapters trained with an angular-margin softmax
that embed binary and pseudo-description queries into the same space as
person features for cosine retrieval.
"""

from .backbone import (
    BackboneConfig,
    BackboneOutput,
    CrossTransformerBackbone,
    grad_config,
    full_size_config,
    tiny_config,
)
from .errors import (
    AmbiguousQueryError,
    CheckpointError,
    ConfigError,
    DegenerateEmbeddingError,
    InvalidQueryError,
    ManifestError,
    NumericError,
    ParrError,
    ProviderError,
    SchemaError,
    TrainingDivergedError,
)
from .margin import (
    Adapter,
    AdapterConfig,
    CategoryTable,
    MarginParams,
    RetrievalHeads,
    RetrievalHeadsConfig,
    RetTrainConfig,
    encode_query,
    margin_loss,
    query_vector,
    total_loss,
    train_ret,
)
from .queries import (
    EmbeddingProvider,
    HashEmbeddingProvider,
    PseudoDescription,
    build_pseudo_description,
    hard_embed,
    soft_embed,
)
from .recognition import (
    ParTrainConfig,
    bce_loss,
    evaluate_par,
    metric_example_f1,
    metric_mean_accuracy,
    predict,
    train_par,
)
from .retrieval import (
    RankedResult,
    RetrievalIndex,
    build_index,
    evaluate_retrieval,
    metric_map,
    metric_rank_k,
    relevance,
    search,
)
from .schema import (
    Attribute,
    AttributeSchema,
    AttributeVector,
    TagBinding,
    demo_schema_full,
    demo_schema_small,
    load_schema,
    save_schema,
)
from .synth import Manifest, SynthConfig, decode_attributes, generate_dataset, render

__version__ = "0.1.0"
