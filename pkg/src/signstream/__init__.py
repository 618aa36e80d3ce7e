"""Multi-stream masked cluster prediction for sign-language feature sequences.

Four per-frame channels (face, left hand, right hand, body pose) are clustered
offline per channel; a transformer encoder learns to predict the cluster id of
masked cells from the rest.  The pretrained encoder then feeds frozen probes,
full fine-tuning or rank-1 adapters for downstream classification.
"""

from .adapt import (
    ClassifierHead,
    DownstreamModel,
    Hparams,
    LabeledSet,
    LayerWeights,
    TaskBank,
    classify,
    evaluate,
    export_features,
    recall_at_k,
    train_downstream,
    weighted_features,
)
from .cluster import ClusterModel, assign, assign_all, dump_cluster_samples, fit_kmeans
from .encoder import (
    Encoder,
    EncoderConfig,
    backward,
    build_encoder,
    forward,
    load_checkpoint,
    lora_param_fraction,
    masked_ce_loss,
    param_count,
    save_checkpoint,
)
from .featio import FeatureSequence, downsample, interpolate_missing, normalize_pose, read_msf, write_msf
from .masking import MaskPlan, Strategy, apply_mask, make_mask_plan
from .pretrain import TrainConfig, lr_at, make_batches, pretrain

__version__ = "0.1.0"
